//! Deterministic Dec-POMDP environments: Predator-Prey and Urban Search & Rescue.
//!
//! States are plain values; `step` returns a new state and never mutates its
//! input, so replaying the same actions from the same reset reproduces a
//! trace exactly.

pub mod pp;
pub mod usar;

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use pp::{PpState, PredatorPreyConfig};
pub use usar::{Color, Feedback, UsarConfig, UsarState};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("action {action} for agent {agent} is outside 0..{n_actions}")]
    ActionRange {
        agent: usize,
        action: usize,
        n_actions: usize,
    },
    #[error("state does not belong to this environment")]
    StateKind,
    #[error("unknown environment preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One agent's observation vector; entries lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(Vec<f64>);

impl Observation {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    PredatorPrey(PredatorPreyConfig),
    Usar(UsarConfig),
}

impl EnvConfig {
    pub const PRESETS: [&'static str; 4] = ["pp_v0", "pp_v1", "pp10_v1", "usar"];

    pub fn preset(name: &str) -> Result<Self, EnvError> {
        let pp = |grid, vision, max_steps| {
            EnvConfig::PredatorPrey(PredatorPreyConfig {
                grid,
                vision,
                max_steps,
                ..Default::default()
            })
        };
        match name {
            "pp_v0" => Ok(pp(5, 0, 20)),
            "pp_v1" => Ok(pp(5, 1, 20)),
            "pp10_v1" => Ok(pp(10, 1, 40)),
            "usar" => Ok(EnvConfig::Usar(UsarConfig::default())),
            other => Err(EnvError::UnknownPreset(other.to_string())),
        }
    }

    /// Short name used in dataset keys, e.g. `pp_v0`, `pp10_v1`, `usar`.
    pub fn tag(&self) -> String {
        match self {
            EnvConfig::PredatorPrey(c) if c.grid == 5 => format!("pp_v{}", c.vision),
            EnvConfig::PredatorPrey(c) => format!("pp{}_v{}", c.grid, c.vision),
            EnvConfig::Usar(_) => "usar".to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            EnvConfig::PredatorPrey(c) => c.validate(),
            EnvConfig::Usar(c) => c.validate(),
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            EnvConfig::PredatorPrey(c) => c.n_predators,
            EnvConfig::Usar(c) => c.n_agents(),
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            EnvConfig::PredatorPrey(_) => pp::N_ACTIONS,
            EnvConfig::Usar(c) => c.n_actions(),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            EnvConfig::PredatorPrey(c) => c.obs_dim(),
            EnvConfig::Usar(c) => c.obs_dim(),
        }
    }

    pub fn max_steps(&self) -> usize {
        match self {
            EnvConfig::PredatorPrey(c) => c.max_steps,
            EnvConfig::Usar(c) => c.max_steps,
        }
    }

    /// Idle action: `stay` in Predator-Prey, "move" to the current room in USAR.
    pub fn noop_action(&self, state: &EnvState, agent: usize) -> usize {
        match state {
            EnvState::Usar(s) => s.agent_rooms[agent],
            EnvState::PredatorPrey(_) => pp::STAY,
        }
    }

    pub fn pp(&self) -> Option<&PredatorPreyConfig> {
        match self {
            EnvConfig::PredatorPrey(c) => Some(c),
            EnvConfig::Usar(_) => None,
        }
    }

    pub fn usar(&self) -> Option<&UsarConfig> {
        match self {
            EnvConfig::Usar(c) => Some(c),
            EnvConfig::PredatorPrey(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case")]
pub enum EnvState {
    PredatorPrey(PpState),
    Usar(UsarState),
}

impl EnvState {
    pub fn t(&self) -> usize {
        match self {
            EnvState::PredatorPrey(s) => s.t,
            EnvState::Usar(s) => s.t,
        }
    }

    pub fn pp(&self) -> Option<&PpState> {
        match self {
            EnvState::PredatorPrey(s) => Some(s),
            EnvState::Usar(_) => None,
        }
    }

    pub fn usar(&self) -> Option<&UsarState> {
        match self {
            EnvState::Usar(s) => Some(s),
            EnvState::PredatorPrey(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub rewards: Vec<f64>,
    pub done: bool,
}

/// A validated environment configuration with the reset/step/observe contract.
#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    config: EnvConfig,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn preset(name: &str) -> Result<Self, EnvError> {
        Self::new(EnvConfig::preset(name)?)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn tag(&self) -> String {
        self.config.tag()
    }

    pub fn n_agents(&self) -> usize {
        self.config.n_agents()
    }

    pub fn n_actions(&self) -> usize {
        self.config.n_actions()
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    pub fn max_steps(&self) -> usize {
        self.config.max_steps()
    }

    pub fn reset<R: Rng>(&self, rng: &mut R) -> Result<EnvState, EnvError> {
        match &self.config {
            EnvConfig::PredatorPrey(c) => pp::reset(c, rng).map(EnvState::PredatorPrey),
            EnvConfig::Usar(c) => usar::reset(c).map(EnvState::Usar),
        }
    }

    pub fn step(&self, state: &EnvState, actions: &[usize]) -> Result<Transition, EnvError> {
        let n = self.n_agents();
        if actions.len() != n {
            return Err(EnvError::ActionCount {
                expected: n,
                got: actions.len(),
            });
        }
        let n_actions = self.n_actions();
        if let Some((agent, &action)) = actions.iter().enumerate().find(|(_, a)| **a >= n_actions) {
            return Err(EnvError::ActionRange {
                agent,
                action,
                n_actions,
            });
        }
        let (state, rewards, done) = match (&self.config, state) {
            (EnvConfig::PredatorPrey(c), EnvState::PredatorPrey(s)) => {
                let (s, r, d) = pp::step(c, s, actions);
                (EnvState::PredatorPrey(s), r, d)
            }
            (EnvConfig::Usar(c), EnvState::Usar(s)) => {
                let (s, r, d) = usar::step(c, s, actions);
                (EnvState::Usar(s), r, d)
            }
            _ => return Err(EnvError::StateKind),
        };
        Ok(Transition {
            state,
            rewards,
            done,
        })
    }

    pub fn observe(&self, state: &EnvState, agent: usize) -> Observation {
        match (&self.config, state) {
            (EnvConfig::PredatorPrey(c), EnvState::PredatorPrey(s)) => pp::observe(c, s, agent),
            (EnvConfig::Usar(c), EnvState::Usar(s)) => usar::observe(c, s, agent),
            _ => panic!("state does not belong to this environment"),
        }
    }

    /// Whether the agent still chooses its own action (reached predators are frozen).
    pub fn is_active(&self, state: &EnvState, agent: usize) -> bool {
        match state {
            EnvState::PredatorPrey(s) => !s.reached[agent],
            EnvState::Usar(_) => true,
        }
    }

    /// Task completed before the step limit.
    pub fn is_success(&self, state: &EnvState) -> bool {
        match state {
            EnvState::PredatorPrey(s) => s.reached.iter().all(|r| *r),
            EnvState::Usar(s) => s.bombs.iter().all(|b| b.remaining.is_empty()),
        }
    }

    /// Position used as the sender's "meaning" for topographic similarity.
    pub fn sender_position(&self, state: &EnvState, agent: usize) -> Vec<f64> {
        match state {
            EnvState::PredatorPrey(s) => {
                let (r, c) = s.predators[agent];
                vec![r as f64, c as f64]
            }
            EnvState::Usar(s) => vec![s.agent_rooms[agent] as f64],
        }
    }
}

/// Rounding granularity of observation keys.
const KEY_SCALE: f64 = 1e6;

/// Canonical bytes for an `(env, observation, action)` lookup key.
///
/// Layout: tag bytes, a zero byte, each entry as `round(x·1e6)` in big-endian
/// `i64`, then the action as big-endian `u32`.
pub fn observation_key(env_tag: &str, obs: &[f64], action: usize) -> Vec<u8> {
    let mut key = Vec::with_capacity(env_tag.len() + 1 + obs.len() * 8 + 4);
    key.extend_from_slice(env_tag.as_bytes());
    key.push(0);
    for v in obs {
        let q = (v * KEY_SCALE).round() as i64;
        key.extend_from_slice(&q.to_be_bytes());
    }
    key.extend_from_slice(&(action as u32).to_be_bytes());
    key
}

/// One line of a JSON-lines episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub episode: u64,
    pub t: usize,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub state: EnvState,
}

pub fn write_trace_line<W: Write>(w: &mut W, line: &TraceLine) -> Result<(), EnvError> {
    serde_json::to_writer(&mut *w, line)?;
    w.write_all(b"\n")?;
    Ok(())
}
