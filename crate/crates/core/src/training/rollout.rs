//! Episode collection and teacher-forced replay.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{aggregate, AgentCarry, AgentPolicy};
use crate::env::pp::Cell;
use crate::env::{Env, EnvError, EnvState};
use crate::grounding::{GroundingDataset, ReferenceChoice};
use crate::kernel::{bernoulli_sample, categorical_sample, sigmoid, KernelError, RngStreams, SampleMode};
use crate::agent::StepCache;

use super::TrainError;

/// How communication gates are decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Sampled from the gate head and trained with REINFORCE.
    Learned,
    /// Always broadcast; gate terms drop out of the loss.
    Open,
    /// Never broadcast (the no-communication baseline).
    Closed,
}

/// A teammate message resolved against the grounding dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub index: usize,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub obs: Vec<f64>,
    pub action: usize,
    /// False for agents whose action is forced (reached predators).
    pub active: bool,
    pub logprob: f64,
    pub gate: bool,
    pub gate_logprob: Option<f64>,
    pub value: f64,
    pub comm: Vec<f64>,
    pub reward: f64,
    pub reference: Option<Reference>,
    /// Sender state used by topographic similarity.
    pub position: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: u64,
    pub n_agents: usize,
    /// `steps[t][agent]`
    pub steps: Vec<Vec<StepRecord>>,
    pub success: bool,
    pub prey: Option<Cell>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Undiscounted sum of all agents' rewards.
    pub fn team_return(&self) -> f64 {
        self.steps.iter().flatten().map(|r| r.reward).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().flatten()
    }
}

/// Forward values for one agent-step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepForward {
    pub logits: Vec<f64>,
    pub value: f64,
    pub gate_logit: f64,
    pub comm: Vec<f64>,
    /// Detached copy of the observation encoding, the autoencoding target.
    pub recon_target: Vec<f64>,
    pub cache: StepCache,
}

#[derive(Clone, Copy, Debug)]
pub struct RolloutSpec<'a> {
    pub gates: GateMode,
    pub mode: SampleMode,
    pub grounding: Option<&'a GroundingDataset>,
    pub reference: ReferenceChoice,
}

/// Forward pass of every agent at one timestep given last step's messages.
fn forward_row(
    policy: &AgentPolicy,
    obs: &[Vec<f64>],
    prev_comm: &[Vec<f64>],
    prev_gate: &[bool],
    carries: &mut [AgentCarry],
) -> Result<Vec<StepForward>, KernelError> {
    let d = policy.shape.comm_dim;
    let mut row = Vec::with_capacity(obs.len());
    for (i, o) in obs.iter().enumerate() {
        let incoming = aggregate(prev_comm, prev_gate, i, d);
        let (out, cache) = policy.step(o, i, &incoming, &carries[i])?;
        carries[i] = out.carry;
        row.push(StepForward {
            logits: out.logits,
            value: out.value,
            gate_logit: out.gate_logit,
            comm: out.comm,
            recon_target: cache.encoded.clone(),
            cache,
        });
    }
    Ok(row)
}

/// Plays one episode with the shared policy.
///
/// Randomness comes from per-episode streams: `env` for the reset, `act`
/// for action and gate draws, `ref` for reference sampling.
pub fn run_episode(
    env: &Env,
    policy: &AgentPolicy,
    spec: &RolloutSpec,
    streams: &RngStreams,
    episode: u64,
) -> Result<(EpisodeTrace, Vec<Vec<StepForward>>), TrainError> {
    let n = env.n_agents();
    let d = policy.shape.comm_dim;
    let tag = env.tag();
    let mut env_rng = streams.stream("env", episode, 0);
    let mut act_rng = streams.stream("act", episode, 0);
    let mut ref_rng = streams.stream("ref", episode, 0);
    let mut state = env.reset(&mut env_rng)?;
    let prey = state.pp().map(|s| s.prey);
    let mut carries = vec![AgentCarry::zeros(&policy.shape); n];
    let mut prev_comm = vec![vec![0.0; d]; n];
    let mut prev_gate = vec![false; n];
    let mut steps = Vec::new();
    let mut forwards = Vec::new();
    loop {
        let obs: Vec<Vec<f64>> = (0..n).map(|i| env.observe(&state, i).values().to_vec()).collect();
        let row = forward_row(policy, &obs, &prev_comm, &prev_gate, &mut carries)?;
        let mut records = Vec::with_capacity(n);
        for (i, (f, o)) in row.iter().zip(obs).enumerate() {
            let active = env.is_active(&state, i);
            let (action, logprob) = if active {
                categorical_sample(&f.logits, &mut act_rng, spec.mode)
            } else {
                (env.config().noop_action(&state, i), 0.0)
            };
            let (gate, gate_logprob) = draw_gate(spec.gates, f.gate_logit, &mut act_rng, spec.mode);
            let reference = spec.grounding.and_then(|ds| {
                ds.lookup_with(&tag, &o, action, spec.reference, &mut ref_rng)
                    .map(|index| Reference {
                        index,
                        embedding: ds.entries()[index].embedding.clone(),
                    })
            });
            records.push(StepRecord {
                position: env.sender_position(&state, i),
                obs: o,
                action,
                active,
                logprob,
                gate,
                gate_logprob,
                value: f.value,
                comm: f.comm.clone(),
                reward: 0.0,
                reference,
            });
        }
        let actions: Vec<usize> = records.iter().map(|r| r.action).collect();
        let tr = env.step(&state, &actions)?;
        for (r, rew) in records.iter_mut().zip(&tr.rewards) {
            r.reward = *rew;
        }
        prev_comm = row.iter().map(|f| f.comm.clone()).collect();
        prev_gate = records.iter().map(|r| r.gate).collect();
        steps.push(records);
        forwards.push(row);
        state = tr.state;
        if tr.done {
            break;
        }
    }
    let trace = EpisodeTrace {
        episode,
        n_agents: n,
        steps,
        success: env.is_success(&state),
        prey,
    };
    Ok((trace, forwards))
}

pub(crate) fn draw_gate<R: Rng>(mode: GateMode, logit: f64, rng: &mut R, sample: SampleMode) -> (bool, Option<f64>) {
    match mode {
        GateMode::Open => (true, None),
        GateMode::Closed => (false, None),
        GateMode::Learned => {
            let (bit, _) = bernoulli_sample(sigmoid(logit), rng, sample);
            (bit, Some(gate_logprob(logit, bit)))
        }
    }
}

/// `log σ(z)` for an open gate, `log(1 - σ(z))` for a closed one, computed stably.
pub fn gate_logprob(logit: f64, bit: bool) -> f64 {
    let z = if bit { logit } else { -logit };
    -softplus(-z)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Plays episodes `first, first+1, …` until at least `n_steps` environment
/// steps are gathered. With `workers > 1` episodes run in parallel waves;
/// results are taken in episode order so the batch matches a serial run.
pub fn collect(
    env: &Env,
    policy: &AgentPolicy,
    spec: &RolloutSpec,
    n_steps: usize,
    streams: &RngStreams,
    first: u64,
    workers: usize,
) -> Result<Vec<(EpisodeTrace, Vec<Vec<StepForward>>)>, TrainError> {
    let mut out = Vec::new();
    let mut total = 0usize;
    let mut next = first;
    let workers = workers.max(1);
    while total < n_steps {
        let wave: Vec<Result<_, TrainError>> = if workers == 1 {
            vec![run_episode(env, policy, spec, streams, next)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..workers as u64)
                    .map(|k| s.spawn(move || run_episode(env, policy, spec, streams, next + k)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("rollout worker panicked")).collect()
            })
        };
        for ep in wave {
            if total >= n_steps {
                break;
            }
            let ep = ep?;
            total += ep.0.len();
            next += 1;
            out.push(ep);
        }
    }
    Ok(out)
}

/// Recomputes forward values along a recorded trace, reusing its
/// observations, actions and gate bits.
pub fn replay(policy: &AgentPolicy, trace: &EpisodeTrace) -> Result<Vec<Vec<StepForward>>, KernelError> {
    let n = trace.n_agents;
    let d = policy.shape.comm_dim;
    let mut carries = vec![AgentCarry::zeros(&policy.shape); n];
    let mut prev_comm = vec![vec![0.0; d]; n];
    let mut prev_gate = vec![false; n];
    let mut forwards = Vec::with_capacity(trace.len());
    for records in &trace.steps {
        let obs: Vec<Vec<f64>> = records.iter().map(|r| r.obs.clone()).collect();
        let row = forward_row(policy, &obs, &prev_comm, &prev_gate, &mut carries)?;
        prev_comm = row.iter().map(|f| f.comm.clone()).collect();
        prev_gate = records.iter().map(|r| r.gate).collect();
        forwards.push(row);
    }
    Ok(forwards)
}

/// Mean episode length of a uniformly random team over `episodes` resets.
pub fn random_policy_length(env: &Env, episodes: usize, seed: u64) -> Result<f64, EnvError> {
    let streams = RngStreams::new(seed);
    let mut total = 0usize;
    for ep in 0..episodes as u64 {
        let mut rng = streams.stream("random", ep, 0);
        let mut state: EnvState = env.reset(&mut rng)?;
        loop {
            let actions: Vec<usize> = (0..env.n_agents()).map(|_| rng.random_range(0..env.n_actions())).collect();
            let tr = env.step(&state, &actions)?;
            state = tr.state;
            if tr.done {
                break;
            }
        }
        total += state.t();
    }
    Ok(total as f64 / episodes.max(1) as f64)
}
