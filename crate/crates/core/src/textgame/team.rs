//! Mixed teams of policy, oracle and external text seats.
//!
//! Policy seats speak vectors and text seats speak sentences. Vectors reach
//! text seats through `translate`, sentences reach policy seats through the
//! embedder, both with the usual one-round delay.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentCarry, AgentPolicy};
use crate::env::pp::Cell;
use crate::env::{Env, EnvState, Observation};
use crate::grounding::{Embedder, GroundingDataset};
use crate::kernel::{categorical_sample, SampleMode};
use crate::training::{draw_gate, GateMode};

use super::{agent_name, parse, render, InboxMessage, Oracle, ParsedReply, TextGameError};

/// A player reached over text, e.g. a remote client.
pub trait TextPlayer {
    /// Shows `text` (plus corrective `feedback` after a rejected reply) and
    /// returns the reply, or `None` when the seat timed out.
    fn respond(&mut self, agent: usize, round: usize, text: &str, feedback: Option<&str>) -> Option<String>;
}

pub enum Seat<'a> {
    Policy { policy: &'a AgentPolicy, gates: GateMode },
    Oracle,
    External(&'a mut dyn TextPlayer),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeatKind {
    Policy,
    Oracle,
    External,
}

impl Seat<'_> {
    pub fn kind(&self) -> SeatKind {
        match self {
            Seat::Policy { .. } => SeatKind::Policy,
            Seat::Oracle => SeatKind::Oracle,
            Seat::External(_) => SeatKind::External,
        }
    }
}

/// Translation resources between the two message spaces. Either side may be
/// absent, in which case that direction carries nothing.
#[derive(Clone, Copy, Default)]
pub struct Bridge<'a> {
    pub grounding: Option<&'a GroundingDataset>,
    pub embedder: Option<&'a dyn Embedder>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeatStep {
    pub obs: Vec<f64>,
    pub action: usize,
    /// Text broadcast by a text seat.
    pub message: Option<String>,
    pub comm: Option<Vec<f64>>,
    pub gate: bool,
    pub reward: f64,
    pub position: Vec<f64>,
    pub timed_out: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeamEpisode {
    pub episode: u64,
    pub seats: Vec<SeatKind>,
    /// `steps[t][agent]`
    pub steps: Vec<Vec<SeatStep>>,
    pub success: bool,
    pub prey: Option<Cell>,
}

impl TeamEpisode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn timeouts(&self) -> usize {
        self.steps.iter().flatten().filter(|s| s.timed_out).count()
    }
}

/// What each seat broadcast last round.
#[derive(Clone)]
enum Outgoing {
    Silent,
    Vector(Vec<f64>),
    Text(String),
}

/// Plays one episode from `state`. The caller supplies the initial state so
/// evaluation can pin spawn locations.
pub fn run_team_episode<R: Rng>(
    env: &Env,
    seats: &mut [Seat],
    bridge: &Bridge,
    mut state: EnvState,
    rng: &mut R,
    mode: SampleMode,
    episode: u64,
) -> Result<TeamEpisode, TextGameError> {
    let n = env.n_agents();
    if seats.len() != n {
        return Err(TextGameError::Protocol(format!(
            "team has {} seats but the environment has {n} agents",
            seats.len()
        )));
    }
    let names: Vec<String> = (0..n).map(|i| agent_name(env, i)).collect();
    let mut oracles: Vec<Option<Oracle>> = seats
        .iter()
        .enumerate()
        .map(|(i, s)| matches!(s, Seat::Oracle).then(|| Oracle::new(env, i)))
        .collect();
    let mut carries: Vec<Option<AgentCarry>> = seats
        .iter()
        .map(|s| match s {
            Seat::Policy { policy, .. } => Some(AgentCarry::zeros(&policy.shape)),
            _ => None,
        })
        .collect();
    let mut outgoing = vec![Outgoing::Silent; n];
    let mut embed_cache: HashMap<String, Vec<f64>> = HashMap::new();
    let prey = state.pp().map(|s| s.prey);
    let mut steps = Vec::new();
    loop {
        let round = state.t();
        // Each seat's broadcast from last round, in both representations.
        let mut vectors: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut texts: Vec<Option<String>> = vec![None; n];
        for (j, out) in outgoing.iter().enumerate() {
            match out {
                Outgoing::Silent => {}
                Outgoing::Vector(c) => {
                    vectors[j] = Some(c.clone());
                    if let Some(ds) = bridge.grounding {
                        texts[j] = Some(ds.translate(c)?.message);
                    }
                }
                Outgoing::Text(t) => {
                    texts[j] = Some(t.clone());
                    if let Some(e) = bridge.embedder {
                        if !embed_cache.contains_key(t) {
                            embed_cache.insert(t.clone(), e.embed(t)?);
                        }
                        vectors[j] = embed_cache.get(t).cloned();
                    }
                }
            }
        }
        let mut row = Vec::with_capacity(n);
        let mut next_out = Vec::with_capacity(n);
        for i in 0..n {
            let obs: Observation = env.observe(&state, i);
            let active = env.is_active(&state, i);
            let noop = env.config().noop_action(&state, i);
            let position = env.sender_position(&state, i);
            let inbox: Vec<InboxMessage> = (0..n)
                .filter(|j| *j != i)
                .filter_map(|j| {
                    texts[j].as_ref().map(|t| InboxMessage {
                        from: names[j].clone(),
                        text: t.clone(),
                    })
                })
                .collect();
            let feedback = state.usar().map(|s| s.feedback[i]);
            let mut step = SeatStep {
                obs: obs.values().to_vec(),
                action: noop,
                message: None,
                comm: None,
                gate: false,
                reward: 0.0,
                position,
                timed_out: false,
            };
            match &mut seats[i] {
                Seat::Policy { policy, gates } => {
                    let d = policy.shape.comm_dim;
                    let mut incoming = vec![0.0; d];
                    if *gates != GateMode::Closed {
                        let mut count = 0usize;
                        for (j, v) in vectors.iter().enumerate() {
                            if let Some(v) = v.as_ref().filter(|v| j != i && v.len() == d) {
                                incoming.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                                count += 1;
                            }
                        }
                        if count > 0 {
                            incoming.iter_mut().for_each(|a| *a /= count as f64);
                        }
                    }
                    let carry = carries[i].as_ref().expect("policy seat carry");
                    let (out, _) = policy.step(obs.values(), i, &incoming, carry)?;
                    if active {
                        step.action = categorical_sample(&out.logits, rng, mode).0;
                    }
                    let (gate, _) = draw_gate(*gates, out.gate_logit, rng, mode);
                    step.gate = gate;
                    step.comm = Some(out.comm.clone());
                    next_out.push(if gate {
                        Outgoing::Vector(out.comm.clone())
                    } else {
                        Outgoing::Silent
                    });
                    carries[i] = Some(out.carry);
                }
                Seat::Oracle => {
                    let oracle = oracles[i].as_mut().expect("oracle seat");
                    let (action, msg) = oracle.act(&obs, &inbox);
                    if active {
                        step.action = action;
                    }
                    step.message = Some(msg.clone());
                    step.gate = true;
                    next_out.push(Outgoing::Text(msg));
                }
                Seat::External(player) => {
                    let text = render(env, &obs, i, round, &inbox, feedback);
                    let mut correction: Option<String> = None;
                    let parsed: Option<ParsedReply> = loop {
                        match player.respond(i, round, &text, correction.as_deref()) {
                            None => break None,
                            Some(reply) => match parse(&reply, env, &obs, i) {
                                Ok(p) => break Some(p),
                                Err(e) => correction = Some(e.feedback),
                            },
                        }
                    };
                    match parsed {
                        Some(p) => {
                            if active {
                                step.action = p.action;
                            }
                            step.gate = p.message.is_some();
                            step.message = p.message.clone();
                            next_out.push(p.message.map_or(Outgoing::Silent, Outgoing::Text));
                        }
                        None => {
                            step.timed_out = true;
                            next_out.push(Outgoing::Silent);
                        }
                    }
                }
            }
            row.push(step);
        }
        let actions: Vec<usize> = row.iter().map(|s| s.action).collect();
        let tr = env.step(&state, &actions)?;
        for (s, r) in row.iter_mut().zip(&tr.rewards) {
            s.reward = *r;
        }
        steps.push(row);
        outgoing = next_out;
        state = tr.state;
        if tr.done {
            break;
        }
    }
    Ok(TeamEpisode {
        episode,
        seats: seats.iter().map(Seat::kind).collect(),
        steps,
        success: env.is_success(&state),
        prey,
    })
}
