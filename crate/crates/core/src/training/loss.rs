//! Task loss, alignment loss and their gradients through time and across
//! the communication channel.
//!
//! ```text
//! L     = L_rl + λ·L_aux
//! L_rl  = (1/N) Σ [ -(log π(a)·active + log g)·A + c_v (R - v)² - c_e H(π)·active ]
//! L_sup = (1/N_g) Σ_grounded [ 1 - cos(c, ref) ]
//! L_ae  = (1/N) Σ ‖dec(c) - sg(e)‖² / H
//! ```
//!
//! `A = R - v` uses the value recorded during collection, so it is a
//! constant in the policy term. N counts agent-steps in the batch, N_g only
//! those with a reference.

use serde::{Deserialize, Serialize};

use crate::agent::{AgentPolicy, StepGrads};
use crate::kernel::{cosine, cosine_grad, entropy, entropy_grad, log_softmax, logprob_grad, norm, sigmoid};

use super::rollout::{gate_logprob, EpisodeTrace, StepForward};

/// Which rewards feed an agent's return.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    #[default]
    Individual,
    /// Every agent is credited with the sum of the team's rewards.
    Team,
}

/// Auxiliary alignment objective scaled by λ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxLoss {
    None,
    Cosine,
    Reconstruction,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub reward: RewardMode,
    pub aux: AuxLoss,
}

/// Loss components summed over a batch (already normalized).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// Unweighted alignment loss (cosine or reconstruction).
    pub aux: f64,
    pub n_records: usize,
    pub n_grounded: usize,
    /// Sum of cosine similarity over grounded records.
    pub cosine_sum: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn rl(&self) -> f64 {
        self.policy + self.value - self.entropy
    }

    pub fn total(&self) -> f64 {
        self.rl() + self.lambda * self.aux
    }

    pub fn mean_cosine(&self) -> Option<f64> {
        (self.n_grounded > 0).then(|| self.cosine_sum / self.n_grounded as f64)
    }

    fn add(&mut self, o: &LossReport) {
        self.policy += o.policy;
        self.value += o.value;
        self.entropy += o.entropy;
        self.aux += o.aux;
        self.cosine_sum += o.cosine_sum;
    }
}

/// `R_t = Σ_{k≥t} γ^{k-t} r_k`.
pub fn returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Per-agent returns for a trace, `out[t][agent]`.
pub fn trace_returns(trace: &EpisodeTrace, gamma: f64, mode: RewardMode) -> Vec<Vec<f64>> {
    let n = trace.n_agents;
    let per_agent: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r: Vec<f64> = trace
                .steps
                .iter()
                .map(|row| match mode {
                    RewardMode::Individual => row[i].reward,
                    RewardMode::Team => row.iter().map(|x| x.reward).sum(),
                })
                .collect();
            returns(&r, gamma)
        })
        .collect();
    (0..trace.len()).map(|t| (0..n).map(|i| per_agent[i][t]).collect()).collect()
}

/// Jitter applied to an exactly-zero message before taking its cosine.
const ZERO_JITTER: f64 = 1e-8;

fn guarded(c: &[f64]) -> std::borrow::Cow<'_, [f64]> {
    if norm(c) == 0.0 {
        std::borrow::Cow::Owned(vec![ZERO_JITTER; c.len()])
    } else {
        std::borrow::Cow::Borrowed(c)
    }
}

/// Computes the batch loss and, when `backprop` is set, accumulates its
/// gradient into `policy.params`.
pub fn batch_loss(
    policy: &mut AgentPolicy,
    batch: &[(&EpisodeTrace, &[Vec<StepForward>])],
    w: &LossWeights,
    backprop: bool,
) -> LossReport {
    let n_records: usize = batch.iter().map(|(t, _)| t.len() * t.n_agents).sum();
    let n_grounded: usize = batch
        .iter()
        .map(|(t, _)| t.records().filter(|r| r.reference.is_some()).count())
        .sum();
    let mut report = LossReport {
        n_records,
        n_grounded,
        lambda: w.lambda,
        ..Default::default()
    };
    if n_records == 0 {
        return report;
    }
    for (trace, fwd) in batch {
        let r = episode_loss(policy, trace, fwd, w, n_records, n_grounded, backprop);
        report.add(&r);
    }
    report
}

fn episode_loss(
    policy: &mut AgentPolicy,
    trace: &EpisodeTrace,
    fwd: &[Vec<StepForward>],
    w: &LossWeights,
    n_records: usize,
    n_grounded: usize,
    backprop: bool,
) -> LossReport {
    let n = trace.n_agents;
    let hd = policy.shape.hidden;
    let dd = policy.shape.comm_dim;
    let inv_n = 1.0 / n_records as f64;
    let inv_g = if n_grounded > 0 { 1.0 / n_grounded as f64 } else { 0.0 };
    let rets = trace_returns(trace, w.gamma, w.reward);
    let mut rep = LossReport::default();

    let mut dh = vec![vec![0.0; hd]; n];
    let mut dc = vec![vec![0.0; hd]; n];
    // gradient reaching this step's messages from the receivers at t+1
    let mut dcomm_future = vec![vec![0.0; dd]; n];

    for t in (0..trace.len()).rev() {
        let mut dcomm_past = vec![vec![0.0; dd]; n];
        for i in 0..n {
            let rec = &trace.steps[t][i];
            let f = &fwd[t][i];
            // the policy term sees the value recorded at collection time, a constant
            let adv = rets[t][i] - rec.value;
            let verr = rets[t][i] - f.value;

            let mut g = StepGrads::default();
            let mut dlogits = vec![0.0; f.logits.len()];
            if rec.active {
                let lp = log_softmax(&f.logits)[rec.action];
                rep.policy -= lp * adv * inv_n;
                let h = entropy(&f.logits);
                rep.entropy += w.entropy_coef * h * inv_n;
                if backprop {
                    for (d, (a, e)) in dlogits
                        .iter_mut()
                        .zip(logprob_grad(&f.logits, rec.action).into_iter().zip(entropy_grad(&f.logits)))
                    {
                        *d = -adv * inv_n * a - w.entropy_coef * inv_n * e;
                    }
                }
            }
            g.dlogits = Some(dlogits);

            if rec.gate_logprob.is_some() {
                rep.policy -= gate_logprob(f.gate_logit, rec.gate) * adv * inv_n;
                let b = if rec.gate { 1.0 } else { 0.0 };
                g.dgate_logit = -adv * inv_n * (b - sigmoid(f.gate_logit));
            }

            rep.value += w.value_coef * verr * verr * inv_n;
            g.dvalue = -2.0 * w.value_coef * verr * inv_n;

            let mut dcomm = std::mem::take(&mut dcomm_future[i]);
            match w.aux {
                AuxLoss::Cosine => {
                    if let Some(r) = &rec.reference {
                        let c = guarded(&f.comm);
                        let cs = cosine(&c, &r.embedding).unwrap_or(0.0);
                        rep.aux += (1.0 - cs) * inv_g;
                        rep.cosine_sum += cs;
                        if backprop && w.lambda != 0.0 {
                            if let Ok(cg) = cosine_grad(&c, &r.embedding) {
                                for (d, x) in dcomm.iter_mut().zip(cg) {
                                    *d -= w.lambda * inv_g * x;
                                }
                            }
                        }
                    }
                }
                AuxLoss::Reconstruction => {
                    if let Some(pred) = policy.decode(&f.comm) {
                        let scale = inv_n / hd as f64;
                        let diff: Vec<f64> = pred.iter().zip(&f.recon_target).map(|(p, e)| p - e).collect();
                        rep.aux += diff.iter().map(|x| x * x).sum::<f64>() * scale;
                        if backprop && w.lambda != 0.0 {
                            let dpred: Vec<f64> = diff.iter().map(|x| 2.0 * w.lambda * scale * x).collect();
                            let dc_rec = policy.decode_backward(&f.comm, &dpred);
                            for (d, x) in dcomm.iter_mut().zip(dc_rec) {
                                *d += x;
                            }
                        }
                    }
                    if let Some(r) = &rec.reference {
                        if let Ok(cs) = cosine(&guarded(&f.comm), &r.embedding) {
                            rep.cosine_sum += cs;
                        }
                    }
                }
                AuxLoss::None => {
                    if let Some(r) = &rec.reference {
                        if let Ok(cs) = cosine(&guarded(&f.comm), &r.embedding) {
                            rep.cosine_sum += cs;
                        }
                    }
                }
            }
            if !backprop {
                continue;
            }
            g.dcomm = Some(dcomm);
            g.dh = std::mem::take(&mut dh[i]);
            g.dc = std::mem::take(&mut dc[i]);
            let (d_in, dh_prev, dc_prev) = policy.backward(&f.cache, &g);
            dh[i] = dh_prev;
            dc[i] = dc_prev;
            // incoming at t was the mean of the open-gated messages sent at t-1
            if t > 0 {
                let prev = &trace.steps[t - 1];
                let senders: Vec<usize> = (0..n).filter(|&j| j != i && prev[j].gate).collect();
                if !senders.is_empty() {
                    let k = 1.0 / senders.len() as f64;
                    for j in senders {
                        for (d, x) in dcomm_past[j].iter_mut().zip(&d_in) {
                            *d += k * x;
                        }
                    }
                }
            }
        }
        dcomm_future = dcomm_past;
    }
    rep
}
