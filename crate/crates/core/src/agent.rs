//! Per-agent controller: observation encoder, LSTM, and four heads (action,
//! value, gate, message), plus the team-level message aggregation.
//!
//! ```text
//! x = obs ++ onehot(agent)?        e = tanh(W_enc x + b)
//! (h, c) = LSTM([e ; incoming], h_prev, c_prev)
//! logits = A h   value = v h   gate = σ(g h)   message = M h
//! ```
//!
//! `incoming` is the mean of the messages teammates emitted at the previous
//! step with an open gate. All agents share one [`AgentPolicy`]; each keeps
//! its own [`AgentCarry`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernel::{
    bernoulli_sample, sigmoid, Affine, KernelError, LstmCache, LstmCell, ParamSet, SampleMode,
};

/// Dimensions of a policy network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub obs_dim: usize,
    /// Width of the agent-id one-hot appended to observations (0 disables it).
    pub id_dim: usize,
    pub n_actions: usize,
    pub hidden: usize,
    pub comm_dim: usize,
    /// Adds a message→encoding decoder used by the autoencoding baseline.
    pub decoder: bool,
}

impl PolicyShape {
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.id_dim
    }
}

#[derive(Clone, Debug)]
pub struct AgentPolicy {
    pub shape: PolicyShape,
    pub params: ParamSet,
    pub encoder: Affine,
    pub lstm: LstmCell,
    pub action_head: Affine,
    pub value_head: Affine,
    pub gate_head: Affine,
    pub comm_head: Affine,
    pub decoder: Option<Affine>,
}

const ENCODER: &str = "encoder";
const LSTM: &str = "lstm";
const ACTION: &str = "action_head";
const VALUE: &str = "value_head";
const GATE: &str = "gate_head";
const COMM: &str = "comm_head";
const DECODER: &str = "decoder";

impl AgentPolicy {
    pub fn new<R: Rng>(shape: PolicyShape, rng: &mut R) -> Result<Self, KernelError> {
        let mut params = ParamSet::new();
        let h = shape.hidden;
        let encoder = Affine::register(&mut params, ENCODER, shape.input_dim(), h, rng)?;
        let lstm = LstmCell::register(&mut params, LSTM, h + shape.comm_dim, h, rng)?;
        let action_head = Affine::register(&mut params, ACTION, h, shape.n_actions, rng)?;
        let value_head = Affine::register(&mut params, VALUE, h, 1, rng)?;
        let gate_head = Affine::register(&mut params, GATE, h, 1, rng)?;
        let comm_head = Affine::register(&mut params, COMM, h, shape.comm_dim, rng)?;
        let decoder = if shape.decoder {
            Some(Affine::register(&mut params, DECODER, shape.comm_dim, h, rng)?)
        } else {
            None
        };
        Ok(Self {
            shape,
            params,
            encoder,
            lstm,
            action_head,
            value_head,
            gate_head,
            comm_head,
            decoder,
        })
    }

    /// Rebuilds a policy around stored parameters, checking names and shapes.
    pub fn from_params(shape: PolicyShape, params: ParamSet) -> Result<Self, KernelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fresh = Self::new(shape, &mut rng)?;
        if fresh.params.len() != params.len() {
            return Err(KernelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (want, got) in fresh.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(KernelError::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        fresh.params = params;
        fresh.params.zero_grad();
        Ok(fresh)
    }

    pub fn input(&self, obs: &[f64], agent: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.shape.input_dim());
        x.extend_from_slice(obs);
        if self.shape.id_dim > 0 {
            let mut id = vec![0.0; self.shape.id_dim];
            id[agent % self.shape.id_dim] = 1.0;
            x.extend(id);
        }
        x
    }

    /// One forward step for `agent`. Returns the outputs and the cache needed by [`AgentPolicy::backward`].
    pub fn step(
        &self,
        obs: &[f64],
        agent: usize,
        incoming: &[f64],
        carry: &AgentCarry,
    ) -> Result<(StepOutput, StepCache), KernelError> {
        if obs.len() != self.shape.obs_dim {
            return Err(KernelError::ShapeMismatch {
                left: vec![self.shape.obs_dim],
                right: vec![obs.len()],
            });
        }
        if incoming.len() != self.shape.comm_dim {
            return Err(KernelError::ShapeMismatch {
                left: vec![self.shape.comm_dim],
                right: vec![incoming.len()],
            });
        }
        let p = &self.params;
        let x = self.input(obs, agent);
        let encoded: Vec<f64> = self.encoder.forward(p, &x).into_iter().map(f64::tanh).collect();
        let mut lstm_in = encoded.clone();
        lstm_in.extend_from_slice(incoming);
        let (h, c, lstm_cache) = self.lstm.forward(p, &lstm_in, &carry.h, &carry.c)?;
        let logits = self.action_head.forward(p, &h);
        let value = self.value_head.forward(p, &h)[0];
        let gate_logit = self.gate_head.forward(p, &h)[0];
        let comm = self.comm_head.forward(p, &h);
        let out = StepOutput {
            logits,
            value,
            gate_logit,
            gate_prob: sigmoid(gate_logit),
            comm: comm.clone(),
            carry: AgentCarry {
                h: h.clone(),
                c,
                last_comm: comm,
                last_gate: carry.last_gate,
            },
        };
        let cache = StepCache {
            x,
            encoded,
            lstm: lstm_cache,
            h,
        };
        Ok((out, cache))
    }

    /// Backward through one step.
    ///
    /// `grads` holds the loss gradients with respect to this step's outputs,
    /// plus `dh`/`dc` flowing back from the next step. Returns gradients with
    /// respect to `incoming`, `h_prev` and `c_prev`.
    pub fn backward(&mut self, cache: &StepCache, grads: &StepGrads) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hd = self.shape.hidden;
        let p = &mut self.params;
        let mut dh = grads.dh.clone();
        if dh.is_empty() {
            dh = vec![0.0; hd];
        }
        if let Some(d) = &grads.dlogits {
            self.action_head.backward(p, &cache.h, d, Some(&mut dh));
        }
        if grads.dvalue != 0.0 {
            self.value_head.backward(p, &cache.h, &[grads.dvalue], Some(&mut dh));
        }
        if grads.dgate_logit != 0.0 {
            self.gate_head.backward(p, &cache.h, &[grads.dgate_logit], Some(&mut dh));
        }
        if let Some(d) = &grads.dcomm {
            self.comm_head.backward(p, &cache.h, d, Some(&mut dh));
        }
        let dc = if grads.dc.is_empty() {
            vec![0.0; hd]
        } else {
            grads.dc.clone()
        };
        let (dx, dh_prev, dc_prev) = self.lstm.backward(p, &cache.lstm, &dh, &dc);
        let (d_enc, d_incoming) = dx.split_at(hd);
        let d_pre: Vec<f64> = d_enc
            .iter()
            .zip(&cache.encoded)
            .map(|(g, e)| g * (1.0 - e * e))
            .collect();
        self.encoder.backward(p, &cache.x, &d_pre, None);
        (d_incoming.to_vec(), dh_prev, dc_prev)
    }

    /// Decoder output for a message (autoencoding baseline only).
    pub fn decode(&self, comm: &[f64]) -> Option<Vec<f64>> {
        self.decoder.map(|d| d.forward(&self.params, comm))
    }

    /// Accumulates decoder gradients and returns the gradient with respect to the message.
    pub fn decode_backward(&mut self, comm: &[f64], d_out: &[f64]) -> Vec<f64> {
        let mut dcomm = vec![0.0; self.shape.comm_dim];
        if let Some(d) = self.decoder {
            d.backward(&mut self.params, comm, d_out, Some(&mut dcomm));
        }
        dcomm
    }
}

/// Recurrent state carried between steps of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentCarry {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub last_comm: Vec<f64>,
    pub last_gate: bool,
}

impl AgentCarry {
    pub fn zeros(shape: &PolicyShape) -> Self {
        Self {
            h: vec![0.0; shape.hidden],
            c: vec![0.0; shape.hidden],
            last_comm: vec![0.0; shape.comm_dim],
            last_gate: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub value: f64,
    pub gate_logit: f64,
    pub gate_prob: f64,
    pub comm: Vec<f64>,
    pub carry: AgentCarry,
}

#[derive(Clone, Debug)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub encoded: Vec<f64>,
    pub lstm: LstmCache,
    pub h: Vec<f64>,
}

/// Loss gradients with respect to one step's outputs.
#[derive(Clone, Debug, Default)]
pub struct StepGrads {
    pub dlogits: Option<Vec<f64>>,
    pub dvalue: f64,
    pub dgate_logit: f64,
    pub dcomm: Option<Vec<f64>>,
    /// Gradient from the next step into this step's hidden state (empty = zero).
    pub dh: Vec<f64>,
    pub dc: Vec<f64>,
}

/// Mean of the open-gated messages of every agent except `self_id`; zeros if none.
pub fn aggregate(comms: &[Vec<f64>], gates: &[bool], self_id: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    let mut count = 0usize;
    for (j, (c, g)) in comms.iter().zip(gates).enumerate() {
        if j != self_id && *g {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
            count += 1;
        }
    }
    if count > 0 {
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Communication gate draw: Bernoulli in sample mode, `p ≥ 0.5` in greedy mode.
pub fn sample_gate<R: Rng>(gate_prob: f64, rng: &mut R, mode: SampleMode) -> (bool, f64) {
    bernoulli_sample(gate_prob, rng, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> PolicyShape {
        PolicyShape {
            obs_dim: 4,
            id_dim: 3,
            n_actions: 5,
            hidden: 6,
            comm_dim: 3,
            decoder: false,
        }
    }

    #[test]
    fn zero_params_give_neutral_outputs() {
        let mut pol = AgentPolicy::new(shape(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for p in pol.params.iter_mut() {
            p.value.fill(0.0);
        }
        let carry = AgentCarry::zeros(&pol.shape);
        let (out, _) = pol.step(&[1.0, 0.0, 0.5, 0.0], 1, &[0.0; 3], &carry).unwrap();
        assert!(out.logits.iter().all(|l| *l == out.logits[0]));
        assert_eq!(out.gate_prob, 0.5);
        assert_eq!(out.comm, vec![0.0; 3]);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let pol = AgentPolicy::new(shape(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let carry = AgentCarry::zeros(&pol.shape);
        assert!(pol.step(&[0.0; 3], 0, &[0.0; 3], &carry).is_err());
        assert!(pol.step(&[0.0; 4], 0, &[0.0; 2], &carry).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let comms = vec![vec![9.0, 9.0], vec![1.0, 2.0]];
        assert_eq!(aggregate(&comms, &[true, true], 0, 2), vec![1.0, 2.0]);
        assert_eq!(aggregate(&comms, &[false, false], 0, 2), vec![0.0, 0.0]);
        let comms = vec![vec![5.0, 5.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(aggregate(&comms, &[true, true, true], 0, 2), vec![0.5, 0.5]);
        // a lone agent never hears itself
        assert_eq!(aggregate(&[vec![3.0, 3.0]], &[true], 0, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn gate_logprob_is_bernoulli() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (bit, lp) = sample_gate(0.3, &mut rng, SampleMode::Sample);
            let want = if bit { 0.3f64.ln() } else { 0.7f64.ln() };
            assert!((lp - want).abs() < 1e-15);
        }
    }

    #[test]
    fn from_params_rejects_wrong_layout() {
        let pol = AgentPolicy::new(shape(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut other = shape();
        other.hidden = 7;
        assert!(AgentPolicy::from_params(other, pol.params.clone()).is_err());
        let back = AgentPolicy::from_params(shape(), pol.params.clone()).unwrap();
        assert_eq!(back.params.flat_values(), pol.params.flat_values());
    }
}
