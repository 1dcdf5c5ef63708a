use serde::{Deserialize, Serialize};

use super::{KernelError, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// `v ← αv + (1-α)g²`, `w ← w - lr·g/(√v + ε)`
    RmsProp { alpha: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::RmsProp {
            alpha: 0.97,
            eps: 1e-6,
        }
    }
}

/// Optimizer with per-parameter second-moment accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    lr: f64,
    pub(crate) accum: Vec<Vec<f64>>,
    pub(crate) steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamSet) -> Result<Self, KernelError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(KernelError::InvalidLearningRate(lr));
        }
        let accum = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::RmsProp { .. } => params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        };
        Ok(Self {
            kind,
            lr,
            accum,
            steps: 0,
        })
    }

    pub(crate) fn from_parts(kind: OptimizerKind, lr: f64, accum: Vec<Vec<f64>>, steps: u64) -> Self {
        Self {
            kind,
            lr,
            accum,
            steps,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the populated gradients, then zeroes them.
    ///
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), KernelError> {
        for p in params.iter() {
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(KernelError::NonFinite {
                    what: format!("gradient of {}[{i}]", p.name),
                });
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut() {
                    let grad = p.grad.data().to_vec();
                    for (w, g) in p.value.data_mut().iter_mut().zip(grad) {
                        *w -= self.lr * g;
                    }
                }
            }
            OptimizerKind::RmsProp { alpha, eps } => {
                if self.accum.len() != params.len() {
                    return Err(KernelError::OptimizerLayout);
                }
                for (p, acc) in params.iter_mut().zip(&mut self.accum) {
                    let (value, grad) = (&mut p.value, &p.grad);
                    if acc.len() != value.len() {
                        return Err(KernelError::OptimizerLayout);
                    }
                    for ((w, g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(acc.iter_mut()) {
                        *v = alpha * *v + (1.0 - alpha) * g * g;
                        *w -= self.lr * g / (v.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
        self.steps += 1;
        Ok(())
    }
}
