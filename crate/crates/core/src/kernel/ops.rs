use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{dot, norm};
use super::KernelError;

/// Whether stochastic heads sample or take their most likely outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Sample,
    Greedy,
}

/// Cosine similarity. Both inputs must have nonzero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, KernelError> {
    if a.len() != b.len() {
        return Err(KernelError::ShapeMismatch {
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(KernelError::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cosine(a, b)` with respect to `a`.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>, KernelError> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(KernelError::ZeroNorm);
    }
    let ab = dot(a, b);
    let inv = 1.0 / (na * nb);
    let k = ab / (na * na * na * nb);
    Ok(a.iter().zip(b).map(|(ai, bi)| bi * inv - ai * k).collect())
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `softmax(logits)` (or its argmax in greedy mode) and
/// returns it with its log-probability.
pub fn categorical_sample<R: Rng>(logits: &[f64], rng: &mut R, mode: SampleMode) -> (usize, f64) {
    assert!(!logits.is_empty(), "categorical over zero outcomes");
    let logp = log_softmax(logits);
    let idx = match mode {
        SampleMode::Greedy => argmax(logits),
        SampleMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = logp.len() - 1;
            for (i, lp) in logp.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        }
    };
    (idx, logp[idx])
}

/// Entropy of `softmax(logits)`.
pub fn entropy(logits: &[f64]) -> f64 {
    log_softmax(logits).iter().map(|lp| -lp.exp() * lp).sum()
}

/// `d entropy / d logits`.
pub fn entropy_grad(logits: &[f64]) -> Vec<f64> {
    let logp = log_softmax(logits);
    let h: f64 = logp.iter().map(|lp| -lp.exp() * lp).sum();
    logp.iter().map(|lp| -lp.exp() * (lp + h)).collect()
}

/// `d log p[index] / d logits`.
pub fn logprob_grad(logits: &[f64], index: usize) -> Vec<f64> {
    let mut g: Vec<f64> = softmax(logits).into_iter().map(|p| -p).collect();
    g[index] += 1.0;
    g
}

/// Bernoulli draw with probability `sigmoid(logit)`; returns the bit and its log-probability.
pub fn bernoulli_sample<R: Rng>(prob: f64, rng: &mut R, mode: SampleMode) -> (bool, f64) {
    let bit = match mode {
        SampleMode::Greedy => prob >= 0.5,
        SampleMode::Sample => rng.random::<f64>() < prob,
    };
    let lp = if bit { prob.ln() } else { (1.0 - prob).ln() };
    (bit, lp)
}
