//! Text and rank statistics.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernel::cosine;

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and candidate n-gram total for one order.
pub fn ngram_precision_counts(candidate: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matches = cand
        .iter()
        .map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, candidate.len().saturating_sub(n - 1))
}

/// Sentence BLEU with orders 1 to 4, uniform weights and the brevity penalty.
///
/// Orders 2 to 4 with no matching n-gram use `1 / (total + 1)`; a candidate
/// with no unigram match scores 0.
pub fn bleu(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let (m, total) = ngram_precision_counts(candidate, reference, n);
        let p = if m > 0 {
            m as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln() / MAX_ORDER as f64;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

/// Fractional ranks starting at 1; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation; `None` for fewer than two points or a constant input.
///
/// # Panics
/// If the inputs differ in length.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "spearman inputs must have equal length");
    if x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// How distances between sender states are measured.
#[derive(Clone, Debug)]
pub enum StateDistance {
    Euclidean,
    /// Hop counts between rooms; states are single room indices.
    Hops(Vec<Vec<usize>>),
}

impl StateDistance {
    pub fn between(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            StateDistance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            StateDistance::Hops(h) => h[a[0] as usize][b[0] as usize] as f64,
        }
    }
}

pub const DEFAULT_PAIR_CAP: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topographic {
    pub rho: f64,
    pub pairs: usize,
}

/// Negative Spearman correlation between message cosine similarity and
/// sender-state distance over message pairs.
///
/// All pairs are used when there are at most `cap`; otherwise `cap` pairs
/// are drawn uniformly (with replacement) from a generator seeded by `seed`.
/// Pairs involving a zero vector are skipped.
pub fn topo_similarity(
    messages: &[(&[f64], &[f64])],
    distance: &StateDistance,
    cap: usize,
    seed: u64,
) -> Option<Topographic> {
    let n = messages.len();
    if n < 2 {
        return None;
    }
    let total = n * (n - 1) / 2;
    let mut pairs = Vec::with_capacity(total.min(cap));
    if total <= cap {
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while pairs.len() < cap {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i != j {
                pairs.push((i.min(j), i.max(j)));
            }
        }
    }
    let mut sims = Vec::with_capacity(pairs.len());
    let mut dists = Vec::with_capacity(pairs.len());
    for (i, j) in pairs {
        if let Ok(s) = cosine(messages[i].0, messages[j].0) {
            sims.push(s);
            dists.push(distance.between(messages[i].1, messages[j].1));
        }
    }
    if sims.len() < 2 {
        return None;
    }
    spearman(&sims, &dists).map(|r| Topographic {
        rho: -r,
        pairs: sims.len(),
    })
}
