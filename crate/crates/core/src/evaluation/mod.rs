//! Task performance, alignment with reference language, topographic
//! similarity, message clustering and the zero-shot harness.

mod cluster;
mod metrics;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cluster::{dbscan, k_distance_eps, k_distances, pca2, Projection};
pub use metrics::{
    average_ranks, bleu, ngram_precision_counts, pearson, spearman, topo_similarity, StateDistance, Topographic,
    DEFAULT_PAIR_CAP,
};
pub use report::{read_summary_csv, write_report, SummaryRow, REPORT_FILES};

use crate::env::pp::{self, Cell};
use crate::env::{Env, EnvConfig, EnvState, Observation};
use crate::grounding::{tokenize, GroundingDataset};
use crate::kernel::{cosine, RngStreams, SampleMode};
use crate::textgame::{run_team_episode, Bridge, Seat, SeatStep, TeamEpisode, TextGameError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    TextGame(#[from] TextGameError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Grounding(#[from] crate::grounding::GroundingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Mean, sample standard deviation and count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    /// `None` for an empty sample.
    pub fn of(xs: &[f64]) -> Option<Stat> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, sd, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub seed: u64,
    pub episode: u64,
    pub length: usize,
    pub success: bool,
    pub team_return: f64,
    pub timeouts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub length: Stat,
    pub success: Stat,
    pub rows: Vec<EpisodeRow>,
}

/// Starting state for evaluation episode `k` of `seed`.
pub fn eval_state(env: &Env, seed: u64, episode: u64) -> Result<EnvState, EvalError> {
    Ok(env.reset(&mut RngStreams::new(seed).stream("eval-env", episode, 0))?)
}

/// Plays `episodes` greedy episodes per seed with a fixed team.
///
/// Seat order follows agent order. Text and policy seats talk through `bridge`.
pub fn evaluate(
    env: &Env,
    seats: &mut [Seat],
    bridge: &Bridge,
    episodes: usize,
    seeds: &[u64],
) -> Result<(Performance, Vec<TeamEpisode>), EvalError> {
    let mut traces = Vec::new();
    let mut rows = Vec::new();
    for &seed in seeds {
        let streams = RngStreams::new(seed);
        for k in 0..episodes as u64 {
            let state = eval_state(env, seed, k)?;
            let mut rng = streams.stream("eval-act", k, 0);
            let ep = run_team_episode(env, seats, bridge, state, &mut rng, SampleMode::Greedy, k)?;
            rows.push(row(seed, &ep));
            traces.push(ep);
        }
    }
    Ok((performance(rows)?, traces))
}

fn row(seed: u64, ep: &TeamEpisode) -> EpisodeRow {
    EpisodeRow {
        seed,
        episode: ep.episode,
        length: ep.len(),
        success: ep.success,
        team_return: ep.steps.iter().flatten().map(|s| s.reward).sum(),
        timeouts: ep.timeouts(),
    }
}

fn performance(rows: Vec<EpisodeRow>) -> Result<Performance, EvalError> {
    let lengths: Vec<f64> = rows.iter().map(|r| r.length as f64).collect();
    let success: Vec<f64> = rows.iter().map(|r| f64::from(u8::from(r.success))).collect();
    match (Stat::of(&lengths), Stat::of(&success)) {
        (Some(length), Some(success)) => Ok(Performance { length, success, rows }),
        _ => Err(EvalError::Invalid("no evaluation episodes".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub cosine: Stat,
    pub bleu: Stat,
}

/// Similarity of policy messages to the dataset's references on grounded steps.
///
/// A step is grounded when its `(observation, action)` has an entry in `ds`.
/// Cosine compares the message vector with the reference embedding; BLEU
/// compares the translated message with the reference text. `None` when no
/// step is grounded.
pub fn alignment(traces: &[TeamEpisode], ds: &GroundingDataset, env_tag: &str) -> Result<Option<Alignment>, EvalError> {
    alignment_where(traces, ds, env_tag, |_| true)
}

fn alignment_where(
    traces: &[TeamEpisode],
    ds: &GroundingDataset,
    env_tag: &str,
    keep: impl Fn(&SeatStep) -> bool,
) -> Result<Option<Alignment>, EvalError> {
    let mut cos = Vec::new();
    let mut bl = Vec::new();
    for ep in traces {
        for s in ep.steps.iter().flatten() {
            let Some(c) = &s.comm else { continue };
            if !keep(s) {
                continue;
            }
            let Some(i) = ds.lookup_index(env_tag, &s.obs, s.action) else { continue };
            let entry = &ds.entries()[i];
            let Ok(sim) = cosine(c, &entry.embedding) else { continue };
            let translated = ds.translate(c)?;
            cos.push(sim);
            bl.push(bleu(&tokenize(&translated.message), &tokenize(&entry.message)));
        }
    }
    Ok(Stat::of(&cos).zip(Stat::of(&bl)).map(|(cosine, bleu)| Alignment { cosine, bleu }))
}

/// `(comm, sender state)` for every broadcast policy message.
pub fn broadcast_messages(traces: &[TeamEpisode]) -> Vec<(&[f64], &[f64])> {
    traces
        .iter()
        .flat_map(|ep| ep.steps.iter().flatten())
        .filter(|s| s.gate)
        .filter_map(|s| s.comm.as_deref().map(|c| (c, s.position.as_slice())))
        .collect()
}

pub fn state_distance(env: &Env) -> StateDistance {
    match env.config() {
        EnvConfig::Usar(c) => StateDistance::Hops(c.hop_distances()),
        EnvConfig::PredatorPrey(_) => StateDistance::Euclidean,
    }
}

/// Topographic similarity of the broadcast messages in `traces`.
pub fn topographic(traces: &[TeamEpisode], env: &Env, cap: usize, seed: u64) -> Option<Topographic> {
    topo_similarity(&broadcast_messages(traces), &state_distance(env), cap, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub cluster: usize,
    pub size: usize,
    /// Reference message nearest to the cluster centroid.
    pub message: Option<String>,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub eps: f64,
    pub min_pts: usize,
    pub noise: usize,
    pub clusters: Vec<ClusterRow>,
    pub labels: Vec<Option<usize>>,
}

/// Clusters message vectors; `eps` defaults to the k-distance knee with `k = min_pts`.
pub fn cluster_messages(
    points: &[Vec<f64>],
    eps: Option<f64>,
    min_pts: usize,
    ds: Option<&GroundingDataset>,
) -> Result<Option<ClusterSummary>, EvalError> {
    let Some(eps) = eps.or_else(|| k_distance_eps(points, min_pts)) else {
        return Ok(None);
    };
    let labels = dbscan(points, eps, min_pts);
    let count = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut clusters = Vec::with_capacity(count);
    for k in 0..count {
        let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, l)| **l == Some(k)).map(|(p, _)| p).collect();
        let d = members[0].len();
        let mut centroid = vec![0.0; d];
        for m in &members {
            centroid.iter_mut().zip(m.iter()).for_each(|(c, x)| *c += x);
        }
        centroid.iter_mut().for_each(|c| *c /= members.len() as f64);
        let tr = match ds {
            Some(ds) if centroid.iter().any(|x| *x != 0.0) => Some(ds.translate(&centroid)?),
            _ => None,
        };
        clusters.push(ClusterRow {
            cluster: k,
            size: members.len(),
            message: tr.as_ref().map(|t| t.message.clone()),
            score: tr.map(|t| t.score),
        });
    }
    Ok(Some(ClusterSummary {
        eps,
        min_pts,
        noise: labels.iter().filter(|l| l.is_none()).count(),
        clusters,
        labels,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRow {
    pub cell: Cell,
    pub episodes: usize,
    pub success_rate: f64,
    /// Alignment over steps where the prey is in view; `None` if never seen.
    pub cosine: Option<Stat>,
    pub bleu: Option<Stat>,
    pub example: Option<String>,
}

/// Evaluation state with the prey placed at `cell`; predator placement is
/// redrawn until no predator starts on the prey.
pub fn state_with_prey(env: &Env, cell: Cell, seed: u64, episode: u64) -> Result<EnvState, EvalError> {
    let mut rng = RngStreams::new(seed).stream("zero-shot", episode, 0);
    loop {
        let mut state = env.reset(&mut rng)?;
        let EnvState::PredatorPrey(s) = &mut state else {
            return Err(EvalError::Invalid("zero-shot evaluation needs a predator-prey environment".into()));
        };
        if s.predators.contains(&cell) {
            continue;
        }
        s.prey = cell;
        return Ok(state);
    }
}

/// For each held-out cell, plays episodes with the prey spawned there and
/// compares messages sent while the prey is in view with the references
/// of the full dataset.
pub fn zero_shot_eval(
    env: &Env,
    seats: &mut [Seat],
    bridge: &Bridge,
    full: &GroundingDataset,
    cells: &[Cell],
    episodes: usize,
    seeds: &[u64],
) -> Result<Vec<ZeroShotRow>, EvalError> {
    let cfg = env
        .config()
        .pp()
        .ok_or_else(|| EvalError::Invalid("zero-shot evaluation needs a predator-prey environment".into()))?
        .clone();
    let tag = env.tag();
    let mut rows = Vec::new();
    for &cell in cells {
        let mut traces = Vec::new();
        for &seed in seeds {
            let streams = RngStreams::new(seed);
            for k in 0..episodes as u64 {
                let state = state_with_prey(env, cell, seed, k)?;
                let mut rng = streams.stream("eval-act", k, 0);
                traces.push(run_team_episode(env, seats, bridge, state, &mut rng, SampleMode::Greedy, k)?);
            }
        }
        let in_view = |s: &SeatStep| pp::decode(&cfg, &Observation::new(s.obs.clone())).prey.is_some();
        let al = alignment_where(&traces, full, &tag, in_view)?;
        let example = traces
            .iter()
            .flat_map(|ep| ep.steps.iter().flatten())
            .filter(|s| in_view(s))
            .find_map(|s| s.comm.as_ref())
            .filter(|c| c.iter().any(|x| *x != 0.0))
            .map(|c| full.translate(c).map(|t| t.message))
            .transpose()?;
        let n = traces.len();
        rows.push(ZeroShotRow {
            cell,
            episodes: n,
            success_rate: traces.iter().filter(|t| t.success).count() as f64 / n.max(1) as f64,
            cosine: al.as_ref().map(|a| a.cosine),
            bleu: al.as_ref().map(|a| a.bleu),
            example,
        });
    }
    Ok(rows)
}

/// Everything `report` writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub env: String,
    pub variant: String,
    pub seeds: Vec<u64>,
    pub performance: Option<Performance>,
    pub alignment: Option<Alignment>,
    pub topographic: Option<Topographic>,
    pub clusters: Option<ClusterSummary>,
    pub zero_shot: Vec<ZeroShotRow>,
    /// PCA coordinates of the clustered message vectors.
    pub projection: Vec<[f64; 2]>,
}

impl EvalReport {
    pub fn empty(env: &str, variant: &str) -> Self {
        Self {
            env: env.into(),
            variant: variant.into(),
            seeds: Vec::new(),
            performance: None,
            alignment: None,
            topographic: None,
            clusters: None,
            zero_shot: Vec::new(),
            projection: Vec::new(),
        }
    }
}

/// Options for [`analyze`].
#[derive(Clone, Debug)]
pub struct AnalyzeOptions {
    pub pair_cap: usize,
    pub seed: u64,
    pub eps: Option<f64>,
    pub min_pts: usize,
    /// Upper bound on vectors passed to clustering (first ones kept).
    pub max_points: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            pair_cap: DEFAULT_PAIR_CAP,
            seed: 0,
            eps: None,
            min_pts: 5,
            max_points: 2000,
        }
    }
}

/// Message-space metrics from saved traces: alignment, topographic
/// similarity, clusters and the 2-D projection.
pub fn analyze(
    report: &mut EvalReport,
    traces: &[TeamEpisode],
    env: &Env,
    ds: Option<&GroundingDataset>,
    opts: &AnalyzeOptions,
) -> Result<(), EvalError> {
    if let Some(ds) = ds {
        report.alignment = alignment(traces, ds, &env.tag())?;
    }
    report.topographic = topographic(traces, env, opts.pair_cap, opts.seed);
    let points: Vec<Vec<f64>> = broadcast_messages(traces)
        .into_iter()
        .take(opts.max_points)
        .map(|(c, _)| c.to_vec())
        .collect();
    if points.len() >= 2 {
        report.clusters = cluster_messages(&points, opts.eps, opts.min_pts, ds)?;
        report.projection = pca2(&points).coords;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
