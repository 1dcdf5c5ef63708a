//! Grounding dataset recording from oracle play.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::grounding::{Embedder, EntryMeta, GroundingDataset, GroundingEntry, GroundingError};
use crate::kernel::{RngStreams, SampleMode};

use super::{agent_name, run_team_episode, Bridge, Seat, TextGameError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordReport {
    pub episodes: usize,
    pub entries: usize,
    pub mean_length: f64,
    pub success_rate: f64,
}

/// Plays `episodes` oracle-team episodes and writes every
/// `(observation, action, message)` with its embedding as JSONL.
///
/// Episode `k` resets from the `env` stream of `seed`. If the embedder
/// fails, the entries written so far are followed by an `invalid` trailer
/// line, which makes [`GroundingDataset::load`] reject the file.
pub fn record(
    env: &Env,
    episodes: usize,
    seed: u64,
    embedder: &dyn Embedder,
    provider: &str,
    out: &Path,
) -> Result<(GroundingDataset, RecordReport), TextGameError> {
    let streams = RngStreams::new(seed);
    let tag = env.tag();
    let mut w = BufWriter::new(File::create(out)?);
    let mut ds = GroundingDataset::default();
    ds.provider = Some(provider.to_string());
    let mut total_len = 0usize;
    let mut successes = 0usize;
    for ep in 0..episodes as u64 {
        let state = env.reset(&mut streams.stream("env", ep, 0))?;
        let mut seats: Vec<Seat> = (0..env.n_agents()).map(|_| Seat::Oracle).collect();
        let mut act = streams.stream("act", ep, 0);
        let episode = run_team_episode(env, &mut seats, &Bridge::default(), state, &mut act, SampleMode::Greedy, ep)?;
        total_len += episode.len();
        successes += usize::from(episode.success);
        for (t, row) in episode.steps.iter().enumerate() {
            for (i, s) in row.iter().enumerate() {
                let Some(message) = &s.message else { continue };
                let embedding = match embedder.embed(message) {
                    Ok(e) => e,
                    Err(err) => {
                        serde_json::to_writer(&mut w, &serde_json::json!({ "invalid": err.to_string() }))?;
                        w.write_all(b"\n")?;
                        w.flush()?;
                        return Err(err.into());
                    }
                };
                let entry = GroundingEntry {
                    env: tag.clone(),
                    obs: s.obs.clone(),
                    action: s.action,
                    message: message.clone(),
                    embedding,
                    meta: EntryMeta {
                        episode: ep,
                        t,
                        agent: agent_name(env, i),
                        prey: episode.prey,
                    },
                };
                serde_json::to_writer(&mut w, &entry)?;
                w.write_all(b"\n")?;
                ds.push(entry).map_err(|e| match e {
                    GroundingError::Invalid(m) => TextGameError::Protocol(m),
                    other => other.into(),
                })?;
            }
        }
    }
    w.flush()?;
    let n = episodes.max(1) as f64;
    let report = RecordReport {
        episodes,
        entries: ds.len(),
        mean_length: total_len as f64 / n,
        success_rate: successes as f64 / n,
    };
    Ok((ds, report))
}
