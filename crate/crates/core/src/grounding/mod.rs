//! Grounding dataset: `(env, observation, action)` → reference message and
//! its embedding, with exact-key lookup, partial-grounding masks and
//! vector → text translation.

mod embed;

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{tokenize, Embedder, EmbeddingProvider, HttpEmbedder, LocalHashEmbedder};

use crate::env::observation_key;
use crate::env::pp::Cell;
use crate::kernel::{dot, norm};

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding provider failed after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: embedding has dimension {got}, expected {expected}")]
    Dimension { line: usize, expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("dataset is empty")]
    Empty,
    #[error("grounding fraction must lie in (0, 1], got {0}; use a run without grounding for 0")]
    Fraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub episode: u64,
    pub t: usize,
    pub agent: String,
    /// Prey cell of the recorded episode (Predator-Prey only); drives state-level masking.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prey: Option<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingEntry {
    pub env: String,
    pub obs: Vec<f64>,
    pub action: usize,
    pub message: String,
    pub embedding: Vec<f64>,
    pub meta: EntryMeta,
}

/// How a key with several recorded messages picks its reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceChoice {
    #[default]
    First,
    Uniform,
}

#[derive(Clone, Debug, Default)]
pub struct GroundingDataset {
    entries: Vec<GroundingEntry>,
    index: HashMap<Vec<u8>, Vec<usize>>,
    dim: usize,
    /// Entries whose key was already present.
    duplicates: usize,
    pub provider: Option<String>,
    pub mask_seed: Option<u64>,
}

impl GroundingDataset {
    pub fn new(entries: Vec<GroundingEntry>) -> Result<Self, GroundingError> {
        let mut ds = GroundingDataset::default();
        for (i, e) in entries.into_iter().enumerate() {
            ds.push(e).map_err(|err| match err {
                GroundingError::Invalid(m) => GroundingError::Parse { line: i + 1, message: m },
                GroundingError::Dimension { expected, got, .. } => GroundingError::Dimension {
                    line: i + 1,
                    expected,
                    got,
                },
                other => other,
            })?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, entry: GroundingEntry) -> Result<(), GroundingError> {
        if entry.message.trim().is_empty() {
            return Err(GroundingError::Invalid("message is empty".into()));
        }
        if self.entries.is_empty() {
            self.dim = entry.embedding.len();
        } else if entry.embedding.len() != self.dim {
            return Err(GroundingError::Dimension {
                line: self.entries.len() + 1,
                expected: self.dim,
                got: entry.embedding.len(),
            });
        }
        let n = norm(&entry.embedding);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(GroundingError::Invalid(format!("embedding norm is {n}, expected 1")));
        }
        let key = observation_key(&entry.env, &entry.obs, entry.action);
        let slot = self.index.entry(key).or_default();
        if !slot.is_empty() {
            self.duplicates += 1;
        }
        slot.push(self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[GroundingEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of distinct keys.
    pub fn n_keys(&self) -> usize {
        self.index.len()
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    /// Index of the reference entry for a key (the first recorded), if any.
    pub fn lookup_index(&self, env: &str, obs: &[f64], action: usize) -> Option<usize> {
        self.index
            .get(&observation_key(env, obs, action))
            .map(|ids| ids[0])
    }

    /// Reference embedding for `(env, obs, action)`, or `None` when ungrounded.
    pub fn lookup(&self, env: &str, obs: &[f64], action: usize) -> Option<&[f64]> {
        self.lookup_index(env, obs, action)
            .map(|i| self.entries[i].embedding.as_slice())
    }

    /// Like [`lookup_index`](Self::lookup_index), drawing uniformly among all
    /// messages recorded for the key when `choice` is `Uniform`.
    pub fn lookup_with<R: Rng>(
        &self,
        env: &str,
        obs: &[f64],
        action: usize,
        choice: ReferenceChoice,
        rng: &mut R,
    ) -> Option<usize> {
        let ids = self.index.get(&observation_key(env, obs, action))?;
        match choice {
            ReferenceChoice::First => Some(ids[0]),
            ReferenceChoice::Uniform => Some(ids[rng.random_range(0..ids.len())]),
        }
    }

    /// Keeps grounding for a `fraction` of states.
    ///
    /// Predator-Prey entries are grouped by the episode's prey cell; entries
    /// without a prey cell are grouped by episode. Groups are shuffled once
    /// with `seed` and a prefix of `round(fraction · groups)` (at least one)
    /// is kept, so masks with the same seed are nested.
    pub fn mask(&self, fraction: f64, seed: u64) -> Result<Self, GroundingError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(GroundingError::Fraction(fraction));
        }
        if fraction == 1.0 {
            let mut out = self.clone();
            out.mask_seed = Some(seed);
            return Ok(out);
        }
        let groups: BTreeSet<Group> = self.entries.iter().map(Group::of).collect();
        let mut groups: Vec<Group> = groups.into_iter().collect();
        groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let keep = ((fraction * groups.len() as f64).round() as usize).max(1);
        let kept: BTreeSet<Group> = groups.into_iter().take(keep).collect();
        let mut out = self.filter(|e| kept.contains(&Group::of(e)))?;
        out.mask_seed = Some(seed);
        Ok(out)
    }

    /// Drops every entry recorded in an episode whose prey sat in one of `cells`.
    pub fn without_prey_cells(&self, cells: &[Cell]) -> Result<Self, GroundingError> {
        self.filter(|e| e.meta.prey.is_none_or(|p| !cells.contains(&p)))
    }

    /// Distinct prey cells covered by the dataset, sorted.
    pub fn prey_cells(&self) -> Vec<Cell> {
        let set: BTreeSet<Cell> = self.entries.iter().filter_map(|e| e.meta.prey).collect();
        set.into_iter().collect()
    }

    fn filter(&self, keep: impl Fn(&GroundingEntry) -> bool) -> Result<Self, GroundingError> {
        let mut out = GroundingDataset::new(self.entries.iter().filter(|e| keep(e)).cloned().collect())?;
        out.provider = self.provider.clone();
        if out.is_empty() {
            out.dim = self.dim;
        }
        Ok(out)
    }

    /// Message of the entry most cosine-similar to `c` and its score; ties go to the lowest index.
    pub fn translate(&self, c: &[f64]) -> Result<Translation, GroundingError> {
        if self.entries.is_empty() {
            return Err(GroundingError::Empty);
        }
        if c.len() != self.dim {
            return Err(GroundingError::Dimension {
                line: 0,
                expected: self.dim,
                got: c.len(),
            });
        }
        let n = norm(c);
        if n == 0.0 {
            return Err(GroundingError::Invalid("cannot translate a zero vector".into()));
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, e) in self.entries.iter().enumerate() {
            let s = dot(c, &e.embedding);
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok(Translation {
            index: best.0,
            message: self.entries[best.0].message.clone(),
            score: (best.1 / n).clamp(-1.0, 1.0),
        })
    }

    pub fn load(path: &Path) -> Result<Self, GroundingError> {
        let reader = BufReader::new(File::open(path)?);
        let mut ds = GroundingDataset::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(marker) = serde_json::from_str::<InvalidMarker>(&line) {
                return Err(GroundingError::Invalid(format!(
                    "line {}: dataset is marked invalid: {}",
                    i + 1,
                    marker.invalid
                )));
            }
            let entry: GroundingEntry = serde_json::from_str(&line).map_err(|e| GroundingError::Parse {
                line: i + 1,
                message: strip_position(&e.to_string()),
            })?;
            ds.push(entry).map_err(|err| match err {
                GroundingError::Invalid(m) => GroundingError::Parse { line: i + 1, message: m },
                GroundingError::Dimension { expected, got, .. } => GroundingError::Dimension {
                    line: i + 1,
                    expected,
                    got,
                },
                other => other,
            })?;
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), GroundingError> {
        let mut w = BufWriter::new(File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trailer line written by an interrupted recording.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct InvalidMarker {
    pub invalid: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub index: usize,
    pub message: String,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Group {
    Prey(Cell),
    Episode(u64),
}

impl Group {
    fn of(e: &GroundingEntry) -> Self {
        match e.meta.prey {
            Some(c) => Group::Prey(c),
            None => Group::Episode(e.meta.episode),
        }
    }
}

/// serde_json appends " at line 1 column N", which is meaningless for a single JSONL record.
fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}
