//! Layered run configuration: defaults, then a TOML file, then flags, then
//! `--set key=value` overrides. Unknown keys fail at deserialization.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use groundcomm::evaluation::{AnalyzeOptions, DEFAULT_PAIR_CAP};
use groundcomm::grounding::EmbeddingProvider;

use crate::UsageError;

/// Name of the resolved config written next to every run's outputs.
pub const RESOLVED: &str = "config.toml";

/// Parses `key=value`; the value is read as TOML and falls back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, Value), UsageError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| UsageError(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(UsageError(format!("override `{s}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_path(root: &mut Table, key: &str, value: Value) -> Result<(), UsageError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut t = root;
    for p in parts {
        let entry = t.entry(p).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| UsageError(format!("cannot set `{key}`: `{p}` is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`. Tables tagged with a different
/// `kind` replace rather than merge.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) if b.get("kind") == t.get("kind") || t.get("kind").is_none() => {
                merge(b, t)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Builds the effective config of type `T`.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    flags: Vec<(String, Value)>,
    overrides: &[String],
) -> Result<T> {
    let mut root = Table::try_from(defaults).context("serializing defaults")?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut root, table);
    }
    for (k, v) in flags {
        set_path(&mut root, &k, v)?;
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut root, &k, v)?;
    }
    root.try_into::<T>()
        .map_err(|e| UsageError(format!("invalid configuration: {e}")).into())
}

pub fn write_resolved<T: Serialize>(config: &T, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let text = toml::to_string(config).context("serializing config")?;
    std::fs::write(out.join(RESOLVED), text).with_context(|| format!("writing {}", out.join(RESOLVED).display()))
}

/// Message-space analysis knobs shared by `eval`, `adhoc` and `analyze`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub pair_cap: usize,
    pub seed: u64,
    pub eps: Option<f64>,
    pub min_pts: usize,
    pub max_points: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let d = AnalyzeOptions::default();
        Self {
            pair_cap: DEFAULT_PAIR_CAP,
            seed: d.seed,
            eps: d.eps,
            min_pts: d.min_pts,
            max_points: d.max_points,
        }
    }
}

impl AnalysisConfig {
    pub fn options(&self) -> AnalyzeOptions {
        AnalyzeOptions {
            pair_cap: self.pair_cap,
            seed: self.seed,
            eps: self.eps,
            min_pts: self.min_pts,
            max_points: self.max_points,
        }
    }
}

/// `collect`: oracle recording of a grounding dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub env: String,
    pub episodes: usize,
    pub seed: u64,
    pub embedder: EmbeddingProvider,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            env: "pp_v0".into(),
            episodes: 100,
            seed: 0,
            embedder: EmbeddingProvider::local(32),
        }
    }
}

/// `eval`, `adhoc`, `zeroshot` and `serve`: a team of seats on one environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeamConfig {
    /// One entry per agent: a checkpoint path, `oracle` or `external`.
    pub team: Vec<String>,
    /// Environment preset; required when no seat is a checkpoint.
    pub env: Option<String>,
    /// Full grounding dataset for alignment and the translation bridge.
    pub grounding: Option<PathBuf>,
    /// Embedder turning text into vectors for policy seats; defaults to the
    /// local embedder at the dataset's dimension.
    pub embedder: Option<EmbeddingProvider>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Prey cells for `zeroshot`; defaults to the checkpoint's held-out cells.
    pub cells: Vec<(usize, usize)>,
    pub analysis: AnalysisConfig,
    pub serve: ServeConfig,
}

impl Default for TeamConfig {
    fn default() -> Self {
        Self {
            team: Vec::new(),
            env: None,
            grounding: None,
            embedder: None,
            episodes: 8,
            seeds: vec![0, 1, 2],
            cells: Vec::new(),
            analysis: AnalysisConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub listen: String,
    /// Stop after this many sessions; unbounded when absent.
    pub sessions: Option<usize>,
    pub timeout_ms: u64,
    pub seed: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7878".into(),
            sessions: None,
            timeout_ms: 30_000,
            seed: 0,
        }
    }
}

/// `analyze`: message-space metrics from saved traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub traces: PathBuf,
    pub env: String,
    pub variant: String,
    pub grounding: Option<PathBuf>,
    pub analysis: AnalysisConfig,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            traces: PathBuf::from("traces.jsonl"),
            env: "pp_v0".into(),
            variant: "unknown".into(),
            grounding: None,
            analysis: AnalysisConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_typed_values() {
        assert_eq!(parse_override("lr=0.01").unwrap(), ("lr".into(), Value::Float(0.01)));
        assert_eq!(parse_override("env.grid = 7").unwrap(), ("env.grid".into(), Value::Integer(7)));
        assert_eq!(parse_override("no_gating=true").unwrap().1, Value::Boolean(true));
        assert_eq!(parse_override("grounding=data/x.jsonl").unwrap().1, Value::String("data/x.jsonl".into()));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = resolve(&CollectConfig::default(), None, vec![], &["episodez=3".into()]).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some(), "{err:#}");
        let ok: CollectConfig = resolve(&CollectConfig::default(), None, vec![], &["episodes=3".into()]).unwrap();
        assert_eq!(ok.episodes, 3);
    }

    #[test]
    fn file_then_flags_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "episodes = 5\nseed = 9\n[embedder]\nkind = \"local\"\ndim = 16\n").unwrap();
        let flags = vec![("seed".to_string(), Value::Integer(4))];
        let c: CollectConfig = resolve(&CollectConfig::default(), Some(&path), flags, &["episodes=6".into()]).unwrap();
        assert_eq!(c.episodes, 6);
        assert_eq!(c.seed, 4);
        assert_eq!(c.embedder, EmbeddingProvider::Local { dim: 16, seed: 0 });
        // The written file resolves back to the same config.
        write_resolved(&c, dir.path()).unwrap();
        let again: CollectConfig = resolve(&CollectConfig::default(), Some(&dir.path().join(RESOLVED)), vec![], &[]).unwrap();
        assert_eq!(again, c);
    }
}
