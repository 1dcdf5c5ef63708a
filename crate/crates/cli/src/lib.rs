//! Command-line front end: training, dataset recording, evaluation,
//! zero-shot and ad-hoc team experiments, trace analysis and the text server.

pub mod config;
mod team;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use toml::Value;

use groundcomm::env::{pp::Cell, Env, EnvConfig};
use groundcomm::evaluation::{analyze, evaluate, write_report, zero_shot_eval, EvalReport};
use groundcomm::grounding::{EmbeddingProvider, GroundingDataset};
use groundcomm::kernel::Checkpoint;
use groundcomm::textgame::{record, serve_tcp, TeamEpisode};
use groundcomm::training::{Preset, TrainConfig, Trainer, Variant};

use config::{resolve, write_resolved, AnalyzeConfig, CollectConfig, TeamConfig};
pub use team::{SeatEntry, Team};

/// A bad flag, flag combination or config key. Exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const TRACES: &str = "traces.jsonl";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const DATASET: &str = "grounding.jsonl";

#[derive(Debug, Parser)]
#[command(name = "groundcomm", version, about = "Multi-agent communication grounded in natural language")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a team policy.
    Train(TrainArgs),
    /// Record a grounding dataset from the scripted oracle team.
    Collect(CollectArgs),
    /// Evaluate a checkpoint in self-play.
    Eval(EvalArgs),
    /// Evaluate messages on prey spawns held out during training.
    Zeroshot(ZeroShotArgs),
    /// Evaluate a mixed team of checkpoints and oracle seats.
    Adhoc(AdhocArgs),
    /// Message-space metrics from saved traces.
    Analyze(AnalyzeArgs),
    /// Serve text-protocol sessions over TCP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; flags and --set override its values.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set env.max_steps=30`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, short = 'o', default_value = "runs/latest")]
    pub out: PathBuf,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_parser = EnvConfig::PRESETS, conflicts_with = "config")]
    pub env: Option<String>,
    #[arg(long, value_parser = ["langground", "ic3net", "nocomm", "aecomm"], conflicts_with = "config")]
    pub variant: Option<String>,
    #[arg(long, value_parser = ["desk", "paper"], conflicts_with = "config")]
    pub preset: Option<String>,
    /// Weight of the alignment loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Grounding dataset (JSON lines).
    #[arg(long)]
    pub grounding: Option<PathBuf>,
    #[arg(long)]
    pub grounding_fraction: Option<f64>,
    /// Prey spawn cells withheld from training, e.g. `1,1;1,3;3,1;3,3`.
    #[arg(long, value_parser = parse_cells)]
    pub hold_out: Option<CellList>,
    /// Force every communication gate open.
    #[arg(long)]
    pub no_gating: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_parser = EnvConfig::PRESETS)]
    pub env: Option<String>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Dimension of the local embedder.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// HTTP embedding endpoint; the API key is read from GROUNDCOMM_EMBED_API_KEY.
    #[arg(long, requires = "embed_model")]
    pub embed_endpoint: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Full grounding dataset for alignment metrics and translation.
    #[arg(long)]
    pub grounding: Option<PathBuf>,
    /// Episodes per seed.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Number of evaluation seeds (0..N).
    #[arg(long)]
    pub seeds: Option<u64>,
    /// DBSCAN radius; defaults to the k-distance knee.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub min_pts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, required_unless_present = "config")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ZeroShotArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, required_unless_present = "config")]
    pub checkpoint: Option<PathBuf>,
    /// Cells to spawn the prey on; defaults to the checkpoint's held-out cells.
    #[arg(long, value_parser = parse_cells)]
    pub hold_out: Option<CellList>,
}

#[derive(Debug, Args)]
pub struct AdhocArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated seats: checkpoint paths or `oracle`.
    #[arg(long, value_delimiter = ',', required_unless_present = "config")]
    pub team: Vec<String>,
    /// Environment preset when no seat is a checkpoint.
    #[arg(long, value_parser = EnvConfig::PRESETS)]
    pub env: Option<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long, value_parser = EnvConfig::PRESETS)]
    pub env: Option<String>,
    #[arg(long)]
    pub grounding: Option<PathBuf>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub min_pts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated seats: checkpoint paths, `oracle` or `external`.
    #[arg(long, value_delimiter = ',', required_unless_present = "config")]
    pub team: Vec<String>,
    #[arg(long, value_parser = EnvConfig::PRESETS)]
    pub env: Option<String>,
    #[arg(long)]
    pub grounding: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<String>,
    /// Stop after this many sessions.
    #[arg(long)]
    pub sessions: Option<usize>,
    /// Per-round reply deadline for external seats.
    #[arg(long)]
    pub timeout_ms: Option<u64>,
}

/// Grid cells given on the command line as `r,c;r,c;...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellList(pub Vec<Cell>);

pub fn parse_cells(s: &str) -> Result<CellList, String> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (r, c) = p.split_once(',').ok_or_else(|| format!("cell `{p}` is not `row,col`"))?;
            let n = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("cell `{p}`: {e}"));
            Ok((n(r)?, n(c)?))
        })
        .collect::<Result<_, String>>()
        .map(CellList)
}

fn cells_value(cells: &[Cell]) -> Value {
    Value::Array(
        cells
            .iter()
            .map(|&(r, c)| Value::Array(vec![Value::Integer(r as i64), Value::Integer(c as i64)]))
            .collect(),
    )
}

fn int(x: impl TryInto<i64>) -> Result<Value> {
    x.try_into()
        .map(Value::Integer)
        .map_err(|_| UsageError("integer flag out of range".into()).into())
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Collect(a) => collect(a),
        Command::Eval(a) => eval(a),
        Command::Zeroshot(a) => zeroshot(a),
        Command::Adhoc(a) => adhoc(a),
        Command::Analyze(a) => analyze_traces(a),
        Command::Serve(a) => serve(a),
    }
}

/// Resolves the training config for `train` without running it.
pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let variant = a.variant.as_deref().map_or(Variant::LangGround, |v| Variant::parse(v).expect("checked by clap"));
    let preset = match a.preset.as_deref() {
        Some("paper") => Preset::Paper,
        _ => Preset::Desk,
    };
    let base = TrainConfig::preset(a.env.as_deref().unwrap_or("pp_v0"), variant, preset)?;
    let mut flags = Vec::new();
    if let Some(l) = a.lambda {
        flags.push(("lambda".into(), Value::Float(l)));
    }
    if let Some(g) = &a.grounding {
        flags.push(("grounding".into(), path_value(g)));
    }
    if let Some(f) = a.grounding_fraction {
        flags.push(("grounding_fraction".into(), Value::Float(f)));
    }
    if let Some(cells) = &a.hold_out {
        flags.push(("env.held_out_prey_spawns".into(), cells_value(&cells.0)));
    }
    if a.no_gating {
        flags.push(("no_gating".into(), Value::Boolean(true)));
    }
    if let Some(e) = a.epochs {
        flags.push(("epochs".into(), int(e)?));
    }
    if let Some(s) = a.common.seed {
        flags.push(("seed".into(), int(s)?));
    }
    let cfg: TrainConfig = resolve(&base, a.common.config.as_deref(), flags, &a.common.overrides)?;
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    if cfg.variant == Variant::LangGround && cfg.lambda > 0.0 && cfg.grounding.is_none() {
        return Err(UsageError("variant langground with lambda > 0 requires --grounding".into()).into());
    }
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let out = &a.common.out;
    write_resolved(&cfg, out)?;
    let ds = cfg.load_grounding()?;
    let every = cfg.checkpoint_every;
    let mut trainer = Trainer::new(cfg, ds)?;
    trainer.run(|t| {
        let m = t.metrics.rows.last().expect("epoch finished");
        if m.epoch % 10 == 0 {
            eprintln!(
                "epoch {:>4}  length {:6.2}  success {:.2}  gates {:.2}",
                m.epoch, m.mean_length, m.success_rate, m.gate_rate
            );
        }
        if every > 0 && t.epoch() % every == 0 {
            t.checkpoint()?.save(&out.join(format!("checkpoint_{:05}.bin", t.epoch())))?;
            t.metrics.save_csv(&out.join(METRICS))?;
        }
        Ok(())
    })?;
    trainer.checkpoint()?.save(&out.join(CHECKPOINT))?;
    trainer.metrics.save_csv(&out.join(METRICS))?;
    if let Some(m) = trainer.metrics.rows.last() {
        println!(
            "trained {} epochs: length {:.2}, success {:.2}; wrote {}",
            trainer.epoch(),
            m.mean_length,
            m.success_rate,
            out.display()
        );
    }
    Ok(())
}

fn collect(a: CollectArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(e) = &a.env {
        flags.push(("env".into(), Value::String(e.clone())));
    }
    if let Some(n) = a.episodes {
        flags.push(("episodes".into(), int(n)?));
    }
    if let Some(s) = a.common.seed {
        flags.push(("seed".into(), int(s)?));
    }
    let mut base = CollectConfig::default();
    match (&a.embed_endpoint, &a.embed_model) {
        (Some(endpoint), Some(model)) => {
            base.embedder = EmbeddingProvider::Http {
                endpoint: endpoint.clone(),
                model: model.clone(),
                dim: a.embed_dim.unwrap_or(256),
                api_key_env: "GROUNDCOMM_EMBED_API_KEY".into(),
                retries: 3,
            }
        }
        _ => {
            if let Some(d) = a.embed_dim {
                base.embedder = EmbeddingProvider::local(d);
            }
        }
    }
    let cfg: CollectConfig = resolve(&base, a.common.config.as_deref(), flags, &a.common.overrides)?;
    let env = Env::preset(&cfg.env).map_err(|e| UsageError(e.to_string()))?;
    let out = &a.common.out;
    write_resolved(&cfg, out)?;
    let embedder = cfg.embedder.build()?;
    let provider = serde_json::to_string(&cfg.embedder)?;
    let path = out.join(DATASET);
    let (ds, report) = record(&env, cfg.episodes, cfg.seed, embedder.as_ref(), &provider, &path)?;
    std::fs::write(out.join("collect.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "recorded {} entries ({} keys) from {} episodes: mean length {:.2}, success {:.2}; wrote {}",
        report.entries,
        ds.n_keys(),
        report.episodes,
        report.mean_length,
        report.success_rate,
        path.display()
    );
    Ok(())
}

fn run_flags(r: &RunArgs, seed: Option<u64>) -> Result<Vec<(String, Value)>> {
    let mut flags = Vec::new();
    if let Some(g) = &r.grounding {
        flags.push(("grounding".into(), path_value(g)));
    }
    if let Some(n) = r.episodes {
        flags.push(("episodes".into(), int(n)?));
    }
    if let Some(k) = r.seeds {
        let start = seed.unwrap_or(0);
        let seeds = (start..start + k).map(int).collect::<Result<Vec<_>>>()?;
        flags.push(("seeds".into(), Value::Array(seeds)));
    } else if let Some(s) = seed {
        flags.push(("seeds".into(), Value::Array(vec![int(s)?])));
    }
    if let Some(e) = r.eps {
        flags.push(("analysis.eps".into(), Value::Float(e)));
    }
    if let Some(m) = r.min_pts {
        flags.push(("analysis.min_pts".into(), int(m)?));
    }
    Ok(flags)
}

fn team_value(entries: impl IntoIterator<Item = String>) -> Value {
    Value::Array(entries.into_iter().map(Value::String).collect())
}

/// Resolved config for `eval`: the checkpoint fills every seat.
pub fn eval_config(a: &EvalArgs) -> Result<TeamConfig> {
    let mut flags = run_flags(&a.run, a.common.seed)?;
    if let Some(ck) = &a.checkpoint {
        let n = Team::checkpoint_agents(ck)?;
        flags.push(("team".into(), team_value(vec![ck.to_string_lossy().into_owned(); n])));
    }
    resolve(&TeamConfig::default(), a.common.config.as_deref(), flags, &a.common.overrides)
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = eval_config(&a)?;
    run_team(cfg, &a.common.out)
}

fn adhoc(a: AdhocArgs) -> Result<()> {
    let mut flags = run_flags(&a.run, a.common.seed)?;
    if !a.team.is_empty() {
        flags.push(("team".into(), team_value(a.team.clone())));
    }
    if let Some(e) = &a.env {
        flags.push(("env".into(), Value::String(e.clone())));
    }
    let cfg: TeamConfig = resolve(&TeamConfig::default(), a.common.config.as_deref(), flags, &a.common.overrides)?;
    run_team(cfg, &a.common.out)
}

/// Plays the configured team and writes the report, traces and config.
fn run_team(cfg: TeamConfig, out: &Path) -> Result<()> {
    let team = Team::load(&cfg)?;
    if team.has_external() {
        return Err(UsageError("external seats are only available through `serve`".into()).into());
    }
    write_resolved(&cfg, out)?;
    let mut seats = team.seats();
    let bridge = team.bridge();
    let (perf, traces) = evaluate(&team.env, &mut seats, &bridge, cfg.episodes, &cfg.seeds)?;
    let mut report = EvalReport::empty(&team.env.tag(), &team.label());
    report.seeds = cfg.seeds.clone();
    report.performance = Some(perf);
    if team.policy_count() > 0 {
        analyze(&mut report, &traces, &team.env, team.grounding.as_ref(), &cfg.analysis.options())?;
    }
    write_report(&report, out)?;
    write_traces(&traces, &out.join(TRACES))?;
    let p = report.performance.as_ref().expect("set above");
    println!(
        "{} on {}: {} episodes, length {:.2} ± {:.2}, success {:.2}; wrote {}",
        report.variant,
        report.env,
        p.length.n,
        p.length.mean,
        p.length.sd,
        p.success.mean,
        out.display()
    );
    Ok(())
}

pub fn write_traces(traces: &[TeamEpisode], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<TeamEpisode>> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
        }
    }
    Ok(out)
}

fn zeroshot(a: ZeroShotArgs) -> Result<()> {
    let mut flags = run_flags(&a.run, a.common.seed)?;
    if let Some(ck) = &a.checkpoint {
        let n = Team::checkpoint_agents(ck)?;
        flags.push(("team".into(), team_value(vec![ck.to_string_lossy().into_owned(); n])));
    }
    if let Some(cells) = &a.hold_out {
        flags.push(("cells".into(), cells_value(&cells.0)));
    }
    let mut cfg: TeamConfig = resolve(&TeamConfig::default(), a.common.config.as_deref(), flags, &a.common.overrides)?;
    let team = Team::load(&cfg)?;
    if cfg.cells.is_empty() {
        cfg.cells = team.env.config().pp().map(|c| c.held_out_prey_spawns.clone()).unwrap_or_default();
    }
    if cfg.cells.is_empty() {
        return Err(UsageError("no held-out cells: pass --hold-out or use a checkpoint trained with one".into()).into());
    }
    let Some(full) = team.grounding.as_ref() else {
        return Err(UsageError("zeroshot requires --grounding".into()).into());
    };
    let out = &a.common.out;
    write_resolved(&cfg, out)?;
    let mut seats = team.seats();
    let rows = zero_shot_eval(&team.env, &mut seats, &team.bridge(), full, &cfg.cells, cfg.episodes, &cfg.seeds)?;
    let mut report = EvalReport::empty(&team.env.tag(), &team.label());
    report.seeds = cfg.seeds.clone();
    report.zero_shot = rows;
    write_report(&report, out)?;
    for r in &report.zero_shot {
        println!(
            "cell ({},{}): success {:.2}, cosine {}, bleu {}",
            r.cell.0,
            r.cell.1,
            r.success_rate,
            r.cosine.map_or("n/a".into(), |s| format!("{:.3}", s.mean)),
            r.bleu.map_or("n/a".into(), |s| format!("{:.3}", s.mean)),
        );
    }
    Ok(())
}

fn analyze_traces(a: AnalyzeArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(t) = &a.traces {
        flags.push(("traces".into(), path_value(t)));
    }
    if let Some(e) = &a.env {
        flags.push(("env".into(), Value::String(e.clone())));
    }
    if let Some(g) = &a.grounding {
        flags.push(("grounding".into(), path_value(g)));
    }
    if let Some(e) = a.eps {
        flags.push(("analysis.eps".into(), Value::Float(e)));
    }
    if let Some(m) = a.min_pts {
        flags.push(("analysis.min_pts".into(), int(m)?));
    }
    if let Some(s) = a.common.seed {
        flags.push(("analysis.seed".into(), int(s)?));
    }
    let cfg: AnalyzeConfig = resolve(&AnalyzeConfig::default(), a.common.config.as_deref(), flags, &a.common.overrides)?;
    let env = Env::preset(&cfg.env).map_err(|e| UsageError(e.to_string()))?;
    let traces = read_traces(&cfg.traces)?;
    let ds = cfg.grounding.as_deref().map(GroundingDataset::load).transpose()?;
    let out = &a.common.out;
    write_resolved(&cfg, out)?;
    let mut report = EvalReport::empty(&env.tag(), &cfg.variant);
    analyze(&mut report, &traces, &env, ds.as_ref(), &cfg.analysis.options())?;
    write_report(&report, out)?;
    println!(
        "analyzed {} episodes: topographic rho {}, clusters {}; wrote {}",
        traces.len(),
        report.topographic.as_ref().map_or("n/a".into(), |t| format!("{:.3}", t.rho)),
        report.clusters.as_ref().map_or(0, |c| c.clusters.len()),
        out.display()
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut flags = Vec::new();
    if !a.team.is_empty() {
        flags.push(("team".into(), team_value(a.team.clone())));
    }
    if let Some(e) = &a.env {
        flags.push(("env".into(), Value::String(e.clone())));
    }
    if let Some(g) = &a.grounding {
        flags.push(("grounding".into(), path_value(g)));
    }
    if let Some(l) = &a.listen {
        flags.push(("serve.listen".into(), Value::String(l.clone())));
    }
    if let Some(n) = a.sessions {
        flags.push(("serve.sessions".into(), int(n)?));
    }
    if let Some(t) = a.timeout_ms {
        flags.push(("serve.timeout_ms".into(), int(t)?));
    }
    if let Some(s) = a.common.seed {
        flags.push(("serve.seed".into(), int(s)?));
    }
    let cfg: TeamConfig = resolve(&TeamConfig::default(), a.common.config.as_deref(), flags, &a.common.overrides)?;
    let team = Team::load(&cfg)?;
    let out = &a.common.out;
    write_resolved(&cfg, out)?;
    let listener = TcpListener::bind(&cfg.serve.listen).with_context(|| format!("binding {}", cfg.serve.listen))?;
    eprintln!("listening on {}", listener.local_addr()?);
    let setup = team.serve_setup(Duration::from_millis(cfg.serve.timeout_ms), cfg.serve.seed);
    let mut log = BufWriter::new(File::create(out.join("sessions.jsonl"))?);
    serve_tcp(&setup, listener, cfg.serve.sessions, |s| {
        s.save_transcript(&out.join(format!("{}.jsonl", s.session)))?;
        let line = serde_json::json!({
            "session": s.session,
            "rounds": s.episode.len(),
            "success": s.episode.success,
            "timeouts": s.episode.timeouts(),
        });
        writeln!(log, "{line}")?;
        log.flush()?;
        println!("{line}");
        Ok(())
    })?;
    Ok(())
}

/// Loads a checkpoint; shared by the team loader and tests.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}
