//! Joint optimization of the task loss and the λ-weighted alignment loss.

mod loss;
mod rollout;

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loss::{batch_loss, returns, trace_returns, AuxLoss, LossReport, LossWeights, RewardMode};
pub use rollout::{
    collect, gate_logprob, random_policy_length, replay, run_episode, EpisodeTrace, GateMode, Reference,
    RolloutSpec, StepForward, StepRecord,
};
pub(crate) use rollout::draw_gate;

use crate::agent::{AgentPolicy, PolicyShape};
use crate::env::{Env, EnvConfig, EnvError};
use crate::grounding::{GroundingDataset, GroundingError, ReferenceChoice};
use crate::kernel::{Checkpoint, KernelError, Optimizer, OptimizerKind, RngStreams, SampleMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch} (seed {seed})")]
    NonFinite { epoch: usize, seed: u64 },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Toml(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Alignment to grounding-dataset embeddings.
    LangGround,
    /// Learned gated communication without alignment.
    Ic3Net,
    /// No communication.
    NoComm,
    /// Messages trained to reconstruct the observation encoding.
    AeComm,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "langground" => Some(Variant::LangGround),
            "ic3net" => Some(Variant::Ic3Net),
            "nocomm" => Some(Variant::NoComm),
            "aecomm" => Some(Variant::AeComm),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::LangGround => "langground",
            Variant::Ic3Net => "ic3net",
            Variant::NoComm => "nocomm",
            Variant::AeComm => "aecomm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small networks and short schedules that fit a laptop.
    Desk,
    /// Full-size networks and schedules.
    Paper,
}

/// Every knob of a training run. Unset fields take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Weight of the alignment loss.
    pub lambda: f64,
    pub gamma: f64,
    /// Minimum environment steps gathered per update.
    pub batch_steps: usize,
    pub updates_per_epoch: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub comm_dim: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// JSON-lines grounding dataset (required by `langground`).
    pub grounding: Option<PathBuf>,
    /// Share of grounded states kept, in (0, 1].
    pub grounding_fraction: f64,
    pub reference: ReferenceChoice,
    /// Forces every gate open and drops the gate terms from the loss.
    pub no_gating: bool,
    /// Appends an agent-id one-hot to observations.
    pub agent_id: bool,
    pub reward: RewardMode,
    /// Epochs between checkpoints written by the CLI (0: final only).
    pub checkpoint_every: usize,
    /// Parallel rollout workers; results do not depend on this.
    pub workers: usize,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::LangGround,
            lambda: 1.0,
            gamma: 1.0,
            batch_steps: 500,
            updates_per_epoch: 10,
            epochs: 300,
            hidden: 64,
            comm_dim: 32,
            lr: 0.001,
            optimizer: OptimizerKind::default(),
            value_coef: 0.05,
            entropy_coef: 0.01,
            clip_norm: 1.0,
            seed: 0,
            grounding: None,
            grounding_fraction: 1.0,
            reference: ReferenceChoice::First,
            no_gating: false,
            agent_id: false,
            reward: RewardMode::Individual,
            checkpoint_every: 0,
            workers: 1,
            env: EnvConfig::preset("pp_v0").expect("builtin preset"),
        }
    }
}

impl TrainConfig {
    /// Preset for an environment name (`pp_v0`, `pp_v1`, `pp10_v1`, `usar`).
    pub fn preset(env: &str, variant: Variant, preset: Preset) -> Result<Self, TrainError> {
        let env_cfg = EnvConfig::preset(env)?;
        let usar = matches!(env_cfg, EnvConfig::Usar(_));
        let mut c = TrainConfig {
            variant,
            agent_id: usar,
            env: env_cfg,
            ..Default::default()
        };
        c.lambda = match variant {
            Variant::LangGround | Variant::AeComm if usar => 10.0,
            Variant::LangGround | Variant::AeComm => 1.0,
            Variant::Ic3Net | Variant::NoComm => 0.0,
        };
        match preset {
            Preset::Paper => {
                c.hidden = 256;
                c.comm_dim = 256;
                c.updates_per_epoch = 10;
                c.epochs = if env == "pp_v1" { 500 } else { 2000 };
                c.lr = if usar { 1e-4 } else { 1e-3 };
            }
            Preset::Desk => {
                c.hidden = 64;
                c.comm_dim = 32;
                c.updates_per_epoch = 2;
                c.epochs = 300;
                c.lr = if usar { 1e-3 } else { 3e-3 };
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.env.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.grounding_fraction > 0.0 && self.grounding_fraction <= 1.0) {
            return bad(format!(
                "grounding_fraction must lie in (0, 1], got {}",
                self.grounding_fraction
            ));
        }
        if self.batch_steps == 0 || self.hidden == 0 || self.comm_dim == 0 {
            return bad("batch_steps, hidden and comm_dim must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        match self.variant {
            Variant::Ic3Net | Variant::NoComm if self.lambda != 0.0 => {
                bad(format!("variant {} requires lambda = 0", self.variant.name()))
            }
            Variant::Ic3Net | Variant::NoComm | Variant::AeComm if self.grounding.is_some() => {
                bad(format!("variant {} does not use a grounding dataset", self.variant.name()))
            }
            _ => Ok(()),
        }
    }

    pub fn to_toml(&self) -> Result<String, TrainError> {
        toml::to_string(self).map_err(|e| TrainError::Toml(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Toml(e.to_string()))
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape {
            obs_dim: self.env.obs_dim(),
            id_dim: if self.agent_id { self.env.n_agents() } else { 0 },
            n_actions: self.env.n_actions(),
            hidden: self.hidden,
            comm_dim: self.comm_dim,
            decoder: self.variant == Variant::AeComm,
        }
    }

    pub fn gate_mode(&self) -> GateMode {
        if self.variant == Variant::NoComm {
            GateMode::Closed
        } else if self.no_gating {
            GateMode::Open
        } else {
            GateMode::Learned
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            reward: self.reward,
            aux: match self.variant {
                Variant::LangGround => AuxLoss::Cosine,
                Variant::AeComm => AuxLoss::Reconstruction,
                Variant::Ic3Net | Variant::NoComm => AuxLoss::None,
            },
        }
    }

    /// Loads the grounding dataset and applies the held-out cells and fraction mask.
    pub fn load_grounding(&self) -> Result<Option<GroundingDataset>, TrainError> {
        match &self.grounding {
            None => Ok(None),
            Some(p) => self.prepare_grounding(&GroundingDataset::load(p)?).map(Some),
        }
    }

    /// Restricts a full dataset to what this run may see: no entries from
    /// held-out prey spawns, and only the configured fraction of states.
    pub fn prepare_grounding(&self, full: &GroundingDataset) -> Result<GroundingDataset, TrainError> {
        if full.dim() != self.comm_dim {
            return Err(TrainError::Config(format!(
                "grounding embeddings have dimension {}, comm_dim is {}",
                full.dim(),
                self.comm_dim
            )));
        }
        let held: &[_] = self.env.pp().map(|c| c.held_out_prey_spawns.as_slice()).unwrap_or(&[]);
        let ds = full.without_prey_cells(held)?;
        Ok(ds.mask(self.grounding_fraction, self.seed)?)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: u64,
    pub episodes: u64,
    pub mean_length: f64,
    pub mean_return: f64,
    pub success_rate: f64,
    pub rl_loss: f64,
    pub sup_loss: f64,
    pub mean_cosine: Option<f64>,
    pub gate_rate: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub const HEADER: &'static str =
        "epoch,steps,episodes,mean_length,mean_return,success_rate,rl_loss,sup_loss,mean_cosine,gate_rate,grad_norm";

    pub fn push(&mut self, row: EpochMetrics) {
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            let cos = r.mean_cosine.map(|c| c.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.steps,
                r.episodes,
                r.mean_length,
                r.mean_return,
                r.success_rate,
                r.rl_loss,
                r.sup_loss,
                cos,
                r.gate_rate,
                r.grad_norm
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> std::io::Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w)?;
        w.flush()
    }

    pub fn read_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err("unexpected metrics header".into());
        }
        let mut log = MetricsLog::default();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(format!("row {}: expected 11 fields", i + 1));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1));
            let int = |k: usize| f[k].parse::<u64>().map_err(|e| format!("row {}: {e}", i + 1));
            log.push(EpochMetrics {
                epoch: int(0)? as usize,
                steps: int(1)?,
                episodes: int(2)?,
                mean_length: num(3)?,
                mean_return: num(4)?,
                success_rate: num(5)?,
                rl_loss: num(6)?,
                sup_loss: num(7)?,
                mean_cosine: if f[8].is_empty() { None } else { Some(num(8)?) },
                gate_rate: num(9)?,
                grad_norm: num(10)?,
            });
        }
        Ok(log)
    }

    /// Least-squares slope of a column against epoch index.
    pub fn slope(&self, column: impl Fn(&EpochMetrics) -> f64) -> f64 {
        let n = self.rows.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let xs: Vec<f64> = (0..self.rows.len()).map(|i| i as f64).collect();
        let ys: Vec<f64> = self.rows.iter().map(column).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        sxy / sxx
    }
}

/// Owns the policy, optimizer and counters of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub env: Env,
    pub policy: AgentPolicy,
    pub optimizer: Optimizer,
    pub metrics: MetricsLog,
    grounding: Option<GroundingDataset>,
    streams: RngStreams,
    episodes: u64,
    steps: u64,
    epoch: usize,
}

const EPISODES_COUNTER: &str = "episodes";
const STEPS_COUNTER: &str = "steps";
const EPOCH_COUNTER: &str = "epoch";

impl Trainer {
    /// `grounding` is the already-prepared dataset (see [`TrainConfig::prepare_grounding`]).
    pub fn new(config: TrainConfig, grounding: Option<GroundingDataset>) -> Result<Self, TrainError> {
        config.validate()?;
        if config.variant == Variant::LangGround && config.lambda > 0.0 && grounding.is_none() {
            return Err(TrainError::Config("variant langground with lambda > 0 needs a grounding dataset".into()));
        }
        if let Some(ds) = &grounding {
            if ds.dim() != config.comm_dim {
                return Err(TrainError::Config(format!(
                    "grounding embeddings have dimension {}, comm_dim is {}",
                    ds.dim(),
                    config.comm_dim
                )));
            }
        }
        let env = Env::new(config.env.clone())?;
        let streams = RngStreams::new(config.seed);
        let policy = AgentPolicy::new(config.shape(), &mut streams.stream("init", 0, 0))?;
        let optimizer = Optimizer::new(config.optimizer, config.lr, &policy.params)?;
        Ok(Self {
            config,
            env,
            policy,
            optimizer,
            metrics: MetricsLog::default(),
            grounding,
            streams,
            episodes: 0,
            steps: 0,
            epoch: 0,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, grounding: Option<GroundingDataset>, metrics: MetricsLog) -> Result<Self, TrainError> {
        let config = TrainConfig::from_toml(&ckpt.config)?;
        let mut t = Trainer::new(config, grounding)?;
        t.policy = AgentPolicy::from_params(t.config.shape(), ckpt.params.clone())?;
        if let Some(opt) = &ckpt.optimizer {
            t.optimizer = opt.clone();
        }
        t.episodes = ckpt.counter(EPISODES_COUNTER).unwrap_or(0);
        t.steps = ckpt.counter(STEPS_COUNTER).unwrap_or(0);
        t.epoch = ckpt.counter(EPOCH_COUNTER).unwrap_or(0) as usize;
        t.metrics = metrics;
        Ok(t)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn grounding(&self) -> Option<&GroundingDataset> {
        self.grounding.as_ref()
    }

    pub fn rollout_spec(&self) -> RolloutSpec<'_> {
        RolloutSpec {
            gates: self.config.gate_mode(),
            mode: SampleMode::Sample,
            grounding: self.grounding.as_ref(),
            reference: self.config.reference,
        }
    }

    /// One collect → loss → update iteration.
    fn update(&mut self, acc: &mut EpochAccumulator) -> Result<(), TrainError> {
        let spec = RolloutSpec {
            gates: self.config.gate_mode(),
            mode: SampleMode::Sample,
            grounding: self.grounding.as_ref(),
            reference: self.config.reference,
        };
        let batch = collect(
            &self.env,
            &self.policy,
            &spec,
            self.config.batch_steps,
            &self.streams,
            self.episodes,
            self.config.workers,
        )?;
        self.episodes += batch.len() as u64;
        let view: Vec<(&EpisodeTrace, &[Vec<StepForward>])> =
            batch.iter().map(|(t, f)| (t, f.as_slice())).collect();
        self.policy.params.zero_grad();
        let rep = batch_loss(&mut self.policy, &view, &self.config.weights(), true);
        if !rep.total().is_finite() {
            return Err(TrainError::NonFinite {
                epoch: self.epoch,
                seed: self.config.seed,
            });
        }
        let gn = self.policy.params.clip_grad_norm(self.config.clip_norm);
        self.optimizer.step(&mut self.policy.params).map_err(|e| match e {
            KernelError::NonFinite { .. } => TrainError::NonFinite {
                epoch: self.epoch,
                seed: self.config.seed,
            },
            other => other.into(),
        })?;
        for (trace, _) in &batch {
            self.steps += trace.len() as u64;
            acc.episodes += 1;
            acc.length += trace.len() as f64;
            acc.ret += trace.team_return();
            acc.success += trace.success as u32 as f64;
            for r in trace.records() {
                acc.records += 1;
                acc.gates += r.gate as u32 as f64;
            }
        }
        acc.rl += rep.rl();
        acc.sup += rep.aux;
        acc.cos_sum += rep.cosine_sum;
        acc.grounded += rep.n_grounded;
        acc.grad_norm += gn;
        acc.updates += 1;
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<&EpochMetrics, TrainError> {
        let mut acc = EpochAccumulator::default();
        for _ in 0..self.config.updates_per_epoch.max(1) {
            self.update(&mut acc)?;
        }
        let u = acc.updates as f64;
        let e = acc.episodes.max(1) as f64;
        self.metrics.push(EpochMetrics {
            epoch: self.epoch,
            steps: self.steps,
            episodes: self.episodes,
            mean_length: acc.length / e,
            mean_return: acc.ret / e,
            success_rate: acc.success / e,
            rl_loss: acc.rl / u,
            sup_loss: acc.sup / u,
            mean_cosine: (acc.grounded > 0).then(|| acc.cos_sum / acc.grounded as f64),
            gate_rate: acc.gates / acc.records.max(1) as f64,
            grad_norm: acc.grad_norm / u,
        });
        self.epoch += 1;
        Ok(self.metrics.rows.last().expect("row just pushed"))
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run<F>(&mut self, mut on_epoch: F) -> Result<(), TrainError>
    where
        F: FnMut(&Trainer) -> Result<(), TrainError>,
    {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint, TrainError> {
        let mut ck = Checkpoint::new(self.config.to_toml()?, self.policy.params.clone(), Some(self.optimizer.clone()));
        ck.rng_counters = vec![
            (EPISODES_COUNTER.to_string(), self.episodes),
            (STEPS_COUNTER.to_string(), self.steps),
            (EPOCH_COUNTER.to_string(), self.epoch as u64),
        ];
        Ok(ck)
    }
}

#[derive(Default)]
struct EpochAccumulator {
    episodes: usize,
    length: f64,
    ret: f64,
    success: f64,
    records: usize,
    gates: f64,
    rl: f64,
    sup: f64,
    cos_sum: f64,
    grounded: usize,
    grad_norm: f64,
    updates: usize,
}

/// Runs a full training job. `grounding` is the unprepared dataset; the
/// held-out cells and fraction mask from `config` are applied here.
pub fn train(config: TrainConfig, grounding: Option<&GroundingDataset>) -> Result<(Trainer, Checkpoint), TrainError> {
    let ds = match grounding {
        Some(full) => Some(config.prepare_grounding(full)?),
        None => config.load_grounding()?,
    };
    let mut t = Trainer::new(config, ds)?;
    t.run(|_| Ok(()))?;
    let ck = t.checkpoint()?;
    Ok((t, ck))
}

/// Restores a policy and its config from a checkpoint.
pub fn load_policy(ckpt: &Checkpoint) -> Result<(TrainConfig, AgentPolicy), TrainError> {
    let config = TrainConfig::from_toml(&ckpt.config)?;
    let policy = AgentPolicy::from_params(config.shape(), ckpt.params.clone())?;
    Ok((config, policy))
}
