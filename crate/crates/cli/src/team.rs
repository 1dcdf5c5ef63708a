use std::path::Path;
use std::time::Duration;

use anyhow::Result;

use groundcomm::agent::AgentPolicy;
use groundcomm::env::Env;
use groundcomm::grounding::{Embedder, EmbeddingProvider, GroundingDataset};
use groundcomm::textgame::{Bridge, Seat, SeatSpec, ServeSetup};
use groundcomm::training::{load_policy, TrainConfig};

use crate::config::TeamConfig;
use crate::{load_checkpoint, UsageError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeatEntry {
    /// Index into [`Team::policies`].
    Policy(usize),
    Oracle,
    External,
}

/// Seats resolved from a [`TeamConfig`], with the policies and bridge they use.
pub struct Team {
    pub env: Env,
    pub entries: Vec<SeatEntry>,
    pub policies: Vec<(TrainConfig, AgentPolicy)>,
    pub grounding: Option<GroundingDataset>,
    pub embedder: Option<Box<dyn Embedder>>,
}

impl Team {
    /// Number of agents in the environment a checkpoint was trained on.
    pub fn checkpoint_agents(path: &Path) -> Result<usize> {
        let ck = load_checkpoint(path)?;
        Ok(TrainConfig::from_toml(&ck.config)?.env.n_agents())
    }

    pub fn load(cfg: &TeamConfig) -> Result<Team> {
        if cfg.team.is_empty() {
            return Err(UsageError("the team is empty".into()).into());
        }
        let mut paths: Vec<&str> = Vec::new();
        let mut policies = Vec::new();
        let mut entries = Vec::with_capacity(cfg.team.len());
        for seat in &cfg.team {
            let entry = match seat.trim() {
                "oracle" => SeatEntry::Oracle,
                "external" => SeatEntry::External,
                path => match paths.iter().position(|p| *p == path) {
                    Some(i) => SeatEntry::Policy(i),
                    None => {
                        let ck = load_checkpoint(Path::new(path))?;
                        policies.push(load_policy(&ck)?);
                        paths.push(path);
                        SeatEntry::Policy(paths.len() - 1)
                    }
                },
            };
            entries.push(entry);
        }

        let env_cfg = match (policies.first(), &cfg.env) {
            (Some((tc, _)), name) => {
                if let Some(name) = name {
                    if *name != tc.env.tag() {
                        return Err(UsageError(format!(
                            "--env {name} does not match the checkpoint environment {}",
                            tc.env.tag()
                        ))
                        .into());
                    }
                }
                tc.env.clone()
            }
            (None, Some(name)) => {
                groundcomm::env::EnvConfig::preset(name).map_err(|e| UsageError(e.to_string()))?
            }
            (None, None) => return Err(UsageError("a team without checkpoints needs --env".into()).into()),
        };
        if let Some((tc, _)) = policies.iter().find(|(tc, _)| tc.env.tag() != env_cfg.tag()) {
            return Err(UsageError(format!(
                "checkpoints disagree on the environment: {} vs {}",
                env_cfg.tag(),
                tc.env.tag()
            ))
            .into());
        }
        let env = Env::new(env_cfg)?;
        if entries.len() != env.n_agents() {
            return Err(UsageError(format!(
                "{} needs {} seats, the team has {}",
                env.tag(),
                env.n_agents(),
                entries.len()
            ))
            .into());
        }

        let grounding_path = cfg
            .grounding
            .clone()
            .or_else(|| policies.iter().find_map(|(tc, _)| tc.grounding.clone()));
        let grounding = grounding_path.as_deref().map(GroundingDataset::load).transpose()?;
        let mixed = !policies.is_empty() && entries.iter().any(|e| !matches!(e, SeatEntry::Policy(_)));
        let embedder = if mixed {
            let Some(ds) = &grounding else {
                return Err(UsageError("teams mixing checkpoints and text seats need --grounding".into()).into());
            };
            if let Some((tc, _)) = policies.iter().find(|(tc, _)| tc.comm_dim != ds.dim()) {
                return Err(UsageError(format!(
                    "grounding dimension {} does not match comm_dim {}",
                    ds.dim(),
                    tc.comm_dim
                ))
                .into());
            }
            let provider = cfg.embedder.clone().unwrap_or_else(|| EmbeddingProvider::local(ds.dim()));
            Some(provider.build()?)
        } else {
            None
        };
        Ok(Team {
            env,
            entries,
            policies,
            grounding,
            embedder,
        })
    }

    pub fn has_external(&self) -> bool {
        self.entries.contains(&SeatEntry::External)
    }

    pub fn policy_count(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e, SeatEntry::Policy(_))).count()
    }

    /// Seats for in-process evaluation. External entries are not representable
    /// here and must go through [`Team::serve_setup`].
    pub fn seats(&self) -> Vec<Seat<'_>> {
        self.entries
            .iter()
            .map(|e| match e {
                SeatEntry::Policy(i) => {
                    let (tc, p) = &self.policies[*i];
                    Seat::Policy {
                        policy: p,
                        gates: tc.gate_mode(),
                    }
                }
                SeatEntry::Oracle | SeatEntry::External => Seat::Oracle,
            })
            .collect()
    }

    pub fn bridge(&self) -> Bridge<'_> {
        Bridge {
            grounding: self.grounding.as_ref(),
            embedder: self.embedder.as_deref(),
        }
    }

    pub fn serve_setup(&self, timeout: Duration, seed: u64) -> ServeSetup<'_> {
        let seats = self
            .entries
            .iter()
            .map(|e| match e {
                SeatEntry::Policy(i) => {
                    let (tc, p) = &self.policies[*i];
                    SeatSpec::Policy {
                        policy: p,
                        gates: tc.gate_mode(),
                    }
                }
                SeatEntry::Oracle => SeatSpec::Oracle,
                SeatEntry::External => SeatSpec::External,
            })
            .collect();
        ServeSetup {
            env: &self.env,
            seats,
            bridge: self.bridge(),
            timeout,
            seed,
        }
    }

    /// Seat kinds joined with `+`, e.g. `langground+langground+oracle`.
    pub fn label(&self) -> String {
        self.entries
            .iter()
            .map(|e| match e {
                SeatEntry::Policy(i) => self.policies[*i].0.variant.name(),
                SeatEntry::Oracle => "oracle",
                SeatEntry::External => "external",
            })
            .collect::<Vec<_>>()
            .join("+")
    }
}
