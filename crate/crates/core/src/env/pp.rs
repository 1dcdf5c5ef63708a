//! Predator-Prey gridworld with a stationary prey.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Observation};

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const STAY: usize = 4;
pub const N_ACTIONS: usize = 5;

pub const ACTION_NAMES: [&str; N_ACTIONS] = ["up", "down", "left", "right", "stay"];

/// Per-step penalty for every predator that has not reached the prey.
pub const STEP_PENALTY: f64 = -0.05;
/// Reward on the step a predator lands on the prey.
pub const REACH_REWARD: f64 = 0.5;

pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredatorPreyConfig {
    pub grid: usize,
    pub n_predators: usize,
    pub n_prey: usize,
    pub vision: usize,
    pub max_steps: usize,
    /// Cells the prey never spawns in.
    pub held_out_prey_spawns: Vec<Cell>,
}

impl Default for PredatorPreyConfig {
    fn default() -> Self {
        Self {
            grid: 5,
            n_predators: 3,
            n_prey: 1,
            vision: 0,
            max_steps: 20,
            held_out_prey_spawns: Vec::new(),
        }
    }
}

impl PredatorPreyConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.grid < 2 {
            return bad("grid size must be at least 2");
        }
        if self.n_predators == 0 {
            return bad("at least one predator is required");
        }
        if self.n_prey != 1 {
            return bad("exactly one prey is supported");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if let Some(c) = self
            .held_out_prey_spawns
            .iter()
            .find(|(r, c)| *r >= self.grid || *c >= self.grid)
        {
            return Err(EnvError::Config(format!("held-out cell {c:?} is outside the grid")));
        }
        if self.spawn_cells().is_empty() {
            return bad("held-out prey spawns exclude every cell");
        }
        Ok(())
    }

    /// Cells the prey may spawn in, row-major.
    pub fn spawn_cells(&self) -> Vec<Cell> {
        (0..self.grid)
            .flat_map(|r| (0..self.grid).map(move |c| (r, c)))
            .filter(|cell| !self.held_out_prey_spawns.contains(cell))
            .collect()
    }

    pub fn patch_side(&self) -> usize {
        2 * self.vision + 1
    }

    pub fn obs_dim(&self) -> usize {
        self.patch_side() * self.patch_side() * 3 + 2 * self.grid
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpState {
    pub t: usize,
    pub predators: Vec<Cell>,
    pub prey: Cell,
    pub reached: Vec<bool>,
}

pub(crate) fn reset<R: Rng>(cfg: &PredatorPreyConfig, rng: &mut R) -> Result<PpState, EnvError> {
    cfg.validate()?;
    let spawns = cfg.spawn_cells();
    let prey = spawns[rng.random_range(0..spawns.len())];
    let n_cells = cfg.grid * cfg.grid;
    let predators = (0..cfg.n_predators)
        .map(|_| {
            // uniform over every cell except the prey's
            let mut k = rng.random_range(0..n_cells - 1);
            if k >= prey.0 * cfg.grid + prey.1 {
                k += 1;
            }
            (k / cfg.grid, k % cfg.grid)
        })
        .collect();
    Ok(PpState {
        t: 0,
        predators,
        prey,
        reached: vec![false; cfg.n_predators],
    })
}

pub fn apply_move(cfg: &PredatorPreyConfig, (r, c): Cell, action: usize) -> Cell {
    match action {
        UP => (r.saturating_sub(1), c),
        DOWN => ((r + 1).min(cfg.grid - 1), c),
        LEFT => (r, c.saturating_sub(1)),
        RIGHT => (r, (c + 1).min(cfg.grid - 1)),
        _ => (r, c),
    }
}

pub(crate) fn step(cfg: &PredatorPreyConfig, s: &PpState, actions: &[usize]) -> (PpState, Vec<f64>, bool) {
    let mut next = s.clone();
    let mut rewards = vec![0.0; cfg.n_predators];
    for (i, &a) in actions.iter().enumerate() {
        if next.reached[i] {
            continue;
        }
        let pos = apply_move(cfg, next.predators[i], a);
        next.predators[i] = pos;
        if pos == next.prey {
            next.reached[i] = true;
            rewards[i] = REACH_REWARD;
        } else {
            rewards[i] = STEP_PENALTY;
        }
    }
    next.t += 1;
    let done = next.reached.iter().all(|r| *r) || next.t >= cfg.max_steps;
    (next, rewards, done)
}

/// Patch channels: prey, other predator, out of bounds; then one-hot row and column.
pub(crate) fn observe(cfg: &PredatorPreyConfig, s: &PpState, agent: usize) -> Observation {
    let side = cfg.patch_side();
    let v = cfg.vision as isize;
    let mut x = vec![0.0; cfg.obs_dim()];
    let (r, c) = s.predators[agent];
    for dr in -v..=v {
        for dc in -v..=v {
            let base = (((dr + v) as usize) * side + (dc + v) as usize) * 3;
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr < 0 || cc < 0 || rr >= cfg.grid as isize || cc >= cfg.grid as isize {
                x[base + 2] = 1.0;
                continue;
            }
            let cell = (rr as usize, cc as usize);
            if s.prey == cell {
                x[base] = 1.0;
            }
            if s
                .predators
                .iter()
                .enumerate()
                .any(|(j, p)| j != agent && *p == cell)
            {
                x[base + 1] = 1.0;
            }
        }
    }
    let off = side * side * 3;
    x[off + r] = 1.0;
    x[off + cfg.grid + c] = 1.0;
    Observation::new(x)
}

/// Structured reading of a predator observation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PpView {
    pub position: Cell,
    /// Absolute cells where the prey is visible.
    pub prey: Option<Cell>,
    pub predators: Vec<Cell>,
}

pub fn decode(cfg: &PredatorPreyConfig, obs: &Observation) -> PpView {
    let side = cfg.patch_side();
    let x = obs.values();
    let off = side * side * 3;
    let row = (0..cfg.grid).find(|k| x[off + k] > 0.5).unwrap_or(0);
    let col = (0..cfg.grid).find(|k| x[off + cfg.grid + k] > 0.5).unwrap_or(0);
    let v = cfg.vision as isize;
    let mut prey = None;
    let mut predators = Vec::new();
    for pr in 0..side {
        for pc in 0..side {
            let base = (pr * side + pc) * 3;
            let rr = row as isize + pr as isize - v;
            let cc = col as isize + pc as isize - v;
            if rr < 0 || cc < 0 {
                continue;
            }
            let cell = (rr as usize, cc as usize);
            if x[base] > 0.5 {
                prey = Some(cell);
            }
            if x[base + 1] > 0.5 {
                predators.push(cell);
            }
        }
    }
    PpView {
        position: (row, col),
        prey,
        predators,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(cfg: &PredatorPreyConfig, predators: Vec<Cell>, prey: Cell) -> PpState {
        assert_eq!(predators.len(), cfg.n_predators);
        PpState {
            t: 0,
            reached: vec![false; predators.len()],
            predators,
            prey,
        }
    }

    #[test]
    fn forced_spawn_when_one_cell_left() {
        let mut cfg = PredatorPreyConfig::default();
        cfg.held_out_prey_spawns = cfg.spawn_cells().into_iter().filter(|c| *c != (2, 2)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let s = reset(&cfg, &mut rng).unwrap();
            assert_eq!(s.prey, (2, 2));
            assert!(s.predators.iter().all(|p| *p != (2, 2)));
        }
    }

    #[test]
    fn all_cells_held_out_is_config_error() {
        let mut cfg = PredatorPreyConfig::default();
        cfg.held_out_prey_spawns = cfg.spawn_cells();
        assert!(matches!(cfg.validate(), Err(EnvError::Config(_))));
    }

    #[test]
    fn up_moves_one_row_and_walls_clip() {
        let cfg = PredatorPreyConfig::default();
        assert_eq!(apply_move(&cfg, (2, 2), UP), (1, 2));
        assert_eq!(apply_move(&cfg, (0, 2), UP), (0, 2));
        assert_eq!(apply_move(&cfg, (4, 4), RIGHT), (4, 4));
    }

    #[test]
    fn rewards_and_freezing() {
        let cfg = PredatorPreyConfig::default();
        let s = state(&cfg, vec![(1, 2), (4, 4), (0, 0)], (2, 2));
        let (s1, r, done) = step(&cfg, &s, &[DOWN, STAY, STAY]);
        assert_eq!(r, vec![REACH_REWARD, STEP_PENALTY, STEP_PENALTY]);
        assert!(s1.reached[0] && !done);
        let (s2, r, _) = step(&cfg, &s1, &[UP, STAY, STAY]);
        assert_eq!(s2.predators[0], (2, 2));
        assert_eq!(r[0], 0.0);
    }

    #[test]
    fn v0_sees_only_own_cell() {
        let cfg = PredatorPreyConfig::default();
        let s = state(&cfg, vec![(1, 1), (1, 2), (3, 3)], (1, 2));
        let o = observe(&cfg, &s, 0);
        assert_eq!(o.len(), 13);
        assert_eq!(&o.values()[..3], &[0.0, 0.0, 0.0]);
        let o = observe(&cfg, &s, 1);
        assert_eq!(o.values()[0], 1.0);
    }

    #[test]
    fn v1_prey_left_sets_patch_1_0() {
        let cfg = PredatorPreyConfig {
            vision: 1,
            ..Default::default()
        };
        let s = state(&cfg, vec![(2, 2), (0, 0), (4, 4)], (2, 1));
        let o = observe(&cfg, &s, 0);
        let idx = (3 + 0) * 3;
        assert_eq!(o.values()[idx], 1.0);
        assert_eq!(o.values().iter().take(27).step_by(3).sum::<f64>(), 1.0);
        let view = decode(&cfg, &o);
        assert_eq!(view.position, (2, 2));
        assert_eq!(view.prey, Some((2, 1)));
    }

    #[test]
    fn corner_patch_marks_out_of_bounds() {
        let cfg = PredatorPreyConfig {
            vision: 1,
            ..Default::default()
        };
        let s = state(&cfg, vec![(0, 0), (4, 4), (4, 3)], (2, 2));
        let o = observe(&cfg, &s, 0);
        let oob: f64 = (0..9).map(|k| o.values()[k * 3 + 2]).sum();
        assert_eq!(oob, 5.0);
    }
}
