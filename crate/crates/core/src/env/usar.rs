//! Urban Search & Rescue: agents explore a room graph and defuse
//! color-sequenced bombs with the wire cutters they carry.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{EnvError, Observation};

pub const N_COLORS: usize = 3;
pub const MAX_PHASES: usize = 3;
/// Points per defused phase.
pub const PHASE_POINTS: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; N_COLORS] = [Color::Red, Color::Green, Color::Blue];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Color> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn parse(s: &str) -> Option<Color> {
        Self::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BombSpec {
    pub id: u32,
    pub room: u32,
    pub sequence: Vec<Color>,
}

/// When defusal points are paid out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardTiming {
    /// `10·x` when an x-phase bomb is fully defused.
    #[default]
    OnCompletion,
    /// 10 points for every correct tool application.
    PerPhase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UsarConfig {
    /// Room ids; action `k < rooms.len()` moves to `rooms[k]`.
    pub rooms: Vec<u32>,
    pub edges: Vec<(u32, u32)>,
    pub agent_names: Vec<String>,
    pub tools: Vec<Vec<Color>>,
    pub start_rooms: Vec<u32>,
    pub bombs: Vec<BombSpec>,
    pub max_steps: usize,
    pub reward_timing: RewardTiming,
}

impl Default for UsarConfig {
    fn default() -> Self {
        use Color::*;
        Self {
            rooms: vec![0, 3, 5, 6, 8],
            edges: vec![(0, 3), (0, 5), (0, 6), (0, 8), (5, 6), (3, 8), (8, 6)],
            agent_names: vec!["Alpha".into(), "Bravo".into(), "Charlie".into()],
            tools: vec![vec![Red, Green], vec![Green, Blue], vec![Blue, Red]],
            start_rooms: vec![0, 0, 0],
            bombs: vec![
                BombSpec { id: 1, room: 0, sequence: vec![Red, Green] },
                BombSpec { id: 2, room: 6, sequence: vec![Blue] },
                BombSpec { id: 3, room: 5, sequence: vec![Green, Blue, Red] },
                BombSpec { id: 4, room: 8, sequence: vec![Red] },
                BombSpec { id: 5, room: 3, sequence: vec![Blue, Green] },
            ],
            max_steps: 100,
            reward_timing: RewardTiming::OnCompletion,
        }
    }
}

impl UsarConfig {
    pub fn n_agents(&self) -> usize {
        self.agent_names.len()
    }

    pub fn n_rooms(&self) -> usize {
        self.rooms.len()
    }

    /// Move-to-room ×n, inspect, apply tool ×3.
    pub fn n_actions(&self) -> usize {
        self.n_rooms() + 1 + N_COLORS
    }

    pub fn inspect_action(&self) -> usize {
        self.n_rooms()
    }

    pub fn tool_action(&self, color: Color) -> usize {
        self.n_rooms() + 1 + color.index()
    }

    pub fn room_index(&self, id: u32) -> Option<usize> {
        self.rooms.iter().position(|r| *r == id)
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.rooms[a], self.rooms[b]);
        self.edges
            .iter()
            .any(|&(x, y)| (x == ra && y == rb) || (x == rb && y == ra))
    }

    pub fn neighbors(&self, a: usize) -> Vec<usize> {
        (0..self.n_rooms()).filter(|&b| b != a && self.adjacent(a, b)).collect()
    }

    pub fn max_score(&self) -> u32 {
        PHASE_POINTS * self.bombs.iter().map(|b| b.sequence.len() as u32).sum::<u32>()
    }

    /// Hop distances between room indices (breadth-first search).
    pub fn hop_distances(&self) -> Vec<Vec<usize>> {
        let n = self.n_rooms();
        (0..n)
            .map(|src| {
                let mut dist = vec![usize::MAX; n];
                dist[src] = 0;
                let mut q = VecDeque::from([src]);
                while let Some(a) = q.pop_front() {
                    for b in self.neighbors(a) {
                        if dist[b] == usize::MAX {
                            dist[b] = dist[a] + 1;
                            q.push_back(b);
                        }
                    }
                }
                dist
            })
            .collect()
    }

    /// Per-room-index feature width of one bomb slot in the observation.
    pub const BOMB_SLOT: usize = 2 + MAX_PHASES * N_COLORS + MAX_PHASES;

    pub fn obs_dim(&self) -> usize {
        let n = self.n_rooms();
        n + self.bombs.len() * Self::BOMB_SLOT + N_COLORS + (self.n_agents() - 1) * n + 2
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        let n = self.n_rooms();
        if n == 0 {
            return bad("no rooms".into());
        }
        let mut sorted = self.rooms.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != n {
            return bad("room ids must be unique".into());
        }
        for &(a, b) in &self.edges {
            if self.room_index(a).is_none() || self.room_index(b).is_none() {
                return bad(format!("edge ({a}, {b}) names an unknown room"));
            }
        }
        if self.hop_distances()[0].contains(&usize::MAX) {
            return bad("room graph is not connected".into());
        }
        let k = self.n_agents();
        if k == 0 {
            return bad("at least one agent is required".into());
        }
        if self.tools.len() != k || self.start_rooms.len() != k {
            return bad("tools and start_rooms need one entry per agent".into());
        }
        if let Some(r) = self.start_rooms.iter().find(|r| self.room_index(**r).is_none()) {
            return bad(format!("start room {r} does not exist"));
        }
        for c in Color::ALL {
            if !self.tools.iter().any(|t| t.contains(&c)) {
                return bad(format!("no agent carries the {c} tool"));
            }
        }
        let mut ids: Vec<u32> = self.bombs.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.bombs.len() {
            return bad("bomb ids must be unique".into());
        }
        for b in &self.bombs {
            if self.room_index(b.room).is_none() {
                return bad(format!("bomb {} is in unknown room {}", b.id, b.room));
            }
            if b.sequence.is_empty() || b.sequence.len() > MAX_PHASES {
                return bad(format!("bomb {} needs 1..={MAX_PHASES} phases", b.id));
            }
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Outcome of an agent's last action, surfaced to the text interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Feedback {
    None,
    Moved,
    Stayed,
    NonAdjacent,
    Inspected,
    NoBomb,
    PhaseCleared,
    Defused,
    WrongColor,
    MissingTool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BombState {
    pub remaining: Vec<Color>,
    pub inspected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsarState {
    pub t: usize,
    /// Room index per agent.
    pub agent_rooms: Vec<usize>,
    pub bombs: Vec<BombState>,
    pub score: u32,
    pub feedback: Vec<Feedback>,
}

pub(crate) fn reset(cfg: &UsarConfig) -> Result<UsarState, EnvError> {
    cfg.validate()?;
    Ok(UsarState {
        t: 0,
        agent_rooms: cfg
            .start_rooms
            .iter()
            .map(|r| cfg.room_index(*r).expect("validated"))
            .collect(),
        bombs: cfg
            .bombs
            .iter()
            .map(|b| BombState {
                remaining: b.sequence.clone(),
                inspected: false,
            })
            .collect(),
        score: 0,
        feedback: vec![Feedback::None; cfg.n_agents()],
    })
}

/// Lowest-id bomb in `room` that still has phases left.
pub fn active_bomb(cfg: &UsarConfig, s: &UsarState, room: usize) -> Option<usize> {
    (0..cfg.bombs.len())
        .filter(|&b| cfg.room_index(cfg.bombs[b].room) == Some(room) && !s.bombs[b].remaining.is_empty())
        .min_by_key(|&b| cfg.bombs[b].id)
}

/// Agents act in id order; each sees the effects of lower ids in the same step.
pub(crate) fn step(cfg: &UsarConfig, s: &UsarState, actions: &[usize]) -> (UsarState, Vec<f64>, bool) {
    let n = cfg.n_agents();
    let rooms = cfg.n_rooms();
    let mut next = s.clone();
    let mut team_points = 0u32;
    for (i, &a) in actions.iter().enumerate() {
        let here = next.agent_rooms[i];
        next.feedback[i] = if a < rooms {
            if a == here {
                Feedback::Stayed
            } else if cfg.adjacent(here, a) {
                next.agent_rooms[i] = a;
                Feedback::Moved
            } else {
                Feedback::NonAdjacent
            }
        } else if a == rooms {
            match active_bomb(cfg, &next, here) {
                Some(b) => {
                    next.bombs[b].inspected = true;
                    Feedback::Inspected
                }
                None => Feedback::NoBomb,
            }
        } else {
            let color = Color::from_index(a - rooms - 1).expect("validated action");
            if !cfg.tools[i].contains(&color) {
                Feedback::MissingTool
            } else {
                match active_bomb(cfg, &next, here) {
                    None => Feedback::NoBomb,
                    Some(b) if next.bombs[b].remaining[0] != color => Feedback::WrongColor,
                    Some(b) => {
                        next.bombs[b].remaining.remove(0);
                        if cfg.reward_timing == RewardTiming::PerPhase {
                            team_points += PHASE_POINTS;
                        }
                        if next.bombs[b].remaining.is_empty() {
                            if cfg.reward_timing == RewardTiming::OnCompletion {
                                team_points += PHASE_POINTS * cfg.bombs[b].sequence.len() as u32;
                            }
                            Feedback::Defused
                        } else {
                            Feedback::PhaseCleared
                        }
                    }
                }
            }
        };
    }
    next.score += team_points;
    next.t += 1;
    let share = team_points as f64 / n as f64;
    let all_defused = next.bombs.iter().all(|b| b.remaining.is_empty());
    let done = all_defused || next.t >= cfg.max_steps;
    (next, vec![share; n], done)
}

pub(crate) fn observe(cfg: &UsarConfig, s: &UsarState, agent: usize) -> Observation {
    let n = cfg.n_rooms();
    let mut x = vec![0.0; cfg.obs_dim()];
    let here = s.agent_rooms[agent];
    x[here] = 1.0;
    let mut off = n;
    for (b, spec) in cfg.bombs.iter().enumerate() {
        let st = &s.bombs[b];
        let present = cfg.room_index(spec.room) == Some(here) && !st.remaining.is_empty();
        if present {
            x[off] = 1.0;
            if st.inspected {
                x[off + 1] = 1.0;
                for (j, c) in st.remaining.iter().enumerate() {
                    x[off + 2 + j * N_COLORS + c.index()] = 1.0;
                }
                x[off + 2 + MAX_PHASES * N_COLORS + st.remaining.len() - 1] = 1.0;
            }
        }
        off += UsarConfig::BOMB_SLOT;
    }
    for c in &cfg.tools[agent] {
        x[off + c.index()] = 1.0;
    }
    off += N_COLORS;
    for j in (0..cfg.n_agents()).filter(|j| *j != agent) {
        x[off + s.agent_rooms[j]] = 1.0;
        off += n;
    }
    x[off] = s.t as f64 / cfg.max_steps as f64;
    x[off + 1] = s.score as f64 / cfg.max_score().max(1) as f64;
    Observation::new(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisibleBomb {
    /// Index into `config.bombs`.
    pub slot: usize,
    pub id: u32,
    /// Remaining sequence, known only once inspected.
    pub sequence: Option<Vec<Color>>,
}

/// Structured reading of a USAR observation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct UsarView {
    pub agent: usize,
    pub room: usize,
    pub bombs: Vec<VisibleBomb>,
    pub tools: Vec<Color>,
    /// `(agent index, room index)` for every teammate.
    pub teammates: Vec<(usize, usize)>,
    pub round: usize,
    pub score: u32,
}

pub fn decode(cfg: &UsarConfig, obs: &Observation, agent: usize) -> UsarView {
    let n = cfg.n_rooms();
    let x = obs.values();
    let room = (0..n).find(|k| x[*k] > 0.5).unwrap_or(0);
    let mut off = n;
    let mut bombs = Vec::new();
    for (slot, spec) in cfg.bombs.iter().enumerate() {
        if x[off] > 0.5 {
            let sequence = (x[off + 1] > 0.5).then(|| {
                (0..MAX_PHASES)
                    .filter_map(|j| {
                        (0..N_COLORS)
                            .find(|c| x[off + 2 + j * N_COLORS + c] > 0.5)
                            .and_then(Color::from_index)
                    })
                    .collect()
            });
            bombs.push(VisibleBomb {
                slot,
                id: spec.id,
                sequence,
            });
        }
        off += UsarConfig::BOMB_SLOT;
    }
    let tools = Color::ALL.into_iter().filter(|c| x[off + c.index()] > 0.5).collect();
    off += N_COLORS;
    let mut teammates = Vec::new();
    for j in (0..cfg.n_agents()).filter(|j| *j != agent) {
        let r = (0..n).find(|k| x[off + k] > 0.5).unwrap_or(0);
        teammates.push((j, r));
        off += n;
    }
    UsarView {
        agent,
        room,
        bombs,
        tools,
        teammates,
        round: (x[off] * cfg.max_steps as f64).round() as usize,
        score: (x[off + 1] * cfg.max_score() as f64).round() as u32,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room(cfg: &UsarConfig, id: u32) -> usize {
        cfg.room_index(id).unwrap()
    }

    #[test]
    fn default_layout() {
        let cfg = UsarConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.max_score(), 90);
        assert_eq!(cfg.n_actions(), 9);
        let s = reset(&cfg).unwrap();
        assert_eq!(s.score, 0);
        assert!(s.bombs.iter().all(|b| !b.remaining.is_empty() && !b.inspected));
        let mut phases: Vec<usize> = cfg.bombs.iter().map(|b| b.sequence.len()).collect();
        phases.sort();
        assert_eq!(phases, vec![1, 1, 2, 2, 3]);
    }

    #[test]
    fn non_adjacent_move_is_noop() {
        let cfg = UsarConfig::default();
        let mut s = reset(&cfg).unwrap();
        s.agent_rooms[0] = room(&cfg, 3);
        let stay = |i: usize, st: &UsarState| st.agent_rooms[i];
        let (n, r, _) = step(&cfg, &s, &[room(&cfg, 5), stay(1, &s), stay(2, &s)]);
        assert_eq!(n.agent_rooms[0], room(&cfg, 3));
        assert_eq!(n.feedback[0], Feedback::NonAdjacent);
        assert_eq!(r, vec![0.0; 3]);
    }

    #[test]
    fn red_then_green_defuses_for_twenty() {
        let cfg = UsarConfig::default();
        let s = reset(&cfg).unwrap();
        let r0 = room(&cfg, 0);
        let (s1, r, _) = step(&cfg, &s, &[cfg.tool_action(Color::Red), r0, r0]);
        assert_eq!(s1.score, 0);
        assert_eq!(r, vec![0.0; 3]);
        assert_eq!(s1.feedback[0], Feedback::PhaseCleared);
        let (s2, r, _) = step(&cfg, &s1, &[cfg.tool_action(Color::Green), r0, r0]);
        assert_eq!(s2.score, 20);
        assert!(r.iter().all(|v| (v - 20.0 / 3.0).abs() < 1e-12));
        assert_eq!(s2.feedback[0], Feedback::Defused);
    }

    #[test]
    fn per_phase_timing_pays_each_cut() {
        let cfg = UsarConfig {
            reward_timing: RewardTiming::PerPhase,
            ..Default::default()
        };
        let s = reset(&cfg).unwrap();
        let r0 = room(&cfg, 0);
        let (s1, _, _) = step(&cfg, &s, &[cfg.tool_action(Color::Red), r0, r0]);
        assert_eq!(s1.score, 10);
    }

    #[test]
    fn wrong_color_and_missing_tool() {
        let cfg = UsarConfig::default();
        let s = reset(&cfg).unwrap();
        let r0 = room(&cfg, 0);
        // Alpha holds green but bomb 1 needs red first.
        let (s1, _, _) = step(&cfg, &s, &[cfg.tool_action(Color::Green), cfg.tool_action(Color::Red), r0]);
        assert_eq!(s1.feedback[0], Feedback::WrongColor);
        assert_eq!(s1.feedback[1], Feedback::MissingTool);
        assert_eq!(s1.bombs[0].remaining.len(), 2);
    }

    #[test]
    fn uninspected_bomb_shows_presence_only() {
        let cfg = UsarConfig::default();
        let s = reset(&cfg).unwrap();
        let o = observe(&cfg, &s, 0);
        assert_eq!(o.len(), cfg.obs_dim());
        let base = cfg.n_rooms();
        assert_eq!(o.values()[base], 1.0);
        assert!(o.values()[base + 1..base + UsarConfig::BOMB_SLOT].iter().all(|v| *v == 0.0));
        let (s1, _, _) = step(&cfg, &s, &[cfg.inspect_action(), 0, 0]);
        let v = decode(&cfg, &observe(&cfg, &s1, 1), 1);
        assert_eq!(v.bombs[0].sequence, Some(vec![Color::Red, Color::Green]));
        assert_eq!(v.round, 1);
    }
}
