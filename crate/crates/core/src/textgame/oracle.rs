//! Scripted expert teammates.
//!
//! Each oracle acts from its own observation plus the text its teammates
//! broadcast, so it can sit in a team with text-speaking or policy seats.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;

use crate::env::pp::{self, apply_move, Cell, PredatorPreyConfig, ACTION_NAMES, DOWN, LEFT, RIGHT, STAY, UP};
use crate::env::usar::{self, Color, UsarConfig};
use crate::env::{Env, EnvConfig, Observation};

use super::{fill, lookup, sequence_text, templates, InboxMessage};

/// An oracle for one seat.
#[derive(Clone, Debug)]
pub enum Oracle {
    Pp(PpOracle),
    Usar(UsarOracle),
}

impl Oracle {
    pub fn new(env: &Env, agent: usize) -> Self {
        match env.config() {
            EnvConfig::PredatorPrey(c) => Oracle::Pp(PpOracle::new(c.clone())),
            EnvConfig::Usar(c) => Oracle::Usar(UsarOracle::new(c.clone(), agent)),
        }
    }

    /// Picks a legal action and the message to broadcast this round.
    pub fn act(&mut self, obs: &Observation, inbox: &[InboxMessage]) -> (usize, String) {
        match self {
            Oracle::Pp(o) => o.act(obs, inbox),
            Oracle::Usar(o) => o.act(obs, inbox),
        }
    }
}

fn cell_re() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| Regex::new(r"(?i)prey location at \((\d+),\s*(\d+)\)").unwrap())
}

fn search_re() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| Regex::new(r"(?i)moving (up|down|left|right|stay) from \((\d+),\s*(\d+)\)").unwrap())
}

/// Predator-prey expert: chase a known prey greedily, otherwise sweep.
#[derive(Clone, Debug)]
pub struct PpOracle {
    cfg: PredatorPreyConfig,
    prey: Option<Cell>,
    /// Cells known to be empty of prey.
    cleared: BTreeSet<Cell>,
    /// Teammates' expected positions this round, keyed by sender name.
    mates: BTreeMap<String, Cell>,
}

impl PpOracle {
    pub fn new(cfg: PredatorPreyConfig) -> Self {
        Self {
            cfg,
            prey: None,
            cleared: BTreeSet::new(),
            mates: BTreeMap::new(),
        }
    }

    fn clear_patch(&mut self, (r, c): Cell) {
        let v = self.cfg.vision;
        for rr in r.saturating_sub(v)..=(r + v).min(self.cfg.grid - 1) {
            for cc in c.saturating_sub(v)..=(c + v).min(self.cfg.grid - 1) {
                self.cleared.insert((rr, cc));
            }
        }
    }

    fn listen(&mut self, inbox: &[InboxMessage]) {
        self.mates.clear();
        for m in inbox {
            if let Some(c) = cell_re().captures(&m.text) {
                if let (Ok(r), Ok(col)) = (c[1].parse(), c[2].parse()) {
                    if r < self.cfg.grid && col < self.cfg.grid {
                        self.prey = Some((r, col));
                    }
                }
            } else if let Some(c) = search_re().captures(&m.text) {
                let (Ok(r), Ok(col)) = (c[2].parse::<usize>(), c[3].parse::<usize>()) else {
                    continue;
                };
                if r >= self.cfg.grid || col >= self.cfg.grid {
                    continue;
                }
                self.clear_patch((r, col));
                let dir = ACTION_NAMES
                    .iter()
                    .position(|n| n.eq_ignore_ascii_case(&c[1]))
                    .unwrap_or(STAY);
                self.mates.insert(m.from.clone(), apply_move(&self.cfg, (r, col), dir));
            }
        }
    }

    /// Greedy step: close the larger gap first, vertical on ties.
    pub fn greedy(from: Cell, to: Cell) -> usize {
        let dr = to.0 as isize - from.0 as isize;
        let dc = to.1 as isize - from.1 as isize;
        if dr == 0 && dc == 0 {
            STAY
        } else if dr.abs() >= dc.abs() {
            if dr > 0 {
                DOWN
            } else {
                UP
            }
        } else if dc > 0 {
            RIGHT
        } else {
            LEFT
        }
    }

    fn sweep_target(&self, me: Cell) -> Option<Cell> {
        let dist = |a: Cell, b: Cell| a.0.abs_diff(b.0) + a.1.abs_diff(b.1);
        let open: Vec<Cell> = (0..self.cfg.grid)
            .flat_map(|r| (0..self.cfg.grid).map(move |c| (r, c)))
            .filter(|c| !self.cleared.contains(c))
            .collect();
        let mine = open
            .iter()
            .filter(|&&c| self.mates.values().all(|&m| dist(me, c) <= dist(m, c)))
            .min_by_key(|&&c| (dist(me, c), c));
        mine.or_else(|| open.iter().min_by_key(|&&c| (dist(me, c), c))).copied()
    }

    pub fn act(&mut self, obs: &Observation, inbox: &[InboxMessage]) -> (usize, String) {
        let t = &templates().pp.messages;
        let view = pp::decode(&self.cfg, obs);
        let me = view.position;
        self.listen(inbox);
        match view.prey {
            Some(p) => self.prey = Some(p),
            None => self.clear_patch(me),
        }
        if self.prey.is_some_and(|p| self.cleared.contains(&p)) {
            self.prey = None;
        }
        let cell = |(r, c): Cell| [("r", r.to_string()), ("c", c.to_string())];
        if let Some(p) = self.prey {
            let action = Self::greedy(me, p);
            let [r, c] = cell(p);
            let msg = if apply_move(&self.cfg, me, action) == p {
                fill(lookup(t, "converge"), &[r, c])
            } else {
                fill(lookup(t, "toward"), &[("dir", ACTION_NAMES[action].to_string()), r, c])
            };
            return (action, msg);
        }
        let action = match self.sweep_target(me) {
            Some(target) => Self::greedy(me, target),
            None => STAY,
        };
        let [r, c] = cell(me);
        let msg = fill(lookup(t, "search"), &[("dir", ACTION_NAMES[action].to_string()), r, c]);
        (action, msg)
    }
}

fn usar_re(kind: &str) -> &'static Regex {
    static INSPECT: OnceLock<Regex> = OnceLock::new();
    static APPLY: OnceLock<Regex> = OnceLock::new();
    static REQUEST: OnceLock<Regex> = OnceLock::new();
    static EXPLORE: OnceLock<Regex> = OnceLock::new();
    let (cell, pattern) = match kind {
        "inspect" => (&INSPECT, r"(?i)inspecting bomb (\d+) in room (\d+)"),
        "apply" => (&APPLY, r"(?i)applying the (red|green|blue) tool to bomb (\d+) in room (\d+)"),
        "request" => (
            &REQUEST,
            r"(?i)bomb (\d+) in room (\d+) needs ([a-z ]+?); (\w+), please come to room \d+ with the (red|green|blue) tool",
        ),
        _ => (&EXPLORE, r"(?i)moving to room (\d+) to search"),
    };
    cell.get_or_init(|| Regex::new(pattern).unwrap())
}

#[derive(Clone, Debug, Default)]
struct BombBelief {
    room: usize,
    /// Remaining phases, once someone has inspected it.
    remaining: Option<Vec<Color>>,
}

/// USAR expert: explore, inspect, defuse with own cutters, ask for the rest.
#[derive(Clone, Debug)]
pub struct UsarOracle {
    cfg: UsarConfig,
    agent: usize,
    hops: Vec<Vec<usize>>,
    bombs: BTreeMap<u32, BombBelief>,
    defused: BTreeSet<u32>,
    visited: BTreeSet<usize>,
    /// Rooms a teammate announced it is heading to.
    claimed: BTreeSet<usize>,
    /// Bomb ids someone asked this seat to help with.
    requested: BTreeSet<u32>,
}

impl UsarOracle {
    pub fn new(cfg: UsarConfig, agent: usize) -> Self {
        Self {
            hops: cfg.hop_distances(),
            cfg,
            agent,
            bombs: BTreeMap::new(),
            defused: BTreeSet::new(),
            visited: BTreeSet::new(),
            claimed: BTreeSet::new(),
            requested: BTreeSet::new(),
        }
    }

    fn listen(&mut self, inbox: &[InboxMessage]) {
        let me = &self.cfg.agent_names[self.agent];
        for m in inbox {
            let text = &m.text;
            let room_of = |id: &str| id.parse().ok().and_then(|r| self.cfg.room_index(r));
            if let Some(c) = usar_re("request").captures(text) {
                let (Ok(bomb), Some(room)) = (c[1].parse::<u32>(), room_of(&c[2])) else {
                    continue;
                };
                let seq: Vec<Color> = c[3].split(" then ").filter_map(|s| Color::parse(s.trim())).collect();
                self.bombs.insert(
                    bomb,
                    BombBelief {
                        room,
                        remaining: Some(seq),
                    },
                );
                if c[4].eq_ignore_ascii_case(me) {
                    self.requested.insert(bomb);
                }
            } else if let Some(c) = usar_re("apply").captures(text) {
                let (Some(color), Ok(bomb)) = (Color::parse(&c[1]), c[2].parse::<u32>()) else {
                    continue;
                };
                if let Some(b) = self.bombs.get_mut(&bomb) {
                    if let Some(seq) = &mut b.remaining {
                        if seq.first() == Some(&color) {
                            seq.remove(0);
                        }
                        if seq.is_empty() {
                            self.defused.insert(bomb);
                        }
                    }
                }
            } else if let Some(c) = usar_re("inspect").captures(text) {
                let (Ok(bomb), Some(room)) = (c[1].parse::<u32>(), room_of(&c[2])) else {
                    continue;
                };
                self.bombs.entry(bomb).or_insert(BombBelief { room, remaining: None });
            } else if let Some(c) = usar_re("explore").captures(text) {
                if let Some(room) = room_of(&c[1]) {
                    self.claimed.insert(room);
                }
            }
        }
    }

    /// First hop on a shortest path from `from` to `to`.
    fn next_hop(&self, from: usize, to: usize) -> usize {
        if from == to {
            return from;
        }
        self.cfg
            .neighbors(from)
            .into_iter()
            .filter(|&n| self.hops[n][to] + 1 == self.hops[from][to])
            .min()
            .unwrap_or(from)
    }

    pub fn act(&mut self, obs: &Observation, inbox: &[InboxMessage]) -> (usize, String) {
        let t = &templates().usar.messages;
        self.listen(inbox);
        let view = usar::decode(&self.cfg, obs, self.agent);
        let here = view.room;
        self.visited.insert(here);
        for (_, r) in &view.teammates {
            self.visited.insert(*r);
        }
        // What is in this room is authoritative; bombs no longer present are done.
        let present: BTreeSet<u32> = view.bombs.iter().map(|b| b.id).collect();
        for (id, b) in &self.bombs {
            if b.room == here && !present.contains(id) {
                self.defused.insert(*id);
            }
        }
        for b in &view.bombs {
            let belief = self.bombs.entry(b.id).or_insert(BombBelief {
                room: here,
                remaining: None,
            });
            belief.room = here;
            if b.sequence.is_some() {
                belief.remaining = b.sequence.clone();
            }
            self.defused.remove(&b.id);
        }
        let defused = self.defused.clone();
        self.requested.retain(|b| !defused.contains(b));
        let cfg = &self.cfg;
        let room_id = |r: usize| cfg.rooms[r].to_string();
        let lower_mates_here: Vec<usize> = view
            .teammates
            .iter()
            .filter(|(j, r)| *r == here && *j < self.agent)
            .map(|(j, _)| *j)
            .collect();

        if let Some(bomb) = view.bombs.iter().min_by_key(|b| b.id) {
            let vars = |extra: Vec<(&'static str, String)>| {
                let mut v = vec![("bomb", bomb.id.to_string()), ("room", room_id(here))];
                v.extend(extra);
                v
            };
            match &bomb.sequence {
                None if lower_mates_here.is_empty() => {
                    return (cfg.inspect_action(), fill(lookup(t, "inspect"), &vars(vec![])));
                }
                None => {}
                Some(seq) => {
                    let next = seq[0];
                    let holder_here = view
                        .teammates
                        .iter()
                        .any(|(j, r)| *r == here && *j < self.agent && cfg.tools[*j].contains(&next));
                    if view.tools.contains(&next) && !holder_here {
                        return (
                            cfg.tool_action(next),
                            fill(lookup(t, "apply"), &vars(vec![("color", next.name().to_string())])),
                        );
                    }
                    let anyone_here = view
                        .teammates
                        .iter()
                        .any(|(j, r)| *r == here && cfg.tools[*j].contains(&next));
                    if anyone_here {
                        return (here, fill(lookup(t, "wait"), &[("room", room_id(here))]));
                    }
                    if self.requested.is_empty() {
                        // Ask the closest teammate carrying the missing cutter.
                        let helper = view
                            .teammates
                            .iter()
                            .filter(|(j, _)| cfg.tools[*j].contains(&next))
                            .min_by_key(|(j, r)| (self.hops[*r][here], *j));
                        if let Some((j, _)) = helper {
                            return (
                                here,
                                fill(
                                    lookup(t, "request"),
                                    &vars(vec![
                                        ("sequence", sequence_text(seq)),
                                        ("name", cfg.agent_names[*j].clone()),
                                        ("color", next.name().to_string()),
                                    ]),
                                ),
                            );
                        }
                        return (here, fill(lookup(t, "wait"), &[("room", room_id(here))]));
                    }
                }
            }
        }

        // Help with bombs elsewhere whose next phase this seat can cut.
        let help = self
            .bombs
            .iter()
            .filter(|(id, b)| !self.defused.contains(id) && b.room != here)
            .filter(|(id, b)| {
                self.requested.contains(id)
                    || b.remaining
                        .as_ref()
                        .and_then(|s| s.first())
                        .is_some_and(|c| view.tools.contains(c))
            })
            .min_by_key(|(id, b)| (!self.requested.contains(id), self.hops[here][b.room], **id));
        if let Some((id, b)) = help {
            let vars = [("target", room_id(b.room)), ("bomb", id.to_string())];
            return (self.next_hop(here, b.room), fill(lookup(t, "help"), &vars));
        }

        let unexplored = (0..cfg.n_rooms())
            .filter(|r| !self.visited.contains(r))
            .min_by_key(|r| (self.claimed.contains(r), self.hops[here][*r], *r));
        if let Some(target) = unexplored {
            return (
                self.next_hop(here, target),
                fill(lookup(t, "explore"), &[("target", room_id(target))]),
            );
        }
        (here, fill(lookup(t, "wait"), &[("room", room_id(here))]))
    }
}
