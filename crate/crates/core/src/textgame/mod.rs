//! Text interface to the environments: observation rendering, reply
//! parsing, scripted oracle teammates, dataset recording and a
//! newline-delimited JSON session server.

mod oracle;
mod record;
mod serve;
mod team;

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::Deserialize;
use thiserror::Error;

pub use oracle::{Oracle, PpOracle, UsarOracle};
pub use record::{record, RecordReport};
pub use serve::{
    load_transcript, replay_transcript, serve_stream, serve_tcp, SeatSpec, ServeSetup, SessionOutcome, TranscriptEvent,
    WireMessage,
};
pub use team::{run_team_episode, Bridge, Seat, SeatKind, SeatStep, TeamEpisode, TextPlayer};

use crate::env::pp::{self, ACTION_NAMES};
use crate::env::usar::{self, Color, Feedback};
use crate::env::{Env, EnvConfig, Observation};

#[derive(Debug, Error)]
pub enum TextGameError {
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Grounding(#[from] crate::grounding::GroundingError),
    #[error(transparent)]
    Kernel(#[from] crate::kernel::KernelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Protocol(String),
}

/// A reply that could not be mapped to a legal action; `feedback` is shown to the player.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{feedback}")]
pub struct ParseError {
    pub feedback: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedReply {
    pub action: usize,
    pub message: Option<String>,
}

/// A teammate message delivered at the start of a round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InboxMessage {
    pub from: String,
    pub text: String,
}

#[derive(Debug, Deserialize)]
pub(crate) struct Templates {
    pub pp: PpTemplates,
    pub usar: UsarTemplates,
}

#[derive(Debug, Deserialize)]
pub(crate) struct PpTemplates {
    pub status: String,
    pub prey_here: String,
    pub prey_seen: String,
    pub teammate_seen: String,
    pub inbox: String,
    pub prompt: String,
    pub reply: String,
    pub messages: HashMap<String, String>,
    pub errors: HashMap<String, String>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct UsarTemplates {
    pub room_bomb: String,
    pub room_bomb_sequence: String,
    pub room_empty: String,
    pub status: String,
    pub teammate: String,
    pub inbox: String,
    pub prompt: String,
    pub reply_move: String,
    pub reply_inspect: String,
    pub reply_tool: String,
    pub feedback: HashMap<String, String>,
    pub messages: HashMap<String, String>,
    pub errors: HashMap<String, String>,
}

pub(crate) fn templates() -> &'static Templates {
    static T: OnceLock<Templates> = OnceLock::new();
    T.get_or_init(|| toml::from_str(include_str!("../../data/templates.toml")).expect("bundled templates parse"))
}

/// Replaces every `{key}` in `template`.
pub(crate) fn fill(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn lookup<'a>(map: &'a HashMap<String, String>, key: &str) -> &'a str {
    map.get(key).map(String::as_str).unwrap_or_else(|| panic!("missing template {key}"))
}

pub fn agent_name(env: &Env, agent: usize) -> String {
    match env.config() {
        EnvConfig::Usar(c) => c.agent_names[agent].clone(),
        EnvConfig::PredatorPrey(_) => format!("Predator {}", agent + 1),
    }
}

/// Agent index for a display name.
pub fn agent_index(env: &Env, name: &str) -> Option<usize> {
    (0..env.n_agents()).find(|&i| agent_name(env, i).eq_ignore_ascii_case(name))
}

pub(crate) fn color_list(colors: &[Color]) -> String {
    colors.iter().map(|c| c.name()).collect::<Vec<_>>().join(" and ")
}

pub(crate) fn sequence_text(colors: &[Color]) -> String {
    colors.iter().map(|c| c.name()).collect::<Vec<_>>().join(" then ")
}

/// Renders one agent's view. The text depends only on the observation,
/// the round number, the inbox and the previous action's feedback.
pub fn render(
    env: &Env,
    obs: &Observation,
    agent: usize,
    round: usize,
    inbox: &[InboxMessage],
    feedback: Option<Feedback>,
) -> String {
    let t = templates();
    let mut lines = Vec::new();
    match env.config() {
        EnvConfig::PredatorPrey(cfg) => {
            let v = pp::decode(cfg, obs);
            let cell = |(r, c): (usize, usize)| [("r", r.to_string()), ("c", c.to_string())];
            let [r, c] = cell(v.position);
            lines.push(fill(
                &t.pp.status,
                &[("round", round.to_string()), r, c, ("grid", cfg.grid.to_string())],
            ));
            if let Some(p) = v.prey {
                let tpl = if p == v.position { &t.pp.prey_here } else { &t.pp.prey_seen };
                lines.push(fill(tpl, &cell(p)));
            }
            for p in &v.predators {
                lines.push(fill(&t.pp.teammate_seen, &cell(*p)));
            }
            for m in inbox {
                lines.push(fill(&t.pp.inbox, &[("name", m.from.clone()), ("text", m.text.clone())]));
            }
            lines.push(t.pp.prompt.clone());
        }
        EnvConfig::Usar(cfg) => {
            let v = usar::decode(cfg, obs, agent);
            let room = cfg.rooms[v.room].to_string();
            if let Some(f) = feedback.and_then(feedback_key) {
                lines.push(fill(lookup(&t.usar.feedback, f), &[("room", room.clone())]));
            }
            lines.push(match v.bombs.iter().min_by_key(|b| b.id) {
                None => fill(&t.usar.room_empty, &[("room", room.clone())]),
                Some(b) => match &b.sequence {
                    None => fill(&t.usar.room_bomb, &[("room", room.clone()), ("bomb", b.id.to_string())]),
                    Some(seq) => fill(
                        &t.usar.room_bomb_sequence,
                        &[
                            ("room", room.clone()),
                            ("bomb", b.id.to_string()),
                            ("sequence", sequence_text(seq)),
                        ],
                    ),
                },
            });
            lines.push(fill(
                &t.usar.status,
                &[
                    ("round", round.to_string()),
                    ("score", v.score.to_string()),
                    ("tools", color_list(&v.tools)),
                ],
            ));
            for (j, r) in &v.teammates {
                lines.push(fill(
                    &t.usar.teammate,
                    &[("name", cfg.agent_names[*j].clone()), ("room", cfg.rooms[*r].to_string())],
                ));
            }
            for m in inbox {
                lines.push(fill(&t.usar.inbox, &[("name", m.from.clone()), ("text", m.text.clone())]));
            }
            lines.push(t.usar.prompt.clone());
        }
    }
    lines.join("\n")
}

fn feedback_key(f: Feedback) -> Option<&'static str> {
    Some(match f {
        Feedback::None => return None,
        Feedback::Moved => "moved",
        Feedback::Stayed => "stayed",
        Feedback::NonAdjacent => "non_adjacent",
        Feedback::Inspected => "inspected",
        Feedback::NoBomb => "no_bomb",
        Feedback::PhaseCleared => "phase_cleared",
        Feedback::Defused => "defused",
        Feedback::WrongColor => "wrong_color",
        Feedback::MissingTool => "missing_tool",
    })
}

fn re(pattern: &'static str, cell: &'static OnceLock<Regex>) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

/// Splits a reply into its action part and the quoted team message.
fn split_reply(text: &str) -> (String, Option<String>) {
    static MSG: OnceLock<Regex> = OnceLock::new();
    static SEL: OnceLock<Regex> = OnceLock::new();
    let msg_re = re(r"(?i)message\s+to\s+team\s*:", &MSG);
    // The message may come before or after the action; everything outside it is the action part.
    let (action_part, message) = match msg_re.find(text) {
        Some(m) => {
            let rest = text[m.end()..].trim();
            let rest = rest.trim_start_matches(['"', '\u{201c}', '\'']);
            let end = rest.find(['"', '\u{201d}']).unwrap_or(rest.len());
            let msg = rest[..end].trim().to_string();
            let after = rest[end..].trim_start_matches(['"', '\u{201d}']);
            (format!("{} {}", &text[..m.start()], after), (!msg.is_empty()).then_some(msg))
        }
        None => (text.to_string(), None),
    };
    let sel_re = re(r"(?i)action\s+selection\s*:", &SEL);
    let action_part = match sel_re.find(&action_part) {
        Some(m) => &action_part[m.end()..],
        None => &action_part[..],
    };
    (action_part.to_lowercase(), message)
}

/// Maps a free-text reply to an action by keyword matching.
///
/// Illegal or unrecognized actions yield a [`ParseError`] with corrective feedback.
pub fn parse(text: &str, env: &Env, obs: &Observation, agent: usize) -> Result<ParsedReply, ParseError> {
    let t = templates();
    let (action_text, message) = split_reply(text);
    let err = |feedback: String| Err(ParseError { feedback });
    match env.config() {
        EnvConfig::PredatorPrey(_) => {
            static DIR: OnceLock<Regex> = OnceLock::new();
            match re(r"\b(up|down|left|right|stay)\b", &DIR).captures(&action_text) {
                Some(c) => Ok(ParsedReply {
                    action: ACTION_NAMES.iter().position(|n| *n == &c[1]).expect("matched name"),
                    message,
                }),
                None => {
                    let legal = ACTION_NAMES.iter().map(|a| format!("Move {a}")).collect::<Vec<_>>().join(", ");
                    err(fill(lookup(&t.pp.errors, "unknown"), &[("legal", legal)]))
                }
            }
        }
        EnvConfig::Usar(cfg) => {
            static MOVE: OnceLock<Regex> = OnceLock::new();
            static INSPECT: OnceLock<Regex> = OnceLock::new();
            static APPLY: OnceLock<Regex> = OnceLock::new();
            let view = usar::decode(cfg, obs, agent);
            let room = cfg.rooms[view.room].to_string();
            let e = &t.usar.errors;
            if let Some(c) = re(r"\bmove\s+to\s+room\s+(\d+)", &MOVE).captures(&action_text) {
                let target: u32 = c[1].parse().unwrap_or(u32::MAX);
                let Some(idx) = cfg.room_index(target) else {
                    let rooms = cfg.rooms.iter().map(u32::to_string).collect::<Vec<_>>().join(", ");
                    return err(fill(
                        lookup(e, "unknown_room"),
                        &[("target", c[1].to_string()), ("rooms", rooms)],
                    ));
                };
                if idx != view.room && !cfg.adjacent(view.room, idx) {
                    return err(fill(
                        lookup(e, "non_adjacent"),
                        &[("target", target.to_string()), ("room", room)],
                    ));
                }
                return Ok(ParsedReply { action: idx, message });
            }
            if re(r"\binspect\b", &INSPECT).is_match(&action_text) {
                if view.bombs.is_empty() {
                    return err(fill(lookup(e, "no_bomb_inspect"), &[("room", room)]));
                }
                return Ok(ParsedReply {
                    action: cfg.inspect_action(),
                    message,
                });
            }
            if let Some(c) = re(r"\bapply\s+(?:the\s+)?(red|green|blue)\b", &APPLY).captures(&action_text) {
                let color = Color::parse(&c[1]).expect("matched color");
                if !view.tools.contains(&color) {
                    return err(fill(
                        lookup(e, "missing_tool"),
                        &[("color", color.name().to_string()), ("tools", color_list(&view.tools))],
                    ));
                }
                if view.bombs.is_empty() {
                    return err(fill(lookup(e, "no_bomb_apply"), &[("room", room)]));
                }
                return Ok(ParsedReply {
                    action: cfg.tool_action(color),
                    message,
                });
            }
            let adjacent = cfg
                .neighbors(view.room)
                .iter()
                .map(|r| cfg.rooms[*r].to_string())
                .collect::<Vec<_>>()
                .join(", ");
            let tools = view
                .tools
                .iter()
                .map(|c| format!("Apply {} Tool", capitalize(c.name())))
                .collect::<Vec<_>>()
                .join(", ");
            let legal = format!("Move to Room X (adjacent rooms: {adjacent}), Inspect Bomb, {tools}");
            err(fill(lookup(e, "unknown"), &[("legal", legal)]))
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Formats an action and message in the reply format [`parse`] understands.
pub fn format_reply(env: &Env, action: usize, message: &str) -> String {
    let t = templates();
    match env.config() {
        EnvConfig::PredatorPrey(_) => fill(
            &t.pp.reply,
            &[("action", ACTION_NAMES[action].to_string()), ("message", message.to_string())],
        ),
        EnvConfig::Usar(cfg) => {
            let msg = ("message", message.to_string());
            if action < cfg.n_rooms() {
                fill(&t.usar.reply_move, &[("room", cfg.rooms[action].to_string()), msg])
            } else if action == cfg.inspect_action() {
                fill(&t.usar.reply_inspect, &[msg])
            } else {
                let color = Color::from_index(action - cfg.n_rooms() - 1).expect("tool action");
                fill(&t.usar.reply_tool, &[("color", capitalize(color.name())), msg])
            }
        }
    }
}

#[cfg(test)]
mod tests;
