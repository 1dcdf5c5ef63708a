//! Newline-delimited JSON sessions for external players.
//!
//! Server to client:
//!
//! * `{"type":"obs","session":s,"agent":i,"name":n,"round":t,"text":...}` asks seat `i` to act.
//! * `{"type":"feedback","agent":i,"round":t,"text":...}` rejects the last reply; the seat must answer again.
//! * `{"type":"error","message":...}` reports a line that was not a valid client message.
//! * `{"type":"done","session":s,"rounds":t,"success":b,"team_return":r}` ends the episode.
//!
//! Client to server: `{"type":"act","text":"Action selection: ..."}`.
//!
//! A seat that does not produce a valid action before its timeout plays the
//! no-op action for that round.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::agent::AgentPolicy;
use crate::env::Env;
use crate::kernel::{RngStreams, SampleMode};
use crate::training::GateMode;

use super::team::TextPlayer;
use super::{agent_name, run_team_episode, Bridge, Seat, TeamEpisode, TextGameError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Obs {
        session: String,
        agent: usize,
        name: String,
        round: usize,
        text: String,
    },
    Act {
        text: String,
    },
    Feedback {
        agent: usize,
        round: usize,
        text: String,
    },
    Error {
        message: String,
    },
    Done {
        session: String,
        rounds: usize,
        success: bool,
        team_return: f64,
    },
}

/// One line of a session transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dir", rename_all = "snake_case")]
pub enum TranscriptEvent {
    Out { msg: WireMessage },
    In { line: String },
    Timeout { agent: usize, round: usize },
}

/// How a session seat is filled.
#[derive(Clone, Copy)]
pub enum SeatSpec<'a> {
    Policy { policy: &'a AgentPolicy, gates: GateMode },
    Oracle,
    External,
}

#[derive(Clone)]
pub struct ServeSetup<'a> {
    pub env: &'a Env,
    pub seats: Vec<SeatSpec<'a>>,
    pub bridge: Bridge<'a>,
    pub timeout: Duration,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SessionOutcome {
    pub session: String,
    pub episode: TeamEpisode,
    pub transcript: Vec<TranscriptEvent>,
}

impl SessionOutcome {
    pub fn save_transcript(&self, path: &Path) -> Result<(), TextGameError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for e in &self.transcript {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptEvent>, TextGameError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

enum Next {
    Line(String),
    Timeout,
    Closed,
}

trait LineSource {
    fn next_line(&mut self, deadline: Instant) -> Next;
}

struct ChannelSource(Receiver<String>);

impl LineSource for ChannelSource {
    fn next_line(&mut self, deadline: Instant) -> Next {
        let wait = deadline.saturating_duration_since(Instant::now());
        match self.0.recv_timeout(wait) {
            Ok(line) => Next::Line(line),
            Err(RecvTimeoutError::Timeout) => Next::Timeout,
            Err(RecvTimeoutError::Disconnected) => Next::Closed,
        }
    }
}

/// Feeds a recorded transcript's client side back in order.
struct ReplaySource(VecDeque<TranscriptEvent>);

impl LineSource for ReplaySource {
    fn next_line(&mut self, _deadline: Instant) -> Next {
        while let Some(e) = self.0.pop_front() {
            match e {
                TranscriptEvent::In { line } => return Next::Line(line),
                TranscriptEvent::Timeout { .. } => return Next::Timeout,
                TranscriptEvent::Out { .. } => {}
            }
        }
        Next::Closed
    }
}

struct Wire<S, W> {
    session: String,
    source: S,
    writer: W,
    timeout: Duration,
    names: Vec<String>,
    transcript: Vec<TranscriptEvent>,
    closed: bool,
    deadline: Option<Instant>,
    error: Option<std::io::Error>,
}

impl<S: LineSource, W: Write> Wire<S, W> {
    fn send(&mut self, msg: WireMessage) {
        let line = serde_json::to_string(&msg).expect("wire messages serialize");
        if let Err(e) = writeln!(self.writer, "{line}").and_then(|_| self.writer.flush()) {
            self.closed = true;
            self.error.get_or_insert(e);
        }
        self.transcript.push(TranscriptEvent::Out { msg });
    }

    fn respond(&mut self, agent: usize, round: usize, text: &str, feedback: Option<&str>) -> Option<String> {
        match feedback {
            None => {
                self.deadline = Some(Instant::now() + self.timeout);
                self.send(WireMessage::Obs {
                    session: self.session.clone(),
                    agent,
                    name: self.names[agent].clone(),
                    round,
                    text: text.to_string(),
                });
            }
            Some(f) => self.send(WireMessage::Feedback {
                agent,
                round,
                text: f.to_string(),
            }),
        }
        let deadline = self.deadline.unwrap_or_else(Instant::now);
        loop {
            if self.closed {
                return None;
            }
            match self.source.next_line(deadline) {
                Next::Line(line) => {
                    self.transcript.push(TranscriptEvent::In { line: line.clone() });
                    match serde_json::from_str::<WireMessage>(&line) {
                        Ok(WireMessage::Act { text }) => return Some(text),
                        Ok(_) => self.send(WireMessage::Error {
                            message: "expected a message of type \"act\"".into(),
                        }),
                        Err(e) => self.send(WireMessage::Error {
                            message: format!("malformed message: {e}"),
                        }),
                    }
                }
                Next::Timeout => {
                    self.transcript.push(TranscriptEvent::Timeout { agent, round });
                    return None;
                }
                Next::Closed => {
                    self.closed = true;
                    return None;
                }
            }
        }
    }
}

struct SeatHandle<'w, S, W>(&'w RefCell<Wire<S, W>>);

impl<S: LineSource, W: Write> TextPlayer for SeatHandle<'_, S, W> {
    fn respond(&mut self, agent: usize, round: usize, text: &str, feedback: Option<&str>) -> Option<String> {
        self.0.borrow_mut().respond(agent, round, text, feedback)
    }
}

fn run_session<S: LineSource, W: Write>(
    setup: &ServeSetup,
    session: &str,
    episode: u64,
    source: S,
    writer: W,
) -> Result<SessionOutcome, TextGameError> {
    let env = setup.env;
    if setup.seats.len() != env.n_agents() {
        return Err(TextGameError::Protocol(format!(
            "session has {} seats but the environment has {} agents",
            setup.seats.len(),
            env.n_agents()
        )));
    }
    let wire = RefCell::new(Wire {
        session: session.to_string(),
        source,
        writer,
        timeout: setup.timeout,
        names: (0..env.n_agents()).map(|i| agent_name(env, i)).collect(),
        transcript: Vec::new(),
        closed: false,
        deadline: None,
        error: None,
    });
    let mut handles: Vec<SeatHandle<S, W>> = setup
        .seats
        .iter()
        .filter(|s| matches!(s, SeatSpec::External))
        .map(|_| SeatHandle(&wire))
        .collect();
    let mut handle_iter = handles.iter_mut();
    let mut seats: Vec<Seat> = setup
        .seats
        .iter()
        .map(|s| match *s {
            SeatSpec::Policy { policy, gates } => Seat::Policy { policy, gates },
            SeatSpec::Oracle => Seat::Oracle,
            SeatSpec::External => Seat::External(handle_iter.next().expect("one handle per external seat")),
        })
        .collect();
    let streams = RngStreams::new(setup.seed);
    let state = env.reset(&mut streams.stream("env", episode, 0))?;
    let mut act = streams.stream("act", episode, 0);
    let ep = run_team_episode(env, &mut seats, &setup.bridge, state, &mut act, SampleMode::Greedy, episode)?;
    drop(seats);
    drop(handles);
    let mut wire = wire.into_inner();
    let team_return = ep.steps.iter().flatten().map(|s| s.reward).sum();
    wire.send(WireMessage::Done {
        session: session.to_string(),
        rounds: ep.len(),
        success: ep.success,
        team_return,
    });
    Ok(SessionOutcome {
        session: session.to_string(),
        episode: ep,
        transcript: wire.transcript,
    })
}

/// Runs one session over a reader/writer pair (stdio or a socket).
pub fn serve_stream<R, W>(
    setup: &ServeSetup,
    session: &str,
    episode: u64,
    reader: R,
    writer: W,
) -> Result<SessionOutcome, TextGameError>
where
    R: BufRead + Send + 'static,
    W: Write,
{
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    run_session(setup, session, episode, ChannelSource(rx), writer)
}

/// Accepts connections and runs one session per connection, sequentially
/// numbered from episode 0. Stops after `max_sessions` when given.
pub fn serve_tcp(
    setup: &ServeSetup,
    listener: TcpListener,
    max_sessions: Option<usize>,
    mut on_session: impl FnMut(&SessionOutcome) -> Result<(), TextGameError>,
) -> Result<(), TextGameError> {
    let mut k = 0u64;
    for stream in listener.incoming() {
        let stream: TcpStream = stream?;
        let reader = BufReader::new(stream.try_clone()?);
        let outcome = serve_stream(setup, &format!("s{k}"), k, reader, stream.try_clone()?);
        let _ = stream.shutdown(std::net::Shutdown::Both);
        on_session(&outcome?)?;
        k += 1;
        if max_sessions.is_some_and(|m| k as usize >= m) {
            break;
        }
    }
    Ok(())
}

/// Re-runs a session from its transcript. With internal seats and seeds
/// unchanged, the regenerated transcript equals the recorded one.
pub fn replay_transcript(
    setup: &ServeSetup,
    session: &str,
    episode: u64,
    transcript: &[TranscriptEvent],
) -> Result<SessionOutcome, TextGameError> {
    let source = ReplaySource(transcript.iter().cloned().collect());
    run_session(setup, session, episode, source, std::io::sink())
}
