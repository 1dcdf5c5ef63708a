use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use super::*;
use crate::env::pp::{PpState, DOWN, RIGHT, STAY};
use crate::env::usar::UsarState;
use crate::env::EnvState;
use crate::grounding::{Embedder, GroundingDataset, GroundingError, LocalHashEmbedder};
use crate::kernel::{norm, RngStreams, SampleMode};

fn pp_state(predators: Vec<(usize, usize)>, prey: (usize, usize)) -> EnvState {
    EnvState::PredatorPrey(PpState {
        t: 0,
        reached: vec![false; predators.len()],
        predators,
        prey,
    })
}

fn usar_reset(env: &Env) -> EnvState {
    env.reset(&mut RngStreams::new(0).stream("env", 0, 0)).unwrap()
}

fn usar_state(env: &Env, f: impl FnOnce(&mut UsarState)) -> EnvState {
    let EnvState::Usar(mut s) = usar_reset(env) else { unreachable!() };
    f(&mut s);
    EnvState::Usar(s)
}

fn room(env: &Env, id: u32) -> usize {
    env.config().usar().unwrap().room_index(id).unwrap()
}

#[test]
fn usar_render_names_room_and_bomb() {
    let env = Env::preset("usar").unwrap();
    let r3 = room(&env, 3);
    let state = usar_state(&env, |s| s.agent_rooms[0] = r3);
    let text = render(&env, &env.observe(&state, 0), 0, 0, &[], None);
    assert!(text.lines().any(|l| l == "You are now in Room 3 with Bomb 5."), "{text}");
}

#[test]
fn pp_render_without_sighting_mentions_only_position() {
    let env = Env::preset("pp_v0").unwrap();
    let state = pp_state(vec![(0, 0), (4, 4), (2, 0)], (2, 2));
    let text = render(&env, &env.observe(&state, 0), 0, 3, &[], None);
    assert!(text.contains("(0,0)"));
    assert!(!text.to_lowercase().contains("prey"), "{text}");
    assert!(!text.contains("teammate"));
}

#[test]
fn render_is_a_function_of_the_observation() {
    let env = Env::preset("pp_v0").unwrap();
    // Hidden state differs (prey and teammates elsewhere), the observation does not.
    let a = pp_state(vec![(1, 1), (4, 4), (2, 0)], (2, 2));
    let b = pp_state(vec![(1, 1), (0, 3), (3, 3)], (4, 0));
    assert_eq!(env.observe(&a, 0), env.observe(&b, 0));
    let inbox = [InboxMessage {
        from: "Predator 2".into(),
        text: "hello".into(),
    }];
    let ra = render(&env, &env.observe(&a, 0), 0, 1, &inbox, None);
    let rb = render(&env, &env.observe(&b, 0), 0, 1, &inbox, None);
    assert_eq!(ra, rb);
    assert_eq!(ra, render(&env, &env.observe(&a, 0), 0, 1, &inbox, None));
}

#[test]
fn parse_reply_format() {
    let env = Env::preset("usar").unwrap();
    let state = usar_reset(&env);
    let obs = env.observe(&state, 0);
    let p = parse("Action selection: Move to Room 5. Message to Team: \"hello\"", &env, &obs, 0).unwrap();
    assert_eq!(p.action, room(&env, 5));
    assert_eq!(p.message.as_deref(), Some("hello"));
    let p = parse("action selection: move to room 5. message to team: \"unterminated", &env, &obs, 0).unwrap();
    assert_eq!(p.message.as_deref(), Some("unterminated"));
    let p = parse("Message to team: \"on my way\" Action selection: move to room 5", &env, &obs, 0).unwrap();
    assert_eq!(p.action, room(&env, 5));
    assert_eq!(p.message.as_deref(), Some("on my way"));
    let p = parse("INSPECT BOMB", &env, &obs, 0).unwrap();
    assert_eq!(p.action, env.config().usar().unwrap().inspect_action());
    assert_eq!(p.message, None);
}

#[test]
fn parse_errors_carry_corrective_text() {
    let env = Env::preset("usar").unwrap();
    let r6 = room(&env, 6);
    let state = usar_state(&env, |s| s.agent_rooms[0] = r6);
    let obs = env.observe(&state, 0);
    // Room 6 holds Bomb 2; room 3 is not adjacent to room 6.
    let e = parse("Move to Room 3", &env, &obs, 0).unwrap_err();
    assert!(e.feedback.contains("Consider taking a detour"), "{}", e.feedback);
    assert!(e.feedback.contains("Room 6"));
    let e = parse("jump", &env, &obs, 0).unwrap_err();
    assert!(e.feedback.contains("Legal actions"), "{}", e.feedback);
    assert!(e.feedback.contains("Inspect Bomb"));
    let e = parse("Move to Room 42", &env, &obs, 0).unwrap_err();
    assert!(e.feedback.contains("no Room 42"));
    // Alpha carries red and green only.
    let e = parse("Apply Blue Tool", &env, &obs, 0).unwrap_err();
    assert!(e.feedback.contains("blue"));

    let r3 = room(&env, 3);
    let empty = usar_state(&env, |s| {
        s.agent_rooms[0] = r3;
        s.bombs[4].remaining.clear();
    });
    let obs = env.observe(&empty, 0);
    let e = parse("Inspect Bomb", &env, &obs, 0).unwrap_err();
    assert!(e.feedback.contains("no bomb in the current location"), "{}", e.feedback);

    let env = Env::preset("pp_v0").unwrap();
    let s = pp_state(vec![(0, 0), (4, 4), (2, 0)], (2, 2));
    let e = parse("jump", &env, &env.observe(&s, 0), 0).unwrap_err();
    assert!(e.feedback.contains("Move up"), "{}", e.feedback);
}

#[test]
fn pp_parse_keywords() {
    let env = Env::preset("pp_v1").unwrap();
    let s = pp_state(vec![(0, 0), (4, 4), (2, 0)], (2, 2));
    let obs = env.observe(&s, 0);
    for (i, name) in crate::env::pp::ACTION_NAMES.iter().enumerate() {
        let text = format!("Action selection: Move {}. Message to Team: \"I'm off\"", name.to_uppercase());
        assert_eq!(parse(&text, &env, &obs, 0).unwrap().action, i);
    }
    // Keywords inside the message do not count as the action.
    let p = parse("Action selection: Move left. Message to Team: \"prey is up\"", &env, &obs, 0).unwrap();
    assert_eq!(p.action, crate::env::pp::LEFT);
}

#[test]
fn format_reply_round_trips_every_action() {
    for name in ["pp_v0", "usar"] {
        let env = Env::preset(name).unwrap();
        let state = match name {
            "usar" => usar_reset(&env),
            _ => pp_state(vec![(2, 2), (4, 4), (2, 0)], (0, 0)),
        };
        let obs = env.observe(&state, 0);
        for a in 0..env.n_actions() {
            let text = format_reply(&env, a, "on my way");
            match parse(&text, &env, &obs, 0) {
                Ok(p) => {
                    assert_eq!(p.action, a, "{text}");
                    assert_eq!(p.message.as_deref(), Some("on my way"));
                }
                // Only illegal actions may be rejected (non-adjacent rooms, missing tools).
                Err(e) => assert!(name == "usar", "{text}: {}", e.feedback),
            }
        }
    }
}

#[test]
fn pp_oracle_follows_announced_prey() {
    let env = Env::preset("pp_v0").unwrap();
    let s = pp_state(vec![(3, 1), (0, 0), (0, 4)], (3, 3));
    let mut o = Oracle::new(&env, 0);
    let inbox = [InboxMessage {
        from: "Predator 2".into(),
        text: "Converging on prey location at (3,3)".into(),
    }];
    let (a, msg) = o.act(&env.observe(&s, 0), &inbox);
    assert_eq!(a, RIGHT);
    assert!(msg.contains("(3,3)"), "{msg}");
    assert!(msg.starts_with("Moving right toward prey location"));
    // Greedy tie-break goes vertical first.
    assert_eq!(PpOracle::greedy((1, 1), (3, 3)), DOWN);
    assert_eq!(PpOracle::greedy((3, 3), (3, 3)), STAY);
}

#[test]
fn pp_oracle_on_prey_converges() {
    let env = Env::preset("pp_v1").unwrap();
    let s = pp_state(vec![(2, 2), (0, 0), (4, 4)], (2, 3));
    let mut o = Oracle::new(&env, 0);
    let (a, msg) = o.act(&env.observe(&s, 0), &[]);
    assert_eq!(a, RIGHT);
    assert_eq!(msg, "Converging on prey location at (2,3)");
}

fn oracle_team(env: &Env, episodes: u64) -> Vec<TeamEpisode> {
    let streams = RngStreams::new(7);
    (0..episodes)
        .map(|ep| {
            let state = env.reset(&mut streams.stream("env", ep, 0)).unwrap();
            let mut seats: Vec<Seat> = (0..env.n_agents()).map(|_| Seat::Oracle).collect();
            let mut rng = streams.stream("act", ep, 0);
            run_team_episode(env, &mut seats, &Bridge::default(), state, &mut rng, SampleMode::Greedy, ep).unwrap()
        })
        .collect()
}

#[test]
fn pp_oracle_team_solves_within_limit() {
    let env = Env::preset("pp_v0").unwrap();
    let eps = oracle_team(&env, 100);
    let mean = eps.iter().map(|e| e.len() as f64).sum::<f64>() / 100.0;
    let success = eps.iter().filter(|e| e.success).count();
    assert!(mean < 20.0, "mean length {mean}");
    assert!(success >= 95, "success {success}/100");
}

#[test]
fn usar_oracle_team_defuses_everything() {
    let env = Env::preset("usar").unwrap();
    let cfg = env.config().usar().unwrap().clone();
    for ep in oracle_team(&env, 3) {
        assert!(ep.success, "episode {} ran {} rounds", ep.episode, ep.len());
        assert!(ep.len() < 100);
        for row in &ep.steps {
            for (i, s) in row.iter().enumerate() {
                if s.action > cfg.n_rooms() {
                    let color = crate::env::usar::Color::from_index(s.action - cfg.n_rooms() - 1).unwrap();
                    assert!(cfg.tools[i].contains(&color));
                }
            }
        }
    }
}

#[test]
fn oracle_output_always_parses() {
    for name in ["pp_v0", "pp_v1", "usar"] {
        let env = Env::preset(name).unwrap();
        for ep in oracle_team(&env, 10) {
            for row in &ep.steps {
                for (i, s) in row.iter().enumerate() {
                    let text = format_reply(&env, s.action, s.message.as_deref().unwrap());
                    let obs = crate::env::Observation::new(s.obs.clone());
                    let p = parse(&text, &env, &obs, i).unwrap_or_else(|e| panic!("{text}: {}", e.feedback));
                    assert_eq!(p.action, s.action);
                }
            }
        }
    }
}

#[test]
fn record_writes_loadable_unit_norm_entries() {
    let env = Env::preset("usar").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let emb = LocalHashEmbedder::new(16, 0).unwrap();
    let path = dir.path().join("usar.jsonl");
    let (ds, report) = record(&env, 50, 0, &emb, "local", &path).unwrap();
    let expected = 3.0 * report.mean_length * 50.0;
    assert_eq!(ds.len() as f64, expected);
    assert_eq!(report.success_rate, 1.0);
    let loaded = GroundingDataset::load(&path).unwrap();
    assert_eq!(loaded.len(), ds.len());
    for e in loaded.entries() {
        assert!((norm(&e.embedding) - 1.0).abs() < 1e-9);
        assert!(loaded.lookup(&e.env, &e.obs, e.action).is_some());
    }
    let again = dir.path().join("again.jsonl");
    record(&env, 50, 0, &emb, "local", &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

struct FailingEmbedder {
    left: AtomicUsize,
    inner: LocalHashEmbedder,
}

impl Embedder for FailingEmbedder {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>, GroundingError> {
        if self.left.load(Ordering::SeqCst) == 0 {
            return Err(GroundingError::Provider {
                attempts: 1,
                message: "quota exhausted".into(),
            });
        }
        self.left.fetch_sub(1, Ordering::SeqCst);
        self.inner.embed(text)
    }
    fn fingerprint(&self) -> String {
        "failing".into()
    }
}

#[test]
fn provider_failure_marks_partial_file_invalid() {
    let env = Env::preset("pp_v0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.jsonl");
    let emb = FailingEmbedder {
        left: AtomicUsize::new(5),
        inner: LocalHashEmbedder::new(8, 0).unwrap(),
    };
    let err = record(&env, 3, 0, &emb, "failing", &path).unwrap_err();
    assert!(err.to_string().contains("quota exhausted"));
    let lines = std::fs::read_to_string(&path).unwrap();
    assert_eq!(lines.lines().count(), 6);
    let load = GroundingDataset::load(&path).unwrap_err().to_string();
    assert!(load.contains("line 6") && load.contains("invalid"), "{load}");
}

fn setup<'a>(env: &'a Env, seats: Vec<SeatSpec<'a>>, timeout_ms: u64) -> ServeSetup<'a> {
    ServeSetup {
        env,
        seats,
        bridge: Bridge::default(),
        timeout: Duration::from_millis(timeout_ms),
        seed: 3,
    }
}

/// Runs `client` against a one-session TCP server and returns the outcome.
fn with_server(setup: &ServeSetup, client: impl FnOnce(TcpStream) + Send + 'static) -> SessionOutcome {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || client(TcpStream::connect(addr).unwrap()));
    let mut out = None;
    serve_tcp(setup, listener, Some(1), |o| {
        out = Some(o.clone());
        Ok(())
    })
    .unwrap();
    handle.join().unwrap();
    out.unwrap()
}

fn read_msg(r: &mut impl BufRead) -> Option<WireMessage> {
    let mut line = String::new();
    (r.read_line(&mut line).ok()? > 0).then(|| serde_json::from_str(&line).unwrap())
}

#[test]
fn echo_client_completes_pp_episode() {
    let env = Env::preset("pp_v0").unwrap();
    let s = setup(&env, vec![SeatSpec::External, SeatSpec::Oracle, SeatSpec::Oracle], 5_000);
    let outcome = with_server(&s, |stream| {
        let mut r = BufReader::new(stream.try_clone().unwrap());
        let mut w = stream;
        while let Some(msg) = read_msg(&mut r) {
            match msg {
                WireMessage::Obs { .. } => {
                    writeln!(w, r#"{{"type":"act","text":"Action selection: Move right. Message to Team: \"hi\""}}"#)
                        .unwrap();
                }
                WireMessage::Done { .. } => break,
                other => panic!("unexpected {other:?}"),
            }
        }
    });
    let ep = &outcome.episode;
    assert!(ep.len() >= 1);
    assert_eq!(ep.timeouts(), 0);
    assert!(ep.steps.iter().all(|row| row[0].message.as_deref() == Some("hi")));
    assert!(matches!(outcome.transcript.last(), Some(TranscriptEvent::Out { msg: WireMessage::Done { .. } })));
    // Replaying the client side regenerates the same transcript.
    let replayed = replay_transcript(&s, &outcome.session, 0, &outcome.transcript).unwrap();
    assert_eq!(replayed.transcript, outcome.transcript);
    assert_eq!(replayed.episode, outcome.episode);
}

#[test]
fn bad_replies_get_feedback_and_errors() {
    let env = Env::preset("pp_v0").unwrap();
    let s = setup(&env, vec![SeatSpec::External, SeatSpec::Oracle, SeatSpec::Oracle], 5_000);
    let outcome = with_server(&s, |stream| {
        let mut r = BufReader::new(stream.try_clone().unwrap());
        let mut w = stream;
        let mut first = true;
        while let Some(msg) = read_msg(&mut r) {
            match msg {
                WireMessage::Obs { round, .. } if first && round == 0 => {
                    first = false;
                    writeln!(w, "this is not json").unwrap();
                    assert!(matches!(read_msg(&mut r), Some(WireMessage::Error { .. })));
                    writeln!(w, r#"{{"type":"act","text":"jump"}}"#).unwrap();
                    match read_msg(&mut r) {
                        Some(WireMessage::Feedback { round: 0, text, .. }) => assert!(text.contains("Legal actions")),
                        other => panic!("expected feedback, got {other:?}"),
                    }
                    writeln!(w, r#"{{"type":"act","text":"Move stay"}}"#).unwrap();
                }
                WireMessage::Obs { .. } => writeln!(w, r#"{{"type":"act","text":"Move down"}}"#).unwrap(),
                WireMessage::Done { .. } => break,
                other => panic!("unexpected {other:?}"),
            }
        }
    });
    assert_eq!(outcome.episode.steps[0][0].action, STAY);
    let replayed = replay_transcript(&s, &outcome.session, 0, &outcome.transcript).unwrap();
    assert_eq!(replayed.transcript, outcome.transcript);
}

#[test]
fn silent_client_times_out_to_noop() {
    let env = Env::preset("pp_v0").unwrap();
    let s = setup(&env, vec![SeatSpec::External, SeatSpec::Oracle, SeatSpec::Oracle], 20);
    let outcome = with_server(&s, |stream| {
        let mut r = BufReader::new(stream);
        while let Some(msg) = read_msg(&mut r) {
            if matches!(msg, WireMessage::Done { .. }) {
                break;
            }
        }
    });
    let ep = &outcome.episode;
    assert_eq!(ep.timeouts(), ep.len());
    let state0 = env.reset(&mut RngStreams::new(3).stream("env", 0, 0)).unwrap();
    assert_eq!(ep.steps[0][0].action, STAY);
    assert_eq!(ep.steps[0][0].position, env.sender_position(&state0, 0));
}
