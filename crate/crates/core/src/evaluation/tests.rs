use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::agent::{AgentPolicy, PolicyShape};
use crate::grounding::{EntryMeta, GroundingEntry};
use crate::textgame::{SeatKind, SeatStep};
use crate::training::GateMode;

fn toks(s: &str) -> Vec<String> {
    tokenize(s)
}

#[test]
fn bleu_reference_points() {
    assert_eq!(bleu(&toks("moving up toward prey"), &toks("moving up toward prey")), 1.0);
    assert!(bleu(&toks("alpha beta gamma delta epsilon"), &toks("one two three four five")) < 0.05);
    assert_eq!(bleu(&[], &toks("a b")), 0.0);
    // Hand computation: unigram 3/3, bigram 2/2, trigram 1/1, no 4-grams
    // (smoothed to 1/1); brevity penalty exp(1 - 4/3).
    let expected = (1.0f64 - 4.0 / 3.0).exp();
    let got = bleu(&toks("the cat sat"), &toks("the cat sat down"));
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    // A partial match: "the cat sat on the mat" vs "the cat is on the mat".
    // Unigrams 5/6, bigrams 3/5, trigrams 1/4, 4-grams 0/3 -> 1/4; equal lengths.
    let expected = (5.0f64 / 6.0 * 3.0 / 5.0 * 1.0 / 4.0 * 1.0 / 4.0).powf(0.25);
    let got = bleu(&toks("the cat sat on the mat"), &toks("the cat is on the mat"));
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

proptest! {
    #[test]
    fn bleu_is_bounded_and_reflexive(
        a in prop::collection::vec(0u8..6, 1..12),
        b in prop::collection::vec(0u8..6, 1..12),
    ) {
        let a: Vec<String> = a.iter().map(|x| format!("w{x}")).collect();
        let b: Vec<String> = b.iter().map(|x| format!("w{x}")).collect();
        let s = bleu(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((bleu(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(xs in prop::collection::vec(-5.0f64..5.0, 3..30), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = spearman(&xs, &ys);
        let tx: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let ty: Vec<f64> = ys.iter().map(|y| y * y * y + 2.0 * y).collect();
        match (base, spearman(&tx, &ty)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a.is_none(), b.is_none()),
        }
    }
}

#[test]
fn spearman_reference_points() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    let x = [0.3, -1.0, 7.0, 2.0];
    assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
    // Ranks x = [1, 2.5, 2.5, 4], y = [1, 3, 2, 4]: sxy = 4.5, sxx = 4.5, syy = 5.
    let got = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    assert!((got - 4.5 / 22.5f64.sqrt()).abs() < 1e-15);
    assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
    assert_eq!(spearman(&[1.0], &[1.0]), None);
}

fn unit2(theta: f64) -> Vec<f64> {
    vec![theta.cos(), theta.sin()]
}

#[test]
fn topo_similarity_of_monotone_layout_is_one() {
    // Distinct pairwise distances; similarity falls strictly with distance.
    let pos = [0.0, 1.0, 3.0, 7.0, 15.0];
    let comms: Vec<Vec<f64>> = pos.iter().map(|p| unit2(0.1 * p)).collect();
    let states: Vec<Vec<f64>> = pos.iter().map(|p| vec![*p, 0.0]).collect();
    let msgs: Vec<(&[f64], &[f64])> = comms.iter().zip(&states).map(|(c, s)| (c.as_slice(), s.as_slice())).collect();
    let t = topo_similarity(&msgs, &StateDistance::Euclidean, DEFAULT_PAIR_CAP, 0).unwrap();
    assert!((t.rho - 1.0).abs() < 1e-12, "{}", t.rho);
    assert_eq!(t.pairs, 10);
    assert!(topo_similarity(&msgs[..1], &StateDistance::Euclidean, DEFAULT_PAIR_CAP, 0).is_none());
}

fn random_messages(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comms = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let states = (0..n).map(|_| vec![rng.random_range(0..5) as f64, rng.random_range(0..5) as f64]).collect();
    (comms, states)
}

#[test]
fn topo_similarity_of_unrelated_messages_is_near_zero() {
    let (comms, states) = random_messages(300, 8, 1);
    let msgs: Vec<(&[f64], &[f64])> = comms.iter().zip(&states).map(|(c, s)| (c.as_slice(), s.as_slice())).collect();
    let t = topo_similarity(&msgs, &StateDistance::Euclidean, 20_000, 9).unwrap();
    assert!(t.pairs >= 10_000);
    assert!(t.rho.abs() < 0.1, "{}", t.rho);
    // Rescaling messages by a power of two leaves every cosine bit-identical.
    let scaled: Vec<Vec<f64>> = comms.iter().map(|c| c.iter().map(|x| x * 4.0).collect()).collect();
    let msgs2: Vec<(&[f64], &[f64])> = scaled.iter().zip(&states).map(|(c, s)| (c.as_slice(), s.as_slice())).collect();
    assert_eq!(topo_similarity(&msgs2, &StateDistance::Euclidean, 20_000, 9).unwrap(), t);
}

#[test]
fn topo_similarity_uses_hops_for_rooms() {
    let env = Env::preset("usar").unwrap();
    let StateDistance::Hops(h) = state_distance(&env) else { panic!("usar uses hop distance") };
    let d = StateDistance::Hops(h.clone());
    assert_eq!(d.between(&[0.0], &[0.0]), 0.0);
    assert_eq!(d.between(&[1.0], &[2.0]), h[1][2] as f64);
}

fn blob(center: [f64; 2], n: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| vec![center[0] + rng.random_range(-spread..spread), center[1] + rng.random_range(-spread..spread)])
        .collect()
}

#[test]
fn dbscan_reference_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pts = blob([0.0, 0.0], 20, 0.2, &mut rng);
    pts.extend(blob([10.0, 10.0], 20, 0.2, &mut rng));
    let labels = dbscan(&pts, 1.0, 4);
    assert!(labels.iter().all(Option::is_some));
    assert!(labels[..20].iter().all(|l| *l == Some(0)));
    assert!(labels[20..].iter().all(|l| *l == Some(1)));
    assert!(dbscan(&pts, 1e-9, 2).iter().all(Option::is_none));
    assert!(dbscan(&pts, 100.0, 3).iter().all(|l| *l == Some(0)));
}

/// Independent density check: core components via union-find, borders
/// attached to some adjacent core.
fn check_dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize, labels: &[Option<usize>]) {
    let n = points.len();
    let d = |a: usize, b: usize| points[a].iter().zip(&points[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| d(i, j) <= eps).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && d(i, j) <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut comp_label = std::collections::HashMap::new();
    for i in (0..n).filter(|&i| core[i]) {
        let c = find(&mut parent, i);
        let l = labels[i].expect("core points are clustered");
        assert_eq!(*comp_label.entry(c).or_insert(l), l, "one label per core component");
    }
    let distinct: std::collections::HashSet<_> = comp_label.values().collect();
    assert_eq!(distinct.len(), comp_label.len(), "components map to distinct labels");
    for i in (0..n).filter(|&i| !core[i]) {
        let adjacent: Vec<usize> = (0..n).filter(|&j| core[j] && d(i, j) <= eps).map(|j| labels[j].unwrap()).collect();
        match labels[i] {
            None => assert!(adjacent.is_empty()),
            Some(l) => assert!(adjacent.contains(&l)),
        }
    }
}

#[test]
fn dbscan_matches_density_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(2..40);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)]).collect();
        let eps = rng.random_range(0.2..1.5);
        let min_pts = rng.random_range(1..6);
        check_dbscan(&pts, eps, min_pts, &dbscan(&pts, eps, min_pts));
    }
}

#[test]
fn k_distance_knee_separates_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pts = blob([0.0, 0.0], 30, 0.3, &mut rng);
    pts.extend(blob([8.0, 0.0], 30, 0.3, &mut rng));
    pts.extend(blob([0.0, 8.0], 30, 0.3, &mut rng));
    // Sparse background so the k-distance curve has a knee.
    pts.extend((0..10).map(|i| vec![20.0 + 5.0 * i as f64, -20.0 + 3.0 * i as f64]));
    let eps = k_distance_eps(&pts, 4).unwrap();
    let labels = dbscan(&pts, eps, 4);
    let count = labels.iter().flatten().max().unwrap() + 1;
    assert_eq!(count, 3, "eps {eps}");
}

/// Cyclic Jacobi eigenvalues of a small symmetric matrix, descending.
pub(crate) fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

pub(crate) fn covariance(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len() as f64;
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|k| points.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| points.iter().map(|p| (p[i] - mean[i]) * (p[j] - mean[j])).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

#[test]
fn pca_top_eigenvalue_matches_dense_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let d = rng.random_range(2..=10);
        let n = rng.random_range(d + 2..40);
        let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| scales.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let ev = jacobi_eigenvalues(covariance(&pts));
        let proj = pca2(&pts);
        assert!((proj.eigenvalues[0] - ev[0]).abs() < 1e-8, "{:?} vs {:?}", proj.eigenvalues, ev);
        assert!((proj.eigenvalues[1] - ev[1]).abs() < 1e-6);
        let first = proj.axes[0].iter().find(|x| x.abs() > 1e-12).unwrap();
        assert!(*first > 0.0);
    }
}

#[test]
fn pca_on_a_line_and_in_a_plane() {
    let line: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let p = pca2(&line);
    assert!(p.coords.iter().all(|c| c[1] == 0.0));
    assert!(p.axes[1].iter().all(|x| *x == 0.0));
    // Points spanning a 2-D subspace of R^4 keep their pairwise distances.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = [0.5, 0.5, 0.5, 0.5];
    let v = [0.5, -0.5, 0.5, -0.5];
    let pts: Vec<Vec<f64>> = (0..25)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
            (0..4).map(|k| a * u[k] + b * v[k]).collect()
        })
        .collect();
    let p = pca2(&pts);
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            let orig: f64 = pts[i].iter().zip(&pts[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let proj = ((p.coords[i][0] - p.coords[j][0]).powi(2) + (p.coords[i][1] - p.coords[j][1]).powi(2)).sqrt();
            assert!((orig - proj).abs() < 1e-9);
        }
    }
}

fn step(obs: Vec<f64>, action: usize, comm: Vec<f64>) -> SeatStep {
    SeatStep {
        obs,
        action,
        message: None,
        comm: Some(comm),
        gate: true,
        reward: 0.0,
        position: vec![0.0, 0.0],
        timed_out: false,
    }
}

fn dataset(n: usize, dim: usize, seed: u64) -> GroundingDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            GroundingEntry {
                env: "pp_v0".into(),
                obs: vec![i as f64],
                action: 0,
                message: format!("message number {i} about cell {}", i % 7),
                embedding: v.iter().map(|x| x / norm).collect(),
                meta: EntryMeta::default(),
            }
        })
        .collect();
    GroundingDataset::new(entries).unwrap()
}

fn episode(steps: Vec<SeatStep>) -> TeamEpisode {
    TeamEpisode {
        episode: 0,
        seats: vec![SeatKind::Policy],
        steps: steps.into_iter().map(|s| vec![s]).collect(),
        success: true,
        prey: None,
    }
}

#[test]
fn alignment_of_exact_references_is_perfect() {
    let ds = dataset(20, 16, 0);
    let steps = ds.entries().iter().map(|e| step(e.obs.clone(), 0, e.embedding.clone())).collect();
    let a = alignment(&[episode(steps)], &ds, "pp_v0").unwrap().unwrap();
    assert!((a.cosine.mean - 1.0).abs() < 1e-12);
    assert!((a.bleu.mean - 1.0).abs() < 1e-12);
    assert_eq!(a.cosine.n, 20);
    // No grounded step at all.
    let off = episode(vec![step(vec![99.0], 0, vec![1.0; 16])]);
    assert!(alignment(&[off], &ds, "pp_v0").unwrap().is_none());
}

#[test]
fn alignment_of_random_vectors_is_near_zero() {
    let ds = dataset(1000, 256, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let steps = (0..1000)
        .map(|i| step(vec![i as f64], 0, (0..256).map(|_| rng.sample(StandardNormal)).collect()))
        .collect();
    let a = alignment(&[episode(steps)], &ds, "pp_v0").unwrap().unwrap();
    assert_eq!(a.cosine.n, 1000);
    assert!(a.cosine.mean.abs() < 0.1, "{}", a.cosine.mean);
}

fn small_policy(env: &Env, seed: u64) -> AgentPolicy {
    let shape = PolicyShape {
        obs_dim: env.obs_dim(),
        id_dim: 0,
        n_actions: env.n_actions(),
        hidden: 8,
        comm_dim: 4,
        decoder: false,
    };
    AgentPolicy::new(shape, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn evaluate_runs_every_seed_and_is_reproducible() {
    let env = Env::preset("pp_v0").unwrap();
    let policy = small_policy(&env, 0);
    let run = || {
        let mut seats = vec![
            Seat::Policy { policy: &policy, gates: GateMode::Learned },
            Seat::Policy { policy: &policy, gates: GateMode::Learned },
            Seat::Oracle,
        ];
        evaluate(&env, &mut seats, &Bridge::default(), 8, &[0, 1, 2]).unwrap()
    };
    let (perf, traces) = run();
    assert_eq!(perf.rows.len(), 24);
    assert_eq!(perf.length.n, 24);
    assert_eq!(traces.len(), 24);
    let (again, traces2) = run();
    assert_eq!(perf, again);
    assert_eq!(serde_json::to_string(&traces).unwrap(), serde_json::to_string(&traces2).unwrap());
}

#[test]
fn zero_shot_pins_the_prey() {
    let env = Env::preset("pp_v0").unwrap();
    for k in 0..20 {
        let s = state_with_prey(&env, (3, 3), 0, k).unwrap();
        let pp = s.pp().unwrap();
        assert_eq!(pp.prey, (3, 3));
        assert!(!pp.predators.contains(&(3, 3)));
    }
    let policy = small_policy(&env, 1);
    let mut seats: Vec<Seat> = (0..3).map(|_| Seat::Policy { policy: &policy, gates: GateMode::Learned }).collect();
    let ds = dataset(5, 4, 0);
    let rows = zero_shot_eval(&env, &mut seats, &Bridge::default(), &ds, &[(1, 1), (3, 3)], 2, &[0]).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].cell, (3, 3));
    assert_eq!(rows[1].episodes, 2);
    assert!(zero_shot_eval(&env, &mut seats, &Bridge::default(), &ds, &[], 2, &[0]).unwrap().is_empty());
}

#[test]
fn report_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let empty = EvalReport::empty("pp_v0", "ic3net");
    write_report(&empty, dir.path()).unwrap();
    for f in REPORT_FILES {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("report.csv")).unwrap(), "metric,mean,sd,n\n");
    assert_eq!(std::fs::read_to_string(dir.path().join("clusters.csv")).unwrap().lines().count(), 1);

    let env = Env::preset("pp_v0").unwrap();
    let policy = small_policy(&env, 3);
    let mut seats: Vec<Seat> = (0..3).map(|_| Seat::Policy { policy: &policy, gates: GateMode::Open }).collect();
    let (perf, traces) = evaluate(&env, &mut seats, &Bridge::default(), 4, &[0]).unwrap();
    let ds = dataset(30, 4, 4);
    let mut report = EvalReport::empty("pp_v0", "langground");
    report.performance = Some(perf);
    report.seeds = vec![0];
    analyze(&mut report, &traces, &env, Some(&ds), &AnalyzeOptions::default()).unwrap();
    assert!(report.topographic.is_some());
    assert!(!report.projection.is_empty());
    write_report(&report, dir.path()).unwrap();
    assert_eq!(read_summary_csv(&dir.path().join("report.csv")).unwrap(), report.summary_rows());
    let json: EvalReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json, report);
    let svg = std::fs::read_to_string(dir.path().join("comm_space.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<circle"));
}

#[test]
fn cluster_annotation_is_translation_of_centroid() {
    let ds = dataset(10, 4, 7);
    let e0 = ds.entries()[0].embedding.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts: Vec<Vec<f64>> = (0..12)
        .map(|_| e0.iter().map(|x| x + rng.random_range(-1e-3..1e-3)).collect())
        .collect();
    let s = cluster_messages(&pts, Some(0.1), 3, Some(&ds)).unwrap().unwrap();
    assert_eq!(s.clusters.len(), 1);
    let centroid: Vec<f64> = (0..4).map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / 12.0).collect();
    assert_eq!(s.clusters[0].message, Some(ds.translate(&centroid).unwrap().message));
    assert_eq!(s.clusters[0].message.as_deref(), Some(ds.entries()[0].message.as_str()));
}
