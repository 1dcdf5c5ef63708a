//! Density clustering and a deterministic 2-D projection for message vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn neighbors(points: &[Vec<f64>], i: usize, eps: f64) -> Vec<usize> {
    (0..points.len()).filter(|&j| dist(&points[i], &points[j]) <= eps).collect()
}

/// DBSCAN with the Euclidean metric. `None` marks noise.
///
/// A point is a core point when at least `min_pts` points (itself included)
/// lie within `eps`. Clusters are numbered in the order their first core
/// point appears, and each is expanded breadth-first in index order, so a
/// border point reachable from two clusters joins the earlier one.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    assert!(eps > 0.0 && min_pts >= 1, "dbscan needs eps > 0 and min_pts >= 1");
    let n = points.len();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = neighbors(points, i, eps);
        if seeds.len() < min_pts {
            continue;
        }
        let id = next;
        next += 1;
        labels[i] = Some(id);
        let mut queue = std::collections::VecDeque::from(seeds);
        while let Some(j) = queue.pop_front() {
            if labels[j].is_none() {
                labels[j] = Some(id);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nb = neighbors(points, j, eps);
            if nb.len() >= min_pts {
                queue.extend(nb);
            }
        }
    }
    labels
}

/// Sorted distances from each point to its `k`-th nearest other point.
pub fn k_distances(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (0..points.len())
        .filter_map(|i| {
            let mut d: Vec<f64> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| dist(&points[i], &points[j]))
                .collect();
            d.sort_by(f64::total_cmp);
            d.get(k.max(1) - 1).copied()
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Picks `eps` at the knee of the sorted k-distance curve: the point
/// farthest from the chord joining its ends.
pub fn k_distance_eps(points: &[Vec<f64>], k: usize) -> Option<f64> {
    let d = k_distances(points, k);
    let (first, last) = (*d.first()?, *d.last()?);
    let m = d.len();
    if m < 3 || last <= first {
        return (last > 0.0).then_some(last);
    }
    let (x1, y1) = ((m - 1) as f64, last - first);
    let norm = (x1 * x1 + y1 * y1).sqrt();
    let knee = (0..m)
        .max_by(|&a, &b| {
            let da = (y1 * a as f64 - x1 * (d[a] - first)).abs() / norm;
            let db = (y1 * b as f64 - x1 * (d[b] - first)).abs() / norm;
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .expect("nonempty");
    let eps = d[knee];
    (eps > 0.0).then_some(eps).or((last > 0.0).then_some(last))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub axes: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub mean: Vec<f64>,
}

const POWER_MAX_ITERS: usize = 50_000;
const POWER_TOL: f64 = 1e-13;

fn mat_vec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn unit(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Dominant eigenpair of a symmetric positive semi-definite matrix.
fn power_iteration(a: &[Vec<f64>], rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    let d = a.len();
    let start: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let Some(mut v) = unit(start) else {
        return (0.0, vec![0.0; d]);
    };
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = mat_vec(a, &v);
        lambda = v.iter().zip(&w).map(|(x, y)| x * y).sum();
        let Some(next) = unit(w) else {
            return (0.0, vec![0.0; d]);
        };
        let delta = v.iter().zip(&next).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    let w = mat_vec(a, &v);
    lambda = lambda.max(v.iter().zip(&w).map(|(x, y)| x * y).sum());
    (lambda, v)
}

/// Flips `v` so its first non-negligible loading is positive.
fn orient(v: &mut [f64]) {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Projects points onto their top two principal directions.
///
/// Directions come from power iteration on the covariance matrix (fixed
/// start vector, deflation for the second axis). An axis whose variance is
/// negligible is returned as zeros, as are its coordinates.
pub fn pca2(points: &[Vec<f64>]) -> Projection {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for p in points {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; d]; d];
    for c in &centered {
        for i in 0..d {
            if c[i] == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i][j] += c[i] * c[j];
            }
        }
    }
    let denom = n.max(1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let negligible = |l: f64| l <= 1e-12 * trace.max(f64::MIN_POSITIVE) || l <= 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut axes = [vec![0.0; d], vec![0.0; d]];
    let mut eig = [0.0; 2];
    for k in 0..2 {
        let (l, mut v) = power_iteration(&cov, &mut rng);
        if negligible(l) {
            break;
        }
        orient(&mut v);
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= l * v[i] * v[j];
            }
        }
        eig[k] = l;
        axes[k] = v;
    }
    let coords = centered
        .iter()
        .map(|c| {
            let p = |a: &[f64]| c.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect();
    Projection {
        coords,
        axes,
        eigenvalues: eig,
        mean,
    }
}
