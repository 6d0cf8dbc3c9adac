use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Point = [f64; 2];

/// Shortfall allowed when a window length is compared against its target.
const TOL: f64 = 1e-9;

pub struct Pair {
    pub t: Vec<f64>,
    pub truth: Vec<Point>,
    pub est: Vec<Point>,
}

/// Random walk truth with irregular timestamps and a drifting estimate.
pub fn random_pair(seed: u64) -> Pair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(50..400);
    let mut t = vec![0.0];
    let mut truth = vec![[0.0, 0.0]];
    let mut est = vec![[0.0, 0.0]];
    for k in 1..n {
        t.push(t[k - 1] + rng.random_range(0.05..0.3));
        let step = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let p: Point = truth[k - 1];
        truth.push([p[0] + step[0], p[1] + step[1]]);
        let e: Point = est[k - 1];
        est.push([
            e[0] + step[0] * 1.05 + rng.random_range(-0.2..0.2),
            e[1] + step[1] * 0.97 + rng.random_range(-0.2..0.2),
        ]);
    }
    Pair { t, truth, est }
}

fn sq(v: Point) -> f64 {
    v[0] * v[0] + v[1] * v[1]
}

pub fn rmse(errors: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for e in errors {
        for x in e {
            total += x * x;
        }
    }
    (total / errors.len() as f64).sqrt()
}

pub fn ate(p: &Pair) -> f64 {
    let mut total = 0.0;
    for i in 0..p.t.len() {
        total += sq([p.est[i][0] - p.truth[i][0], p.est[i][1] - p.truth[i][1]]);
    }
    (total / p.t.len() as f64).sqrt()
}

fn relative(p: &Pair, pairs: &[(usize, usize)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &(i, j) in pairs {
        let dt = [p.truth[j][0] - p.truth[i][0], p.truth[j][1] - p.truth[i][1]];
        let de = [p.est[j][0] - p.est[i][0], p.est[j][1] - p.est[i][1]];
        total += sq([dt[0] - de[0], dt[1] - de[1]]);
    }
    Some((total / pairs.len() as f64).sqrt())
}

/// Each start paired with the first sample at least `interval` later.
pub fn t_rte(p: &Pair, interval: f64) -> Option<f64> {
    let mut pairs = Vec::new();
    for i in 0..p.t.len() {
        if let Some(j) = (i..p.t.len()).find(|&j| p.t[j] - p.t[i] >= interval - TOL) {
            pairs.push((i, j));
        }
    }
    relative(p, &pairs)
}

/// Each start paired with the first sample after travelling `distance`.
pub fn d_rte(p: &Pair, distance: f64) -> Option<f64> {
    let mut pairs = Vec::new();
    for i in 0..p.t.len() {
        let mut travelled = 0.0;
        for j in i..p.t.len() {
            if j > i {
                travelled += sq([p.truth[j][0] - p.truth[j - 1][0], p.truth[j][1] - p.truth[j - 1][1]]).sqrt();
            }
            if travelled >= distance - TOL {
                pairs.push((i, j));
                break;
            }
        }
    }
    relative(p, &pairs)
}
