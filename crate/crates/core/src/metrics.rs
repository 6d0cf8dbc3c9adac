//! Trajectory and orientation error metrics. No alignment is applied:
//! estimates and truth are assumed to share their initial pose.

use std::fmt::Write as _;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quat::{UnitQuaternion, Vec3};

pub type Point = [f64; 2];

/// Sample-index tolerance used when matching time and distance windows.
const WINDOW_TOL: f64 = 1e-9;

/// `√(mean ‖eᵢ‖²)`.
pub fn rmse<E: AsRef<[f64]>>(errors: &[E]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Domain("rmse of an empty error list".into()));
    }
    let sum: f64 = errors
        .iter()
        .map(|e| e.as_ref().iter().map(|x| x * x).sum::<f64>())
        .sum();
    Ok((sum / errors.len() as f64).sqrt())
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("estimate has {a} points, truth has {b}")));
    }
    Ok(())
}

fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

/// Displacement error between index pairs `(i, j)`.
fn displacement_errors(est: &[Point], truth: &[Point], pairs: impl Iterator<Item = (usize, usize)>) -> Vec<Point> {
    pairs
        .map(|(i, j)| sub(&sub(&truth[j], &truth[i]), &sub(&est[j], &est[i])))
        .collect()
}

/// Absolute trajectory error: RMSE of point-wise differences.
pub fn ate(est: &[Point], truth: &[Point]) -> Result<f64> {
    same_len(est.len(), truth.len())?;
    let e: Vec<Point> = est.iter().zip(truth).map(|(a, b)| sub(b, a)).collect();
    rmse(&e)
}

/// Relative trajectory error over every window of `interval` seconds
/// (stride one sample). `None` when the trajectory is shorter than the
/// interval.
pub fn t_rte(est: &[Point], truth: &[Point], t: &[f64], interval: f64) -> Result<Option<f64>> {
    same_len(est.len(), truth.len())?;
    same_len(t.len(), truth.len())?;
    let mut pairs = Vec::new();
    let mut j = 0;
    for i in 0..t.len() {
        j = j.max(i);
        while j < t.len() && t[j] - t[i] < interval - WINDOW_TOL {
            j += 1;
        }
        if j == t.len() {
            break;
        }
        pairs.push((i, j));
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    rmse(&displacement_errors(est, truth, pairs.into_iter())).map(Some)
}

/// Relative trajectory error over windows in which the truth travels
/// `distance` metres of arc length. `None` when the path is too short.
pub fn d_rte(est: &[Point], truth: &[Point], distance: f64) -> Result<Option<f64>> {
    same_len(est.len(), truth.len())?;
    let arc = arc_length(truth);
    let mut pairs = Vec::new();
    let mut j = 0;
    for i in 0..arc.len() {
        j = j.max(i);
        while j < arc.len() && arc[j] - arc[i] < distance - WINDOW_TOL {
            j += 1;
        }
        if j == arc.len() {
            break;
        }
        pairs.push((i, j));
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    rmse(&displacement_errors(est, truth, pairs.into_iter())).map(Some)
}

/// Cumulative path length from the first point.
pub fn arc_length(p: &[Point]) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len());
    let mut s = 0.0;
    for (k, x) in p.iter().enumerate() {
        if k > 0 {
            let d = sub(x, &p[k - 1]);
            s += d[0].hypot(d[1]);
        }
        out.push(s);
    }
    out
}

/// RMSE of geodesic angles between estimated and true orientations.
pub fn orientation_rmse(est: &[UnitQuaternion], truth: &[UnitQuaternion]) -> Result<f64> {
    same_len(est.len(), truth.len())?;
    let e: Vec<[f64; 1]> = est.iter().zip(truth).map(|(a, b)| [a.angular_distance(b)]).collect();
    rmse(&e)
}

/// Fractions of errors with `‖eᵢ‖ ≤ k·√trace(Σᵢ)` for `k = 1, 2, 3`.
pub fn sigma_coverage(errors: &[Vec3], covariances: &[Matrix3<f64>]) -> Result<[f64; 3]> {
    if errors.len() != covariances.len() {
        return Err(Error::Shape(format!(
            "{} errors but {} covariances",
            errors.len(),
            covariances.len()
        )));
    }
    if errors.is_empty() {
        return Err(Error::Domain("coverage of an empty error list".into()));
    }
    let mut hits = [0usize; 3];
    for (e, c) in errors.iter().zip(covariances) {
        let n = e.norm();
        let s = c.trace().max(0.0).sqrt();
        for (k, h) in hits.iter_mut().enumerate() {
            if n <= (k + 1) as f64 * s {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / errors.len() as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Metres.
    pub ate: Option<f64>,
    pub t_rte: Option<f64>,
    /// Window of `t_rte`, seconds.
    pub t_rte_interval: f64,
    pub d_rte: Option<f64>,
    /// Window of `d_rte`, metres.
    pub d_rte_distance: f64,
    /// Radians.
    pub orient_rmse: Option<f64>,
    /// Fractions within 1σ, 2σ, 3σ.
    pub sigma_coverage: Option<[f64; 3]>,
    pub runtime_ms_per_100: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("bad metric report: {e}")))
    }

    pub fn table(&self) -> String {
        let f = |v: Option<f64>, unit: &str| match v {
            Some(x) => format!("{x:.4} {unit}"),
            None => "n/a".to_string(),
        };
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} value", "metric");
        let _ = writeln!(s, "{:<22} {}", "ATE", f(self.ate, "m"));
        let _ = writeln!(
            s,
            "{:<22} {}",
            format!("T-RTE ({} s)", self.t_rte_interval),
            f(self.t_rte, "m")
        );
        let _ = writeln!(
            s,
            "{:<22} {}",
            format!("D-RTE ({} m)", self.d_rte_distance),
            f(self.d_rte, "m")
        );
        let _ = writeln!(s, "{:<22} {}", "orientation RMSE", f(self.orient_rmse, "rad"));
        let cov = match self.sigma_coverage {
            Some(c) => format!("{:.3} / {:.3} / {:.3}", c[0], c[1], c[2]),
            None => "n/a".to_string(),
        };
        let _ = writeln!(s, "{:<22} {}", "coverage 1/2/3 sigma", cov);
        let _ = writeln!(s, "{:<22} {}", "runtime per 100", f(self.runtime_ms_per_100, "ms"));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[[3.0, 4.0]]).unwrap(), 5.0);
        assert!((rmse(&[[1.0, 0.0], [0.0, 1.0]]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(rmse(&[[0.0, 0.0]; 4]).unwrap(), 0.0);
        assert!(rmse::<[f64; 2]>(&[]).is_err());
    }

    #[test]
    fn ate_offsets() {
        let truth: Vec<Point> = (0..10).map(|i| [i as f64, 0.5 * i as f64]).collect();
        assert_eq!(ate(&truth, &truth).unwrap(), 0.0);
        let shifted: Vec<Point> = truth.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        assert!((ate(&shifted, &truth).unwrap() - 1.0).abs() < 1e-12);
        assert!(ate(&shifted[..3], &truth).is_err());
    }

    #[test]
    fn rte_ignores_constant_offset() {
        let t: Vec<f64> = (0..200).map(|i| i as f64 * 0.5).collect();
        let truth: Vec<Point> = t.iter().map(|&x| [x.sin() * 3.0, x * 0.7]).collect();
        let shifted: Vec<Point> = truth.iter().map(|p| [p[0] + 4.0, p[1] - 2.0]).collect();
        assert!(t_rte(&shifted, &truth, &t, 60.0).unwrap().unwrap() < 1e-12);
        assert!(d_rte(&shifted, &truth, 1.0).unwrap().unwrap() < 1e-12);
    }

    #[test]
    fn t_rte_rotated_toy() {
        // Two points one interval apart; the estimate is the truth rotated by
        // 180° about the origin, so the displacement error is twice the
        // true displacement.
        let truth = [[1.0, 2.0], [4.0, 6.0]];
        let est = [[-1.0, -2.0], [-4.0, -6.0]];
        let v = t_rte(&est, &truth, &[0.0, 60.0], 60.0).unwrap().unwrap();
        assert!((v - 10.0).abs() < 1e-12);
        assert_eq!(t_rte(&est, &truth, &[0.0, 59.0], 60.0).unwrap(), None);
    }

    #[test]
    fn d_rte_stationary_estimate() {
        let truth: Vec<Point> = (0..500).map(|i| [i as f64 * 0.01, 0.0]).collect();
        let est = vec![[0.0, 0.0]; 500];
        assert!((d_rte(&est, &truth, 1.0).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(d_rte(&est[..50], &truth[..50], 1.0).unwrap(), None);
    }

    #[test]
    fn coverage_thresholds() {
        let c = vec![Matrix3::identity() * (1.0 / 3.0); 4];
        assert_eq!(sigma_coverage(&[Vec3::zeros(); 4], &c).unwrap(), [1.0, 1.0, 1.0]);
        let e = vec![Vec3::new(2.5, 0.0, 0.0); 4];
        assert_eq!(sigma_coverage(&e, &c).unwrap(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn report_json_fixpoint() {
        let r = MetricReport {
            ate: Some(0.1 + 0.2),
            t_rte: None,
            t_rte_interval: 60.0,
            d_rte: Some(1.0 / 3.0),
            d_rte_distance: 1.0,
            orient_rmse: Some(0.123456789012345),
            sigma_coverage: Some([0.6, 0.9, 0.97]),
            runtime_ms_per_100: Some(12.5),
        };
        let s = r.to_json();
        let back = MetricReport::from_json(&s).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json(), s);
    }
}
