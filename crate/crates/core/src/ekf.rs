//! Quaternion EKF: gyro propagation on the manifold, absolute-orientation
//! measurement updates with an identity measurement model.

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::ImuSample;
use crate::orient::OrientationEstimate;
use crate::quat::{UnitQuaternion, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EkfState {
    pub q: UnitQuaternion,
    /// Tangent-space covariance, rad².
    pub p: Matrix3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfConfig {
    /// Process noise added to `P` every step, rad², row-major.
    pub process_noise: [[f64; 3]; 3],
    /// Sample period, s.
    pub dt: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        EkfConfig::isotropic(0.005, 0.01)
    }
}

impl EkfConfig {
    pub fn isotropic(q: f64, dt: f64) -> Self {
        EkfConfig {
            process_noise: [[q, 0.0, 0.0], [0.0, q, 0.0], [0.0, 0.0, q]],
            dt,
        }
    }

    pub fn q(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.process_noise[r][c])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!(
                "EKF sample period must be positive, got {}",
                self.dt
            )));
        }
        let q = self.q();
        if (q - q.transpose()).abs().max() > 1e-12 || q.cholesky().is_none() {
            return Err(Error::Config(
                "EKF process noise must be symmetric positive definite".into(),
            ));
        }
        Ok(())
    }
}

/// `x ← x ⊞ ω·Δt` (body-frame increment), `P ← P + Q`.
pub fn propagate(state: &EkfState, omega: &Vec3, cfg: &EkfConfig) -> EkfState {
    propagate_dt(state, omega, cfg.dt, &cfg.q())
}

fn propagate_dt(state: &EkfState, omega: &Vec3, dt: f64, q: &Matrix3<f64>) -> EkfState {
    EkfState {
        q: state.q.boxplus(&(omega * dt)),
        p: state.p + q,
    }
}

/// `K = P(P + R)⁻¹`, `x ← x ⊞ K(q_meas ⊟ x)`, `P ← (I − K)P`, then `P` is
/// symmetrized and its eigenvalues clamped at zero. A singular `P + R`
/// leaves the state unchanged.
pub fn measurement_update(state: &EkfState, meas: &OrientationEstimate) -> EkfState {
    let s = state.p + meas.cov;
    let Some(s_inv) = s.try_inverse().filter(|m| m.iter().all(|x| x.is_finite())) else {
        log::warn!("singular innovation covariance; measurement update skipped");
        return *state;
    };
    let k = state.p * s_inv;
    let innovation = meas.q.boxminus(&state.q);
    let q = state.q.boxplus(&(k * innovation));
    let p = clamp_psd(&((Matrix3::identity() - k) * state.p));
    EkfState { q, p }
}

/// Symmetrizes and clamps negative eigenvalues to zero.
pub fn clamp_psd(p: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0)));
    let out = eig.eigenvectors * d * eig.eigenvectors.transpose();
    (out + out.transpose()) * 0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub ekf: EkfConfig,
    /// Apply a measurement every this many samples; 0 disables updates.
    pub update_every: usize,
    /// Initial covariance scale when the initial orientation is given.
    pub p0_known: f64,
    /// Initial covariance scale when starting from the first measurement.
    pub p0_from_measurement: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            ekf: EkfConfig::default(),
            update_every: 10,
            p0_known: 0.1,
            p0_from_measurement: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutput {
    pub orientations: Vec<UnitQuaternion>,
    pub covariances: Vec<Matrix3<f64>>,
}

/// Runs the filter over a stream.
///
/// `measurements[k]` is the orientation estimate available at sample `k`;
/// it is consumed every `update_every` samples. Propagation uses the
/// timestamp differences of the stream. Without `initial`, the filter starts
/// from the first measurement.
pub fn run_filter(
    imu: &[ImuSample],
    measurements: &[OrientationEstimate],
    cfg: &FilterConfig,
    initial: Option<UnitQuaternion>,
) -> Result<FilterOutput> {
    cfg.ekf.validate()?;
    if imu.is_empty() {
        return Err(Error::Domain("empty IMU stream".into()));
    }
    if cfg.update_every > 0 && measurements.len() != imu.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} measurements",
            imu.len(),
            measurements.len()
        )));
    }
    let mut state = match initial {
        Some(q) => EkfState {
            q,
            p: Matrix3::identity() * cfg.p0_known,
        },
        None => EkfState {
            q: measurements
                .first()
                .ok_or_else(|| Error::Domain("no initial orientation and no measurements".into()))?
                .q,
            p: Matrix3::identity() * cfg.p0_from_measurement,
        },
    };
    let qn = cfg.ekf.q();
    let mut out = FilterOutput {
        orientations: Vec::with_capacity(imu.len()),
        covariances: Vec::with_capacity(imu.len()),
    };
    for (k, s) in imu.iter().enumerate() {
        if k > 0 {
            state = propagate_dt(&state, &s.gyro, s.t - imu[k - 1].t, &qn);
        }
        if cfg.update_every > 0 && k % cfg.update_every == 0 {
            state = measurement_update(&state, &measurements[k]);
        }
        if !state.q.is_finite() || state.p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Filter {
                step: k,
                msg: "state became non-finite".into(),
            });
        }
        out.orientations.push(state.q);
        out.covariances.push(state.p);
    }
    Ok(out)
}
