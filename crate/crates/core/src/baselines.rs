//! Classical reference estimators: gyro integration, strapdown dead
//! reckoning, a Madgwick-style complementary filter and step-counting PDR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{gravity, mean_dt, ImuSample};
use crate::quat::{UnitQuaternion, Vec3};
use crate::signal::{find_peaks, Butterworth2};

/// `q_k = q_{k−1} ⊞ ω_k Δt_k`, starting from `q0` at the first sample.
pub fn gyro_integrate(imu: &[ImuSample], q0: UnitQuaternion) -> Vec<UnitQuaternion> {
    let mut out = Vec::with_capacity(imu.len());
    let mut q = q0;
    for (k, s) in imu.iter().enumerate() {
        if k > 0 {
            q = q.boxplus(&(s.gyro * (s.t - imu[k - 1].t)));
        }
        out.push(q);
    }
    out
}

/// Rotates specific force to the world frame, restores gravity and
/// integrates twice with the trapezoidal rule.
pub fn dead_reckon(imu: &[ImuSample], orientations: &[UnitQuaternion], p0: Vec3, v0: Vec3) -> Result<Vec<Vec3>> {
    if imu.len() != orientations.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} orientations",
            imu.len(),
            orientations.len()
        )));
    }
    let g = gravity();
    let mut out = Vec::with_capacity(imu.len());
    let (mut p, mut v) = (p0, v0);
    let mut a_prev = Vec3::zeros();
    for (k, (s, q)) in imu.iter().zip(orientations).enumerate() {
        let a = q.rotate(&s.accel) + g;
        if k > 0 {
            let dt = s.t - imu[k - 1].t;
            let v_next = v + (a_prev + a) * (0.5 * dt);
            p += (v + v_next) * (0.5 * dt);
            v = v_next;
        }
        a_prev = a;
        out.push(p);
    }
    Ok(out)
}

/// Gyro step followed by a partial rotation toward the attitude whose
/// predicted "up" matches the measured specific force.
///
/// The correction is a slerp with weight `gain` toward `q' ⊗ r`, where `r`
/// is the shortest rotation carrying the measured direction onto the
/// predicted one (device frame). It only tilts the estimate, so yaw is
/// unobservable. Skipped when `gain == 0` or the accelerometer reads zero.
pub fn madgwick_update(q: &UnitQuaternion, sample: &ImuSample, dt: f64, gain: f64) -> UnitQuaternion {
    let pred = q.boxplus(&(sample.gyro * dt));
    if gain <= 0.0 || sample.accel.norm() == 0.0 {
        return pred;
    }
    let up = pred.inverse_rotate(&Vec3::z());
    match UnitQuaternion::rotation_between(&sample.accel, &up) {
        Ok(r) => pred.boxplus(&(r.log() * (2.0 * gain.min(1.0)))),
        Err(_) => pred,
    }
}

pub fn madgwick_filter(imu: &[ImuSample], q0: UnitQuaternion, gain: f64) -> Vec<UnitQuaternion> {
    let mut out = Vec::with_capacity(imu.len());
    let mut q = q0;
    for (k, s) in imu.iter().enumerate() {
        if k > 0 {
            q = madgwick_update(&q, s, s.t - imu[k - 1].t, gain);
        }
        out.push(q);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdrConfig {
    /// Metres per step.
    pub stride: f64,
    /// Low-pass cutoff applied to the accelerometer magnitude, Hz.
    pub cutoff_hz: f64,
    /// Minimum peak prominence, m/s².
    pub prominence: f64,
    /// Minimum time between steps, s.
    pub min_interval: f64,
}

impl Default for PdrConfig {
    fn default() -> Self {
        PdrConfig {
            stride: 0.67,
            cutoff_hz: 3.0,
            prominence: 1.0,
            min_interval: 0.3,
        }
    }
}

impl PdrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stride > 0.0) || !(self.min_interval > 0.0) {
            return Err(Error::Config("PDR stride and step interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdrResult {
    /// Sample indices of detected steps.
    pub steps: Vec<usize>,
    /// Position at every sample.
    pub positions: Vec<Vec3>,
}

/// Sample indices of steps in a stream.
pub fn detect_steps(imu: &[ImuSample], cfg: &PdrConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if imu.len() < 3 {
        return Ok(Vec::new());
    }
    let rate = 1.0 / mean_dt(imu)?;
    let mag: Vec<f64> = imu.iter().map(|s| s.accel.norm()).collect();
    let smooth = Butterworth2::low_pass(cfg.cutoff_hz, rate)?.filter(&mag);
    let distance = (cfg.min_interval * rate).round().max(1.0) as usize;
    Ok(find_peaks(&smooth, cfg.prominence, distance))
}

/// Pedestrian dead reckoning: one `stride` along `heading[k]` (yaw, rad) at
/// every detected step `k`.
pub fn pdr(imu: &[ImuSample], heading: &[f64], cfg: &PdrConfig) -> Result<PdrResult> {
    if heading.len() != imu.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} headings",
            imu.len(),
            heading.len()
        )));
    }
    let steps = detect_steps(imu, cfg)?;
    let positions = pdr_positions(imu.len(), &steps, heading, cfg.stride);
    Ok(PdrResult { steps, positions })
}

/// Positions of samples `0..n`; `heading` needs at least `n` entries.
pub fn pdr_positions(n: usize, steps: &[usize], heading: &[f64], stride: f64) -> Vec<Vec3> {
    assert!(heading.len() >= n, "{} headings for {n} samples", heading.len());
    let mut out = Vec::with_capacity(n);
    let mut p = Vec3::zeros();
    let mut next = steps.iter().peekable();
    for (k, &psi) in heading.iter().enumerate().take(n) {
        while next.peek().is_some_and(|&&s| s == k) {
            p += Vec3::new(psi.cos(), psi.sin(), 0.0) * stride;
            next.next();
        }
        out.push(p);
    }
    out
}
