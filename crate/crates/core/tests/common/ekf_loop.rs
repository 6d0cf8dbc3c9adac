use inertial_odometry::baselines::gyro_integrate;
use inertial_odometry::ekf::{run_filter, EkfConfig, FilterConfig};
use inertial_odometry::imu::ImuSample;
use inertial_odometry::orient::OrientationEstimate;
use inertial_odometry::quat::{UnitQuaternion, Vec3};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const RATE_HZ: f64 = 100.0;
pub const DURATION: f64 = 60.0;
pub const GYRO_BIAS: f64 = 0.01;
pub const GYRO_NOISE: f64 = 0.005;
pub const MEAS_SIGMA: f64 = 0.05;
/// Measurements at 10 Hz.
pub const UPDATE_EVERY: usize = 10;
pub const PROCESS_NOISE: f64 = 3e-6;
/// The initial orientation is known exactly.
pub const INITIAL_COV: f64 = 1e-4;

#[derive(Debug)]
pub struct ClosedLoop {
    pub fused_rmse: f64,
    /// Gyro-only angular error at the final sample.
    pub gyro_final: f64,
    pub fused_p95: f64,
    pub meas_p95: f64,
}

/// Mostly yaw with small tilts, as when walking.
fn rate(t: f64) -> Vec3 {
    Vec3::new(
        0.05 * (0.7 * t).sin(),
        0.05 * (0.4 * t).cos(),
        0.2 + 0.3 * (0.2 * t).sin(),
    )
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> Vec3 {
    let n = Normal::new(0.0, sigma).unwrap();
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

fn p95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((v.len() as f64) * 0.95).ceil() as usize - 1]
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Biased, noisy gyro plus noisy absolute orientations fused by the EKF.
pub fn run(seed: u64) -> ClosedLoop {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = 1.0 / RATE_HZ;
    let n = (DURATION * RATE_HZ).round() as usize + 1;
    let bias = Vec3::from_fn(|_, _| if rng.random::<bool>() { GYRO_BIAS } else { -GYRO_BIAS });
    let q0 = UnitQuaternion::exp(&gaussian(&mut rng, 1.0)).unwrap();

    let mut truth: Vec<UnitQuaternion> = Vec::with_capacity(n);
    let mut imu = Vec::with_capacity(n);
    let mut meas = Vec::with_capacity(n);
    let r = Matrix3::identity() * MEAS_SIGMA * MEAS_SIGMA;
    for k in 0..n {
        let t = k as f64 * dt;
        let w = rate(t);
        let q = if k == 0 { q0 } else { truth[k - 1].boxplus(&(w * dt)) };
        truth.push(q);
        imu.push(ImuSample {
            t,
            accel: Vec3::zeros(),
            gyro: w + bias + gaussian(&mut rng, GYRO_NOISE),
            mag: Vec3::zeros(),
        });
        meas.push(OrientationEstimate {
            q: q.boxplus(&gaussian(&mut rng, MEAS_SIGMA)),
            cov: r,
        });
    }

    let cfg = FilterConfig {
        ekf: EkfConfig::isotropic(PROCESS_NOISE, dt),
        update_every: UPDATE_EVERY,
        p0_known: INITIAL_COV,
        ..FilterConfig::default()
    };
    let fused = run_filter(&imu, &meas, &cfg, Some(q0)).unwrap().orientations;
    let gyro = gyro_integrate(&imu, q0);

    let fused_err: Vec<f64> = fused.iter().zip(&truth).map(|(a, b)| a.angular_distance(b)).collect();
    let meas_err: Vec<f64> = (0..n)
        .step_by(UPDATE_EVERY)
        .map(|k| meas[k].q.angular_distance(&truth[k]))
        .collect();
    ClosedLoop {
        fused_rmse: rms(&fused_err),
        gyro_final: gyro[n - 1].angular_distance(&truth[n - 1]),
        fused_p95: p95(fused_err),
        meas_p95: p95(meas_err),
    }
}
