use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::path::SimPath;
use crate::error::{Error, Result};
use crate::imu::{gravity, ImuSample};
use crate::quat::Vec3;

/// Sensor imperfections. Noise values are per-sample standard deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    pub rate_hz: f64,
    pub gyro_noise: f64,
    /// Fixed gyro bias, rad/s.
    pub gyro_bias: [f64; 3],
    /// Std of an extra per-recording random gyro bias, rad/s.
    pub gyro_bias_spread: f64,
    pub accel_noise: f64,
    pub accel_bias: [f64; 3],
    pub accel_bias_spread: f64,
    pub mag_noise: f64,
    /// Hard-iron offset, µT.
    pub hard_iron: [f64; 3],
    /// Soft-iron matrix, row-major.
    pub soft_iron: [[f64; 3]; 3],
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            rate_hz: 100.0,
            gyro_noise: 0.0,
            gyro_bias: [0.0; 3],
            gyro_bias_spread: 0.0,
            accel_noise: 0.0,
            accel_bias: [0.0; 3],
            accel_bias_spread: 0.0,
            mag_noise: 0.0,
            hard_iron: [0.0; 3],
            soft_iron: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }
}

impl SensorModel {
    /// A phone-grade sensor with magnetometer distortion.
    pub fn phone() -> Self {
        SensorModel {
            rate_hz: 100.0,
            gyro_noise: 0.005,
            gyro_bias: [0.0; 3],
            gyro_bias_spread: 0.004,
            accel_noise: 0.05,
            accel_bias: [0.0; 3],
            accel_bias_spread: 0.02,
            mag_noise: 0.5,
            hard_iron: [12.0, -7.0, 20.0],
            soft_iron: [[1.08, 0.04, -0.02], [0.04, 0.95, 0.03], [-0.02, 0.03, 1.02]],
        }
    }

    pub fn soft_iron_matrix(&self) -> nalgebra::Matrix3<f64> {
        nalgebra::Matrix3::from_fn(|r, c| self.soft_iron[r][c])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "sample rate must be positive, got {}",
                self.rate_hz
            )));
        }
        if self.soft_iron_matrix().determinant().abs() < 1e-9 {
            return Err(Error::Config("soft-iron matrix must be invertible".into()));
        }
        Ok(())
    }
}

/// Earth field plus smooth position-keyed disturbances, world frame, µT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagneticMap {
    pub base: [f64; 3],
    pub bumps: Vec<MagBump>,
    /// Bound on the disturbance norm, µT.
    pub max_perturbation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagBump {
    pub center: [f64; 2],
    pub radius: f64,
    pub amplitude: [f64; 3],
}

pub const EARTH_FIELD: [f64; 3] = [22.0, 0.0, -45.0];

impl Default for MagneticMap {
    fn default() -> Self {
        MagneticMap::uniform()
    }
}

impl MagneticMap {
    /// Earth field only.
    pub fn uniform() -> Self {
        MagneticMap {
            base: EARTH_FIELD,
            bumps: Vec::new(),
            max_perturbation: 0.0,
        }
    }

    /// `count` Gaussian bumps scattered over a disc of radius `extent`.
    pub fn random(seed: u64, count: usize, extent: f64, max_perturbation: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_6770);
        let bumps = (0..count)
            .map(|_| {
                let r = extent * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let dir = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
                .normalize();
                let amp = dir * rng.random_range(0.3..1.0) * max_perturbation;
                MagBump {
                    center: [r * a.cos(), r * a.sin()],
                    radius: rng.random_range(2.0..6.0),
                    amplitude: [amp.x, amp.y, amp.z],
                }
            })
            .collect();
        MagneticMap {
            base: EARTH_FIELD,
            bumps,
            max_perturbation,
        }
    }

    pub fn base(&self) -> Vec3 {
        Vec3::from(self.base)
    }

    pub fn perturbation(&self, p: &Vec3) -> Vec3 {
        let mut d = Vec3::zeros();
        for b in &self.bumps {
            let dx = p.x - b.center[0];
            let dy = p.y - b.center[1];
            let w = (-(dx * dx + dy * dy) / (2.0 * b.radius * b.radius)).exp();
            d += Vec3::from(b.amplitude) * w;
        }
        let n = d.norm();
        if n > self.max_perturbation {
            d *= self.max_perturbation / n;
        }
        d
    }

    pub fn field(&self, p: &Vec3) -> Vec3 {
        self.base() + self.perturbation(p)
    }
}

/// Device-frame IMU streams for a path.
///
/// `accel = Rᵀ(a_world − g) + bias + noise`, `gyro = ω + bias + noise` with
/// `ω_k = (q_k ⊟ q_{k−1}) / Δt`, and
/// `mag = soft_iron · Rᵀ B(x) + hard_iron + noise`.
pub fn synthesize_imu(path: &SimPath, sensor: &SensorModel, map: &MagneticMap, seed: u64) -> Result<Vec<ImuSample>> {
    sensor.validate()?;
    let traj = &path.trajectory;
    let q = traj.orientations()?;
    let n = traj.len();
    if n < 2 {
        return Err(Error::Domain("need at least two poses to synthesize rates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696d_7573);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let gauss3 = |rng: &mut ChaCha8Rng, s: f64| -> Vec3 {
        if s == 0.0 {
            return Vec3::zeros();
        }
        Vec3::new(std_normal.sample(rng), std_normal.sample(rng), std_normal.sample(rng)) * s
    };
    let gyro_bias = Vec3::from(sensor.gyro_bias) + gauss3(&mut rng, sensor.gyro_bias_spread);
    let accel_bias = Vec3::from(sensor.accel_bias) + gauss3(&mut rng, sensor.accel_bias_spread);
    let soft = sensor.soft_iron_matrix();
    let hard = Vec3::from(sensor.hard_iron);
    let g = gravity();

    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let rate = if k == 0 {
            q[1].boxminus(&q[0]) / (traj.t[1] - traj.t[0])
        } else {
            q[k].boxminus(&q[k - 1]) / (traj.t[k] - traj.t[k - 1])
        };
        let accel = q[k].inverse_rotate(&(path.accel_world[k] - g)) + accel_bias + gauss3(&mut rng, sensor.accel_noise);
        let gyro = rate + gyro_bias + gauss3(&mut rng, sensor.gyro_noise);
        let b = map.field(&traj.positions[k]);
        let mag = soft * q[k].inverse_rotate(&b) + hard + gauss3(&mut rng, sensor.mag_noise);
        out.push(ImuSample {
            t: traj.t[k],
            accel,
            gyro,
            mag,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imu::STANDARD_GRAVITY;
    use crate::sim::path::{gen_trajectory, Profile};

    #[test]
    fn static_noiseless_reads_gravity_only() {
        let path = gen_trajectory(1, 2.0, &Profile::Static, 100.0).unwrap();
        let imu = synthesize_imu(&path, &SensorModel::default(), &MagneticMap::uniform(), 0).unwrap();
        let q = path.trajectory.orientations().unwrap()[0];
        let expect = q.inverse_rotate(&Vec3::new(0.0, 0.0, STANDARD_GRAVITY));
        for s in &imu {
            assert!((s.accel - expect).norm() < 1e-12);
            assert!(s.gyro.norm() < 1e-12);
        }
    }

    #[test]
    fn perturbation_is_bounded() {
        let map = MagneticMap::random(4, 30, 20.0, 8.0);
        for i in 0..200 {
            let p = Vec3::new((i as f64 * 0.37).sin() * 20.0, (i as f64 * 0.91).cos() * 20.0, 0.0);
            assert!(map.perturbation(&p).norm() <= 8.0 + 1e-12);
        }
        assert!(map.perturbation(&Vec3::new(1e4, 1e4, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn singular_soft_iron_rejected() {
        let s = SensorModel {
            soft_iron: [[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            ..SensorModel::default()
        };
        assert!(s.validate().is_err());
    }
}
