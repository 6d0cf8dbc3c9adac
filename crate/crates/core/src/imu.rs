use crate::error::{Error, Result};
use crate::quat::{UnitQuaternion, Vec3};

pub const STANDARD_GRAVITY: f64 = 9.80665;

/// World-frame gravity, z up.
pub fn gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, -STANDARD_GRAVITY)
}

/// One timestamped reading: accelerometer (m/s²), gyroscope (rad/s) and
/// magnetometer (µT), all in the device frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub accel: Vec3,
    pub gyro: Vec3,
    pub mag: Vec3,
}

impl ImuSample {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.accel.iter().all(|x| x.is_finite())
            && self.gyro.iter().all(|x| x.is_finite())
            && self.mag.iter().all(|x| x.is_finite())
    }
}

/// Time-indexed poses. Orientations are world-from-device.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub positions: Vec<Vec3>,
    pub orientations: Option<Vec<UnitQuaternion>>,
}

impl Trajectory {
    pub fn new(t: Vec<f64>, positions: Vec<Vec3>, orientations: Option<Vec<UnitQuaternion>>) -> Result<Self> {
        if positions.len() != t.len() {
            return Err(Error::Shape(format!(
                "{} timestamps but {} positions",
                t.len(),
                positions.len()
            )));
        }
        if let Some(q) = &orientations {
            if q.len() != t.len() {
                return Err(Error::Shape(format!(
                    "{} timestamps but {} orientations",
                    t.len(),
                    q.len()
                )));
            }
        }
        check_increasing(&t)?;
        Ok(Trajectory {
            t,
            positions,
            orientations,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn orientations(&self) -> Result<&[UnitQuaternion]> {
        self.orientations
            .as_deref()
            .ok_or_else(|| Error::Data("trajectory has no orientations".into()))
    }

    /// Planar (x, y) positions.
    pub fn xy(&self) -> Vec<[f64; 2]> {
        self.positions.iter().map(|p| [p.x, p.y]).collect()
    }
}

/// IMU stream plus optional ground truth, as stored in one dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub name: String,
    pub imu: Vec<ImuSample>,
    pub truth: Option<Trajectory>,
}

impl Recording {
    pub fn truth(&self) -> Result<&Trajectory> {
        self.truth
            .as_ref()
            .ok_or_else(|| Error::Data(format!("recording `{}` has no ground truth", self.name)))
    }
}

pub fn check_increasing(t: &[f64]) -> Result<()> {
    for (i, w) in t.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at index {} ({} then {})",
                i + 1,
                w[0],
                w[1]
            )));
        }
    }
    Ok(())
}

/// Mean sample period of a stream.
pub fn mean_dt(imu: &[ImuSample]) -> Result<f64> {
    if imu.len() < 2 {
        return Err(Error::Domain("need at least two samples for a sample period".into()));
    }
    Ok((imu[imu.len() - 1].t - imu[0].t) / (imu.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_rejects_bad_time() {
        let p = vec![Vec3::zeros(); 3];
        assert!(Trajectory::new(vec![0.0, 0.1, 0.2], p.clone(), None).is_ok());
        assert!(Trajectory::new(vec![0.0, 0.1, 0.1], p.clone(), None).is_err());
        assert!(Trajectory::new(vec![0.0, 0.1], p, None).is_err());
    }
}
