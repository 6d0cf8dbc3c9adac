use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::ImuSample;
use crate::quat::Vec3;

/// Hard-iron offset and soft-iron correction: `B_cal = matrix · (B_raw − offset)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagCalibration {
    pub offset: [f64; 3],
    pub matrix: [[f64; 3]; 3],
}

impl Default for MagCalibration {
    fn default() -> Self {
        MagCalibration::identity()
    }
}

impl MagCalibration {
    pub fn identity() -> Self {
        MagCalibration {
            offset: [0.0; 3],
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn offset(&self) -> Vec3 {
        Vec3::from(self.offset)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.matrix[r][c])
    }

    pub fn apply(&self, raw: &Vec3) -> Vec3 {
        self.matrix() * (raw - self.offset())
    }
}

pub fn apply_mag_calibration(raw: &Vec3, cal: &MagCalibration) -> Vec3 {
    cal.apply(raw)
}

/// Calibrates the magnetometer channel of every sample in place.
pub fn calibrate_stream(imu: &mut [ImuSample], cal: &MagCalibration) {
    let m = cal.matrix();
    let o = cal.offset();
    for s in imu {
        s.mag = m * (s.mag - o);
    }
}

/// Least-squares ellipsoid fit.
///
/// Fits `xᵀAx + 2gᵀx = 1` to the samples, recovers the centre `c = −A⁻¹g` and
/// the shape `M = A / (1 + cᵀAc)`, so that `(x−c)ᵀM(x−c) = 1`. The returned
/// matrix is `r·M^{1/2}`, which maps the ellipsoid onto a sphere of radius
/// `r`. Without a target radius, `r` is the radius of the sphere with the
/// ellipsoid's volume.
pub fn fit_mag_ellipsoid(samples: &[Vec3], target_radius: Option<f64>) -> Result<MagCalibration> {
    if samples.len() < 9 {
        return Err(Error::Calibration(format!(
            "ellipsoid fit needs at least 9 samples, got {}",
            samples.len()
        )));
    }
    // Centre and scale the data for conditioning.
    let n = samples.len() as f64;
    let mean = samples.iter().fold(Vec3::zeros(), |a, s| a + s) / n;
    let scale = (samples.iter().map(|s| (s - mean).norm_squared()).sum::<f64>() / n).sqrt();
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Calibration("samples are all identical or non-finite".into()));
    }
    let rows: Vec<[f64; 9]> = samples
        .iter()
        .map(|s| {
            let p = (s - mean) / scale;
            [
                p.x * p.x,
                p.y * p.y,
                p.z * p.z,
                2.0 * p.x * p.y,
                2.0 * p.x * p.z,
                2.0 * p.y * p.z,
                2.0 * p.x,
                2.0 * p.y,
                2.0 * p.z,
            ]
        })
        .collect();
    let d = DMatrix::from_fn(rows.len(), 9, |r, c| rows[r][c]);
    let ones = DVector::from_element(rows.len(), 1.0);
    let svd = d.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::Calibration(
            "degenerate magnetometer coverage; rotate the device through more orientations".into(),
        ));
    }
    let v = svd
        .solve(&ones, 1e-12 * smax)
        .map_err(|e| Error::Calibration(format!("least-squares solve failed: {e}")))?;

    let a = Matrix3::new(v[0], v[3], v[4], v[3], v[1], v[5], v[4], v[5], v[2]);
    let g = Vec3::new(v[6], v[7], v[8]);
    let a_inv = a
        .try_inverse()
        .ok_or_else(|| Error::Calibration("singular quadric; rotate the device through more orientations".into()))?;
    let c = -(a_inv * g);
    let k = 1.0 + c.dot(&(a * c));
    let shape = a / k;
    let eig = SymmetricEigen::new(shape);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Calibration(
            "fitted quadric is not an ellipsoid; rotate the device through more orientations".into(),
        ));
    }
    let sqrt_shape =
        eig.eigenvectors * Matrix3::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * eig.eigenvectors.transpose();
    // Undo the normalisation: shape in raw units is M / scale².
    let sqrt_raw = sqrt_shape / scale;
    let det = eig.eigenvalues.iter().product::<f64>() / scale.powi(6);
    let radius = match target_radius {
        Some(r) if r > 0.0 && r.is_finite() => r,
        Some(r) => return Err(Error::Calibration(format!("target radius must be positive, got {r}"))),
        None => det.powf(-1.0 / 6.0),
    };
    let m = sqrt_raw * radius;
    let offset = mean + c * scale;
    Ok(MagCalibration {
        offset: [offset.x, offset.y, offset.z],
        matrix: [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ],
    })
}
