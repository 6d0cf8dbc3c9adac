//! Synthetic ground truth, IMU synthesis, magnetometer calibration and
//! dataset files.

mod dataset;
mod magcal;
mod path;
mod schedule;
mod sensor;

pub use dataset::{
    csv_files, load_dataset, load_recording, manifest_files, smooth_trajectory, write_recording, IMU_COLUMNS,
    MAX_QUAT_DRIFT, TRUTH_COLUMNS,
};
pub use magcal::{apply_mag_calibration, calibrate_stream, fit_mag_ellipsoid, MagCalibration};
pub use path::{gen_trajectory, Profile, SimPath, WalkParams};
pub use schedule::SmoothSchedule;
pub use sensor::{synthesize_imu, MagBump, MagneticMap, SensorModel, EARTH_FIELD};
