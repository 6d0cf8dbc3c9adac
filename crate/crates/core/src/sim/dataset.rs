//! One CSV file per recording:
//! `t,ax,ay,az,gx,gy,gz,mx,my,mz,qw,qx,qy,qz,px,py,pz`.
//! The ground-truth columns (`qw..pz`) may be omitted for inference-only files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imu::{check_increasing, ImuSample, Recording, Trajectory};
use crate::quat::{UnitQuaternion, Vec3};
use crate::signal::Butterworth2;

pub const IMU_COLUMNS: [&str; 10] = ["t", "ax", "ay", "az", "gx", "gy", "gz", "mx", "my", "mz"];
pub const TRUTH_COLUMNS: [&str; 7] = ["qw", "qx", "qy", "qz", "px", "py", "pz"];

/// Largest quaternion norm drift that is silently renormalized on load.
pub const MAX_QUAT_DRIFT: f64 = 1e-3;

pub fn write_recording(path: &Path, rec: &Recording) -> Result<()> {
    if let Some(truth) = &rec.truth {
        if truth.len() != rec.imu.len() {
            return Err(Error::Shape(format!(
                "{} IMU samples but {} truth poses",
                rec.imu.len(),
                truth.len()
            )));
        }
        truth.orientations()?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<&str> = IMU_COLUMNS.to_vec();
    if rec.truth.is_some() {
        header.extend(TRUTH_COLUMNS);
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    let mut row: Vec<String> = Vec::with_capacity(17);
    for (k, s) in rec.imu.iter().enumerate() {
        row.clear();
        row.push(fmt(s.t));
        row.extend(s.accel.iter().chain(s.gyro.iter()).chain(s.mag.iter()).map(|&x| fmt(x)));
        if let Some(truth) = &rec.truth {
            let q = truth.orientations.as_ref().unwrap()[k].to_array();
            row.extend(q.iter().map(|&x| fmt(x)));
            row.extend(truth.positions[k].iter().map(|&x| fmt(x)));
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Shortest text that parses back to the same bits.
fn fmt(x: f64) -> String {
    format!("{x:?}")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.display().to_string(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

pub fn load_recording(path: &Path) -> Result<Recording> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let pstr = path.display().to_string();
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |col: &str| header.iter().position(|h| h == col);
    let mut imu_idx = [0usize; 10];
    for (slot, col) in imu_idx.iter_mut().zip(IMU_COLUMNS) {
        *slot = find(col).ok_or_else(|| Error::MissingColumn {
            path: pstr.clone(),
            column: col.into(),
        })?;
    }
    let truth_found: Vec<Option<usize>> = TRUTH_COLUMNS.iter().map(|c| find(c)).collect();
    let has_truth = truth_found.iter().any(Option::is_some);
    if has_truth {
        if let Some(k) = truth_found.iter().position(Option::is_none) {
            return Err(Error::MissingColumn {
                path: pstr,
                column: TRUTH_COLUMNS[k].into(),
            });
        }
    }
    let truth_idx: Vec<usize> = truth_found.into_iter().flatten().collect();

    let mut imu = Vec::new();
    let mut q = Vec::new();
    let mut p = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|x| x.line() as usize).unwrap_or(0);
        let get = |i: usize, col: &str| -> Result<f64> {
            let raw = rec.get(i).ok_or_else(|| Error::Parse {
                path: pstr.clone(),
                line,
                msg: format!("missing field `{col}`"),
            })?;
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                path: pstr.clone(),
                line,
                msg: format!("column `{col}`: cannot parse `{raw}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: pstr.clone(),
                    line,
                    msg: format!("column `{col}`: non-finite value"),
                });
            }
            Ok(v)
        };
        let mut v = [0.0; 10];
        for (k, col) in IMU_COLUMNS.iter().enumerate() {
            v[k] = get(imu_idx[k], col)?;
        }
        imu.push(ImuSample {
            t: v[0],
            accel: Vec3::new(v[1], v[2], v[3]),
            gyro: Vec3::new(v[4], v[5], v[6]),
            mag: Vec3::new(v[7], v[8], v[9]),
        });
        if has_truth {
            let mut g = [0.0; 7];
            for (k, col) in TRUTH_COLUMNS.iter().enumerate() {
                g[k] = get(truth_idx[k], col)?;
            }
            q.push(
                UnitQuaternion::from_stored([g[0], g[1], g[2], g[3]], MAX_QUAT_DRIFT).map_err(|e| Error::Parse {
                    path: pstr.clone(),
                    line,
                    msg: e.to_string(),
                })?,
            );
            p.push(Vec3::new(g[4], g[5], g[6]));
        }
    }
    let t: Vec<f64> = imu.iter().map(|s| s.t).collect();
    check_increasing(&t).map_err(|e| Error::Data(format!("{pstr}: {e}")))?;
    let truth = if has_truth {
        Some(Trajectory::new(t, p, Some(q))?)
    } else {
        None
    };
    Ok(Recording { name, imu, truth })
}

/// Loads a single file, every `.csv` file of a directory in name order, or
/// the files listed in a `.txt` manifest.
pub fn load_dataset(path: &Path) -> Result<Vec<Recording>> {
    if path.is_dir() {
        csv_files(path)?.iter().map(|p| load_recording(p)).collect()
    } else if path.extension().is_some_and(|x| x == "txt") {
        manifest_files(path)?.iter().map(|p| load_recording(p)).collect()
    } else {
        Ok(vec![load_recording(path)?])
    }
}

/// Paths listed in a manifest, one per line, relative to the manifest's
/// directory. Blank lines and lines starting with `#` are skipped.
pub fn manifest_files(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let files: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    if files.is_empty() {
        return Err(Error::Data(format!("manifest {} lists no files", path.display())));
    }
    Ok(files)
}

pub fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .csv files in {}", dir.display())));
    }
    Ok(files)
}

/// Zero-phase low-pass of ground-truth positions, for ingested real data.
pub fn smooth_trajectory(traj: &Trajectory, cutoff_hz: f64) -> Result<Trajectory> {
    if traj.len() < 2 {
        return Ok(traj.clone());
    }
    let rate = (traj.len() - 1) as f64 / (traj.t[traj.len() - 1] - traj.t[0]);
    let f = Butterworth2::low_pass(cutoff_hz, rate)?;
    let axis = |k: usize| f.filtfilt(&traj.positions.iter().map(|p| p[k]).collect::<Vec<_>>());
    let (x, y, z) = (axis(0), axis(1), axis(2));
    let positions = (0..traj.len()).map(|i| Vec3::new(x[i], y[i], z[i])).collect();
    Trajectory::new(traj.t.clone(), positions, traj.orientations.clone())
}
