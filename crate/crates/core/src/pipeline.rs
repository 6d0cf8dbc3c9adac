//! End-to-end inference: calibrated IMU → orientation network → EKF →
//! position network, with the classical baselines and the metric report.

use std::path::Path;
use std::time::Instant;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::baselines::{dead_reckon, gyro_integrate, madgwick_filter, pdr, PdrConfig};
use crate::ekf::{run_filter, FilterConfig, FilterOutput};
use crate::error::{Error, Result};
use crate::imu::{check_increasing, ImuSample, Recording, Trajectory};
use crate::metrics::{ate, d_rte, orientation_rmse, sigma_coverage, t_rte, MetricReport, Point};
use crate::orient::{OrientNet, OrientationEstimate};
use crate::posnet::{world_window, PosNet, INFER_WINDOW};
use crate::quat::{UnitQuaternion, Vec3};
use crate::sim::{gen_trajectory, synthesize_imu, MagneticMap, Profile, SensorModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub filter: FilterConfig,
    /// Position-network window, samples.
    pub pos_window: usize,
    pub pdr: PdrConfig,
    /// Per-sample slerp weight of the Madgwick-style baseline.
    pub madgwick_gain: f64,
    /// T-RTE window, seconds.
    pub t_rte_interval: f64,
    /// D-RTE window, metres.
    pub d_rte_distance: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            filter: FilterConfig::default(),
            pos_window: INFER_WINDOW,
            pdr: PdrConfig::default(),
            madgwick_gain: 0.01,
            t_rte_interval: 60.0,
            d_rte_distance: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Models {
    pub orient: OrientNet<f32>,
    pub pos: PosNet<f32>,
}

impl Models {
    pub fn load(orient: &Path, pos: &Path) -> Result<Self> {
        Ok(Models {
            orient: OrientNet::load(orient)?,
            pos: PosNet::load(pos)?,
        })
    }
}

/// Estimated trajectory as written by `infer`.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub t: Vec<f64>,
    pub positions: Vec<Point>,
    pub orientations: Option<Vec<UnitQuaternion>>,
    /// Orientation error covariance, rad².
    pub covariances: Option<Vec<Matrix3<f64>>>,
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    /// Raw orientation-network outputs.
    pub measurements: Vec<OrientationEstimate>,
    pub fused: FilterOutput,
    pub positions: Vec<Point>,
    pub runtime_ms_per_100: f64,
}

impl PipelineRun {
    /// Fused orientation with its filter covariance.
    pub fn estimate(&self, t: &[f64]) -> Estimate {
        Estimate {
            t: t.to_vec(),
            positions: self.positions.clone(),
            orientations: Some(self.fused.orientations.clone()),
            covariances: Some(self.fused.covariances.clone()),
        }
    }

    /// Orientation-network outputs with their predicted covariance.
    pub fn raw_estimate(&self, t: &[f64]) -> Estimate {
        Estimate {
            t: t.to_vec(),
            positions: self.positions.clone(),
            orientations: Some(self.measurements.iter().map(|m| m.q).collect()),
            covariances: Some(self.measurements.iter().map(|m| m.cov).collect()),
        }
    }
}

/// Runs the learned pipeline over a calibrated stream. `initial` seeds the
/// filter (otherwise it starts from the first network output); `start` is
/// the planar position of sample 0.
pub fn run_pipeline(
    models: &Models,
    imu: &[ImuSample],
    cfg: &PipelineConfig,
    initial: Option<UnitQuaternion>,
    start: Point,
) -> Result<PipelineRun> {
    let clock = Instant::now();
    let (measurements, _) = models.orient.infer(imu, None)?;
    let fused = run_filter(imu, &measurements, &cfg.filter, initial)?;
    let feats = world_window::<f32>(imu, &fused.orientations)?;
    let positions = models.pos.infer(&feats, start, cfg.pos_window)?;
    let elapsed = clock.elapsed().as_secs_f64() * 1e3;
    Ok(PipelineRun {
        measurements,
        fused,
        positions,
        runtime_ms_per_100: elapsed * 100.0 / imu.len() as f64,
    })
}

#[derive(Clone, Debug)]
pub struct BaselineRun {
    pub gyro: Vec<UnitQuaternion>,
    pub madgwick: Vec<UnitQuaternion>,
    /// Double integration with the supplied orientations.
    pub dead_reckoning: Vec<Point>,
    /// Step counting along the yaw of the supplied orientations.
    pub pdr: Vec<Point>,
    pub steps: usize,
}

/// Classical estimators from the same initial pose. The position baselines
/// use `orientations` (normally the fused filter output) so that they differ
/// from the learned position module only in how position is formed.
pub fn run_baselines(
    imu: &[ImuSample],
    orientations: &[UnitQuaternion],
    q0: UnitQuaternion,
    start: Point,
    cfg: &PipelineConfig,
) -> Result<BaselineRun> {
    let p0 = Vec3::new(start[0], start[1], 0.0);
    let dr = dead_reckon(imu, orientations, p0, Vec3::zeros())?;
    let heading: Vec<f64> = orientations.iter().map(UnitQuaternion::yaw).collect();
    let steps = pdr(imu, &heading, &cfg.pdr)?;
    Ok(BaselineRun {
        gyro: gyro_integrate(imu, q0),
        madgwick: madgwick_filter(imu, q0, cfg.madgwick_gain),
        dead_reckoning: dr.iter().map(|p| [p.x, p.y]).collect(),
        pdr: steps
            .positions
            .iter()
            .map(|p| [start[0] + p.x, start[1] + p.y])
            .collect(),
        steps: steps.steps.len(),
    })
}

/// Metric report of an estimate against ground truth. Orientation metrics
/// are filled when both sides carry orientations; coverage also needs
/// covariances.
pub fn evaluate(est: &Estimate, truth: &Trajectory, cfg: &PipelineConfig) -> Result<MetricReport> {
    if est.positions.len() != truth.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, truth has {}",
            est.positions.len(),
            truth.len()
        )));
    }
    let xy = truth.xy();
    let mut report = MetricReport {
        ate: Some(ate(&est.positions, &xy)?),
        t_rte: t_rte(&est.positions, &xy, &truth.t, cfg.t_rte_interval)?,
        t_rte_interval: cfg.t_rte_interval,
        d_rte: d_rte(&est.positions, &xy, cfg.d_rte_distance)?,
        d_rte_distance: cfg.d_rte_distance,
        ..MetricReport::default()
    };
    if let (Some(q), Some(tq)) = (&est.orientations, &truth.orientations) {
        report.orient_rmse = Some(orientation_rmse(q, tq)?);
        if let Some(cov) = &est.covariances {
            let errors: Vec<Vec3> = tq.iter().zip(q).map(|(t, e)| t.boxminus(e)).collect();
            report.sigma_coverage = Some(sigma_coverage(&errors, cov)?);
        }
    }
    Ok(report)
}

pub const ESTIMATE_COLUMNS: [&str; 3] = ["t", "px", "py"];
pub const ESTIMATE_ORIENT_COLUMNS: [&str; 4] = ["qw", "qx", "qy", "qz"];
pub const ESTIMATE_COV_COLUMNS: [&str; 6] = ["s11", "s22", "s33", "s12", "s13", "s23"];

pub fn write_estimate(path: &Path, est: &Estimate) -> Result<()> {
    let n = est.t.len();
    if est.positions.len() != n
        || est.orientations.as_ref().is_some_and(|q| q.len() != n)
        || est.covariances.as_ref().is_some_and(|c| c.len() != n)
    {
        return Err(Error::Shape("estimate columns differ in length".into()));
    }
    if est.covariances.is_some() && est.orientations.is_none() {
        return Err(Error::Data("covariances need orientations".into()));
    }
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header: Vec<&str> = ESTIMATE_COLUMNS.to_vec();
    if est.orientations.is_some() {
        header.extend(ESTIMATE_ORIENT_COLUMNS);
    }
    if est.covariances.is_some() {
        header.extend(ESTIMATE_COV_COLUMNS);
    }
    w.write_record(&header).map_err(err)?;
    for k in 0..n {
        let mut row = vec![est.t[k], est.positions[k][0], est.positions[k][1]];
        if let Some(q) = &est.orientations {
            row.extend(q[k].to_array());
        }
        if let Some(c) = &est.covariances {
            let c = c[k];
            row.extend([c[(0, 0)], c[(1, 1)], c[(2, 2)], c[(0, 1)], c[(0, 2)], c[(1, 2)]]);
        }
        w.write_record(row.iter().map(|x| format!("{x:?}"))).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_estimate(path: &Path) -> Result<Estimate> {
    let pstr = path.display().to_string();
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{pstr}: {other:?}")),
        })?;
    let header = r.headers().map_err(|e| Error::Data(format!("{pstr}: {e}")))?.clone();
    let find = |cols: &[&str]| -> Result<Option<Vec<usize>>> {
        let idx: Vec<Option<usize>> = cols.iter().map(|c| header.iter().position(|h| h == *c)).collect();
        if idx.iter().all(Option::is_none) {
            return Ok(None);
        }
        match idx.iter().position(Option::is_none) {
            Some(k) => Err(Error::MissingColumn {
                path: pstr.clone(),
                column: cols[k].into(),
            }),
            None => Ok(Some(idx.into_iter().flatten().collect())),
        }
    };
    let base = find(&ESTIMATE_COLUMNS)?.ok_or_else(|| Error::MissingColumn {
        path: pstr.clone(),
        column: "t".into(),
    })?;
    let qi = find(&ESTIMATE_ORIENT_COLUMNS)?;
    let ci = find(&ESTIMATE_COV_COLUMNS)?;
    let mut est = Estimate {
        t: Vec::new(),
        positions: Vec::new(),
        orientations: qi.as_ref().map(|_| Vec::new()),
        covariances: ci.as_ref().map(|_| Vec::new()),
    };
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{pstr}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse_err = |msg: String| Error::Parse {
            path: pstr.clone(),
            line,
            msg,
        };
        let get = |i: usize| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("");
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(format!("column `{}`: bad value `{raw}`", &header[i]))),
            }
        };
        est.t.push(get(base[0])?);
        est.positions.push([get(base[1])?, get(base[2])?]);
        if let (Some(idx), Some(qs)) = (&qi, &mut est.orientations) {
            let c = [get(idx[0])?, get(idx[1])?, get(idx[2])?, get(idx[3])?];
            qs.push(UnitQuaternion::from_stored(c, crate::sim::MAX_QUAT_DRIFT).map_err(|e| parse_err(e.to_string()))?);
        }
        if let (Some(idx), Some(cs)) = (&ci, &mut est.covariances) {
            let v: Vec<f64> = idx.iter().map(|&i| get(i)).collect::<Result<_>>()?;
            cs.push(Matrix3::new(v[0], v[3], v[4], v[3], v[1], v[5], v[4], v[5], v[2]));
        }
    }
    check_increasing(&est.t).map_err(|e| Error::Data(format!("{pstr}: {e}")))?;
    Ok(est)
}

/// Ground truth as an estimate (for self-evaluation and plotting).
pub fn truth_estimate(truth: &Trajectory) -> Estimate {
    Estimate {
        t: truth.t.clone(),
        positions: truth.xy(),
        orientations: truth.orientations.clone(),
        covariances: None,
    }
}

/// A simulated recording environment: one magnetic map and sensor shared
/// by every recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub rate_hz: f64,
    pub duration: f64,
    pub profile: Profile,
    pub sensor: SensorModel,
    pub map: MagneticMap,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            rate_hz: 100.0,
            duration: 120.0,
            profile: Profile::default(),
            sensor: SensorModel::phone(),
            map: MagneticMap::random(0, 12, 20.0, 10.0),
        }
    }
}

impl Scenario {
    /// A recording whose trajectory and sensor draws both derive from `seed`.
    pub fn recording(&self, seed: u64, name: &str) -> Result<Recording> {
        self.recording_with(seed, &self.profile, self.duration, name)
    }

    /// Slow rotations through all attitudes, for magnetometer calibration.
    pub fn calibration_recording(&self, seed: u64) -> Result<Recording> {
        self.recording_with(seed, &Profile::Calibration, 60.0, "calibration")
    }

    fn recording_with(&self, seed: u64, profile: &Profile, duration: f64, name: &str) -> Result<Recording> {
        let path = gen_trajectory(seed, duration, profile, self.rate_hz)?;
        let imu = synthesize_imu(
            &path,
            &self.sensor,
            &self.map,
            seed.wrapping_mul(0x9e37_79b9).wrapping_add(1),
        )?;
        Ok(Recording {
            name: name.into(),
            imu,
            truth: Some(path.trajectory),
        })
    }
}
