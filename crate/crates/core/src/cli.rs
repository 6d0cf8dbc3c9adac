//! The `iodo` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{load_toml, to_toml, SimConfig};
use crate::ekf::run_filter;
use crate::error::{Error, Result};
use crate::imu::Recording;
use crate::joint::train_joint;
use crate::orient::{train_orientnet, OrientNet, OrientNetArch, OrientTrainConfig};
use crate::pipeline::{evaluate, load_estimate, run_pipeline, write_estimate, Estimate, Models, PipelineConfig};
use crate::plot::trajectory_svg;
use crate::posnet::{train_posnet, PosNet, PosNetArch, PosSequence, PosTrainConfig};
use crate::quat::UnitQuaternion;
use crate::sim::{
    calibrate_stream, fit_mag_ellipsoid, load_dataset, load_recording, write_recording, MagCalibration, Profile,
};
use crate::training::TrainLog;

#[derive(Debug, Parser)]
#[command(
    name = "iodo",
    version,
    about = "Learned inertial odometry: orientation and position networks fused with a quaternion EKF"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic recordings.
    Simulate(SimulateArgs),
    /// Fit a hard/soft-iron magnetometer calibration.
    CalibrateMag(CalibrateArgs),
    /// Train the orientation network.
    TrainOrient(TrainOrientArgs),
    /// Train the position network (optionally jointly with the orientation network).
    TrainPos(TrainPosArgs),
    /// Run the full pipeline over an IMU file.
    Infer(InferArgs),
    /// Score an estimate against ground truth.
    Evaluate(EvaluateArgs),
    /// Draw trajectories as an SVG overlay.
    Plot(PlotArgs),
    /// Time pipeline inference.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Walk,
    Static,
    Calibration,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Seed of the first recording; recording `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    /// Seconds per recording (overrides the config).
    #[arg(long)]
    pub duration: Option<f64>,
    /// Motion profile (overrides the config; `walk` uses default parameters).
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    /// Simulation config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// File name prefix.
    #[arg(long, default_value = "rec")]
    pub prefix: String,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Recording with raw magnetometer samples over many attitudes.
    #[arg(long)]
    pub input: PathBuf,
    /// Calibration file to write (TOML).
    #[arg(long)]
    pub output: PathBuf,
    /// Field magnitude of the calibrated output, µT; defaults to the fitted mean radius.
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Training recordings: a directory, a CSV file or a `.txt` manifest.
    #[arg(long)]
    pub train: PathBuf,
    /// Validation recordings, same forms as `--train`.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Magnetometer calibration applied to every recording.
    #[arg(long)]
    pub mag_cal: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainOrientArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Training config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss-curve CSV; defaults to the weight path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OrientSource {
    /// Ground-truth orientations.
    Truth,
    /// Orientation network fused by the EKF.
    Ekf,
}

#[derive(Debug, Args)]
pub struct TrainPosArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Training config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Orientations used to rotate the inputs into the world frame.
    #[arg(long, value_enum, default_value_t = OrientSource::Truth)]
    pub orient_source: OrientSource,
    /// Orientation weights (needed for `--orient-source ekf` and joint training).
    #[arg(long)]
    pub orient: Option<PathBuf>,
    /// Pipeline config whose filter settings drive the EKF source (TOML).
    #[arg(long)]
    pub pipeline_config: Option<PathBuf>,
    /// Position weights to start joint training from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Where joint training writes the fine-tuned orientation weights.
    #[arg(long)]
    pub orient_out: Option<PathBuf>,
    /// Weight file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss-curve CSV; defaults to the weight path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub orient: PathBuf,
    #[arg(long)]
    pub pos: PathBuf,
    /// Recording to process; ground-truth columns, when present, supply the initial pose.
    #[arg(long)]
    pub input: PathBuf,
    /// Estimate CSV to write.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub pipeline_config: Option<PathBuf>,
    #[arg(long)]
    pub mag_cal: Option<PathBuf>,
    /// Write the raw orientation-network outputs instead of the fused ones.
    #[arg(long)]
    pub raw_orientation: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub estimate: PathBuf,
    /// Recording holding the ground truth.
    #[arg(long)]
    pub truth: PathBuf,
    /// Pipeline config; sets the T-RTE and D-RTE windows (TOML).
    #[arg(long)]
    pub pipeline_config: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Recording holding the ground truth.
    #[arg(long)]
    pub truth: PathBuf,
    /// `NAME=PATH` of an estimate CSV; repeatable.
    #[arg(long = "estimate", value_parser = parse_named_path)]
    pub estimates: Vec<(String, PathBuf)>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Orientation weights; random weights of `--hidden` size when absent.
    #[arg(long, requires = "pos")]
    pub orient: Option<PathBuf>,
    #[arg(long, requires = "orient")]
    pub pos: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub hidden: usize,
    /// Recording to time on; a simulated walk of `--seconds` when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 60.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
    #[arg(long)]
    pub pipeline_config: Option<PathBuf>,
}

fn parse_named_path(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected NAME=PATH, got `{s}`")),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::CalibrateMag(a) => calibrate_mag(a),
        Command::TrainOrient(a) => train_orient(a),
        Command::TrainPos(a) => train_pos(a),
        Command::Infer(a) => infer(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Plot(a) => plot(a),
        Command::Bench(a) => bench(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn config_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load_toml)
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg: SimConfig = config_or_default(a.config.as_deref())?;
    if let Some(d) = a.duration {
        cfg.duration = d;
    }
    match a.profile {
        Some(ProfileArg::Walk) if !matches!(cfg.profile, Profile::Walk(_)) => cfg.profile = Profile::default(),
        Some(ProfileArg::Static) => cfg.profile = Profile::Static,
        Some(ProfileArg::Calibration) => cfg.profile = Profile::Calibration,
        _ => {}
    }
    let scenario = cfg.scenario()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for seed in a.seed..a.seed + a.count {
        let name = format!("{}_{seed:05}", a.prefix);
        let rec = scenario.recording(seed, &name)?;
        let path = a.out.join(format!("{name}.csv"));
        write_recording(&path, &rec)?;
        log::info!("wrote {} ({} samples)", path.display(), rec.imu.len());
    }
    Ok(())
}

fn calibrate_mag(a: CalibrateArgs) -> Result<()> {
    let rec = load_recording(&a.input)?;
    let mags: Vec<_> = rec.imu.iter().map(|s| s.mag).collect();
    let cal = fit_mag_ellipsoid(&mags, a.radius)?;
    write_text(&a.output, &to_toml(&cal)?)
}

fn load_recordings(path: &Path, cal: Option<&MagCalibration>) -> Result<Vec<Recording>> {
    let mut recs = load_dataset(path)?;
    if let Some(c) = cal {
        for r in &mut recs {
            calibrate_stream(&mut r.imu, c);
        }
    }
    Ok(recs)
}

fn load_splits(d: &DataArgs) -> Result<(Vec<Recording>, Vec<Recording>)> {
    let cal: Option<MagCalibration> = d.mag_cal.as_deref().map(load_toml).transpose()?;
    let train = load_recordings(&d.train, cal.as_ref())?;
    let val = match &d.val {
        Some(p) => load_recordings(p, cal.as_ref())?,
        None => Vec::new(),
    };
    Ok((train, val))
}

fn write_log(weights: &Path, log_path: Option<&Path>, log: &TrainLog) -> Result<()> {
    let path = log_path.map_or_else(|| weights.with_extension("csv"), Path::to_path_buf);
    write_text(&path, &log.to_csv())?;
    if let Some(why) = &log.aborted {
        log::warn!("training stopped early: {why}");
    }
    Ok(())
}

fn train_orient(a: TrainOrientArgs) -> Result<()> {
    let mut cfg: OrientTrainConfig = config_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (train, val) = load_splits(&a.data)?;
    let (net, log) = train_orientnet(&train, &val, &cfg)?;
    net.save(&a.out)?;
    write_log(&a.out, a.log.as_deref(), &log)
}

fn initial_pose(rec: &Recording) -> (Option<UnitQuaternion>, [f64; 2]) {
    match &rec.truth {
        Some(t) => (t.orientations.as_ref().map(|q| q[0]), t.xy()[0]),
        None => (None, [0.0, 0.0]),
    }
}

fn load_orient(path: Option<&Path>, why: &str) -> Result<OrientNet<f32>> {
    let p = path.ok_or_else(|| Error::Config(format!("--orient is required {why}")))?;
    OrientNet::load(p)
}

fn train_pos(a: TrainPosArgs) -> Result<()> {
    let mut cfg: PosTrainConfig = config_or_default(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let (train, val) = load_splits(&a.data)?;
    if cfg.joint {
        let orient = load_orient(a.orient.as_deref(), "for joint training")?;
        let init = a.init.as_deref().map(PosNet::load).transpose()?;
        let (o, p, log) = train_joint(&orient, init.as_ref(), &train, &val, &cfg)?;
        p.save(&a.out)?;
        o.save(&a.orient_out.unwrap_or_else(|| a.out.with_extension("orient.ifw")))?;
        return write_log(&a.out, a.log.as_deref(), &log);
    }
    if a.init.is_some() || a.orient_out.is_some() {
        return Err(Error::Config(
            "--init and --orient-out apply to joint training only".into(),
        ));
    }
    let sequences = |recs: &[Recording]| -> Result<Vec<PosSequence>> {
        match a.orient_source {
            OrientSource::Truth => recs
                .iter()
                .map(|r| PosSequence::new(r, r.truth()?.orientations()?))
                .collect(),
            OrientSource::Ekf => {
                let orient = load_orient(a.orient.as_deref(), "with --orient-source ekf")?;
                let pcfg: PipelineConfig = config_or_default(a.pipeline_config.as_deref())?;
                recs.iter()
                    .map(|r| {
                        let (meas, _) = orient.infer(&r.imu, None)?;
                        let fused = run_filter(&r.imu, &meas, &pcfg.filter, initial_pose(r).0)?;
                        PosSequence::new(r, &fused.orientations)
                    })
                    .collect()
            }
        }
    };
    let (tr, va) = (sequences(&train)?, sequences(&val)?);
    let (net, log) = train_posnet(&tr, &va, &cfg)?;
    net.save(&a.out)?;
    write_log(&a.out, a.log.as_deref(), &log)
}

fn infer(a: InferArgs) -> Result<()> {
    let models = Models::load(&a.orient, &a.pos)?;
    let cfg: PipelineConfig = config_or_default(a.pipeline_config.as_deref())?;
    let cal: Option<MagCalibration> = a.mag_cal.as_deref().map(load_toml).transpose()?;
    let mut rec = load_recording(&a.input)?;
    if let Some(c) = &cal {
        calibrate_stream(&mut rec.imu, c);
    }
    let (q0, start) = initial_pose(&rec);
    let run = run_pipeline(&models, &rec.imu, &cfg, q0, start)?;
    let t: Vec<f64> = rec.imu.iter().map(|s| s.t).collect();
    let est = if a.raw_orientation {
        run.raw_estimate(&t)
    } else {
        run.estimate(&t)
    };
    write_estimate(&a.output, &est)?;
    log::info!("{:.2} ms per 100 samples", run.runtime_ms_per_100);
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let est = load_estimate(&a.estimate)?;
    let rec = load_recording(&a.truth)?;
    let cfg: PipelineConfig = config_or_default(a.pipeline_config.as_deref())?;
    let report = evaluate(&est, rec.truth()?, &cfg)?;
    let json = report.to_json();
    if let Some(p) = &a.json {
        write_text(p, &json)?;
    }
    println!("{json}");
    print!("{}", report.table());
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    let rec = load_recording(&a.truth)?;
    let truth = rec.truth()?.xy();
    let ests: Vec<(String, Estimate)> = a
        .estimates
        .iter()
        .map(|(n, p)| Ok((n.clone(), load_estimate(p)?)))
        .collect::<Result<_>>()?;
    let named: Vec<(&str, &[[f64; 2]])> = ests.iter().map(|(n, e)| (n.as_str(), e.positions.as_slice())).collect();
    write_text(&a.output, &trajectory_svg(&truth, &named)?)
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.repeat == 0 {
        return Err(Error::Config("--repeat must be positive".into()));
    }
    let models = match (&a.orient, &a.pos) {
        (Some(o), Some(p)) => Models::load(o, p)?,
        _ => Models {
            orient: OrientNet::new(OrientNetArch::new(a.hidden, 2), 0)?,
            pos: PosNet::new(PosNetArch::new(a.hidden, 2), 0)?,
        },
    };
    let cfg: PipelineConfig = config_or_default(a.pipeline_config.as_deref())?;
    let rec = match &a.input {
        Some(p) => load_recording(p)?,
        None => SimConfig {
            duration: a.seconds,
            ..SimConfig::default()
        }
        .scenario()?
        .recording(0, "bench")?,
    };
    let (q0, start) = initial_pose(&rec);
    let mut times: Vec<f64> = (0..a.repeat)
        .map(|_| run_pipeline(&models, &rec.imu, &cfg, q0, start).map(|r| r.runtime_ms_per_100))
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    println!(
        "{:.3} ms per 100 samples (median of {} runs over {} samples; orientation hidden {}, position hidden {})",
        times[times.len() / 2],
        a.repeat,
        rec.imu.len(),
        models.orient.arch.hidden,
        models.pos.arch.hidden
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn named_paths_parse() {
        assert_eq!(
            parse_named_path("ours=a/b.csv").unwrap(),
            ("ours".into(), PathBuf::from("a/b.csv"))
        );
        assert!(parse_named_path("a.csv").is_err());
        assert!(parse_named_path("=a.csv").is_err());
    }
}
