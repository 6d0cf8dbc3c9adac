//! Learned planar position estimator: a stacked BiLSTM over world-frame
//! IMU windows emitting per-step displacements, summed into positions
//! relative to the sample before the window. Windows are chained at test
//! time with the recurrent state reset at every boundary.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{ImuSample, Recording, STANDARD_GRAVITY};
use crate::metrics::{ate, Point};
use crate::nn::{
    bilstm_forward, clip_grad_norm, read_weights, write_weights, Activation, Adam, AdamConfig, BiLstmLayer, DenseLayer,
    Initializer, ParamStore, Real, Tape, Var,
};
use crate::quat::UnitQuaternion;
use crate::training::{EpochStats, TrainLog};

pub const POS_INPUTS: usize = 6;
/// Test-time window length, samples.
pub const INFER_WINDOW: usize = 200;
/// The linear head predicts velocity in m/s; this nominal sample period
/// turns it into a per-step displacement.
pub const STEP_SECONDS: f64 = 0.01;

/// Network input for one sample: world-frame acceleration with gravity
/// removed, in units of g, and world-frame angular rate.
pub fn world_features<T: Real>(s: &ImuSample, q: &UnitQuaternion) -> [T; POS_INPUTS] {
    let mut a = q.rotate(&s.accel);
    a.z -= STANDARD_GRAVITY;
    let a = a / STANDARD_GRAVITY;
    let w = q.rotate(&s.gyro);
    [a.x, a.y, a.z, w.x, w.y, w.z].map(T::lit)
}

/// World-frame inputs for a whole stream.
pub fn world_window<T: Real>(imu: &[ImuSample], orientations: &[UnitQuaternion]) -> Result<Vec<[T; POS_INPUTS]>> {
    if imu.len() != orientations.len() {
        return Err(Error::Shape(format!(
            "{} samples but {} orientations",
            imu.len(),
            orientations.len()
        )));
    }
    Ok(imu
        .iter()
        .zip(orientations)
        .map(|(s, q)| world_features(s, q))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosNetArch {
    pub kind: String,
    pub hidden: usize,
    pub layers: usize,
}

impl PosNetArch {
    pub const KIND: &'static str = "posnet";

    pub fn new(hidden: usize, layers: usize) -> Self {
        PosNetArch {
            kind: Self::KIND.into(),
            hidden,
            layers,
        }
    }
}

impl Default for PosNetArch {
    fn default() -> Self {
        PosNetArch::new(100, 2)
    }
}

#[derive(Clone, Debug)]
pub struct PosNet<T> {
    pub arch: PosNetArch,
    pub store: ParamStore<T>,
    bilstm: Vec<BiLstmLayer>,
    head: [DenseLayer; 3],
}

fn head_layers<T: Real>(store: &mut ParamStore<T>, hidden: usize, init: &mut Initializer) -> [DenseLayer; 3] {
    [
        DenseLayer::new(store, "head.0", 2 * hidden, 50, Activation::Tanh, init),
        DenseLayer::new(store, "head.1", 50, 20, Activation::Tanh, init),
        DenseLayer::new(store, "head.2", 20, 2, Activation::Identity, init),
    ]
}

impl<T: Real> PosNet<T> {
    pub fn new(arch: PosNetArch, seed: u64) -> Result<Self> {
        validate_arch(&arch)?;
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        let h = arch.hidden;
        let bilstm = (0..arch.layers)
            .map(|l| {
                let input = if l == 0 { POS_INPUTS } else { 2 * h };
                BiLstmLayer::new(&mut store, &format!("bilstm{l}"), input, h, &mut init)
            })
            .collect();
        let head = head_layers(&mut store, h, &mut init);
        Ok(PosNet {
            arch,
            store,
            bilstm,
            head,
        })
    }

    pub fn from_store(arch: PosNetArch, store: ParamStore<T>) -> Result<Self> {
        validate_arch(&arch)?;
        let h = arch.hidden;
        let bilstm = (0..arch.layers)
            .map(|l| {
                let input = if l == 0 { POS_INPUTS } else { 2 * h };
                BiLstmLayer::bind(&store, &format!("bilstm{l}"), input, h)
            })
            .collect::<Result<Vec<_>>>()?;
        let head = [
            DenseLayer::bind(&store, "head.0", 2 * h, 50, Activation::Tanh)?,
            DenseLayer::bind(&store, "head.1", 50, 20, Activation::Tanh)?,
            DenseLayer::bind(&store, "head.2", 20, 2, Activation::Identity)?,
        ];
        Ok(PosNet {
            arch,
            store,
            bilstm,
            head,
        })
    }

    pub fn cast<U: Real>(&self) -> PosNet<U> {
        PosNet::from_store(self.arch.clone(), self.store.cast()).expect("same layout")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_weights(path, &self.arch, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = read_weights(path)?;
        let arch: PosNetArch = file.architecture()?;
        if arch.kind != PosNetArch::KIND {
            return Err(Error::WeightFile(format!(
                "{} holds a `{}` network, expected `{}`",
                path.display(),
                arch.kind,
                PosNetArch::KIND
            )));
        }
        Self::from_store(arch, file.into_store())
    }

    /// Records the network over `steps` (each `rows × 6`). Returns the
    /// `(T·rows) × 2` step-major cumulative displacements.
    pub fn forward_tape(&self, tape: &mut Tape<T>, steps: &[Var]) -> Result<Var> {
        self.forward_tape_in(&self.store, tape, steps)
    }

    /// [`forward_tape`](Self::forward_tape) reading the parameters from
    /// `store`, which must share this network's layout.
    pub(crate) fn forward_tape_in(&self, store: &ParamStore<T>, tape: &mut Tape<T>, steps: &[Var]) -> Result<Var> {
        let rows = tape.shape(steps[0]).0;
        let mut x = bilstm_forward(tape, store, &self.bilstm, steps)?;
        for layer in &self.head {
            let v = tape.view(x);
            x = layer.forward(tape, store, v)?;
        }
        let step = tape.scale(x, T::lit(STEP_SECONDS));
        Ok(tape.cumsum_blocks(step, rows))
    }

    /// Cumulative displacements for equal-length windows run as one batch.
    pub fn forward_batch(&self, windows: &[&[[T; POS_INPUTS]]]) -> Result<Vec<Vec<Point>>> {
        let rows = windows.len();
        let len = windows.first().map_or(0, |w| w.len());
        if len == 0 {
            return Err(Error::Domain("empty position window".into()));
        }
        if windows.iter().any(|w| w.len() != len) {
            return Err(Error::Shape("batched windows must share a length".into()));
        }
        let mut tape = Tape::new();
        let steps: Vec<Var> = (0..len)
            .map(|t| {
                let x = windows.iter().flat_map(|w| w[t]).collect();
                tape.constant(rows, POS_INPUTS, x)
            })
            .collect();
        let out = self.forward_tape(&mut tape, &steps)?;
        let v = tape.value(out);
        let mut res = vec![Vec::with_capacity(len); rows];
        for t in 0..len {
            for (r, w) in res.iter_mut().enumerate() {
                let k = 2 * (t * rows + r);
                w.push([v[k].as_f64(), v[k + 1].as_f64()]);
            }
        }
        Ok(res)
    }

    /// Cumulative displacement of every step of one window, relative to the
    /// position just before the window.
    pub fn forward(&self, window: &[[T; POS_INPUTS]]) -> Result<Vec<Point>> {
        if window.iter().flatten().any(|x| !x.as_f64().is_finite()) {
            return Err(Error::Inference("non-finite position-network input".into()));
        }
        Ok(self.forward_batch(&[window])?.remove(0))
    }

    /// Positions for a whole stream: sample 0 sits at `start`, the rest is
    /// covered by independent windows of `window` samples whose ends are
    /// chained. Full-length windows are batched.
    pub fn infer(&self, feats: &[[T; POS_INPUTS]], start: Point, window: usize) -> Result<Vec<Point>> {
        if window == 0 {
            return Err(Error::Config("inference window must be positive".into()));
        }
        if feats.is_empty() {
            return Err(Error::Inference("empty input stream".into()));
        }
        if feats.iter().flatten().any(|x| !x.as_f64().is_finite()) {
            return Err(Error::Inference("non-finite position-network input".into()));
        }
        const MAX_BATCH: usize = 64;
        let rest = &feats[1..];
        let full: Vec<&[[T; POS_INPUTS]]> = rest.chunks_exact(window).collect();
        let mut windows = Vec::with_capacity(full.len() + 1);
        for group in full.chunks(MAX_BATCH) {
            windows.extend(self.forward_batch(group)?);
        }
        let tail = rest.chunks_exact(window).remainder();
        if !tail.is_empty() {
            windows.push(self.forward(tail)?);
        }
        Ok(chain_windows(&windows, start))
    }
}

fn validate_arch(arch: &PosNetArch) -> Result<()> {
    if arch.hidden == 0 || arch.layers == 0 {
        return Err(Error::Config("position network sizes must be positive".into()));
    }
    Ok(())
}

/// Joins per-window cumulative displacements: the output starts at `start`
/// and each window continues from where the previous one ended.
pub fn chain_windows(windows: &[Vec<Point>], start: Point) -> Vec<Point> {
    let mut rel = Vec::with_capacity(1 + windows.iter().map(Vec::len).sum::<usize>());
    rel.push([0.0, 0.0]);
    let mut offset = [0.0, 0.0];
    for w in windows {
        for d in w {
            rel.push([offset[0] + d[0], offset[1] + d[1]]);
        }
        offset = *rel.last().expect("non-empty");
    }
    rel.into_iter().map(|p| [start[0] + p[0], start[1] + p[1]]).collect()
}

/// Mean over steps `t ≥ 1` of `‖(xₜ − x₀) − (x̂ₜ − x̂₀)‖²`, where index 0 is
/// the anchor just before the window.
pub fn position_loss(est: &[Point], truth: &[Point]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::Shape(format!(
            "estimate has {} points, truth has {}",
            est.len(),
            truth.len()
        )));
    }
    if est.len() < 2 {
        return Err(Error::Domain(
            "position loss needs an anchor and at least one step".into(),
        ));
    }
    let sum: f64 = (1..est.len())
        .map(|t| {
            let ex = (truth[t][0] - truth[0][0]) - (est[t][0] - est[0][0]);
            let ey = (truth[t][1] - truth[0][1]) - (est[t][1] - est[0][1]);
            ex * ex + ey * ey
        })
        .sum();
    Ok(sum / (est.len() - 1) as f64)
}

/// Records `position_loss` for a batch of windows. `target` holds the true
/// displacements from each window's anchor, `(T·rows) × 2` step-major;
/// `denom` is the number of lane-steps the loss is averaged over, so that
/// micro-batches sum to the full-batch loss.
pub fn position_loss_tape<T: Real>(
    net: &PosNet<T>,
    tape: &mut Tape<T>,
    steps: &[Var],
    target: Vec<T>,
    denom: usize,
) -> Result<Var> {
    let est = net.forward_tape(tape, steps)?;
    displacement_loss(tape, est, target, denom)
}

pub(crate) fn displacement_loss<T: Real>(tape: &mut Tape<T>, est: Var, target: Vec<T>, denom: usize) -> Result<Var> {
    if tape.value(est).len() != target.len() {
        return Err(Error::Shape("position target has the wrong length".into()));
    }
    let rows = tape.shape(est).0;
    let truth = tape.constant(rows, 2, target);
    let diff = tape.sub(est, truth);
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, T::lit(1.0 / denom as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosTrainConfig {
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    /// Windows per optimizer step.
    pub batch: usize,
    /// When set, each step draws `max(1, batch_samples / window)` windows
    /// instead of `batch`, keeping the samples per step roughly constant
    /// across stages.
    pub batch_samples: Option<usize>,
    /// Largest number of windows recorded on one tape; gradients of the
    /// micro-batches are accumulated before the step.
    pub micro_batch: usize,
    /// Window length of each curriculum stage, samples.
    pub stages: Vec<usize>,
    pub epochs_per_stage: usize,
    /// Optimizer steps per epoch. When absent, an epoch draws as many
    /// windows as cover the training samples once.
    pub steps_per_epoch: Option<usize>,
    pub clip: f64,
    pub seed: u64,
    /// Test-time window used for validation.
    pub infer_window: usize,
    /// Fine-tune the orientation network together with the position
    /// network, back-propagating the position loss through the rotation of
    /// the inputs into the world frame.
    pub joint: bool,
    /// Orientation-network learning rate when `joint` is set.
    pub joint_orient_lr: f64,
    /// Samples the orientation network runs before each crop when `joint`
    /// is set, so that its recurrent state has settled.
    pub joint_warmup: usize,
}

impl Default for PosTrainConfig {
    fn default() -> Self {
        PosTrainConfig {
            hidden: 100,
            layers: 2,
            lr: 1e-3,
            batch: 64,
            batch_samples: None,
            micro_batch: 16,
            stages: vec![100, 200, 500, 1000, 2000],
            epochs_per_stage: 4,
            steps_per_epoch: None,
            clip: 5.0,
            seed: 0,
            infer_window: INFER_WINDOW,
            joint: false,
            joint_orient_lr: 1e-4,
            joint_warmup: 100,
        }
    }
}

impl PosTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0
            || self.micro_batch == 0
            || self.infer_window == 0
            || self.steps_per_epoch == Some(0)
            || self.batch_samples == Some(0)
        {
            return Err(Error::Config(
                "batch, micro_batch and infer_window must be positive".into(),
            ));
        }
        if self.stages.is_empty() || self.stages.contains(&0) {
            return Err(Error::Config("curriculum stages must be non-empty and positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) || !(self.joint_orient_lr >= 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// A recording prepared for position training: world-frame inputs and
/// planar truth positions.
#[derive(Clone, Debug)]
pub struct PosSequence {
    pub feats: Vec<[f32; POS_INPUTS]>,
    pub truth: Vec<Point>,
}

impl PosSequence {
    /// `orientations` rotate the device samples into the world frame; pass
    /// ground truth or a filter output.
    pub fn new(rec: &Recording, orientations: &[UnitQuaternion]) -> Result<Self> {
        Ok(PosSequence {
            feats: world_window(&rec.imu, orientations)?,
            truth: rec.truth()?.xy(),
        })
    }
}

/// Mean ATE of chained inference over whole sequences.
pub fn evaluate_ate<T: Real>(net: &PosNet<T>, seqs: &[PosSequence], window: usize) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Data("no sequences to evaluate".into()));
    }
    let mut sum = 0.0;
    for s in seqs {
        let feats: Vec<[T; POS_INPUTS]> = s.feats.iter().map(|f| f.map(|x| T::lit(x as f64))).collect();
        let est = net.infer(&feats, s.truth[0], window)?;
        sum += ate(&est, &s.truth)?;
    }
    Ok(sum / seqs.len() as f64)
}

/// Draws `count` crops `(sequence, start)` with sequences weighted by length
/// and `start` uniform in `min_start..=len - window`. Sequences with length
/// zero in `lens` are never picked.
pub(crate) fn sample_crops(
    rng: &mut ChaCha8Rng,
    lens: &[usize],
    count: usize,
    window: usize,
    min_start: usize,
) -> Vec<(usize, usize)> {
    let total: usize = lens.iter().sum();
    (0..count)
        .map(|_| {
            let mut pick = rng.random_range(0..total);
            let mut seq = 0;
            for (i, &n) in lens.iter().enumerate() {
                if pick < n {
                    seq = i;
                    break;
                }
                pick -= n;
            }
            (seq, rng.random_range(min_start..=lens[seq] - window))
        })
        .collect()
}

/// Trains a position network with Adam on random crops, growing the window
/// length through `cfg.stages`. The validation column is the mean ATE of chained
/// inference with `cfg.infer_window`.
///
/// On a non-finite loss or gradient, training stops and the weights from the
/// end of the last completed epoch are returned, with the reason in the log.
pub fn train_posnet(
    train: &[PosSequence],
    val: &[PosSequence],
    cfg: &PosTrainConfig,
) -> Result<(PosNet<f32>, TrainLog)> {
    cfg.validate()?;
    let mut net = PosNet::<f32>::new(PosNetArch::new(cfg.hidden, cfg.layers), cfg.seed)?;
    let longest = *cfg.stages.iter().max().expect("validated");
    let lens: Vec<usize> = train
        .iter()
        .map(|s| if s.feats.len() > longest { s.feats.len() } else { 0 })
        .collect();
    let total: usize = lens.iter().sum();
    if total == 0 {
        return Err(Error::Training(format!(
            "no training sequence is longer than the {longest}-sample window"
        )));
    }

    let mut log = TrainLog::default();
    let val_ate = |net: &PosNet<f32>| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            evaluate_ate(net, val, cfg.infer_window).map(Some)
        }
    };
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &net.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x706f_736e);
    let mut tape = Tape::new();
    let mut checkpoint = net.store.clone();
    let mut epoch = 0;
    log.epochs.push(EpochStats {
        epoch,
        window: cfg.stages[0],
        train_loss: f64::NAN,
        val_loss: val_ate(&net)?,
    });

    'stages: for &window in &cfg.stages {
        let batch = cfg.batch_samples.map_or(cfg.batch, |n| (n / window).max(1));
        let steps_per_epoch = cfg
            .steps_per_epoch
            .unwrap_or_else(|| total.div_ceil(batch * window).max(1));
        for _ in 0..cfg.epochs_per_stage {
            epoch += 1;
            let mut sum = 0.0;
            for _ in 0..steps_per_epoch {
                let crops = sample_crops(&mut rng, &lens, batch, window, 1);
                let mut loss_value = 0.0;
                for micro in crops.chunks(cfg.micro_batch) {
                    tape.reset();
                    let rows = micro.len();
                    let steps: Vec<Var> = (0..window)
                        .map(|t| {
                            let x = micro.iter().flat_map(|&(s, st)| train[s].feats[st + t]).collect();
                            tape.constant(rows, POS_INPUTS, x)
                        })
                        .collect();
                    let mut target = Vec::with_capacity(window * rows * 2);
                    for t in 0..window {
                        for &(s, st) in micro {
                            let (a, p) = (train[s].truth[st - 1], train[s].truth[st + t]);
                            target.push((p[0] - a[0]) as f32);
                            target.push((p[1] - a[1]) as f32);
                        }
                    }
                    let loss = position_loss_tape(&net, &mut tape, &steps, target, batch * window)?;
                    loss_value += tape.scalar(loss) as f64;
                    tape.backward(loss, &mut net.store)?;
                }
                let failure = if !loss_value.is_finite() {
                    Some(format!("non-finite loss in epoch {epoch}"))
                } else {
                    clip_grad_norm(&mut net.store, cfg.clip);
                    adam.step(&mut net.store).err().map(|e| e.to_string())
                };
                if let Some(msg) = failure {
                    log::warn!("{msg}; restoring last checkpoint");
                    log.aborted = Some(msg);
                    net.store = checkpoint;
                    break 'stages;
                }
                sum += loss_value;
            }
            let stats = EpochStats {
                epoch,
                window,
                train_loss: sum / steps_per_epoch as f64,
                val_loss: val_ate(&net)?,
            };
            log::info!(
                "pos epoch {epoch} (window {window}): train {:.5} val {}",
                stats.train_loss,
                stats.val_loss.map_or("-".into(), |v| format!("{v:.4}"))
            );
            log.epochs.push(stats);
            checkpoint = net.store.clone();
        }
    }
    let net = PosNet::from_store(net.arch.clone(), net.store)?;
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::Vec3;

    fn feats(n: usize, seed: u64) -> Vec<[f64; POS_INPUTS]> {
        (0..n)
            .map(|k| {
                let x = (k as f64 + seed as f64) * 0.21;
                [
                    x.sin(),
                    0.3 * x.cos(),
                    0.1 * (2.0 * x).sin(),
                    0.05,
                    -0.02 * x.cos(),
                    0.4,
                ]
            })
            .collect()
    }

    fn net(seed: u64) -> PosNet<f64> {
        PosNet::new(PosNetArch::new(6, 2), seed).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_displacement() {
        let mut n = net(1);
        for p in n.store.iter_mut() {
            p.tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let d = n.forward(&feats(30, 0)).unwrap();
        assert_eq!(d.len(), 30);
        assert!(d.iter().all(|p| *p == [0.0, 0.0]));
    }

    #[test]
    fn last_input_reaches_first_output() {
        let n = net(2);
        let a = feats(20, 0);
        let mut b = a.clone();
        b[19][0] += 1.0;
        assert_ne!(n.forward(&a).unwrap()[0], n.forward(&b).unwrap()[0]);
    }

    #[test]
    fn batched_windows_match_single() {
        let n = net(3);
        let (a, b) = (feats(25, 0), feats(25, 7));
        let both = n.forward_batch(&[&a, &b]).unwrap();
        assert_eq!(both[0], n.forward(&a).unwrap());
        assert_eq!(both[1], n.forward(&b).unwrap());
    }

    #[test]
    fn chain_examples() {
        let w = vec![[1.0, 0.0], [2.0, 1.0]];
        assert_eq!(
            chain_windows(std::slice::from_ref(&w), [0.0, 0.0]),
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]]
        );
        let two = chain_windows(&[w.clone(), vec![[0.5, 0.5]]], [0.0, 0.0]);
        assert_eq!(*two.last().unwrap(), [2.5, 1.5]);
    }

    #[test]
    fn chain_is_translation_equivariant() {
        let ws = vec![
            vec![[0.1, 0.2], [0.3, -0.1]],
            vec![[0.7, 0.0]],
            vec![[-0.2, 0.4], [0.1, 0.1]],
        ];
        let a = chain_windows(&ws, [0.0, 0.0]);
        let b = chain_windows(&ws, [3.0, -2.0]);
        for (p, q) in a.iter().zip(&b) {
            assert_eq!([p[0] + 3.0, p[1] - 2.0], *q);
        }
    }

    #[test]
    fn memoryless_net_splits_exactly() {
        let mut n = net(4);
        // No recurrent weights and a forget gate pinned shut.
        let h = n.arch.hidden;
        for p in n.store.iter_mut() {
            let d = p.tensor.data_mut();
            if p.name.ends_with(".wh") {
                d.iter_mut().for_each(|x| *x = 0.0);
            } else if p.name.ends_with(".wx") {
                d.chunks_mut(4 * h)
                    .for_each(|row| row[h..2 * h].iter_mut().for_each(|x| *x = 0.0));
            } else if p.name.starts_with("bilstm") && p.name.ends_with(".b") {
                d[h..2 * h].iter_mut().for_each(|x| *x = -1e30);
            }
        }
        let f = feats(41, 1);
        let one = n.infer(&f, [0.0, 0.0], 40).unwrap();
        let two = n.infer(&f, [0.0, 0.0], 20).unwrap();
        for (p, q) in one.iter().zip(&two) {
            assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_final_position_telescopes() {
        let n = net(5);
        let f = feats(95, 2);
        let traj = n.infer(&f, [1.0, 2.0], 30).unwrap();
        assert_eq!(traj.len(), 95);
        let mut sum = [0.0, 0.0];
        for w in f[1..].chunks(30) {
            let d = n.forward(w).unwrap();
            let last = d.last().unwrap();
            sum = [sum[0] + last[0], sum[1] + last[1]];
        }
        assert_eq!(*traj.last().unwrap(), [1.0 + sum[0], 2.0 + sum[1]]);
    }

    #[test]
    fn loss_examples() {
        let t = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]];
        assert_eq!(position_loss(&t, &t).unwrap(), 0.0);
        let shifted: Vec<Point> = t.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        assert_eq!(position_loss(&shifted, &t).unwrap(), 0.0);
        assert_eq!(
            position_loss(&[[0.0, 0.0], [0.0, 0.0]], &[[0.0, 0.0], [1.0, 0.0]]).unwrap(),
            1.0
        );
        assert!(position_loss(&t[..2], &t).is_err());
    }

    #[test]
    fn taped_loss_matches_direct_loss() {
        let n = net(6);
        let f = feats(15, 3);
        let truth: Vec<Point> = (0..16).map(|k| [0.1 * k as f64, (k as f64 * 0.3).sin()]).collect();
        let est = n.forward(&f).unwrap();
        let mut with_anchor = vec![[0.0, 0.0]];
        with_anchor.extend(est);
        let direct = position_loss(&with_anchor, &truth).unwrap();

        let mut tape = Tape::new();
        let steps: Vec<Var> = f.iter().map(|x| tape.constant(1, POS_INPUTS, x.to_vec())).collect();
        let target: Vec<f64> = truth[1..]
            .iter()
            .flat_map(|p| [p[0] - truth[0][0], p[1] - truth[0][1]])
            .collect();
        let loss = position_loss_tape(&n, &mut tape, &steps, target, 15).unwrap();
        assert!((tape.scalar(loss) - direct).abs() < 1e-12);
    }

    #[test]
    fn gravity_only_input_is_zero() {
        let q = UnitQuaternion::from_euler(0.2, -0.1, 1.0);
        let s = ImuSample {
            t: 0.0,
            accel: q.inverse_rotate(&Vec3::new(0.0, 0.0, STANDARD_GRAVITY)),
            gyro: Vec3::zeros(),
            mag: Vec3::zeros(),
        };
        let f: [f64; POS_INPUTS] = world_features(&s, &q);
        assert!(f.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn nan_input_is_an_inference_error() {
        let n = net(7);
        let mut f = feats(10, 0);
        f[4][2] = f64::NAN;
        assert!(matches!(n.forward(&f), Err(Error::Inference(_))));
        assert!(matches!(n.infer(&f, [0.0, 0.0], 5), Err(Error::Inference(_))));
    }

    #[test]
    fn weights_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ifw");
        let n = PosNet::<f32>::new(PosNetArch::new(6, 2), 9).unwrap();
        n.save(&path).unwrap();
        let back = PosNet::<f32>::load(&path).unwrap();
        let f: Vec<[f32; POS_INPUTS]> = feats(30, 4).iter().map(|x| x.map(|v| v as f32)).collect();
        assert_eq!(
            n.infer(&f, [0.0, 0.0], 10).unwrap(),
            back.infer(&f, [0.0, 0.0], 10).unwrap()
        );
        assert!(matches!(
            crate::orient::OrientNet::<f32>::load(&path),
            Err(Error::WeightFile(_))
        ));
    }
}
