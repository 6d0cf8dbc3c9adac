//! Joint fine-tuning of both networks. The position loss reaches the
//! orientation network through the rotation of the device samples into the
//! world frame; the filter is not on this path, so the position network is
//! fed the raw orientation outputs while training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imu::{Recording, STANDARD_GRAVITY};
use crate::metrics::Point;
use crate::nn::{clip_grad_norm, Adam, AdamConfig, ParamStore, Real, Tape, Var};
use crate::orient::{orient_features, OrientNet, ORIENT_INPUTS};
use crate::posnet::{displacement_loss, evaluate_ate, sample_crops, PosNet, PosNetArch, PosSequence, PosTrainConfig};
use crate::training::{EpochStats, TrainLog};

/// Both networks over one parameter store, so that a single backward pass
/// fills the gradients of each.
#[derive(Clone, Debug)]
pub struct JointModel<T> {
    orient: OrientNet<T>,
    pos: PosNet<T>,
    pub store: ParamStore<T>,
    split: usize,
}

impl<T: Real> JointModel<T> {
    pub fn new(orient: &OrientNet<T>, pos: &PosNet<T>) -> Result<Self> {
        let mut store = ParamStore::new();
        for p in orient.store.iter().chain(pos.store.iter()) {
            if store.find(&p.name).is_some() {
                return Err(Error::Contract(format!("tensor `{}` appears in both networks", p.name)));
            }
            store.add(p.name.clone(), p.tensor.clone());
        }
        Ok(JointModel {
            orient: OrientNet::from_store(orient.arch.clone(), store.clone())?,
            pos: PosNet::from_store(pos.arch.clone(), store.clone())?,
            store,
            split: orient.store.len(),
        })
    }

    /// Whether tensor `name` belongs to the orientation network.
    pub fn is_orient(&self, name: &str) -> bool {
        self.store.iter().take(self.split).any(|p| p.name == name)
    }

    /// Standalone copies of the two networks with the current parameters.
    pub fn parts(&self) -> Result<(OrientNet<T>, PosNet<T>)> {
        let (mut o, mut p) = (ParamStore::new(), ParamStore::new());
        for (i, param) in self.store.iter().enumerate() {
            let dst = if i < self.split { &mut o } else { &mut p };
            dst.add(param.name.clone(), param.tensor.clone());
        }
        Ok((
            OrientNet::from_store(self.orient.arch.clone(), o)?,
            PosNet::from_store(self.pos.arch.clone(), p)?,
        ))
    }

    /// Records the position loss of a batch through both networks. The
    /// orientation network starts from a zero state at the first warm-up
    /// step; `denom` is as in [`crate::posnet::position_loss_tape`].
    pub fn loss_tape(&self, tape: &mut Tape<T>, batch: &JointBatch<T>, denom: usize) -> Result<Var> {
        let rows = batch.rows;
        if batch.orient_steps.len() <= batch.warmup {
            return Err(Error::Shape("joint batch has no steps after the warm-up".into()));
        }
        let window = batch.orient_steps.len() - batch.warmup;
        if batch.accel.len() != window * rows * 3 || batch.gyro.len() != window * rows * 3 {
            return Err(Error::Shape("joint batch inertial data has the wrong length".into()));
        }
        let steps: Vec<Var> = batch
            .orient_steps
            .iter()
            .map(|x| tape.constant(rows, ORIENT_INPUTS, x.clone()))
            .collect();
        let (q, _, _) = self.orient.forward_tape_in(&self.store, tape, &steps, None)?;
        let q = tape.rows_range(q, batch.warmup * rows, window * rows);
        let a = tape.quat_rotate(q, batch.accel.clone());
        let a = tape.scale(a, T::lit(1.0 / STANDARD_GRAVITY));
        let up = tape.constant(
            window * rows,
            3,
            (0..window * rows)
                .flat_map(|_| [T::zero(), T::zero(), T::one()])
                .collect(),
        );
        let a = tape.sub(a, up);
        let w = tape.quat_rotate(q, batch.gyro.clone());
        let (av, wv) = (tape.view(a), tape.view(w));
        let x = tape.concat_cols(&[av, wv]);
        let pos_steps: Vec<Var> = (0..window).map(|t| tape.rows_range(x, t * rows, rows)).collect();
        let est = self.pos.forward_tape_in(&self.store, tape, &pos_steps)?;
        displacement_loss(tape, est, batch.target.clone(), denom)
    }
}

/// Crops for [`JointModel::loss_tape`], all rows step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBatch<T> {
    pub rows: usize,
    pub warmup: usize,
    /// Per step, warm-up first, `rows × 9` orientation-network features.
    pub orient_steps: Vec<Vec<T>>,
    /// `(window·rows) × 3` device-frame specific force, m/s².
    pub accel: Vec<T>,
    /// `(window·rows) × 3` device-frame angular rate, rad/s.
    pub gyro: Vec<T>,
    /// `(window·rows) × 2` true displacements from each crop's anchor.
    pub target: Vec<T>,
}

/// A recording prepared for joint training.
#[derive(Clone, Debug)]
pub struct JointSequence {
    pub orient_feats: Vec<[f64; ORIENT_INPUTS]>,
    pub accel: Vec<[f64; 3]>,
    pub gyro: Vec<[f64; 3]>,
    pub truth: Vec<Point>,
}

impl JointSequence {
    pub fn new(rec: &Recording) -> Result<Self> {
        Ok(JointSequence {
            orient_feats: rec.imu.iter().map(orient_features).collect(),
            accel: rec.imu.iter().map(|s| s.accel.into()).collect(),
            gyro: rec.imu.iter().map(|s| s.gyro.into()).collect(),
            truth: rec.truth()?.xy(),
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

/// Gathers crops `(sequence, start)`; each covers `start..start + window`,
/// is anchored at `start - 1` and is preceded by `warmup` samples.
pub fn joint_batch<T: Real>(
    seqs: &[JointSequence],
    crops: &[(usize, usize)],
    window: usize,
    warmup: usize,
) -> JointBatch<T> {
    let lit = |x: f64| T::lit(x);
    let orient_steps = (0..warmup + window)
        .map(|t| {
            crops
                .iter()
                .flat_map(|&(s, st)| seqs[s].orient_feats[st - warmup + t].map(lit))
                .collect()
        })
        .collect();
    let mut batch = JointBatch {
        rows: crops.len(),
        warmup,
        orient_steps,
        accel: Vec::with_capacity(window * crops.len() * 3),
        gyro: Vec::with_capacity(window * crops.len() * 3),
        target: Vec::with_capacity(window * crops.len() * 2),
    };
    for t in 0..window {
        for &(s, st) in crops {
            let seq = &seqs[s];
            batch.accel.extend(seq.accel[st + t].map(lit));
            batch.gyro.extend(seq.gyro[st + t].map(lit));
            let (a, p) = (seq.truth[st - 1], seq.truth[st + t]);
            batch.target.extend([lit(p[0] - a[0]), lit(p[1] - a[1])]);
        }
    }
    batch
}

/// Mean ATE of chained position inference on the raw orientation outputs.
pub fn evaluate_joint_ate(
    orient: &OrientNet<f32>,
    pos: &PosNet<f32>,
    recs: &[Recording],
    window: usize,
) -> Result<f64> {
    let seqs = recs
        .iter()
        .map(|r| {
            let (est, _) = orient.infer(&r.imu, None)?;
            let q: Vec<_> = est.iter().map(|e| e.q).collect();
            PosSequence::new(r, &q)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_ate(pos, &seqs, window)
}

/// Fine-tunes `orient` together with a position network (`pos`, or a fresh
/// one sized by `cfg`) on random crops through the curriculum of `cfg`.
/// The orientation tensors step with `cfg.joint_orient_lr`. Failure
/// handling and the log match [`crate::posnet::train_posnet`], with the
/// validation ATE taken on raw orientation outputs.
pub fn train_joint(
    orient: &OrientNet<f32>,
    pos: Option<&PosNet<f32>>,
    train: &[Recording],
    val: &[Recording],
    cfg: &PosTrainConfig,
) -> Result<(OrientNet<f32>, PosNet<f32>, TrainLog)> {
    cfg.validate()?;
    let fresh;
    let pos = match pos {
        Some(p) => p,
        None => {
            fresh = PosNet::new(PosNetArch::new(cfg.hidden, cfg.layers), cfg.seed)?;
            &fresh
        }
    };
    let mut model = JointModel::new(orient, pos)?;
    let seqs = train.iter().map(JointSequence::new).collect::<Result<Vec<_>>>()?;
    let longest = *cfg.stages.iter().max().expect("validated");
    let min_start = cfg.joint_warmup.max(1);
    let lens: Vec<usize> = seqs
        .iter()
        .map(|s| if s.len() >= longest + min_start { s.len() } else { 0 })
        .collect();
    if lens.iter().all(|&n| n == 0) {
        return Err(Error::Training(format!(
            "no training sequence covers the {longest}-sample window plus {min_start} warm-up samples"
        )));
    }
    let total: usize = lens.iter().sum();

    let val_ate = |model: &JointModel<f32>| -> Result<Option<f64>> {
        if val.is_empty() {
            return Ok(None);
        }
        let (o, p) = model.parts()?;
        evaluate_joint_ate(&o, &p, val, cfg.infer_window).map(Some)
    };
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &model.store);
    let orient_scale = cfg.joint_orient_lr / cfg.lr;
    adam.set_lr_scale(&model.store, |n| if model.is_orient(n) { orient_scale } else { 1.0 });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a6f_696e);
    let mut tape = Tape::new();
    let mut checkpoint = model.store.clone();
    let mut log = TrainLog::default();
    let mut epoch = 0;
    log.epochs.push(EpochStats {
        epoch,
        window: cfg.stages[0],
        train_loss: f64::NAN,
        val_loss: val_ate(&model)?,
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
                let crops = sample_crops(&mut rng, &lens, batch, window, min_start);
                let mut loss_value = 0.0;
                for micro in crops.chunks(cfg.micro_batch) {
                    tape.reset();
                    let b = joint_batch::<f32>(&seqs, micro, window, cfg.joint_warmup);
                    let loss = model.loss_tape(&mut tape, &b, batch * window)?;
                    loss_value += tape.scalar(loss) as f64;
                    tape.backward(loss, &mut model.store)?;
                }
                let failure = if !loss_value.is_finite() {
                    Some(format!("non-finite loss in epoch {epoch}"))
                } else {
                    clip_grad_norm(&mut model.store, cfg.clip);
                    adam.step(&mut model.store).err().map(|e| e.to_string())
                };
                if let Some(msg) = failure {
                    log::warn!("{msg}; restoring last checkpoint");
                    log.aborted = Some(msg);
                    model.store = checkpoint;
                    break 'stages;
                }
                sum += loss_value;
            }
            let stats = EpochStats {
                epoch,
                window,
                train_loss: sum / steps_per_epoch as f64,
                val_loss: val_ate(&model)?,
            };
            log::info!(
                "joint epoch {epoch} (window {window}): train {:.5} val {}",
                stats.train_loss,
                stats.val_loss.map_or("-".into(), |v| format!("{v:.4}"))
            );
            log.epochs.push(stats);
            checkpoint = model.store.clone();
        }
    }
    let (o, p) = model.parts()?;
    Ok((o, p, log))
}
