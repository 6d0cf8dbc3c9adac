//! Learned orientation estimator: a stacked LSTM over raw IMU samples with
//! a quaternion head and a covariance head, trained with the manifold
//! Gaussian NLL.

use std::path::Path;

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::{ImuSample, Recording, STANDARD_GRAVITY};
use crate::nn::{
    clip_grad_norm, lstm_forward, read_weights, write_weights, Activation, Adam, AdamConfig, DenseLayer, HiddenState,
    Initializer, LstmLayer, ParamStore, Real, Tape, Var,
};
use crate::quat::UnitQuaternion;
use crate::training::{EpochStats, TrainLog};

/// Magnetometer input scale, µT.
pub const MAG_SCALE: f64 = 50.0;
pub const ORIENT_INPUTS: usize = 9;

/// Absolute orientation with its tangent-space error covariance (rad²).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientationEstimate {
    pub q: UnitQuaternion,
    pub cov: Matrix3<f64>,
}

/// Maps six raw parameters to an SPD covariance.
///
/// `σᵢ = exp(pᵢ)`; `z = 0.99·tanh(p₃..₅)` gives the 1-2 and 1-3 correlations
/// directly and the 2-3 correlation through its partial correlation given
/// axis 1. If rounding still breaks positive definiteness, `εI` jitter is
/// added starting from 1e-9.
pub fn cov_from_params(p: &[f64; 6]) -> Matrix3<f64> {
    let e = crate::nn::cov_entries(p);
    let m = Matrix3::new(e[0], e[3], e[4], e[3], e[1], e[5], e[4], e[5], e[2]);
    if m.cholesky().is_some() {
        return m;
    }
    let mut eps = 1e-9;
    loop {
        let j = m + Matrix3::identity() * eps;
        if j.cholesky().is_some() {
            log::warn!("covariance repaired with {eps} jitter");
            return j;
        }
        eps *= 10.0;
    }
}

/// `½ rᵀΣ⁻¹r + ½ ln|Σ|` with `r = truth ⊟ q̂`.
pub fn nll_loss(truth: &UnitQuaternion, est: &OrientationEstimate) -> Result<f64> {
    let r = truth.boxminus(&est.q);
    let chol = est
        .cov
        .cholesky()
        .ok_or_else(|| Error::Domain("covariance is not positive definite".into()))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let sol = chol.solve(&r);
    Ok(0.5 * r.dot(&sol) + 0.5 * logdet)
}

/// Network input for one sample: `[a/g, ω, B/50]`.
pub fn orient_features<T: Real>(s: &ImuSample) -> [T; ORIENT_INPUTS] {
    let a = s.accel / STANDARD_GRAVITY;
    let b = s.mag / MAG_SCALE;
    [a.x, a.y, a.z, s.gyro.x, s.gyro.y, s.gyro.z, b.x, b.y, b.z].map(T::lit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientNetArch {
    pub kind: String,
    pub hidden: usize,
    pub layers: usize,
    /// Width of the first dense layer of each head.
    pub head_hidden: usize,
}

impl OrientNetArch {
    pub const KIND: &'static str = "orientnet";

    pub fn new(hidden: usize, layers: usize) -> Self {
        OrientNetArch {
            kind: Self::KIND.into(),
            hidden,
            layers,
            head_hidden: hidden,
        }
    }
}

impl Default for OrientNetArch {
    fn default() -> Self {
        OrientNetArch::new(100, 2)
    }
}

/// One training window for a batch of lanes.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientBatch<T> {
    pub rows: usize,
    /// Per step, `rows × 9` features.
    pub steps: Vec<Vec<T>>,
    /// `(steps · rows) × 4` true quaternions, step-major.
    pub truth: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct OrientNet<T> {
    pub arch: OrientNetArch,
    pub store: ParamStore<T>,
    lstm: Vec<LstmLayer>,
    quat_a: DenseLayer,
    quat_b: DenseLayer,
    cov_a: DenseLayer,
    cov_b: DenseLayer,
}

impl<T: Real> OrientNet<T> {
    pub fn new(arch: OrientNetArch, seed: u64) -> Result<Self> {
        validate_arch(&arch)?;
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        let (h, hh) = (arch.hidden, arch.head_hidden);
        let lstm = (0..arch.layers)
            .map(|l| {
                let input = if l == 0 { ORIENT_INPUTS } else { h };
                LstmLayer::new(&mut store, &format!("lstm{l}"), input, h, &mut init)
            })
            .collect();
        let quat_a = DenseLayer::new(&mut store, "quat.0", h, hh, Activation::Tanh, &mut init);
        let quat_b = DenseLayer::new(&mut store, "quat.1", hh, 4, Activation::Identity, &mut init);
        let cov_a = DenseLayer::new(&mut store, "cov.0", h, hh, Activation::Tanh, &mut init);
        let cov_b = DenseLayer::new(&mut store, "cov.1", hh, 6, Activation::Identity, &mut init);
        Ok(OrientNet {
            arch,
            store,
            lstm,
            quat_a,
            quat_b,
            cov_a,
            cov_b,
        })
    }

    /// Attaches an architecture to existing tensors, checking names and shapes.
    pub fn from_store(arch: OrientNetArch, store: ParamStore<T>) -> Result<Self> {
        validate_arch(&arch)?;
        let (h, hh) = (arch.hidden, arch.head_hidden);
        let lstm = (0..arch.layers)
            .map(|l| {
                let input = if l == 0 { ORIENT_INPUTS } else { h };
                LstmLayer::bind(&store, &format!("lstm{l}"), input, h)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OrientNet {
            quat_a: DenseLayer::bind(&store, "quat.0", h, hh, Activation::Tanh)?,
            quat_b: DenseLayer::bind(&store, "quat.1", hh, 4, Activation::Identity)?,
            cov_a: DenseLayer::bind(&store, "cov.0", h, hh, Activation::Tanh)?,
            cov_b: DenseLayer::bind(&store, "cov.1", hh, 6, Activation::Identity)?,
            arch,
            store,
            lstm,
        })
    }

    pub fn cast<U: Real>(&self) -> OrientNet<U> {
        OrientNet::from_store(self.arch.clone(), self.store.cast()).expect("same layout")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_weights(path, &self.arch, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = read_weights(path)?;
        let arch: OrientNetArch = file.architecture()?;
        if arch.kind != OrientNetArch::KIND {
            return Err(Error::WeightFile(format!(
                "{} holds a `{}` network, expected `{}`",
                path.display(),
                arch.kind,
                OrientNetArch::KIND
            )));
        }
        Self::from_store(arch, file.into_store())
    }

    /// Records the network over a window. `steps[t]` are `rows × 9` nodes.
    ///
    /// Returns the normalized quaternions and the raw covariance parameters,
    /// both stacked step-major (`(T·rows) × 4` and `(T·rows) × 6`), and the
    /// final recurrent state.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        steps: &[Var],
        state: Option<&HiddenState<T>>,
    ) -> Result<(Var, Var, HiddenState<T>)> {
        self.forward_tape_in(&self.store, tape, steps, state)
    }

    /// [`forward_tape`](Self::forward_tape) reading the parameters from
    /// `store`, which must share this network's layout.
    pub(crate) fn forward_tape_in(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        steps: &[Var],
        state: Option<&HiddenState<T>>,
    ) -> Result<(Var, Var, HiddenState<T>)> {
        let (top, next) = lstm_forward(tape, store, &self.lstm, steps, state)?;
        let h = self.arch.hidden;
        let views: Vec<_> = top.iter().map(|&hc| tape.cols(hc, 0, h)).collect();
        let feats = tape.stack_rows(&views);
        let fv = tape.view(feats);
        let qa = self.quat_a.forward(tape, store, fv)?;
        let qa = tape.view(qa);
        let qraw = self.quat_b.forward(tape, store, qa)?;
        let q = tape.normalize_rows(qraw);
        let ca = self.cov_a.forward(tape, store, fv)?;
        let ca = tape.view(ca);
        let cp = self.cov_b.forward(tape, store, ca)?;
        Ok((q, cp, next))
    }

    /// Mean NLL over every step and lane of a window.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        batch: &OrientBatch<T>,
        state: Option<&HiddenState<T>>,
    ) -> Result<(Var, HiddenState<T>)> {
        if batch.truth.len() != batch.steps.len() * batch.rows * 4 {
            return Err(Error::Shape("orientation batch truth has the wrong length".into()));
        }
        let steps: Vec<Var> = batch
            .steps
            .iter()
            .map(|x| tape.constant(batch.rows, ORIENT_INPUTS, x.clone()))
            .collect();
        let (q, cp, next) = self.forward_tape(tape, &steps, state)?;
        let delta = tape.quat_boxminus(q, batch.truth.clone());
        let cov = tape.cov_from_params(cp);
        let nll = tape.gaussian_nll(delta, cov);
        Ok((tape.mean(nll), next))
    }

    pub fn zero_state(&self, rows: usize) -> HiddenState<T> {
        HiddenState::zeros(self.arch.layers, rows, self.arch.hidden)
    }

    /// Per-sample estimates for one stream, carrying the recurrent state
    /// from `state` (zeros when `None`).
    pub fn infer(
        &self,
        imu: &[ImuSample],
        state: Option<&HiddenState<T>>,
    ) -> Result<(Vec<OrientationEstimate>, HiddenState<T>)> {
        const CHUNK: usize = 256;
        if imu.is_empty() {
            return Err(Error::Inference("empty IMU window".into()));
        }
        if let Some(k) = imu.iter().position(|s| !s.is_finite()) {
            return Err(Error::Inference(format!("non-finite IMU input at sample {k}")));
        }
        let mut state = state.cloned().unwrap_or_else(|| self.zero_state(1));
        let mut out = Vec::with_capacity(imu.len());
        let mut tape = Tape::new();
        for chunk in imu.chunks(CHUNK) {
            tape.reset();
            let steps: Vec<Var> = chunk
                .iter()
                .map(|s| tape.constant(1, ORIENT_INPUTS, orient_features(s).to_vec()))
                .collect();
            let (q, cp, next) = self.forward_tape(&mut tape, &steps, Some(&state))?;
            let (qv, pv) = (tape.value(q), tape.value(cp));
            for k in 0..chunk.len() {
                let qk = &qv[4 * k..4 * k + 4];
                let pk = &pv[6 * k..6 * k + 6];
                let q = UnitQuaternion::new(qk[0].as_f64(), qk[1].as_f64(), qk[2].as_f64(), qk[3].as_f64())
                    .map_err(|e| Error::Inference(e.to_string()))?;
                let p: [f64; 6] = std::array::from_fn(|i| pk[i].as_f64());
                if p.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Inference("non-finite covariance output".into()));
                }
                out.push(OrientationEstimate {
                    q,
                    cov: cov_from_params(&p),
                });
            }
            state = next;
        }
        Ok((out, state))
    }
}

fn validate_arch(arch: &OrientNetArch) -> Result<()> {
    if arch.hidden == 0 || arch.layers == 0 || arch.head_hidden == 0 {
        return Err(Error::Config("orientation network sizes must be positive".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrientTrainConfig {
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    /// Lanes per batch.
    pub batch: usize,
    pub epochs: usize,
    /// Truncated-backprop window, samples.
    pub window: usize,
    /// Contiguous lane length; state is carried across its windows.
    pub segment: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for OrientTrainConfig {
    fn default() -> Self {
        OrientTrainConfig {
            hidden: 100,
            layers: 2,
            lr: 5e-4,
            batch: 64,
            epochs: 20,
            window: 200,
            segment: 2000,
            clip: 5.0,
            seed: 0,
        }
    }
}

impl OrientTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.window == 0 || self.segment < self.window {
            return Err(Error::Config(
                "orientation training needs batch > 0 and segment >= window > 0".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Mean per-sample NLL of a network over whole recordings.
pub fn evaluate_nll<T: Real>(net: &OrientNet<T>, recs: &[Recording]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for rec in recs {
        let truth = rec.truth()?.orientations()?;
        let (est, _) = net.infer(&rec.imu, None)?;
        for (q, e) in truth.iter().zip(&est) {
            sum += nll_loss(q, e)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    Ok(sum / n as f64)
}

/// Trains an orientation network with Adam over lanes of contiguous
/// segments, truncating backpropagation at `window` samples and carrying the
/// detached recurrent state across the windows of a segment.
///
/// On a non-finite loss, training stops and the weights from the end of the
/// last completed epoch are returned, with the reason in the log.
pub fn train_orientnet(
    train: &[Recording],
    val: &[Recording],
    cfg: &OrientTrainConfig,
) -> Result<(OrientNet<f32>, TrainLog)> {
    cfg.validate()?;
    let mut net = OrientNet::<f32>::new(OrientNetArch::new(cfg.hidden, cfg.layers), cfg.seed)?;

    let mut feats = Vec::with_capacity(train.len());
    let mut truths = Vec::with_capacity(train.len());
    let mut segments = Vec::new();
    for (r, rec) in train.iter().enumerate() {
        let q = rec.truth()?.orientations()?;
        feats.push(rec.imu.iter().map(orient_features::<f32>).collect::<Vec<_>>());
        truths.push(q.iter().map(|q| q.to_array().map(|x| x as f32)).collect::<Vec<_>>());
        let mut start = 0;
        while start + cfg.segment <= rec.imu.len() {
            segments.push((r, start));
            start += cfg.segment;
        }
    }
    if segments.is_empty() {
        return Err(Error::Training(format!(
            "no training recording holds a full segment of {} samples",
            cfg.segment
        )));
    }

    let mut log = TrainLog::default();
    log.epochs.push(EpochStats {
        epoch: 0,
        window: cfg.window,
        train_loss: evaluate_nll(&net, train)?,
        val_loss: if val.is_empty() {
            None
        } else {
            Some(evaluate_nll(&net, val)?)
        },
    });

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &net.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6f72_6965);
    let mut tape = Tape::new();
    let mut checkpoint = net.store.clone();
    let windows = cfg.segment / cfg.window;

    'epochs: for epoch in 1..=cfg.epochs {
        segments.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for lanes in segments.chunks(cfg.batch) {
            let rows = lanes.len();
            let mut state: Option<HiddenState<f32>> = None;
            for w in 0..windows {
                let off = w * cfg.window;
                let mut batch = OrientBatch {
                    rows,
                    steps: Vec::with_capacity(cfg.window),
                    truth: Vec::with_capacity(cfg.window * rows * 4),
                };
                for t in 0..cfg.window {
                    let mut x = Vec::with_capacity(rows * ORIENT_INPUTS);
                    for &(r, start) in lanes {
                        x.extend_from_slice(&feats[r][start + off + t]);
                        batch.truth.extend_from_slice(&truths[r][start + off + t]);
                    }
                    batch.steps.push(x);
                }
                tape.reset();
                let (loss, next) = net.batch_loss(&mut tape, &batch, state.as_ref())?;
                let value = tape.scalar(loss).as_f64();
                if !value.is_finite() {
                    log::warn!("non-finite loss in epoch {epoch}; restoring last checkpoint");
                    log.aborted = Some(format!("non-finite loss in epoch {epoch}"));
                    net.store = checkpoint;
                    break 'epochs;
                }
                tape.backward(loss, &mut net.store)?;
                clip_grad_norm(&mut net.store, cfg.clip);
                if let Err(e) = adam.step(&mut net.store) {
                    log::warn!("{e}; restoring last checkpoint");
                    log.aborted = Some(e.to_string());
                    net.store = checkpoint;
                    break 'epochs;
                }
                state = Some(next);
                sum += value;
                count += 1;
            }
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_nll(&net, val)?)
        };
        log::info!(
            "orient epoch {epoch}: train {:.4} val {}",
            sum / count as f64,
            val_loss.map_or("-".into(), |v| format!("{v:.4}"))
        );
        log.epochs.push(EpochStats {
            epoch,
            window: cfg.window,
            train_loss: sum / count as f64,
            val_loss,
        });
        checkpoint = net.store.clone();
    }
    let net = OrientNet::from_store(net.arch.clone(), net.store)?;
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::Vec3;

    fn stream(n: usize, seed: u64) -> Vec<ImuSample> {
        (0..n)
            .map(|k| {
                let x = (k as f64 + seed as f64) * 0.37;
                ImuSample {
                    t: k as f64 * 0.01,
                    accel: Vec3::new(x.sin(), x.cos(), 9.8),
                    gyro: Vec3::new(0.1 * x.cos(), 0.0, 0.2),
                    mag: Vec3::new(20.0, 3.0 * x.sin(), -40.0),
                }
            })
            .collect()
    }

    #[test]
    fn cov_from_params_examples() {
        assert_eq!(cov_from_params(&[0.0; 6]), Matrix3::identity());
        let l2 = 2f64.ln();
        let c = cov_from_params(&[l2, l2, l2, 0.0, 0.0, 0.0]);
        assert!((c - Matrix3::identity() * 4.0).abs().max() < 1e-12);
    }

    #[test]
    fn random_params_always_factor() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1_000_000 {
            let p: [f64; 6] = std::array::from_fn(|_| rng.random_range(-5.0..=5.0));
            let c = cov_from_params(&p);
            assert!(c.cholesky().is_some(), "{p:?}");
            assert_eq!(c, c.transpose());
        }
    }

    #[test]
    fn nll_examples() {
        let q = UnitQuaternion::from_euler(0.1, 0.2, 0.3);
        let est = |q, s: f64| OrientationEstimate {
            q,
            cov: Matrix3::identity() * s,
        };
        assert!(nll_loss(&q, &est(q, 1.0)).unwrap().abs() < 1e-15);
        let off = q.boxplus(&Vec3::new(1.0, 0.0, 0.0));
        assert!((nll_loss(&off, &est(q, 1.0)).unwrap() - 0.5).abs() < 1e-12);
        let e2 = std::f64::consts::E.powi(2);
        assert!((nll_loss(&q, &est(q, e2)).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn isotropic_nll_minimized_at_mean_square() {
        let q = UnitQuaternion::IDENTITY;
        let r = Vec3::new(0.3, -0.2, 0.1);
        let truth = q.boxplus(&r);
        let f = |s2: f64| {
            nll_loss(
                &truth,
                &OrientationEstimate {
                    q,
                    cov: Matrix3::identity() * s2,
                },
            )
            .unwrap()
        };
        let s2 = r.norm_squared() / 3.0;
        let h = 1e-6;
        assert!(((f(s2 + h) - f(s2 - h)) / (2.0 * h)).abs() < 1e-6);
        assert!(f(s2) < f(1.5 * s2) && f(s2) < f(0.5 * s2));
    }

    #[test]
    fn outputs_are_unit_and_spd() {
        let net = OrientNet::<f64>::new(OrientNetArch::new(8, 2), 3).unwrap();
        let (est, _) = net.infer(&stream(50, 0), None).unwrap();
        assert_eq!(est.len(), 50);
        for e in &est {
            let n: f64 = e.q.to_array().iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert!(e.cov.cholesky().is_some());
            assert_eq!(e.cov, e.cov.transpose());
        }
    }

    #[test]
    fn forward_is_causal() {
        let net = OrientNet::<f64>::new(OrientNetArch::new(8, 2), 5).unwrap();
        let a = stream(30, 0);
        let mut b = a.clone();
        for s in &mut b[20..] {
            s.mag *= -3.0;
            s.gyro.x += 1.0;
        }
        let (ea, _) = net.infer(&a, None).unwrap();
        let (eb, _) = net.infer(&b, None).unwrap();
        assert_eq!(ea[..20], eb[..20]);
        assert_ne!(ea[25], eb[25]);
    }

    #[test]
    fn chunked_inference_matches_one_pass() {
        let net = OrientNet::<f64>::new(OrientNetArch::new(8, 2), 5).unwrap();
        let s = stream(600, 1);
        let (all, _) = net.infer(&s, None).unwrap();
        let (first, st) = net.infer(&s[..250], None).unwrap();
        let (second, _) = net.infer(&s[250..], Some(&st)).unwrap();
        assert_eq!(all[..250], first[..]);
        assert_eq!(all[250..], second[..]);
    }

    #[test]
    fn nan_input_is_an_inference_error() {
        let net = OrientNet::<f32>::new(OrientNetArch::new(4, 1), 0).unwrap();
        let mut s = stream(5, 0);
        s[3].gyro.y = f64::NAN;
        assert!(matches!(net.infer(&s, None), Err(Error::Inference(_))));
    }

    #[test]
    fn weights_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.ifw");
        let net = OrientNet::<f32>::new(OrientNetArch::new(8, 2), 9).unwrap();
        net.save(&path).unwrap();
        let back = OrientNet::<f32>::load(&path).unwrap();
        let s = stream(40, 2);
        assert_eq!(net.infer(&s, None).unwrap().0, back.infer(&s, None).unwrap().0);
        let bytes = std::fs::read(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }
}
