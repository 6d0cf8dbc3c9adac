use inertial_odometry::nn::{ParamStore, Tape};
use inertial_odometry::orient::{OrientBatch, OrientNet, OrientNetArch, ORIENT_INPUTS};
use inertial_odometry::posnet::{position_loss_tape, PosNet, PosNetArch, POS_INPUTS};
use inertial_odometry::quat::{UnitQuaternion, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;
pub const WINDOW: usize = 10;
pub const ROWS: usize = 2;

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub failures: Vec<String>,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` among
    /// entries above the absolute floor.
    pub worst_rel: f64,
}

fn shift(store: &mut ParamStore<f64>, mut k: usize, delta: f64) {
    for p in store.iter_mut() {
        let n = p.tensor.len();
        if k < n {
            p.tensor.data_mut()[k] += delta;
            return;
        }
        k -= n;
    }
    panic!("flat index out of range");
}

/// Central differences of `loss` against `analytic` for every scalar of `store`.
fn compare(store: &mut ParamStore<f64>, analytic: &[f64], loss: impl Fn(&ParamStore<f64>) -> f64) -> GradReport {
    let mut report = GradReport::default();
    for (k, &a) in analytic.iter().enumerate() {
        shift(store, k, FD_STEP);
        let up = loss(store);
        shift(store, k, -2.0 * FD_STEP);
        let down = loss(store);
        shift(store, k, FD_STEP);
        let fd = (up - down) / (2.0 * FD_STEP);
        let diff = (a - fd).abs();
        let scale = a.abs().max(fd.abs());
        if diff > ABS_FLOOR {
            report.worst_rel = report.worst_rel.max(diff / scale);
        }
        if diff > (REL_TOL * scale).max(ABS_FLOOR) {
            report
                .failures
                .push(format!("param {k}: analytic {a:e}, numeric {fd:e}"));
        }
        report.checked += 1;
    }
    report
}

fn orient_batch(rng: &mut ChaCha8Rng) -> OrientBatch<f64> {
    let steps = (0..WINDOW)
        .map(|_| (0..ROWS * ORIENT_INPUTS).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let truth = (0..WINDOW * ROWS)
        .flat_map(|_| {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            UnitQuaternion::exp(&v).unwrap().to_array()
        })
        .collect();
    OrientBatch {
        rows: ROWS,
        steps,
        truth,
    }
}

/// `nll_loss` (mean over a batch) through a hidden-8 orientation network.
pub fn check_orient(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = OrientNet::<f64>::new(OrientNetArch::new(8, 2), seed).unwrap();
    let batch = orient_batch(&mut rng);
    let mut tape = Tape::new();
    let (l, _) = net.batch_loss(&mut tape, &batch, None).unwrap();
    tape.backward(l, &mut net.store).unwrap();
    let analytic = net.store.flatten_grads();
    let arch = net.arch.clone();
    compare(&mut net.store, &analytic, |store| {
        let n = OrientNet::from_store(arch.clone(), store.clone()).unwrap();
        let mut t = Tape::new();
        let (l, _) = n.batch_loss(&mut t, &batch, None).unwrap();
        t.scalar(l)
    })
}

/// `position_loss` through a hidden-8 position network.
pub fn check_pos(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = PosNet::<f64>::new(PosNetArch::new(8, 2), seed).unwrap();
    let inputs: Vec<Vec<f64>> = (0..WINDOW)
        .map(|_| (0..ROWS * POS_INPUTS).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let target: Vec<f64> = (0..WINDOW * ROWS * 2).map(|_| rng.random_range(-0.2..0.2)).collect();
    let loss = |n: &PosNet<f64>, tape: &mut Tape<f64>| {
        let steps: Vec<_> = inputs
            .iter()
            .map(|x| tape.constant(ROWS, POS_INPUTS, x.clone()))
            .collect();
        position_loss_tape(n, tape, &steps, target.clone(), ROWS * WINDOW).unwrap()
    };
    let mut tape = Tape::new();
    let l = loss(&net, &mut tape);
    tape.backward(l, &mut net.store).unwrap();
    let analytic = net.store.flatten_grads();
    let arch = net.arch.clone();
    compare(&mut net.store, &analytic, |store| {
        let n = PosNet::from_store(arch.clone(), store.clone()).unwrap();
        let mut t = Tape::new();
        let l = loss(&n, &mut t);
        t.scalar(l)
    })
}
