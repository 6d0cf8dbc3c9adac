use std::f64::consts::{FRAC_PI_2, PI};

use inertial_odometry::quat::{TangentVector, UnitQuaternion, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-9;

/// Uniform direction, magnitude uniform in `[0, max)`.
pub fn tangent(rng: &mut impl Rng, max: f64) -> TangentVector {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n * rng.random_range(0.0..max);
        }
    }
}

pub fn quaternion(rng: &mut impl Rng) -> UnitQuaternion {
    loop {
        let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if let Ok(q) = UnitQuaternion::from_array(c) {
            return q;
        }
    }
}

fn norm_error(q: &UnitQuaternion) -> f64 {
    (q.to_array().iter().map(|c| c * c).sum::<f64>().sqrt() - 1.0).abs()
}

fn check_unit(q: &UnitQuaternion, what: &str) -> Result<(), String> {
    if norm_error(q) > TOL || q.w() < 0.0 {
        return Err(format!("{what}: {q:?} is off the canonical unit sphere"));
    }
    Ok(())
}

fn check_close(a: &Vec3, b: &Vec3, what: &str) -> Result<(), String> {
    let e = (a - b).norm();
    if e > TOL {
        return Err(format!("{what}: {a:?} vs {b:?} (error {e:e})"));
    }
    Ok(())
}

fn same_rotation(a: &UnitQuaternion, b: &UnitQuaternion) -> f64 {
    let (a, b) = (a.to_array(), b.to_array());
    let d = |s: f64| (0..4).map(|i| (a[i] - s * b[i]).powi(2)).sum::<f64>().sqrt();
    d(1.0).min(d(-1.0))
}

/// One randomized case of every roundtrip and invariant.
pub fn check_case(rng: &mut impl Rng) -> Result<(), String> {
    let q = quaternion(rng);
    let r = quaternion(rng);
    check_unit(&q, "construction")?;

    // exp/log: the logarithm of a canonical quaternion has norm below π/2.
    let d = tangent(rng, FRAC_PI_2 * 0.999);
    let e = UnitQuaternion::exp(&d).map_err(|e| e.to_string())?;
    check_unit(&e, "exp")?;
    check_close(&e.log(), &d, "log(exp(δ))")?;
    let back = UnitQuaternion::exp(&q.log()).map_err(|e| e.to_string())?;
    if same_rotation(&back, &q) > TOL {
        return Err(format!("exp(log(q)) drifted from {q:?}"));
    }

    // boxplus/boxminus on full rotation vectors.
    let d = tangent(rng, PI * 0.999);
    let p = q.boxplus(&d);
    check_unit(&p, "boxplus")?;
    check_close(&p.boxminus(&q), &d, "(q ⊞ δ) ⊟ q")?;
    let m = r.boxminus(&q);
    if m.norm() > PI + TOL {
        return Err(format!("boxminus norm {} exceeds π", m.norm()));
    }
    if same_rotation(&q.boxplus(&m), &r) > TOL {
        return Err("q ⊞ (r ⊟ q) differs from r".into());
    }

    // Double cover: q and −q describe the same rotation.
    let c = q.to_array();
    let neg = UnitQuaternion::new(-c[0], -c[1], -c[2], -c[3]).map_err(|e| e.to_string())?;
    if same_rotation(&neg, &q) > TOL || (neg.to_rotation_matrix() - q.to_rotation_matrix()).abs().max() > TOL {
        return Err("−q and q differ as rotations".into());
    }
    let u = tangent(rng, 10.0);
    check_close(&neg.rotate(&u), &q.rotate(&u), "rotation by −q")?;
    let pq = q * r;
    check_unit(&pq, "product")?;
    check_close(&pq.rotate(&u), &q.rotate(&r.rotate(&u)), "composition")?;
    Ok(())
}

pub fn run(cases: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..cases {
        check_case(&mut rng).map_err(|e| format!("case {k}: {e}"))?;
    }
    Ok(())
}
