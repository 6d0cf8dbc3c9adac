use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Real;

/// Seeded source for weight initialization.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// `U(-b, b)` with `b = sqrt(3 / fan_in)` (unit output variance for unit inputs).
pub fn kaiming_uniform<T: Real>(init: &mut Initializer, fan_in: usize, n: usize) -> Vec<T> {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::lit(init.rng.random_range(-bound..bound))).collect()
}

/// Square orthogonal matrix (row-major, `n × n`) from the QR factorization of
/// a Gaussian matrix, with the sign convention that makes it Haar distributed.
pub fn orthogonal<T: Real>(init: &mut Initializer, n: usize) -> Vec<T> {
    let a = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut init.rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(T::lit(q[(i, j)]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_is_orthogonal() {
        let n = 7;
        let q: Vec<f64> = orthogonal(&mut Initializer::new(3), n);
        for i in 0..n {
            for j in 0..n {
                let d: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((d - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kaiming_is_bounded_and_seeded() {
        let a: Vec<f64> = kaiming_uniform(&mut Initializer::new(1), 12, 100);
        let b: Vec<f64> = kaiming_uniform(&mut Initializer::new(1), 12, 100);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.abs() <= 0.5));
    }
}
