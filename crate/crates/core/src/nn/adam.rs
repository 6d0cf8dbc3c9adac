use crate::error::{Error, Result};

use super::{ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    lr_scale: Vec<f64>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            lr_scale: vec![1.0; store.len()],
        }
    }

    /// Multiplies the learning rate of each tensor by `scale(name)`.
    pub fn set_lr_scale(&mut self, store: &ParamStore<T>, scale: impl Fn(&str) -> f64) {
        self.lr_scale = store.iter().map(|p| scale(&p.name)).collect();
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the stored gradients, then clears them.
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for p in store.iter() {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Training(format!("non-finite gradient in `{}`", p.name)));
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for (((p, m), v), &scale) in store.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(&self.lr_scale) {
            let step_size = T::lit(c.lr * scale / bc1);
            let (data, grad) = {
                let t = &mut p.tensor;
                let g: Vec<T> = t.grad().map(|g| g.to_vec()).unwrap_or_default();
                (t, g)
            };
            if grad.is_empty() {
                continue;
            }
            for (((x, &g), mi), vi) in data
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + ob1 * g;
                *vi = b2 * *vi + ob2 * g * g;
                *x -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
            data.zero_grad();
        }
        Ok(())
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm.is_finite() {
        let k = T::lit(max_norm / norm);
        for p in store.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn scalar_store(x: f64) -> (ParamStore<f64>, crate::nn::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::new(vec![1], vec![x]).unwrap());
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = scalar_store(1.25);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(id).data()[0], 1.25);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &s);
        s.get_mut(id).grad_mut().unwrap()[0] = -3.7;
        adam.step(&mut s).unwrap();
        assert!((s.get(id).data()[0] - 0.01).abs() < 1e-9);
        assert_eq!(s.get(id).grad().unwrap()[0], 0.0);
    }

    #[test]
    fn lr_scale_applies_per_tensor() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::new(vec![1], vec![0.0]).unwrap());
        let b = s.add("b", Tensor::new(vec![1], vec![0.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::with_lr(0.01), &s);
        adam.set_lr_scale(&s, |n| if n == "b" { 0.1 } else { 1.0 });
        s.get_mut(a).grad_mut().unwrap()[0] = 2.0;
        s.get_mut(b).grad_mut().unwrap()[0] = 2.0;
        adam.step(&mut s).unwrap();
        assert!((s.get(a).data()[0] + 0.01).abs() < 1e-9);
        assert!((s.get(b).data()[0] + 0.001).abs() < 1e-9);
    }

    #[test]
    fn three_steps_match_hand_recurrence() {
        // Gradients 1, -2, 0.5 with lr 0.1 starting at x = 1:
        // t=1: m=0.1    v=0.001     x=0.900000001
        // t=2: m=-0.11  v=0.004999  x=0.93661035347
        // t=3: m=-0.049 v=0.005244  x=0.95027941967
        let grads = [1.0, -2.0, 0.5];
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 0.1, 1e-8);
        let (mut m, mut v, mut x) = (0.0, 0.0, 1.0);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        // Frozen from the recurrence above.
        assert!((x - 0.950_279_419_673_821_6_f64).abs() < 1e-12, "{x}");

        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &s);
        for g in grads {
            s.get_mut(id).grad_mut().unwrap()[0] = g;
            adam.step(&mut s).unwrap();
        }
        assert!((s.get(id).data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_reported() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        s.get_mut(id).grad_mut().unwrap()[0] = f64::NAN;
        assert!(matches!(adam.step(&mut s), Err(Error::Training(_))));
        assert_eq!(s.get(id).data()[0], 0.0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        s.get_mut(a).grad_mut().unwrap().copy_from_slice(&[30.0, 40.0]);
        assert_eq!(clip_grad_norm(&mut s, 5.0), 50.0);
        assert!((s.grad_norm() - 5.0).abs() < 1e-12);
    }
}
