//! AdamW with decoupled weight decay and a constant learning rate.

use htmnet_core::params::ParamStore;
use htmnet_core::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments are kept in f64 whatever the parameter type.
pub struct AdamW {
    cfg: AdamWConfig,
    step: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamW {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; `None`
    /// means the parameter did not reach the loss and only decays.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.step += 1;
        let AdamWConfig {
            lr,
            betas: (b1, b2),
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = store.get(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = g.as_ref().map(|g| g.data());
            let updated: Vec<T> = p
                .data()
                .iter()
                .enumerate()
                .map(|(j, &w)| {
                    let w = w.f64();
                    let gj = g.map_or(0.0, |g| g[j].f64());
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                    let adam = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    T::of(w - lr * (adam + weight_decay * w))
                })
                .collect();
            let shape = p.shape().to_vec();
            store.set(i, Tensor::new(&shape, updated).expect("shape preserved"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut rng = htmnet_core::params::init_rng(0);
        let mut pb = htmnet_core::params::ParamBuilder::new(&mut s, &mut rng);
        let v = values.to_vec();
        pb.from_fn("w", &[values.len()], move |i| v[i]);
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction the first Adam step is lr·g/(|g|+eps).
        let mut s = store(&[1.0, -2.0, 0.5]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        let g = Tensor::from_f64(&[3], &[3.0, -0.25, 0.0]).unwrap();
        opt.step(&mut s, &[Some(g)]);
        let w = s.get(0).to_f64_vec();
        assert!((w[0] - (1.0 - 1e-3 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 1e-3 * 0.25 / (0.25 + 1e-8))).abs() < 1e-15);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let mut s = store(&[2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, &[None]);
        assert!((s.get(0).item() - (2.0 - 1e-3 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_freezes_parameters() {
        let mut s = store(&[0.3, 0.7]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.0,
                ..AdamWConfig::default()
            },
            &s,
        );
        let g = Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap();
        for _ in 0..3 {
            opt.step(&mut s, &[Some(g.clone())]);
        }
        assert_eq!(s.get(0).to_f64_vec(), vec![0.3, 0.7]);
        assert_eq!(opt.steps_taken(), 3);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut s = store(&[5.0]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &s,
        );
        for _ in 0..500 {
            let w = s.get(0).item();
            let g = Tensor::from_f64(&[1], &[2.0 * (w - 1.0)]).unwrap();
            opt.step(&mut s, &[Some(g)]);
        }
        assert!((s.get(0).item() - 1.0).abs() < 1e-2);
    }
}
