use serde::{Deserialize, Serialize};

use super::array::{Result, Tensor, TensorError};
use super::params::{Gradients, ParamStore};
use super::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T = f32> {
    pub config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let m: Vec<_> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self { config, v: m.clone(), m, step: 0 }
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn from_state(config: AdamWConfig, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>, step: u64) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(TensorError::invalid("adamw", "first/second moment buffers disagree"));
        }
        Ok(Self { config, m, v, step })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One update of every trainable parameter that received a gradient.
    ///
    /// A non-finite gradient aborts before any parameter or moment is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if let Some(id) = grads.first_non_finite() {
            return Err(TensorError::NonFinite {
                op: "adamw_step",
                detail: format!(" in gradient of {}", store.name(id)),
            });
        }
        if self.m.len() != store.len() {
            return Err(TensorError::invalid(
                "adamw_step",
                format!("optimizer tracks {} parameters, store has {}", self.m.len(), store.len()),
            ));
        }
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if g.shape() != store.get(id).shape() {
                    return Err(TensorError::Shape {
                        op: "adamw_step",
                        lhs: store.get(id).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);

        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = store.get_mut(id).data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *w *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w));
        s
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut store = scalar_store(2.0);
        let id = store.find("w").unwrap();
        let cfg = AdamWConfig { lr: 1e-4, weight_decay: 0.01, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        let grads = Gradients::from_vec(vec![Some(Tensor::scalar(0.0))]);
        opt.step(&mut store, &grads).unwrap();
        assert!((store.get(id).item() - 2.0 * (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let (w0, g, lr, wd, b1, b2, eps) = (0.7f64, -0.3f64, 1e-3, 0.01, 0.9, 0.95, 1e-8);
        let mut store = scalar_store(w0);
        let cfg = AdamWConfig { lr, beta1: b1, beta2: b2, eps, weight_decay: wd };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &Gradients::from_vec(vec![Some(Tensor::scalar(g))])).unwrap();
        // hand expansion: m = (1-b1) g, v = (1-b2) g^2, mhat = g, vhat = g^2
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let expected = w0 * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
        let got = store.get(store.find("w").unwrap()).item();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn default_betas() {
        let c = AdamWConfig::default();
        assert_eq!((c.beta1, c.beta2), (0.9, 0.95));
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.weight_decay, 0.01);
    }

    #[test]
    fn non_finite_gradient_leaves_parameters_untouched() {
        let mut store = scalar_store(1.5);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let err = opt.step(&mut store, &Gradients::from_vec(vec![Some(Tensor::scalar(f64::NAN))]));
        assert!(matches!(err, Err(TensorError::NonFinite { .. })));
        assert_eq!(store.get(store.find("w").unwrap()).item(), 1.5);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = scalar_store(1.5);
        let id = store.find("w").unwrap();
        store.set_trainable(id, false);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        opt.step(&mut store, &Gradients::from_vec(vec![Some(Tensor::scalar(3.0))])).unwrap();
        assert_eq!(store.get(id).item(), 1.5);
    }
}
