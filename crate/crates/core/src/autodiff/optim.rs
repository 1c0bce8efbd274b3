use super::params::{ParamGrads, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value().len()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `trainable`:
    /// `θ ← θ(1 − lr·λ) − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, trainable: &[ParamId]) -> Result<()> {
        for &id in trainable {
            let g = grads.get(id).ok_or_else(|| Error::MissingGrad(store.get(id).name.clone()))?;
            if g.len() != store.value(id).len() {
                return Err(Error::shape("adamw_step", &store.get(id).shape, &[g.len()]));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for &id in trainable {
            let g = grads.get(id).expect("checked above");
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let theta = store.value_mut(id);
            for i in 0..theta.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] = theta[i] * (1.0 - c.lr * c.weight_decay) - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64, cfg: AdamWConfig) -> f64 {
        let mut store = ParamStore::new();
        let id = store.add("x", &[], vec![value]);
        let mut grads = ParamGrads::empty(&store);
        grads.set(id, vec![grad]);
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &grads, &[id]).unwrap();
        store.value(id)[0]
    }

    #[test]
    fn zero_gradient_without_decay_leaves_parameter() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(single(1.5, 0.0, cfg), 1.5);
    }

    #[test]
    fn zero_learning_rate_leaves_parameter() {
        let cfg = AdamWConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert_eq!(single(1.5, 123.0, cfg), 1.5);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After one step m̂ = g and v̂ = g², so the Adam term is g/(|g| + ε).
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let (theta, g) = (2.0f64, 0.5f64);
        let expected = theta * (1.0 - 0.1 * 0.01) - 0.1 * g / (g.abs() + 1e-8);
        let got = single(theta, g, cfg);
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("encoder.ret", &[1], vec![0.0]);
        let grads = ParamGrads::empty(&store);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let err = opt.step(&mut store, &grads, &[id]).unwrap_err();
        assert!(err.to_string().contains("encoder.ret"));
    }
}
