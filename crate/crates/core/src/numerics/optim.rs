use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one group of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> OptState<T> {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![T::default(); n]).collect(),
            second: shapes.iter().map(|&n| vec![T::default(); n]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &[&mut [T]]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(config, &shapes)
    }

    /// One bias-corrected Adam update. Gradients are validated first; on a
    /// non-finite entry nothing is modified.
    pub fn adam_step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::DimensionMismatch {
                context: "adam_step tensor count",
                expected: self.first.len().to_string(),
                got: format!("params {}, grads {}", params.len(), grads.len()),
            });
        }
        for (t, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[t].len() {
                return Err(Error::DimensionMismatch {
                    context: "adam_step tensor length",
                    expected: self.first[t].len().to_string(),
                    got: format!("tensor {t}: params {}, grads {}", p.len(), g.len()),
                });
            }
            if let Some(i) = g.iter().position(|v| !v.to_f64().is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient tensor {t} element {i} = {:?} at optimizer step {}",
                    g[i],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[t];
            let v = &mut self.second[t];
            for i in 0..p.len() {
                let gi = g[i].to_f64();
                let mi = beta1 * m[i].to_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].to_f64() + (1.0 - beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p[i] = T::from_f64(p[i].to_f64() - update);
            }
        }
        Ok(())
    }
}
