use serde::{Deserialize, Serialize};

use crate::diffengine::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new<'a>(config: AdamWConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        AdamW { config, t: 0, m, v }
    }

    /// Apply one update in place. Non-finite gradients abort before anything changes.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} optimizer slots",
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    left: self.m[i].shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            count += 1;
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            for (mj, gj) in m.iter_mut().zip(g) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
            }
            let v = self.v[i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g) {
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            }
            let (m, v) = (self.m[i].data(), self.v[i].data());
            for ((pj, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
                let update = (mj / c1) / ((vj / c2).sqrt() + eps);
                *pj -= lr * (update + weight_decay * *pj);
            }
        }
        if count != grads.len() {
            return Err(Error::invalid(format!("{count} parameters for {} gradients", grads.len())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig { weight_decay: wd, ..AdamWConfig::default() }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = [Tensor::vector(vec![1.0, -2.0, 3.0])];
        let mut opt = AdamW::new(cfg(0.0), p.iter().map(|t| t.shape()));
        opt.step(p.iter_mut(), &[Tensor::zeros(&[3])], 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut p = [Tensor::scalar(1.0)];
        let mut opt = AdamW::new(cfg(0.0), p.iter().map(|t| t.shape()));
        let g = Tensor::scalar(2.0 * p[0].item());
        opt.step(p.iter_mut(), &[g], 0.1).unwrap();
        assert!(p[0].item() < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(x) = Σ a_i (x_i − c_i)², optimum at c.
        let a = [1.0, 3.0, 0.5];
        let c = [0.7, -1.2, 2.0];
        let mut p = [Tensor::vector(vec![0.0; 3])];
        let mut opt = AdamW::new(cfg(0.0), p.iter().map(|t| t.shape()));
        for k in 0..200 {
            let x = p[0].data();
            let g = Tensor::vector((0..3).map(|i| 2.0 * a[i] * (x[i] - c[i])).collect());
            let lr = 0.1 * (1.0 - k as f64 / 200.0);
            opt.step(p.iter_mut(), &[g], lr).unwrap();
        }
        let d: f64 = p[0].data().iter().zip(c).map(|(x, c)| (x - c) * (x - c)).sum::<f64>().sqrt();
        assert!(d < 1e-3, "{d}");
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut p = [Tensor::scalar(2.0)];
        let mut opt = AdamW::new(cfg(0.5), p.iter().map(|t| t.shape()));
        opt.step(p.iter_mut(), &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert!((p[0].item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = [Tensor::scalar(1.0)];
        let mut opt = AdamW::new(cfg(0.0), p.iter().map(|t| t.shape()));
        assert!(matches!(opt.step(p.iter_mut(), &[Tensor::scalar(f64::NAN)], 0.1), Err(Error::NonFinite(_))));
        assert!(opt.step(p.iter_mut(), &[Tensor::zeros(&[2])], 0.1).is_err());
        assert_eq!(opt.t, 0);
        assert_eq!(p[0].item(), 1.0);
    }
}
