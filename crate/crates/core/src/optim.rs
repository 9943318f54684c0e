//! Adam with bias correction, and the cosine-annealed learning rate.

use crate::error::{IamlError, Result};
use crate::tensor::Tensor;

/// `0.5 · lr0 · (1 + cos(π · epoch / epochs))`.
pub fn cosine_lr(lr0: f64, epoch: u64, epochs: u64) -> f64 {
    if epochs == 0 {
        return lr0;
    }
    let t = (epoch.min(epochs)) as f64 / epochs as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state keyed by parameter name. Only names registered at construction
/// are ever updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    names: Vec<String>,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
    pub(crate) step: u64,
}

impl Adam {
    pub fn new<'a>(
        params: AdamParams,
        named: impl IntoIterator<Item = (String, &'a Tensor)>,
    ) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        for (name, t) in named {
            names.push(name);
            m.push(Tensor::zeros(t.shape()));
        }
        let v = m.clone();
        Self {
            params,
            names,
            m,
            v,
            step: 0,
        }
    }

    pub(crate) fn from_parts(
        params: AdamParams,
        names: Vec<String>,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        step: u64,
    ) -> Self {
        Self {
            params,
            names,
            m,
            v,
            step,
        }
    }

    /// Names of every parameter the optimizer may write.
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update. `params` and `grads` must follow [`Adam::param_names`] order.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(IamlError::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.names.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            p.ensure_same_shape(g)?;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(2e-4, 0, 500), 2e-4);
        assert!((cosine_lr(2e-4, 250, 500) - 1e-4).abs() < 1e-18);
        assert!(cosine_lr(2e-4, 500, 500).abs() < 1e-18);
        let e = 123;
        let expected = 0.5 * 2e-4 * (1.0 + (std::f64::consts::PI * e as f64 / 500.0).cos());
        assert_eq!(cosine_lr(2e-4, e, 500), expected);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut w = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut adam = Adam::new(AdamParams::default(), [("w".to_string(), &w)]);
        let g = Tensor::new(vec![3], vec![0.3, -4.0, 0.0]).unwrap();
        adam.step(&mut [&mut w], &[g], 0.1).unwrap();
        // With bias correction the first step is lr * g / (|g| + eps').
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(w.data()[2], 0.5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut w = Tensor::new(vec![2], vec![3.0, -1.5]).unwrap();
        let mut adam = Adam::new(AdamParams::default(), [("w".to_string(), &w)]);
        for _ in 0..2000 {
            let g = w.map(|v| 2.0 * v);
            adam.step(&mut [&mut w], &[g], 0.01).unwrap();
        }
        assert!(w.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut gs = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        let n = clip_global_norm(&mut gs, 1.0);
        assert_eq!(n, 5.0);
        assert!((gs[0].data()[0] - 0.6).abs() < 1e-12);
    }
}
