//! AdamW: Adam with decoupled weight decay.
//!
//! ```text
//! θ ← θ − lr·wd·θ                (decay, only where enabled)
//! m ← β1·m + (1 − β1)·g
//! v ← β2·v + (1 − β2)·g²
//! θ ← θ − lr · m̂ / (√v̂ + eps)   with m̂ = m/(1−β1ᵗ), v̂ = v/(1−β2ᵗ)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamWState {
    /// Zero moments shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        let v = m.clone();
        AdamWState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One AdamW update. `decay[i]` selects whether parameter `i` receives
    /// weight decay.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
        decay: &[bool],
        cfg: &AdamWConfig,
    ) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != params.len()
            || decay.len() != params.len()
        {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {} params / {} grads / {} decay flags",
                self.m.len(),
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.check_same_shape(g)?;
            p.check_same_shape(m)?;
        }

        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);

        for (i, param) in params.iter_mut().enumerate() {
            let shrink = if decay[i] {
                1.0 - cfg.lr * cfg.weight_decay
            } else {
                1.0
            };
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                *p *= shrink;
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut p = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let before = p.clone();
        let g = Tensor::zeros_like(&p);
        let mut st = AdamWState::new([&p]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[&g], &[true], &cfg(1e-2, 0.0))
                .unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let g = Tensor::vector(vec![0.5, -3.0, 1e-3]);
        let mut st = AdamWState::new([&p]);
        st.step(&mut [&mut p], &[&g], &[true], &cfg(1e-3, 0.0))
            .unwrap();
        // m̂ = g, v̂ = g² so the step is lr·g/(|g| + eps).
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expected = 1.0 - 1e-3 * gv / (gv.abs() + 1e-8);
            assert!((pv - expected).abs() < 1e-15);
            assert!((pv - (1.0 - 1e-3 * gv.signum())).abs() < 1e-8);
        }
    }

    #[test]
    fn decay_with_zero_grad_is_pure_shrinkage() {
        let mut p = Tensor::vector(vec![2.0, -0.5]);
        let g = Tensor::zeros_like(&p);
        let mut st = AdamWState::new([&p]);
        st.step(&mut [&mut p], &[&g], &[true], &cfg(0.1, 0.01))
            .unwrap();
        let f = 1.0 - 0.1 * 0.01;
        assert_eq!(p.data(), &[2.0 * f, -0.5 * f]);
    }

    #[test]
    fn decay_flag_disables_shrinkage() {
        let mut p = Tensor::vector(vec![2.0]);
        let g = Tensor::zeros_like(&p);
        let mut st = AdamWState::new([&p]);
        st.step(&mut [&mut p], &[&g], &[false], &cfg(0.1, 0.5))
            .unwrap();
        assert_eq!(p.data(), &[2.0]);
    }

    #[test]
    fn rejects_misaligned_shapes() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![1.0]);
        let mut st = AdamWState::new([&p]);
        assert!(st
            .step(&mut [&mut p], &[&g], &[true], &cfg(0.1, 0.0))
            .is_err());
    }
}
