use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Cosine interpolation from `base` at `progress = 0` to `last` at 1.
pub fn cosine_lr(base: f64, last: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    last + 0.5 * (base - last) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Optimizer state and completed epoch count to continue training from.
#[derive(Debug, Clone, PartialEq)]
pub struct Resume {
    pub adam: AdamState,
    pub epochs_done: usize,
}

/// Shuffle stream for a run starting after `epochs_done` epochs.
pub(crate) fn epoch_stream(seed: u64, name: &str, epochs_done: usize) -> crate::rng::Rng {
    if epochs_done == 0 {
        crate::rng::substream(seed, name)
    } else {
        crate::rng::substream(seed, &format!("{name}.{epochs_done}"))
    }
}

/// Bias-corrected ADAM moments, one pair per parameter in `ParamSet` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Gradients are validated before any parameter is touched,
    /// so a non-finite gradient leaves the parameters and state unchanged.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<(), TensorError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TensorError::Shape {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Zeroes the moments of selected rows of a 2-D parameter (used when
    /// codebook rows are re-seeded).
    pub fn reset_rows(&mut self, param_index: usize, rows: &[usize]) {
        for buf in [&mut self.m[param_index], &mut self.v[param_index]] {
            let cols = buf.cols();
            for &r in rows {
                buf.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(w));
        p
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        for g in [1e-3, 0.5, -7.0, 1e4] {
            let mut p = one_param(1.0);
            let mut s = AdamState::new(&p, AdamConfig::default());
            s.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            let delta = (p.get("w").unwrap().item() - 1.0).abs();
            assert!(delta <= 1e-4 * (1.0 + 1e-6), "{g}: {delta}");
            assert!(delta > 0.99e-4, "{g}: {delta}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param(2.5);
        let mut s = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            s.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 2.5);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = one_param(0.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(&p, cfg);
        for _ in 0..200 {
            let w = p.get("w").unwrap().item();
            s.step(&mut p, &[Tensor::scalar(2.0 * (w - 3.0))]).unwrap();
        }
        let w = p.get("w").unwrap().item();
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = one_param(0.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        let err = s.step(&mut p, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.step, 0);
    }
}
