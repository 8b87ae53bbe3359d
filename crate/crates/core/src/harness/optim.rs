//! Adam over the trainable subset of a parameter store.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

use super::config::OptimConfig;

/// Adam state. Moment buffers align with the store's trainable parameters
/// in creation order, which makes updates deterministic and the state
/// checkpointable by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    trainable: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &OptimConfig) -> Adam {
        let trainable = store.trainable_ids();
        let m = trainable
            .iter()
            .map(|&id| vec![0.0; store.get(id).numel()])
            .collect();
        let v = trainable
            .iter()
            .map(|&id| vec![0.0; store.get(id).numel()])
            .collect();
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            trainable,
            m,
            v,
        }
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    /// Moment buffers by position (aligned with `trainable()`), for
    /// checkpointing.
    pub fn moments(&self, idx: usize) -> (&[f64], &[f64]) {
        (&self.m[idx], &self.v[idx])
    }

    /// Restore moment buffers (checkpoint resume).
    pub fn restore(&mut self, idx: usize, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        if m.len() != self.m[idx].len() || v.len() != self.v[idx].len() {
            return Err(Error::Checkpoint(format!(
                "optimizer moment length mismatch at slot {idx}: got {}/{}, expected {}",
                m.len(),
                v.len(),
                self.m[idx].len()
            )));
        }
        self.m[idx] = m;
        self.v[idx] = v;
        Ok(())
    }

    /// One update. `grads[i]` is the gradient for `trainable()[i]`; `None`
    /// (no gradient path this step) counts as a zero gradient.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != self.trainable.len() {
            return Err(Error::InvalidArgument {
                op: "adam_apply",
                msg: format!(
                    "got {} gradients for {} trainable parameters",
                    grads.len(),
                    self.trainable.len()
                ),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (idx, &pid) in self.trainable.iter().enumerate() {
            let param = store.get_mut(pid);
            let n = param.data.len();
            if let Some(g) = &grads[idx] {
                if g.len() != n {
                    return Err(Error::InvalidArgument {
                        op: "adam_apply",
                        msg: format!(
                            "gradient length {} != parameter `{}` length {n}",
                            g.len(),
                            param.name
                        ),
                    });
                }
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..n {
                let g = grads[idx].as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                param.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Round every trainable parameter's storage through f32 — the
/// reduced-precision training mode. Optimizer moments are untouched.
pub fn round_trainable_to_f32(store: &mut ParamStore) {
    for id in 0..store.len() {
        let p = store.get_mut(id);
        if p.trainable {
            for v in p.data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_store() -> ParamStore {
        let mut store = ParamStore::new();
        store
            .add("frozen.anchor", vec![5.0], &[1], false)
            .unwrap();
        store
            .add("a.moa.x", vec![1.0, -2.0, 0.5], &[3], true)
            .unwrap();
        store
    }

    #[test]
    fn first_step_matches_hand_derivation() {
        // With zero-initialized moments, step 1 reduces to
        // x ← x − lr·g/(|g| + eps): bias corrections cancel exactly.
        let mut store = quad_store();
        let cfg = OptimConfig {
            lr: 0.1,
            ..OptimConfig::default()
        };
        let mut adam = Adam::new(&store, &cfg);
        let g = vec![2.0, -1.0, 0.0];
        adam.apply(&mut store, &[Some(g.clone())]).unwrap();
        let pid = store.id_of("a.moa.x").unwrap();
        let got = &store.get(pid).data;
        for i in 0..3 {
            let want = [1.0, -2.0, 0.5][i] - 0.1 * g[i] / (g[i].abs() + cfg.eps);
            assert!((got[i] - want).abs() < 1e-12, "coord {i}: {} vs {want}", got[i]);
        }
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // Minimize Σ (x_i − c_i)²; gradient 2(x − c).
        let mut store = quad_store();
        let cfg = OptimConfig {
            lr: 0.05,
            ..OptimConfig::default()
        };
        let mut adam = Adam::new(&store, &cfg);
        let c = [3.0, -1.0, 0.0];
        let pid = store.id_of("a.moa.x").unwrap();
        for _ in 0..2000 {
            let g: Vec<f64> = store.get(pid).data.iter().zip(&c).map(|(x, c)| 2.0 * (x - c)).collect();
            adam.apply(&mut store, &[Some(g)]).unwrap();
        }
        for (x, c) in store.get(pid).data.iter().zip(&c) {
            assert!((x - c).abs() < 1e-3, "{x} vs {c}");
        }
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut store = quad_store();
        let mut adam = Adam::new(&store, &OptimConfig::default());
        let frozen = store.id_of("frozen.anchor").unwrap();
        let before = store.get(frozen).data.clone();
        for _ in 0..100 {
            adam.apply(&mut store, &[Some(vec![1.0, 1.0, 1.0])]).unwrap();
        }
        assert_eq!(store.get(frozen).data, before);
    }

    #[test]
    fn missing_gradient_counts_as_zero() {
        let mut store = quad_store();
        let mut adam = Adam::new(&store, &OptimConfig::default());
        let pid = store.id_of("a.moa.x").unwrap();
        let before = store.get(pid).data.clone();
        adam.apply(&mut store, &[None]).unwrap();
        // Zero gradient with zero moments: no movement, but the step counts.
        assert_eq!(store.get(pid).data, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn f32_rounding_touches_only_trainable() {
        let mut store = ParamStore::new();
        store
            .add("frozen.w", vec![0.1 + 1e-12], &[1], false)
            .unwrap();
        store
            .add("x.moa.w", vec![0.1 + 1e-12], &[1], true)
            .unwrap();
        round_trainable_to_f32(&mut store);
        let frozen = store.id_of("frozen.w").unwrap();
        let train = store.id_of("x.moa.w").unwrap();
        assert_eq!(store.get(frozen).data[0], 0.1 + 1e-12);
        assert_eq!(store.get(train).data[0], (0.1 + 1e-12) as f32 as f64);
    }
}
