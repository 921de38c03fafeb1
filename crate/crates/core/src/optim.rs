//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use crate::tensor::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub wd: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, wd: f64) -> Self {
        AdamConfig {
            lr,
            wd,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update of `param` in place.
///
/// Weight decay is applied first as `p ← p − lr·wd·p`, then the bias-corrected
/// Adam delta.
pub fn adamw_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(param.len(), grad.len(), "adamw: grad length");
    assert_eq!(param.len(), state.m.len(), "adamw: state length");
    assert!(cfg.lr >= 0.0, "adamw: negative learning rate");
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - cfg.lr * cfg.wd;
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        param[i] = param[i] * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// AdamW over a [`ParamStore`] with per-group hyperparameters.
///
/// Groups are name prefixes; the first matching group wins. Parameters with
/// no gradient after backward are skipped, so freezing a component amounts to
/// not binding it on the tape.
#[derive(Clone, Debug)]
pub struct AdamW {
    groups: Vec<(String, AdamConfig)>,
    states: HashMap<ParamId, AdamState>,
}

impl AdamW {
    pub fn new(groups: Vec<(String, AdamConfig)>) -> Self {
        AdamW {
            groups,
            states: HashMap::new(),
        }
    }

    fn config_for(&self, name: &str) -> Option<&AdamConfig> {
        self.groups
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map(|(_, c)| c)
    }

    /// Applies one update to every parameter holding a gradient, then clears gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let Some(cfg) = self.config_for(store.name(id)).copied() else {
                continue;
            };
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let state = self
                .states
                .entry(id)
                .or_insert_with(|| AdamState::new(g.len()));
            adamw_step(t.data_mut(), &g, state, &cfg);
            t.clear_grad();
        }
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState> {
        self.states.get(&id)
    }
}

/// Global L2 norm of all populated gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_grad_zero_wd_is_identity() {
        let mut p = vec![0.3, -1.2];
        let mut s = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::new(1e-2, 0.0));
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // After one step mhat = g and vhat = g², so the delta is lr·g/(|g|+eps).
        let lr = 1e-3;
        for g in [0.5, -2.0, 1e-3] {
            let mut p = vec![1.0];
            let mut s = AdamState::new(1);
            adamw_step(&mut p, &[g], &mut s, &AdamConfig::new(lr, 0.0));
            let want = 1.0 - lr * g / (g.abs() + 1e-8);
            assert!((p[0] - want).abs() < 1e-15);
            assert!((p[0] - (1.0 - lr * g.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn weight_decay_alone_shrinks_by_factor() {
        let (lr, wd) = (5e-6, 5e-2);
        let mut p = vec![2.0, -4.0];
        let mut s = AdamState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::new(lr, wd));
        assert_eq!(p, vec![2.0 * (1.0 - lr * wd), -4.0 * (1.0 - lr * wd)]);
    }

    #[test]
    fn step_counter_increases() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        for k in 1..=5 {
            adamw_step(&mut p, &[1.0], &mut s, &AdamConfig::new(0.1, 0.0));
            assert_eq!(s.step, k);
        }
    }

    proptest! {
        #[test]
        fn zero_lr_is_identity(
            p in prop::collection::vec(-10.0f64..10.0, 1..8),
            seed in 0u64..1000,
            wd in 0.0f64..1.0,
        ) {
            let g: Vec<f64> = p.iter().enumerate().map(|(i, _)| ((seed + i as u64) as f64).sin()).collect();
            let mut q = p.clone();
            let mut s = AdamState::new(p.len());
            adamw_step(&mut q, &g, &mut s, &AdamConfig::new(0.0, wd));
            prop_assert_eq!(q, p);
        }
    }
}
