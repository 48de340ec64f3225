use std::collections::BTreeMap;

use super::params::{GradMap, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update of every parameter selected by `select`.
/// Each selected parameter must have a gradient in `grads`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradMap,
    state: &mut AdamState,
    cfg: &AdamConfig,
    select: impl Fn(&str) -> bool,
) -> Result<()> {
    let names: Vec<String> = params.names().filter(|n| select(n)).cloned().collect();
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        params
            .get(name)
            .unwrap()
            .expect_shape(g.shape(), "adam gradient")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for name in names {
        let g = &grads[&name];
        let p = params.get_mut(&name).unwrap();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mh = *mi / bc1;
            let vh = *vi / bc2;
            *pi -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        p.quantize_f32();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    fn grads(v: f64) -> GradMap {
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = store(0.5);
        let mut s = AdamState::default();
        adam_step(&mut p, &grads(0.0), &mut s, &AdamConfig::default(), |_| true).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.5f32 as f64);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut s = AdamState::default();
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        adam_step(&mut p, &grads(1.0), &mut s, &cfg, |_| true).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let moved = 1.0 - p.get("w").unwrap().data()[0];
        assert!((moved - 0.1).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let run = || {
            let mut p = store(0.3);
            let mut s = AdamState::default();
            for k in 0..5 {
                adam_step(&mut p, &grads(k as f64 - 2.0), &mut s, &AdamConfig::default(), |_| true)
                    .unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = store(0.3);
        let mut s = AdamState::default();
        let err = adam_step(&mut p, &GradMap::new(), &mut s, &AdamConfig::default(), |_| true);
        assert!(matches!(err, Err(Error::MissingGradient(_))));
        assert_eq!(s.step, 0);
        adam_step(&mut p, &GradMap::new(), &mut s, &AdamConfig::default(), |_| false).unwrap();
    }
}
