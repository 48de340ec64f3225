//! R1 gradient penalty on real inputs.
//!
//! The penalty `gamma/(2N) * sum_n |dD(x_n)/dx_n|^2` needs a derivative of an
//! input gradient with respect to the parameters. With `v = dD/dx` held
//! fixed, that derivative equals `gamma/N * d/de grad_theta D(x + e v)` at
//! `e = 0`, which is evaluated by a central difference of two first-order
//! backward passes.

use crate::autodiff::{GradMap, Graph, ParamStore};
use crate::error::Result;
use crate::models::{disc_forward, ModelConfig};
use crate::tensor::Tensor;

/// Relative probe step along the input gradient.
const PROBE: f64 = 1e-3;

pub struct R1 {
    pub penalty: f64,
    pub grads: GradMap,
}

fn logit_sum(p: &ParamStore, cfg: &ModelConfig, x: &Tensor, times: &[Vec<f64>], input_grad: bool) -> Result<(Option<Tensor>, GradMap)> {
    let mut g = Graph::new();
    let xv = if input_grad { g.leaf(x.clone()) } else { g.input(x.clone()) };
    let logits = disc_forward(&mut g, p, cfg, xv, times)?;
    let s = g.sum(logits);
    let grads = g.backward(s)?;
    Ok((grads.get(xv).cloned(), grads.params(&g)))
}

pub fn r1_penalty(p: &ParamStore, cfg: &ModelConfig, reals: &Tensor, times: &[Vec<f64>], gamma: f64) -> Result<R1> {
    let n = times.len() as f64;
    let (gx, zero) = logit_sum(p, cfg, reals, times, true)?;
    let v = gx.expect("input leaf receives a gradient");
    let penalty = gamma / (2.0 * n) * v.sq_norm();
    let vmax = v.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if vmax == 0.0 || gamma == 0.0 {
        let grads = zero.into_iter().map(|(k, t)| (k, Tensor::zeros(t.shape()))).collect();
        return Ok(R1 { penalty, grads });
    }
    let eps = PROBE / vmax;
    let plus = reals.zip_map(&v, |x, d| x + eps * d)?;
    let minus = reals.zip_map(&v, |x, d| x - eps * d)?;
    let (_, gp) = logit_sum(p, cfg, &plus, times, false)?;
    let (_, gm) = logit_sum(p, cfg, &minus, times, false)?;
    let c = gamma / n / (2.0 * eps);
    let grads = gp
        .into_iter()
        .map(|(k, a)| {
            let b = &gm[&k];
            let d = a.zip_map(b, |a, b| c * (a - b)).expect("same parameter shapes");
            (k, d)
        })
        .collect();
    Ok(R1 { penalty, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_discriminator;
    use crate::rng::KeyedRng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            resolution: 8,
            widths: vec![4, 4],
            deform_widths: vec![4, 4],
            disc_widths: vec![4, 3],
            disc_feature_dim: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_difference_of_penalty() {
        let cfg = tiny();
        let p = init_discriminator(&cfg, 2, 4);
        let r = KeyedRng::new(9);
        let x = Tensor::from_vec([4, 3, 8, 8], r.normals("x", 0, 4 * 3 * 64)).unwrap();
        let times = vec![vec![1.0, 3.0], vec![2.0, 5.0]];
        let gamma = 0.7;
        let out = r1_penalty(&p, &cfg, &x, &times, gamma).unwrap();
        for name in ["disc.head.1.weight", "disc.trunk.b1.conv0.weight"] {
            let analytic = &out.grads[name];
            let h = 1e-5;
            for i in [0, 3] {
                let mut hi = p.clone();
                hi.get_mut(name).unwrap().data_mut()[i] += h;
                let mut lo = p.clone();
                lo.get_mut(name).unwrap().data_mut()[i] -= h;
                let fp = r1_penalty(&hi, &cfg, &x, &times, gamma).unwrap().penalty;
                let fm = r1_penalty(&lo, &cfg, &x, &times, gamma).unwrap().penalty;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() <= 1e-3 * numeric.abs().max(1e-3),
                    "{name}[{i}]: {a} vs {numeric}"
                );
            }
        }
    }
}
