use crate::autodiff::{softplus, Graph, Var};
use crate::error::{Error, Result};

/// Non-saturating adversarial losses `(loss_D, loss_G)` from raw logits.
pub fn adv_losses(real: &[f64], fake: &[f64]) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Invalid("adversarial losses need logits".into()));
    }
    if real.iter().chain(fake).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator logits".into()));
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let loss_d = mean(real, &|x| softplus(-x)) + mean(fake, &softplus);
    let loss_g = mean(fake, &|x| softplus(-x));
    Ok((loss_d, loss_g))
}

/// `mean softplus(-fake)` as a graph node.
pub(crate) fn generator_loss(g: &mut Graph, fake: Var) -> Var {
    let n = g.scale(fake, -1.0);
    let s = g.softplus(n);
    g.mean(s)
}

/// `mean softplus(-real) + mean softplus(fake)` as a graph node.
pub(crate) fn discriminator_loss(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    let a = generator_loss(g, real);
    let s = g.softplus(fake);
    let b = g.mean(s);
    g.add(a, b)
}
