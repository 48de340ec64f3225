//! Parameter initialisation and the small layer vocabulary shared by the
//! generators and the discriminator.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::rng::KeyedRng;
use crate::tensor::{Shape, Tensor};

pub(crate) const LRELU_SLOPE: f64 = 0.2;

/// Registers parameters with per-name random streams, so adding a layer never
/// shifts the values of existing ones.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: KeyedRng,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: Shape, std: f64) {
        let n = shape.iter().product();
        let v = self.rng.normals(&format!("init:{name}"), 0, n);
        let t = Tensor::from_vec(shape, v).expect("length matches shape");
        self.store.insert(name, t.scale(std));
    }

    /// Unit normal scaled by `1/sqrt(fan_in)`, where fan_in covers every axis
    /// but the first.
    pub fn he(&mut self, name: &str, shape: Shape) {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        self.normal(name, shape, fan_in.sqrt().recip());
    }

    pub fn xavier(&mut self, name: &str, shape: Shape) {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let fan_out = (shape[0] * shape[2] * shape[3]) as f64;
        self.normal(name, shape, (2.0 / (fan_in + fan_out)).sqrt());
    }

    pub fn fill(&mut self, name: &str, shape: Shape, value: f64) {
        self.store.insert(name, Tensor::full(shape, value));
    }

    pub fn dense(&mut self, name: &str, cin: usize, cout: usize) {
        self.he(&format!("{name}.weight"), [cout, cin, 1, 1]);
        self.fill(&format!("{name}.bias"), [1, cout, 1, 1], 0.0);
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.he(&format!("{name}.weight"), [cout, cin, k, k]);
        self.fill(&format!("{name}.bias"), [1, cout, 1, 1], 0.0);
    }

    /// Style affine with bias 1 so initial modulation is the identity.
    pub fn affine(&mut self, name: &str, style_dim: usize, cin: usize) {
        self.he(&format!("{name}.affine.weight"), [cin, style_dim, 1, 1]);
        self.fill(&format!("{name}.affine.bias"), [1, cin, 1, 1], 1.0);
    }

    pub fn modconv(&mut self, name: &str, style_dim: usize, cin: usize, cout: usize, k: usize) {
        self.affine(name, style_dim, cin);
        self.conv(name, cin, cout, k);
    }

    pub fn mapping(&mut self, name: &str, dims: &[usize]) {
        for (i, w) in dims.windows(2).enumerate() {
            self.dense(&format!("{name}.{i}"), w[0], w[1]);
        }
    }
}

pub(crate) fn dense(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    let y = g.linear(x, w)?;
    g.add_bias(y, b)
}

pub(crate) fn conv(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    let y = g.conv2d(x, w)?;
    g.add_bias(y, b)
}

/// Modulated convolution plus bias; `style` is `[N, S, 1, 1]`.
pub(crate) fn modconv(
    g: &mut Graph,
    p: &ParamStore,
    name: &str,
    x: Var,
    style: Var,
    demod: bool,
) -> Result<Var> {
    let s = dense(g, p, &format!("{name}.affine"), style)?;
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    let y = g.modconv2d(x, w, s, demod)?;
    g.add_bias(y, b)
}

/// Demodulated synthesis layer with leaky activation.
pub(crate) fn synthesis(g: &mut Graph, p: &ParamStore, name: &str, x: Var, style: Var) -> Result<Var> {
    let y = modconv(g, p, name, x, style, true)?;
    Ok(g.leaky_relu(y, LRELU_SLOPE))
}

/// Normalised latent followed by `layers` dense + leaky layers.
pub(crate) fn mapping(g: &mut Graph, p: &ParamStore, name: &str, layers: usize, z: Var) -> Result<Var> {
    let mut h = g.normalize_latent(z);
    for i in 0..layers {
        h = dense(g, p, &format!("{name}.{i}"), h)?;
        h = g.leaky_relu(h, LRELU_SLOPE);
    }
    Ok(h)
}

/// `[1, C, H, W]` parameter repeated over a batch of `n`.
pub(crate) fn broadcast_const(g: &mut Graph, p: &ParamStore, name: &str, n: usize) -> Result<Var> {
    let c = g.param(p, name)?;
    g.gather(c, &vec![0; n])
}

/// Stacks per-sample vectors into a `[N, D, 1, 1]` tensor.
pub(crate) fn column_batch(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    Tensor::from_vec([rows.len(), d, 1, 1], rows.concat())
}
