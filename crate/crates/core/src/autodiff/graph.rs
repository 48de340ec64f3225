//! Tape of rank-4 values with reverse-mode backward.
//!
//! Nodes are appended in evaluation order, so the tape is a topological
//! order by construction and the backward sweep simply walks it in reverse.

use std::collections::BTreeMap;

use super::kernels::{self, ConvWeights, Precision};
use super::params::{GradMap, ParamStore};
use crate::error::{Error, Result};
use crate::field;
use crate::tensor::{numel, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var },
    ModConv2d { x: Var, w: Var, s: Var, demod: bool },
    Linear { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Concat { xs: Vec<Var> },
    SliceChannels { x: Var, start: usize },
    UpsampleNearest2 { x: Var },
    Resize { x: Var },
    Mean { x: Var },
    Sum { x: Var },
    Sin { x: Var },
    Cos { x: Var },
    Abs { x: Var },
    Softplus { x: Var },
    NormalizeLatent { x: Var },
    Warp { image: Var, field: Var },
    Gather { x: Var, indices: Vec<usize> },
    Reshape { x: Var },
    Smoothness { a: Var, b: Var, weights: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub(crate) const LATENT_NORM_EPS: f64 = 1e-8;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    frozen: Vec<String>,
    backward_done: bool,
    precision: Precision,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter that was used in the graph.
    /// Parameters that received no gradient get an explicit zero tensor.
    pub fn params(&self, graph: &Graph) -> GradMap {
        let mut out = GradMap::new();
        for (name, &v) in &self.params {
            if !graph.nodes[v.0].requires_grad {
                continue;
            }
            let g = self
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.nodes[v.0].value.shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

fn strides(shape: Shape, out: Shape) -> [usize; 4] {
    let full = [
        shape[1] * shape[2] * shape[3],
        shape[2] * shape[3],
        shape[3],
        1,
    ];
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { full[i] };
    }
    s
}

/// Applies `f(a, b)` elementwise with broadcasting over size-1 axes.
fn broadcast_apply(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let out = broadcast_shape(a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let sa = strides(a.shape(), out);
    let sb = strides(b.shape(), out);
    let mut data = Vec::with_capacity(numel(out));
    for n in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                for x in 0..out[3] {
                    let ia = n * sa[0] + c * sa[1] + y * sa[2] + x * sa[3];
                    let ib = n * sb[0] + c * sb[1] + y * sb[2] + x * sb[3];
                    data.push(f(a.data()[ia], b.data()[ib]));
                }
            }
        }
    }
    Tensor::from_vec(out, data)
}

/// Sums `g` (in broadcast shape) back down to `shape`.
fn reduce_to(g: &Tensor, shape: Shape) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape();
    let s = strides(shape, out);
    let mut r = Tensor::zeros(shape);
    let mut i = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                for x in 0..out[3] {
                    let j = n * s[0] + c * s[1] + y * s[2] + x * s[3];
                    r.data_mut()[j] += g.data()[i];
                    i += 1;
                }
            }
        }
    }
    r
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters whose name starts with any of `prefixes` enter the graph as
    /// constants.
    pub fn with_frozen(prefixes: &[&str]) -> Self {
        Self {
            frozen: prefixes.iter().map(|s| s.to_string()).collect(),
            ..Self::default()
        }
    }

    /// Arithmetic for convolution products in this graph.
    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that gradients are accumulated into.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    /// Inserts the named parameter once per graph.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?
            .clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    // ---- ops ----

    /// Stride-1 same-padded convolution; `w` is `[Cout, Cin, k, k]`, k odd.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let [_, cin, _, _] = self.shape(x);
        let [cout, wcin, k, k2] = self.shape(w);
        if wcin != cin || k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} with weight {:?}",
                self.shape(x),
                self.shape(w)
            )));
        }
        let out = kernels::conv_forward(
            self.value(x),
            &ConvWeights::Shared(self.value(w).data()),
            cout,
            k,
            self.precision,
        );
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Conv2d { x, w }, rg))
    }

    /// Convolution with per-sample weights `w * style` (style `[N, Cin, 1, 1]`),
    /// optionally demodulated per output channel.
    pub fn modconv2d(&mut self, x: Var, w: Var, s: Var, demod: bool) -> Result<Var> {
        let [n, cin, _, _] = self.shape(x);
        let [cout, wcin, k, k2] = self.shape(w);
        if wcin != cin || k != k2 || k % 2 == 0 || self.shape(s) != [n, cin, 1, 1] {
            return Err(Error::Shape(format!(
                "modconv2d: input {:?}, weight {:?}, style {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(s)
            )));
        }
        let (eff, _) = kernels::modulate(
            self.value(w).data(),
            self.value(s).data(),
            n,
            cout,
            cin,
            k * k,
            demod,
        );
        let out = kernels::conv_forward(
            self.value(x),
            &ConvWeights::PerSample(&eff),
            cout,
            k,
            self.precision,
        );
        let rg = self.rg(&[x, w, s]);
        Ok(self.push(out, Op::ModConv2d { x, w, s, demod }, rg))
    }

    /// Fully connected layer over the flattened sample; `w` is `[Cout, Cin, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let [cout, cin, a, b] = self.shape(w);
        let n = xs[0];
        if xs[1] * xs[2] * xs[3] != cin || a != 1 || b != 1 {
            return Err(Error::Shape(format!(
                "linear: input {xs:?} with weight {:?}",
                self.shape(w)
            )));
        }
        let mut out = Tensor::zeros([n, cout, 1, 1]);
        kernels::gemm(
            n,
            cin,
            cout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            out.data_mut(),
        );
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::Linear { x, w }, rg))
    }

    /// Adds a per-channel bias `[1, C, 1, 1]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [_, c, _, _] = self.shape(x);
        if self.shape(b) != [1, c, 1, 1] {
            return Err(Error::Shape(format!(
                "bias {:?} for input {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let out = broadcast_apply(self.value(x), self.value(b), |a, b| a + b)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias { x, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_apply(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_apply(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_apply(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.rg(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let [n, _, h, w] = self.shape(first);
        let mut ctot = 0;
        for &v in xs {
            let s = self.shape(v);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Shape(format!(
                    "concat: {:?} vs {:?}",
                    s,
                    self.shape(first)
                )));
            }
            ctot += s[1];
        }
        let mut data = Vec::with_capacity(n * ctot * h * w);
        for b in 0..n {
            for &v in xs {
                data.extend_from_slice(self.value(v).sample(b));
            }
        }
        let out = Tensor::from_vec([n, ctot, h, w], data)?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }, rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) of {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let s = self.value(x).sample(b);
            data.extend_from_slice(&s[start * plane..(start + len) * plane]);
        }
        let out = Tensor::from_vec([n, len, h, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceChannels { x, start }, rg))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let v = self.value(x);
        let out = Tensor::from_fn([n, c, 2 * h, 2 * w], |[b, ch, y, xx]| v.at(b, ch, y / 2, xx / 2));
        let rg = self.rg(&[x]);
        self.push(out, Op::UpsampleNearest2 { x }, rg)
    }

    /// Half-pixel-centred bilinear resampling to `(h, w)` with edge clamping.
    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!("resize to {h}x{w}")));
        }
        let out = kernels::resize_forward(self.value(x), h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Resize { x }, rg))
    }

    pub fn upsample_bilinear2(&mut self, x: Var) -> Var {
        let [_, _, h, w] = self.shape(x);
        self.resize_bilinear(x, 2 * h, 2 * w)
            .expect("non-zero upsample size")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum { x }, rg)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::sin);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sin { x }, rg)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::cos);
        let rg = self.rg(&[x]);
        self.push(out, Op::Cos { x }, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs { x }, rg)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softplus { x }, rg)
    }

    /// Divides every `(n, y, x)` channel vector by its RMS.
    pub fn normalize_latent(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let v = self.value(x);
        let mut out = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let ms = (0..c).map(|ch| v.at(b, ch, y, xx).powi(2)).sum::<f64>() / c as f64;
                    let r = (ms + LATENT_NORM_EPS).sqrt();
                    for ch in 0..c {
                        out.set(b, ch, y, xx, v.at(b, ch, y, xx) / r);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::NormalizeLatent { x }, rg)
    }

    /// Bilinear backward warp of `image` (`[N, C, H, W]`) by `field` (`[N, 2, H, W]`).
    pub fn warp(&mut self, image: Var, field: Var) -> Result<Var> {
        let out = field::warp_batch(self.value(image), self.value(field))?;
        let rg = self.rg(&[image, field]);
        Ok(self.push(out, Op::Warp { image, field }, rg))
    }

    /// Batch rows `indices` of `x`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let n = self.shape(x)[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} out of {n}")));
        }
        let out = self.value(x).select(indices);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Edge-weighted L1 between consecutive flows; `weights` are constants.
    pub fn smoothness(&mut self, a: Var, b: Var, weights: Tensor) -> Result<Var> {
        let l = field::smoothness_kernel(self.value(a), self.value(b), &weights)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(l.value), Op::Smoothness { a, b, weights }, rg))
    }

    // ---- backward ----

    /// Backward from a single-element output.
    pub fn backward(&mut self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar output, got {:?}; use backward_with_seed",
                self.shape(out)
            )));
        }
        self.backward_with_seed(out, Tensor::full(self.shape(out), 1.0))
    }

    pub fn backward_with_seed(&mut self, out: Var, seed: Tensor) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        seed.expect_shape(self.shape(out), "backward seed")?;
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w } => {
                let k = self.shape(*w)[2];
                let wv = self.value(*w);
                let (gx, gws) = kernels::conv_backward(
                    self.value(*x),
                    &ConvWeights::Shared(wv.data()),
                    g,
                    k,
                    needs(*x),
                    needs(*w),
                    self.precision,
                );
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if needs(*w) {
                    let mut gw = Tensor::zeros(wv.shape());
                    for part in &gws {
                        for (a, b) in gw.data_mut().iter_mut().zip(part) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *w, gw);
                }
            }
            Op::ModConv2d { x, w, s, demod } => {
                let [n, cin, _, _] = self.shape(*x);
                let [cout, _, k, _] = self.shape(*w);
                let (wv, sv) = (self.value(*w), self.value(*s));
                let (eff, scales) =
                    kernels::modulate(wv.data(), sv.data(), n, cout, cin, k * k, *demod);
                let need_ws = needs(*w) || needs(*s);
                let (gx, geff) = kernels::conv_backward(
                    self.value(*x),
                    &ConvWeights::PerSample(&eff),
                    g,
                    k,
                    needs(*x),
                    need_ws,
                    self.precision,
                );
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if need_ws {
                    let mut gw = Tensor::zeros(wv.shape());
                    let mut gs = Tensor::zeros(sv.shape());
                    kernels::modulate_backward(
                        wv.data(),
                        sv.data(),
                        &scales,
                        &geff,
                        cout,
                        cin,
                        k * k,
                        *demod,
                        gw.data_mut(),
                        gs.data_mut(),
                    );
                    if needs(*w) {
                        accumulate(grads, *w, gw);
                    }
                    if needs(*s) {
                        accumulate(grads, *s, gs);
                    }
                }
            }
            Op::Linear { x, w } => {
                let xs = self.shape(*x);
                let [cout, cin, _, _] = self.shape(*w);
                let n = xs[0];
                if needs(*x) {
                    let mut gx = Tensor::zeros(xs);
                    kernels::gemm(
                        n,
                        cout,
                        cin,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        0.0,
                        gx.data_mut(),
                    );
                    accumulate(grads, *x, gx);
                }
                if needs(*w) {
                    let mut gw = Tensor::zeros(self.shape(*w));
                    kernels::gemm(
                        cout,
                        n,
                        cin,
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        0.0,
                        gw.data_mut(),
                    );
                    accumulate(grads, *w, gw);
                }
            }
            Op::AddBias { x: a, b } | Op::Add { a, b } => {
                if needs(*a) {
                    accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if needs(*b) {
                    accumulate(grads, *b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if needs(*b) {
                    accumulate(grads, *b, reduce_to(&g.scale(-1.0), self.shape(*b)));
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let ga = broadcast_apply(g, self.value(*b), |g, y| g * y)?;
                    accumulate(grads, *a, reduce_to(&ga, self.shape(*a)));
                }
                if needs(*b) {
                    let gb = broadcast_apply(g, self.value(*a), |g, y| g * y)?;
                    accumulate(grads, *b, reduce_to(&gb, self.shape(*b)));
                }
            }
            Op::Scale { x, c } => accumulate(grads, *x, g.scale(*c)),
            Op::AddScalar { x } | Op::Reshape { x } => {
                let gx = g.clone().reshape(self.shape(*x))?;
                accumulate(grads, *x, gx)
            }
            Op::LeakyRelu { x, slope } => {
                let gx = g.zip_map(self.value(*x), |g, v| if v >= 0.0 { g } else { slope * g })?;
                accumulate(grads, *x, gx);
            }
            Op::Concat { xs } => {
                let [n, _, h, w] = g.shape();
                let plane = h * w;
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if needs(v) {
                        let mut data = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let s = g.sample(b);
                            data.extend_from_slice(&s[off * plane..(off + c) * plane]);
                        }
                        accumulate(grads, v, Tensor::from_vec([n, c, h, w], data)?);
                    }
                    off += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.shape(*x);
                let len = g.shape()[1];
                let plane = h * w;
                let mut gx = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    let src = g.sample(b);
                    let base = b * c * plane + start * plane;
                    gx.data_mut()[base..base + len * plane].copy_from_slice(src);
                }
                accumulate(grads, *x, gx);
            }
            Op::UpsampleNearest2 { x } => {
                let [n, c, h, w] = self.shape(*x);
                let mut gx = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let o = gx.offset(b, ch, y / 2, xx / 2);
                                gx.data_mut()[o] += g.at(b, ch, y, xx);
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Resize { x } => {
                let [_, _, h, w] = self.shape(*x);
                accumulate(grads, *x, kernels::resize_backward(g, h, w));
            }
            Op::Mean { x } => {
                let s = self.shape(*x);
                let gv = g.data()[0] / numel(s) as f64;
                accumulate(grads, *x, Tensor::full(s, gv));
            }
            Op::Sum { x } => {
                accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0]));
            }
            Op::Sin { x } => {
                let gx = g.zip_map(self.value(*x), |g, v| g * v.cos())?;
                accumulate(grads, *x, gx);
            }
            Op::Cos { x } => {
                let gx = g.zip_map(self.value(*x), |g, v| -g * v.sin())?;
                accumulate(grads, *x, gx);
            }
            Op::Abs { x } => {
                let gx = g.zip_map(self.value(*x), |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })?;
                accumulate(grads, *x, gx);
            }
            Op::Softplus { x } => {
                let gx = g.zip_map(self.value(*x), |g, v| g * sigmoid(v))?;
                accumulate(grads, *x, gx);
            }
            Op::NormalizeLatent { x } => {
                let [n, c, h, w] = self.shape(*x);
                let xv = self.value(*x);
                let yv = &node.value;
                let mut gx = Tensor::zeros([n, c, h, w]);
                for b in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let ms = (0..c).map(|ch| xv.at(b, ch, y, xx).powi(2)).sum::<f64>()
                                / c as f64;
                            let r = (ms + LATENT_NORM_EPS).sqrt();
                            let dot = (0..c)
                                .map(|ch| g.at(b, ch, y, xx) * yv.at(b, ch, y, xx))
                                .sum::<f64>()
                                / c as f64;
                            for ch in 0..c {
                                gx.set(
                                    b,
                                    ch,
                                    y,
                                    xx,
                                    (g.at(b, ch, y, xx) - yv.at(b, ch, y, xx) * dot) / r,
                                );
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Warp { image, field } => {
                let (gi, gf) =
                    field::warp_batch_backward(self.value(*image), self.value(*field), g)?;
                if needs(*image) {
                    accumulate(grads, *image, gi);
                }
                if needs(*field) {
                    accumulate(grads, *field, gf);
                }
            }
            Op::Gather { x, indices } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let len = gx.sample_len();
                for (row, &src) in indices.iter().enumerate() {
                    let dst = &mut gx.data_mut()[src * len..(src + 1) * len];
                    for (d, v) in dst.iter_mut().zip(g.sample(row)) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Smoothness { a, b, weights } => {
                let l = field::smoothness_kernel(self.value(*a), self.value(*b), weights)?;
                let s = g.data()[0];
                if needs(*a) {
                    accumulate(grads, *a, l.grad_a.scale(s));
                }
                if needs(*b) {
                    accumulate(grads, *b, l.grad_b.scale(s));
                }
            }
        }
        Ok(())
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let x = Tensor::from_fn([2, 3, 4, 4], |[n, c, y, x]| (n + 2 * c + 3 * y) as f64 - x as f64 * 0.5);
        let w = Tensor::from_fn([3, 3, 3, 3], |[o, i, ky, kx]| {
            if o == i && ky == 1 && kx == 1 {
                1.0
            } else {
                0.0
            }
        });
        let xv = g.input(x.clone());
        let wv = g.input(w);
        let y = g.conv2d(xv, wv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn concat_backward_splits_by_channel() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros([2, 1, 2, 2]));
        let b = g.leaf(Tensor::zeros([2, 2, 2, 2]));
        let c = g.concat(&[a, b]).unwrap();
        let seed = Tensor::from_fn([2, 3, 2, 2], |[n, c, y, x]| (n * 100 + c * 10 + y * 2 + x) as f64);
        let grads = g.backward_with_seed(c, seed.clone()).unwrap();
        let ga = grads.get(a).unwrap();
        let gb = grads.get(b).unwrap();
        for n in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(ga.at(n, 0, y, x), seed.at(n, 0, y, x));
                    assert_eq!(gb.at(n, 0, y, x), seed.at(n, 1, y, x));
                    assert_eq!(gb.at(n, 1, y, x), seed.at(n, 2, y, x));
                }
            }
        }
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.mul(a, a).unwrap();
        assert_eq!(g.backward(b).unwrap().get(a).unwrap().data(), &[4.0]);
        assert!(matches!(g.backward(b), Err(Error::Graph(_))));
    }

    #[test]
    fn non_scalar_backward_needs_a_seed() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros([1, 2, 1, 1]));
        let b = g.scale(a, 2.0);
        assert!(matches!(g.backward(b), Err(Error::Graph(_))));
    }

    #[test]
    fn broadcast_mul_reduces_gradients() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full([2, 3, 2, 2], 2.0));
        let b = g.leaf(Tensor::full([1, 3, 1, 1], 5.0));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 16.0));
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }
}
