//! Central finite-difference gradient checks for every graph op.
//!
//! Each check projects the op output onto a fixed random tensor so the scalar
//! objective exercises the full Jacobian, then compares the analytic gradient
//! of every differentiable input against central differences.

use super::graph::{Graph, Var};
use crate::error::Result;
use crate::rng::KeyedRng;
use crate::tensor::{Shape, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn objective(inputs: &[Tensor], build: &Build, proj: &Option<Tensor>) -> Result<(f64, Option<Tensor>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let proj = match proj {
        Some(p) => p.clone(),
        None => {
            let s = g.shape(out);
            let n: usize = s.iter().product();
            Tensor::from_vec(s, KeyedRng::new(0xF00D).normals("gradcheck-proj", n as u64, n))?
        }
    };
    let p = g.input(proj.clone());
    let prod = g.mul(out, p)?;
    let s = g.sum(prod);
    Ok((g.value(s).data()[0], Some(proj)))
}

/// Largest normwise relative error between analytic and central-difference
/// gradients over all inputs.
pub fn check(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let (_, proj) = objective(inputs, build, &None)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let p = g.input(proj.clone().unwrap());
    let prod = g.mul(out, p)?;
    let s = g.sum(prod);
    let grads = g.backward(s)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = Tensor::zeros(input.shape());
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let fp = objective(&plus, build, &proj)?.0;
            let fm = objective(&minus, build, &proj)?.0;
            numeric.data_mut()[i] = (fp - fm) / (2.0 * FD_STEP);
        }
        let diff = analytic.max_abs_diff(&numeric);
        let scale = analytic
            .data()
            .iter()
            .chain(numeric.data())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let rel = if scale == 0.0 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn rand(r: &KeyedRng, tag: &str, shape: Shape) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, r.normals(tag, 0, n)).unwrap()
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn away_from_zero(r: &KeyedRng, tag: &str, shape: Shape) -> Tensor {
    rand(r, tag, shape).map(|v| v.signum() * (0.1 + v.abs()))
}

/// Offsets whose sample coordinates stay inside the image and at least 0.25
/// away from the integer lattice.
pub fn lattice_safe_offsets(r: &KeyedRng, tag: &str, shape: Shape) -> Tensor {
    let [n, _, h, w] = shape;
    let u = r.uniforms(tag, 0, 4 * n * h * w);
    let mut k = 0;
    Tensor::from_fn(shape, |[_, c, y, x]| {
        let extent = if c == 0 { w } else { h };
        let base = (u[k] * (extent - 1) as f64).floor().min((extent - 2) as f64);
        let frac = 0.25 + 0.5 * u[k + 1];
        k += 2;
        let pos = if c == 0 { x } else { y } as f64;
        base + frac - pos
    })
}

/// Runs the full op suite on `2x3x4x4` inputs.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let r = KeyedRng::new(seed);
    let x = rand(&r, "x", [2, 3, 4, 4]);
    let y = rand(&r, "y", [2, 3, 4, 4]);
    let mut cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = Vec::new();

    cases.push((
        "conv2d_3x3",
        vec![x.clone(), rand(&r, "w3", [4, 3, 3, 3]).scale(0.3)],
        Box::new(|g, v| g.conv2d(v[0], v[1])),
    ));
    cases.push((
        "conv2d_1x1",
        vec![x.clone(), rand(&r, "w1", [4, 3, 1, 1])],
        Box::new(|g, v| g.conv2d(v[0], v[1])),
    ));
    cases.push((
        "modconv2d_demod",
        vec![
            x.clone(),
            rand(&r, "mw", [4, 3, 3, 3]),
            rand(&r, "ms", [2, 3, 1, 1]).map(|v| 1.0 + 0.3 * v),
        ],
        Box::new(|g, v| g.modconv2d(v[0], v[1], v[2], true)),
    ));
    cases.push((
        "modconv2d_plain",
        vec![
            x.clone(),
            rand(&r, "mw1", [2, 3, 1, 1]),
            rand(&r, "ms1", [2, 3, 1, 1]),
        ],
        Box::new(|g, v| g.modconv2d(v[0], v[1], v[2], false)),
    ));
    cases.push((
        "linear",
        vec![x.clone(), rand(&r, "lw", [5, 48, 1, 1]).scale(0.2)],
        Box::new(|g, v| g.linear(v[0], v[1])),
    ));
    cases.push((
        "bias_add",
        vec![x.clone(), rand(&r, "b", [1, 3, 1, 1])],
        Box::new(|g, v| g.add_bias(v[0], v[1])),
    ));
    cases.push((
        "leaky_relu",
        vec![away_from_zero(&r, "lr", [2, 3, 4, 4])],
        Box::new(|g, v| Ok(g.leaky_relu(v[0], 0.2))),
    ));
    cases.push((
        "add",
        vec![x.clone(), y.clone()],
        Box::new(|g, v| g.add(v[0], v[1])),
    ));
    cases.push((
        "add_broadcast",
        vec![x.clone(), rand(&r, "bb", [1, 3, 1, 4])],
        Box::new(|g, v| g.add(v[0], v[1])),
    ));
    cases.push((
        "sub",
        vec![x.clone(), y.clone()],
        Box::new(|g, v| g.sub(v[0], v[1])),
    ));
    cases.push((
        "mul",
        vec![x.clone(), y.clone()],
        Box::new(|g, v| g.mul(v[0], v[1])),
    ));
    cases.push((
        "mul_broadcast",
        vec![x.clone(), rand(&r, "mb", [2, 1, 4, 4])],
        Box::new(|g, v| g.mul(v[0], v[1])),
    ));
    cases.push((
        "scale_and_shift",
        vec![x.clone()],
        Box::new(|g, v| {
            let s = g.scale(v[0], -1.7);
            Ok(g.add_scalar(s, 0.4))
        }),
    ));
    cases.push((
        "concat",
        vec![x.clone(), rand(&r, "c2", [2, 2, 4, 4])],
        Box::new(|g, v| g.concat(&[v[0], v[1], v[0]])),
    ));
    cases.push((
        "slice_channels",
        vec![x.clone()],
        Box::new(|g, v| g.slice_channels(v[0], 1, 2)),
    ));
    cases.push((
        "upsample_nearest2",
        vec![x.clone()],
        Box::new(|g, v| Ok(g.upsample_nearest2(v[0]))),
    ));
    cases.push((
        "upsample_bilinear2",
        vec![x.clone()],
        Box::new(|g, v| Ok(g.upsample_bilinear2(v[0]))),
    ));
    cases.push((
        "resize_bilinear",
        vec![x.clone()],
        Box::new(|g, v| {
            let a = g.resize_bilinear(v[0], 7, 5)?;
            g.resize_bilinear(a, 2, 3)
        }),
    ));
    cases.push(("mean", vec![x.clone()], Box::new(|g, v| Ok(g.mean(v[0])))));
    cases.push(("sum", vec![x.clone()], Box::new(|g, v| Ok(g.sum(v[0])))));
    cases.push((
        "sin_cos",
        vec![x.clone()],
        Box::new(|g, v| {
            let s = g.sin(v[0]);
            let c = g.cos(v[0]);
            g.concat(&[s, c])
        }),
    ));
    cases.push((
        "abs",
        vec![away_from_zero(&r, "abs", [2, 3, 4, 4])],
        Box::new(|g, v| Ok(g.abs(v[0]))),
    ));
    cases.push((
        "softplus",
        vec![x.clone().scale(2.0)],
        Box::new(|g, v| Ok(g.softplus(v[0]))),
    ));
    cases.push((
        "normalize_latent",
        vec![x.clone()],
        Box::new(|g, v| Ok(g.normalize_latent(v[0]))),
    ));
    cases.push((
        "gather",
        vec![x.clone()],
        Box::new(|g, v| g.gather(v[0], &[1, 0, 1])),
    ));
    cases.push((
        "reshape",
        vec![x.clone()],
        Box::new(|g, v| g.reshape(v[0], [4, 24, 1, 1])),
    ));
    cases.push((
        "warp",
        vec![x.clone(), lattice_safe_offsets(&r, "warp", [2, 2, 4, 4])],
        Box::new(|g, v| g.warp(v[0], v[1])),
    ));
    {
        let a = rand(&r, "fa", [2, 2, 4, 4]);
        let b = away_from_zero(&r, "fd", [2, 2, 4, 4]).zip_map(&a, |d, a| a + d)?;
        let weights = rand(&r, "fw", [2, 1, 4, 4]).map(|v| (-v.abs()).exp());
        cases.push((
            "smoothness_loss",
            vec![a, b],
            Box::new(move |g, v| g.smoothness(v[0], v[1], weights.clone())),
        ));
    }

    cases
        .into_iter()
        .map(|(name, inputs, build)| {
            let err = check(&inputs, build.as_ref())?;
            Ok(GradCheckReport {
                op: name.to_string(),
                max_rel_error: err,
                passed: err < TOLERANCE,
            })
        })
        .collect()
}
