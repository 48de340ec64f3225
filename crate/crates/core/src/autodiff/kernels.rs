//! Dense kernels behind the graph ops. Everything here works on raw slices
//! in `(C, H, W)` layout and accumulates in `f64`.

use std::cell::RefCell;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, LinalgScalar};

use crate::par;
use crate::tensor::Tensor;

/// Arithmetic used for convolution products. `Mixed` rounds the operands of
/// each convolution to `f32` and multiplies in single precision; storage and
/// everything outside the products stay `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Double,
    Mixed,
}

pub(crate) trait Elem: LinalgScalar + Send + Sync {
    fn of(v: f64) -> Self;
    fn to(self) -> f64;
    /// Runs `f` on a per-thread scratch buffer of `len` elements. The
    /// contents are unspecified on entry.
    fn scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R;
}

thread_local! {
    static SCRATCH64: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static SCRATCH32: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

fn with_local<T: Copy + Default, R>(
    key: &'static std::thread::LocalKey<RefCell<Vec<T>>>,
    len: usize,
    f: impl FnOnce(&mut [T]) -> R,
) -> R {
    key.with(|s| {
        let mut v = s.borrow_mut();
        if v.len() < len {
            v.resize(len, T::default());
        }
        f(&mut v[..len])
    })
}

impl Elem for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to(self) -> f64 {
        self
    }
    fn scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R {
        with_local(&SCRATCH64, len, f)
    }
}

impl Elem for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn to(self) -> f64 {
        self as f64
    }
    fn scratch<R>(len: usize, f: impl FnOnce(&mut [Self]) -> R) -> R {
        with_local(&SCRATCH32, len, f)
    }
}

/// `c = op(a) * op(b) + beta * c` for row-major slices.
/// `a` is `m x k` (or `k x m` when `ta`), `b` is `k x n` (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_t<T: LinalgScalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let av = if ta {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let bv = if tb {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    gemm_t(m, k, n, a, ta, b, tb, beta, c)
}

/// Columns `x` whose source `x + dx` lies inside `0..w`.
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfolds a `[C, H, W]` sample into `[C*k*k, H*W]` columns with zero
/// padding `k / 2`. Every entry of `col` is written.
pub(crate) fn im2col<T: Elem>(x: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (lo, hi) = valid_span(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo < hi {
                        let s0 = (lo as isize + dx) as usize;
                        for (d, &v) in drow[lo..hi].iter_mut().zip(&srow[s0..s0 + (hi - lo)]) {
                            *d = T::of(v);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `x`.
pub(crate) fn col2im<T: Elem>(col: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (lo, hi) = valid_span(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || lo == hi {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    let s0 = (lo as isize + dx) as usize;
                    let dst = &mut x[base + s0..base + s0 + (hi - lo)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                        *d += v.to();
                    }
                }
            }
        }
    }
}

/// Weights for a convolution: one `[Cout, Cin, k, k]` block shared by the
/// batch, or one block per sample.
pub(crate) enum ConvWeights<'a> {
    Shared(&'a [f64]),
    PerSample(&'a [f64]),
}

impl ConvWeights<'_> {
    fn get(&self, n: usize, len: usize) -> &[f64] {
        match self {
            ConvWeights::Shared(w) => &w[..len],
            ConvWeights::PerSample(w) => &w[n * len..(n + 1) * len],
        }
    }
}

/// Stride-1 "same" convolution of `x` (`[N, Cin, H, W]`) producing
/// `[N, Cout, H, W]`.
pub(crate) fn conv_forward(x: &Tensor, w: &ConvWeights, cout: usize, k: usize, prec: Precision) -> Tensor {
    match prec {
        Precision::Double => conv_forward_t::<f64>(x, w, cout, k),
        Precision::Mixed => conv_forward_t::<f32>(x, w, cout, k),
    }
}

fn conv_forward_t<T: Elem>(x: &Tensor, w: &ConvWeights, cout: usize, k: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let hw = h * wd;
    let kk = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    par::for_each_chunk(out.data_mut(), cout * hw, |s, o| {
        let wmat: Vec<T> = w.get(s, cout * kk).iter().map(|&v| T::of(v)).collect();
        let mut ot = vec![T::zero(); cout * hw];
        T::scratch(kk * hw, |col| {
            im2col(x.sample(s), cin, h, wd, k, col);
            gemm_t(cout, kk, hw, &wmat, false, col, false, T::zero(), &mut ot);
        });
        for (d, v) in o.iter_mut().zip(ot) {
            *d = v.to();
        }
    });
    out
}

/// Returns `(grad_x, per-sample grad_w)` for [`conv_forward`].
pub(crate) fn conv_backward(
    x: &Tensor,
    w: &ConvWeights,
    gy: &Tensor,
    k: usize,
    need_gx: bool,
    need_gw: bool,
    prec: Precision,
) -> (Option<Tensor>, Vec<Vec<f64>>) {
    match prec {
        Precision::Double => conv_backward_t::<f64>(x, w, gy, k, need_gx, need_gw),
        Precision::Mixed => conv_backward_t::<f32>(x, w, gy, k, need_gx, need_gw),
    }
}

fn conv_backward_t<T: Elem>(
    x: &Tensor,
    w: &ConvWeights,
    gy: &Tensor,
    k: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Tensor>, Vec<Vec<f64>>) {
    let [n, cin, h, wd] = x.shape();
    let cout = gy.shape()[1];
    let hw = h * wd;
    let kk = cin * k * k;
    let parts = par::map_range(n, |s| {
        let g: Vec<T> = gy.sample(s).iter().map(|&v| T::of(v)).collect();
        let gw = if need_gw {
            let mut gw = vec![T::zero(); cout * kk];
            T::scratch(kk * hw, |col| {
                im2col(x.sample(s), cin, h, wd, k, col);
                gemm_t(cout, hw, kk, &g, false, col, true, T::zero(), &mut gw);
            });
            gw.into_iter().map(T::to).collect()
        } else {
            Vec::new()
        };
        let gx = if need_gx {
            let wmat: Vec<T> = w.get(s, cout * kk).iter().map(|&v| T::of(v)).collect();
            let mut gx = vec![0.0; cin * hw];
            T::scratch(kk * hw, |gcol| {
                gemm_t(kk, cout, hw, &wmat, true, &g, false, T::zero(), gcol);
                col2im(gcol, cin, h, wd, k, &mut gx);
            });
            gx
        } else {
            Vec::new()
        };
        (gx, gw)
    });
    let (gxs, gws): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let gx = need_gx.then(|| Tensor::from_vec([n, cin, h, wd], gxs.concat()).unwrap());
    (gx, gws)
}

pub(crate) const DEMOD_EPS: f64 = 1e-8;

/// Per-sample modulated (and optionally demodulated) weights.
/// `w` is `[Cout, Cin*k*k]`, `s` is `[N, Cin]`. Returns the `[N, Cout, Cin*k*k]`
/// effective weights and, when demodulating, the `[N, Cout]` scales.
pub(crate) fn modulate(
    w: &[f64],
    s: &[f64],
    n: usize,
    cout: usize,
    cin: usize,
    kk: usize,
    demod: bool,
) -> (Vec<f64>, Vec<f64>) {
    let per = cin * kk;
    let mut eff = vec![0.0; n * cout * per];
    let mut scales = if demod { vec![0.0; n * cout] } else { Vec::new() };
    for b in 0..n {
        let style = &s[b * cin..(b + 1) * cin];
        for o in 0..cout {
            let src = &w[o * per..(o + 1) * per];
            let dst = &mut eff[(b * cout + o) * per..(b * cout + o + 1) * per];
            let mut ss = 0.0;
            for i in 0..cin {
                for q in 0..kk {
                    let v = src[i * kk + q] * style[i];
                    dst[i * kk + q] = v;
                    ss += v * v;
                }
            }
            if demod {
                let d = 1.0 / (ss + DEMOD_EPS).sqrt();
                scales[b * cout + o] = d;
                dst.iter_mut().for_each(|v| *v *= d);
            }
        }
    }
    (eff, scales)
}

/// Given per-sample gradients of the effective weights, accumulates the
/// gradients of the base weight and the styles.
#[allow(clippy::too_many_arguments)]
pub(crate) fn modulate_backward(
    w: &[f64],
    s: &[f64],
    scales: &[f64],
    g_eff: &[Vec<f64>],
    cout: usize,
    cin: usize,
    kk: usize,
    demod: bool,
    gw: &mut [f64],
    gs: &mut [f64],
) {
    let per = cin * kk;
    let mut ga = vec![0.0; per];
    for (b, ge) in g_eff.iter().enumerate() {
        let style = &s[b * cin..(b + 1) * cin];
        for o in 0..cout {
            let wrow = &w[o * per..(o + 1) * per];
            let grow = &ge[o * per..(o + 1) * per];
            if demod {
                let d = scales[b * cout + o];
                // a = w * s (pre-demodulation weights)
                let mut dot = 0.0;
                for i in 0..cin {
                    for q in 0..kk {
                        dot += grow[i * kk + q] * wrow[i * kk + q] * style[i];
                    }
                }
                let d3 = d * d * d;
                for i in 0..cin {
                    for q in 0..kk {
                        let a = wrow[i * kk + q] * style[i];
                        ga[i * kk + q] = d * grow[i * kk + q] - d3 * a * dot;
                    }
                }
            } else {
                ga.copy_from_slice(grow);
            }
            for i in 0..cin {
                let mut acc = 0.0;
                for q in 0..kk {
                    let g = ga[i * kk + q];
                    gw[o * per + i * kk + q] += g * style[i];
                    acc += g * wrow[i * kk + q];
                }
                gs[b * cin + i] += acc;
            }
        }
    }
}

/// Source taps for half-pixel bilinear resampling along one axis.
pub(crate) fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = (p.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_forward(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    par::for_each_chunk(out.data_mut(), oh * ow, |plane, o| {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                o[oy * ow + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    });
    let _ = (n, c);
    out
}

pub(crate) fn resize_backward(gy: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, oh, ow] = gy.shape();
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut gx = Tensor::zeros([n, c, h, w]);
    par::for_each_chunk(gx.data_mut(), h * w, |plane, g| {
        let src = &gy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                g[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                g[y0 * w + x1] += v * (1.0 - fy) * fx;
                g[y1 * w + x0] += v * fy * (1.0 - fx);
                g[y1 * w + x1] += v * fy * fx;
            }
        }
    });
    gx
}
