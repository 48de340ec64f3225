use super::types::DeformationField;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Bilinear tap for one clamped sample position.
#[derive(Debug, Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    sat_x: bool,
    sat_y: bool,
}

#[inline]
fn tap(sx_raw: f64, sy_raw: f64, h: usize, w: usize) -> Tap {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let sat_x = !(0.0..=max_x).contains(&sx_raw);
    let sat_y = !(0.0..=max_y).contains(&sy_raw);
    let sx = sx_raw.clamp(0.0, max_x);
    let sy = sy_raw.clamp(0.0, max_y);
    let x0 = (sx.floor() as usize).min(w - 1);
    let y0 = (sy.floor() as usize).min(h - 1);
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: sx - x0 as f64,
        fy: sy - y0 as f64,
        sat_x,
        sat_y,
    }
}

/// Backward-warps one sample: `src` is `[C, H, W]`, `field` is `[2, H, W]`
/// (dx plane then dy plane), `out` is `[C, H, W]`.
pub fn warp_sample(src: &[f64], field: &[f64], channels: usize, h: usize, w: usize, out: &mut [f64]) {
    let plane = h * w;
    debug_assert_eq!(src.len(), channels * plane);
    debug_assert_eq!(field.len(), 2 * plane);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let t = tap(x as f64 + field[i], y as f64 + field[plane + i], h, w);
            for c in 0..channels {
                let s = &src[c * plane..(c + 1) * plane];
                let top = (1.0 - t.fx) * s[t.y0 * w + t.x0] + t.fx * s[t.y0 * w + t.x1];
                let bot = (1.0 - t.fx) * s[t.y1 * w + t.x0] + t.fx * s[t.y1 * w + t.x1];
                out[c * plane + i] = (1.0 - t.fy) * top + t.fy * bot;
            }
        }
    }
}

/// Accumulates gradients of one warped sample into `grad_src` (`[C, H, W]`)
/// and `grad_field` (`[2, H, W]`). Offsets whose sample coordinate lies
/// outside the image get zero gradient along the saturated axis.
pub fn warp_sample_backward(
    src: &[f64],
    field: &[f64],
    upstream: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    grad_src: &mut [f64],
    grad_field: &mut [f64],
) {
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let t = tap(x as f64 + field[i], y as f64 + field[plane + i], h, w);
            let (mut gx, mut gy) = (0.0, 0.0);
            for c in 0..channels {
                let g = upstream[c * plane + i];
                if g == 0.0 {
                    continue;
                }
                let base = c * plane;
                let s = &src[base..base + plane];
                let (a, b) = (s[t.y0 * w + t.x0], s[t.y0 * w + t.x1]);
                let (cc, d) = (s[t.y1 * w + t.x0], s[t.y1 * w + t.x1]);
                let gs = &mut grad_src[base..base + plane];
                gs[t.y0 * w + t.x0] += g * (1.0 - t.fx) * (1.0 - t.fy);
                gs[t.y0 * w + t.x1] += g * t.fx * (1.0 - t.fy);
                gs[t.y1 * w + t.x0] += g * (1.0 - t.fx) * t.fy;
                gs[t.y1 * w + t.x1] += g * t.fx * t.fy;
                gx += g * ((1.0 - t.fy) * (b - a) + t.fy * (d - cc));
                gy += g * ((1.0 - t.fx) * (cc - a) + t.fx * (d - b));
            }
            if !t.sat_x {
                grad_field[i] += gx;
            }
            if !t.sat_y {
                grad_field[plane + i] += gy;
            }
        }
    }
}

fn check_pair(images: &Tensor, fields: &Tensor) -> Result<()> {
    let [n, _, h, w] = images.shape();
    if fields.shape() != [n, 2, h, w] {
        return Err(Error::Shape(format!(
            "warp: image {:?} needs field [{n}, 2, {h}, {w}], got {:?}",
            images.shape(),
            fields.shape()
        )));
    }
    if !fields.is_finite() {
        return Err(Error::NonFinite("deformation field".into()));
    }
    Ok(())
}

/// Warps each image of `images` (`[N, C, H, W]`) with the matching field
/// (`[N, 2, H, W]`).
pub fn warp_batch(images: &Tensor, fields: &Tensor) -> Result<Tensor> {
    check_pair(images, fields)?;
    let [_, c, h, w] = images.shape();
    let mut out = Tensor::zeros(images.shape());
    let len = c * h * w;
    par::for_each_chunk(out.data_mut(), len, |n, o| {
        warp_sample(images.sample(n), fields.sample(n), c, h, w, o)
    });
    Ok(out)
}

/// Returns `(grad_images, grad_fields)` for [`warp_batch`].
pub fn warp_batch_backward(
    images: &Tensor,
    fields: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_pair(images, fields)?;
    upstream.expect_shape(images.shape(), "warp upstream gradient")?;
    let [n, c, h, w] = images.shape();
    let parts = par::map_range(n, |i| {
        let mut gs = vec![0.0; c * h * w];
        let mut gf = vec![0.0; 2 * h * w];
        warp_sample_backward(
            images.sample(i),
            fields.sample(i),
            upstream.sample(i),
            c,
            h,
            w,
            &mut gs,
            &mut gf,
        );
        (gs, gf)
    });
    let (gs, gf): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    Ok((
        Tensor::from_vec([n, c, h, w], gs.concat())?,
        Tensor::from_vec([n, 2, h, w], gf.concat())?,
    ))
}

/// Backward warp of a single image (`[1, C, H, W]`, any channel count).
pub fn warp(image: &Tensor, field: &DeformationField) -> Result<Tensor> {
    warp_batch(image, field.offsets())
}

/// Gradients of `sum(upstream * warp(image, field))` with respect to the
/// image and the offsets.
pub fn warp_gradients(
    image: &Tensor,
    field: &DeformationField,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    warp_batch_backward(image, field.offsets(), upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::KeyedRng;

    fn img(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
        Tensor::from_vec([1, c, h, w], KeyedRng::new(seed).normals("img", 0, c * h * w)).unwrap()
    }

    #[test]
    fn zero_field_is_bitwise_identity() {
        let x = img(5, 7, 3, 1);
        let y = warp(&x, &DeformationField::zeros(5, 7, 1)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn unit_shift_clamps_at_border() {
        let x = Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = DeformationField::constant(1, 4, 1.0, 0.0, 1);
        assert_eq!(warp(&x, &f).unwrap().data(), &[2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn half_pixel_offset_averages_four_texels() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let mut off = Tensor::zeros([1, 2, 2, 2]);
        off.set(0, 0, 0, 0, 0.5);
        off.set(0, 1, 0, 0, 0.5);
        let y = warp(&x, &DeformationField::new(off, 1).unwrap()).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), 3.0);
    }

    #[test]
    fn mismatched_shapes_and_nan_fields_fail() {
        let x = img(4, 4, 3, 2);
        let f = DeformationField::zeros(4, 5, 1);
        assert!(matches!(warp(&x, &f), Err(Error::Shape(_))));
        let mut bad = Tensor::zeros([1, 2, 4, 4]);
        bad.set(0, 0, 1, 1, f64::NAN);
        assert!(matches!(warp_batch(&x, &bad), Err(Error::NonFinite(_))));
        assert!(DeformationField::new(bad, 1).is_err());
    }

    #[test]
    fn ones_upstream_on_zero_field_gives_ones() {
        let x = img(4, 6, 2, 3);
        let f = DeformationField::zeros(4, 6, 1);
        let (gx, gf) = warp_gradients(&x, &f, &Tensor::full(x.shape(), 1.0)).unwrap();
        assert!(gx.data().iter().all(|&v| v == 1.0));
        assert_eq!(gf.shape(), [1, 2, 4, 6]);
    }

    #[test]
    fn saturated_axis_has_zero_field_gradient() {
        let x = img(4, 4, 3, 4);
        let f = DeformationField::constant(4, 4, 10.0, 0.3, 1);
        let (_, gf) = warp_gradients(&x, &f, &Tensor::full(x.shape(), 1.0)).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                assert_eq!(gf.at(0, 0, y, xx), 0.0);
            }
        }
        assert!(gf.data()[16..].iter().any(|&v| v != 0.0));
    }
}
