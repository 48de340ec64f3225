//! Propagation from the canonical image to every frame: edits, point tracks,
//! segmentation masks, and motion resampling for a fixed canonical image.
//!
//! Everything here is a pure function of the canonical image and the
//! deformation fields; no network is evaluated except in [`resample_motion`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{warp, CanonicalImage, DeformationField, VideoClip};
use crate::models::{GeneratorBundle, Latents, Sample};
use crate::par;
use crate::tensor::Tensor;

/// Tracked positions with a residual above this many pixels are invalid.
pub const VALID_RESIDUAL: f64 = 1.0;
/// Levenberg damping for the refinement step when the field Jacobian is
/// close to singular.
pub const GN_DAMPING: f64 = 1e-4;
const SINGULAR_DET: f64 = 1e-3;

fn check_fields(fields: &[DeformationField], h: usize, w: usize) -> Result<()> {
    for f in fields {
        if f.height() != h || f.width() != w {
            return Err(Error::Shape(format!(
                "field for frame {} is {}x{}, canonical is {h}x{w}",
                f.frame_index,
                f.height(),
                f.width()
            )));
        }
    }
    Ok(())
}

fn warp_all(image: &Tensor, fields: &[DeformationField]) -> Result<Vec<Tensor>> {
    par::map_range(fields.len(), |i| warp(image, &fields[i]))
        .into_iter()
        .collect()
}

/// Frame `t` is the edited canonical image warped by `fields[t]`.
pub fn propagate_edit(edited: &CanonicalImage, fields: &[DeformationField]) -> Result<VideoClip> {
    if fields.is_empty() {
        return Err(Error::Invalid("no deformation fields to propagate through".into()));
    }
    check_fields(fields, edited.height(), edited.width())?;
    VideoClip::new(Tensor::stack(&warp_all(edited.tensor(), fields)?)?)
}

/// Binary mask `[1, 1, H, W]` with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Tensor);

impl Mask {
    pub fn new(t: Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 1 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("mask must be [1, 1, H, W], got {:?}", t.shape())));
        }
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("mask values must be 0 or 1".into()));
        }
        Ok(Self(t))
    }

    /// Thresholds at 0.5.
    pub fn threshold(t: &Tensor) -> Result<Self> {
        Self::new(t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// The mask replicated into a three-channel image, for use as an edit.
    pub fn indicator_image(&self) -> Result<CanonicalImage> {
        let [_, _, h, w] = self.0.shape();
        CanonicalImage::new(Tensor::from_fn([1, 3, h, w], |[_, _, y, x]| self.0.at(0, 0, y, x)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    pub source: Mask,
    pub frames: Vec<Mask>,
}

/// Frame mask `t` is `warp(mask, fields[t]) >= 0.5`.
pub fn propagate_mask(mask: &Mask, fields: &[DeformationField]) -> Result<MaskSequence> {
    check_fields(fields, mask.height(), mask.width())?;
    let frames = warp_all(mask.tensor(), fields)?
        .iter()
        .map(Mask::threshold)
        .collect::<Result<_>>()?;
    Ok(MaskSequence {
        source: mask.clone(),
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub x: f64,
    pub y: f64,
    pub residual: f64,
    pub valid: bool,
}

/// One entry per field, in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub source: (f64, f64),
    pub points: Vec<TrackPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Offsets and their spatial derivatives, bilinearly interpolated at a
/// continuous position inside the frame.
fn sample_field(f: &DeformationField, x: f64, y: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let (h, w) = (f.height(), f.width());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let o = f.offsets();
    let mut val = [0.0; 2];
    let mut jac = [[0.0; 2]; 2];
    for c in 0..2 {
        let (a, b) = (o.at(0, c, y0, x0), o.at(0, c, y0, x1));
        let (cc, d) = (o.at(0, c, y1, x0), o.at(0, c, y1, x1));
        val[c] = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * cc + fx * d);
        if x1 != x0 {
            jac[c][0] = (1.0 - fy) * (b - a) + fy * (d - cc);
        }
        if y1 != y0 {
            jac[c][1] = (1.0 - fx) * (cc - a) + fx * (d - b);
        }
    }
    (val, jac)
}

fn residual(f: &DeformationField, x: f64, y: f64, p: (f64, f64)) -> f64 {
    let (d, _) = sample_field(f, x, y);
    (x + d[0] - p.0).hypot(y + d[1] - p.1)
}

fn track_frame(f: &DeformationField, p: (f64, f64)) -> TrackPoint {
    let (h, w) = (f.height(), f.width());
    let mut best = (f64::INFINITY, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = f.at(y, x);
            let (rx, ry) = (x as f64 + dx - p.0, y as f64 + dy - p.1);
            let e = rx * rx + ry * ry;
            if e < best.0 {
                best = (e, y, x);
            }
        }
    }
    let (ox, oy) = (best.2 as f64, best.1 as f64);
    let (d, j) = sample_field(f, ox, oy);
    let r = [ox + d[0] - p.0, oy + d[1] - p.1];
    // J = I + dOffset/dPosition. The plain step solves J step = -r; near a
    // fold (det J ~ 0) fall back to (J^T J + mu I) step = -J^T r.
    let jm = [[1.0 + j[0][0], j[0][1]], [j[1][0], 1.0 + j[1][1]]];
    let det_j = jm[0][0] * jm[1][1] - jm[0][1] * jm[1][0];
    let step = if det_j.abs() > SINGULAR_DET {
        [
            (jm[1][1] * r[0] - jm[0][1] * r[1]) / det_j,
            (jm[0][0] * r[1] - jm[1][0] * r[0]) / det_j,
        ]
    } else {
        let a00 = jm[0][0] * jm[0][0] + jm[1][0] * jm[1][0] + GN_DAMPING;
        let a01 = jm[0][0] * jm[0][1] + jm[1][0] * jm[1][1];
        let a11 = jm[0][1] * jm[0][1] + jm[1][1] * jm[1][1] + GN_DAMPING;
        let g0 = jm[0][0] * r[0] + jm[1][0] * r[1];
        let g1 = jm[0][1] * r[0] + jm[1][1] * r[1];
        let det = a00 * a11 - a01 * a01;
        [(a11 * g0 - a01 * g1) / det, (a00 * g1 - a01 * g0) / det]
    };
    let mut x = (ox - step[0]).clamp(0.0, (w - 1) as f64);
    let mut y = (oy - step[1]).clamp(0.0, (h - 1) as f64);
    let mut res = residual(f, x, y, p);
    let start = best.0.sqrt();
    if res > start {
        // the linearisation overshot; keep the lattice minimiser
        (x, y, res) = (ox, oy, start);
    }
    TrackPoint {
        x,
        y,
        residual: res,
        valid: res < VALID_RESIDUAL,
    }
}

/// Follows canonical-space point `p = (x, y)` through every frame: the
/// output pixel whose sample position lands closest to `p` (ties go to the
/// lowest row-major index), refined by one damped Gauss-Newton step.
pub fn track_point(p: (f64, f64), fields: &[DeformationField]) -> Result<Trajectory> {
    let Some(first) = fields.first() else {
        return Err(Error::Invalid("no deformation fields to track through".into()));
    };
    let (h, w) = (first.height(), first.width());
    check_fields(fields, h, w)?;
    let inside = (0.0..=(w - 1) as f64).contains(&p.0) && (0.0..=(h - 1) as f64).contains(&p.1);
    if !inside {
        return Err(Error::Invalid(format!(
            "point ({}, {}) lies outside the {w}x{h} canonical image",
            p.0, p.1
        )));
    }
    Ok(Trajectory {
        source: p,
        points: par::map_range(fields.len(), |i| track_frame(&fields[i], p)),
    })
}

/// Samples the same content code with new motion (`z_d`, motion seed).
/// The canonical image depends only on `z_c`, so it is identical across
/// resamples.
pub fn resample_motion(bundle: &GeneratorBundle, z_c: &[f64], z_d: &[f64], motion_seed: u64, frames: usize) -> Result<Sample> {
    if !bundle.has_deformation() {
        return Err(Error::MissingParam(
            "bundle has no deformation generator; motion cannot be resampled".into(),
        ));
    }
    let latents = Latents {
        z_c: z_c.to_vec(),
        z_d: z_d.to_vec(),
        motion_seed,
    };
    bundle.sample(&latents, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::KeyedRng;

    fn canonical(h: usize, w: usize, seed: u64) -> CanonicalImage {
        let v = KeyedRng::new(seed).uniforms("c", 0, 3 * h * w);
        CanonicalImage::new(Tensor::from_vec([1, 3, h, w], v.iter().map(|u| 2.0 * u - 1.0).collect()).unwrap()).unwrap()
    }

    fn random_fields(n: usize, h: usize, w: usize, seed: u64) -> Vec<DeformationField> {
        (0..n)
            .map(|i| {
                let v = KeyedRng::new(seed).normals("f", i as u64, 2 * h * w);
                DeformationField::new(Tensor::from_vec([1, 2, h, w], v).unwrap(), i as u32 + 1).unwrap()
            })
            .collect()
    }

    #[test]
    fn unedited_canonical_reproduces_warps() {
        let c = canonical(6, 7, 1);
        let fields = random_fields(4, 6, 7, 2);
        let clip = propagate_edit(&c, &fields).unwrap();
        for (i, f) in fields.iter().enumerate() {
            assert_eq!(clip.frame(i), warp(c.tensor(), f).unwrap());
        }
    }

    #[test]
    fn zero_fields_repeat_the_edit() {
        let c = canonical(5, 5, 3);
        let fields: Vec<_> = (1..=3).map(|i| DeformationField::zeros(5, 5, i)).collect();
        let clip = propagate_edit(&c, &fields).unwrap();
        for i in 0..3 {
            assert_eq!(&clip.frame(i), c.tensor());
        }
    }

    #[test]
    fn edit_shape_mismatch_fails() {
        let c = canonical(5, 5, 3);
        assert!(matches!(
            propagate_edit(&c, &[DeformationField::zeros(5, 6, 1)]),
            Err(Error::Shape(_))
        ));
        assert!(propagate_edit(&c, &[]).is_err());
    }

    #[test]
    fn translated_pixel_edit_moves_against_the_offset() {
        let (h, w) = (6, 10);
        let base = canonical(h, w, 4);
        let mut t = base.tensor().clone();
        for c in 0..3 {
            t.set(0, c, 3, 6, 1.0);
        }
        let edited = CanonicalImage::new(t).unwrap();
        for d in [1usize, 2, 3] {
            let f = DeformationField::constant(h, w, d as f64, 0.0, 1);
            let before = propagate_edit(&base, std::slice::from_ref(&f)).unwrap().frame(0);
            let after = propagate_edit(&edited, std::slice::from_ref(&f)).unwrap().frame(0);
            for y in 0..h {
                for x in 0..w {
                    let changed = (0..3).any(|c| before.at(0, c, y, x) != after.at(0, c, y, x));
                    assert_eq!(changed, y == 3 && x == 6 - d, "d={d} at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn mask_rejects_non_binary_values() {
        assert!(Mask::new(Tensor::full([1, 1, 2, 2], 0.5)).is_err());
        assert!(Mask::new(Tensor::zeros([1, 3, 2, 2])).is_err());
    }

    #[test]
    fn all_ones_mask_survives_any_field() {
        let m = Mask::new(Tensor::full([1, 1, 5, 6], 1.0)).unwrap();
        let seq = propagate_mask(&m, &random_fields(3, 5, 6, 9)).unwrap();
        assert!(seq.frames.iter().all(|f| f.count() == 30));
    }

    #[test]
    fn half_plane_boundary_shifts_by_one_column() {
        let (h, w) = (4, 8);
        let m = Mask::new(Tensor::from_fn([1, 1, h, w], |[_, _, _, x]| (x >= 4) as u8 as f64)).unwrap();
        let f = DeformationField::constant(h, w, 1.0, 0.0, 1);
        let seq = propagate_mask(&m, &[f]).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert_eq!(seq.frames[0].tensor().at(0, 0, y, x), (x >= 3) as u8 as f64);
            }
        }
    }

    #[test]
    fn mask_matches_thresholded_indicator_edit() {
        let (h, w) = (7, 9);
        let v = KeyedRng::new(5).uniforms("m", 0, h * w);
        let m = Mask::new(Tensor::from_vec([1, 1, h, w], v.iter().map(|&u| (u > 0.6) as u8 as f64).collect()).unwrap()).unwrap();
        let fields = random_fields(5, h, w, 6);
        let seq = propagate_mask(&m, &fields).unwrap();
        let clip = propagate_edit(&m.indicator_image().unwrap(), &fields).unwrap();
        for (i, fm) in seq.frames.iter().enumerate() {
            let frame = clip.frame(i);
            for c in 0..3 {
                let ch = Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| frame.at(0, c, y, x));
                assert_eq!(&Mask::threshold(&ch).unwrap(), fm);
            }
        }
    }

    #[test]
    fn zero_fields_track_constant() {
        let fields: Vec<_> = (1..=4).map(|i| DeformationField::zeros(8, 8, i)).collect();
        let tr = track_point((3.25, 5.5), &fields).unwrap();
        for p in &tr.points {
            assert_eq!((p.x, p.y), (3.25, 5.5));
            assert!(p.residual < 1e-9 && p.valid);
        }
    }

    #[test]
    fn global_translation_inverts_in_closed_form() {
        let (h, w) = (12, 16);
        let shifts = [0.0, 0.7, -1.3, 2.25, 4.5];
        let fields: Vec<_> = shifts
            .iter()
            .enumerate()
            .map(|(i, &d)| DeformationField::constant(h, w, d, 0.0, i as u32 + 1))
            .collect();
        let p = (8.3, 4.6);
        let tr = track_point(p, &fields).unwrap();
        for (pt, &d) in tr.points.iter().zip(&shifts) {
            assert!((pt.x - (p.0 - d)).abs() < 1e-3, "{pt:?} d={d}");
            assert!((pt.y - p.1).abs() < 1e-3);
            assert!(pt.residual < 1e-3 && pt.valid);
        }
    }

    #[test]
    fn unreachable_point_is_invalid() {
        // every output pixel samples column 0, so x = 6 has no preimage
        let (h, w) = (5, 8);
        let f = DeformationField::new(
            Tensor::from_fn([1, 2, h, w], |[_, c, _, x]| if c == 0 { -(x as f64) } else { 0.0 }),
            1,
        )
        .unwrap();
        let tr = track_point((6.0, 2.0), &[f]).unwrap();
        assert!(!tr.points[0].valid);
        assert!(tr.points[0].residual >= VALID_RESIDUAL);
    }

    #[test]
    fn outside_point_is_rejected() {
        let f = DeformationField::zeros(4, 4, 1);
        assert!(track_point((4.5, 1.0), std::slice::from_ref(&f)).is_err());
        assert!(track_point((1.0, -0.1), &[f]).is_err());
    }
}
