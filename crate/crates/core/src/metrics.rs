//! Desk-scale quality and motion metrics.
//!
//! Frames are summarised by a fixed hand-crafted descriptor (per-cell channel
//! means on a 4x4 grid plus per-channel intensity histograms). Fréchet
//! distances between Gaussian fits of these descriptors stand in for learned
//! FID/FVD: "toy-FID" uses single frames, "toy-FVD" stacks the descriptors of
//! [`VIDEO_FRAMES`] consecutive frames.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::par;
use crate::tensor::Tensor;

pub const GRID: usize = 4;
pub const BINS: usize = 8;
pub const FRAME_DIM: usize = GRID * GRID * 3 + 3 * BINS;
pub const VIDEO_FRAMES: usize = 16;
pub const JITTER: f64 = 1e-6;

/// Descriptor of one `[C=3, H, W]` frame, length [`FRAME_DIM`]. `H` and `W`
/// must be at least [`GRID`].
pub fn frame_descriptor(frame: &[f64], h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    debug_assert_eq!(frame.len(), 3 * plane);
    let mut out = Vec::with_capacity(FRAME_DIM);
    for c in 0..3 {
        let p = &frame[c * plane..(c + 1) * plane];
        for gy in 0..GRID {
            let (y0, y1) = (gy * h / GRID, (gy + 1) * h / GRID);
            for gx in 0..GRID {
                let (x0, x1) = (gx * w / GRID, (gx + 1) * w / GRID);
                let mut s = 0.0;
                for y in y0..y1 {
                    s += p[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    for c in 0..3 {
        let mut hist = [0.0; BINS];
        for &v in &frame[c * plane..(c + 1) * plane] {
            let b = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * BINS as f64) as usize;
            hist[b.min(BINS - 1)] += 1.0;
        }
        out.extend(hist.iter().map(|v| v / plane as f64));
    }
    out
}

fn check_frames(frames: &Tensor) -> Result<()> {
    let [_, c, h, w] = frames.shape();
    if c != 3 || h < GRID || w < GRID {
        return Err(Error::Shape(format!(
            "descriptors need [N, 3, H>={GRID}, W>={GRID}] frames, got {:?}",
            frames.shape()
        )));
    }
    Ok(())
}

/// One descriptor per frame of `frames` (`[N, 3, H, W]`).
pub fn frame_descriptors(frames: &Tensor) -> Result<Vec<Vec<f64>>> {
    check_frames(frames)?;
    let [n, _, h, w] = frames.shape();
    Ok(par::map_range(n, |i| frame_descriptor(frames.sample(i), h, w)))
}

/// Concatenated descriptors of the first [`VIDEO_FRAMES`] frames.
pub fn video_descriptor(frames: &Tensor) -> Result<Vec<f64>> {
    check_frames(frames)?;
    let [n, _, h, w] = frames.shape();
    if n < VIDEO_FRAMES {
        return Err(Error::Invalid(format!(
            "video descriptors need {VIDEO_FRAMES} frames, got {n}"
        )));
    }
    Ok((0..VIDEO_FRAMES)
        .flat_map(|i| frame_descriptor(frames.sample(i), h, w))
        .collect())
}

/// Mean and (unbiased) covariance of a descriptor population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Invalid("feature statistics need at least one sample".into()));
        };
        let d = first.len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::Shape("feature samples have different lengths".into()));
        }
        let n = samples.len();
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| samples[i][j] - mean[j]);
        let denom = n.saturating_sub(1).max(1) as f64;
        let cov = (centered.transpose() * &centered) / denom;
        Ok(Self {
            mean,
            cov: cov.transpose().as_slice().to_vec(),
            count: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        (&m + m.transpose()) * 0.5 + DMatrix::identity(d, d) * JITTER
    }
}

fn check_psd(eigenvalues: &DVector<f64>, what: &str) -> Result<()> {
    let scale = eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    match eigenvalues.iter().find(|&&v| v < -1e-9 * scale) {
        Some(v) => Err(Error::Invalid(format!("{what} is not positive semidefinite (eigenvalue {v:e})"))),
        None => Ok(()),
    }
}

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::new(m);
    check_psd(&e.eigenvalues, what)?;
    let roots = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose())
}

/// Statistics with the jittered covariance root precomputed, for repeated
/// distances against one reference population.
#[derive(Debug, Clone)]
pub struct PreparedStats {
    pub stats: FeatureStats,
    cov: DMatrix<f64>,
    root: DMatrix<f64>,
}

impl PreparedStats {
    pub fn new(stats: FeatureStats) -> Result<Self> {
        if stats.cov.len() != stats.dim() * stats.dim() {
            return Err(Error::Shape(format!("covariance of length {} for dimension {}", stats.cov.len(), stats.dim())));
        }
        let cov = stats.cov_matrix();
        let root = psd_sqrt(cov.clone(), "first covariance")?;
        Ok(Self { stats, cov, root })
    }

    pub fn dim(&self) -> usize {
        self.stats.dim()
    }

    /// `|mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a C_b)^(1/2))`, both covariances
    /// jittered by [`JITTER`]. The trace of the product root is the sum of
    /// the roots of the eigenvalues of `A^(1/2) B A^(1/2)`, which are those
    /// of `C_a C_b`.
    pub fn distance(&self, b: &FeatureStats) -> Result<f64> {
        if self.dim() != b.dim() || b.cov.len() != b.dim() * b.dim() {
            return Err(Error::Shape(format!("feature statistics of dimension {} and {}", self.dim(), b.dim())));
        }
        let a = &self.stats;
        let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
        let cb = b.cov_matrix();
        check_psd(&cb.symmetric_eigenvalues(), "second covariance")?;
        let mid = &self.root * &cb * &self.root;
        let eig = ((&mid + mid.transpose()) * 0.5).symmetric_eigenvalues();
        check_psd(&eig, "covariance product")?;
        let cross: f64 = eig.iter().map(|v| v.max(0.0).sqrt()).sum();
        let d = dmu + self.cov.trace() + cb.trace() - 2.0 * cross;
        Ok(d.max(0.0))
    }
}

pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature statistics of dimension {} and {}", a.dim(), b.dim())));
    }
    PreparedStats::new(a.clone())?.distance(b)
}

/// Statistics of per-frame descriptors over a set of videos.
pub fn frame_stats(videos: &[Tensor]) -> Result<FeatureStats> {
    let mut all = Vec::new();
    for v in videos {
        all.extend(frame_descriptors(v)?);
    }
    FeatureStats::from_samples(&all)
}

/// Statistics of stacked video descriptors.
pub fn video_stats(videos: &[Tensor]) -> Result<FeatureStats> {
    let d = par::map_range(videos.len(), |i| video_descriptor(&videos[i]));
    FeatureStats::from_samples(&d.into_iter().collect::<Result<Vec<_>>>()?)
}

pub fn toy_fid(real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    frechet_distance(&frame_stats(real)?, &frame_stats(fake)?)
}

pub fn toy_fvd(real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    frechet_distance(&video_stats(real)?, &video_stats(fake)?)
}

/// Mean over interior triplets and over every pixel and component of
/// `|F(t -> t+1) - F(t+1 -> t+2)|`, i.e. the unweighted smoothness loss
/// averaged over all interior triplets.
pub fn temporal_jerk_fields(fields: &[DeformationField]) -> Result<f64> {
    let n = fields.len();
    if n < 3 {
        return Err(Error::Invalid(format!("temporal jerk needs at least 3 frames, got {n}")));
    }
    let shape = fields[0].offsets().shape();
    if let Some(f) = fields.iter().find(|f| f.offsets().shape() != shape) {
        return Err(Error::Shape(format!(
            "field for frame {} has shape {:?}, expected {shape:?}",
            f.frame_index,
            f.offsets().shape()
        )));
    }
    let mut total = 0.0;
    for t in 0..n - 2 {
        let (a, b, c) = (fields[t].offsets().data(), fields[t + 1].offsets().data(), fields[t + 2].offsets().data());
        let s: f64 = (0..a.len()).map(|i| (c[i] - 2.0 * b[i] + a[i]).abs()).sum();
        total += s / a.len() as f64;
    }
    Ok(total / (n - 2) as f64)
}

/// Mean absolute second temporal difference of pixel values, for
/// `frames` of shape `[T, C, H, W]`.
pub fn temporal_jerk_video(frames: &Tensor) -> Result<f64> {
    let [n, ..] = frames.shape();
    if n < 3 {
        return Err(Error::Invalid(format!("temporal jerk needs at least 3 frames, got {n}")));
    }
    let len = frames.sample_len();
    let mut total = 0.0;
    for t in 0..n - 2 {
        let (a, b, c) = (frames.sample(t), frames.sample(t + 1), frames.sample(t + 2));
        total += (0..len).map(|i| (c[i] - 2.0 * b[i] + a[i]).abs()).sum::<f64>();
    }
    Ok(total / ((n - 2) * len) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::KeyedRng;

    fn iso(d: usize, mean: Vec<f64>, var: f64) -> FeatureStats {
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = var;
        }
        FeatureStats { mean, cov, count: 10 }
    }

    #[test]
    fn descriptor_has_documented_length() {
        let f = KeyedRng::new(1).uniforms("f", 0, 3 * 32 * 32);
        let d = frame_descriptor(&f, 32, 32);
        assert_eq!(d.len(), FRAME_DIM);
        assert_eq!(FRAME_DIM, 72);
        for c in 0..3 {
            let h: f64 = d[48 + c * BINS..48 + (c + 1) * BINS].iter().sum();
            assert!((h - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_frame_descriptor() {
        let d = frame_descriptor(&[-1.0; 3 * 16], 4, 4);
        assert!(d[..48].iter().all(|&v| v == -1.0));
        assert_eq!(d[48], 1.0);
        assert!(d[49..56].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_stats_are_at_distance_zero() {
        let s: Vec<Vec<f64>> = (0..20).map(|i| KeyedRng::new(2).normals("s", i, 5)).collect();
        let st = FeatureStats::from_samples(&s).unwrap();
        assert!(frechet_distance(&st, &st).unwrap().abs() < 1e-9);
    }

    #[test]
    fn unit_mean_shift_with_identity_covariance() {
        let a = iso(6, vec![0.0; 6], 1.0);
        let mut m = vec![0.0; 6];
        m[0] = 1.0;
        let b = iso(6, m, 1.0);
        assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn scaled_identity_covariances() {
        let d = 5;
        let a = iso(d, vec![0.3; d], 4.0);
        let b = iso(d, vec![0.3; d], 1.0);
        // with jitter e: d * (4 + 1 + 2e - 2 sqrt((4 + e)(1 + e)))
        let e = JITTER;
        let expect = d as f64 * (5.0 + 2.0 * e - 2.0 * ((4.0 + e) * (1.0 + e)).sqrt());
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-9);
        assert!((got - d as f64).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch_and_indefinite_covariance_fail() {
        assert!(frechet_distance(&iso(2, vec![0.0; 2], 1.0), &iso(3, vec![0.0; 3], 1.0)).is_err());
        let bad = iso(2, vec![0.0; 2], -1.0);
        assert!(frechet_distance(&bad, &iso(2, vec![0.0; 2], 1.0)).is_err());
    }

    #[test]
    fn linear_offsets_have_zero_jerk() {
        let fields: Vec<_> = (0..5)
            .map(|t| DeformationField::constant(3, 4, 0.5 * t as f64 - 1.0, -0.25 * t as f64, t + 1))
            .collect();
        assert!(temporal_jerk_fields(&fields).unwrap().abs() < 1e-12);
    }

    #[test]
    fn alternating_offsets_have_jerk_four() {
        let fields: Vec<_> = (0..6)
            .map(|t| {
                let s = if t % 2 == 0 { 1.0 } else { -1.0 };
                DeformationField::constant(3, 3, s, s, t + 1)
            })
            .collect();
        assert_eq!(temporal_jerk_fields(&fields).unwrap(), 4.0);
    }

    #[test]
    fn static_video_has_zero_jerk() {
        let f = Tensor::from_vec([1, 3, 4, 4], KeyedRng::new(3).normals("v", 0, 48)).unwrap();
        let v = Tensor::stack(&[f.clone(), f.clone(), f.clone(), f]).unwrap();
        assert_eq!(temporal_jerk_video(&v).unwrap(), 0.0);
    }

    #[test]
    fn jerk_needs_three_frames() {
        let f = vec![DeformationField::zeros(2, 2, 1), DeformationField::zeros(2, 2, 2)];
        assert!(temporal_jerk_fields(&f).is_err());
        assert!(temporal_jerk_video(&Tensor::zeros([2, 3, 4, 4])).is_err());
    }
}
