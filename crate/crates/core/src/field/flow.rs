use super::types::{DeformationField, FlowField, WeightMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EDGE_BETA: f64 = 1.0;

/// `F(t -> t+1) = offsets(t+1) - offsets(t)`; the shared output grid cancels.
pub fn flow_between(field_t: &DeformationField, field_next: &DeformationField) -> Result<FlowField> {
    if field_t.offsets().shape() != field_next.offsets().shape() {
        return Err(Error::Shape(format!(
            "flow: {:?} vs {:?}",
            field_t.offsets().shape(),
            field_next.offsets().shape()
        )));
    }
    if field_next.frame_index != field_t.frame_index + 1 {
        return Err(Error::Invalid(format!(
            "flow needs consecutive frames, got {} -> {}",
            field_t.frame_index, field_next.frame_index
        )));
    }
    let vectors = field_next
        .offsets()
        .zip_map(field_t.offsets(), |b, a| b - a)?;
    Ok(FlowField {
        vectors,
        from_frame: field_t.frame_index,
        to_frame: field_next.frame_index,
    })
}

/// `w = exp(-beta * (|gx| + |gy|))` where `gx`, `gy` are channel-mean forward
/// differences. The last column (row) has zero x (y) difference.
pub fn edge_weights(image: &Tensor, beta: f64) -> Result<WeightMap> {
    let [n, c, h, w] = image.shape();
    if !image.is_finite() {
        return Err(Error::NonFinite("edge weight image".into()));
    }
    if c == 0 {
        return Err(Error::Shape("edge weights need at least one channel".into()));
    }
    let mut out = Tensor::zeros([n, 1, h, w]);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let (mut gx, mut gy) = (0.0, 0.0);
                for ch in 0..c {
                    let v = image.at(b, ch, y, x);
                    if x + 1 < w {
                        gx += image.at(b, ch, y, x + 1) - v;
                    }
                    if y + 1 < h {
                        gy += image.at(b, ch, y + 1, x) - v;
                    }
                }
                let g = (gx / c as f64).abs() + (gy / c as f64).abs();
                out.set(b, 0, y, x, (-beta * g).exp());
            }
        }
    }
    Ok(WeightMap(out))
}

#[derive(Debug, Clone)]
pub struct SmoothnessLoss {
    pub value: f64,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
}

/// Weighted L1 on the temporal flow difference, averaged over every pixel,
/// component and batch entry. `flow_a`, `flow_b` are `[N, 2, H, W]` and
/// `weights` is `[N, 1, H, W]`. The subgradient at a tie is zero.
pub fn smoothness_kernel(flow_a: &Tensor, flow_b: &Tensor, weights: &Tensor) -> Result<SmoothnessLoss> {
    let [n, c, h, w] = flow_a.shape();
    if c != 2 {
        return Err(Error::Shape(format!("flow must have 2 channels, got {c}")));
    }
    flow_b.expect_shape(flow_a.shape(), "smoothness flow_b")?;
    weights.expect_shape([n, 1, h, w], "smoothness weights")?;
    let count = (n * 2 * h * w) as f64;
    let mut value = 0.0;
    let mut grad_a = Tensor::zeros(flow_a.shape());
    let mut grad_b = Tensor::zeros(flow_a.shape());
    let plane = h * w;
    for b in 0..n {
        for comp in 0..2 {
            for i in 0..plane {
                let o = (b * 2 + comp) * plane + i;
                let wt = weights.data()[b * plane + i];
                let d = flow_b.data()[o] - flow_a.data()[o];
                value += wt * d.abs();
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad_b.data_mut()[o] = wt * s / count;
                grad_a.data_mut()[o] = -wt * s / count;
            }
        }
    }
    Ok(SmoothnessLoss {
        value: value / count,
        grad_a,
        grad_b,
    })
}

/// Temporal smoothness between `flow_a = F(t -> t+1)` and
/// `flow_b = F(t+1 -> t+2)`.
pub fn smoothness_loss(flow_a: &FlowField, flow_b: &FlowField, weights: &WeightMap) -> Result<SmoothnessLoss> {
    if flow_b.from_frame != flow_a.to_frame {
        return Err(Error::Invalid(format!(
            "flows are not consecutive: {}->{} then {}->{}",
            flow_a.from_frame, flow_a.to_frame, flow_b.from_frame, flow_b.to_frame
        )));
    }
    smoothness_kernel(&flow_a.vectors, &flow_b.vectors, &weights.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::KeyedRng;

    fn random_field(seed: u64, idx: u32) -> DeformationField {
        let v = KeyedRng::new(seed).normals("field", idx as u64, 2 * 5 * 6);
        DeformationField::new(Tensor::from_vec([1, 2, 5, 6], v).unwrap(), idx).unwrap()
    }

    #[test]
    fn equal_fields_give_zero_flow() {
        let a = random_field(1, 3);
        let mut b = a.clone();
        b.frame_index = 4;
        let f = flow_between(&a, &b).unwrap();
        assert!(f.vectors.data().iter().all(|&v| v == 0.0));
        assert_eq!((f.from_frame, f.to_frame), (3, 4));
    }

    #[test]
    fn constant_step_flow() {
        let a = DeformationField::zeros(3, 3, 1);
        let b = DeformationField::constant(3, 3, 2.0, -1.0, 2);
        let f = flow_between(&a, &b).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(f.vectors.at(0, 0, y, x), 2.0);
                assert_eq!(f.vectors.at(0, 1, y, x), -1.0);
            }
        }
    }

    #[test]
    fn flows_telescope() {
        let (a, b, c) = (random_field(2, 1), random_field(2, 2), random_field(2, 3));
        let ab = flow_between(&a, &b).unwrap();
        let bc = flow_between(&b, &c).unwrap();
        for i in 0..ab.vectors.numel() {
            let lhs = ab.vectors.data()[i] + bc.vectors.data()[i];
            let rhs = c.offsets().data()[i] - a.offsets().data()[i];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn non_consecutive_frames_are_rejected() {
        let a = random_field(3, 1);
        let b = random_field(3, 3);
        assert!(flow_between(&a, &b).is_err());
        let c = DeformationField::zeros(4, 4, 2);
        assert!(matches!(flow_between(&a, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_image_has_unit_weights() {
        let w = edge_weights(&Tensor::full([1, 3, 4, 4], 0.3), 1.0).unwrap();
        assert!(w.0.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn step_edge_of_height_two() {
        // left half -1, right half +1
        let img = Tensor::from_fn([1, 3, 2, 4], |[_, _, _, x]| if x < 2 { -1.0 } else { 1.0 });
        let w = edge_weights(&img, 1.0).unwrap();
        for y in 0..2 {
            assert_eq!(w.0.at(0, 0, y, 1), (-2.0f64).exp());
            assert_eq!(w.0.at(0, 0, y, 0), 1.0);
            assert_eq!(w.0.at(0, 0, y, 3), 1.0);
        }
    }

    #[test]
    fn weights_decrease_with_gradient_magnitude() {
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let step = k as f64 * 0.2;
            let img = Tensor::from_fn([1, 1, 1, 2], |[_, _, _, x]| x as f64 * step);
            let w = edge_weights(&img, 1.0).unwrap().0.at(0, 0, 0, 0);
            assert!(w <= prev && w > 0.0 && w <= 1.0);
            prev = w;
        }
    }

    fn flow(v: Tensor, from: u32) -> FlowField {
        FlowField {
            vectors: v,
            from_frame: from,
            to_frame: from + 1,
        }
    }

    #[test]
    fn identical_flows_have_zero_loss() {
        let f = random_field(4, 1).offsets().clone();
        let l = smoothness_loss(&flow(f.clone(), 1), &flow(f, 2), &WeightMap::ones(5, 6)).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad_a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_difference_gives_unit_loss() {
        let a = Tensor::zeros([1, 2, 3, 3]);
        let b = Tensor::full([1, 2, 3, 3], 1.0);
        let l = smoothness_loss(&flow(a, 1), &flow(b, 2), &WeightMap::ones(3, 3)).unwrap();
        assert_eq!(l.value, 1.0);
        assert!(l.grad_b.data().iter().all(|&v| (v - 1.0 / 18.0).abs() < 1e-15));
    }

    #[test]
    fn weighting_never_increases_loss() {
        let a = random_field(5, 1).offsets().clone();
        let b = random_field(5, 2).offsets().clone();
        let img = Tensor::from_vec([1, 3, 5, 6], KeyedRng::new(5).normals("img", 0, 90)).unwrap();
        let w = edge_weights(&img, 1.0).unwrap();
        let weighted = smoothness_loss(&flow(a.clone(), 1), &flow(b.clone(), 2), &w).unwrap();
        let plain = smoothness_loss(&flow(a, 1), &flow(b, 2), &WeightMap::ones(5, 6)).unwrap();
        assert!(weighted.value <= plain.value);
    }

    #[test]
    fn mismatched_flows_are_rejected() {
        let a = Tensor::zeros([1, 2, 3, 3]);
        let b = Tensor::zeros([1, 2, 3, 4]);
        assert!(smoothness_loss(&flow(a.clone(), 1), &flow(b, 2), &WeightMap::ones(3, 3)).is_err());
        assert!(smoothness_loss(&flow(a.clone(), 1), &flow(a, 3), &WeightMap::ones(3, 3)).is_err());
    }
}
