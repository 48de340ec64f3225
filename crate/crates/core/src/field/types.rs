use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Canonical image, shape `[1, 3, H, W]`, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalImage(Tensor);

impl CanonicalImage {
    /// Clamps to `[-1, 1]`; rejects non-finite input.
    pub fn new(t: Tensor) -> Result<Self> {
        let [n, c, h, w] = t.shape();
        if n != 1 || c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "canonical image must be [1, 3, H, W], got {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("canonical image".into()));
        }
        Ok(Self(t.clamp(-1.0, 1.0)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }
}

/// Per-frame offsets `(dx, dy)`, shape `[1, 2, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    offsets: Tensor,
    pub frame_index: u32,
}

impl DeformationField {
    pub fn new(offsets: Tensor, frame_index: u32) -> Result<Self> {
        let [n, c, h, w] = offsets.shape();
        if n != 1 || c != 2 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "deformation field must be [1, 2, H, W], got {:?}",
                offsets.shape()
            )));
        }
        if !offsets.is_finite() {
            return Err(Error::NonFinite(format!(
                "deformation field at frame {frame_index}"
            )));
        }
        Ok(Self {
            offsets,
            frame_index,
        })
    }

    pub fn zeros(height: usize, width: usize, frame_index: u32) -> Self {
        Self {
            offsets: Tensor::zeros([1, 2, height, width]),
            frame_index,
        }
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64, frame_index: u32) -> Self {
        let offsets = Tensor::from_fn([1, 2, height, width], |[_, c, _, _]| {
            if c == 0 {
                dx
            } else {
                dy
            }
        });
        Self {
            offsets,
            frame_index,
        }
    }

    pub fn offsets(&self) -> &Tensor {
        &self.offsets
    }

    pub fn height(&self) -> usize {
        self.offsets.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.offsets.shape()[3]
    }

    /// `(dx, dy)` at an integer pixel.
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.offsets.at(0, 0, y, x), self.offsets.at(0, 1, y, x))
    }
}

/// Inter-frame flow `from_frame -> from_frame + 1`, shape `[1, 2, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub vectors: Tensor,
    pub from_frame: u32,
    pub to_frame: u32,
}

/// Per-pixel edge weights in `(0, 1]`, shape `[1, 1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap(pub Tensor);

impl WeightMap {
    pub fn ones(height: usize, width: usize) -> Self {
        Self(Tensor::full([1, 1, height, width], 1.0))
    }
}

/// Frames `[T, 3, H, W]` with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
}

impl VideoClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        let [t, c, h, w] = frames.shape();
        if t == 0 || c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "video clip must be [T>=1, 3, H, W], got {:?}",
                frames.shape()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("video clip".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Frame `i` (0-based) as `[1, 3, H, W]`.
    pub fn frame(&self, i: usize) -> Tensor {
        self.frames.select(&[i])
    }
}
