//! 8-bit PNG transport for images in `[-1, 1]` and binary masks.

use std::io::Cursor;

use warpgen::propagate::Mask;
use warpgen::Tensor;

/// A malformed image payload, with a machine-readable code.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageError {
    pub code: &'static str,
    pub message: String,
}

impl ImageError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ImageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ImageError {}

pub fn quantize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 127.5 - 1.0
}

/// Snaps every value to the nearest 8-bit level, so that a PNG round trip
/// reproduces the tensor exactly.
pub fn quantize_tensor(t: &Tensor) -> Tensor {
    t.map(|v| dequantize(quantize(v)))
}

fn encode(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("png header into memory");
        w.write_image_data(data).expect("png data into memory");
    }
    out
}

/// Encodes item `n` of a `[N, 3, H, W]` tensor as an RGB PNG.
pub fn encode_rgb(t: &Tensor, n: usize) -> Vec<u8> {
    let [_, c, h, w] = t.shape();
    assert_eq!(c, 3, "rgb encoding needs 3 channels");
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                px.push(quantize(t.at(n, ch, y, x)));
            }
        }
    }
    encode(w, h, png::ColorType::Rgb, &px)
}

/// Encodes a mask as an 8-bit grayscale PNG with values 0 and 255.
pub fn encode_mask(m: &Mask) -> Vec<u8> {
    let px: Vec<u8> = m.tensor().data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    encode(m.width(), m.height(), png::ColorType::Grayscale, &px)
}

struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn decode(bytes: &[u8]) -> Result<Raster, ImageError> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| ImageError::new("invalid_png", e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ImageError::new("invalid_png", e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::new("unsupported_png", format!("bit depth {:?}, expected 8", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(ImageError::new("unsupported_png", format!("color type {other:?}"))),
    };
    buf.truncate(info.buffer_size());
    Ok(Raster {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        data: buf,
    })
}

/// Decodes an RGB(A) or grayscale PNG into a `[1, 3, H, W]` tensor. Alpha is
/// ignored and gray is replicated across the color channels.
pub fn decode_rgb(bytes: &[u8]) -> Result<Tensor, ImageError> {
    let r = decode(bytes)?;
    let color = if r.channels >= 3 { 3 } else { 1 };
    Ok(Tensor::from_fn([1, 3, r.height, r.width], |[_, c, y, x]| {
        let ch = if color == 3 { c } else { 0 };
        dequantize(r.data[(y * r.width + x) * r.channels + ch])
    }))
}

/// Decodes a mask PNG. The first channel must be 0 (outside) or 255 (inside).
pub fn decode_mask(bytes: &[u8]) -> Result<Mask, ImageError> {
    let r = decode(bytes)?;
    let mut v = Vec::with_capacity(r.width * r.height);
    for i in 0..r.width * r.height {
        v.push(match r.data[i * r.channels] {
            0 => 0.0,
            255 => 1.0,
            other => {
                return Err(ImageError::new(
                    "mask_not_binary",
                    format!("mask pixel {i} is {other}, expected 0 or 255"),
                ))
            }
        });
    }
    let t = Tensor::from_vec([1, 1, r.height, r.width], v).expect("mask raster size");
    Ok(Mask::new(t).expect("binary mask"))
}
