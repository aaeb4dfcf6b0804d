//! Image loading: binary PPM (P6, 8-bit) and the `.rawimg` test fixture
//! format (three little-endian u32 dims, then f32 pixels). Anything else
//! is rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::EncoderConfig;

/// Channel-major pixel tensor `[3, H, W]` with values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageTensor<S> {
    pub pixels: Tensor<S>,
    pub source_id: String,
}

impl<S: Scalar> ImageTensor<S> {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Mean over all channel values; the stub captioner quantizes this.
    pub fn mean_brightness(&self) -> f64 {
        let n = self.pixels.numel();
        self.pixels.data().iter().map(|v| v.as_f64()).sum::<f64>() / n as f64
    }
}

/// Load and validate an image against the configured geometry.
pub fn load_image<S: Scalar>(path: &Path, cfg: &EncoderConfig) -> Result<ImageTensor<S>> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::data(format!("{name}: cannot read image: {e}")))?;
    decode_image(&bytes, &name, cfg)
}

/// Mean pixel value of a supported image, without geometry validation.
/// The stub captioner quantizes this into its output.
pub fn mean_brightness_of_bytes(bytes: &[u8], name: &str) -> Result<f64> {
    let (_, _, data) = if bytes.starts_with(b"P6") {
        decode_ppm(bytes, name)?
    } else if name.ends_with(".rawimg") {
        decode_rawimg(bytes, name)?
    } else {
        return Err(Error::data(format!(
            "{name}: unsupported image format (want P6 PPM or .rawimg)"
        )));
    };
    Ok(data.iter().sum::<f64>() / data.len() as f64)
}

/// Decode from bytes; `name` is used in error messages and as source id.
pub fn decode_image<S: Scalar>(
    bytes: &[u8],
    name: &str,
    cfg: &EncoderConfig,
) -> Result<ImageTensor<S>> {
    let (h, w, data) = if bytes.starts_with(b"P6") {
        decode_ppm(bytes, name)?
    } else if name.ends_with(".rawimg") {
        decode_rawimg(bytes, name)?
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P3") {
        return Err(Error::data(format!(
            "{name}: only binary P6 PPM is supported"
        )));
    } else {
        return Err(Error::data(format!(
            "{name}: unsupported image format (want P6 PPM or .rawimg)"
        )));
    };

    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::data(format!(
            "{name}: image is {h}x{w}, configured size is {0}x{0}",
            cfg.image_size
        )));
    }
    if h % cfg.patch_size != 0 || w % cfg.patch_size != 0 {
        return Err(Error::data(format!(
            "{name}: dimensions {h}x{w} not divisible by patch_size {}",
            cfg.patch_size
        )));
    }

    let pixels = Tensor::from_vec(vec![3, h, w], data.iter().map(|&v| S::from_f64(v)).collect())?;
    Ok(ImageTensor {
        pixels,
        source_id: name.to_string(),
    })
}

/// P6 header: magic, whitespace/comments, width, height, maxval 255,
/// one whitespace byte, then interleaved RGB rows.
fn decode_ppm(bytes: &[u8], name: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut pos = 2; // past "P6"
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data(format!("{name}: malformed PPM header")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| Error::data(format!("{name}: malformed PPM header")))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::data(format!(
            "{name}: only 8-bit PPM supported (maxval {maxval})"
        )));
    }
    pos += 1; // single whitespace after maxval
    let expected = w * h * 3;
    if bytes.len() < pos + expected {
        return Err(Error::data(format!(
            "{name}: PPM pixel data truncated ({} of {expected} bytes)",
            bytes.len().saturating_sub(pos)
        )));
    }
    let raw = &bytes[pos..pos + expected];
    // interleaved RGB -> channel-major [3, H, W]
    let mut data = vec![0.0f64; expected];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] = f64::from(raw[(y * w + x) * 3 + c]) / 255.0;
            }
        }
    }
    Ok((h, w, data))
}

fn decode_rawimg(bytes: &[u8], name: &str) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 12 {
        return Err(Error::data(format!("{name}: rawimg header truncated")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i * 4..(i + 1) * 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c != 3 {
        return Err(Error::data(format!("{name}: rawimg must have 3 channels, got {c}")));
    }
    let expected = c * h * w;
    if bytes.len() != 12 + expected * 4 {
        return Err(Error::data(format!(
            "{name}: rawimg payload is {} bytes, expected {}",
            bytes.len() - 12,
            expected * 4
        )));
    }
    let mut data = Vec::with_capacity(expected);
    for i in 0..expected {
        let off = 12 + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::data(format!(
                "{name}: rawimg pixel {i} = {v} outside [0, 1]"
            )));
        }
        data.push(f64::from(v));
    }
    Ok((h, w, data))
}

/// Write a binary P6 PPM from interleaved RGB bytes (row-major).
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::contract(format!(
            "write_ppm: {} bytes for {width}x{height}",
            rgb.len()
        )));
    }
    let mut out = Vec::with_capacity(rgb.len() + 32);
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(rgb);
    std::fs::write(path, out)?;
    Ok(())
}
