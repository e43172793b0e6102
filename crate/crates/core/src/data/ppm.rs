//! Binary PPM (`P6`) images with 8-bit channels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` bytes, row-major, RGB interleaved.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let pixels = fill.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `[3, h, w]` tensor on the 0..255 scale.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut data = vec![0.0f32; 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c] as f32;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("non-empty image")
    }

    /// Inverse of [`RgbImage::to_tensor`], rounding and clamping to 0..255.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w) = match t.shape() {
            &[3, h, w] => (h, w),
            s => return Err(Error::ShapeMismatch(format!("expected [3, h, w], got {s:?}"))),
        };
        let plane = h * w;
        let mut pixels = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                pixels.push(t.data()[c * plane + p].round().clamp(0.0, 255.0) as u8);
            }
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parse a `P6` file; `origin` names the source in error messages.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Ingest {
            path: origin.to_path_buf(),
            reason,
        };
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments between header tokens
            while pos < bytes.len() {
                if bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                } else if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(fail("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(fail(format!("not a binary PPM (magic {:?})", fields[0])));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| fail(format!("bad {what} {s:?}")));
        let (width, height, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
        if width == 0 || height == 0 {
            return Err(fail(format!("empty image {width}x{height}")));
        }
        if maxval == 0 || maxval > 255 {
            return Err(fail(format!("unsupported maxval {maxval} (8-bit only)")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * 3;
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| fail(format!("raster truncated: need {need} bytes, have {}", bytes.len().saturating_sub(pos))))?;
        let pixels = if maxval == 255 {
            raster.to_vec()
        } else {
            raster.iter().map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8).collect()
        };
        Ok(Self { width, height, pixels })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}
