//! Image and tensor file formats.
//!
//! * PNG (8-bit gray or RGB) through the `image` crate.
//! * Binary PPM (`P6`) for 3-channel byte images.
//! * `ADDT` raw tensors: magic `ADDT`, little-endian `u32` C, H, W, one
//!   range byte (0 unit, 1 byte, 2 unbounded), then `C·H·W` little-endian
//!   `f32` values in `(c, h, w)` order. Values are not clipped.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, ValueRange};

pub const TENSOR_MAGIC: &[u8; 4] = b"ADDT";

/// Recognized on-disk image encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Ppm,
    Tensor,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(ImageFormat::Png),
            "ppm" => Some(ImageFormat::Ppm),
            "addt" => Some(ImageFormat::Tensor),
            _ => None,
        }
    }

    /// Displayable formats store bytes and therefore clip.
    pub fn is_displayable(self) -> bool {
        !matches!(self, ImageFormat::Tensor)
    }
}

/// Reads any supported format, dispatching on the extension.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    match ImageFormat::from_path(path) {
        Some(ImageFormat::Png) => read_png(path),
        Some(ImageFormat::Ppm) => read_ppm(path),
        Some(ImageFormat::Tensor) => read_tensor(path),
        None => Err(Error::Format {
            what: "image path",
            reason: format!("unsupported extension: {}", path.display()),
        }),
    }
}

/// Writes any supported format. Displayable formats are clamped and rounded to bytes.
pub fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    match ImageFormat::from_path(path) {
        Some(ImageFormat::Png) => write_png(path, img),
        Some(ImageFormat::Ppm) => write_ppm(path, img),
        Some(ImageFormat::Tensor) => write_tensor(path, img),
        None => Err(Error::Format {
            what: "image path",
            reason: format!("unsupported extension: {}", path.display()),
        }),
    }
}

/// Lists readable image files in a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::NoSuchDirectory(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && ImageFormat::from_path(p).is_some())
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let dynamic = image::open(path)?;
    let (channels, width, height, bytes) = match dynamic.color().channel_count() {
        1 | 2 => {
            let g = dynamic.to_luma8();
            (1, g.width(), g.height(), g.into_raw())
        }
        _ => {
            let rgb = dynamic.to_rgb8();
            (3, rgb.width(), rgb.height(), rgb.into_raw())
        }
    };
    Ok(from_interleaved(
        channels,
        height as usize,
        width as usize,
        &bytes,
    ))
}

pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let bytes = to_interleaved_bytes(img);
    let (w, h) = (img.width() as u32, img.height() as u32);
    let color = match img.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => {
            return Err(Error::Format {
                what: "png output",
                reason: format!("{c} channels; PNG output supports 1 or 3"),
            })
        }
    };
    image::save_buffer(path, &bytes, w, h, color)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        what: "ppm",
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let need = width * height * 3;
    if raw.len() < pos + need {
        return Err(bad("truncated raster"));
    }
    Ok(from_interleaved(3, height, width, &raw[pos..pos + need]))
}

pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Format {
            what: "ppm output",
            reason: format!("P6 needs 3 channels, image has {}", img.channels()),
        });
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(to_interleaved_bytes(img));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<ImageTensor> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&raw)
}

pub fn write_tensor(path: &Path, img: &ImageTensor) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_tensor(img))
        .map_err(|e| Error::io(path, e))
}

pub fn encode_tensor(img: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 4 * img.dim());
    out.extend_from_slice(TENSOR_MAGIC);
    for v in [img.channels(), img.height(), img.width()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(img.value_range().to_code());
    for v in img.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(raw: &[u8]) -> Result<ImageTensor> {
    let bad = |reason: String| Error::Format {
        what: "ADDT tensor",
        reason,
    };
    if raw.len() < 17 || &raw[..4] != TENSOR_MAGIC {
        return Err(bad("missing ADDT magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(raw[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let range = ValueRange::from_code(raw[16])?;
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| bad("dimension overflow".into()))?;
    let body = &raw[17..];
    if body.len() != 4 * n {
        return Err(bad(format!(
            "expected {} data bytes, found {}",
            4 * n,
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value".into()));
    }
    // values may sit outside a bounded range: the raw format preserves unclipped embeddings
    Ok(ImageTensor::from_raw((c, h, w), data, range))
}

fn from_interleaved(channels: usize, height: usize, width: usize, bytes: &[u8]) -> ImageTensor {
    let mut data = vec![0.0; channels * height * width];
    for h in 0..height {
        for w in 0..width {
            for c in 0..channels {
                data[(c * height + h) * width + w] =
                    f64::from(bytes[(h * width + w) * channels + c]);
            }
        }
    }
    ImageTensor::from_raw((channels, height, width), data, ValueRange::Byte)
}

fn to_interleaved_bytes(img: &ImageTensor) -> Vec<u8> {
    let scale = match img.value_range() {
        ValueRange::Unit => 255.0,
        _ => 1.0,
    };
    let (c_n, h_n, w_n) = img.shape();
    let mut out = vec![0u8; c_n * h_n * w_n];
    for h in 0..h_n {
        for w in 0..w_n {
            for c in 0..c_n {
                let v = (img.get(c, h, w) * scale).round().clamp(0.0, 255.0);
                out[(h * w_n + w) * c_n + c] = v as u8;
            }
        }
    }
    out
}
