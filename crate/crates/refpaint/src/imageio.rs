//! Image and mask file I/O.
//!
//! Pixel mapping: model space is `[-1, 1]`; bytes are
//! `round((x + 1) · 127.5)` clamped to `0..=255`, and bytes load back as
//! `b / 127.5 − 1`, so a save → load → save cycle is byte-identical.
//! Images travel as PNG (via the `image` crate) or binary PPM (P6); masks as
//! binary PGM (P5) or grayscale PNG, where values ≥ 128 mean "keep".

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use image::ImageEncoder;
use thiserror::Error;

use crate::mask::Mask;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("unsupported image layout: {0}")]
    Layout(String),
}

fn io_err(path: &Path, source: std::io::Error) -> ImageIoError {
    ImageIoError::Io { path: path.display().to_string(), source }
}

fn decode_err(path: &Path, reason: impl Into<String>) -> ImageIoError {
    ImageIoError::Decode { path: path.display().to_string(), reason: reason.into() }
}

// ── Value mapping ───────────────────────────────────────────────────────────

pub fn value_to_byte(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn byte_to_value(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Interleave a `[C, H, W]` tensor (C = 1 or 3) into row-major bytes.
fn tensor_to_bytes(img: &Tensor) -> Result<(Vec<u8>, usize, usize, usize), ImageIoError> {
    let s = img.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(ImageIoError::Layout(format!(
            "expected [1|3, H, W] tensor, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let sp = h * w;
    let mut bytes = vec![0u8; c * sp];
    for i in 0..sp {
        for ci in 0..c {
            bytes[i * c + ci] = value_to_byte(img.data()[ci * sp + i]);
        }
    }
    Ok((bytes, c, h, w))
}

fn bytes_to_tensor(bytes: &[u8], c: usize, h: usize, w: usize) -> Tensor {
    let sp = h * w;
    let mut data = vec![0.0; c * sp];
    for i in 0..sp {
        for ci in 0..c {
            data[ci * sp + i] = byte_to_value(bytes[i * c + ci]);
        }
    }
    Tensor::new(vec![c, h, w], data)
}

// ── Images ──────────────────────────────────────────────────────────────────

/// Save an image tensor as PNG (RGB for 3 channels, grayscale for 1).
pub fn save_image_png(img: &Tensor, path: &Path) -> Result<(), ImageIoError> {
    let (bytes, c, h, w) = tensor_to_bytes(img)?;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let enc = image::codecs::png::PngEncoder::new(BufWriter::new(file));
    let color = if c == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    enc.write_image(&bytes, w as u32, h as u32, color)
        .map_err(|e| decode_err(path, e.to_string()))
}

/// Save an image tensor as binary PPM (P6); 1-channel input is replicated.
pub fn save_image_ppm(img: &Tensor, path: &Path) -> Result<(), ImageIoError> {
    let (bytes, c, h, w) = tensor_to_bytes(img)?;
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    write!(out, "P6\n{w} {h}\n255\n").map_err(|e| io_err(path, e))?;
    if c == 3 {
        out.write_all(&bytes).map_err(|e| io_err(path, e))?;
    } else {
        for &b in &bytes {
            out.write_all(&[b, b, b]).map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

/// Load an image as a `[3, H, W]` tensor in `[-1, 1]`. PNG (any color type,
/// converted to RGB) and binary PPM are accepted.
pub fn load_image(path: &Path) -> Result<Tensor, ImageIoError> {
    match extension(path) {
        Some("ppm") => {
            let (bytes, w, h, channels) = read_pnm(path, b'6')?;
            debug_assert_eq!(channels, 3);
            Ok(bytes_to_tensor(&bytes, 3, h, w))
        }
        _ => {
            let img = image::open(path)
                .map_err(|e| decode_err(path, e.to_string()))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok(bytes_to_tensor(img.as_raw(), 3, h, w))
        }
    }
}

// ── Masks ───────────────────────────────────────────────────────────────────

/// Save a mask as binary PGM (P5): keep = 255, inpaint = 0.
pub fn save_mask_pgm(mask: &Mask, path: &Path) -> Result<(), ImageIoError> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    write!(out, "P5\n{} {}\n255\n", mask.w(), mask.h()).map_err(|e| io_err(path, e))?;
    let bytes: Vec<u8> = mask.data().iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    out.write_all(&bytes).map_err(|e| io_err(path, e))
}

/// Save a mask as grayscale PNG: keep = 255, inpaint = 0.
pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<(), ImageIoError> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let enc = image::codecs::png::PngEncoder::new(BufWriter::new(file));
    enc.write_image(&bytes, mask.w() as u32, mask.h() as u32, image::ExtendedColorType::L8)
        .map_err(|e| decode_err(path, e.to_string()))
}

/// Load a mask from PGM or grayscale PNG; bytes ≥ 128 map to keep (1).
pub fn load_mask(path: &Path) -> Result<Mask, ImageIoError> {
    let (bytes, w, h) = match extension(path) {
        Some("pgm") => {
            let (bytes, w, h, _) = read_pnm(path, b'5')?;
            (bytes, w, h)
        }
        _ => {
            let img = image::open(path)
                .map_err(|e| decode_err(path, e.to_string()))?
                .to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            (img.into_raw(), w, h)
        }
    };
    let data = bytes.iter().map(|&b| u8::from(b >= 128)).collect();
    Ok(Mask::new(h, w, data))
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

// ── Binary PNM parsing ──────────────────────────────────────────────────────

/// Read a binary PNM file (`P5` grayscale or `P6` RGB), returning
/// `(bytes, w, h, channels)`.
fn read_pnm(path: &Path, kind: u8) -> Result<(Vec<u8>, usize, usize, usize), ImageIoError> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut raw)
        .map_err(|e| io_err(path, e))?;
    if raw.len() < 2 || raw[0] != b'P' || raw[1] != kind {
        return Err(decode_err(path, format!("not a P{} file", kind as char)));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // Skip whitespace and '#' comments.
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(decode_err(path, "malformed header"));
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| decode_err(path, "bad header number"))?;
    }
    if fields[2] != 255 {
        return Err(decode_err(path, "only maxval 255 is supported"));
    }
    pos += 1; // single whitespace after maxval
    let channels = if kind == b'6' { 3 } else { 1 };
    let need = fields[0] * fields[1] * channels;
    if raw.len() < pos + need {
        return Err(decode_err(path, "truncated pixel data"));
    }
    Ok((raw[pos..pos + need].to_vec(), fields[0], fields[1], channels))
}
