//! Training data: directory loading and a self-contained procedural corpus.
//!
//! The procedural corpus alternates two visually distinct families — cool
//! blue/teal "painting" textures built from layered sinusoidal hue fields
//! with thin stroke marks, and warm red/orange "object" silhouettes (disk,
//! triangle, bar) on a muted backdrop. The wide hue separation gives
//! embedding-space structure that the semantic/style split can pick up
//! without any external data.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::imageio::{self, ImageIoError};
use crate::tensor::{nearest_resize, Tensor};
use crate::util::stream_rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset directory {dir}: {source}")]
    Io { dir: PathBuf, source: io::Error },
    #[error("no loadable images in {dir}")]
    Empty { dir: PathBuf },
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub names: Vec<String>,
    pub resolution: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

// ── Directory loading ───────────────────────────────────────────────────────

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "ppm"
    )
}

/// Center-crop to the square of the shorter side.
pub fn center_crop_square(img: &Tensor) -> Tensor {
    let (c, h, w) = crate::tensor::chw(img);
    let s = h.min(w);
    if h == w {
        return img.clone();
    }
    let (y0, x0) = ((h - s) / 2, (w - s) / 2);
    let mut data = Vec::with_capacity(c * s * s);
    for ch in 0..c {
        for y in 0..s {
            let row = ch * h * w + (y0 + y) * w + x0;
            data.extend_from_slice(&img.data()[row..row + s]);
        }
    }
    Tensor::new(vec![c, s, s], data)
}

/// Crop square, then resize to the working resolution.
pub fn prepare_image(img: &Tensor, resolution: usize) -> Tensor {
    nearest_resize(&center_crop_square(img), resolution, resolution)
}

/// Load every `.png`/`.ppm` in a directory (lexicographic filename order),
/// square-cropped and resized. Unreadable files are skipped with a warning;
/// an empty result is an error.
pub fn load_dir(dir: &Path, resolution: usize) -> Result<Dataset, DatasetError> {
    let entries =
        fs::read_dir(dir).map_err(|source| DatasetError::Io { dir: dir.to_path_buf(), source })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();

    let mut images = Vec::new();
    let mut names = Vec::new();
    for path in paths {
        match imageio::load_image(&path) {
            Ok(img) => {
                images.push(prepare_image(&img, resolution));
                names.push(
                    path.file_name().and_then(|n| n.to_str()).unwrap_or("?").to_string(),
                );
            }
            Err(err) => {
                eprintln!("warning: skipping {}: {err}", path.display());
            }
        }
    }
    if images.is_empty() {
        return Err(DatasetError::Empty { dir: dir.to_path_buf() });
    }
    Ok(Dataset { images, names, resolution })
}

/// Also accept a single image file for quick experiments.
pub fn load_path(path: &Path, resolution: usize) -> Result<Dataset, ImageIoError> {
    let img = imageio::load_image(path)?;
    Ok(Dataset {
        images: vec![prepare_image(&img, resolution)],
        names: vec![path.file_name().and_then(|n| n.to_str()).unwrap_or("?").to_string()],
        resolution,
    })
}

// ── Procedural corpus ───────────────────────────────────────────────────────

const PAINTING_HUE: (f64, f64) = (0.45, 0.70);
const OBJECT_HUE: (f64, f64) = (0.00, 0.12);

/// HSV (all in [0,1], hue wrapping) to RGB in [0,1].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn put_rgb(data: &mut [f64], res: usize, y: usize, x: usize, rgb: (f64, f64, f64)) {
    let sp = res * res;
    data[y * res + x] = rgb.0 * 2.0 - 1.0;
    data[sp + y * res + x] = rgb.1 * 2.0 - 1.0;
    data[2 * sp + y * res + x] = rgb.2 * 2.0 - 1.0;
}

/// Cool-hued layered sinusoidal field with thin stroke marks.
fn painting_image<R: Rng>(rng: &mut R, res: usize) -> Tensor {
    let h0 = rng.gen_range(PAINTING_HUE.0 + 0.05..PAINTING_HUE.1 - 0.05);
    let (f1, f2) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..4.0));
    let (p1, p2, p3) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let mut data = vec![0.0; 3 * res * res];
    let tau = std::f64::consts::TAU;
    for y in 0..res {
        for x in 0..res {
            let (u, v) = (x as f64 / res as f64, y as f64 / res as f64);
            let hue = (h0 + 0.04 * (tau * (f1 * u + p1)).sin() + 0.03 * (tau * (f2 * v + p2)).sin())
                .clamp(PAINTING_HUE.0, PAINTING_HUE.1);
            let sat = 0.55 + 0.20 * (tau * (f2 * u + f1 * v + p3)).sin();
            let val = 0.55 + 0.22 * (tau * (f1 * (u + v) + p2)).sin();
            put_rgb(&mut data, res, y, x, hsv_to_rgb(hue, sat, val));
        }
    }
    // Thin value strokes on top, hue untouched: darken/lighten short walks.
    let n_strokes = rng.gen_range(4..9);
    for _ in 0..n_strokes {
        let mut y = rng.gen_range(0.0..res as f64);
        let mut x = rng.gen_range(0.0..res as f64);
        let mut ang = rng.gen_range(0.0..tau);
        let delta = rng.gen_range(-0.25..0.25f64);
        let steps = rng.gen_range(res / 2..res * 2);
        for _ in 0..steps {
            ang += rng.gen_range(-0.3..0.3);
            y += ang.sin();
            x += ang.cos();
            let (yi, xi) = (y.round() as i64, x.round() as i64);
            if yi < 0 || xi < 0 || yi >= res as i64 || xi >= res as i64 {
                break;
            }
            let sp = res * res;
            for c in 0..3 {
                let idx = c * sp + yi as usize * res + xi as usize;
                data[idx] = (data[idx] + delta).clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, res, res], data)
}

/// Warm-hued filled silhouette on a muted light backdrop.
fn object_image<R: Rng>(rng: &mut R, res: usize) -> Tensor {
    let hue = rng.gen_range(OBJECT_HUE.0..OBJECT_HUE.1);
    let sat = rng.gen_range(0.75..0.95);
    let val = rng.gen_range(0.5..0.75);
    let bg_val = rng.gen_range(0.78..0.92);
    let r = res as f64;
    let cy = r * rng.gen_range(0.4..0.6);
    let cx = r * rng.gen_range(0.4..0.6);
    let shape = rng.gen_range(0..3u32);
    let radius = r * rng.gen_range(0.22..0.34);
    let ang = rng.gen_range(0.0..std::f64::consts::PI);
    let half_len = r * rng.gen_range(0.25..0.4);
    let half_wid = r * rng.gen_range(0.08..0.16);
    // Triangle vertices around the center.
    let tri: Vec<(f64, f64)> = (0..3)
        .map(|k| {
            let a = ang + k as f64 * std::f64::consts::TAU / 3.0;
            (cy + radius * 1.2 * a.sin(), cx + radius * 1.2 * a.cos())
        })
        .collect();

    let inside = |y: f64, x: f64| -> bool {
        match shape {
            0 => {
                let (dy, dx) = (y - cy, x - cx);
                (dy * dy + dx * dx).sqrt() <= radius
            }
            1 => {
                // Barycentric sign test.
                let sign = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| {
                    (b.1 - a.1) * (p.0 - a.0) - (b.0 - a.0) * (p.1 - a.1)
                };
                let p = (y, x);
                let d1 = sign(tri[0], tri[1], p);
                let d2 = sign(tri[1], tri[2], p);
                let d3 = sign(tri[2], tri[0], p);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
            _ => {
                // Rotated bar.
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * ang.cos() + dy * ang.sin();
                let v = -dx * ang.sin() + dy * ang.cos();
                u.abs() <= half_len && v.abs() <= half_wid
            }
        }
    };

    let mut data = vec![0.0; 3 * res * res];
    for y in 0..res {
        for x in 0..res {
            let rgb = if inside(y as f64, x as f64) {
                hsv_to_rgb(hue, sat, val)
            } else {
                // Slight vertical gradient keeps the backdrop non-constant.
                let g = bg_val - 0.06 * (y as f64 / r);
                hsv_to_rgb(0.55, 0.06, g)
            };
            put_rgb(&mut data, res, y, x, rgb);
        }
    }
    Tensor::new(vec![3, res, res], data)
}

const CORPUS_LABEL: u64 = 0x0d5e;

/// Deterministic synthetic corpus alternating the two families; image `i`
/// depends only on `(seed, i)`, so prefixes agree across corpus sizes.
pub fn procedural_corpus(seed: u64, n: usize, resolution: usize) -> Dataset {
    let mut images = Vec::with_capacity(n);
    let mut names = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream_rng(seed, &[CORPUS_LABEL, i as u64]);
        if i % 2 == 0 {
            images.push(painting_image(&mut rng, resolution));
            names.push(format!("painting_{i:04}"));
        } else {
            images.push(object_image(&mut rng, resolution));
            names.push(format!("object_{i:04}"));
        }
    }
    Dataset { images, names, resolution }
}
