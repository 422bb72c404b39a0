//! Copy-paste baseline and embedding-distance metrics.
//!
//! The baseline lifts the reference object's bounding box, rescales it onto
//! the hole's bounding box and stitches; quality is scored as 1 − cosine
//! between pooled embeddings — once over whole images, once over hole crops.

use thiserror::Error;

use crate::denoiser::Denoiser;
use crate::embedder;
use crate::mask::Mask;
use crate::tensor::{chw, nearest_resize, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("reference object mask is empty; nothing to paste")]
    EmptyObject,
    #[error("background mask keeps everything; no hole to evaluate")]
    EmptyHole,
}

// ── Geometry helpers ────────────────────────────────────────────────────────

/// Inclusive bounding box (r0, r1, c0, c1) of the mask's 1-pixels.
fn bbox(m: &Mask) -> Option<(usize, usize, usize, usize)> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    let mut any = false;
    for r in 0..m.h() {
        for c in 0..m.w() {
            if m.data()[r * m.w() + c] == 1 {
                any = true;
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    any.then_some((r0, r1, c0, c1))
}

fn crop(img: &Tensor, r0: usize, r1: usize, c0: usize, c1: usize) -> Tensor {
    let (ch, _, w) = chw(img);
    let (h2, w2) = (r1 - r0 + 1, c1 - c0 + 1);
    let mut data = Vec::with_capacity(ch * h2 * w2);
    for ci in 0..ch {
        for r in r0..=r1 {
            for c in c0..=c1 {
                data.push(img.data()[(ci * img.shape()[1] + r) * w + c]);
            }
        }
    }
    Tensor::new(vec![ch, h2, w2], data)
}

// ── Copy-paste baseline ─────────────────────────────────────────────────────

/// Paste the reference object over the hole: the object's bounding box in
/// `i_r` (masked by `m_o`) is nearest-rescaled to the hole's bounding box,
/// and kept background pixels pass through untouched. An empty hole
/// degenerates to the background itself; an empty object is an error.
pub fn copy_paste(
    i_bg: &Tensor,
    m_bg: &Mask,
    i_r: &Tensor,
    m_o: &Mask,
) -> Result<Tensor, EvalError> {
    if i_bg.shape() != i_r.shape() {
        return Err(EvalError::Shape(format!(
            "background {:?} vs reference {:?}",
            i_bg.shape(),
            i_r.shape()
        )));
    }
    let (ch, h, w) = chw(i_bg);
    if (m_bg.h(), m_bg.w()) != (h, w) || (m_o.h(), m_o.w()) != (h, w) {
        return Err(EvalError::Shape("mask resolution differs from images".into()));
    }
    let hole = m_bg.invert();
    let Some((hr0, hr1, hc0, hc1)) = bbox(&hole) else {
        return Ok(i_bg.clone());
    };
    let (or0, or1, oc0, oc1) = bbox(m_o).ok_or(EvalError::EmptyObject)?;

    // Object crop, zeroed outside its mask, stretched onto the hole box.
    let mut masked = i_r.clone();
    for ci in 0..ch {
        for i in 0..h * w {
            if m_o.data()[i] == 0 {
                masked.data_mut()[ci * h * w + i] = 0.0;
            }
        }
    }
    let patch = nearest_resize(&crop(&masked, or0, or1, oc0, oc1), hr1 - hr0 + 1, hc1 - hc0 + 1);

    let mut out = i_bg.clone();
    let pw = hc1 - hc0 + 1;
    for ci in 0..ch {
        for r in hr0..=hr1 {
            for c in hc0..=hc1 {
                if hole.data()[r * w + c] == 1 {
                    out.data_mut()[(ci * h + r) * w + c] =
                        patch.data()[(ci * (hr1 - hr0 + 1) + (r - hr0)) * pw + (c - hc0)];
                }
            }
        }
    }
    Ok(out)
}

// ── Embedding distances ─────────────────────────────────────────────────────

fn cosine_distance(a: &Tensor, b: &Tensor) -> f64 {
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// 1 − cosine similarity of the pooled embeddings, in [0, 2]; a zero-norm
/// embedding yields the indifferent value 1.
pub fn embed_distance(a: &Tensor, b: &Tensor, model: &Denoiser) -> f64 {
    assert_eq!(a.shape(), b.shape(), "embed_distance input shapes");
    let (_, ea) = embedder::encode(&model.cfg, &model.params, a);
    let (_, eb) = embedder::encode(&model.cfg, &model.params, b);
    cosine_distance(&ea.vec, &eb.vec)
}

// ── Pair scoring and corpus report ──────────────────────────────────────────

/// Scores for one inpainting result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairScores {
    /// Whole-image distance between the output and the original artwork.
    pub dist_original: f64,
    /// Distance between hole-box crops of the output and the copy-paste
    /// baseline (both crops resized to the model resolution).
    pub dist_cp_object: f64,
}

/// `output` vs `original` over whole images, and `output` vs `cp_result`
/// over the hole's bounding-box crops.
pub fn eval_pair(
    output: &Tensor,
    original: &Tensor,
    cp_result: &Tensor,
    m_bg: &Mask,
    model: &Denoiser,
) -> Result<PairScores, EvalError> {
    let (hr0, hr1, hc0, hc1) = bbox(&m_bg.invert()).ok_or(EvalError::EmptyHole)?;
    let r = model.cfg.resolution;
    let crop_out = nearest_resize(&crop(output, hr0, hr1, hc0, hc1), r, r);
    let crop_cp = nearest_resize(&crop(cp_result, hr0, hr1, hc0, hc1), r, r);
    Ok(PairScores {
        dist_original: embed_distance(output, original, model),
        dist_cp_object: embed_distance(&crop_out, &crop_cp, model),
    })
}

/// Per-image rows plus corpus means, serializable as CSV.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub names: Vec<String>,
    pub scores: Vec<PairScores>,
}

impl EvalReport {
    pub fn new() -> Self {
        EvalReport::default()
    }

    pub fn push(&mut self, name: impl Into<String>, scores: PairScores) {
        self.names.push(name.into());
        self.scores.push(scores);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn mean_original(&self) -> f64 {
        let n = self.scores.len().max(1) as f64;
        self.scores.iter().map(|s| s.dist_original).sum::<f64>() / n
    }

    pub fn mean_cp_object(&self) -> f64 {
        let n = self.scores.len().max(1) as f64;
        self.scores.iter().map(|s| s.dist_cp_object).sum::<f64>() / n
    }

    /// Header row, one row per image, and a trailing `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,dist_original,dist_cp_object\n");
        for (name, s) in self.names.iter().zip(&self.scores) {
            out.push_str(&format!("{name},{:.6},{:.6}\n", s.dist_original, s.dist_cp_object));
        }
        if !self.is_empty() {
            out.push_str(&format!(
                "mean,{:.6},{:.6}\n",
                self.mean_original(),
                self.mean_cp_object()
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::util::stream_rng;

    fn tiny_model(seed: u64) -> Denoiser {
        let cfg = DenoiserConfig {
            resolution: 8,
            in_channels: 3,
            base_channels: 4,
            levels: 2,
            blocks_per_level: 1,
            attn_levels: vec![1],
            embed_dim: 6,
            patch_size: 4,
            ..DenoiserConfig::default()
        };
        Denoiser::init(cfg, seed).unwrap()
    }

    fn rand_img(seed: u64, n: usize) -> Tensor {
        let mut rng = stream_rng(seed, &[0xe7a1]);
        Tensor::randn(vec![3, n, n], &mut rng).clamp(-1.0, 1.0)
    }

    #[test]
    fn paste_with_no_hole_returns_the_background() {
        let bg = rand_img(1, 8);
        let r = rand_img(2, 8);
        let out = copy_paste(&bg, &Mask::ones(8, 8), &r, &Mask::ones(8, 8)).unwrap();
        assert_eq!(out, bg);
    }

    #[test]
    fn full_hole_returns_the_resized_reference() {
        let bg = rand_img(3, 8);
        let r = rand_img(4, 8);
        // Full hole + full object: bbox = whole image, resize is identity.
        let out = copy_paste(&bg, &Mask::zeros(8, 8), &r, &Mask::ones(8, 8)).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn aligned_half_split_is_an_exact_stitch() {
        let bg = rand_img(5, 8);
        let r = rand_img(6, 8);
        // Keep the left half, hole on the right; the object occupies the
        // reference's right half, so boxes align and no rescale happens.
        let mut keep = vec![0u8; 64];
        let mut obj = vec![0u8; 64];
        for row in 0..8 {
            for col in 0..8 {
                if col < 4 {
                    keep[row * 8 + col] = 1;
                } else {
                    obj[row * 8 + col] = 1;
                }
            }
        }
        let m_bg = Mask::new(8, 8, keep);
        let m_o = Mask::new(8, 8, obj);
        let out = copy_paste(&bg, &m_bg, &r, &m_o).unwrap();
        for ch in 0..3 {
            for row in 0..8 {
                for col in 0..8 {
                    let idx = (ch * 8 + row) * 8 + col;
                    let want = if col < 4 { bg.data()[idx] } else { r.data()[idx] };
                    assert_eq!(out.data()[idx], want, "ch={ch} row={row} col={col}");
                }
            }
        }
    }

    #[test]
    fn object_box_is_rescaled_onto_the_hole_box() {
        // 2×2 object of constant 0.5 stretched over a 4×4 hole.
        let bg = Tensor::zeros(vec![3, 8, 8]);
        let mut rv = vec![-1.0; 3 * 64];
        let mut obj = vec![0u8; 64];
        for row in 2..4 {
            for col in 2..4 {
                obj[row * 8 + col] = 1;
                for ch in 0..3 {
                    rv[(ch * 8 + row) * 8 + col] = 0.5;
                }
            }
        }
        let mut keep = vec![1u8; 64];
        for row in 1..5 {
            for col in 3..7 {
                keep[row * 8 + col] = 0;
            }
        }
        let out = copy_paste(
            &bg,
            &Mask::new(8, 8, keep.clone()),
            &Tensor::new(vec![3, 8, 8], rv),
            &Mask::new(8, 8, obj),
        )
        .unwrap();
        for ch in 0..3 {
            for row in 0..8 {
                for col in 0..8 {
                    let idx = (ch * 8 + row) * 8 + col;
                    let want = if keep[row * 8 + col] == 1 { 0.0 } else { 0.5 };
                    assert_eq!(out.data()[idx], want);
                }
            }
        }
    }

    #[test]
    fn empty_object_with_a_real_hole_is_degenerate() {
        let bg = rand_img(7, 8);
        let r = rand_img(8, 8);
        let mut keep = vec![1u8; 64];
        keep[27] = 0;
        let err = copy_paste(&bg, &Mask::new(8, 8, keep), &r, &Mask::zeros(8, 8)).unwrap_err();
        assert!(matches!(err, EvalError::EmptyObject));
    }

    #[test]
    fn cosine_distance_hand_cases() {
        let a = Tensor::new(vec![3], vec![1.0, 0.0, 0.0]);
        let b = Tensor::new(vec![3], vec![-2.0, 0.0, 0.0]);
        let c = Tensor::new(vec![3], vec![0.0, 3.0, 0.0]);
        let z = Tensor::zeros(vec![3]);
        assert!(cosine_distance(&a, &a) <= 1e-12);
        assert!((cosine_distance(&a, &b) - 2.0).abs() <= 1e-12);
        assert!((cosine_distance(&a, &c) - 1.0).abs() <= 1e-12);
        assert_eq!(cosine_distance(&a, &z), 1.0);
        assert_eq!(cosine_distance(&z, &z), 1.0);
    }

    #[test]
    fn identical_images_have_zero_distance_and_symmetry_holds() {
        let model = tiny_model(9);
        let a = rand_img(10, 8);
        let b = rand_img(11, 8);
        assert!(embed_distance(&a, &a, &model) <= 1e-12);
        let d1 = embed_distance(&a, &b, &model);
        let d2 = embed_distance(&b, &a, &model);
        assert!((d1 - d2).abs() <= 1e-12);
        assert!((0.0..=2.0).contains(&d1));
    }

    #[test]
    fn pair_scores_hit_their_trivial_zeroes() {
        let model = tiny_model(12);
        let original = rand_img(13, 8);
        let cp = rand_img(14, 8);
        let m_bg = {
            let mut keep = vec![1u8; 64];
            for row in 2..6 {
                for col in 2..6 {
                    keep[row * 8 + col] = 0;
                }
            }
            Mask::new(8, 8, keep)
        };
        let s = eval_pair(&original, &original, &cp, &m_bg, &model).unwrap();
        assert!(s.dist_original <= 1e-12);
        let s = eval_pair(&cp, &original, &cp, &m_bg, &model).unwrap();
        assert!(s.dist_cp_object <= 1e-12);
    }

    #[test]
    fn evaluating_without_a_hole_fails() {
        let model = tiny_model(15);
        let a = rand_img(16, 8);
        let err = eval_pair(&a, &a, &a, &Mask::ones(8, 8), &model).unwrap_err();
        assert!(matches!(err, EvalError::EmptyHole));
    }

    #[test]
    fn report_means_and_csv_shape() {
        let mut rep = EvalReport::new();
        rep.push("a", PairScores { dist_original: 0.2, dist_cp_object: 0.4 });
        rep.push("b", PairScores { dist_original: 0.4, dist_cp_object: 0.0 });
        assert!((rep.mean_original() - 0.3).abs() <= 1e-12);
        assert!((rep.mean_cp_object() - 0.2).abs() <= 1e-12);
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "name,dist_original,dist_cp_object");
        assert!(lines[1].starts_with("a,0.2"));
        assert!(lines[3].starts_with("mean,0.3"));
    }
}
