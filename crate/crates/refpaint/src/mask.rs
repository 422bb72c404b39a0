//! Free-form inpainting masks and the background/object decomposition.
//!
//! Convention used everywhere in this crate: a mask pixel of **1 keeps** the
//! underlying image pixel (background), **0 marks it for inpainting** (the
//! hole). Masks are generated by drawing a few thick polyline strokes with
//! round caps and joints, rejection-sampled into a target hole-coverage band.

use rand::Rng;
use thiserror::Error;

use crate::tensor::Tensor;

// ── Mask type ───────────────────────────────────────────────────────────────

/// Binary keep/inpaint mask (1 = keep, 0 = inpaint).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w);
        assert!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Mask { h, w, data }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![1; h * w] }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.w + x] = v;
    }

    /// Complement mask (keep ↔ inpaint).
    pub fn invert(&self) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Fraction of pixels marked for inpainting (zeros).
    pub fn hole_coverage(&self) -> f64 {
        let zeros = self.data.iter().filter(|&&v| v == 0).count();
        zeros as f64 / (self.h * self.w) as f64
    }

    pub fn is_all_ones(&self) -> bool {
        self.data.iter().all(|&v| v == 1)
    }

    pub fn is_all_zeros(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Mask as a `[1, H, W]` float tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.h, self.w],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Tight bounding box (y0, x0, y1, x1), half-open, of the pixels equal to
    /// `value`; `None` when no such pixel exists.
    pub fn bbox_of(&self, value: u8) -> Option<(usize, usize, usize, usize)> {
        let (mut y0, mut x0, mut y1, mut x1) = (self.h, self.w, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) == value {
                    any = true;
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y + 1);
                    x1 = x1.max(x + 1);
                }
            }
        }
        any.then_some((y0, x0, y1, x1))
    }
}

/// Multiply an image by a mask, broadcast across channels. Exact: pixels are
/// either kept bit-for-bit or zeroed.
pub fn apply_mask(image: &Tensor, mask: &Mask) -> Tensor {
    let s = image.shape();
    assert_eq!(s.len(), 3, "expected [C,H,W] image");
    assert_eq!((s[1], s[2]), (mask.h, mask.w), "mask size must match image");
    let (c, sp) = (s[0], s[1] * s[2]);
    let mut out = image.clone();
    let od = out.data_mut();
    for ci in 0..c {
        for i in 0..sp {
            if mask.data[i] == 0 {
                od[ci * sp + i] = 0.0;
            }
        }
    }
    out
}

// ── Background/object quadruplet ────────────────────────────────────────────

/// The four training views cut from one image and one mask: kept background
/// `i_bg = I⊗M`, hole content `i_o = I⊗(1−M)`, and their support masks
/// `m_bg = M`, `m_o = 1−M`.
#[derive(Clone, Debug)]
pub struct Quadruplet {
    pub i_bg: Tensor,
    pub i_o: Tensor,
    pub m_bg: Mask,
    pub m_o: Mask,
}

pub fn make_quadruplet(image: &Tensor, mask: &Mask) -> Quadruplet {
    Quadruplet {
        i_bg: apply_mask(image, mask),
        i_o: apply_mask(image, &mask.invert()),
        m_bg: mask.clone(),
        m_o: mask.invert(),
    }
}

// ── Downsampling ────────────────────────────────────────────────────────────

/// Downsample a mask by an integer power-of-two `factor` via nearest-neighbor
/// subsampling at cell anchors (offset `(factor − 1) / 2` inside each cell).
/// `factor = 1` is the identity.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Mask {
    assert!(factor.is_power_of_two(), "factor must be a power of two");
    assert!(
        mask.h % factor == 0 && mask.w % factor == 0,
        "factor must divide both mask dimensions"
    );
    if factor == 1 {
        return mask.clone();
    }
    let (oh, ow) = (mask.h / factor, mask.w / factor);
    let off = (factor - 1) / 2;
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            data.push(mask.get(y * factor + off, x * factor + off));
        }
    }
    Mask { h: oh, w: ow, data }
}

// ── Free-form stroke generation ─────────────────────────────────────────────

/// Stroke-drawing parameters. Widths and lengths are in pixels at the target
/// resolution (defaults are tuned for 32×32).
#[derive(Clone, Debug)]
pub struct StrokeParams {
    /// Inclusive range of stroke count; 0 strokes yields an all-ones mask.
    pub strokes: (usize, usize),
    /// Stroke width range in pixels.
    pub width: (f64, f64),
    /// Vertices per stroke (inclusive); segments = vertices − 1.
    pub vertices: (usize, usize),
    /// Per-segment turn added to the heading, sampled uniformly.
    pub angle_step: (f64, f64),
    /// Per-segment length range in pixels.
    pub segment_len: (f64, f64),
    /// Accepted hole-coverage band (fraction of zeros), inclusive.
    pub coverage: (f64, f64),
    /// Rejection-sampling retry budget.
    pub max_retries: usize,
}

impl Default for StrokeParams {
    fn default() -> Self {
        StrokeParams {
            strokes: (1, 4),
            width: (2.0, 6.0),
            vertices: (3, 8),
            angle_step: (-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2),
            segment_len: (4.0, 12.0),
            coverage: (0.1, 0.5),
            max_retries: 100,
        }
    }
}

impl StrokeParams {
    pub fn validate(&self) -> Result<(), MaskError> {
        let ordered = self.strokes.0 <= self.strokes.1
            && self.width.0 <= self.width.1
            && self.vertices.0 <= self.vertices.1
            && self.angle_step.0 <= self.angle_step.1
            && self.segment_len.0 <= self.segment_len.1
            && self.coverage.0 <= self.coverage.1;
        if !ordered {
            return Err(MaskError::BadParams("range bounds out of order".into()));
        }
        if self.width.0 <= 0.0 || self.segment_len.0 <= 0.0 {
            return Err(MaskError::BadParams("widths and lengths must be positive".into()));
        }
        if self.vertices.0 < 2 {
            return Err(MaskError::BadParams("strokes need at least two vertices".into()));
        }
        if !(0.0..=1.0).contains(&self.coverage.0) || !(0.0..=1.0).contains(&self.coverage.1) {
            return Err(MaskError::BadParams("coverage band must lie in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid stroke parameters: {0}")]
    BadParams(String),
    #[error("mask coverage stayed outside [{lo}, {hi}] after {attempts} attempts")]
    CoverageRejected { lo: f64, hi: f64, attempts: usize },
}

/// Draw a free-form hole mask: a few thick polyline strokes with round caps,
/// rejection-sampled until the hole coverage falls inside the configured
/// band. A draw of zero strokes returns the all-ones (no hole) mask without
/// coverage enforcement.
pub fn generate_freeform<R: Rng>(
    rng: &mut R,
    h: usize,
    w: usize,
    params: &StrokeParams,
) -> Result<Mask, MaskError> {
    params.validate()?;
    assert!(h > 0 && w > 0);
    let attempts = params.max_retries + 1;
    for _ in 0..attempts {
        let (mask, stroke_count) = draw_strokes(rng, h, w, params);
        if stroke_count == 0 {
            return Ok(mask);
        }
        let cov = mask.hole_coverage();
        if cov >= params.coverage.0 && cov <= params.coverage.1 {
            return Ok(mask);
        }
    }
    Err(MaskError::CoverageRejected {
        lo: params.coverage.0,
        hi: params.coverage.1,
        attempts,
    })
}

/// With probability `p`, replace the mask with the full hole (all zeros):
/// the image-variation training regime where everything is generated.
pub fn maybe_full_hole<R: Rng>(rng: &mut R, mask: &Mask, p: f64) -> Mask {
    assert!((0.0..=1.0).contains(&p));
    if rng.gen_range(0.0..1.0) < p {
        Mask::zeros(mask.h, mask.w)
    } else {
        mask.clone()
    }
}

fn draw_strokes<R: Rng>(rng: &mut R, h: usize, w: usize, p: &StrokeParams) -> (Mask, usize) {
    let mut mask = Mask::ones(h, w);
    let n_strokes = rng.gen_range(p.strokes.0..=p.strokes.1);
    for _ in 0..n_strokes {
        let width = sample_range(rng, p.width);
        let radius = width / 2.0;
        let n_vertices = rng.gen_range(p.vertices.0..=p.vertices.1);
        let mut x = rng.gen_range(0.0..w as f64);
        let mut y = rng.gen_range(0.0..h as f64);
        let mut angle = rng.gen_range(0.0..std::f64::consts::TAU);
        for _ in 0..n_vertices.saturating_sub(1) {
            angle += sample_range(rng, p.angle_step);
            let len = sample_range(rng, p.segment_len);
            let nx = (x + len * angle.cos()).clamp(0.0, (w - 1) as f64);
            let ny = (y + len * angle.sin()).clamp(0.0, (h - 1) as f64);
            rasterize_capsule(&mut mask, (x, y), (nx, ny), radius);
            x = nx;
            y = ny;
        }
    }
    (mask, n_strokes)
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Zero every pixel whose center lies within `radius` of the segment
/// `(a, b)`. Endpoint distance is included, so caps and joints are round.
pub(crate) fn rasterize_capsule(mask: &mut Mask, a: (f64, f64), b: (f64, f64), radius: f64) {
    let x0 = ((a.0.min(b.0) - radius).floor().max(0.0)) as usize;
    let x1 = ((a.0.max(b.0) + radius).ceil().min((mask.w - 1) as f64)) as usize;
    let y0 = ((a.1.min(b.1) - radius).floor().max(0.0)) as usize;
    let y1 = ((a.1.max(b.1) + radius).ceil().min((mask.h - 1) as f64)) as usize;
    for py in y0..=y1 {
        for px in x0..=x1 {
            if point_segment_dist(px as f64, py as f64, a, b) <= radius {
                mask.set(py, px, 0);
            }
        }
    }
}

/// Euclidean distance from a point to a line segment.
pub(crate) fn point_segment_dist(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}
