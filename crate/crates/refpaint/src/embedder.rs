//! Patch-token context embedder.
//!
//! Images are patchified by a strided convolution, refined by two residual
//! blocks, and flattened to a token grid. A region mask can invalidate
//! tokens whose patch lies mostly outside the region of interest; invalid
//! tokens are zeroed and skipped by attention. The pooled mean of the valid
//! tokens is the image's global embedding, used for reference conditioning
//! and evaluation.

use crate::autodiff::{ParamBinding, Tape, Var};
use crate::denoiser::{num_groups, DenoiserConfig, GROUP_NORM_EPS};
use crate::mask::Mask;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// A token is invalid when more than this fraction of its patch falls
/// outside the included region (strict inequality).
pub const OVERLAP_TAU: f64 = 0.5;

// ── Token containers ────────────────────────────────────────────────────────

/// Flattened patch-token grid with per-token validity.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokens {
    /// `[rows * cols, dim]`, row-major over the patch grid. Invalid rows are
    /// zeroed.
    pub tokens: Tensor,
    pub valid: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
}

impl PatchTokens {
    /// The unconditional context: a single zero token that *is* valid, so it
    /// flows through the same attention path as real contexts.
    pub fn null_context(dim: usize) -> PatchTokens {
        PatchTokens {
            tokens: Tensor::zeros(vec![1, dim]),
            valid: vec![true],
            rows: 1,
            cols: 1,
        }
    }

    /// A single-token context carrying one embedding vector.
    pub fn from_embedding(vec: &Tensor) -> PatchTokens {
        assert_eq!(vec.shape().len(), 1, "embedding must be a flat vector");
        let dim = vec.numel();
        PatchTokens {
            tokens: Tensor::new(vec![1, dim], vec.data().to_vec()),
            valid: vec![true],
            rows: 1,
            cols: 1,
        }
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn none_valid(&self) -> bool {
        self.n_valid() == 0
    }
}

/// Tape-resident tokens: the tensor lives on the tape so gradients reach the
/// embedder during joint training.
#[derive(Clone, Debug)]
pub struct TapeTokens {
    pub var: Var,
    pub valid: Vec<bool>,
}

/// Pooled global embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// `[dim]` mean of the valid tokens; all zeros when none were valid.
    pub vec: Tensor,
    pub n_valid: usize,
}

impl Embedding {
    /// True when no token survived masking — the vector is a zero filler and
    /// callers should treat the embedding as missing.
    pub fn is_empty(&self) -> bool {
        self.n_valid == 0
    }
}

// ── Encoding ────────────────────────────────────────────────────────────────

/// Patchify + refine an image into tokens on an existing tape. `validity`
/// marks which tokens survive (None ⇒ all); invalid rows are zeroed on the
/// tape so downstream gradients respect the masking.
pub fn encode_on_tape(
    tape: &mut Tape,
    bind: &mut ParamBinding,
    store: &ParamStore,
    cfg: &DenoiserConfig,
    image: Var,
    validity: Option<Vec<bool>>,
) -> TapeTokens {
    let p = cfg.patch_size;
    let d = cfg.embed_dim;
    let (c, hh, ww) = crate::tensor::chw(tape.val(image));
    assert_eq!(c, cfg.in_channels, "embedder input channels");
    assert!(hh % p == 0 && ww % p == 0, "image not divisible into patches");
    let (rows, cols) = (hh / p, ww / p);

    let w = bind.var(tape, store, "embed.patch.w");
    let b = bind.var(tape, store, "embed.patch.b");
    let mut h = tape.conv2d(image, w, b, p, 0); // [D, rows, cols]

    let groups = num_groups(d);
    for k in 0..2 {
        let g = bind.var(tape, store, &format!("embed.blk{k}.gn.g"));
        let gb = bind.var(tape, store, &format!("embed.blk{k}.gn.b"));
        let a = tape.group_norm(h, g, gb, groups, GROUP_NORM_EPS);
        let a = tape.silu(a);
        let w1 = bind.var(tape, store, &format!("embed.blk{k}.conv1.w"));
        let b1 = bind.var(tape, store, &format!("embed.blk{k}.conv1.b"));
        let a = tape.conv2d(a, w1, b1, 1, 1);
        let a = tape.silu(a);
        let w2 = bind.var(tape, store, &format!("embed.blk{k}.conv2.w"));
        let b2 = bind.var(tape, store, &format!("embed.blk{k}.conv2.b"));
        let a = tape.conv2d(a, w2, b2, 1, 1);
        h = tape.add(h, a);
    }

    let mut tokens = tape.chw_to_tokens(h); // [rows*cols, D]
    let n = rows * cols;
    let valid = validity.unwrap_or_else(|| vec![true; n]);
    assert_eq!(valid.len(), n, "validity length");
    if valid.iter().any(|&v| !v) {
        let mut mdata = Vec::with_capacity(n * d);
        for &v in &valid {
            let x = if v { 1.0 } else { 0.0 };
            mdata.extend(std::iter::repeat(x).take(d));
        }
        tokens = tape.mul_const(tokens, Tensor::new(vec![n, d], mdata));
    }
    TapeTokens { var: tokens, valid }
}

/// Validity of each patch token against an inclusion region (mask value 1 =
/// included): a token survives unless more than [`OVERLAP_TAU`] of its patch
/// is excluded.
pub fn token_validity(region: &Mask, patch: usize) -> Vec<bool> {
    assert!(patch > 0 && region.h() % patch == 0 && region.w() % patch == 0);
    let (rows, cols) = (region.h() / patch, region.w() / patch);
    let total = (patch * patch) as f64;
    let mut valid = Vec::with_capacity(rows * cols);
    for py in 0..rows {
        for px in 0..cols {
            let mut excluded = 0usize;
            for dy in 0..patch {
                for dx in 0..patch {
                    if region.get(py * patch + dy, px * patch + dx) == 0 {
                        excluded += 1;
                    }
                }
            }
            valid.push(excluded as f64 / total <= OVERLAP_TAU);
        }
    }
    valid
}

/// Mean of the valid token rows; zeros (with `n_valid = 0`) when none.
pub fn pool_embedding(tokens: &PatchTokens) -> Embedding {
    let d = tokens.tokens.shape()[1];
    let mut vec = vec![0.0; d];
    let mut n = 0usize;
    for (i, &v) in tokens.valid.iter().enumerate() {
        if v {
            for j in 0..d {
                vec[j] += tokens.tokens.data()[i * d + j];
            }
            n += 1;
        }
    }
    if n > 0 {
        for x in vec.iter_mut() {
            *x /= n as f64;
        }
    }
    Embedding { vec: Tensor::new(vec![d], vec), n_valid: n }
}

fn run_encode(
    cfg: &DenoiserConfig,
    store: &ParamStore,
    image: &Tensor,
    validity: Option<Vec<bool>>,
) -> (PatchTokens, Embedding) {
    let (_, hh, ww) = crate::tensor::chw(image);
    let (rows, cols) = (hh / cfg.patch_size, ww / cfg.patch_size);
    let mut tape = Tape::new();
    let mut bind = ParamBinding::new(store);
    let img = tape.leaf(image.clone());
    let tt = encode_on_tape(&mut tape, &mut bind, store, cfg, img, validity);
    let tokens = PatchTokens {
        tokens: tape.val(tt.var).clone(),
        valid: tt.valid,
        rows,
        cols,
    };
    let emb = pool_embedding(&tokens);
    (tokens, emb)
}

/// Encode a full image: every token valid.
pub fn encode(cfg: &DenoiserConfig, store: &ParamStore, image: &Tensor) -> (PatchTokens, Embedding) {
    run_encode(cfg, store, image, None)
}

/// Encode an image restricted to a region (mask value 1 = included):
/// tokens mostly outside the region are invalidated and zeroed.
pub fn masked_encode(
    cfg: &DenoiserConfig,
    store: &ParamStore,
    image: &Tensor,
    region: &Mask,
) -> (PatchTokens, Embedding) {
    let validity = token_validity(region, cfg.patch_size);
    run_encode(cfg, store, image, Some(validity))
}
