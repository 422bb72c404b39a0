//! Reverse-diffusion inpainting.
//!
//! Each step predicts noise three times — unconditionally, under the
//! reference's semantic embedding and under the background's style embedding
//! — and combines them with weights `(1−ω)`, `ωγ`, `ω(1−γ)`. Zero-weight
//! branches are skipped, so the ω = 0 path is literally the unconditional
//! forward pass. After every reverse step the kept region is re-anchored by
//! blending in a matched-noise copy of the clean background; the final image
//! composites the background back exactly and clamps the hole.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::denoiser::Denoiser;
use crate::embedder::{self, PatchTokens};
use crate::mask::Mask;
use crate::pca::Pca;
use crate::schedule::{reverse_step, NoiseSchedule};
use crate::tensor::Tensor;
use crate::util::stream_rng;

const TRAJECTORY_LABEL: u64 = 0x7a31;

// ── Guidance parameters ─────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceParams {
    /// Total guidance strength; 0 = purely unconditional.
    pub omega: f64,
    /// Semantic share of the guided part, in [0, 1].
    pub gamma: f64,
    /// Reverse-step stochasticity: 0 = deterministic, 1 = ancestral.
    pub eta: f64,
    /// Background blending runs while `t/T ≥ rho`; 0 blends at every step,
    /// 1 disables blending (the final composite still restores the
    /// background exactly).
    pub rho: f64,
}

impl Default for GuidanceParams {
    fn default() -> Self {
        GuidanceParams { omega: 7.5, gamma: 0.5, eta: 0.0, rho: 0.0 }
    }
}

impl GuidanceParams {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(SamplerError::BadParams("omega must be finite and >= 0".into()));
        }
        for (name, v) in [("gamma", self.gamma), ("eta", self.eta), ("rho", self.rho)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SamplerError::BadParams(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid guidance parameters: {0}")]
    BadParams(String),
    #[error("input shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint carries no principal basis; fit one first")]
    MissingBasis,
    #[error(transparent)]
    Model(#[from] crate::denoiser::DenoiserError),
}

// ── Guided noise estimate ───────────────────────────────────────────────────

/// Affine combination `(1−ω)·unc + ωγ·sem + ω(1−γ)·sty`, element-wise.
/// Zero-weight terms are skipped outright, so limit settings reproduce a
/// single branch bit-exactly.
pub fn combine_guidance(
    unc: &Tensor,
    sem: &Tensor,
    sty: &Tensor,
    omega: f64,
    gamma: f64,
) -> Tensor {
    let terms = [
        (1.0 - omega, unc),
        (omega * gamma, sem),
        (omega * (1.0 - gamma), sty),
    ];
    let mut out: Option<Tensor> = None;
    for (w, t) in terms {
        if w == 0.0 {
            continue;
        }
        match &mut out {
            None if w == 1.0 => out = Some((*t).clone()),
            None => out = Some(t.scale(w)),
            Some(acc) => acc.axpy(w, t),
        }
    }
    out.expect("guidance weights cannot all vanish")
}

/// The three-branch guided noise estimate. The semantic and style vectors
/// enter as single-token contexts; branches with zero weight are not
/// evaluated at all.
#[allow(clippy::too_many_arguments)]
pub fn guided_epsilon(
    model: &Denoiser,
    x_t: &Tensor,
    t: usize,
    sem: &Tensor,
    sty: &Tensor,
    side_input: &Tensor,
    m: &Mask,
    g: &GuidanceParams,
) -> Tensor {
    let d = model.cfg.embed_dim;
    assert_eq!(sem.numel(), d, "semantic embedding dimension");
    assert_eq!(sty.numel(), d, "style embedding dimension");
    let weights = [1.0 - g.omega, g.omega * g.gamma, g.omega * (1.0 - g.gamma)];
    let contexts = [
        PatchTokens::null_context(d),
        PatchTokens::from_embedding(sem),
        PatchTokens::from_embedding(sty),
    ];
    let mut out: Option<Tensor> = None;
    for (w, ctx) in weights.into_iter().zip(&contexts) {
        if w == 0.0 {
            continue;
        }
        let eps = model.forward(x_t, t, ctx, side_input, m);
        match &mut out {
            None if w == 1.0 => out = Some(eps),
            None => out = Some(eps.scale(w)),
            Some(acc) => acc.axpy(w, &eps),
        }
    }
    out.expect("guidance weights cannot all vanish")
}

// ── Color-constancy blending ────────────────────────────────────────────────

/// Replace the kept region with a matched-noise copy of the background:
/// `x ⊗ (1−M) + (α_t·I_bg + σ_t·ε_bg) ⊗ M`, fresh `ε_bg` per call.
pub fn blend_step<R: Rng>(
    x: &Tensor,
    i_bg: &Tensor,
    m_bg: &Mask,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Tensor {
    assert_eq!(x.shape(), i_bg.shape(), "blend shapes");
    let (c, h, w) = crate::tensor::chw(x);
    assert_eq!((m_bg.h(), m_bg.w()), (h, w), "blend mask shape");
    let eps = Tensor::randn(x.shape().to_vec(), rng);
    let (a, s) = (sched.alpha_t[t], sched.sigma_t[t]);
    let sp = h * w;
    let mut data = Vec::with_capacity(c * sp);
    for ch in 0..c {
        for i in 0..sp {
            let idx = ch * sp + i;
            data.push(if m_bg.data()[i] == 1 {
                a * i_bg.data()[idx] + s * eps.data()[idx]
            } else {
                x.data()[idx]
            });
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

// ── Full inpainting loop ────────────────────────────────────────────────────

/// Reverse-diffuse a full trajectory and composite the background back.
/// `m_bg` keeps background (1) vs hole (0); `m_o` marks (with 1) the object
/// region of the reference image `i_r`.
#[allow(clippy::too_many_arguments)]
pub fn inpaint(
    model: &Denoiser,
    sched: &NoiseSchedule,
    pca: &Pca,
    i_bg: &Tensor,
    m_bg: &Mask,
    i_r: &Tensor,
    m_o: &Mask,
    g: &GuidanceParams,
    seed: u64,
) -> Result<Tensor, SamplerError> {
    g.validate()?;
    let r = model.cfg.resolution;
    let want = [model.cfg.in_channels, r, r];
    for (name, t) in [("background", i_bg), ("reference", i_r)] {
        if t.shape() != want {
            return Err(SamplerError::Shape(format!(
                "{name} image has shape {:?}, model wants {:?}",
                t.shape(),
                want
            )));
        }
    }
    for (name, m) in [("background mask", m_bg), ("reference mask", m_o)] {
        if (m.h(), m.w()) != (r, r) {
            return Err(SamplerError::Shape(format!(
                "{name} is {}x{}, model wants {r}x{r}",
                m.h(),
                m.w()
            )));
        }
    }
    if pca.dim() != model.cfg.embed_dim {
        return Err(SamplerError::Shape(format!(
            "basis dimension {} does not match embed_dim {}",
            pca.dim(),
            model.cfg.embed_dim
        )));
    }

    // Reference semantics, background style. Empty regions fall back to the
    // zero embedding, which decomposes to mean-anchored parts.
    let (_, e_ref) = embedder::masked_encode(&model.cfg, &model.params, i_r, m_o);
    let (_, e_bg) = embedder::masked_encode(&model.cfg, &model.params, i_bg, m_bg);
    let sem = pca.decompose(&e_ref.vec).semantic;
    let sty = pca.decompose(&e_bg.vec).style;

    let t_steps = sched.t_steps;
    let mut rng = stream_rng(seed, &[TRAJECTORY_LABEL]);
    let mut x = Tensor::randn(want.to_vec(), &mut rng);
    for t in (0..t_steps).rev() {
        let eps_hat = guided_epsilon(model, &x, t, &sem, &sty, i_bg, m_bg, g);
        x = reverse_step(&x, &eps_hat, t, sched, g.eta, &mut rng);
        // After stepping from level t the trajectory sits at level t−1; the
        // background blend matches that level. The t = 0 step produced the
        // final clean estimate, which the exact composite below handles.
        if t > 0 && (t as f64 / t_steps as f64) >= g.rho {
            x = blend_step(&x, i_bg, m_bg, t - 1, sched, &mut rng);
        }
    }

    // Exact composite, then clamp: kept pixels are byte-for-byte I_bg.
    let (c, h, w) = crate::tensor::chw(&x);
    let sp = h * w;
    let mut data = Vec::with_capacity(c * sp);
    for ch in 0..c {
        for i in 0..sp {
            let idx = ch * sp + i;
            data.push(if m_bg.data()[i] == 1 { i_bg.data()[idx] } else { x.data()[idx] });
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), data).clamp(-1.0, 1.0))
}

/// Convenience entry over a loaded checkpoint; requires its principal basis.
pub fn inpaint_from_checkpoint(
    ckpt: &Checkpoint,
    i_bg: &Tensor,
    m_bg: &Mask,
    i_r: &Tensor,
    m_o: &Mask,
    g: &GuidanceParams,
    seed: u64,
) -> Result<Tensor, SamplerError> {
    let pca = ckpt.pca.as_ref().ok_or(SamplerError::MissingBasis)?;
    let model = Denoiser::from_parts(ckpt.model.clone(), ckpt.params.clone())?;
    let sched = ckpt.schedule.build();
    inpaint(&model, &sched, pca, i_bg, m_bg, i_r, m_o, g, seed)
}
