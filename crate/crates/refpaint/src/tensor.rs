//! Dense row-major `f64` tensors and the numeric kernels built on them.
//!
//! Shapes are dynamic (`Vec<usize>`); images are `[C, H, W]`, matrices
//! `[M, N]`, vectors `[N]`. Shape mismatches are programming errors and
//! panic via `assert!` — fallible conditions (I/O, degenerate user input)
//! are handled with `Result` at the module boundaries that own them.

use rand::Rng;
use rand_distr::StandardNormal;

// ── Tensor ──────────────────────────────────────────────────────────────────

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    /// Standard-normal tensor drawn element by element from `rng`.
    pub fn randn<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(self.data.len(), shape.iter().product::<usize>());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "elementwise op on mismatched shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy on mismatched shapes");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += c * b;
        }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

// ── Convolution ─────────────────────────────────────────────────────────────

/// 2-D convolution of a `[C, H, W]` input with `[O, C, K, K]` weights and an
/// `[O]` bias. Zero padding; output is `[O, (H+2p-K)/s+1, (W+2p-K)/s+1]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = chw(x);
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [O,C,K,K]");
    let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(wc, c, "conv weight channel mismatch");
    assert_eq!(b.shape(), [o]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;

    let mut out = vec![0.0; o * oh * ow];
    let xd = x.data();
    let wdat = w.data();
    for co in 0..o {
        let ob = &mut out[co * oh * ow..(co + 1) * oh * ow];
        ob.fill(b.data()[co]);
        for ci in 0..c {
            let xplane = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[((co * c + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut ob[oy * ow..(oy + 1) * ow];
                        // ix = ox*stride + kx - pad must land in [0, w)
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < wd {
                                *ov += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out)
}

/// Gradient of [`conv2d`] w.r.t. its input.
pub fn conv2d_grad_x(g: &Tensor, x_shape: &[usize], w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
    let ws = w.shape();
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let (go, oh, ow) = chw(g);
    assert_eq!(go, o);

    let mut gx = vec![0.0; c * h * wd];
    let gd = g.data();
    let wdat = w.data();
    for co in 0..o {
        let gplane = &gd[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c {
            let xplane = &mut gx[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[((co * c + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let xrow = &mut xplane[iy as usize * wd..(iy as usize + 1) * wd];
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < wd {
                                xrow[ix as usize] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, wd], gx)
}

/// Gradients of [`conv2d`] w.r.t. weights and bias.
pub fn conv2d_grad_w(
    g: &Tensor,
    x: &Tensor,
    w_shape: &[usize],
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (c, h, wd) = chw(x);
    let (o, kh, kw) = (w_shape[0], w_shape[2], w_shape[3]);
    let (_, oh, ow) = chw(g);

    let mut gw = vec![0.0; o * c * kh * kw];
    let mut gb = vec![0.0; o];
    let gd = g.data();
    let xd = x.data();
    for co in 0..o {
        let gplane = &gd[co * oh * ow..(co + 1) * oh * ow];
        gb[co] = gplane.iter().sum();
        for ci in 0..c {
            let xplane = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                        for (ox, &gv) in grow.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < wd {
                                acc += gv * xrow[ix as usize];
                            }
                        }
                    }
                    gw[((co * c + ci) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    (Tensor::new(w_shape.to_vec(), gw), Tensor::new(vec![o], gb))
}

// ── Resampling ──────────────────────────────────────────────────────────────

/// Nearest-neighbor ×2 upsampling of a `[C, H, W]` tensor.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let (c, h, w) = chw(x);
    let mut out = vec![0.0; c * 4 * h * w];
    let xd = x.data();
    for ci in 0..c {
        for y in 0..h {
            let src = &xd[(ci * h + y) * w..(ci * h + y + 1) * w];
            for dy in 0..2 {
                let row = &mut out[((ci * 2 * h) + 2 * y + dy) * 2 * w..][..2 * w];
                for x0 in 0..w {
                    row[2 * x0] = src[x0];
                    row[2 * x0 + 1] = src[x0];
                }
            }
        }
    }
    Tensor::new(vec![c, 2 * h, 2 * w], out)
}

/// Gradient of [`upsample2x`]: each input cell collects its four copies.
pub fn upsample2x_grad(g: &Tensor) -> Tensor {
    let (c, h2, w2) = chw(g);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = vec![0.0; c * h * w];
    let gd = g.data();
    for ci in 0..c {
        for y in 0..h2 {
            let row = &gd[(ci * h2 + y) * w2..(ci * h2 + y + 1) * w2];
            let dst = &mut gx[(ci * h + y / 2) * w..(ci * h + y / 2 + 1) * w];
            for x0 in 0..w2 {
                dst[x0 / 2] += row[x0];
            }
        }
    }
    Tensor::new(vec![c, h, w], gx)
}

/// Nearest-neighbor resize of a `[C, H, W]` tensor to `[C, oh, ow]`,
/// center-aligned (`src = floor((dst + 0.5) * in/out)`). Identity when the
/// sizes already match.
pub fn nearest_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = chw(x);
    let mut out = vec![0.0; c * oh * ow];
    let xd = x.data();
    for ci in 0..c {
        for y in 0..oh {
            let sy = (((y as f64 + 0.5) * h as f64 / oh as f64).floor() as usize).min(h - 1);
            for x0 in 0..ow {
                let sx = (((x0 as f64 + 0.5) * w as f64 / ow as f64).floor() as usize).min(w - 1);
                out[(ci * oh + y) * ow + x0] = xd[(ci * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

// ── Matrix products ─────────────────────────────────────────────────────────

/// `[M, K] × [K, N] → [M, N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = mn(a);
    let (k2, n) = mn(b);
    assert_eq!(k, k2, "matmul inner dimension mismatch");
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow.iter()) {
                *ov += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `[M, K] × [N, K]ᵀ → [M, N]` (second operand used transposed).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = mn(a);
    let (n, k2) = mn(b);
    assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, ov) in orow.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            *ov = arow.iter().zip(brow.iter()).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `[K, M]ᵀ × [K, N] → [M, N]` (first operand used transposed).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = mn(a);
    let (k2, n) = mn(b);
    assert_eq!(k, k2, "matmul_tn inner dimension mismatch");
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for p in 0..k {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow.iter()) {
                *ov += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

// ── Activations and normalization ───────────────────────────────────────────

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// SiLU activation `x * sigmoid(x)` applied elementwise.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

/// Gradient of [`silu`] given upstream gradient `g` and the original input.
pub fn silu_grad(g: &Tensor, x: &Tensor) -> Tensor {
    g.zip(x, |gv, xv| {
        let s = sigmoid(xv);
        gv * (s + xv * s * (1.0 - s))
    })
}

/// Group normalization over a `[C, H, W]` tensor with per-channel affine
/// parameters. Returns the output plus the per-group `(mean, inv_std)` pairs
/// needed by the backward pass.
pub fn group_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> (Tensor, Vec<(f64, f64)>) {
    let (c, h, w) = chw(x);
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    assert_eq!(gamma.shape(), [c]);
    assert_eq!(beta.shape(), [c]);
    let gc = c / groups;
    let glen = gc * h * w;
    let xd = x.data();
    let mut out = vec![0.0; c * h * w];
    let mut stats = Vec::with_capacity(groups);
    for g in 0..groups {
        let seg = &xd[g * glen..(g + 1) * glen];
        let mean = seg.iter().sum::<f64>() / glen as f64;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        stats.push((mean, inv_std));
        for ci in 0..gc {
            let ch = g * gc + ci;
            let ga = gamma.data()[ch];
            let be = beta.data()[ch];
            let src = &seg[ci * h * w..(ci + 1) * h * w];
            let dst = &mut out[ch * h * w..(ch + 1) * h * w];
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = (s - mean) * inv_std * ga + be;
            }
        }
    }
    (Tensor::new(vec![c, h, w], out), stats)
}

/// Gradients of [`group_norm`] w.r.t. input, gamma and beta.
pub fn group_norm_grad(
    g: &Tensor,
    x: &Tensor,
    gamma: &Tensor,
    groups: usize,
    stats: &[(f64, f64)],
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = chw(x);
    let gc = c / groups;
    let glen = gc * h * w;
    let sp = h * w;
    let xd = x.data();
    let gd = g.data();
    let mut gx = vec![0.0; c * sp];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for gi in 0..groups {
        let (mean, inv_std) = stats[gi];
        // ghat = upstream * gamma; accumulate the two reduction terms.
        let mut sum_ghat = 0.0;
        let mut sum_ghat_xhat = 0.0;
        for ci in 0..gc {
            let ch = gi * gc + ci;
            let ga = gamma.data()[ch];
            for i in 0..sp {
                let idx = ch * sp + i;
                let xhat = (xd[idx] - mean) * inv_std;
                let ghat = gd[idx] * ga;
                sum_ghat += ghat;
                sum_ghat_xhat += ghat * xhat;
                ggamma[ch] += gd[idx] * xhat;
                gbeta[ch] += gd[idx];
            }
        }
        let n = glen as f64;
        for ci in 0..gc {
            let ch = gi * gc + ci;
            let ga = gamma.data()[ch];
            for i in 0..sp {
                let idx = ch * sp + i;
                let xhat = (xd[idx] - mean) * inv_std;
                let ghat = gd[idx] * ga;
                gx[idx] = inv_std * (ghat - sum_ghat / n - xhat * sum_ghat_xhat / n);
            }
        }
    }
    (
        Tensor::new(vec![c, h, w], gx),
        Tensor::new(vec![c], ggamma),
        Tensor::new(vec![c], gbeta),
    )
}

/// Row-wise softmax of a `[M, N]` matrix.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = mn(x);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            *o = (v - mx).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gradient of [`softmax_rows`] given upstream `g` and the softmax output `s`.
pub fn softmax_rows_grad(g: &Tensor, s: &Tensor) -> Tensor {
    let (m, n) = mn(s);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let gr = &g.data()[i * n..(i + 1) * n];
        let sr = &s.data()[i * n..(i + 1) * n];
        let dot: f64 = gr.iter().zip(sr.iter()).map(|(&a, &b)| a * b).sum();
        let orow = &mut out[i * n..(i + 1) * n];
        for ((o, &gv), &sv) in orow.iter_mut().zip(gr.iter()).zip(sr.iter()) {
            *o = sv * (gv - dot);
        }
    }
    Tensor::new(vec![m, n], out)
}

// ── Layout changes ──────────────────────────────────────────────────────────

/// `[C, H, W] → [H*W, C]`: one row per spatial position.
pub fn chw_to_tokens(x: &Tensor) -> Tensor {
    let (c, h, w) = chw(x);
    let sp = h * w;
    let mut out = vec![0.0; sp * c];
    let xd = x.data();
    for ci in 0..c {
        for i in 0..sp {
            out[i * c + ci] = xd[ci * sp + i];
        }
    }
    Tensor::new(vec![sp, c], out)
}

/// Inverse of [`chw_to_tokens`].
pub fn tokens_to_chw(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (sp, c) = mn(x);
    assert_eq!(sp, h * w);
    let mut out = vec![0.0; c * sp];
    let xd = x.data();
    for ci in 0..c {
        for i in 0..sp {
            out[ci * sp + i] = xd[i * c + ci];
        }
    }
    Tensor::new(vec![c, h, w], out)
}

// ── Shape helpers ───────────────────────────────────────────────────────────

pub(crate) fn chw(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "expected [C,H,W] tensor, got {s:?}");
    (s[0], s[1], s[2])
}

pub(crate) fn mn(x: &Tensor) -> (usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 2, "expected [M,N] tensor, got {s:?}");
    (s[0], s[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn conv2d_matches_scalar_reference() {
        // 1x3x3 input, 1x1x2x2 kernel, stride 1, no padding.
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![1], vec![0.5]);
        let y = conv2d(&x, &w, &b, 1, 0);
        // Reference: out[y][x] = sum_k w * patch + b, computed by hand.
        let expect = [
            1.0 + 2.0 * 2.0 + 3.0 * 4.0 + 4.0 * 5.0 + 0.5,
            2.0 + 2.0 * 3.0 + 3.0 * 5.0 + 4.0 * 6.0 + 0.5,
            4.0 + 2.0 * 5.0 + 3.0 * 7.0 + 4.0 * 8.0 + 0.5,
            5.0 + 2.0 * 6.0 + 3.0 * 8.0 + 4.0 * 9.0 + 0.5,
        ];
        assert_eq!(y.shape(), [1, 2, 2]);
        for (a, e) in y.data().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_stride2_halves_even_sizes() {
        let x = Tensor::zeros(vec![2, 8, 8]);
        let w = Tensor::zeros(vec![3, 2, 3, 3]);
        let b = Tensor::zeros(vec![3]);
        let y = conv2d(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), [3, 4, 4]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        // matmul_nt(a, bt) with bt = b transposed must agree with matmul(a, b).
        let bt = Tensor::new(vec![2, 3], vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        let c2 = matmul_nt(&a, &bt);
        assert_eq!(c.data(), c2.data());
        // matmul_tn(at, b) with at = a transposed likewise.
        let at = Tensor::new(vec![3, 2], vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let c3 = matmul_tn(&at, &b);
        assert_eq!(c.data(), c3.data());
    }

    #[test]
    fn upsample_grad_is_transpose_of_forward() {
        // <g, up(x)> == <up_grad(g), x> for random-ish fills.
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]);
        let g = Tensor::new(vec![1, 4, 4], (0..16).map(|v| (v as f64) * 0.3 - 1.0).collect());
        let lhs = g.dot(&upsample2x(&x));
        let rhs = upsample2x_grad(&g).dot(&x);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn nearest_resize_identity_and_downscale() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(nearest_resize(&x, 2, 2), x);
        let big = nearest_resize(&x, 4, 4);
        assert_eq!(big.data()[0], 1.0);
        assert_eq!(big.data()[3], 2.0);
        let back = nearest_resize(&big, 2, 2);
        assert_eq!(back, x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, -5.0, 0.0, 5.0]);
        let s = softmax_rows(&x);
        for i in 0..2 {
            let sum: f64 = s.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_zero_mean_unit_var_per_group() {
        let mut rng = rand::rngs::mock::StepRng::new(1, 0x9e3779b97f4a7c15);
        let data: Vec<f64> = (0..2 * 4 * 4).map(|_| (rng.next_u64() % 1000) as f64 / 100.0).collect();
        let x = Tensor::new(vec![2, 4, 4], data);
        let gamma = Tensor::full(vec![2], 1.0);
        let beta = Tensor::zeros(vec![2]);
        let (y, _) = group_norm(&x, &gamma, &beta, 2, 1e-12);
        for ch in 0..2 {
            let seg = &y.data()[ch * 16..(ch + 1) * 16];
            let mean: f64 = seg.iter().sum::<f64>() / 16.0;
            let var: f64 = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn token_layout_roundtrip() {
        let x = Tensor::new(vec![3, 2, 2], (0..12).map(|v| v as f64).collect());
        let t = chw_to_tokens(&x);
        assert_eq!(t.shape(), [4, 3]);
        assert_eq!(t.data()[0..3], [0.0, 4.0, 8.0]);
        assert_eq!(tokens_to_chw(&t, 2, 2), x);
    }
}
