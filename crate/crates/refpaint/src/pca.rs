//! Principal-component split of reference embeddings.
//!
//! A basis fitted over a corpus of embeddings separates each embedding into
//! a semantic part (its projection onto the leading principal subspace,
//! re-anchored at the corpus mean) and a style part (the residual). The two
//! parts recombine exactly: `c_sem + c_sty − mean = e`.
//!
//! The eigen-solve is a cyclic Jacobi iteration on the sample covariance —
//! small dimensions, so robustness beats speed.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("need at least two samples to fit, got {0}")]
    NotEnoughSamples(usize),
    #[error("embedding {idx} has dimension {found}, expected {expect}")]
    DimensionMismatch { idx: usize, found: usize, expect: usize },
    #[error("component count {k} out of range 1..={d}")]
    BadK { k: usize, d: usize },
}

/// Fitted principal basis.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `[d]` corpus mean.
    pub mean: Tensor,
    /// `[k, d]`, orthonormal rows, leading component first.
    pub components: Tensor,
    /// Variance along each retained component, descending.
    pub variances: Vec<f64>,
    /// Trace of the covariance (total variance across all `d` directions).
    pub total_variance: f64,
}

/// Semantic/style decomposition of one embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEmbedding {
    pub semantic: Tensor,
    pub style: Tensor,
}

// ── Fitting ─────────────────────────────────────────────────────────────────

/// Fit a `k`-component basis over the embeddings (each a flat `[d]` tensor).
pub fn fit_pca(embeddings: &[Tensor], k: usize) -> Result<Pca, PcaError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(PcaError::NotEnoughSamples(n));
    }
    let d = embeddings[0].numel();
    for (idx, e) in embeddings.iter().enumerate() {
        if e.numel() != d || e.shape().len() != 1 {
            return Err(PcaError::DimensionMismatch { idx, found: e.numel(), expect: d });
        }
    }
    if k == 0 || k > d {
        return Err(PcaError::BadK { k, d });
    }

    let mut mean = vec![0.0; d];
    for e in embeddings {
        for j in 0..d {
            mean[j] += e.data()[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    // Sample covariance, n−1 divisor.
    let mut cov = vec![0.0; d * d];
    for e in embeddings {
        for a in 0..d {
            let ca = e.data()[a] - mean[a];
            for b in a..d {
                cov[a * d + b] += ca * (e.data()[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let (eigvals, eigvecs) = jacobi_eigen(cov, d);

    // Descending by eigenvalue, index as the stable tie-break.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b))
    });

    let mut components = Vec::with_capacity(k * d);
    let mut variances = Vec::with_capacity(k);
    for &col in order.iter().take(k) {
        let mut row: Vec<f64> = (0..d).map(|r| eigvecs[r * d + col]).collect();
        fix_sign(&mut row);
        components.extend_from_slice(&row);
        variances.push(eigvals[col].max(0.0));
    }

    Ok(Pca {
        mean: Tensor::new(vec![d], mean),
        components: Tensor::new(vec![k, d], components),
        variances,
        total_variance,
    })
}

/// Smallest component count whose cumulative variance reaches `frac` of the
/// full spectrum (always at least 1).
pub fn choose_k(eigvals_desc: &[f64], frac: f64) -> usize {
    let total: f64 = eigvals_desc.iter().sum();
    if total <= 0.0 {
        return 1;
    }
    let mut cum = 0.0;
    for (i, &v) in eigvals_desc.iter().enumerate() {
        cum += v;
        if cum >= frac * total - 1e-12 {
            return i + 1;
        }
    }
    eigvals_desc.len()
}

/// Fit with automatic component count: enough to explain `frac` of the
/// variance. Returns the basis and the chosen `k`.
pub fn fit_pca_auto(embeddings: &[Tensor], frac: f64) -> Result<(Pca, usize), PcaError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(PcaError::NotEnoughSamples(n));
    }
    let d = embeddings[0].numel();
    // Full fit exposes the whole spectrum; then trim.
    let full = fit_pca(embeddings, d)?;
    let k = choose_k(&full.variances, frac);
    let mut components = full.components.data()[..k * d].to_vec();
    components.shrink_to_fit();
    Ok((
        Pca {
            mean: full.mean,
            components: Tensor::new(vec![k, d], components),
            variances: full.variances[..k].to_vec(),
            total_variance: full.total_variance,
        },
        k,
    ))
}

/// Deterministic sign: the entry of largest magnitude (lowest index on ties)
/// is made positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Cyclic Jacobi diagonalization of a symmetric `d×d` matrix (row-major).
/// Returns (eigenvalues, eigenvector matrix with eigenvectors as columns).
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    if d == 1 {
        return (vec![a[0]], v);
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-10 * frob.max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // Rotate rows/columns p and q of A.
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for i in 0..d {
                    let api = a[p * d + i];
                    let aqi = a[q * d + i];
                    a[p * d + i] = c * api - s * aqi;
                    a[q * d + i] = s * api + c * aqi;
                }
                // Accumulate the rotation into V.
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    (eig, v)
}

// ── Decomposition ───────────────────────────────────────────────────────────

impl Pca {
    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    pub fn k(&self) -> usize {
        self.components.shape()[0]
    }

    /// Fraction of the corpus variance captured by the retained components.
    pub fn explained_fraction(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        self.variances.iter().sum::<f64>() / self.total_variance
    }

    /// Coordinates of `e − mean` in the component basis, `[k]`.
    pub fn coefficients(&self, e: &Tensor) -> Vec<f64> {
        let d = self.dim();
        assert_eq!(e.numel(), d, "embedding dimension");
        let k = self.k();
        let mut out = vec![0.0; k];
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.components.data()[i * d + j] * (e.data()[j] - self.mean.data()[j]);
            }
            out[i] = acc;
        }
        out
    }

    /// Split into semantic (subspace projection, anchored at the mean) and
    /// style (residual) parts; they recombine as `semantic + style − mean`.
    pub fn decompose(&self, e: &Tensor) -> SplitEmbedding {
        let d = self.dim();
        let coeffs = self.coefficients(e);
        let mut proj = vec![0.0; d];
        for (i, &c) in coeffs.iter().enumerate() {
            for j in 0..d {
                proj[j] += c * self.components.data()[i * d + j];
            }
        }
        let mut semantic = vec![0.0; d];
        let mut style = vec![0.0; d];
        for j in 0..d {
            semantic[j] = self.mean.data()[j] + proj[j];
            style[j] = e.data()[j] - proj[j];
        }
        SplitEmbedding {
            semantic: Tensor::new(vec![d], semantic),
            style: Tensor::new(vec![d], style),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use rand::Rng;

    /// Independent oracle: power iteration with deflation on the same
    /// covariance the fit sees.
    fn power_eigen(cov: &[f64], d: usize, top: usize) -> Vec<(f64, Vec<f64>)> {
        let mut c = cov.to_vec();
        let mut out = Vec::new();
        for comp in 0..top {
            let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * (i + comp) as f64).collect();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n0 = norm(&v);
            v.iter_mut().for_each(|x| *x /= n0);
            for _ in 0..5000 {
                let mut nv = vec![0.0; d];
                for i in 0..d {
                    for j in 0..d {
                        nv[i] += c[i * d + j] * v[j];
                    }
                }
                let n = norm(&nv);
                if n == 0.0 {
                    break;
                }
                nv.iter_mut().for_each(|x| *x /= n);
                v = nv;
            }
            let mut cv = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    cv[i] += c[i * d + j] * v[j];
                }
            }
            let lambda: f64 = v.iter().zip(&cv).map(|(a, b)| a * b).sum();
            // Deflate.
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] -= lambda * v[i] * v[j];
                }
            }
            out.push((lambda, v));
        }
        out
    }

    fn sample_cov(embs: &[Tensor]) -> (Vec<f64>, usize) {
        let d = embs[0].numel();
        let n = embs.len();
        let mut mean = vec![0.0; d];
        for e in embs {
            for j in 0..d {
                mean[j] += e.data()[j] / n as f64;
            }
        }
        let mut cov = vec![0.0; d * d];
        for e in embs {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] +=
                        (e.data()[a] - mean[a]) * (e.data()[b] - mean[b]) / (n - 1) as f64;
                }
            }
        }
        (cov, d)
    }

    /// Planted anisotropic corpus: two orthogonal directions with variances
    /// 16 and 4 plus faint isotropic noise.
    fn planted_corpus(n: usize, d: usize, seed: u64) -> (Vec<Tensor>, Vec<f64>, Vec<f64>) {
        let mut u1 = vec![0.0; d];
        let mut u2 = vec![0.0; d];
        for i in 0..d {
            u1[i] = 1.0 / (d as f64).sqrt();
            u2[i] = if i % 2 == 0 { 1.0 } else { -1.0 } / (d as f64).sqrt();
        }
        let mut rng = stream_rng(seed, &[100]);
        let mut out = Vec::new();
        for _ in 0..n {
            let g1: f64 = rand_distr::Distribution::sample(
                &rand_distr::StandardNormal,
                &mut rng,
            );
            let g2: f64 = rand_distr::Distribution::sample(
                &rand_distr::StandardNormal,
                &mut rng,
            );
            let mut e = vec![0.0; d];
            for j in 0..d {
                let noise: f64 = rng.gen_range(-1e-4..1e-4);
                e[j] = 0.5 + 4.0 * g1 * u1[j] + 2.0 * g2 * u2[j] + noise;
            }
            out.push(Tensor::new(vec![d], e));
        }
        (out, u1, u2)
    }

    #[test]
    fn jacobi_matches_hand_two_by_two() {
        let (eig, vecs) = jacobi_eigen(vec![2.0, 1.0, 1.0, 2.0], 2);
        let mut sorted = eig.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((sorted[0] - 3.0).abs() < 1e-12);
        assert!((sorted[1] - 1.0).abs() < 1e-12);
        // Columns orthonormal.
        for a in 0..2 {
            for b in 0..2 {
                let dot: f64 = (0..2).map(|r| vecs[r * 2 + a] * vecs[r * 2 + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_matches_power_iteration_oracle() {
        let (embs, _, _) = planted_corpus(60, 8, 1);
        let pca = fit_pca(&embs, 3).unwrap();
        let (cov, d) = sample_cov(&embs);
        let oracle = power_eigen(&cov, d, 3);
        for i in 0..2 {
            // Top-2 are well separated in the planted spectrum; the third is
            // noise-scale and skipped.
            let (lam, vec) = &oracle[i];
            let rel = (pca.variances[i] - lam).abs() / lam.max(1e-12);
            assert!(rel < 1e-6, "eigenvalue {i}: {} vs {lam}", pca.variances[i]);
            let dot: f64 = (0..d)
                .map(|j| pca.components.data()[i * d + j] * vec[j])
                .sum();
            assert!((dot.abs() - 1.0).abs() < 1e-6, "eigenvector {i} alignment {dot}");
        }
    }

    #[test]
    fn leading_component_aligns_with_planted_direction() {
        let (embs, u1, _) = planted_corpus(80, 6, 2);
        let pca = fit_pca(&embs, 2).unwrap();
        let d = 6;
        let dot: f64 = (0..d).map(|j| pca.components.data()[j] * u1[j]).sum();
        assert!(dot.abs() > 0.99, "alignment {dot}");
        // Variances near the planted 16 and 4 (sampling noise allowed).
        assert!((pca.variances[0] - 16.0).abs() < 6.0);
        assert!((pca.variances[1] - 4.0).abs() < 2.0);
        assert!(pca.variances[0] > pca.variances[1]);
    }

    #[test]
    fn components_are_orthonormal_with_positive_peak() {
        let (embs, _, _) = planted_corpus(50, 7, 3);
        let pca = fit_pca(&embs, 4).unwrap();
        let d = 7;
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..d)
                    .map(|j| pca.components.data()[a * d + j] * pca.components.data()[b * d + j])
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8, "rows {a},{b}: {dot}");
            }
            let row = &pca.components.data()[a * d..(a + 1) * d];
            let mut best = 0usize;
            for i in 1..d {
                if row[i].abs() > row[best].abs() {
                    best = i;
                }
            }
            assert!(row[best] > 0.0, "sign rule violated on row {a}");
        }
    }

    #[test]
    fn decomposition_recombines_exactly() {
        let (embs, _, _) = planted_corpus(40, 8, 4);
        let pca = fit_pca(&embs, 3).unwrap();
        for e in embs.iter().take(10) {
            let split = pca.decompose(e);
            for j in 0..8 {
                let recomb =
                    split.semantic.data()[j] + split.style.data()[j] - pca.mean.data()[j];
                assert!((recomb - e.data()[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn semantic_part_is_idempotent_under_decomposition() {
        let (embs, _, _) = planted_corpus(40, 6, 5);
        let pca = fit_pca(&embs, 2).unwrap();
        let split = pca.decompose(&embs[0]);
        let again = pca.decompose(&split.semantic);
        // semantic already lies in the subspace: its style part is the mean.
        assert!(again.style.max_abs_diff(&pca.mean) < 1e-9);
        assert!(again.semantic.max_abs_diff(&split.semantic) < 1e-9);
    }

    #[test]
    fn full_rank_basis_reproduces_the_embedding() {
        let (embs, _, _) = planted_corpus(50, 6, 6);
        let pca = fit_pca(&embs, 6).unwrap();
        let split = pca.decompose(&embs[3]);
        assert!(split.semantic.max_abs_diff(&embs[3]) < 1e-8);
        assert!(split.style.max_abs_diff(&pca.mean) < 1e-8);
    }

    #[test]
    fn choose_k_picks_smallest_sufficient_count() {
        let eig = [5.0, 3.0, 1.5, 0.5];
        assert_eq!(choose_k(&eig, 0.9), 3); // 9.5/10 ≥ 0.9, 8/10 < 0.9
        assert_eq!(choose_k(&eig, 0.5), 1);
        assert_eq!(choose_k(&eig, 1.0), 4);
        assert_eq!(choose_k(&eig, 0.0), 1);
    }

    #[test]
    fn auto_fit_reports_chosen_k() {
        let (embs, _, _) = planted_corpus(80, 6, 7);
        // Planted spectrum ≈ [16, 4, ~0…]: 80% needs just the top component,
        // 99.9% needs both.
        let (p1, k1) = fit_pca_auto(&embs, 0.75).unwrap();
        assert_eq!(k1, 1);
        assert_eq!(p1.components.shape(), [1, 6]);
        let (p2, k2) = fit_pca_auto(&embs, 0.999).unwrap();
        assert_eq!(k2, 2);
        assert!(p2.explained_fraction() >= 0.999);
    }

    #[test]
    fn errors_cover_degenerate_inputs() {
        assert!(matches!(
            fit_pca(&[Tensor::zeros(vec![3])], 1),
            Err(PcaError::NotEnoughSamples(1))
        ));
        let embs = vec![Tensor::zeros(vec![3]), Tensor::zeros(vec![4])];
        assert!(matches!(fit_pca(&embs, 1), Err(PcaError::DimensionMismatch { .. })));
        let embs = vec![Tensor::zeros(vec![3]), Tensor::zeros(vec![3])];
        assert!(matches!(fit_pca(&embs, 4), Err(PcaError::BadK { .. })));
        assert!(matches!(fit_pca(&embs, 0), Err(PcaError::BadK { .. })));
    }
}
