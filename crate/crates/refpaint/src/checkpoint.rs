//! Binary checkpoint container.
//!
//! Layout: magic `RFPT`, format version, a length-prefixed JSON header
//! (model + schedule configs, optional principal-basis metadata), then a
//! tensor table — each record a length-prefixed UTF-8 name, rank, dims and
//! row-major f32 little-endian data. Values are computed in f64 but stored
//! as f32; loading widens them back, so save → load → save is byte-stable.
//! Files are written to a temp path and renamed into place.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{parameter_spec, DenoiserConfig};
use crate::params::ParamStore;
use crate::pca::Pca;
use crate::schedule::ScheduleConfig;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RFPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint does not match its model config: {0}")]
    Model(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: DenoiserConfig,
    schedule: ScheduleConfig,
    pca: Option<PcaMeta>,
}

#[derive(Serialize, Deserialize)]
struct PcaMeta {
    k: usize,
    dim: usize,
    total_variance: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub params: ParamStore,
    pub pca: Option<Pca>,
}

// ── Saving ──────────────────────────────────────────────────────────────────

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

fn validate_params(model: &DenoiserConfig, params: &ParamStore) -> Result<(), CheckpointError> {
    let spec = parameter_spec(model);
    if spec.len() != params.len() {
        return Err(CheckpointError::Model(format!(
            "expected {} tensors, found {}",
            spec.len(),
            params.len()
        )));
    }
    for (i, (name, shape, _)) in spec.iter().enumerate() {
        if params.name_of(i) != name || params.by_idx(i).shape() != &shape[..] {
            return Err(CheckpointError::Model(format!(
                "tensor {i}: expected {name} {shape:?}, found {} {:?}",
                params.name_of(i),
                params.by_idx(i).shape()
            )));
        }
    }
    Ok(())
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> io::Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    validate_params(&ckpt.model, &ckpt.params)?;
    if let Some(pca) = &ckpt.pca {
        if pca.dim() != ckpt.model.embed_dim {
            return Err(CheckpointError::Model(format!(
                "basis dimension {} does not match embed_dim {}",
                pca.dim(),
                ckpt.model.embed_dim
            )));
        }
    }

    let header = Header {
        model: ckpt.model.clone(),
        schedule: ckpt.schedule.clone(),
        pca: ckpt.pca.as_ref().map(|p| PcaMeta {
            k: p.k(),
            dim: p.dim(),
            total_variance: p.total_variance,
        }),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CheckpointError::Format(format!("header encode: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        let res: io::Result<()> = (|| {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(header_json.len() as u64).to_le_bytes())?;
            w.write_all(&header_json)?;

            let n_pca = if ckpt.pca.is_some() { 3u64 } else { 0 };
            w.write_all(&(ckpt.params.len() as u64 + n_pca).to_le_bytes())?;
            for (name, t) in ckpt.params.iter() {
                write_tensor(&mut w, name, t)?;
            }
            if let Some(pca) = &ckpt.pca {
                write_tensor(&mut w, "pca.mean", &pca.mean)?;
                write_tensor(&mut w, "pca.components", &pca.components)?;
                let vars = Tensor::new(vec![pca.variances.len()], pca.variances.clone());
                write_tensor(&mut w, "pca.variances", &vars)?;
            }
            w.flush()
        })();
        res.map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

// ── Loading ─────────────────────────────────────────────────────────────────

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| CheckpointError::Format("unexpected end of file".into()))?;
        Ok(buf)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn usize_bounded(&mut self, what: &str, max: u64) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        if v > max {
            return Err(CheckpointError::Format(format!("{what} {v} out of bounds")));
        }
        Ok(v as usize)
    }

    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name_len = self.usize_bounded("name length", 1 << 16)?;
        let name = String::from_utf8(self.bytes(name_len)?)
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
        let rank = self.usize_bounded("rank", 8)?;
        let mut dims = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = self.usize_bounded("dimension", 1 << 32)?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| CheckpointError::Format("tensor too large".into()))?;
            dims.push(d);
        }
        if numel > (1 << 31) {
            return Err(CheckpointError::Format("tensor too large".into()));
        }
        let raw = self.bytes(numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((name, Tensor::new(dims, data)))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = Reader { inner: BufReader::new(file) };

    if r.bytes(4)? != MAGIC {
        return Err(CheckpointError::Format("bad magic (not a checkpoint)".into()));
    }
    let version = u32::from_le_bytes(r.bytes(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let header_len = r.usize_bounded("header length", 1 << 24)?;
    let header: Header = serde_json::from_slice(&r.bytes(header_len)?)
        .map_err(|e| CheckpointError::Format(format!("header decode: {e}")))?;
    header
        .model
        .validate()
        .map_err(|e| CheckpointError::Model(e.to_string()))?;

    let count = r.usize_bounded("tensor count", 1 << 20)?;
    let mut params = ParamStore::new();
    let mut pca_tensors: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if name.starts_with("pca.") {
            pca_tensors.push((name, t));
        } else {
            params.insert(&name, t);
        }
    }
    validate_params(&header.model, &params)?;

    let pca = match &header.pca {
        None => {
            if !pca_tensors.is_empty() {
                return Err(CheckpointError::Format(
                    "basis tensors present without basis metadata".into(),
                ));
            }
            None
        }
        Some(meta) => {
            let find = |n: &str| {
                pca_tensors
                    .iter()
                    .find(|(name, _)| name == n)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| CheckpointError::Format(format!("missing tensor {n}")))
            };
            let mean = find("pca.mean")?;
            let components = find("pca.components")?;
            let variances = find("pca.variances")?;
            if mean.shape() != [meta.dim]
                || components.shape() != [meta.k, meta.dim]
                || variances.shape() != [meta.k]
            {
                return Err(CheckpointError::Format("basis tensor shapes disagree with metadata".into()));
            }
            Some(Pca {
                mean,
                components,
                variances: variances.data().to_vec(),
                total_variance: meta.total_variance,
            })
        }
    };

    Ok(Checkpoint {
        model: header.model,
        schedule: header.schedule,
        params,
        pca,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, Denoiser};
    use crate::pca::fit_pca;
    use crate::util::stream_rng;

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig {
            resolution: 8,
            in_channels: 3,
            base_channels: 4,
            levels: 2,
            blocks_per_level: 1,
            attn_levels: vec![1],
            embed_dim: 6,
            patch_size: 4,
            ..DenoiserConfig::default()
        }
    }

    fn small_ckpt(seed: u64) -> Checkpoint {
        let cfg = small_cfg();
        Checkpoint {
            params: init_params(&cfg, seed),
            model: cfg,
            schedule: ScheduleConfig::for_steps(50),
            pca: None,
        }
    }

    fn quantize(store: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in store.iter() {
            out.insert(name, t.map(|v| v as f32 as f64));
        }
        out
    }

    #[test]
    fn roundtrip_preserves_configs_and_quantized_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rfpt");
        let ckpt = small_ckpt(3);
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, ckpt.model);
        assert_eq!(back.schedule, ckpt.schedule);
        assert!(back.pca.is_none());
        assert_eq!(back.params.max_abs_diff(&quantize(&ckpt.params)), 0.0);
        // The loaded table reconstructs a model directly.
        Denoiser::from_parts(back.model, back.params).unwrap();
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.rfpt");
        let p2 = dir.path().join("b.rfpt");
        let mut ckpt = small_ckpt(4);
        let embs: Vec<Tensor> = (0..12)
            .map(|i| {
                let mut rng = stream_rng(50, &[i]);
                Tensor::randn(vec![6], &mut rng)
            })
            .collect();
        ckpt.pca = Some(fit_pca(&embs, 2).unwrap());
        save_checkpoint(&p1, &ckpt).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &back).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn basis_roundtrip_keeps_decomposition_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfpt");
        let mut ckpt = small_ckpt(5);
        let embs: Vec<Tensor> = (0..20)
            .map(|i| {
                let mut rng = stream_rng(60, &[i]);
                Tensor::randn(vec![6], &mut rng)
            })
            .collect();
        ckpt.pca = Some(fit_pca(&embs, 3).unwrap());
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let pca = back.pca.unwrap();
        assert_eq!(pca.k(), 3);
        assert_eq!(pca.dim(), 6);
        let e = &embs[0];
        let split = pca.decompose(e);
        for j in 0..6 {
            let recomb = split.semantic.data()[j] + split.style.data()[j] - pca.mean.data()[j];
            // f32 storage loosens the exact identity to f32 scale.
            assert!((recomb - e.data()[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfpt");
        save_checkpoint(&path, &small_ckpt(6)).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Format(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Format(_))));

        std::fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Format(_))));
    }

    #[test]
    fn save_rejects_mismatched_parameter_table() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfpt");
        let mut ckpt = small_ckpt(7);
        // Drop one tensor: layout no longer matches the config.
        let mut broken = ParamStore::new();
        for (name, t) in ckpt.params.iter().take(ckpt.params.len() - 1) {
            broken.insert(name, t.clone());
        }
        ckpt.params = broken;
        assert!(matches!(save_checkpoint(&path, &ckpt), Err(CheckpointError::Model(_))));
        assert!(!path.exists());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_checkpoint(Path::new("/nonexistent/nope.rfpt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nope.rfpt"), "{msg}");
    }
}
