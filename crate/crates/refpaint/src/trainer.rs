//! Self-supervised training loop.
//!
//! Every sample is built from a clean image alone: a fresh free-form hole
//! splits it into kept background and hole content, the full image is noised
//! to a random timestep, and the model predicts that noise given the noisy
//! image, the clean background (ladder side input), the keep-mask and the
//! hole content encoded as context tokens. Context is dropped to the null
//! token at a fixed rate so the model also learns the unconditional field.
//!
//! All per-sample randomness derives from `(seed, global sample counter)`,
//! making runs reproducible and gradient accumulation equivalent to larger
//! batches up to floating-point reduction order.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Grads, ParamBinding, Tape};
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::dataset::Dataset;
use crate::denoiser::{Denoiser, DenoiserConfig, DenoiserError};
use crate::embedder::{self, TapeTokens};
use crate::mask::{generate_freeform, make_quadruplet, maybe_full_hole, MaskError, StrokeParams};
use crate::params::ParamStore;
use crate::schedule::{forward_sample, NoiseSchedule, ScheduleConfig};
use crate::tensor::Tensor;
use crate::util::stream_rng;

const SAMPLE_LABEL: u64 = 0x5a17;

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps to run.
    pub steps: usize,
    /// Samples per gradient micro-batch.
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied uniformly to every tensor.
    pub weight_decay: f64,
    /// Probability of replacing the context with the null token.
    pub context_dropout: f64,
    /// Probability of widening the generated hole to the full canvas.
    pub full_hole_p: f64,
    /// Emit a `step=N loss=L` metrics line every this many optimizer steps
    /// (0 disables periodic lines; the final step is always written).
    pub metrics_every: usize,
    /// Also checkpoint every this many optimizer steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 4,
            grad_accum: 1,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            context_dropout: 0.1,
            full_hole_p: 0.25,
            metrics_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(TrainError::BadConfig(
                "batch_size and grad_accum must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::BadConfig("lr must be finite and non-negative".into()));
        }
        for (name, p) in [
            ("context_dropout", self.context_dropout),
            ("full_hole_p", self.full_hole_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TrainError::BadConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error("mask generation failed at sample {counter}: {source}")]
    Mask { counter: u64, source: MaskError },
    #[error("non-finite loss at optimizer step {step} (diagnostics: {diagnostics})")]
    NonFinite { step: usize, diagnostics: PathBuf },
    #[error("training io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset resolution {data} does not match model resolution {model}")]
    Resolution { data: usize, model: usize },
}

// ── Optimizer ───────────────────────────────────────────────────────────────

/// Adam with decoupled weight decay; the decay applies to every tensor.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        let zeros = |_: usize| {
            (0..store.len())
                .map(|i| Tensor::zeros(store.by_idx(i).shape().to_vec()))
                .collect::<Vec<_>>()
        };
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(0),
            v: zeros(0),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update; a `None` gradient is treated as zero (weight decay still
    /// applies).
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..store.len() {
            let p = store.by_idx_mut(i);
            let pd = p.data_mut();
            let md = self.m[i].data_mut();
            let vd = self.v[i].data_mut();
            let g = grads.get(i).and_then(|g| g.as_ref());
            for e in 0..pd.len() {
                let gv = g.map_or(0.0, |g| g.data()[e]);
                md[e] = self.beta1 * md[e] + (1.0 - self.beta1) * gv;
                vd[e] = self.beta2 * vd[e] + (1.0 - self.beta2) * gv * gv;
                let mhat = md[e] / bc1;
                let vhat = vd[e] / bc2;
                pd[e] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * pd[e]);
            }
        }
    }
}

// ── Trainer ─────────────────────────────────────────────────────────────────

pub struct Trainer {
    pub model: Denoiser,
    pub sched: NoiseSchedule,
    cfg: TrainConfig,
    strokes: StrokeParams,
    opt: AdamW,
    seed: u64,
    /// Global sample counter; the sole source of per-sample randomness.
    counter: u64,
    accum: Grads,
    micro_in_step: usize,
    micro_losses: Vec<f64>,
    /// Mean loss per completed optimizer step.
    pub losses: Vec<f64>,
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct TrainingRun {
    pub model: Denoiser,
    pub losses: Vec<f64>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

impl Trainer {
    pub fn new(
        model: Denoiser,
        sched: NoiseSchedule,
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Trainer, TrainError> {
        cfg.validate()?;
        let opt = AdamW::new(&cfg, &model.params);
        Ok(Trainer {
            model,
            sched,
            cfg,
            strokes: StrokeParams::default(),
            opt,
            seed,
            counter: 0,
            accum: Vec::new(),
            micro_in_step: 0,
            micro_losses: Vec::new(),
            losses: Vec::new(),
        })
    }

    pub fn optimizer_steps(&self) -> usize {
        self.opt.steps_taken()
    }

    pub fn samples_consumed(&self) -> u64 {
        self.counter
    }

    /// Process one micro-batch; performs the optimizer update once
    /// `grad_accum` micro-batches have been accumulated. Returns the
    /// micro-batch loss.
    pub fn train_step(&mut self, data: &Dataset) -> Result<f64, TrainError> {
        assert!(!data.is_empty(), "dataset must not be empty");
        let res = self.model.cfg.resolution;
        if data.resolution != res {
            return Err(TrainError::Resolution { data: data.resolution, model: res });
        }

        let mut batch_grads: Grads = Vec::new();
        let mut loss_sum = 0.0;
        for _ in 0..self.cfg.batch_size {
            let counter = self.counter;
            self.counter += 1;
            let idx = (counter % data.len() as u64) as usize;
            let img = &data.images[idx];
            let mut rng = stream_rng(self.seed, &[SAMPLE_LABEL, counter]);

            let m = generate_freeform(&mut rng, res, res, &self.strokes)
                .map_err(|source| TrainError::Mask { counter, source })?;
            let m = maybe_full_hole(&mut rng, &m, self.cfg.full_hole_p);
            let quad = make_quadruplet(img, &m);

            let t = rng.gen_range(0..self.sched.t_steps);
            let eps = Tensor::randn(img.shape().to_vec(), &mut rng);
            let x_t = forward_sample(img, t, &eps, &self.sched);
            let dropped = rng.gen::<f64>() < self.cfg.context_dropout;

            let mut tape = Tape::new();
            let mut bind = ParamBinding::new(&self.model.params);
            let x_var = tape.leaf(x_t);
            let side_var = tape.leaf(quad.i_bg.clone());
            let ctx = if dropped {
                TapeTokens {
                    var: tape.leaf(Tensor::zeros(vec![1, self.model.cfg.embed_dim])),
                    valid: vec![true],
                }
            } else {
                let io_var = tape.leaf(quad.i_o.clone());
                let validity =
                    embedder::token_validity(&quad.m_o, self.model.cfg.patch_size);
                embedder::encode_on_tape(
                    &mut tape,
                    &mut bind,
                    &self.model.params,
                    &self.model.cfg,
                    io_var,
                    Some(validity),
                )
            };
            let out = self.model.forward_on_tape(&mut tape, &mut bind, x_var, t, &ctx, side_var, &m);
            let loss = tape.mse_loss(out, eps);
            loss_sum += tape.val(loss).data()[0];
            tape.backward(loss, self.model.params.len(), &mut batch_grads);
        }

        let micro_loss = loss_sum / self.cfg.batch_size as f64;
        // Mean over every sample of the effective batch.
        let w = 1.0 / (self.cfg.batch_size * self.cfg.grad_accum) as f64;
        if self.accum.len() < batch_grads.len() {
            self.accum.resize(batch_grads.len(), None);
        }
        for (slot, g) in batch_grads.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.accum[slot] {
                    Some(acc) => acc.axpy(w, &g),
                    dst @ None => *dst = Some(g.scale(w)),
                }
            }
        }
        self.micro_in_step += 1;
        self.micro_losses.push(micro_loss);

        if self.micro_in_step == self.cfg.grad_accum {
            self.opt.update(&mut self.model.params, &self.accum);
            let step_loss =
                self.micro_losses.iter().sum::<f64>() / self.micro_losses.len() as f64;
            self.losses.push(step_loss);
            self.accum.clear();
            self.micro_in_step = 0;
            self.micro_losses.clear();
        }
        Ok(micro_loss)
    }
}

// ── Run driver ──────────────────────────────────────────────────────────────

fn append_line(path: &Path, line: &str) -> Result<(), TrainError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
    writeln!(f, "{line}").map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
}

fn dump_diagnostics(
    out_dir: &Path,
    trainer: &Trainer,
    step: usize,
    loss: f64,
) -> Result<PathBuf, TrainError> {
    let path = out_dir.join("diagnostics.json");
    let max_param = trainer
        .model
        .params
        .iter()
        .map(|(_, t)| t.data().iter().fold(0.0f64, |a, &v| a.max(v.abs())))
        .fold(0.0f64, f64::max);
    let doc = serde_json::json!({
        "optimizer_step": step,
        "samples_consumed": trainer.counter,
        "loss": if loss.is_nan() { "nan".to_string() } else { loss.to_string() },
        "max_abs_parameter": max_param,
        "recent_losses": trainer.losses.iter().rev().take(10).collect::<Vec<_>>(),
    });
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap())
        .map_err(|source| TrainError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Train from scratch and leave a checkpoint plus metrics log in `out_dir`.
pub fn run_training(
    model_cfg: DenoiserConfig,
    sched_cfg: ScheduleConfig,
    train_cfg: TrainConfig,
    data: &Dataset,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainingRun, TrainError> {
    fs::create_dir_all(out_dir)
        .map_err(|source| TrainError::Io { path: out_dir.to_path_buf(), source })?;
    let model = Denoiser::init(model_cfg, seed)?;
    if data.resolution != model.cfg.resolution {
        return Err(TrainError::Resolution {
            data: data.resolution,
            model: model.cfg.resolution,
        });
    }
    let sched = sched_cfg.build();
    let metrics_path = out_dir.join("metrics.txt");
    if metrics_path.exists() {
        fs::remove_file(&metrics_path)
            .map_err(|source| TrainError::Io { path: metrics_path.clone(), source })?;
    }
    let ckpt_path = out_dir.join("model.rfpt");
    let mut trainer = Trainer::new(model, sched, train_cfg.clone(), seed)?;

    let save = |trainer: &Trainer| -> Result<(), TrainError> {
        save_checkpoint(
            &ckpt_path,
            &Checkpoint {
                model: trainer.model.cfg.clone(),
                schedule: sched_cfg.clone(),
                params: trainer.model.params.clone(),
                pca: None,
            },
        )?;
        Ok(())
    };

    while trainer.optimizer_steps() < train_cfg.steps {
        let step_before = trainer.optimizer_steps();
        let micro_loss = trainer.train_step(data)?;
        if !micro_loss.is_finite() {
            let diagnostics = dump_diagnostics(out_dir, &trainer, step_before + 1, micro_loss)?;
            return Err(TrainError::NonFinite { step: step_before + 1, diagnostics });
        }
        let step_now = trainer.optimizer_steps();
        if step_now > step_before {
            let loss = *trainer.losses.last().unwrap();
            let periodic = train_cfg.metrics_every > 0 && step_now % train_cfg.metrics_every == 0;
            if periodic || step_now == train_cfg.steps {
                append_line(&metrics_path, &format!("step={step_now} loss={loss}"))?;
            }
            if train_cfg.checkpoint_every > 0 && step_now % train_cfg.checkpoint_every == 0 {
                save(&trainer)?;
            }
        }
    }
    if train_cfg.steps == 0 {
        append_line(&metrics_path, "step=0 loss=nan")?;
    }
    save(&trainer)?;

    Ok(TrainingRun {
        losses: trainer.losses.clone(),
        model: trainer.model,
        checkpoint_path: ckpt_path,
        metrics_path,
    })
}
