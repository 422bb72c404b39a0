//! Command-line surface: train, inpaint, maskgen, eval, pca.
//!
//! Every failure exits nonzero with a single `error: …` line on stderr.
//! All commands are deterministic for a fixed `--seed`; the implementation
//! is single-threaded, so the `REFPAINT_THREADS` worker cap is honored
//! trivially (values are validated, one worker is used).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use refpaint::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use refpaint::config::load_config;
use refpaint::dataset::{self, prepare_image};
use refpaint::denoiser::Denoiser;
use refpaint::embedder;
use refpaint::evaluator::{copy_paste, eval_pair, EvalReport};
use refpaint::imageio::{load_image, load_mask, save_image_png, save_image_ppm, save_mask_pgm};
use refpaint::mask::{generate_freeform, Mask, StrokeParams};
use refpaint::pca::{fit_pca, fit_pca_auto};
use refpaint::sampler::{inpaint_from_checkpoint, GuidanceParams};
use refpaint::tensor::Tensor;
use refpaint::trainer::run_training;
use refpaint::util::stream_rng;

const MASKGEN_LABEL: u64 = 0x3a5c;

// ── Argument surface ────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(name = "refpaint", about = "Reference-guided painterly inpainting", version)]
struct Cli {
    /// Base seed; overrides any seed found in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON config file.
    Train(TrainArgs),
    /// Fill the masked region of a background, guided by a reference.
    Inpaint(InpaintArgs),
    /// Emit deterministic free-form hole masks.
    Maskgen(MaskgenArgs),
    /// Score inpainting outputs listed in a manifest.
    Eval(EvalArgs),
    /// Fit the embedding basis and store it in a checkpoint.
    Pca(PcaArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config document (model/schedule/train/data sections).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct InpaintArgs {
    /// Trained checkpoint with a fitted basis.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Background image (PNG/PPM), cropped and resized to model resolution.
    #[arg(long)]
    bg: PathBuf,
    /// Background mask (PGM/PNG): 255 = keep, 0 = hole.
    #[arg(long)]
    mask: PathBuf,
    /// Reference image supplying the object.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Reference mask: 255 = object region.
    #[arg(long)]
    refmask: PathBuf,
    /// Guidance strength; 0 = unconditional.
    #[arg(long, default_value_t = 7.5)]
    omega: f64,
    /// Semantic/style split in [0,1]; 1 = all semantic.
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Reverse-step stochasticity in [0,1]; 0 = deterministic.
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    /// Background blending stops once t/T drops below this.
    #[arg(long, default_value_t = 0.0)]
    rho: f64,
    /// Output image path (.png or .ppm).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskgenArgs {
    /// How many masks to emit.
    #[arg(long)]
    n: usize,
    /// Mask side length in pixels.
    #[arg(long, default_value_t = 32)]
    res: usize,
    /// Output directory; files are named mask_0000.pgm onward.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint supplying the embedding model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON list of rows naming output/original/background/mask/reference/refmask.
    #[arg(long)]
    manifest: PathBuf,
    /// Where to write the CSV report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PcaArgs {
    /// Checkpoint to read the embedder from and to store the basis into.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fit on a directory of images.
    #[arg(long, conflicts_with = "procedural")]
    images: Option<PathBuf>,
    /// Fit on a generated corpus of this size.
    #[arg(long)]
    procedural: Option<usize>,
    /// Fixed number of leading components.
    #[arg(long, conflicts_with = "frac")]
    k: Option<usize>,
    /// Explained-variance target used when --k is absent.
    #[arg(long, default_value_t = 0.9)]
    frac: f64,
    /// Where to write the updated checkpoint (default: in place).
    #[arg(long)]
    out: Option<PathBuf>,
}

// ── Shared plumbing ─────────────────────────────────────────────────────────

type CliResult = Result<(), String>;

/// Flatten an error chain into a single line.
fn chain(err: &dyn std::error::Error) -> String {
    let mut line = err.to_string();
    let mut cur = err.source();
    while let Some(src) = cur {
        let s = src.to_string();
        if !line.contains(&s) {
            line.push_str(": ");
            line.push_str(&s);
        }
        cur = src.source();
    }
    line.replace('\n', "; ")
}

fn fail(err: impl std::error::Error) -> String {
    chain(&err)
}

/// The implementation is sequential; this validates the cap anyway so a
/// malformed value fails loudly instead of being silently ignored.
fn check_thread_cap() -> CliResult {
    match std::env::var("REFPAINT_THREADS") {
        Err(_) => Ok(()),
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(format!("REFPAINT_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

fn load_image_at(path: &Path, res: usize) -> Result<Tensor, String> {
    Ok(prepare_image(&load_image(path).map_err(fail)?, res))
}

fn load_mask_at(path: &Path, res: usize) -> Result<Mask, String> {
    let m = load_mask(path).map_err(fail)?;
    if (m.h(), m.w()) != (res, res) {
        return Err(format!(
            "mask {} is {}x{}, model resolution is {res}x{res}",
            path.display(),
            m.h(),
            m.w()
        ));
    }
    Ok(m)
}

fn save_image_auto(img: &Tensor, path: &Path) -> CliResult {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => save_image_png(img, path).map_err(fail),
        Some("ppm") => save_image_ppm(img, path).map_err(fail),
        _ => Err(format!("unsupported output extension for {}", path.display())),
    }
}

// ── Commands ────────────────────────────────────────────────────────────────

fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> CliResult {
    let cfg = load_config(&args.config).map_err(fail)?;
    let out_dir = args.out_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let data = cfg.load_data().map_err(fail)?;
    let run = run_training(
        cfg.model.clone(),
        cfg.schedule.clone(),
        cfg.train.clone(),
        &data,
        seed.unwrap_or(cfg.seed),
        &out_dir,
    )
    .map_err(fail)?;
    let last = run.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps on {} images, final loss {last:.6}",
        run.losses.len(),
        data.len()
    );
    println!("checkpoint: {}", run.checkpoint_path.display());
    Ok(())
}

fn cmd_inpaint(args: &InpaintArgs, seed: u64) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint).map_err(fail)?;
    let res = ckpt.model.resolution;
    let bg = load_image_at(&args.bg, res)?;
    let reference = load_image_at(&args.reference, res)?;
    let m_bg = load_mask_at(&args.mask, res)?;
    let m_o = load_mask_at(&args.refmask, res)?;
    let g = GuidanceParams {
        omega: args.omega,
        gamma: args.gamma,
        eta: args.eta,
        rho: args.rho,
    };
    let out =
        inpaint_from_checkpoint(&ckpt, &bg, &m_bg, &reference, &m_o, &g, seed).map_err(fail)?;
    save_image_auto(&out, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_maskgen(args: &MaskgenArgs, seed: u64) -> CliResult {
    if args.n == 0 {
        return Err("need --n >= 1".into());
    }
    if args.res == 0 {
        return Err("need --res >= 1".into());
    }
    fs::create_dir_all(&args.out).map_err(|e| format!("cannot create {}: {e}", args.out.display()))?;
    let params = StrokeParams::default();
    for i in 0..args.n {
        let mut rng = stream_rng(seed, &[MASKGEN_LABEL, i as u64]);
        let mask = generate_freeform(&mut rng, args.res, args.res, &params).map_err(fail)?;
        let path = args.out.join(format!("mask_{i:04}.pgm"));
        save_mask_pgm(&mask, &path).map_err(fail)?;
    }
    println!("wrote {} masks to {}", args.n, args.out.display());
    Ok(())
}

/// One scored instance: the inpainting output, the pristine original, and
/// the pieces needed to rebuild the copy-paste baseline.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    output: PathBuf,
    original: PathBuf,
    background: PathBuf,
    mask: PathBuf,
    reference: PathBuf,
    refmask: PathBuf,
}

fn cmd_eval(args: &EvalArgs, _seed: u64) -> CliResult {
    let ckpt = load_checkpoint(&args.checkpoint).map_err(fail)?;
    let model = Denoiser::from_parts(ckpt.model, ckpt.params).map_err(fail)?;
    let res = model.cfg.resolution;
    let text = fs::read_to_string(&args.manifest)
        .map_err(|e| format!("cannot read manifest {}: {e}", args.manifest.display()))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| format!("cannot parse manifest {}: {e}", args.manifest.display()))?;
    if entries.is_empty() {
        return Err("manifest lists no entries".into());
    }
    let mut report = EvalReport::new();
    for e in &entries {
        let output = load_image_at(&e.output, res)?;
        let original = load_image_at(&e.original, res)?;
        let background = load_image_at(&e.background, res)?;
        let reference = load_image_at(&e.reference, res)?;
        let m_bg = load_mask_at(&e.mask, res)?;
        let m_o = load_mask_at(&e.refmask, res)?;
        let cp = copy_paste(&background, &m_bg, &reference, &m_o).map_err(fail)?;
        let scores = eval_pair(&output, &original, &cp, &m_bg, &model).map_err(fail)?;
        report.push(e.name.clone(), scores);
    }
    fs::write(&args.out, report.to_csv())
        .map_err(|e| format!("cannot write {}: {e}", args.out.display()))?;
    println!(
        "scored {} pairs: mean_original={:.4} mean_cp_object={:.4}",
        report.len(),
        report.mean_original(),
        report.mean_cp_object()
    );
    println!("report: {}", args.out.display());
    Ok(())
}

fn cmd_pca(args: &PcaArgs, seed: u64) -> CliResult {
    let mut ckpt: Checkpoint = load_checkpoint(&args.checkpoint).map_err(fail)?;
    let model = Denoiser::from_parts(ckpt.model.clone(), ckpt.params.clone()).map_err(fail)?;
    let res = model.cfg.resolution;
    let data = match (&args.images, args.procedural) {
        (Some(dir), None) => dataset::load_dir(dir, res).map_err(fail)?,
        (None, Some(n)) if n >= 2 => dataset::procedural_corpus(seed, n, res),
        (None, Some(_)) => return Err("need --procedural >= 2 samples".into()),
        (None, None) => return Err("need an embedding corpus: --images DIR or --procedural N".into()),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    let embeddings: Vec<Tensor> = data
        .images
        .iter()
        .map(|img| embedder::encode(&model.cfg, &model.params, img).1.vec)
        .collect();
    let (pca, k) = match args.k {
        Some(k) => (fit_pca(&embeddings, k).map_err(fail)?, k),
        None => fit_pca_auto(&embeddings, args.frac).map_err(fail)?,
    };
    println!(
        "fitted basis on {} embeddings: k={k} dim={} explained={:.4}",
        embeddings.len(),
        pca.dim(),
        pca.explained_fraction()
    );
    ckpt.pca = Some(pca);
    let out = args.out.as_ref().unwrap_or(&args.checkpoint);
    save_checkpoint(out, &ckpt).map_err(fail)?;
    println!("checkpoint: {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed.unwrap_or(0);
    let result = check_thread_cap().and_then(|()| match &cli.cmd {
        Cmd::Train(a) => cmd_train(a, cli.seed),
        Cmd::Inpaint(a) => cmd_inpaint(a, seed),
        Cmd::Maskgen(a) => cmd_maskgen(a, seed),
        Cmd::Eval(a) => cmd_eval(a, seed),
        Cmd::Pca(a) => cmd_pca(a, seed),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
