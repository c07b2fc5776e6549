//! Command-line front end: phantom generation, degradation, dataset
//! assembly, training, restoration, evaluation, projection export, and
//! gradient verification.
//!
//! Every command is deterministic given its flags and seeds. Exit codes:
//! 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lucyd::classic::{gaussian_psf_axes, richardson_lucy, wiener};
use lucyd::gradcheck;
use lucyd::infer::infer;
use lucyd::io::{
    fmt_sig, project_max, read_lckp, read_lvol, write_grid_csv, write_json, write_lvol,
    write_pgm16, GridRow, ProjectionAxis,
};
use lucyd::metrics::{psnr, ssim3d, SsimParams};
use lucyd::model::ModelParams;
use lucyd::simulate::{
    build_dataset, degrade, load_dataset, mix_seed, DatasetManifest, DegradationSpec,
    PhantomKind, PhantomSpec, Regime,
};
use lucyd::train::{TrainConfig, TrainSession};
use lucyd::volgrid::Volume;
use lucyd::{Error, Result};

/// Division guard for the classic multiplicative solver, matching the
/// network's ratio clamp.
const RL_EPS: f64 = 1e-6;
/// Noise-to-signal floor used when a dataset cell carries no noise.
const NSR_FLOOR: f64 = 1e-4;
/// Reference learnable-parameter count reported alongside ours.
const REFERENCE_PARAMS: usize = 24_964;

#[derive(Parser)]
#[command(name = "lucyd", version, about = "Volumetric deconvolution: classic solvers and a learned correction network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic ground-truth phantom volumes plus a manifest.
    Gen {
        /// Object family: dots|spheres|shells.
        #[arg(long)]
        kind: String,
        /// Volume extents as `d,h,w` (one number means a cube).
        #[arg(long, default_value = "64,64,64")]
        shape: String,
        /// How many volumes to write.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Objects per volume. Defaults to the family's count for a
        /// 128-cubed volume, scaled by voxel ratio.
        #[arg(long)]
        objects: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Blur and noise one volume; writes the result and a sidecar spec.
    Degrade {
        /// Gaussian blur sigma in voxels (lateral, and axial unless overridden).
        #[arg(long = "sigma-b", default_value_t = 1.0)]
        sigma_b: f64,
        /// Separate axial blur sigma for anisotropic degradation.
        #[arg(long = "sigma-b-axial")]
        sigma_b_axial: Option<f64>,
        /// Additive Gaussian noise sigma on the 0-255 intensity scale.
        #[arg(long = "sigma-n", default_value_t = 0.0)]
        sigma_n: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a degradation-grid dataset: mixed phantoms run through every
    /// cell of a regime, with a manifest for training and evaluation.
    Dataset {
        /// train-mixed|test-grid|regime-a|regime-b.
        #[arg(long)]
        regime: String,
        /// Number of base ground-truth volumes.
        #[arg(long, default_value_t = 4)]
        volumes: usize,
        #[arg(long, default_value = "64,64,64")]
        shape: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the restoration network on a dataset manifest.
    Train {
        /// Path to a dataset `manifest.json`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Training patch extents as `d,h,w` (one number means a cube).
        #[arg(long)]
        patch: Option<String>,
        #[arg(long = "patches-per-epoch")]
        patches_per_epoch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "checkpoint-every")]
        checkpoint_every: Option<u64>,
        /// Checkpoint path (also the source when resuming).
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint at --out; flags given explicitly
        /// override the stored configuration.
        #[arg(long, default_value_t = false)]
        resume: bool,
        /// JSONL log path; defaults to the checkpoint path with a .jsonl
        /// extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Restore a degraded volume.
    Deconv {
        #[arg(long, value_enum)]
        method: Method,
        /// Blur sigma assumed by the classic solvers.
        #[arg(long = "psf-sigma", default_value_t = 1.0)]
        psf_sigma: f64,
        /// Separate axial sigma for an anisotropic assumed blur.
        #[arg(long = "psf-sigma-axial")]
        psf_sigma_axial: Option<f64>,
        /// Wiener noise-to-signal ratio.
        #[arg(long, default_value_t = 0.01)]
        nsr: f64,
        /// Multiplicative-solver iteration count.
        #[arg(long, default_value_t = 30)]
        iters: usize,
        /// Checkpoint with network weights (required for the learned method).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Tile extents for windowed network inference.
        #[arg(long, default_value = "32,32,32")]
        tile: String,
        /// Tile overlap in voxels.
        #[arg(long, default_value_t = 8)]
        overlap: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all three restoration methods over a held-out dataset and
    /// write a per-cell SSIM/PSNR grid report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Path to the dataset `manifest.json`.
        #[arg(long)]
        data: PathBuf,
        /// CSV report path.
        #[arg(long)]
        report: PathBuf,
        /// Directory for restored volumes; defaults to `<report dir>/eval_volumes`.
        #[arg(long = "volumes-out")]
        volumes_out: Option<PathBuf>,
        /// Multiplicative-baseline iteration count.
        #[arg(long, default_value_t = 30)]
        iters: usize,
    },
    /// Write a maximum-intensity projection as a 16-bit PGM image.
    Project {
        #[arg(long = "in")]
        input: PathBuf,
        /// lateral (collapse depth) or axial (collapse height).
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// ops (isolated operations), full (whole network + loss), or both
        /// when omitted. A sign-flip canary always runs.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Wiener,
    Rl,
    Lucyd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    Lateral,
    Axial,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Ops,
    Full,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // parse problems are usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { kind, shape, count, objects, seed, out } => {
            cmd_gen(&kind, &shape, count, objects, seed, &out)
        }
        Command::Degrade { sigma_b, sigma_b_axial, sigma_n, seed, input, out } => {
            cmd_degrade(sigma_b, sigma_b_axial, sigma_n, seed, &input, &out)
        }
        Command::Dataset { regime, volumes, shape, seed, out } => {
            cmd_dataset(&regime, volumes, &shape, seed, &out)
        }
        Command::Train {
            data,
            epochs,
            lr,
            batch,
            patch,
            patches_per_epoch,
            seed,
            checkpoint_every,
            out,
            resume,
            log,
        } => cmd_train(TrainFlags {
            data,
            epochs,
            lr,
            batch,
            patch,
            patches_per_epoch,
            seed,
            checkpoint_every,
            out,
            resume,
            log,
        }),
        Command::Deconv {
            method,
            psf_sigma,
            psf_sigma_axial,
            nsr,
            iters,
            ckpt,
            tile,
            overlap,
            input,
            out,
        } => cmd_deconv(method, psf_sigma, psf_sigma_axial, nsr, iters, ckpt, &tile, overlap, &input, &out),
        Command::Eval { ckpt, data, report, volumes_out, iters } => {
            cmd_eval(&ckpt, &data, &report, volumes_out, iters)
        }
        Command::Project { input, axis, out } => cmd_project(&input, axis, &out),
        Command::Gradcheck { seed, mode } => cmd_gradcheck(seed, mode),
    }
}

/// Parses `d,h,w` extents; a single number means a cube.
fn parse_triple(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse_one = |p: &str| -> Result<usize> {
        p.trim()
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("'{p}' is not a non-negative integer in extents '{s}'")))
    };
    match parts.as_slice() {
        [one] => {
            let n = parse_one(one)?;
            Ok((n, n, n))
        }
        [d, h, w] => Ok((parse_one(d)?, parse_one(h)?, parse_one(w)?)),
        _ => Err(Error::invalid(format!("extents '{s}' must be one number or `d,h,w`"))),
    }
}

#[derive(Serialize, Deserialize)]
struct GenManifest {
    kind: String,
    shape: (usize, usize, usize),
    seed: u64,
    entries: Vec<GenEntry>,
}

#[derive(Serialize, Deserialize)]
struct GenEntry {
    file: String,
    spec: PhantomSpec,
}

fn cmd_gen(kind: &str, shape: &str, count: usize, objects: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let kind = PhantomKind::parse(kind)?;
    let shape = parse_triple(shape)?;
    if count == 0 {
        return Err(Error::invalid("--count must be at least 1".to_string()));
    }
    let voxel_ratio = (shape.0 * shape.1 * shape.2) as f64 / (128.0 * 128.0 * 128.0);
    let objects =
        objects.unwrap_or(((kind.default_count() as f64 * voxel_ratio).round() as usize).max(1));
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let spec = PhantomSpec::new(kind, shape, objects, mix_seed(seed, i as u64));
        let vol: Volume<f32> = lucyd::simulate::generate_phantom(&spec)?;
        let file = format!("{kind}_{i:03}.lvol");
        write_lvol(&out.join(&file), &vol)?;
        println!("wrote {}", out.join(&file).display());
        entries.push(GenEntry { file, spec });
    }
    let manifest = GenManifest { kind: kind.to_string(), shape, seed, entries };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("manifest: {}", out.join("manifest.json").display());
    Ok(())
}

fn cmd_degrade(
    sigma_b: f64,
    sigma_b_axial: Option<f64>,
    sigma_n: f64,
    seed: u64,
    input: &Path,
    out: &Path,
) -> Result<()> {
    let spec = DegradationSpec { sigma_b, sigma_b_axial, sigma_n, seed };
    let x = read_lvol(input)?;
    let y = degrade(&x, &spec)?;
    write_lvol(out, &y)?;
    write_json(&out.with_extension("meta.json"), &spec)?;
    println!(
        "wrote {} (sigma_b={}, sigma_n={}, seed={})",
        out.display(),
        fmt_sig(sigma_b),
        fmt_sig(sigma_n),
        seed
    );
    Ok(())
}

fn cmd_dataset(regime: &str, volumes: usize, shape: &str, seed: u64, out: &Path) -> Result<()> {
    let regime = Regime::parse(regime)?;
    let shape = parse_triple(shape)?;
    let manifest = build_dataset(regime, volumes, shape, seed, out)?;
    println!(
        "dataset {}: {} base volumes x {} cells -> {}",
        regime,
        volumes,
        manifest.entries.len() / volumes,
        out.display()
    );
    Ok(())
}

struct TrainFlags {
    data: PathBuf,
    epochs: Option<u64>,
    lr: Option<f64>,
    batch: Option<usize>,
    patch: Option<String>,
    patches_per_epoch: Option<usize>,
    seed: Option<u64>,
    checkpoint_every: Option<u64>,
    out: PathBuf,
    resume: bool,
    log: Option<PathBuf>,
}

fn cmd_train(flags: TrainFlags) -> Result<()> {
    let (_, pairs) = load_dataset(&flags.data)?;
    let mut session = if flags.resume {
        TrainSession::resume(&flags.out)?
    } else {
        TrainSession::new(TrainConfig::default())?
    };
    // Explicit flags win over defaults and over a resumed configuration.
    let cfg = &mut session.config;
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.patches_per_epoch {
        cfg.patches_per_epoch = v;
    }
    if let Some(v) = flags.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(p) = &flags.patch {
        cfg.patch = parse_triple(p)?;
    }
    if let Some(v) = flags.seed {
        if flags.resume {
            return Err(Error::invalid(
                "--seed cannot change on resume; the model is already initialized".to_string(),
            ));
        }
        cfg.seed = v;
        session.model = ModelParams::init(v);
    }
    session.config.validate()?;

    println!("parameters: {} (reference {})", session.model.param_count(), REFERENCE_PARAMS);
    let log = flags.log.clone().unwrap_or_else(|| flags.out.with_extension("jsonl"));
    if !flags.resume && log.exists() {
        // A fresh run owns its log; stale lines would break the
        // one-line-per-epoch contract.
        std::fs::remove_file(&log)?;
    }
    let total = session.config.epochs;
    let mut on_epoch = |s: &lucyd::train::EpochStats| {
        println!(
            "epoch {}/{}  loss {:.6}  val_ssim {:.4}  val_psnr {:.2}  ({:.1}s)",
            s.epoch, total, s.loss, s.val_ssim, s.val_psnr, s.wall_seconds
        );
    };
    session.run(&pairs, &flags.out, Some(&log), Some(&mut on_epoch))?;
    println!("checkpoint: {}", flags.out.display());
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<ModelParams<f32>> {
    let (_, _, tensors) = read_lckp(ckpt)?;
    ModelParams::from_tensors(&tensors)
}

#[allow(clippy::too_many_arguments)]
fn cmd_deconv(
    method: Method,
    psf_sigma: f64,
    psf_sigma_axial: Option<f64>,
    nsr: f64,
    iters: usize,
    ckpt: Option<PathBuf>,
    tile: &str,
    overlap: usize,
    input: &Path,
    out: &Path,
) -> Result<()> {
    let y = read_lvol(input)?;
    let restored = match method {
        Method::Wiener => {
            let psf = assumed_psf(psf_sigma, psf_sigma_axial)?;
            wiener(&y, &psf, nsr)?
        }
        Method::Rl => {
            if y.data().iter().any(|&v| v < 0.0) {
                return Err(Error::invalid(
                    "the multiplicative solver needs non-negative input intensities".to_string(),
                ));
            }
            let psf = assumed_psf(psf_sigma, psf_sigma_axial)?;
            richardson_lucy(&y, &psf, iters, RL_EPS)?
        }
        Method::Lucyd => {
            let ckpt = ckpt.ok_or_else(|| {
                Error::invalid("--method lucyd needs --ckpt with trained weights".to_string())
            })?;
            let model = load_model(&ckpt)?;
            infer(&model, &y, parse_triple(tile)?, overlap)?
        }
    };
    write_lvol(out, &restored)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn assumed_psf(sigma: f64, sigma_axial: Option<f64>) -> Result<Volume<f32>> {
    gaussian_psf_axes(sigma_axial.unwrap_or(sigma), sigma, sigma)
}

/// One evaluation output volume and where its inputs came from, so the
/// report can be recomputed from files alone.
#[derive(Serialize, Deserialize)]
struct EvalEntry {
    file: String,
    method: String,
    sigma_b: f64,
    sigma_n: f64,
    gt: String,
    degraded: String,
}

#[derive(Serialize, Deserialize)]
struct EvalManifest {
    dataset: String,
    iters: usize,
    entries: Vec<EvalEntry>,
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    report: &Path,
    volumes_out: Option<PathBuf>,
    iters: usize,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let (manifest, pairs) = load_dataset(data)?;
    let vol_dir = volumes_out.unwrap_or_else(|| {
        report.parent().unwrap_or_else(|| Path::new(".")).join("eval_volumes")
    });
    std::fs::create_dir_all(&vol_dir)?;

    let cells = eval_cells(&manifest);
    if cells.is_empty() {
        return Err(Error::invalid("dataset has no test-split entries to evaluate".to_string()));
    }
    let mut rows = Vec::with_capacity(cells.len());
    let mut eval_entries = Vec::new();
    for (ci, (cell, entry_idx)) in cells.iter().enumerate() {
        let mut sums = MethodSums::default();
        for (vi, &ei) in entry_idx.iter().enumerate() {
            let pair = &pairs[ei];
            let gt = &pair.gt;
            let y = &pair.degraded;
            let psf = assumed_psf(cell.sigma_b, cell.sigma_b_axial)?;
            let nsr = estimate_nsr(y, cell.sigma_n);

            sums.input.add(score(y, gt)?);
            let mut save = |name: &str, restored: &Volume<f32>| -> Result<()> {
                let file = format!("c{ci}_v{vi}_{name}.lvol");
                write_lvol(&vol_dir.join(&file), restored)?;
                eval_entries.push(EvalEntry {
                    file,
                    method: name.to_string(),
                    sigma_b: cell.sigma_b,
                    sigma_n: cell.sigma_n,
                    gt: manifest.entries[ei].gt.clone(),
                    degraded: manifest.entries[ei].degraded.clone(),
                });
                Ok(())
            };

            let w = wiener(y, &psf, nsr)?;
            sums.wiener.add(score(&w, gt)?);
            save("wiener", &w)?;
            let r = richardson_lucy(y, &psf, iters, RL_EPS)?;
            sums.rl.add(score(&r, gt)?);
            save("rl", &r)?;
            let l = infer(&model, y, (32, 32, 32), 8)?;
            sums.lucyd.add(score(&l, gt)?);
            save("lucyd", &l)?;
        }
        rows.push(GridRow {
            sigma_b: cell.sigma_b,
            sigma_n: cell.sigma_n,
            input: sums.input.mean(),
            wiener: sums.wiener.mean(),
            rl: sums.rl.mean(),
            lucyd: sums.lucyd.mean(),
        });
    }
    write_grid_csv(report, &rows)?;
    write_json(
        &vol_dir.join("eval_manifest.json"),
        &EvalManifest { dataset: data.display().to_string(), iters, entries: eval_entries },
    )?;
    println!("sigma_b  sigma_n  input           wiener          rl              lucyd");
    for r in &rows {
        let pair = |(s, p): (f64, f64)| format!("{}/{}", fmt_sig(s), fmt_sig(p));
        println!(
            "{:<8} {:<8} {:<15} {:<15} {:<15} {:<15}",
            fmt_sig(r.sigma_b),
            fmt_sig(r.sigma_n),
            pair(r.input),
            pair(r.wiener),
            pair(r.rl),
            pair(r.lucyd)
        );
    }
    println!("report: {}", report.display());
    Ok(())
}

/// Test-split entries grouped into degradation cells, ordered by
/// (blur, noise) ascending.
fn eval_cells(manifest: &DatasetManifest) -> Vec<(DegradationSpec, Vec<usize>)> {
    let mut cells: Vec<(DegradationSpec, Vec<usize>)> = Vec::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.split != "test" {
            continue;
        }
        let d = e.degradation;
        match cells.iter_mut().find(|(c, _)| {
            c.sigma_b == d.sigma_b && c.sigma_b_axial == d.sigma_b_axial && c.sigma_n == d.sigma_n
        }) {
            Some((_, idx)) => idx.push(i),
            None => cells.push((d, vec![i])),
        }
    }
    cells.sort_by(|(a, _), (b, _)| {
        (a.sigma_b, a.sigma_n).partial_cmp(&(b.sigma_b, b.sigma_n)).expect("finite sigmas")
    });
    cells
}

/// Noise power over measured signal power, floored for noise-free cells.
fn estimate_nsr(y: &Volume<f32>, sigma_n: f64) -> f64 {
    let power: f64 =
        y.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / y.len() as f64;
    (sigma_n * sigma_n / power.max(1e-12)).max(NSR_FLOOR)
}

/// SSIM and PSNR of a restored volume against ground truth on the 0-1
/// intensity scale.
fn score(restored: &Volume<f32>, gt: &Volume<f32>) -> Result<(f64, f64)> {
    let a = restored.map(|v| v / 255.0);
    let b = gt.map(|v| v / 255.0);
    Ok((ssim3d(&a, &b, &SsimParams::default())?, psnr(&a, &b, 1.0)?))
}

#[derive(Default)]
struct MeanAcc {
    ssim: f64,
    psnr: f64,
    n: usize,
}

impl MeanAcc {
    fn add(&mut self, (ssim, psnr): (f64, f64)) {
        self.ssim += ssim;
        self.psnr += psnr;
        self.n += 1;
    }

    fn mean(&self) -> (f64, f64) {
        (self.ssim / self.n as f64, self.psnr / self.n as f64)
    }
}

#[derive(Default)]
struct MethodSums {
    input: MeanAcc,
    wiener: MeanAcc,
    rl: MeanAcc,
    lucyd: MeanAcc,
}

fn cmd_project(input: &Path, axis: Axis, out: &Path) -> Result<()> {
    let v = read_lvol(input)?;
    let axis = match axis {
        Axis::Lateral => ProjectionAxis::Lateral,
        Axis::Axial => ProjectionAxis::Axial,
    };
    let (rows, cols, pixels) = project_max(&v, axis)?;
    write_pgm16(out, rows, cols, &pixels)?;
    println!("wrote {} ({rows}x{cols})", out.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, mode: Option<Mode>) -> Result<()> {
    let mut reports = Vec::new();
    if mode != Some(Mode::Full) {
        reports.extend(gradcheck::check_ops(seed)?);
    }
    if mode != Some(Mode::Ops) {
        reports.extend(gradcheck::check_full(seed)?);
    }
    let mut failures = 0;
    for r in &reports {
        println!(
            "{}: max rel err {:.3e} (tol {:.0e}) {}",
            r.name,
            r.max_rel_err,
            r.tol,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failures += 1;
        }
    }
    let canary = gradcheck::sign_flip_canary(seed)?;
    let detected = !canary.passed();
    println!(
        "{}: rel err {:.3e} — wrong gradient {}",
        canary.name,
        canary.max_rel_err,
        if detected { "detected" } else { "NOT DETECTED" }
    );
    if !detected {
        return Err(Error::numerical(
            "sign-flip canary passed the tolerance; the checker cannot see wrong gradients".to_string(),
        ));
    }
    if failures > 0 {
        return Err(Error::numerical(format!(
            "{failures} of {} gradient comparisons exceeded tolerance",
            reports.len()
        )));
    }
    println!("gradient check: all {} comparisons passed", reports.len());
    Ok(())
}
