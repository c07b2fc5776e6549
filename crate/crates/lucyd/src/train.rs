//! Patch-based training loop with an adaptive-moment optimizer.
//!
//! A [`TrainSession`] owns the model and its configuration, consumes aligned
//! (degraded, ground-truth) volume pairs, and runs a fixed number of epochs.
//! Each epoch draws a fresh shuffled set of aligned crops whose RNG stream is
//! derived from the session seed and the epoch index, so any epoch — and
//! therefore the whole run — is reproducible bit for bit. Volumes arrive on
//! the 0–255 intensity scale and are normalized to [0, 1] before they hit the
//! network; the loss and the validation metrics operate on that scale.
//!
//! Checkpoints capture the parameters, the configuration, the finished epoch,
//! and the metric history, and a run can resume from one, continuing the epoch
//! numbering. Optimizer moments are deliberately not checkpointed: a resumed
//! run re-warms them, trading a few transition steps for a much smaller and
//! simpler file. Per-epoch wall time goes only to the JSON-lines log, never
//! into the checkpoint, so checkpoints stay byte-identical across reruns.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::io::{append_jsonl, read_lckp, write_lckp};
use crate::model::{loss_graph, ModelParams, MIN_EXTENT};
use crate::simulate::{mix_seed, sample_patches, LoadedPair};
use crate::volgrid::{Kernel3d, ParamId, ParamSet, Real, Tape, Volume};
use crate::{Error, Result};

/// Side of the structural-similarity window; training patches must admit at
/// least one valid window position per axis.
const SSIM_WINDOW: usize = 11;

/// Hyper-parameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub patches_per_epoch: usize,
    pub patch: (usize, usize, usize),
    pub seed: u64,
    /// Save a checkpoint every this many epochs (the final epoch always saves).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            batch_size: 4,
            patches_per_epoch: 200,
            patch: (32, 32, 32),
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid(format!(
                "optimizer epsilon must be positive, got {}",
                self.adam_eps
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_epoch == 0 {
            return Err(Error::invalid(
                "epochs, batch size, and patches per epoch must all be positive".to_string(),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint cadence must be positive".to_string()));
        }
        let (pd, ph, pw) = self.patch;
        let floor = SSIM_WINDOW.max(MIN_EXTENT) + 1; // smallest even extent ≥ both
        for (axis, n) in [("depth", pd), ("height", ph), ("width", pw)] {
            if n % 2 != 0 || n < floor {
                return Err(Error::invalid(format!(
                    "patch {axis} must be even and at least {floor}, got {n}"
                )));
            }
        }
        Ok(())
    }
}

/// One epoch's results, as written to the JSON-lines log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub loss: f64,
    pub val_ssim: f64,
    pub val_psnr: f64,
    pub wall_seconds: f64,
}

/// The deterministic subset of [`EpochStats`] stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub loss: f64,
    pub val_ssim: f64,
    pub val_psnr: f64,
}

impl From<&EpochStats> for EpochRecord {
    fn from(s: &EpochStats) -> Self {
        EpochRecord { epoch: s.epoch, loss: s.loss, val_ssim: s.val_ssim, val_psnr: s.val_psnr }
    }
}

/// Everything a checkpoint stores besides the tensors and the epoch counter.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    train: TrainConfig,
    /// Describes how per-epoch RNG streams derive from the seed, so a resumed
    /// run can reproduce them without raw generator state.
    rng: String,
    history: Vec<EpochRecord>,
}

/// Adaptive-moment optimizer (decoupled first/second moment estimates with
/// bias correction, no weight decay).
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    m: Vec<Kernel3d<T>>,
    v: Vec<Kernel3d<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, cfg: &TrainConfig) -> Adam<T> {
        let zeros_like = |k: &Kernel3d<T>| {
            let (c_out, c_in, kd, kh, kw) = k.shape();
            Kernel3d::zeros(c_out, c_in, kd, kh, kw)
        };
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            steps: 0,
            m: params.iter().map(|(_, _, k)| zeros_like(k)).collect(),
            v: params.iter().map(|(_, _, k)| zeros_like(k)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from gradients aligned with the parameter set.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Kernel3d<T>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient/parameter set mismatch");
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let (ic1, ic2) = (T::of(1.0 / c1), T::of(1.0 / c2));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for i in 0..self.m.len() {
            let param = params.kernel_mut(ParamId(i));
            let update = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
                for j in 0..p.len() {
                    m[j] = b1 * m[j] + ob1 * g[j];
                    v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                    let m_hat = m[j] * ic1;
                    let v_hat = v[j] * ic2;
                    p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            };
            update(
                param.weights_mut(),
                grads[i].weights(),
                self.m[i].weights_mut(),
                self.v[i].weights_mut(),
            );
            update(param.bias_mut(), grads[i].bias(), self.m[i].bias_mut(), self.v[i].bias_mut());
        }
    }
}

/// Accumulates gradients over `batch`, applies one optimizer step, and
/// returns the mean loss over the batch. Patches must already be normalized
/// to [0, 1] and ordered (degraded, ground truth).
pub fn step_batch(
    model: &mut ModelParams<f32>,
    adam: &mut Adam<f32>,
    batch: &[(Volume<f32>, Volume<f32>)],
) -> Result<f64> {
    assert!(!batch.is_empty(), "cannot step on an empty batch");
    let mut acc: Vec<Kernel3d<f32>> = model
        .params()
        .iter()
        .map(|(_, _, k)| {
            let (c_out, c_in, kd, kh, kw) = k.shape();
            Kernel3d::zeros(c_out, c_in, kd, kh, kw)
        })
        .collect();
    let mut loss_sum = 0.0f64;
    for (degraded, gt) in batch {
        let mut tape = Tape::new(model.params());
        let yv = tape.leaf(degraded.clone());
        let tv = tape.leaf(gt.clone());
        let trace = model.forward(&mut tape, yv)?;
        let parts = loss_graph(&mut tape, trace.output, tv)?;
        let loss = tape.value(parts.loss).at(0, 0, 0, 0).as_f64();
        if !loss.is_finite() {
            let diag = tape
                .first_non_finite()
                .map(|(id, op)| format!("; first non-finite tensor from op '{op}' (node {})", id.index()))
                .unwrap_or_default();
            return Err(Error::numerical(format!("non-finite training loss{diag}")));
        }
        loss_sum += loss;
        let grads = tape.backward(parts.loss)?;
        if !grads.all_finite() {
            return Err(Error::numerical(
                "non-finite gradient during backward pass".to_string(),
            ));
        }
        for (i, slot) in acc.iter_mut().enumerate() {
            if let Some(g) = grads.kernel(ParamId(i)) {
                for (a, &b) in slot.weights_mut().iter_mut().zip(g.weights()) {
                    *a += b;
                }
                for (a, &b) in slot.bias_mut().iter_mut().zip(g.bias()) {
                    *a += b;
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    for k in &mut acc {
        for w in k.weights_mut() {
            *w *= inv;
        }
        for b in k.bias_mut() {
            *b *= inv;
        }
    }
    adam.step(model.params_mut(), &acc);
    Ok(loss_sum / batch.len() as f64)
}

/// Normalizes a 0–255 volume to [0, 1].
fn normalized(v: &Volume<f32>) -> Volume<f32> {
    v.map(|x| x / 255.0)
}

/// Mean SSIM / PSNR of the model over center crops of the given pairs.
fn validate_pairs(
    model: &ModelParams<f32>,
    pairs: &[(Volume<f32>, Volume<f32>)],
    patch: (usize, usize, usize),
) -> Result<(f64, f64)> {
    let mut ssim_sum = 0.0;
    let mut psnr_sum = 0.0;
    for (degraded, gt) in pairs {
        let (d, h, w) = degraded.spatial();
        let (cd, ch, cw) = (patch.0.min(d), patch.1.min(h), patch.2.min(w));
        let (z0, y0, x0) = ((d - cd) / 2, (h - ch) / 2, (w - cw) / 2);
        let deg_crop = degraded.crop(z0, y0, x0, cd, ch, cw)?;
        let gt_crop = gt.crop(z0, y0, x0, cd, ch, cw)?;
        let mut tape = Tape::new(model.params());
        let yv = tape.leaf(deg_crop);
        let trace = model.forward(&mut tape, yv)?;
        let restored = tape.value(trace.output).map(|x| x.max(0.0));
        ssim_sum += crate::metrics::ssim3d(&restored, &gt_crop, &Default::default())?;
        psnr_sum += crate::metrics::psnr(&restored, &gt_crop, 1.0)?;
    }
    let n = pairs.len() as f64;
    Ok((ssim_sum / n, psnr_sum / n))
}

/// A training run: model, configuration, progress so far.
pub struct TrainSession {
    pub config: TrainConfig,
    pub model: ModelParams<f32>,
    pub start_epoch: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainSession {
    /// Fresh session with a model initialized from the config seed.
    pub fn new(config: TrainConfig) -> Result<TrainSession> {
        config.validate()?;
        let model = ModelParams::init(config.seed);
        Ok(TrainSession { config, model, start_epoch: 0, history: Vec::new() })
    }

    /// Continues from a checkpoint: parameters, config, epoch counter, and
    /// history all come from the file. Optimizer moments restart from zero.
    pub fn resume(ckpt: &Path) -> Result<TrainSession> {
        let (config, epoch, tensors) = read_lckp(ckpt)?;
        let meta: CheckpointMeta = serde_json::from_value(config).map_err(|e| {
            Error::format(format!("checkpoint config does not describe a training run: {e}"))
        })?;
        let model = ModelParams::from_tensors(&tensors)?;
        Ok(TrainSession { config: meta.train, model, start_epoch: epoch, history: meta.history })
    }

    fn save(&self, path: &Path, epoch: u64) -> Result<()> {
        let meta = CheckpointMeta {
            train: self.config.clone(),
            rng: "chacha8(mix(seed, epoch)) per epoch".to_string(),
            history: self.history.clone(),
        };
        let config = serde_json::to_value(&meta)
            .map_err(|e| Error::format(format!("could not serialize checkpoint config: {e}")))?;
        write_lckp(path, &config, epoch, &self.model.to_tensors())
    }

    /// Runs the remaining epochs, saving checkpoints to `ckpt_path`, appending
    /// one JSON line per epoch to `log_path`, and reporting each finished
    /// epoch through `on_epoch`.
    pub fn run(
        &mut self,
        pairs: &[LoadedPair],
        ckpt_path: &Path,
        log_path: Option<&Path>,
        mut on_epoch: Option<&mut dyn FnMut(&EpochStats)>,
    ) -> Result<()> {
        self.config.validate()?;
        let train_set: Vec<(Volume<f32>, Volume<f32>)> = pairs
            .iter()
            .filter(|p| p.split == "train")
            .map(|p| (normalized(&p.degraded), normalized(&p.gt)))
            .collect();
        if train_set.is_empty() {
            return Err(Error::invalid(
                "dataset has no training-split volume pairs".to_string(),
            ));
        }
        let mut val_set: Vec<(Volume<f32>, Volume<f32>)> = pairs
            .iter()
            .filter(|p| p.split == "val")
            .map(|p| (normalized(&p.degraded), normalized(&p.gt)))
            .collect();
        if val_set.is_empty() {
            // Without a held-out split, validation metrics track training data.
            val_set = train_set.clone();
        }
        // Validating on every pair each epoch would dwarf the actual training
        // work; a fixed, deterministic subset tracks progress just as well.
        val_set.truncate(8);

        let mut adam = Adam::new(self.model.params(), &self.config);
        for epoch in self.start_epoch..self.config.epochs {
            let started = Instant::now();
            let epoch_seed = mix_seed(self.config.seed, epoch);
            let patches = sample_patches(
                &train_set,
                self.config.patch,
                self.config.patches_per_epoch,
                epoch_seed,
            )?;
            let mut loss_sum = 0.0;
            for batch in patches.chunks(self.config.batch_size) {
                loss_sum += step_batch(&mut self.model, &mut adam, batch)? * batch.len() as f64;
            }
            let loss = loss_sum / patches.len() as f64;
            let (val_ssim, val_psnr) = validate_pairs(&self.model, &val_set, self.config.patch)?;
            let stats = EpochStats {
                epoch: epoch + 1,
                loss,
                val_ssim,
                val_psnr,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            self.history.push(EpochRecord::from(&stats));
            if let Some(log) = log_path {
                append_jsonl(log, &stats)?;
            }
            if let Some(cb) = on_epoch.as_deref_mut() {
                cb(&stats);
            }
            let done = epoch + 1;
            if done % self.config.checkpoint_every == 0 || done == self.config.epochs {
                self.save(ckpt_path, done)?;
            }
        }
        if self.start_epoch >= self.config.epochs {
            // Nothing left to run; still make sure the checkpoint exists.
            self.save(ckpt_path, self.start_epoch)?;
        }
        Ok(())
    }
}
