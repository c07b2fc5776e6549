//! Central finite-difference verification of every differentiable operation.
//!
//! Each check builds a small graph around one operation, scalarizes the
//! output as `mean(out²)` so every element contributes to the gradient, and
//! compares the tape's reverse-mode gradients against central differences in
//! 64-bit arithmetic. Inputs are probed on an even stride (a few dozen
//! entries per case); learnable kernels are probed exhaustively — they are
//! tiny. The relative error uses `|a - n| / max(1, |a| + |n|)`, which behaves
//! like absolute error for near-zero gradients instead of blowing up.
//!
//! The full-network mode drives the complete restoration model plus its
//! training loss at a smoothness-conditioned parameter point (the learned
//! blur's bias is raised so its channel mean clears the division guard;
//! near the clamp, curvature of order `1/b³` drowns finite differences in
//! truncation error without indicating a wrong gradient).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::metrics::{ssim3d_graph, SsimParams};
use crate::model::{loss_graph, ModelParams};
use crate::simulate::mix_seed;
use crate::volgrid::{Kernel3d, Pad, ParamId, ParamSet, Tape, VarId, Volume};
use crate::Result;

/// Pass threshold for isolated-operation checks.
pub const OPS_TOL: f64 = 1e-5;
/// Pass threshold for the full network + loss check.
pub const FULL_TOL: f64 = 1e-4;

/// Upper bound on probed input entries per case; kernels are always probed
/// in full.
const MAX_INPUT_PROBES: usize = 96;

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs() + numeric.abs())
}

fn random_volume(rng: &mut ChaCha8Rng, c: usize, d: usize, h: usize, w: usize, lo: f64, hi: f64) -> Volume<f64> {
    let data = (0..c * d * h * w).map(|_| rng.random_range(lo..hi)).collect();
    Volume::from_vec(c, d, h, w, data).expect("shape matches data length")
}

/// Checks input and kernel gradients of `build`'s graph against central
/// differences. `build` receives the leaf for `x0` and must return the
/// variable to scalarize.
fn check_graph(
    name: &str,
    tol: f64,
    params: &mut ParamSet<f64>,
    x0: &Volume<f64>,
    build: &dyn Fn(&mut Tape<'_, f64>, VarId) -> Result<VarId>,
) -> Result<OpReport> {
    let eval = |params: &ParamSet<f64>, x: &Volume<f64>| -> Result<f64> {
        let mut tape = Tape::new(params);
        let leaf = tape.leaf(x.clone());
        let out = build(&mut tape, leaf)?;
        let sq = tape.mul(out, out)?;
        let s = tape.mean_all(sq);
        Ok(tape.value(s).at(0, 0, 0, 0))
    };

    let (input_grad, kernel_grads) = {
        let mut tape = Tape::new(params);
        let leaf = tape.leaf(x0.clone());
        let out = build(&mut tape, leaf)?;
        let sq = tape.mul(out, out)?;
        let s = tape.mean_all(sq);
        let mut grads = tape.backward(s)?;
        let input = grads.var(leaf).cloned();
        let kernels: Vec<Option<Kernel3d<f64>>> =
            (0..params.len()).map(|i| grads.take_kernel(ParamId(i))).collect();
        (input, kernels)
    };

    let mut worst = 0.0f64;

    // Probe input entries on an even stride.
    let stride = (x0.len() / MAX_INPUT_PROBES).max(1);
    let mut x = x0.clone();
    for i in (0..x0.len()).step_by(stride) {
        let orig = x0.data()[i];
        let h = 1e-6 * (1.0 + orig.abs());
        x.data_mut()[i] = orig + h;
        let up = eval(params, &x)?;
        x.data_mut()[i] = orig - h;
        let down = eval(params, &x)?;
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = input_grad.as_ref().map_or(0.0, |g| g.data()[i]);
        worst = worst.max(rel_err(analytic, numeric));
    }

    // Probe every kernel weight and bias.
    for pi in 0..params.len() {
        let n_weights = params.kernel(ParamId(pi)).weights().len();
        let n_bias = params.kernel(ParamId(pi)).bias().len();
        for j in 0..n_weights + n_bias {
            let orig = if j < n_weights {
                params.kernel(ParamId(pi)).weights()[j]
            } else {
                params.kernel(ParamId(pi)).bias()[j - n_weights]
            };
            let h = 1e-6 * (1.0 + orig.abs());
            let set = |params: &mut ParamSet<f64>, v: f64| {
                let k = params.kernel_mut(ParamId(pi));
                if j < n_weights {
                    k.weights_mut()[j] = v;
                } else {
                    k.bias_mut()[j - n_weights] = v;
                }
            };
            set(params, orig + h);
            let up = eval(params, x0)?;
            set(params, orig - h);
            let down = eval(params, x0)?;
            set(params, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = kernel_grads[pi].as_ref().map_or(0.0, |g| {
                if j < n_weights {
                    g.weights()[j]
                } else {
                    g.bias()[j - n_weights]
                }
            });
            worst = worst.max(rel_err(analytic, numeric));
        }
    }

    Ok(OpReport { name: name.to_string(), max_rel_err: worst, tol })
}

fn random_kernel(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Kernel3d<f64> {
    let n = c_out * c_in * k * k * k;
    let weights = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let bias = (0..c_out).map(|_| rng.random_range(-0.2..0.2)).collect();
    Kernel3d::from_parts(c_out, c_in, k, k, k, weights, bias).expect("consistent kernel shape")
}

/// Finite-difference checks for each differentiable operation in isolation.
pub fn check_ops(seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut empty = ParamSet::new();

    // Convolution in every stride/padding mode, including kernel gradients.
    for (name, stride, pad, k) in [
        ("conv3d(stride 1, same)", 1usize, Pad::SameZero, 3usize),
        ("conv3d(stride 2, same)", 2, Pad::SameZero, 3),
        ("conv3d(stride 1, valid)", 1, Pad::Valid, 2),
        ("conv3d(stride 2, valid)", 2, Pad::Valid, 2),
    ] {
        let mut params = ParamSet::new();
        let pid = params.insert("k", random_kernel(&mut rng, 3, 2, k));
        let x0 = random_volume(&mut rng, 2, 5, 6, 7, -1.0, 1.0);
        reports.push(check_graph(name, OPS_TOL, &mut params, &x0, &|tape, x| {
            tape.conv3d(x, pid, stride, pad)
        })?);
    }

    {
        let x0 = random_volume(&mut rng, 3, 3, 4, 5, -1.0, 1.0);
        reports.push(check_graph("upsample2x", OPS_TOL, &mut empty, &x0, &|tape, x| {
            Ok(tape.upsample2x(x))
        })?);
    }
    {
        let x0 = random_volume(&mut rng, 2, 4, 4, 4, -1.0, 1.0);
        reports.push(check_graph("concat_channels", OPS_TOL, &mut empty, &x0, &|tape, x| {
            let doubled = tape.scale(x, 2.0);
            tape.concat(x, doubled)
        })?);
    }
    {
        let x0 = random_volume(&mut rng, 1, 4, 5, 6, -1.0, 1.0);
        reports.push(check_graph("add", OPS_TOL, &mut empty, &x0, &|tape, x| {
            let other = tape.scale(x, 0.7);
            tape.add(x, other)
        })?);
        reports.push(check_graph("sub", OPS_TOL, &mut empty, &x0, &|tape, x| {
            let other = tape.scale(x, -1.3);
            tape.sub(x, other)
        })?);
        reports.push(check_graph("mul", OPS_TOL, &mut empty, &x0, &|tape, x| {
            let other = tape.shift(x, 0.5);
            tape.mul(x, other)
        })?);
    }
    {
        // Smooth division: the denominator stays far above the guard.
        let x0 = random_volume(&mut rng, 1, 4, 5, 6, 0.0, 1.0);
        reports.push(check_graph("div_guarded(smooth)", OPS_TOL, &mut empty, &x0, &|tape, x| {
            let denom = tape.scale(x, 0.5);
            let denom = tape.shift(denom, 2.0);
            tape.div_guarded(x, denom, 1e-6)
        })?);
        // Clamped division: the denominator sits entirely below the guard, so
        // the quotient is constant in it and both gradients must agree on 0.
        reports.push(check_graph("div_guarded(clamped)", OPS_TOL, &mut empty, &x0, &|tape, x| {
            let denom = tape.scale(x, 1e-8);
            tape.div_guarded(x, denom, 1e-6)
        })?);
    }
    {
        // Magnitudes in ±[0.1, 1.1]: bounded away from the rectifier kink,
        // where the two-sided difference would straddle the slope change.
        let raw = random_volume(&mut rng, 2, 4, 5, 5, -1.0, 1.0);
        let x0 = raw.map(|v| v.signum() * (v.abs() + 0.1));
        reports.push(check_graph("leaky_relu", OPS_TOL, &mut empty, &x0, &|tape, x| {
            Ok(tape.leaky_relu(x, 0.1))
        })?);
    }
    {
        let x0 = random_volume(&mut rng, 4, 3, 4, 5, -1.0, 1.0);
        reports.push(check_graph("channel_mean", OPS_TOL, &mut empty, &x0, &|tape, x| {
            Ok(tape.channel_mean(x))
        })?);
    }
    {
        let x0 = random_volume(&mut rng, 1, 4, 5, 6, -1.0, 1.0);
        reports.push(check_graph("mean_all", OPS_TOL, &mut empty, &x0, &|tape, x| {
            Ok(tape.mean_all(x))
        })?);
        reports.push(check_graph("scale", OPS_TOL, &mut empty, &x0, &|tape, x| {
            Ok(tape.scale(x, -2.5))
        })?);
        reports.push(check_graph("shift", OPS_TOL, &mut empty, &x0, &|tape, x| {
            Ok(tape.shift(x, 1.5))
        })?);
    }
    {
        let x0 = random_volume(&mut rng, 1, 4, 5, 6, 0.5, 1.5);
        reports.push(check_graph("ln", OPS_TOL, &mut empty, &x0, &|tape, x| Ok(tape.ln(x)))?);
    }
    {
        // Structural similarity as a differentiable graph against a fixed
        // reference volume.
        let x0 = random_volume(&mut rng, 1, 12, 12, 12, 0.0, 1.0);
        let reference = random_volume(&mut rng, 1, 12, 12, 12, 0.0, 1.0);
        reports.push(check_graph("ssim3d", OPS_TOL, &mut empty, &x0, &|tape, x| {
            let b = tape.leaf(reference.clone());
            ssim3d_graph(tape, x, b, &SsimParams::default())
        })?);
    }
    Ok(reports)
}

/// Finite-difference check of the full network plus training loss, reported
/// per layer (plus the input gradient).
pub fn check_full(seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
    let mut model: ModelParams<f64> = ModelParams::init(seed);
    {
        // Condition the test point: keep the learned blur's channel mean
        // clear of the division guard (see module docs).
        let fp = model.params().by_name("fp.conv").expect("fp.conv exists");
        model.params_mut().kernel_mut(fp).bias_mut().fill(1.0);
    }
    let y = random_volume(&mut rng, 1, 12, 12, 12, 0.3, 1.0);
    let target = random_volume(&mut rng, 1, 12, 12, 12, 0.0, 1.0);

    let eval = |model: &ModelParams<f64>, input: &Volume<f64>| -> Result<f64> {
        let mut tape = Tape::new(model.params());
        let yv = tape.leaf(input.clone());
        let tv = tape.leaf(target.clone());
        let trace = model.forward(&mut tape, yv)?;
        let parts = loss_graph(&mut tape, trace.output, tv)?;
        Ok(tape.value(parts.loss).at(0, 0, 0, 0))
    };

    let (input_grad, kernel_grads) = {
        let mut tape = Tape::new(model.params());
        let yv = tape.leaf(y.clone());
        let tv = tape.leaf(target.clone());
        let trace = model.forward(&mut tape, yv)?;
        let parts = loss_graph(&mut tape, trace.output, tv)?;
        let mut grads = tape.backward(parts.loss)?;
        let input = grads.var(yv).cloned();
        let kernels: Vec<Option<Kernel3d<f64>>> =
            (0..model.params().len()).map(|i| grads.take_kernel(ParamId(i))).collect();
        (input, kernels)
    };

    let mut reports = Vec::new();

    // Input gradient on a handful of voxels.
    {
        let mut worst = 0.0f64;
        let mut x = y.clone();
        for i in (0..y.len()).step_by(y.len() / 24) {
            let orig = y.data()[i];
            let h = 1e-6 * (1.0 + orig.abs());
            x.data_mut()[i] = orig + h;
            let up = eval(&model, &x)?;
            x.data_mut()[i] = orig - h;
            let down = eval(&model, &x)?;
            x.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = input_grad.as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max(rel_err(analytic, numeric));
        }
        reports.push(OpReport { name: "full(input)".to_string(), max_rel_err: worst, tol: FULL_TOL });
    }

    // A few weights and one bias per layer.
    for pi in 0..model.params().len() {
        let name = format!("full({})", model.params().name(ParamId(pi)));
        let n_weights = model.params().kernel(ParamId(pi)).weights().len();
        let mut probes: Vec<usize> = (0..3).map(|t| (t * n_weights) / 3).collect();
        probes.push(n_weights); // first bias entry
        let mut worst = 0.0f64;
        for &j in &probes {
            let read = |m: &ModelParams<f64>| {
                let k = m.params().kernel(ParamId(pi));
                if j < n_weights { k.weights()[j] } else { k.bias()[j - n_weights] }
            };
            let orig = read(&model);
            let h = 1e-6 * (1.0 + orig.abs());
            let set = |m: &mut ModelParams<f64>, v: f64| {
                let k = m.params_mut().kernel_mut(ParamId(pi));
                if j < n_weights {
                    k.weights_mut()[j] = v;
                } else {
                    k.bias_mut()[j - n_weights] = v;
                }
            };
            set(&mut model, orig + h);
            let up = eval(&model, &y)?;
            set(&mut model, orig - h);
            let down = eval(&model, &y)?;
            set(&mut model, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = kernel_grads[pi].as_ref().map_or(0.0, |g| {
                if j < n_weights { g.weights()[j] } else { g.bias()[j - n_weights] }
            });
            worst = worst.max(rel_err(analytic, numeric));
        }
        reports.push(OpReport { name, max_rel_err: worst, tol: FULL_TOL });
    }
    Ok(reports)
}

/// Self-test proving the checker can see a wrong gradient: compares a
/// deliberately sign-flipped analytic gradient against finite differences.
/// The returned report must FAIL its tolerance; if it passes, the harness
/// has lost its teeth.
pub fn sign_flip_canary(seed: u64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    let mut params = ParamSet::new();
    let pid = params.insert("k", random_kernel(&mut rng, 2, 1, 3));
    let x0 = random_volume(&mut rng, 1, 4, 5, 6, 0.2, 1.0);

    let eval = |params: &ParamSet<f64>, x: &Volume<f64>| -> Result<f64> {
        let mut tape = Tape::new(params);
        let leaf = tape.leaf(x.clone());
        let out = tape.conv3d(leaf, pid, 1, Pad::SameZero)?;
        let sq = tape.mul(out, out)?;
        let s = tape.mean_all(sq);
        Ok(tape.value(s).at(0, 0, 0, 0))
    };

    let analytic = {
        let mut tape = Tape::new(&params);
        let leaf = tape.leaf(x0.clone());
        let out = tape.conv3d(leaf, pid, 1, Pad::SameZero)?;
        let sq = tape.mul(out, out)?;
        let s = tape.mean_all(sq);
        let grads = tape.backward(s)?;
        grads.kernel(pid).expect("kernel participated").weights()[0]
    };

    let orig = params.kernel(pid).weights()[0];
    let h = 1e-6 * (1.0 + orig.abs());
    params.kernel_mut(pid).weights_mut()[0] = orig + h;
    let up = eval(&params, &x0)?;
    params.kernel_mut(pid).weights_mut()[0] = orig - h;
    let down = eval(&params, &x0)?;
    params.kernel_mut(pid).weights_mut()[0] = orig;
    let numeric = (up - down) / (2.0 * h);

    // The sabotage: report the negated analytic gradient.
    Ok(OpReport {
        name: "canary(sign flip)".to_string(),
        max_rel_err: rel_err(-analytic, numeric),
        tol: OPS_TOL,
    })
}
