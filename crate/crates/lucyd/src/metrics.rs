//! Restoration quality metrics: peak signal-to-noise ratio and a
//! volumetric structural-similarity index.
//!
//! SSIM is assembled as a tape subgraph so the same implementation serves
//! both as an evaluation metric and as a differentiable term inside the
//! training objective. Local statistics use a separable Gaussian window
//! applied in valid mode (no padding), so only fully covered voxels
//! contribute.

use crate::error::{Error, Result};
use crate::volgrid::{Kernel3d, Pad, ParamSet, Real, Tape, VarId, Volume};

/// Window and stabilization settings for [`ssim3d`].
#[derive(Clone, Copy, Debug)]
pub struct SsimParams {
    /// Odd side length of the cubic smoothing window.
    pub window_side: usize,
    /// Standard deviation of the Gaussian window taps.
    pub window_sigma: f64,
    /// Luminance stabilization factor; `c1 = (k1 * range)^2`.
    pub k1: f64,
    /// Contrast stabilization factor; `c2 = (k2 * range)^2`.
    pub k2: f64,
    /// Dynamic range of the compared volumes.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window_side: 11, window_sigma: 1.5, k1: 0.01, k2: 0.03, range: 1.0 }
    }
}

/// Peak signal-to-noise ratio in decibels, `10 log10(range^2 / mse)`,
/// with the mean squared error accumulated in f64. Identical volumes
/// yield positive infinity.
pub fn psnr<T: Real>(a: &Volume<T>, b: &Volume<T>, range: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "peak signal-to-noise ratio needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !range.is_finite() || range <= 0.0 {
        return Err(Error::invalid(format!("dynamic range must be finite and positive, got {range}")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Separable Gaussian smoothing window as a fixed single-channel kernel,
/// normalized to unit sum.
pub(crate) fn gaussian_window<T: Real>(side: usize, sigma: f64) -> Result<Kernel3d<T>> {
    if side % 2 == 0 || side == 0 {
        return Err(Error::invalid(format!("smoothing window side must be odd, got {side}")));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::invalid(format!("smoothing window sigma must be positive, got {sigma}")));
    }
    let r = (side / 2) as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / norm).collect();
    let mut weights = Vec::with_capacity(side * side * side);
    for &z in &taps {
        for &y in &taps {
            for &x in &taps {
                weights.push(T::of(z * y * x));
            }
        }
    }
    Kernel3d::from_parts(1, 1, side, side, side, weights, vec![T::zero()])
}

/// Records the structural-similarity mean of two single-channel volumes
/// onto an existing tape and returns the scalar node. The local
/// similarity map is
///
/// `((2 mu_a mu_b + c1)(2 cov + c2)) / ((mu_a^2 + mu_b^2 + c1)(var_a + var_b + c2))`
///
/// where means, variances and covariance come from the Gaussian window.
/// The ratio uses a far smaller division guard (1e-12) than the network's
/// guarded divisions: the denominator is already bounded below by
/// `c1 * c2`, and a coarser guard would visibly bias the score of dim or
/// empty volumes.
pub fn ssim3d_graph<T: Real>(tape: &mut Tape<'_, T>, a: VarId, b: VarId, p: &SsimParams) -> Result<VarId> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::shape(format!("structural similarity needs equal shapes, got {sa:?} and {sb:?}")));
    }
    if sa.0 != 1 {
        return Err(Error::shape(format!("structural similarity expects single-channel volumes, got {} channels", sa.0)));
    }
    let (d, h, w) = tape.value(a).spatial();
    if p.window_side > d || p.window_side > h || p.window_side > w {
        return Err(Error::shape(format!(
            "smoothing window side {} exceeds volume extents ({d},{h},{w})",
            p.window_side
        )));
    }
    if !p.range.is_finite() || p.range <= 0.0 {
        return Err(Error::invalid(format!("dynamic range must be finite and positive, got {}", p.range)));
    }
    let window = gaussian_window::<T>(p.window_side, p.window_sigma)?;
    let c1 = (p.k1 * p.range).powi(2);
    let c2 = (p.k2 * p.range).powi(2);

    let mu_a = tape.conv3d_fixed(a, window.clone(), 1, Pad::Valid)?;
    let mu_b = tape.conv3d_fixed(b, window.clone(), 1, Pad::Valid)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let w_aa = tape.conv3d_fixed(aa, window.clone(), 1, Pad::Valid)?;
    let w_bb = tape.conv3d_fixed(bb, window.clone(), 1, Pad::Valid)?;
    let w_ab = tape.conv3d_fixed(ab, window, 1, Pad::Valid)?;

    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(w_aa, mu_aa)?;
    let var_b = tape.sub(w_bb, mu_bb)?;
    let cov = tape.sub(w_ab, mu_ab)?;

    let lum = {
        let t = tape.scale(mu_ab, 2.0);
        tape.shift(t, c1)
    };
    let con = {
        let t = tape.scale(cov, 2.0);
        tape.shift(t, c2)
    };
    let num = tape.mul(lum, con)?;
    let lum_d = {
        let t = tape.add(mu_aa, mu_bb)?;
        tape.shift(t, c1)
    };
    let con_d = {
        let t = tape.add(var_a, var_b)?;
        tape.shift(t, c2)
    };
    let den = tape.mul(lum_d, con_d)?;
    let map = tape.div_guarded(num, den, 1e-12)?;
    Ok(tape.mean_all(map))
}

/// Structural-similarity mean of two volumes, evaluated eagerly.
pub fn ssim3d<T: Real>(a: &Volume<T>, b: &Volume<T>, p: &SsimParams) -> Result<f64> {
    let params = ParamSet::new();
    let mut tape = Tape::new(&params);
    let va = tape.leaf(a.clone());
    let vb = tape.leaf(b.clone());
    let s = ssim3d_graph(&mut tape, va, vb, p)?;
    Ok(tape.value(s).data()[0].as_f64())
}

/// Total number of learnable scalars (weights plus biases) in a
/// parameter set.
pub fn param_count<T: Real>(params: &ParamSet<T>) -> usize {
    params.iter().map(|(_, _, k)| k.param_count()).sum()
}
