//! Frequency-domain deconvolution baselines: Gaussian point-spread
//! synthesis, circular FFT convolution, Wiener filtering and
//! Richardson-Lucy iteration.
//!
//! All routines operate on single-channel volumes and treat boundaries as
//! periodic, which keeps blur, restoration and their adjoints exactly
//! consistent with each other.

use crate::error::{Error, Result};
use crate::volgrid::{Real, Volume};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

/// Isotropic Gaussian point-spread function. Taps are sampled at voxel
/// centers, truncated at radius `ceil(3 sigma)` per axis and normalized
/// to unit sum; `sigma == 0` degenerates to a single-voxel delta.
pub fn gaussian_psf<T: Real>(sigma: f64) -> Result<Volume<T>> {
    gaussian_psf_axes(sigma, sigma, sigma)
}

/// Gaussian point-spread function with independent widths for the axial
/// (z) and both lateral (y, x) axes.
pub fn gaussian_psf_aniso<T: Real>(sigma_axial: f64, sigma_lateral: f64) -> Result<Volume<T>> {
    gaussian_psf_axes(sigma_axial, sigma_lateral, sigma_lateral)
}

/// Fully per-axis separable Gaussian point-spread function.
pub fn gaussian_psf_axes<T: Real>(sigma_z: f64, sigma_y: f64, sigma_x: f64) -> Result<Volume<T>> {
    let tz = axis_taps(sigma_z)?;
    let ty = axis_taps(sigma_y)?;
    let tx = axis_taps(sigma_x)?;
    let (d, h, w) = (tz.len(), ty.len(), tx.len());
    let mut psf = Volume::zeros(1, d, h, w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                psf.set(0, z, y, x, T::of(tz[z] * ty[y] * tx[x]));
            }
        }
    }
    Ok(psf)
}

fn axis_taps(sigma: f64) -> Result<Vec<f64>> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::invalid(format!("point-spread sigma must be finite and non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

/// Three separable 1-D FFT passes over a complex buffer in DHW order.
/// The inverse transform folds in the `1/N` normalization.
struct Fft3<T: Real> {
    d: usize,
    h: usize,
    w: usize,
    fwd: [Arc<dyn Fft<T>>; 3],
    inv: [Arc<dyn Fft<T>>; 3],
}

impl<T: Real> Fft3<T> {
    fn new(d: usize, h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = [
            planner.plan_fft(d, FftDirection::Forward),
            planner.plan_fft(h, FftDirection::Forward),
            planner.plan_fft(w, FftDirection::Forward),
        ];
        let inv = [
            planner.plan_fft(d, FftDirection::Inverse),
            planner.plan_fft(h, FftDirection::Inverse),
            planner.plan_fft(w, FftDirection::Inverse),
        ];
        Fft3 { d, h, w, fwd, inv }
    }

    fn apply(&self, buf: &mut [Complex<T>], plans: &[Arc<dyn Fft<T>>; 3]) {
        let (d, h, w) = (self.d, self.h, self.w);
        for row in buf.chunks_exact_mut(w) {
            plans[2].process(row);
        }
        let mut scratch = vec![Complex::default(); h.max(d)];
        for z in 0..d {
            for x in 0..w {
                for y in 0..h {
                    scratch[y] = buf[(z * h + y) * w + x];
                }
                plans[1].process(&mut scratch[..h]);
                for y in 0..h {
                    buf[(z * h + y) * w + x] = scratch[y];
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                for z in 0..d {
                    scratch[z] = buf[(z * h + y) * w + x];
                }
                plans[0].process(&mut scratch[..d]);
                for z in 0..d {
                    buf[(z * h + y) * w + x] = scratch[z];
                }
            }
        }
    }

    fn forward(&self, buf: &mut [Complex<T>]) {
        self.apply(buf, &self.fwd);
    }

    fn inverse(&self, buf: &mut [Complex<T>]) {
        self.apply(buf, &self.inv);
        let scale = T::one() / T::of((self.d * self.h * self.w) as f64);
        for v in buf.iter_mut() {
            *v = *v * scale;
        }
    }
}

fn check_psf_against<T: Real>(y: &Volume<T>, psf: &Volume<T>) -> Result<()> {
    if y.channels() != 1 || psf.channels() != 1 {
        return Err(Error::shape(format!(
            "frequency-domain routines take single-channel volumes, got {} and {} channels",
            y.channels(),
            psf.channels()
        )));
    }
    let (pd, ph, pw) = psf.spatial();
    if pd % 2 == 0 || ph % 2 == 0 || pw % 2 == 0 {
        return Err(Error::invalid(format!("point-spread extents must be odd, got ({pd},{ph},{pw})")));
    }
    let (d, h, w) = y.spatial();
    if pd > d || ph > h || pw > w {
        return Err(Error::shape(format!(
            "point-spread extents ({pd},{ph},{pw}) exceed volume extents ({d},{h},{w})"
        )));
    }
    Ok(())
}

fn to_complex<T: Real>(v: &Volume<T>) -> Vec<Complex<T>> {
    v.data().iter().map(|&r| Complex::new(r, T::zero())).collect()
}

fn real_part<T: Real>(buf: &[Complex<T>], d: usize, h: usize, w: usize) -> Volume<T> {
    Volume::from_vec(1, d, h, w, buf.iter().map(|c| c.re).collect()).expect("buffer sized to shape")
}

/// Zero-pads the point-spread function to the volume extent with its
/// center tap wrapped to the origin, so circular convolution leaves
/// features in place.
fn embed_psf_wrapped<T: Real>(psf: &Volume<T>, d: usize, h: usize, w: usize) -> Vec<Complex<T>> {
    let (pd, ph, pw) = psf.spatial();
    let (cz, cy, cx) = ((pd / 2) as isize, (ph / 2) as isize, (pw / 2) as isize);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); d * h * w];
    for z in 0..pd {
        let tz = (z as isize - cz).rem_euclid(d as isize) as usize;
        for y in 0..ph {
            let ty = (y as isize - cy).rem_euclid(h as isize) as usize;
            for x in 0..pw {
                let tx = (x as isize - cx).rem_euclid(w as isize) as usize;
                buf[(tz * h + ty) * w + tx] = Complex::new(psf.at(0, z, y, x), T::zero());
            }
        }
    }
    buf
}

/// Circular convolution of a single-channel volume with a centered
/// point-spread function, computed in the frequency domain.
pub fn fft_convolve<T: Real>(x: &Volume<T>, psf: &Volume<T>) -> Result<Volume<T>> {
    check_psf_against(x, psf)?;
    let (d, h, w) = x.spatial();
    let fft = Fft3::new(d, h, w);
    let mut xf = to_complex(x);
    fft.forward(&mut xf);
    let mut pf = embed_psf_wrapped(psf, d, h, w);
    fft.forward(&mut pf);
    for (xv, pv) in xf.iter_mut().zip(&pf) {
        *xv = *xv * *pv;
    }
    fft.inverse(&mut xf);
    Ok(real_part(&xf, d, h, w))
}

/// Wiener deconvolution with a scalar noise-to-signal ratio:
/// `X = conj(P) Y / (|P|^2 + nsr)`. With `nsr == 0` this is the plain
/// inverse filter.
pub fn wiener<T: Real>(y: &Volume<T>, psf: &Volume<T>, nsr: f64) -> Result<Volume<T>> {
    check_psf_against(y, psf)?;
    if !nsr.is_finite() || nsr < 0.0 {
        return Err(Error::invalid(format!("noise-to-signal ratio must be finite and non-negative, got {nsr}")));
    }
    let (d, h, w) = y.spatial();
    let fft = Fft3::new(d, h, w);
    let mut yf = to_complex(y);
    fft.forward(&mut yf);
    let mut pf = embed_psf_wrapped(psf, d, h, w);
    fft.forward(&mut pf);
    let nsr = T::of(nsr);
    for (yv, pv) in yf.iter_mut().zip(&pf) {
        let denom = pv.norm_sqr() + nsr;
        *yv = pv.conj() * *yv / denom;
    }
    fft.inverse(&mut yf);
    Ok(real_part(&yf, d, h, w))
}

/// Richardson-Lucy iteration with a fixed iteration count:
///
/// `z_k = z_{k-1} * ((y / (z_{k-1} (*) K)) (*) flip(K))`
///
/// where `(*)` is circular convolution. The blur and its adjoint are
/// applied through one precomputed transfer function; the inner division
/// clamps its denominator at `eps`, and the multiplicative update is
/// clamped at zero so non-negative inputs stay non-negative despite
/// frequency-domain round-off.
pub fn richardson_lucy<T: Real>(y: &Volume<T>, psf: &Volume<T>, iters: usize, eps: f64) -> Result<Volume<T>> {
    check_psf_against(y, psf)?;
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::invalid(format!("division guard must be finite and positive, got {eps}")));
    }
    let (d, h, w) = y.spatial();
    let fft = Fft3::new(d, h, w);
    let mut otf = embed_psf_wrapped(psf, d, h, w);
    fft.forward(&mut otf);

    let eps = T::of(eps);
    let zero = T::zero();
    let mut z: Vec<T> = y.data().to_vec();
    let mut buf = vec![Complex::new(zero, zero); z.len()];
    for _ in 0..iters {
        // Forward blur of the current estimate.
        for (b, &v) in buf.iter_mut().zip(&z) {
            *b = Complex::new(v, zero);
        }
        fft.forward(&mut buf);
        for (b, o) in buf.iter_mut().zip(&otf) {
            *b = *b * *o;
        }
        fft.inverse(&mut buf);
        // Guarded ratio against the observation, then the adjoint blur.
        for (b, &obs) in buf.iter_mut().zip(y.data()) {
            let denom = if b.re > eps { b.re } else { eps };
            *b = Complex::new(obs / denom, zero);
        }
        fft.forward(&mut buf);
        for (b, o) in buf.iter_mut().zip(&otf) {
            *b = *b * o.conj();
        }
        fft.inverse(&mut buf);
        for (v, b) in z.iter_mut().zip(&buf) {
            let update = if b.re > zero { b.re } else { zero };
            *v = *v * update;
        }
    }
    Volume::from_vec(1, d, h, w, z)
}
