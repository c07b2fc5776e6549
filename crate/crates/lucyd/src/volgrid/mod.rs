//! Dense volumetric tensors and the reverse-mode tape that differentiates
//! the small operation set the restoration network is built from.
//!
//! Storage is CDHW row-major (channel, depth, height, width) with `w`
//! contiguous. Everything is generic over [`Real`] so the same kernels run
//! in `f32` for training and in `f64` shadow mode for gradient checks.

mod ops;
mod tape;

pub use ops::{conv3d, Pad};
pub use tape::{EwiseOp, Gradients, Tape, VarId};

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Scalar type for volumes and kernels: `f32` in production, `f64` in
/// shadow mode.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + rustfft::FftNum
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense rank-4 volume in CDHW order. Immutable once produced by an op.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn zeros(c: usize, d: usize, h: usize, w: usize) -> Self {
        Volume { c, d, h, w, data: vec![T::zero(); c * d * h * w] }
    }

    pub fn filled(c: usize, d: usize, h: usize, w: usize, value: T) -> Self {
        Volume { c, d, h, w, data: vec![value; c * d * h * w] }
    }

    pub fn from_vec(c: usize, d: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * d * h * w {
            return Err(Error::shape(format!(
                "volume data length {} does not match shape ({c},{d},{h},{w})",
                data.len()
            )));
        }
        Ok(Volume { c, d, h, w, data })
    }

    /// Scalar volume of shape (1,1,1,1).
    pub fn scalar(value: T) -> Self {
        Volume { c: 1, d: 1, h: 1, w: 1, data: vec![value] }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.c, self.d, self.h, self.w)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn spatial(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn index_of(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.d + z) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, z: usize, y: usize, x: usize) -> T {
        self.data[self.index_of(c, z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, z: usize, y: usize, x: usize, v: T) {
        let i = self.index_of(c, z, y, x);
        self.data[i] = v;
    }

    /// Contiguous row along the w axis.
    #[inline]
    pub fn row(&self, c: usize, z: usize, y: usize) -> &[T] {
        let start = self.index_of(c, z, y, 0);
        &self.data[start..start + self.w]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize, z: usize, y: usize) -> &mut [T] {
        let start = self.index_of(c, z, y, 0);
        let w = self.w;
        &mut self.data[start..start + w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume {
            c: self.c,
            d: self.d,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Sum in f64 so large volumes do not lose mass to rounding.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn convert<U: Real>(&self) -> Volume<U> {
        Volume {
            c: self.c,
            d: self.d,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Aligned crop of all channels at the given spatial offset.
    pub fn crop(&self, z0: usize, y0: usize, x0: usize, d: usize, h: usize, w: usize) -> Result<Self> {
        if z0 + d > self.d || y0 + h > self.h || x0 + w > self.w {
            return Err(Error::shape(format!(
                "crop ({d},{h},{w}) at ({z0},{y0},{x0}) exceeds volume {:?}",
                self.shape()
            )));
        }
        let mut out = Volume::zeros(self.c, d, h, w);
        for c in 0..self.c {
            for z in 0..d {
                for y in 0..h {
                    let src = self.index_of(c, z0 + z, y0 + y, x0);
                    let dst = out.index_of(c, z, y, 0);
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        Ok(out)
    }
}

/// Learnable 3D convolution kernel with per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel3d<T> {
    c_out: usize,
    c_in: usize,
    kd: usize,
    kh: usize,
    kw: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> Kernel3d<T> {
    pub fn zeros(c_out: usize, c_in: usize, kd: usize, kh: usize, kw: usize) -> Self {
        Kernel3d {
            c_out,
            c_in,
            kd,
            kh,
            kw,
            weights: vec![T::zero(); c_out * c_in * kd * kh * kw],
            bias: vec![T::zero(); c_out],
        }
    }

    pub fn from_parts(
        c_out: usize,
        c_in: usize,
        kd: usize,
        kh: usize,
        kw: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if weights.len() != c_out * c_in * kd * kh * kw {
            return Err(Error::shape(format!(
                "kernel weights length {} does not match ({c_out},{c_in},{kd},{kh},{kw})",
                weights.len()
            )));
        }
        if bias.len() != c_out {
            return Err(Error::shape(format!(
                "kernel bias length {} does not match c_out {c_out}",
                bias.len()
            )));
        }
        Ok(Kernel3d { c_out, c_in, kd, kh, kw, weights, bias })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize, usize) {
        (self.c_out, self.c_in, self.kd, self.kh, self.kw)
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn spatial(&self) -> (usize, usize, usize) {
        (self.kd, self.kh, self.kw)
    }

    pub fn is_odd(&self) -> bool {
        self.kd % 2 == 1 && self.kh % 2 == 1 && self.kw % 2 == 1
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, dz: usize, dy: usize, dx: usize) -> usize {
        (((o * self.c_in + i) * self.kd + dz) * self.kh + dy) * self.kw + dx
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn convert<U: Real>(&self) -> Kernel3d<U> {
        Kernel3d {
            c_out: self.c_out,
            c_in: self.c_in,
            kd: self.kd,
            kh: self.kh,
            kw: self.kw,
            weights: self.weights.iter().map(|v| U::of(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named collection of learnable kernels. The tape records `ParamId`s so
/// gradients can be routed back to the owning kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: Vec<(String, Kernel3d<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, kernel: Kernel3d<T>) -> ParamId {
        self.entries.push((name.into(), kernel));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn kernel(&self, id: ParamId) -> &Kernel3d<T> {
        &self.entries[id.0].1
    }

    pub fn kernel_mut(&mut self, id: ParamId) -> &mut Kernel3d<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Kernel3d<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, k))| (ParamId(i), n.as_str(), k))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn convert<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, k)| (n.clone(), k.convert::<U>()))
                .collect(),
        }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}
