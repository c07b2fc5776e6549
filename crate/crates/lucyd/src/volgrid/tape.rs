//! Reverse-mode differentiation over an append-only arena of volume ops.
//!
//! Every operation appends a node holding its output value and enough
//! provenance to replay the adjoint. [`Tape::backward`] walks the arena
//! once in reverse, accumulating gradients for every upstream node and
//! for every learnable kernel that participated.

use super::ops::{
    channel_mean, concat_channels, conv3d, conv3d_backward_input, conv3d_backward_kernel, mean_all,
    upsample_nearest2x, upsample_nearest2x_backward,
};
use super::{Kernel3d, Pad, ParamId, ParamSet, Real, Volume};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

impl VarId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Element-wise binary operations. Division clamps its denominator at
/// `eps` from below; gradients through the denominator vanish wherever
/// the clamp is active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EwiseOp {
    Add,
    Sub,
    Mul,
    DivGuarded(f64),
}

enum KernelRef<T> {
    Param(ParamId),
    Fixed(Kernel3d<T>),
}

enum Record<T> {
    Leaf,
    Conv3d { x: VarId, kernel: KernelRef<T>, stride: usize, pad: Pad },
    Upsample2x { x: VarId },
    ConcatChannels { a: VarId, b: VarId },
    Ewise { op: EwiseOp, a: VarId, b: VarId },
    LeakyRelu { x: VarId, slope: T },
    ChannelMean { x: VarId },
    MeanAll { x: VarId },
    Scale { x: VarId, k: T },
    Shift { x: VarId },
    Ln { x: VarId },
}

struct Node<T> {
    value: Volume<T>,
    rec: Record<T>,
}

/// Gradients produced by one backward pass: kernel gradients aligned with
/// the parameter set, and per-node gradients for inspection of leaves.
pub struct Gradients<T> {
    kernels: Vec<Option<Kernel3d<T>>>,
    vars: Vec<Option<Volume<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn kernel(&self, id: ParamId) -> Option<&Kernel3d<T>> {
        self.kernels[id.index()].as_ref()
    }

    pub fn var(&self, id: VarId) -> Option<&Volume<T>> {
        self.vars[id.0].as_ref()
    }

    pub fn take_kernel(&mut self, id: ParamId) -> Option<Kernel3d<T>> {
        self.kernels[id.index()].take()
    }

    /// True when every recorded gradient is finite.
    pub fn all_finite(&self) -> bool {
        self.kernels.iter().flatten().all(|k| {
            k.weights().iter().all(|v| v.is_finite()) && k.bias().iter().all(|v| v.is_finite())
        }) && self.vars.iter().flatten().all(|v| v.all_finite())
    }
}

/// Recording arena for one forward pass.
pub struct Tape<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: Volume<T>, rec: Record<T>) -> VarId {
        self.nodes.push(Node { value, rec });
        VarId(self.nodes.len() - 1)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: VarId) -> &Volume<T> {
        &self.nodes[id.0].value
    }

    /// Index and operation name of the first node whose value contains a
    /// non-finite entry, if any. Used to attribute numerical blow-ups.
    pub fn first_non_finite(&self) -> Option<(VarId, &'static str)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.all_finite() {
                None
            } else {
                Some((VarId(i), op_name(&n.rec)))
            }
        })
    }

    pub fn leaf(&mut self, value: Volume<T>) -> VarId {
        self.push(value, Record::Leaf)
    }

    pub fn conv3d(&mut self, x: VarId, kernel: ParamId, stride: usize, pad: Pad) -> Result<VarId> {
        let out = conv3d(self.value(x), self.params.kernel(kernel), stride, pad)?;
        Ok(self.push(out, Record::Conv3d { x, kernel: KernelRef::Param(kernel), stride, pad }))
    }

    /// Convolution with a constant (non-learnable) kernel, e.g. a
    /// smoothing window. No kernel gradient is produced.
    pub fn conv3d_fixed(&mut self, x: VarId, kernel: Kernel3d<T>, stride: usize, pad: Pad) -> Result<VarId> {
        let out = conv3d(self.value(x), &kernel, stride, pad)?;
        Ok(self.push(out, Record::Conv3d { x, kernel: KernelRef::Fixed(kernel), stride, pad }))
    }

    pub fn upsample2x(&mut self, x: VarId) -> VarId {
        let out = upsample_nearest2x(self.value(x));
        self.push(out, Record::Upsample2x { x })
    }

    pub fn concat(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Record::ConcatChannels { a, b }))
    }

    fn ewise(&mut self, op: EwiseOp, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "element-wise operands differ in shape: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = match op {
            EwiseOp::Add => va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect(),
            EwiseOp::Sub => va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect(),
            EwiseOp::Mul => va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
            EwiseOp::DivGuarded(eps) => {
                let eps = T::of(eps);
                va.data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| x / if y > eps { y } else { eps })
                    .collect()
            }
        };
        let (c, d, h, w) = va.shape();
        let out = Volume::from_vec(c, d, h, w, data)?;
        Ok(self.push(out, Record::Ewise { op, a, b }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.ewise(EwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.ewise(EwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.ewise(EwiseOp::Mul, a, b)
    }

    /// `a / max(b, eps)` element-wise.
    pub fn div_guarded(&mut self, a: VarId, b: VarId, eps: f64) -> Result<VarId> {
        self.ewise(EwiseOp::DivGuarded(eps), a, b)
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> VarId {
        let slope = T::of(slope);
        let out = self.value(x).map(|v| if v >= T::zero() { v } else { slope * v });
        self.push(out, Record::LeakyRelu { x, slope })
    }

    pub fn channel_mean(&mut self, x: VarId) -> VarId {
        let out = channel_mean(self.value(x));
        self.push(out, Record::ChannelMean { x })
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let out = mean_all(self.value(x));
        self.push(out, Record::MeanAll { x })
    }

    pub fn scale(&mut self, x: VarId, k: f64) -> VarId {
        let k = T::of(k);
        let out = self.value(x).map(|v| k * v);
        self.push(out, Record::Scale { x, k })
    }

    pub fn shift(&mut self, x: VarId, k: f64) -> VarId {
        let k = T::of(k);
        let out = self.value(x).map(|v| v + k);
        self.push(out, Record::Shift { x })
    }

    pub fn ln(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(|v| v.ln());
        self.push(out, Record::Ln { x })
    }

    /// Reverse sweep seeding `d loss / d loss = 1`. The target must be a
    /// scalar node (for example a [`Tape::mean_all`] output).
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads = Gradients {
            kernels: (0..self.params.len()).map(|_| None).collect(),
            vars: (0..self.nodes.len()).map(|_| None).collect(),
        };
        grads.vars[loss.0] = Some(Volume::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads.vars[i].clone() else { continue };
            match &self.nodes[i].rec {
                Record::Leaf => {}
                Record::Conv3d { x, kernel, stride, pad } => {
                    let k = match kernel {
                        KernelRef::Param(id) => self.params.kernel(*id),
                        KernelRef::Fixed(k) => k,
                    };
                    let gx = conv3d_backward_input(self.value(*x).shape(), k, *stride, *pad, &g);
                    accumulate(&mut grads.vars[x.0], gx);
                    if let KernelRef::Param(id) = kernel {
                        let gk = conv3d_backward_kernel(self.value(*x), k, *stride, *pad, &g);
                        accumulate_kernel(&mut grads.kernels[id.index()], gk);
                    }
                }
                Record::Upsample2x { x } => {
                    let gx = upsample_nearest2x_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads.vars[x.0], gx);
                }
                Record::ConcatChannels { a, b } => {
                    let (ca, (d, h, w)) = (self.value(*a).channels(), self.value(*a).spatial());
                    let cb = self.value(*b).channels();
                    let split = ca * d * h * w;
                    let ga = Volume::from_vec(ca, d, h, w, g.data()[..split].to_vec())?;
                    let gb = Volume::from_vec(cb, d, h, w, g.data()[split..].to_vec())?;
                    accumulate(&mut grads.vars[a.0], ga);
                    accumulate(&mut grads.vars[b.0], gb);
                }
                Record::Ewise { op, a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (ga, gb) = match op {
                        EwiseOp::Add => (g.clone(), g.clone()),
                        EwiseOp::Sub => (g.clone(), g.map(|v| -v)),
                        EwiseOp::Mul => (
                            zip_map(&g, vb, |gi, y| gi * y),
                            zip_map(&g, va, |gi, x| gi * x),
                        ),
                        EwiseOp::DivGuarded(eps) => {
                            let eps = T::of(*eps);
                            let ga = zip_map(&g, vb, |gi, y| gi / if y > eps { y } else { eps });
                            let gb = zip3_map(&g, va, vb, |gi, x, y| {
                                if y > eps {
                                    -gi * x / (y * y)
                                } else {
                                    T::zero()
                                }
                            });
                            (ga, gb)
                        }
                    };
                    accumulate(&mut grads.vars[a.0], ga);
                    accumulate(&mut grads.vars[b.0], gb);
                }
                Record::LeakyRelu { x, slope } => {
                    let gx = zip_map(&g, self.value(*x), |gi, v| {
                        if v >= T::zero() {
                            gi
                        } else {
                            gi * *slope
                        }
                    });
                    accumulate(&mut grads.vars[x.0], gx);
                }
                Record::ChannelMean { x } => {
                    let (c, d, h, w) = self.value(*x).shape();
                    let inv = T::one() / T::of(c as f64);
                    let mut gx = Volume::zeros(c, d, h, w);
                    let voxels = d * h * w;
                    for ch in 0..c {
                        let dst = &mut gx.data_mut()[ch * voxels..(ch + 1) * voxels];
                        for (t, gi) in dst.iter_mut().zip(g.data()) {
                            *t = *gi * inv;
                        }
                    }
                    accumulate(&mut grads.vars[x.0], gx);
                }
                Record::MeanAll { x } => {
                    let (c, d, h, w) = self.value(*x).shape();
                    let gi = g.data()[0] / T::of(self.value(*x).len() as f64);
                    accumulate(&mut grads.vars[x.0], Volume::filled(c, d, h, w, gi));
                }
                Record::Scale { x, k } => {
                    let k = *k;
                    accumulate(&mut grads.vars[x.0], g.map(|v| v * k));
                }
                Record::Shift { x } => {
                    accumulate(&mut grads.vars[x.0], g.clone());
                }
                Record::Ln { x } => {
                    let gx = zip_map(&g, self.value(*x), |gi, v| gi / v);
                    accumulate(&mut grads.vars[x.0], gx);
                }
            }
        }
        Ok(grads)
    }
}

fn op_name<T>(rec: &Record<T>) -> &'static str {
    match rec {
        Record::Leaf => "leaf",
        Record::Conv3d { .. } => "conv3d",
        Record::Upsample2x { .. } => "upsample2x",
        Record::ConcatChannels { .. } => "concat",
        Record::Ewise { op: EwiseOp::Add, .. } => "add",
        Record::Ewise { op: EwiseOp::Sub, .. } => "sub",
        Record::Ewise { op: EwiseOp::Mul, .. } => "mul",
        Record::Ewise { op: EwiseOp::DivGuarded(_), .. } => "div_guarded",
        Record::LeakyRelu { .. } => "leaky_relu",
        Record::ChannelMean { .. } => "channel_mean",
        Record::MeanAll { .. } => "mean_all",
        Record::Scale { .. } => "scale",
        Record::Shift { .. } => "shift",
        Record::Ln { .. } => "ln",
    }
}

fn accumulate<T: Real>(slot: &mut Option<Volume<T>>, add: Volume<T>) {
    match slot {
        None => *slot = Some(add),
        Some(g) => {
            for (t, s) in g.data_mut().iter_mut().zip(add.data()) {
                *t += *s;
            }
        }
    }
}

fn accumulate_kernel<T: Real>(slot: &mut Option<Kernel3d<T>>, add: Kernel3d<T>) {
    match slot {
        None => *slot = Some(add),
        Some(g) => {
            for (t, s) in g.weights_mut().iter_mut().zip(add.weights()) {
                *t += *s;
            }
            for (t, s) in g.bias_mut().iter_mut().zip(add.bias()) {
                *t += *s;
            }
        }
    }
}

fn zip_map<T: Real>(a: &Volume<T>, b: &Volume<T>, f: impl Fn(T, T) -> T) -> Volume<T> {
    let (c, d, h, w) = a.shape();
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Volume::from_vec(c, d, h, w, data).expect("shapes already checked")
}

fn zip3_map<T: Real>(a: &Volume<T>, b: &Volume<T>, c: &Volume<T>, f: impl Fn(T, T, T) -> T) -> Volume<T> {
    let (ch, d, h, w) = a.shape();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Volume::from_vec(ch, d, h, w, data).expect("shapes already checked")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_volume(rng: &mut StdRng, c: usize, d: usize, h: usize, w: usize) -> Volume<f64> {
        Volume::from_vec(c, d, h, w, (0..c * d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn fill_kernel(rng: &mut StdRng, k: &mut Kernel3d<f64>) {
        for w in k.weights_mut() {
            *w = rng.random_range(-0.5..0.5);
        }
        for b in k.bias_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_target() {
        let params = ParamSet::<f32>::new();
        let mut tape = Tape::new(&params);
        let x = tape.leaf(Volume::filled(1, 2, 2, 2, 1.0));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn square_mean_gradient_is_closed_form() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let v = Volume::from_vec(1, 1, 2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let x = tape.leaf(v.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.var(x).unwrap();
        for (g, v) in gx.data().iter().zip(v.data()) {
            assert!((g - 2.0 * v / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn guarded_division_clamps_value_and_gradient() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let a = tape.leaf(Volume::from_vec(1, 1, 1, 2, vec![1.0, 1.0]).unwrap());
        let b = tape.leaf(Volume::from_vec(1, 1, 1, 2, vec![2.0, 1e-9]).unwrap());
        let q = tape.div_guarded(a, b, 1e-6).unwrap();
        assert!((tape.value(q).data()[0] - 0.5).abs() < 1e-15);
        assert!((tape.value(q).data()[1] - 1e6).abs() < 1e-3);
        let loss = tape.mean_all(q);
        let grads = tape.backward(loss).unwrap();
        let gb = grads.var(b).unwrap();
        assert!((gb.data()[0] - (-1.0 / 4.0) / 2.0).abs() < 1e-15);
        assert_eq!(gb.data()[1], 0.0, "clamped denominator must not receive gradient");
    }

    #[test]
    fn leaky_relu_gradient_switches_at_zero() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.leaf(Volume::from_vec(1, 1, 1, 4, vec![-2.0, -0.5, 0.0, 3.0]).unwrap());
        let y = tape.leaky_relu(x, 0.1);
        assert_eq!(tape.value(y).data(), &[-0.2, -0.05, 0.0, 3.0]);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.var(x).unwrap().data(), &[0.025, 0.025, 0.25, 0.25]);
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let a = tape.leaf(Volume::filled(1, 1, 1, 2, 1.0));
        let b = tape.leaf(Volume::filled(2, 1, 1, 2, 1.0));
        let cat = tape.concat(a, b).unwrap();
        let two = tape.scale(cat, 2.0);
        let loss = tape.mean_all(two);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.var(a).unwrap().len(), 2);
        assert_eq!(grads.var(b).unwrap().len(), 4);
        for g in grads.var(a).unwrap().data().iter().chain(grads.var(b).unwrap().data()) {
            assert!((g - 2.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fan_out_accumulates_both_paths() {
        // loss = mean(x*x + x) so dl/dx = (2x + 1)/n; x is consumed twice.
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let v = Volume::from_vec(1, 1, 1, 2, vec![3.0, -1.0]).unwrap();
        let x = tape.leaf(v.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.mean_all(s);
        let grads = tape.backward(loss).unwrap();
        for (g, v) in grads.var(x).unwrap().data().iter().zip(v.data()) {
            assert!((g - (2.0 * v + 1.0) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn first_non_finite_names_offending_op() {
        let params = ParamSet::<f64>::new();
        let mut tape = Tape::new(&params);
        let x = tape.leaf(Volume::from_vec(1, 1, 1, 2, vec![0.0, 1.0]).unwrap());
        let _ = tape.ln(x);
        let (id, name) = tape.first_non_finite().unwrap();
        assert_eq!(name, "ln");
        assert_eq!(id.index(), 1);
    }

    /// Finite-difference sweep over a graph that exercises every op:
    /// learnable and fixed convolutions at both strides, upsampling,
    /// concat, all element-wise ops, activations and reductions.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(41);
        let mut params = ParamSet::<f64>::new();
        let mut k1 = Kernel3d::zeros(2, 1, 3, 3, 3);
        let mut k2 = Kernel3d::zeros(2, 2, 3, 3, 3);
        let mut k3 = Kernel3d::zeros(1, 4, 1, 1, 1);
        fill_kernel(&mut rng, &mut k1);
        fill_kernel(&mut rng, &mut k2);
        fill_kernel(&mut rng, &mut k3);
        let id1 = params.insert("k1", k1);
        let id2 = params.insert("k2", k2);
        let id3 = params.insert("k3", k3);

        let mut fixed = Kernel3d::zeros(2, 2, 3, 3, 3);
        fill_kernel(&mut rng, &mut fixed);
        let x0 = random_volume(&mut rng, 1, 4, 4, 4).map(|v| v + 1.5); // keep ln argument positive

        let eval = |params: &ParamSet<f64>, x0: &Volume<f64>| -> f64 {
            let mut tape = Tape::new(params);
            let x = tape.leaf(x0.clone());
            let c1 = tape.conv3d(x, id1, 1, Pad::SameZero).unwrap();
            let a1 = tape.leaky_relu(c1, 0.1);
            let c2 = tape.conv3d(a1, id2, 2, Pad::SameZero).unwrap();
            let up = tape.upsample2x(c2);
            let fx = tape.conv3d_fixed(a1, fixed.clone(), 1, Pad::SameZero).unwrap();
            let cat = tape.concat(up, fx).unwrap();
            let c3 = tape.conv3d(cat, id3, 1, Pad::SameZero).unwrap();
            let cm = tape.channel_mean(cat);
            let dv = tape.div_guarded(cm, c3, 1e-3).unwrap();
            let prod = tape.mul(dv, cm).unwrap();
            let dif = tape.sub(prod, c3).unwrap();
            let sum = tape.add(dif, cm).unwrap();
            let sh = tape.shift(sum, 4.0);
            let ln = tape.ln(sh);
            let sc = tape.scale(ln, 0.5);
            let loss = tape.mean_all(sc);
            tape.value(loss).data()[0]
        };

        // Analytic gradients from one recorded pass.
        let (gk, gx) = {
            let mut tape = Tape::new(&params);
            let x = tape.leaf(x0.clone());
            let c1 = tape.conv3d(x, id1, 1, Pad::SameZero).unwrap();
            let a1 = tape.leaky_relu(c1, 0.1);
            let c2 = tape.conv3d(a1, id2, 2, Pad::SameZero).unwrap();
            let up = tape.upsample2x(c2);
            let fx = tape.conv3d_fixed(a1, fixed.clone(), 1, Pad::SameZero).unwrap();
            let cat = tape.concat(up, fx).unwrap();
            let c3 = tape.conv3d(cat, id3, 1, Pad::SameZero).unwrap();
            let cm = tape.channel_mean(cat);
            let dv = tape.div_guarded(cm, c3, 1e-3).unwrap();
            let prod = tape.mul(dv, cm).unwrap();
            let dif = tape.sub(prod, c3).unwrap();
            let sum = tape.add(dif, cm).unwrap();
            let sh = tape.shift(sum, 4.0);
            let ln = tape.ln(sh);
            let sc = tape.scale(ln, 0.5);
            let loss = tape.mean_all(sc);
            let mut grads = tape.backward(loss).unwrap();
            let gk: Vec<Kernel3d<f64>> =
                [id1, id2, id3].iter().map(|id| grads.take_kernel(*id).unwrap()).collect();
            (gk, grads.var(x).unwrap().clone())
        };

        let eps = 1e-5;
        for (slot, id) in [id1, id2, id3].into_iter().enumerate() {
            for i in 0..params.kernel(id).weights().len() {
                let orig = params.kernel(id).weights()[i];
                params.kernel_mut(id).weights_mut()[i] = orig + eps;
                let plus = eval(&params, &x0);
                params.kernel_mut(id).weights_mut()[i] = orig - eps;
                let minus = eval(&params, &x0);
                params.kernel_mut(id).weights_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = gk[slot].weights()[i];
                assert!(
                    (analytic - numeric).abs() < 1e-6 * (1.0 + numeric.abs()),
                    "kernel {slot} weight {i}: analytic {analytic} vs numeric {numeric}"
                );
            }
            for o in 0..params.kernel(id).bias().len() {
                let orig = params.kernel(id).bias()[o];
                params.kernel_mut(id).bias_mut()[o] = orig + eps;
                let plus = eval(&params, &x0);
                params.kernel_mut(id).bias_mut()[o] = orig - eps;
                let minus = eval(&params, &x0);
                params.kernel_mut(id).bias_mut()[o] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = gk[slot].bias()[o];
                assert!(
                    (analytic - numeric).abs() < 1e-6 * (1.0 + numeric.abs()),
                    "kernel {slot} bias {o}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
        let mut x = x0.clone();
        for i in 0..x.len() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + eps;
            let plus = eval(&params, &x);
            x.data_mut()[i] = orig - eps;
            let minus = eval(&params, &x);
            x.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = gx.data()[i];
            assert!(
                (analytic - numeric).abs() < 1e-6 * (1.0 + numeric.abs()),
                "input voxel {i}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn replaying_a_graph_is_bitwise_deterministic() {
        let run = || -> Vec<f32> {
            let mut rng = StdRng::seed_from_u64(5);
            let mut params = ParamSet::<f32>::new();
            let mut k = Kernel3d::zeros(2, 1, 3, 3, 3);
            for w in k.weights_mut() {
                *w = rng.random_range(-0.5..0.5);
            }
            let id = params.insert("k", k);
            let mut tape = Tape::new(&params);
            let x = tape.leaf(Volume::from_vec(1, 4, 4, 4, (0..64).map(|i| (i as f32).sin()).collect()).unwrap());
            let c = tape.conv3d(x, id, 1, Pad::SameZero).unwrap();
            let a = tape.leaky_relu(c, 0.1);
            let loss = tape.mean_all(a);
            let mut grads = tape.backward(loss).unwrap();
            let mut out = grads.take_kernel(id).unwrap().weights().to_vec();
            out.push(tape.value(loss).data()[0]);
            out
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }
}
