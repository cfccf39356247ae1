//! Reparameterizable 1D convolution block.
//!
//! Training form runs three parallel branches — a kernel-3 conv, a kernel-1
//! conv, and (when channels and stride allow) an identity passthrough — each
//! with optional per-branch batch normalization, summed. The deploy form is
//! one kernel-3 convolution whose weights are the algebraic merge of all
//! branches with their norms folded in; outputs match to rounding error.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Activation, Element, Tape, Tensor, Var};

/// Per-branch batch normalization parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BranchNorm<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> BranchNorm<T> {
    pub fn identity(channels: usize) -> Self {
        let mut gamma = Tensor::full(vec![channels], T::one());
        gamma.set_requires_grad(true);
        let mut beta = Tensor::zeros(vec![channels]);
        beta.set_requires_grad(true);
        BranchNorm {
            gamma,
            beta,
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
            eps: 1e-5,
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != [channels] {
                return Err(Error::shape(
                    "BranchNorm",
                    format!("{} has shape {:?}, expected [{}]", name, t.shape(), channels),
                ));
            }
        }
        if self.running_var.data().iter().any(|v| *v <= T::zero()) {
            return Err(Error::invalid("BranchNorm", "running variance must be positive"));
        }
        Ok(())
    }

    /// Folded scale `gamma / sqrt(var + eps)` per channel.
    fn scale(&self) -> Vec<T> {
        let eps = T::from_f64(self.eps);
        self.gamma
            .data()
            .iter()
            .zip(self.running_var.data())
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect()
    }
}

/// Whether normalization uses statistics of the current batch or the stored
/// running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Running,
}

/// Multi-branch training form.
#[derive(Clone, Debug)]
pub struct RepBlockTrainParams<T: Element> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Kernel-3 branch, `[C_out, C_in, 3]`, padding 1.
    pub w3: Tensor<T>,
    pub b3: Tensor<T>,
    /// Kernel-1 branch, `[C_out, C_in, 1]`, padding 0; under stride it samples
    /// the same centers as the kernel-3 branch's middle tap, which is what
    /// keeps the merge exact.
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub norm3: Option<BranchNorm<T>>,
    pub norm1: Option<BranchNorm<T>>,
    pub norm_id: Option<BranchNorm<T>>,
    /// Applied after the branch sum; excluded from the fusion algebra.
    pub post_activation: Option<Activation>,
}

/// Single-path deploy form: one kernel-3 convolution.
#[derive(Clone, Debug)]
pub struct RepBlockFusedParams<T: Element> {
    pub wf: Tensor<T>,
    pub bf: Tensor<T>,
    pub stride: usize,
    pub post_activation: Option<Activation>,
}

/// Collects the tape leaves of trainable parameters in traversal order, with
/// their addresses, so gradients can be copied back and the order verified.
#[derive(Default)]
pub struct ParamBinder {
    vars: Vec<Var>,
    ptrs: Vec<usize>,
}

impl ParamBinder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind<T: Element>(&mut self, tape: &mut Tape<T>, t: &Tensor<T>) -> Var {
        let v = tape.leaf(t);
        self.vars.push(v);
        self.ptrs.push(t as *const Tensor<T> as usize);
        v
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn ptrs(&self) -> &[usize] {
        &self.ptrs
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

pub(crate) fn kaiming_uniform<T: Element>(
    rng: &mut impl Rng,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    let mut t = Tensor::from_vec(shape, data).expect("shape/data consistent");
    t.set_requires_grad(true);
    t
}

pub(crate) fn zeros_grad<T: Element>(shape: Vec<usize>) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    t
}

impl<T: Element> RepBlockTrainParams<T> {
    pub fn new_random(
        rng: &mut impl Rng,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        with_norm: bool,
        post_activation: Option<Activation>,
    ) -> Self {
        let w3 = kaiming_uniform(rng, vec![out_channels, in_channels, 3], in_channels * 3);
        let b3 = zeros_grad(vec![out_channels]);
        let w1 = kaiming_uniform(rng, vec![out_channels, in_channels, 1], in_channels);
        let b1 = zeros_grad(vec![out_channels]);
        let has_identity = in_channels == out_channels && stride == 1;
        let mk = || {
            if with_norm {
                Some(BranchNorm::identity(out_channels))
            } else {
                None
            }
        };
        RepBlockTrainParams {
            in_channels,
            out_channels,
            stride,
            w3,
            b3,
            w1,
            b1,
            norm3: mk(),
            norm1: mk(),
            norm_id: if has_identity { mk() } else { None },
            post_activation,
        }
    }

    /// The identity branch exists exactly when shapes allow a passthrough.
    pub fn has_identity(&self) -> bool {
        self.in_channels == self.out_channels && self.stride == 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::invalid("RepBlock", format!("stride {} not in {{1,2}}", self.stride)));
        }
        let (ci, co) = (self.in_channels, self.out_channels);
        if self.w3.shape() != [co, ci, 3] || self.w1.shape() != [co, ci, 1] {
            return Err(Error::shape(
                "RepBlock",
                format!("w3 {:?} / w1 {:?} for {}->{}", self.w3.shape(), self.w1.shape(), ci, co),
            ));
        }
        if self.b3.shape() != [co] || self.b1.shape() != [co] {
            return Err(Error::shape("RepBlock", "bias shape".to_string()));
        }
        for n in [&self.norm3, &self.norm1].into_iter().flatten() {
            n.validate(co)?;
        }
        if let Some(n) = &self.norm_id {
            if !self.has_identity() {
                return Err(Error::invalid(
                    "RepBlock",
                    "identity-branch norm present on a block without an identity branch",
                ));
            }
            n.validate(co)?;
        }
        Ok(())
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        let norms = [&self.norm3, &self.norm1, &self.norm_id]
            .into_iter()
            .flatten()
            .count();
        self.w3.numel() + self.b3.numel() + self.w1.numel() + self.b1.numel() + norms * 2 * self.out_channels
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        f(&self.w3);
        f(&self.b3);
        if let Some(n) = &self.norm3 {
            f(&n.gamma);
            f(&n.beta);
        }
        f(&self.w1);
        f(&self.b1);
        if let Some(n) = &self.norm1 {
            f(&n.gamma);
            f(&n.beta);
        }
        if let Some(n) = &self.norm_id {
            f(&n.gamma);
            f(&n.beta);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        f(&mut self.w3);
        f(&mut self.b3);
        if let Some(n) = &mut self.norm3 {
            f(&mut n.gamma);
            f(&mut n.beta);
        }
        f(&mut self.w1);
        f(&mut self.b1);
        if let Some(n) = &mut self.norm1 {
            f(&mut n.gamma);
            f(&mut n.beta);
        }
        if let Some(n) = &mut self.norm_id {
            f(&mut n.gamma);
            f(&mut n.beta);
        }
    }

    /// Runs the multi-branch form on a batch of `[C_in, L]` windows. In
    /// `NormMode::Batch`, per-channel statistics are taken over all windows
    /// and timesteps of the batch; running estimates are left untouched.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        binder: &mut ParamBinder,
        xs: &[Var],
        mode: NormMode,
    ) -> Result<Vec<Var>> {
        self.forward_inner(tape, binder, xs, mode).map(|(outs, _)| outs)
    }

    /// Training-step variant: batch statistics normalize the branches and are
    /// folded into the running estimates with momentum 0.1.
    pub fn forward_batch_update(
        &mut self,
        tape: &mut Tape<T>,
        binder: &mut ParamBinder,
        xs: &[Var],
    ) -> Result<Vec<Var>> {
        let (outs, [s3, s1, sid]) = self.forward_inner(tape, binder, xs, NormMode::Batch)?;
        for (norm, stats) in [(&mut self.norm3, s3), (&mut self.norm1, s1), (&mut self.norm_id, sid)] {
            if let (Some(n), Some((mean, var, count))) = (norm, stats) {
                update_running(n, mean, var, count);
            }
        }
        Ok(outs)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<T>,
        binder: &mut ParamBinder,
        xs: &[Var],
        mode: NormMode,
    ) -> Result<(Vec<Var>, [Option<BatchStats<T>>; 3])> {
        let w3 = binder.bind(tape, &self.w3);
        let b3 = binder.bind(tape, &self.b3);
        let conv3: Vec<Var> = xs
            .iter()
            .map(|&x| tape.conv1d(x, w3, Some(b3), self.stride, 1, 1))
            .collect::<Result<_>>()?;
        let (branch3, stats3) = norm_branch(tape, binder, self.norm3.as_ref(), &conv3, mode)?;

        let w1 = binder.bind(tape, &self.w1);
        let b1 = binder.bind(tape, &self.b1);
        let conv1: Vec<Var> = xs
            .iter()
            .map(|&x| tape.conv1d(x, w1, Some(b1), self.stride, 0, 1))
            .collect::<Result<_>>()?;
        let (branch1, stats1) = norm_branch(tape, binder, self.norm1.as_ref(), &conv1, mode)?;

        let (identity, stats_id) = if self.has_identity() {
            let (idb, s) = norm_branch(tape, binder, self.norm_id.as_ref(), xs, mode)?;
            (Some(idb), s)
        } else {
            (None, None)
        };

        let mut outs = Vec::with_capacity(xs.len());
        for i in 0..xs.len() {
            let summed = match &identity {
                Some(idb) => tape.add_n(&[idb[i], branch3[i], branch1[i]])?,
                None => tape.add(branch3[i], branch1[i])?,
            };
            let out = match self.post_activation {
                Some(kind) => tape.activation(summed, kind)?,
                None => summed,
            };
            outs.push(out);
        }
        Ok((outs, [stats3, stats1, stats_id]))
    }

    /// Merges all branches (norms folded at their running statistics) into a
    /// single kernel-3 convolution.
    pub fn fuse(&self) -> Result<RepBlockFusedParams<T>> {
        self.validate()?;
        let (ci, co) = (self.in_channels, self.out_channels);
        let mut wf = vec![T::zero(); co * ci * 3];
        let mut bf = vec![T::zero(); co];

        // Kernel-3 branch.
        let (s3, m3, be3) = fold_stats(&self.norm3, co);
        for o in 0..co {
            for i in 0..ci {
                for j in 0..3 {
                    wf[(o * ci + i) * 3 + j] = self.w3.data()[(o * ci + i) * 3 + j] * s3[o];
                }
            }
            bf[o] = bf[o] + be3[o] + s3[o] * (self.b3.data()[o] - m3[o]);
        }
        // Kernel-1 branch lands on the center tap.
        let (s1, m1, be1) = fold_stats(&self.norm1, co);
        for o in 0..co {
            for i in 0..ci {
                let w = self.w1.data()[o * ci + i];
                wf[(o * ci + i) * 3 + 1] = wf[(o * ci + i) * 3 + 1] + w * s1[o];
            }
            bf[o] = bf[o] + be1[o] + s1[o] * (self.b1.data()[o] - m1[o]);
        }
        // Identity branch folds as a scaled dirac kernel.
        if self.has_identity() {
            let (sid, mid, beid) = fold_stats(&self.norm_id, co);
            for o in 0..co {
                wf[(o * ci + o) * 3 + 1] = wf[(o * ci + o) * 3 + 1] + sid[o];
                bf[o] = bf[o] + beid[o] - sid[o] * mid[o];
            }
        }
        Ok(RepBlockFusedParams {
            wf: {
                let mut t = Tensor::from_vec(vec![co, ci, 3], wf)?;
                t.set_requires_grad(true);
                t
            },
            bf: {
                let mut t = Tensor::from_vec(vec![co], bf)?;
                t.set_requires_grad(true);
                t
            },
            stride: self.stride,
            post_activation: self.post_activation,
        })
    }
}

/// `(scale, mean, beta)` per channel for folding; identity scale when no norm.
fn fold_stats<T: Element>(norm: &Option<BranchNorm<T>>, channels: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    match norm {
        Some(n) => (n.scale(), n.running_mean.data().to_vec(), n.beta.data().to_vec()),
        None => (
            vec![T::one(); channels],
            vec![T::zero(); channels],
            vec![T::zero(); channels],
        ),
    }
}

/// Batch-mode statistics captured during a forward pass: per-channel mean,
/// per-channel biased variance, and the element count they were taken over.
type BatchStats<T> = (Vec<T>, Vec<T>, usize);

/// Applies a branch's normalization (or passes through) for every window.
fn norm_branch<T: Element>(
    tape: &mut Tape<T>,
    binder: &mut ParamBinder,
    norm: Option<&BranchNorm<T>>,
    xs: &[Var],
    mode: NormMode,
) -> Result<(Vec<Var>, Option<BatchStats<T>>)> {
    let Some(n) = norm else {
        return Ok((xs.to_vec(), None));
    };
    let eps = T::from_f64(n.eps);
    let gamma = binder.bind(tape, &n.gamma);
    let beta = binder.bind(tape, &n.beta);
    let (neg_mean, inv_std, stats) = match mode {
        NormMode::Batch => {
            let mean = tape.channel_mean(xs)?;
            let meansq = tape.channel_mean_sq(xs)?;
            let mean2 = tape.mul(mean, mean)?;
            let var = tape.sub(meansq, mean2)?;
            let count: usize = xs.iter().map(|&x| tape.value(x).shape()[1]).sum();
            let stats = (
                tape.value(mean).data().to_vec(),
                tape.value(var).data().to_vec(),
                count,
            );
            let veps = tape.add_const(var, eps)?;
            let inv_std = tape.rsqrt(veps)?;
            let neg_mean = tape.scale(mean, -T::one())?;
            (neg_mean, inv_std, Some(stats))
        }
        NormMode::Running => {
            let mean = tape.constant(n.running_mean.clone());
            let var = tape.constant(n.running_var.clone());
            let veps = tape.add_const(var, eps)?;
            let inv_std = tape.rsqrt(veps)?;
            let neg_mean = tape.scale(mean, -T::one())?;
            (neg_mean, inv_std, None)
        }
    };
    let outs = xs
        .iter()
        .map(|&x| {
            let centered = tape.add_channel(x, neg_mean)?;
            let xhat = tape.mul_channel(centered, inv_std)?;
            let scaled = tape.mul_channel(xhat, gamma)?;
            tape.add_channel(scaled, beta)
        })
        .collect::<Result<Vec<Var>>>()?;
    Ok((outs, stats))
}

fn update_running<T: Element>(n: &mut BranchNorm<T>, mean: Vec<T>, var: Vec<T>, count: usize) {
    let momentum = T::from_f64(0.1);
    let keep = T::one() - momentum;
    // Unbiased variance for the running estimate, standard convention.
    let unbias = if count > 1 {
        T::from_f64(count as f64 / (count as f64 - 1.0))
    } else {
        T::one()
    };
    for (r, m) in n.running_mean.data_mut().iter_mut().zip(mean) {
        *r = keep * *r + momentum * m;
    }
    for (r, v) in n.running_var.data_mut().iter_mut().zip(var) {
        *r = keep * *r + momentum * v * unbias;
    }
}

impl<T: Element> RepBlockFusedParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.wf.shape().len() != 3 || self.wf.shape()[2] != 3 {
            return Err(Error::shape(
                "RepBlockFused",
                format!("fused kernel must be 3 wide, got {:?}", self.wf.shape()),
            ));
        }
        if self.bf.shape() != [self.wf.shape()[0]] {
            return Err(Error::shape("RepBlockFused", "bias shape".to_string()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.wf.numel() + self.bf.numel()
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        f(&self.wf);
        f(&self.bf);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        f(&mut self.wf);
        f(&mut self.bf);
    }

    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        binder: &mut ParamBinder,
        xs: &[Var],
    ) -> Result<Vec<Var>> {
        let w = binder.bind(tape, &self.wf);
        let b = binder.bind(tape, &self.bf);
        xs.iter()
            .map(|&x| {
                let y = tape.conv1d(x, w, Some(b), self.stride, 1, 1)?;
                match self.post_activation {
                    Some(kind) => tape.activation(y, kind),
                    None => Ok(y),
                }
            })
            .collect()
    }
}
