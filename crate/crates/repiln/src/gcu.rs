//! Sparse-attention gated convolutional unit.
//!
//! Two branches over the same input: a local gate (kernel-1 projection, then
//! depthwise kernel-3 conv, then a bounded activation) and a global value
//! branch (kernel-1 projection into temporal sparse attention). The gate
//! multiplies the value branch elementwise and a kernel-1 conv projects back
//! to the input width. The surrounding residual add lives in the model, not
//! here.

use rand::Rng;

use crate::error::{Error, Result};
use crate::repblock::{kaiming_uniform, zeros_grad, ParamBinder};
use crate::tensor::{Activation, Element, Tape, Tensor, Var};
use crate::tssa::{self, AlphaMode, ProjVars, TssaParams};

/// Kernel-1 convolution (pointwise channel mixer).
#[derive(Clone, Debug)]
pub struct PointConv<T: Element> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Element> PointConv<T> {
    pub fn new_random(rng: &mut impl Rng, in_channels: usize, out_channels: usize) -> Self {
        PointConv {
            w: kaiming_uniform(rng, vec![out_channels, in_channels, 1], in_channels),
            b: zeros_grad(vec![out_channels]),
        }
    }

    pub fn validate(&self, in_channels: usize, out_channels: usize) -> Result<()> {
        if self.w.shape() != [out_channels, in_channels, 1] || self.b.shape() != [out_channels] {
            return Err(Error::shape(
                "PointConv",
                format!("w {:?} b {:?} for {}->{}", self.w.shape(), self.b.shape(), in_channels, out_channels),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        f(&self.w);
        f(&self.b);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        f(&mut self.w);
        f(&mut self.b);
    }

    pub fn forward(&self, tape: &mut Tape<T>, binder: &mut ParamBinder, x: Var) -> Result<Var> {
        let w = binder.bind(tape, &self.w);
        let b = binder.bind(tape, &self.b);
        tape.conv1d(x, w, Some(b), 1, 0, 1)
    }
}

/// Depthwise kernel-3 convolution (groups == channels).
#[derive(Clone, Debug)]
pub struct DepthConv<T: Element> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Element> DepthConv<T> {
    pub fn new_random(rng: &mut impl Rng, channels: usize) -> Self {
        DepthConv {
            w: kaiming_uniform(rng, vec![channels, 1, 3], 3),
            b: zeros_grad(vec![channels]),
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.w.shape() != [channels, 1, 3] || self.b.shape() != [channels] {
            return Err(Error::shape(
                "DepthConv",
                format!("w {:?} b {:?} for {} channels", self.w.shape(), self.b.shape(), channels),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        f(&self.w);
        f(&self.b);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        f(&mut self.w);
        f(&mut self.b);
    }

    pub fn forward(&self, tape: &mut Tape<T>, binder: &mut ParamBinder, x: Var) -> Result<Var> {
        let c = self.w.shape()[0];
        let w = binder.bind(tape, &self.w);
        let b = binder.bind(tape, &self.b);
        tape.conv1d(x, w, Some(b), 1, 1, c)
    }
}

#[derive(Clone, Debug)]
pub struct GcuParams<T: Element> {
    pub pre_gate: PointConv<T>,
    pub gate_depth: DepthConv<T>,
    pub gate_activation: Activation,
    pub tssa: TssaParams<T>,
    pub pre_value: PointConv<T>,
    pub out_proj: PointConv<T>,
    /// Hidden width over input width.
    pub expansion_ratio: usize,
    /// Optional parameter-free per-channel RMS normalization of the input.
    pub pre_norm: bool,
}

impl<T: Element> GcuParams<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new_random(
        rng: &mut impl Rng,
        channels: usize,
        expansion_ratio: usize,
        gate_activation: Activation,
        alpha: AlphaMode,
        e_percent: f64,
        pre_norm: bool,
    ) -> Self {
        let hidden = channels * expansion_ratio;
        GcuParams {
            pre_gate: PointConv::new_random(rng, channels, hidden),
            gate_depth: DepthConv::new_random(rng, hidden),
            gate_activation,
            tssa: TssaParams::new_random(rng, hidden, alpha, e_percent),
            pre_value: PointConv::new_random(rng, channels, hidden),
            out_proj: PointConv::new_random(rng, hidden, channels),
            expansion_ratio,
            pre_norm,
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.pre_gate.w.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.pre_gate.w.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.in_channels();
        let h = self.hidden_channels();
        if h < 1 {
            return Err(Error::invalid("GCU", "hidden width must be >= 1"));
        }
        self.pre_gate.validate(c, h)?;
        self.gate_depth.validate(h)?;
        self.tssa.validate(h)?;
        self.pre_value.validate(c, h)?;
        self.out_proj.validate(h, c)
    }

    pub fn param_count(&self) -> usize {
        self.pre_gate.param_count()
            + self.gate_depth.param_count()
            + self.tssa.param_count()
            + self.pre_value.param_count()
            + self.out_proj.param_count()
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        self.pre_gate.visit_params(f);
        self.gate_depth.visit_params(f);
        self.pre_value.visit_params(f);
        self.tssa.visit_params(f);
        self.out_proj.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        self.pre_gate.visit_params_mut(f);
        self.gate_depth.visit_params_mut(f);
        self.pre_value.visit_params_mut(f);
        self.tssa.visit_params_mut(f);
        self.out_proj.visit_params_mut(f);
    }

    /// Registers every parameter on the tape once, in `visit_params` order.
    pub fn bind(&self, tape: &mut Tape<T>, binder: &mut ParamBinder) -> GcuBound {
        GcuBound {
            pre_gate: (binder.bind(tape, &self.pre_gate.w), binder.bind(tape, &self.pre_gate.b)),
            gate_depth: (binder.bind(tape, &self.gate_depth.w), binder.bind(tape, &self.gate_depth.b)),
            pre_value: (binder.bind(tape, &self.pre_value.w), binder.bind(tape, &self.pre_value.b)),
            query: self.tssa.query.bind(tape, binder),
            key: self.tssa.key.bind(tape, binder),
            value: self.tssa.value.bind(tape, binder),
            out_proj: (binder.bind(tape, &self.out_proj.w), binder.bind(tape, &self.out_proj.b)),
        }
    }
}

/// Tape handles for one binding of a unit's parameters.
#[derive(Clone, Copy)]
pub struct GcuBound {
    pre_gate: (Var, Var),
    gate_depth: (Var, Var),
    pre_value: (Var, Var),
    query: ProjVars,
    key: ProjVars,
    value: ProjVars,
    out_proj: (Var, Var),
}

/// Parameter-free per-channel RMS normalization: `x / sqrt(mean_t(x^2) + eps)`.
fn rms_norm<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let meansq = tape.channel_mean_sq(&[x])?;
    let stabilized = tape.add_const(meansq, T::from_f64(1e-6))?;
    let inv = tape.rsqrt(stabilized)?;
    tape.mul_channel(x, inv)
}

/// `out_proj(activation(gate_depth(pre_gate(x))) ⊙ tssa(pre_value(x)))`.
pub fn sa_gcu_forward<T: Element>(
    tape: &mut Tape<T>,
    binder: &mut ParamBinder,
    p: &GcuParams<T>,
    x: Var,
) -> Result<Var> {
    let bound = p.bind(tape, binder);
    sa_gcu_forward_bound(tape, p, &bound, x)
}

/// Batched variant: parameters are bound once and reused for every window.
pub fn sa_gcu_forward_batch<T: Element>(
    tape: &mut Tape<T>,
    binder: &mut ParamBinder,
    p: &GcuParams<T>,
    xs: &[Var],
) -> Result<Vec<Var>> {
    let bound = p.bind(tape, binder);
    xs.iter().map(|&x| sa_gcu_forward_bound(tape, p, &bound, x)).collect()
}

fn sa_gcu_forward_bound<T: Element>(
    tape: &mut Tape<T>,
    p: &GcuParams<T>,
    bound: &GcuBound,
    x: Var,
) -> Result<Var> {
    let hidden = p.hidden_channels();
    let x = if p.pre_norm { rms_norm(tape, x)? } else { x };
    let g_pre = tape.conv1d(x, bound.pre_gate.0, Some(bound.pre_gate.1), 1, 0, 1)?;
    let g_local = tape.conv1d(g_pre, bound.gate_depth.0, Some(bound.gate_depth.1), 1, 1, hidden)?;
    let gate = tape.activation(g_local, p.gate_activation)?;
    let v_pre = tape.conv1d(x, bound.pre_value.0, Some(bound.pre_value.1), 1, 0, 1)?;
    let value = tssa::tssa_forward_bound(tape, &p.tssa, (bound.query, bound.key, bound.value), v_pre)?;
    let mixed = tape.mul(gate, value)?;
    tape.conv1d(mixed, bound.out_proj.0, Some(bound.out_proj.1), 1, 0, 1)
}
