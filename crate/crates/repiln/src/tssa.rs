//! Temporal-scale sparse attention.
//!
//! Attention runs along the time axis of a `[C, L]` feature map: queries,
//! keys, and values come from a kernel-1 conv followed by a depthwise
//! kernel-3 conv; the L×L score matrix keeps only the top e% of each row
//! before row-softmax, and the output mixes value timesteps, so every output
//! step is a convex combination of retained input steps.

use rand::Rng;

use crate::error::{Error, Result};
use crate::repblock::{kaiming_uniform, zeros_grad, ParamBinder};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Kernel-1 projection followed by a depthwise kernel-3 conv.
#[derive(Clone, Debug)]
pub struct ConvProjection<T: Element> {
    pub point_w: Tensor<T>,
    pub point_b: Tensor<T>,
    pub depth_w: Tensor<T>,
    pub depth_b: Tensor<T>,
}

impl<T: Element> ConvProjection<T> {
    pub fn new_random(rng: &mut impl Rng, in_channels: usize, out_channels: usize) -> Self {
        ConvProjection {
            point_w: kaiming_uniform(rng, vec![out_channels, in_channels, 1], in_channels),
            point_b: zeros_grad(vec![out_channels]),
            depth_w: kaiming_uniform(rng, vec![out_channels, 1, 3], 3),
            depth_b: zeros_grad(vec![out_channels]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.point_w.shape()[0]
    }

    pub fn validate(&self, in_channels: usize, out_channels: usize) -> Result<()> {
        if self.point_w.shape() != [out_channels, in_channels, 1] {
            return Err(Error::shape(
                "ConvProjection",
                format!("point weight {:?}", self.point_w.shape()),
            ));
        }
        if self.depth_w.shape() != [out_channels, 1, 3] {
            return Err(Error::shape(
                "ConvProjection",
                format!("depthwise weight {:?} (groups must equal channels)", self.depth_w.shape()),
            ));
        }
        if self.point_b.shape() != [out_channels] || self.depth_b.shape() != [out_channels] {
            return Err(Error::shape("ConvProjection", "bias shape".to_string()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.point_w.numel() + self.point_b.numel() + self.depth_w.numel() + self.depth_b.numel()
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        f(&self.point_w);
        f(&self.point_b);
        f(&self.depth_w);
        f(&self.depth_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        f(&mut self.point_w);
        f(&mut self.point_b);
        f(&mut self.depth_w);
        f(&mut self.depth_b);
    }

    pub fn forward(&self, tape: &mut Tape<T>, binder: &mut ParamBinder, x: Var) -> Result<Var> {
        let pw = binder.bind(tape, &self.point_w);
        let pb = binder.bind(tape, &self.point_b);
        let dw = binder.bind(tape, &self.depth_w);
        let db = binder.bind(tape, &self.depth_b);
        self.forward_bound(tape, (pw, pb, dw, db), x)
    }

    /// Same computation with pre-bound parameter vars, so one binding can
    /// serve a whole batch.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        vars: (Var, Var, Var, Var),
        x: Var,
    ) -> Result<Var> {
        let (pw, pb, dw, db) = vars;
        let c_out = self.out_channels();
        let p = tape.conv1d(x, pw, Some(pb), 1, 0, 1)?;
        tape.conv1d(p, dw, Some(db), 1, 1, c_out)
    }

    pub fn bind(&self, tape: &mut Tape<T>, binder: &mut ParamBinder) -> (Var, Var, Var, Var) {
        (
            binder.bind(tape, &self.point_w),
            binder.bind(tape, &self.point_b),
            binder.bind(tape, &self.depth_w),
            binder.bind(tape, &self.depth_b),
        )
    }
}

/// How the score scaling factor is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaMode {
    /// `alpha = sqrt(C)`, the usual scaled dot product.
    SqrtChannels,
    Fixed(f64),
}

impl AlphaMode {
    pub fn resolve(self, channels: usize) -> f64 {
        match self {
            AlphaMode::SqrtChannels => (channels as f64).sqrt(),
            AlphaMode::Fixed(a) => a,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TssaParams<T: Element> {
    pub query: ConvProjection<T>,
    pub key: ConvProjection<T>,
    pub value: ConvProjection<T>,
    /// Positive score scaling factor.
    pub alpha: f64,
    /// Per-row retention percentage in (0, 100].
    pub e_percent: f64,
}

impl<T: Element> TssaParams<T> {
    pub fn new_random(rng: &mut impl Rng, channels: usize, alpha: AlphaMode, e_percent: f64) -> Self {
        TssaParams {
            query: ConvProjection::new_random(rng, channels, channels),
            key: ConvProjection::new_random(rng, channels, channels),
            value: ConvProjection::new_random(rng, channels, channels),
            alpha: alpha.resolve(channels),
            e_percent,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::invalid("TSSA", "alpha must be positive"));
        }
        if !(self.e_percent > 0.0 && self.e_percent <= 100.0) {
            return Err(Error::invalid("TSSA", format!("e = {} outside (0, 100]", self.e_percent)));
        }
        self.query.validate(channels, channels)?;
        self.key.validate(channels, channels)?;
        self.value.validate(channels, channels)
    }

    pub fn param_count(&self) -> usize {
        self.query.param_count() + self.key.param_count() + self.value.param_count()
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        self.query.visit_params(f);
        self.key.visit_params(f);
        self.value.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        self.query.visit_params_mut(f);
        self.key.visit_params_mut(f);
        self.value.visit_params_mut(f);
    }
}

/// Retained entries per row: `max(1, ceil(e/100 * L))`.
pub fn keep_count(e_percent: f64, l: usize) -> usize {
    ((e_percent / 100.0 * l as f64).ceil() as usize).max(1)
}

/// Score matrix `S[t, s] = sum_c Q[c, t] * K[c, s] / alpha`; rows are query
/// timesteps, columns key timesteps.
pub fn temporal_scores<T: Element>(tape: &mut Tape<T>, q: Var, k: Var, alpha: f64) -> Result<Var> {
    if tape.value(q).shape() != tape.value(k).shape() {
        return Err(Error::shape(
            "temporal_scores",
            format!("{:?} vs {:?}", tape.value(q).shape(), tape.value(k).shape()),
        ));
    }
    let qt = tape.transpose(q)?;
    let s = tape.matmul(qt, k)?;
    tape.scale(s, T::from_f64(1.0 / alpha))
}

/// Full attention pass on one `[C, L]` input (parameters bound per call).
pub fn tssa_forward<T: Element>(
    tape: &mut Tape<T>,
    binder: &mut ParamBinder,
    p: &TssaParams<T>,
    x: Var,
) -> Result<Var> {
    let qvars = p.query.bind(tape, binder);
    let kvars = p.key.bind(tape, binder);
    let vvars = p.value.bind(tape, binder);
    tssa_forward_bound(tape, p, (qvars, kvars, vvars), x)
}

pub type ProjVars = (Var, Var, Var, Var);

/// Attention with pre-bound projection parameters, for batched use.
pub fn tssa_forward_bound<T: Element>(
    tape: &mut Tape<T>,
    p: &TssaParams<T>,
    vars: (ProjVars, ProjVars, ProjVars),
    x: Var,
) -> Result<Var> {
    let (qv, kv, vv) = vars;
    let q = p.query.forward_bound(tape, qv, x)?;
    let k = p.key.forward_bound(tape, kv, x)?;
    let v = p.value.forward_bound(tape, vv, x)?;
    let l = tape.value(x).shape()[1];
    let s = temporal_scores(tape, q, k, p.alpha)?;
    let masked = tape.row_topk_mask(s, keep_count(p.e_percent, l))?;
    let a = tape.softmax_rows(masked)?;
    let at = tape.transpose(a)?;
    tape.matmul(v, at)
}
