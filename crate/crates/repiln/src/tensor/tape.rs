//! Reverse-mode tape. Ops execute eagerly, record their inputs, and
//! `backward` fills gradients for every reachable leaf that requires them.
//!
//! A tape is exclusively owned by one forward/backward execution; tensors go
//! in by value (leaves copy their data) so the graph never borrows the model.

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Gelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

enum Op<T: Element> {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        a: Var,
        c: T,
    },
    AddConst(Var),
    AddChannel {
        x: Var,
        c: Var,
    },
    MulChannel {
        x: Var,
        c: Var,
    },
    Act {
        a: Var,
        kind: Activation,
    },
    Rsqrt(Var),
    SoftmaxRows(Var),
    RowTopKMask {
        a: Var,
        keep: Vec<bool>,
    },
    ChannelMean(Vec<Var>),
    ChannelMeanSq(Vec<Var>),
    MeanAll(Var),
}

struct Node<T: Element> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Recorded computation; topological order is insertion order.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_run: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_run: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` with respect to node `v`, if any was
    /// accumulated there.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a copy of `t` as a leaf; gradient participation follows
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.push(Op::Leaf, t.clone(), needs)
    }

    /// Records an owned tensor as a non-gradient constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 2 || ws.len() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("input must be [C,L] and weight [Co,Ci/g,K], got {:?} and {:?}", xs, ws),
            ));
        }
        let (c_in, l_in) = (xs[0], xs[1]);
        let (c_out, cin_g, k) = (ws[0], ws[1], ws[2]);
        if stride < 1 {
            return Err(Error::invalid("conv1d", "stride must be >= 1"));
        }
        if k % 2 == 0 {
            return Err(Error::invalid("conv1d", format!("kernel size {} must be odd", k)));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::invalid(
                "conv1d",
                format!("channels ({} -> {}) must divide groups {}", c_in, c_out, groups),
            ));
        }
        if cin_g != c_in / groups {
            return Err(Error::shape(
                "conv1d",
                format!("weight expects {} input channels per group, input has {}", cin_g, c_in / groups),
            ));
        }
        if let Some(bv) = b {
            let bs = self.value(bv).shape();
            if bs != [c_out] {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias shape {:?}, expected [{}]", bs, c_out),
                ));
            }
        }
        let l_out = kernels::conv1d_out_len(l_in, k, stride, padding).ok_or_else(|| {
            Error::invalid("conv1d", format!("empty output: L={}, k={}, padding={}", l_in, k, padding))
        })?;
        let mut out = vec![T::zero(); c_out * l_out];
        {
            let bias = b.map(|bv| self.value(bv).data());
            kernels::conv1d_forward(
                self.value(x).data(),
                c_in,
                l_in,
                self.value(w).data(),
                c_out,
                k,
                bias,
                stride,
                padding,
                groups,
                &mut out,
                l_out,
            );
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|bv| self.needs(bv));
        Ok(self.push(
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            },
            Tensor::from_vec(vec![c_out, l_out], out)?,
            needs,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.value(a).shape();
        let bshape = self.value(b).shape();
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ashape, bshape),
            ));
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, Tensor::from_vec(vec![m, n], out)?, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", s)));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![T::zero(); r * c];
        kernels::transpose(self.value(a).data(), r, c, &mut out);
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose(a), Tensor::from_vec(vec![c, r], out)?, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.value(a).shape(), shape),
            ));
        }
        let data = self.value(a).data().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), Tensor::from_vec(shape, data)?, needs))
    }

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Vec<T>, Vec<T>)> {
        let ashape = self.value(a).shape().to_vec();
        if ashape != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", ashape, self.value(b).shape()),
            ));
        }
        Ok((
            ashape,
            self.value(a).data().to_vec(),
            self.value(b).data().to_vec(),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary_same_shape("add", a, b)?;
        let out: Vec<T> = da.iter().zip(&db).map(|(x, y)| *x + *y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), Tensor::from_vec(shape, out)?, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary_same_shape("sub", a, b)?;
        let out: Vec<T> = da.iter().zip(&db).map(|(x, y)| *x - *y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), Tensor::from_vec(shape, out)?, needs))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, da, db) = self.binary_same_shape("mul", a, b)?;
        let out: Vec<T> = da.iter().zip(&db).map(|(x, y)| *x * *y).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), Tensor::from_vec(shape, out)?, needs))
    }

    /// Elementwise sum of two or more same-shape tensors, in argument order.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("add_n", "empty operand list"));
        }
        let shape = self.value(xs[0]).shape().to_vec();
        for &v in xs {
            if self.value(v).shape() != shape {
                return Err(Error::shape(
                    "add_n",
                    format!("{:?} vs {:?}", shape, self.value(v).shape()),
                ));
            }
        }
        let mut out = self.value(xs[0]).data().to_vec();
        for &v in &xs[1..] {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o = *o + *x;
            }
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(Op::AddN(xs.to_vec()), Tensor::from_vec(shape, out)?, needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        Ok(self.push(Op::Scale { a, c }, Tensor::from_vec(shape, out)?, needs))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x + c).collect();
        let needs = self.needs(a);
        Ok(self.push(Op::AddConst(a), Tensor::from_vec(shape, out)?, needs))
    }

    /// Adds a length-C vector to every column of a `[C, L]` tensor
    /// (bias-over-channels, the one permitted broadcast).
    pub fn add_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        let (ch, l) = self.channel_broadcast_dims("add_channel", x, c)?;
        let cv = self.value(c).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for i in 0..ch {
            let b = cv[i];
            for v in &mut out[i * l..(i + 1) * l] {
                *v = *v + b;
            }
        }
        let needs = self.needs(x) || self.needs(c);
        Ok(self.push(Op::AddChannel { x, c }, Tensor::from_vec(vec![ch, l], out)?, needs))
    }

    /// Multiplies every column of a `[C, L]` tensor by a length-C vector.
    pub fn mul_channel(&mut self, x: Var, c: Var) -> Result<Var> {
        let (ch, l) = self.channel_broadcast_dims("mul_channel", x, c)?;
        let cv = self.value(c).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for i in 0..ch {
            let m = cv[i];
            for v in &mut out[i * l..(i + 1) * l] {
                *v = *v * m;
            }
        }
        let needs = self.needs(x) || self.needs(c);
        Ok(self.push(Op::MulChannel { x, c }, Tensor::from_vec(vec![ch, l], out)?, needs))
    }

    fn channel_broadcast_dims(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize)> {
        let xs = self.value(x).shape();
        let cs = self.value(c).shape();
        if xs.len() != 2 || cs.len() != 1 || cs[0] != xs[0] {
            return Err(Error::shape(op, format!("{:?} with channel vector {:?}", xs, cs)));
        }
        Ok((xs[0], xs[1]))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| match kind {
                Activation::Relu => {
                    if x > T::zero() {
                        x
                    } else {
                        T::zero()
                    }
                }
                Activation::Sigmoid => kernels::sigmoid(x),
                Activation::Gelu => kernels::gelu(x),
            })
            .collect();
        let needs = self.needs(a);
        Ok(self.push(Op::Act { a, kind }, Tensor::from_vec(shape, out)?, needs))
    }

    /// Elementwise `1/sqrt(x)`; used on variance vectors.
    pub fn rsqrt(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let out: Vec<T> = self.value(a).data().iter().map(|&x| T::one() / x.sqrt()).collect();
        let needs = self.needs(a);
        Ok(self.push(Op::Rsqrt(a), Tensor::from_vec(shape, out)?, needs))
    }

    /// Row softmax with max-subtraction; sentinel entries map to exactly 0.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("softmax_rows", format!("{:?}", shape)));
        }
        let mut out = vec![T::zero(); shape[0] * shape[1]];
        kernels::softmax_rows(self.value(a).data(), shape[0], shape[1], &mut out).map_err(|row| {
            Error::invalid("softmax_rows", format!("row {} is entirely masked", row))
        })?;
        let needs = self.needs(a);
        Ok(self.push(Op::SoftmaxRows(a), Tensor::from_vec(shape, out)?, needs))
    }

    /// Keeps the `k` largest entries of each row (ties keep the lower column
    /// index), replacing the rest with the sentinel. The selection is treated
    /// as constant by `backward`: gradient passes straight through retained
    /// entries and is zero elsewhere.
    pub fn row_topk_mask(&mut self, a: Var, k: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("row_topk_mask", format!("{:?}", shape)));
        }
        if k == 0 {
            return Err(Error::invalid("row_topk_mask", "k must be >= 1"));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let keep = kernels::row_topk_mask(self.value(a).data(), rows, cols, k);
        let mut out = self.value(a).data().to_vec();
        for (v, &kept) in out.iter_mut().zip(&keep) {
            if !kept {
                *v = T::SENTINEL;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::RowTopKMask { a, keep }, Tensor::from_vec(shape, out)?, needs))
    }

    /// Per-channel mean over all columns of all inputs (each `[C, L_i]`).
    /// With a single input this is a global average pool over time.
    pub fn channel_mean(&mut self, xs: &[Var]) -> Result<Var> {
        self.channel_reduce(xs, false)
    }

    /// Per-channel mean of squares over all columns of all inputs.
    pub fn channel_mean_sq(&mut self, xs: &[Var]) -> Result<Var> {
        self.channel_reduce(xs, true)
    }

    fn channel_reduce(&mut self, xs: &[Var], squared: bool) -> Result<Var> {
        let opname = if squared { "channel_mean_sq" } else { "channel_mean" };
        if xs.is_empty() {
            return Err(Error::invalid(opname, "empty operand list"));
        }
        let c = {
            let s = self.value(xs[0]).shape();
            if s.len() != 2 {
                return Err(Error::shape(opname, format!("{:?}", s)));
            }
            s[0]
        };
        let mut count = 0usize;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != 2 || s[0] != c {
                return Err(Error::shape(opname, format!("expected [{}, _], got {:?}", c, s)));
            }
            count += s[1];
        }
        let inv = T::one() / T::from_f64(count as f64);
        let mut out = vec![T::zero(); c];
        for &v in xs {
            let l = self.value(v).shape()[1];
            let data = self.value(v).data();
            for ch in 0..c {
                let mut s = T::zero();
                for &x in &data[ch * l..(ch + 1) * l] {
                    s = if squared { s + x * x } else { s + x };
                }
                out[ch] = out[ch] + s * inv;
            }
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        let op = if squared {
            Op::ChannelMeanSq(xs.to_vec())
        } else {
            Op::ChannelMean(xs.to_vec())
        };
        Ok(self.push(op, Tensor::from_vec(vec![c], out)?, needs))
    }

    /// Mean over all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let inv = T::one() / T::from_f64(n as f64);
        let mut s = T::zero();
        for &x in self.value(a).data() {
            s = s + x;
        }
        let needs = self.needs(a);
        Ok(self.push(Op::MeanAll(a), Tensor::from_vec(vec![1], vec![s * inv])?, needs))
    }

    /// Mean squared error over all elements; `target` is typically a constant.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(Error::shape(
                "mse_loss",
                format!(
                    "{:?} vs {:?}",
                    self.value(pred).shape(),
                    self.value(target).shape()
                ),
            ));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Propagates gradients from a scalar `loss` to every leaf that requires
    /// them. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_run {
            return Err(Error::invalid("backward", "backward already ran on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        if !self.needs(loss) {
            return Err(Error::invalid(
                "backward",
                "loss is detached: no gradient-requiring leaf reaches it",
            ));
        }
        self.backward_run = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            // Leaves keep their gradients readable after the pass.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn acc<F: FnOnce(&mut [T])>(&self, grads: &mut [Option<Vec<T>>], j: Var, f: F) {
        if !self.needs(j) {
            return;
        }
        let buf = grads[j.0].get_or_insert_with(|| vec![T::zero(); self.nodes[j.0].value.numel()]);
        f(buf);
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                padding,
                groups,
            } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (c_in, l_in) = (xs[0], xs[1]);
                let (c_out, k) = (ws[0], ws[2]);
                let l_out = self.nodes[i].value.shape()[1];
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut gx = if self.needs(*x) {
                    Some(vec![T::zero(); c_in * l_in])
                } else {
                    None
                };
                let mut gw = if self.needs(*w) {
                    Some(vec![T::zero(); wd.len()])
                } else {
                    None
                };
                let mut gb = match b {
                    Some(bv) if self.needs(*bv) => Some(vec![T::zero(); c_out]),
                    _ => None,
                };
                kernels::conv1d_backward(
                    xd,
                    c_in,
                    l_in,
                    wd,
                    c_out,
                    k,
                    *stride,
                    *padding,
                    *groups,
                    g,
                    l_out,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gxv) = gx {
                    self.acc(grads, *x, |buf| add_assign(buf, &gxv));
                }
                if let Some(gwv) = gw {
                    self.acc(grads, *w, |buf| add_assign(buf, &gwv));
                }
                if let (Some(bv), Some(gbv)) = (b, gb) {
                    self.acc(grads, *bv, |buf| add_assign(buf, &gbv));
                }
            }
            Op::MatMul { a, b } => {
                let ashape = self.value(*a).shape();
                let bshape = self.value(*b).shape();
                let (m, k, nn) = (ashape[0], ashape[1], bshape[1]);
                if self.needs(*a) {
                    // dA = G * B^T
                    let mut bt = vec![T::zero(); k * nn];
                    kernels::transpose(self.value(*b).data(), k, nn, &mut bt);
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_acc(g, &bt, m, nn, k, &mut da);
                    self.acc(grads, *a, |buf| add_assign(buf, &da));
                }
                if self.needs(*b) {
                    // dB = A^T * G
                    let mut at = vec![T::zero(); m * k];
                    kernels::transpose(self.value(*a).data(), m, k, &mut at);
                    let mut db = vec![T::zero(); k * nn];
                    kernels::matmul_acc(&at, g, k, m, nn, &mut db);
                    self.acc(grads, *b, |buf| add_assign(buf, &db));
                }
            }
            Op::Transpose(a) => {
                let out_shape = self.nodes[i].value.shape();
                let (r, c) = (out_shape[0], out_shape[1]);
                let mut gt = vec![T::zero(); r * c];
                kernels::transpose(g, r, c, &mut gt);
                self.acc(grads, *a, |buf| add_assign(buf, &gt));
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, |buf| add_assign(buf, g));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |buf| add_assign(buf, g));
                self.acc(grads, *b, |buf| add_assign(buf, g));
            }
            Op::AddN(xs) => {
                for &v in xs {
                    self.acc(grads, v, |buf| add_assign(buf, g));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |buf| add_assign(buf, g));
                self.acc(grads, *b, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o = *o - *gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = self.value(*b).data();
                    self.acc(grads, *a, |buf| {
                        for ((o, gv), bv) in buf.iter_mut().zip(g).zip(bd) {
                            *o = *o + *gv * *bv;
                        }
                    });
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    self.acc(grads, *b, |buf| {
                        for ((o, gv), av) in buf.iter_mut().zip(g).zip(ad) {
                            *o = *o + *gv * *av;
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.acc(grads, *a, |buf| {
                    for (o, gv) in buf.iter_mut().zip(g) {
                        *o = *o + *gv * c;
                    }
                });
            }
            Op::AddConst(a) => {
                self.acc(grads, *a, |buf| add_assign(buf, g));
            }
            Op::AddChannel { x, c } => {
                let l = self.value(*x).shape()[1];
                self.acc(grads, *x, |buf| add_assign(buf, g));
                self.acc(grads, *c, |buf| {
                    for (ch, o) in buf.iter_mut().enumerate() {
                        let mut s = T::zero();
                        for &gv in &g[ch * l..(ch + 1) * l] {
                            s = s + gv;
                        }
                        *o = *o + s;
                    }
                });
            }
            Op::MulChannel { x, c } => {
                let l = self.value(*x).shape()[1];
                if self.needs(*x) {
                    let cd = self.value(*c).data();
                    self.acc(grads, *x, |buf| {
                        for (ch, &cv) in cd.iter().enumerate() {
                            for (o, gv) in buf[ch * l..(ch + 1) * l].iter_mut().zip(&g[ch * l..(ch + 1) * l]) {
                                *o = *o + *gv * cv;
                            }
                        }
                    });
                }
                if self.needs(*c) {
                    let xd = self.value(*x).data();
                    self.acc(grads, *c, |buf| {
                        for (ch, o) in buf.iter_mut().enumerate() {
                            let mut s = T::zero();
                            for (gv, xv) in g[ch * l..(ch + 1) * l].iter().zip(&xd[ch * l..(ch + 1) * l]) {
                                s = s + *gv * *xv;
                            }
                            *o = *o + s;
                        }
                    });
                }
            }
            Op::Act { a, kind } => {
                let kind = *kind;
                match kind {
                    Activation::Relu => {
                        let xd = self.value(*a).data();
                        self.acc(grads, *a, |buf| {
                            for ((o, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                                if *xv > T::zero() {
                                    *o = *o + *gv;
                                }
                            }
                        });
                    }
                    Activation::Sigmoid => {
                        let sd = self.nodes[i].value.data();
                        self.acc(grads, *a, |buf| {
                            for ((o, gv), sv) in buf.iter_mut().zip(g).zip(sd) {
                                *o = *o + *gv * *sv * (T::one() - *sv);
                            }
                        });
                    }
                    Activation::Gelu => {
                        let xd = self.value(*a).data();
                        self.acc(grads, *a, |buf| {
                            for ((o, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                                *o = *o + *gv * kernels::gelu_grad(*xv);
                            }
                        });
                    }
                }
            }
            Op::Rsqrt(a) => {
                let yd = self.nodes[i].value.data();
                let half = T::from_f64(0.5);
                self.acc(grads, *a, |buf| {
                    for ((o, gv), yv) in buf.iter_mut().zip(g).zip(yd) {
                        *o = *o - *gv * half * *yv * *yv * *yv;
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let s = self.nodes[i].value.data();
                let shape = self.nodes[i].value.shape();
                let (rows, cols) = (shape[0], shape[1]);
                self.acc(grads, *a, |buf| {
                    kernels::softmax_rows_backward(s, g, rows, cols, buf);
                });
            }
            Op::RowTopKMask { a, keep } => {
                self.acc(grads, *a, |buf| {
                    for ((o, gv), &kept) in buf.iter_mut().zip(g).zip(keep) {
                        if kept {
                            *o = *o + *gv;
                        }
                    }
                });
            }
            Op::ChannelMean(xs) => {
                let count: usize = xs.iter().map(|&v| self.value(v).shape()[1]).sum();
                let inv = T::one() / T::from_f64(count as f64);
                for &v in xs {
                    let l = self.value(v).shape()[1];
                    self.acc(grads, v, |buf| {
                        for (ch, &gv) in g.iter().enumerate() {
                            let gi = gv * inv;
                            for o in &mut buf[ch * l..(ch + 1) * l] {
                                *o = *o + gi;
                            }
                        }
                    });
                }
            }
            Op::ChannelMeanSq(xs) => {
                let count: usize = xs.iter().map(|&v| self.value(v).shape()[1]).sum();
                let two_inv = T::from_f64(2.0) / T::from_f64(count as f64);
                for &v in xs {
                    let l = self.value(v).shape()[1];
                    let xd = self.value(v).data();
                    self.acc(grads, v, |buf| {
                        for (ch, &gv) in g.iter().enumerate() {
                            let gi = gv * two_inv;
                            for (o, xv) in buf[ch * l..(ch + 1) * l].iter_mut().zip(&xd[ch * l..(ch + 1) * l])
                            {
                                *o = *o + gi * *xv;
                            }
                        }
                    });
                }
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let gi = g[0] / T::from_f64(n as f64);
                self.acc(grads, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + gi;
                    }
                });
            }
        }
    }
}

#[inline]
fn add_assign<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(rows: &[&[f64]]) -> Tensor<f64> {
        let r = rows.len();
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Tensor::from_f64s(vec![r, c], &data).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(tensor2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = tape.constant(tensor2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let pz = tape.matmul(z, m).unwrap();
        assert!(tape.value(pz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_dim_mismatch_is_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64s(vec![2], &[0.0, 0.0]).unwrap());
        let t = tape.constant(Tensor::from_f64s(vec![2], &[3.0, 4.0]).unwrap());
        let l = tape.mse_loss(p, t).unwrap();
        assert_eq!(tape.value(l).data()[0], 12.5);

        let mut tape = Tape::<f64>::new();
        let same = tape.constant(Tensor::from_f64s(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let l = tape.mse_loss(same, same).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }

    #[test]
    fn mse_gradient_is_two_deltas_over_n() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(&Tensor::from_f64s(vec![1], &[1.0]).unwrap().with_grad());
        let t = tape.constant(Tensor::from_f64s(vec![1], &[0.0]).unwrap());
        let l = tape.mse_loss(p, t).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_of_weighted_conv_chain() {
        // loss = mse(w*x, y), w=1, x=2, y=0 -> dloss/dw = 2*(wx-y)*x = 8
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&Tensor::from_f64s(vec![1], &[1.0]).unwrap().with_grad());
        let x = tape.constant(Tensor::from_f64s(vec![1], &[2.0]).unwrap());
        let y = tape.constant(Tensor::from_f64s(vec![1], &[0.0]).unwrap());
        let pred = tape.mul(w, x).unwrap();
        let l = tape.mse_loss(pred, y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[8.0]);
    }

    #[test]
    fn loss_independent_of_leaf_gives_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let unused = tape.leaf(&Tensor::from_f64s(vec![1], &[1.0]).unwrap().with_grad());
        let used = tape.leaf(&Tensor::from_f64s(vec![1], &[3.0]).unwrap().with_grad());
        let l = tape.mse_loss(used, used).unwrap();
        // used - used is still connected, so backward succeeds; the unused
        // leaf simply accumulates nothing.
        tape.backward(l).unwrap();
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn backward_twice_is_error() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&Tensor::from_f64s(vec![1], &[1.0]).unwrap().with_grad());
        let l = tape.mean_all(w).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.backward(l).is_err());
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&Tensor::from_f64s(vec![2], &[1.0, 2.0]).unwrap().with_grad());
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn detached_loss_is_error() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::from_f64s(vec![1], &[1.0]).unwrap());
        let l = tape.mean_all(c).unwrap();
        assert!(tape.backward(l).is_err());
    }

    #[test]
    fn conv_identity_dirac_any_channels() {
        let mut tape = Tape::<f64>::new();
        let c = 3;
        let l = 7;
        let data: Vec<f64> = (0..c * l).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let x = tape.constant(Tensor::from_f64s(vec![c, l], &data).unwrap());
        // Dirac: w[o,i,1] = 1 if o==i else 0
        let mut w = vec![0.0; c * c * 3];
        for o in 0..c {
            w[(o * c + o) * 3 + 1] = 1.0;
        }
        let wv = tape.constant(Tensor::from_f64s(vec![c, c, 3], &w).unwrap());
        let b = tape.constant(Tensor::zeros(vec![c]));
        let y = tape.conv1d(x, wv, Some(b), 1, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_linearity_in_input() {
        let mut tape = Tape::<f64>::new();
        let x1 = tape.constant(Tensor::from_f64s(vec![1, 5], &[1.0, -2.0, 0.5, 3.0, 2.0]).unwrap());
        let x2 = tape.constant(Tensor::from_f64s(vec![1, 5], &[0.3, 1.0, -1.5, 0.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::from_f64s(vec![1, 1, 3], &[0.5, -1.0, 2.0]).unwrap());
        let a = 2.5;
        let bscale = -1.25;
        let ax1 = tape.scale(x1, a).unwrap();
        let bx2 = tape.scale(x2, bscale).unwrap();
        let combo = tape.add(ax1, bx2).unwrap();
        let lhs = tape.conv1d(combo, w, None, 1, 1, 1).unwrap();
        let y1 = tape.conv1d(x1, w, None, 1, 1, 1).unwrap();
        let y2 = tape.conv1d(x2, w, None, 1, 1, 1).unwrap();
        let ay1 = tape.scale(y1, a).unwrap();
        let by2 = tape.scale(y2, bscale).unwrap();
        let rhs = tape.add(ay1, by2).unwrap();
        let diff = tape.value(lhs).max_abs_diff(tape.value(rhs));
        assert!(diff < 1e-12, "conv not linear: {}", diff);
    }

    #[test]
    fn conv_zero_length_output_is_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 5]));
        assert!(tape.conv1d(x, w, None, 1, 0, 1).is_err());
    }

    #[test]
    fn topk_mask_counts_and_values() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(tensor2(&[&[1.0, 3.0, 2.0, 0.0], &[5.0, 5.0, 1.0, 1.0]]));
        let m = tape.row_topk_mask(s, 2).unwrap();
        let v = tape.value(m);
        assert_eq!(v.at2(0, 0), f64::MIN);
        assert_eq!(v.at2(0, 1), 3.0);
        assert_eq!(v.at2(0, 2), 2.0);
        assert_eq!(v.at2(0, 3), f64::MIN);
        // ties: lower indices kept
        assert_eq!(v.at2(1, 0), 5.0);
        assert_eq!(v.at2(1, 1), 5.0);
        assert_eq!(v.at2(1, 2), f64::MIN);
    }

    #[test]
    fn channel_mean_pools_over_time_and_batch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(tensor2(&[&[1.0, 3.0], &[2.0, 2.0]]));
        let b = tape.constant(tensor2(&[&[5.0, 7.0], &[0.0, 4.0]]));
        let m = tape.channel_mean(&[a, b]).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 2.0]);
        let sq = tape.channel_mean_sq(&[a]).unwrap();
        assert_eq!(tape.value(sq).data(), &[5.0, 4.0]);
    }

    #[test]
    fn activation_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64s(vec![3], &[0.0, -1.0, 2.0]).unwrap());
        let s = tape.activation(x, Activation::Sigmoid).unwrap();
        assert!((tape.value(s).data()[0] - 0.5).abs() < 1e-15);
        let gel = tape.activation(x, Activation::Gelu).unwrap();
        assert_eq!(tape.value(gel).data()[0], 0.0);
        let r = tape.activation(x, Activation::Relu).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_shape_mismatch_is_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 2]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn elementwise_add_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64s(vec![2], &[1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::from_f64s(vec![2], &[3.0, 4.0]).unwrap());
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
    }
}
