//! Full network assembly: stem block, four stages of rep-block + gated
//! attention units, tail block, and a pooled MLP velocity head — plus
//! whole-model fusion into the single-path deploy form and parameter/MAC
//! accounting.
//!
//! Stage layout: stage `i`'s blocks operate at the previous stage's width;
//! its final block changes channels to `stage_channels[i]` and applies
//! `stage_strides[i]`, so downsampling happens in the last block of each
//! stage and the per-stage output lengths are `L / prod(strides[..=i])`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flops;
use crate::gcu::{sa_gcu_forward_batch, GcuParams};
use crate::repblock::{
    kaiming_uniform, zeros_grad, NormMode, ParamBinder, RepBlockFusedParams, RepBlockTrainParams,
};
use crate::tensor::{Activation, Element, Tape, Tensor, Var};
use crate::tssa::AlphaMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    Train,
    Deploy,
}

impl ModelMode {
    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Train => "train",
            ModelMode::Deploy => "deploy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(ModelMode::Train),
            "deploy" => Some(ModelMode::Deploy),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub window_len: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub stage_strides: [usize; 4],
    pub tssa_e: f64,
    pub alpha_mode: AlphaMode,
    pub head_hidden: Vec<usize>,
    pub out_dim: usize,
    pub norm_enabled: bool,
    pub gate_activation: Activation,
    pub expansion_ratio: usize,
    pub post_block_relu: bool,
    pub gcu_pre_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 6,
            window_len: 200,
            stage_channels: [64, 128, 192, 256],
            blocks_per_stage: [2, 2, 2, 2],
            stage_strides: [1, 2, 2, 2],
            tssa_e: 50.0,
            alpha_mode: AlphaMode::SqrtChannels,
            head_hidden: vec![512],
            out_dim: 2,
            norm_enabled: true,
            gate_activation: Activation::Sigmoid,
            expansion_ratio: 1,
            post_block_relu: true,
            gcu_pre_norm: false,
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast desk-scale experiments and tests.
    pub fn tiny() -> Self {
        ModelConfig {
            window_len: 64,
            stage_channels: [8, 16, 16, 16],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_dim == 0 {
            return Err(Error::invalid("ModelConfig", "channel/output dims must be positive"));
        }
        if self.expansion_ratio == 0 {
            return Err(Error::invalid("ModelConfig", "expansion_ratio must be >= 1"));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::invalid("ModelConfig", "stage widths and block counts must be positive"));
        }
        if self.stage_strides.iter().any(|&s| !(s == 1 || s == 2)) {
            return Err(Error::invalid("ModelConfig", "stage strides must be 1 or 2"));
        }
        let stride_prod: usize = self.stage_strides.iter().product();
        if self.window_len == 0 || self.window_len % stride_prod != 0 {
            return Err(Error::invalid(
                "ModelConfig",
                format!("window length {} must divide by stride product {}", self.window_len, stride_prod),
            ));
        }
        if self.window_len / stride_prod == 0 {
            return Err(Error::invalid("ModelConfig", "window too short for the stride schedule"));
        }
        if !(self.tssa_e > 0.0 && self.tssa_e <= 100.0) {
            return Err(Error::invalid("ModelConfig", format!("tssa_e = {} outside (0, 100]", self.tssa_e)));
        }
        if let AlphaMode::Fixed(a) = self.alpha_mode {
            if a <= 0.0 {
                return Err(Error::invalid("ModelConfig", "alpha must be positive"));
            }
        }
        Ok(())
    }

    /// `(in_channels, out_channels, stride)` of every rep-block in order:
    /// stem, the stage blocks, tail.
    pub fn block_plan(&self) -> Vec<(usize, usize, usize)> {
        let mut plan = vec![(self.in_channels, self.stage_channels[0], 1)];
        let mut c = self.stage_channels[0];
        for stage in 0..4 {
            let blocks = self.blocks_per_stage[stage];
            for b in 0..blocks {
                let last = b + 1 == blocks;
                if last {
                    plan.push((c, self.stage_channels[stage], self.stage_strides[stage]));
                    c = self.stage_channels[stage];
                } else {
                    plan.push((c, c, 1));
                }
            }
        }
        plan.push((c, c, 1)); // tail
        plan
    }

    /// Temporal length after each stage.
    pub fn stage_lengths(&self) -> [usize; 4] {
        let mut l = self.window_len;
        let mut out = [0usize; 4];
        for (i, &s) in self.stage_strides.iter().enumerate() {
            l /= s;
            out[i] = l;
        }
        out
    }

    /// Pooled feature width entering the head.
    pub fn head_input_channels(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn head_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.head_input_channels()];
        dims.extend_from_slice(&self.head_hidden);
        dims.push(self.out_dim);
        dims
    }

    // ── key=value text schema (shared by checkpoints and config files) ──

    pub fn to_kv_text(&self) -> String {
        let join = |xs: &[usize]| xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let alpha = match self.alpha_mode {
            AlphaMode::SqrtChannels => "sqrt_c".to_string(),
            AlphaMode::Fixed(a) => format!("{}", a),
        };
        format!(
            "in_channels={}\nwindow_length={}\nstage_channels={}\nblocks_per_stage={}\nstage_strides={}\ntssa_e={}\nalpha={}\nhead_hidden={}\nout_dim={}\nnorm_enabled={}\ngate_activation={}\nexpansion_ratio={}\npost_block_relu={}\ngcu_pre_norm={}\n",
            self.in_channels,
            self.window_len,
            join(&self.stage_channels),
            join(&self.blocks_per_stage),
            join(&self.stage_strides),
            self.tssa_e,
            alpha,
            join(&self.head_hidden),
            self.out_dim,
            self.norm_enabled,
            self.gate_activation.name(),
            self.expansion_ratio,
            self.post_block_relu,
            self.gcu_pre_norm,
        )
    }

    /// Applies one `key=value` override. Returns false for unknown keys so
    /// callers can try other schemas.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::invalid("config", format!("bad integer `{}` for {}", v, key)))
        };
        let parse_bool = |v: &str| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Error::invalid("config", format!("bad bool `{}` for {}", v, key))),
        };
        let parse_list4 = |v: &str| -> Result<[usize; 4]> {
            let xs: Vec<usize> = v
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::invalid("config", format!("bad list `{}` for {}", v, key)))?;
            xs.try_into()
                .map_err(|_| Error::invalid("config", format!("{} needs exactly 4 entries", key)))
        };
        match key {
            "in_channels" => self.in_channels = parse_usize(value)?,
            "window_length" => self.window_len = parse_usize(value)?,
            "stage_channels" => self.stage_channels = parse_list4(value)?,
            "blocks_per_stage" => self.blocks_per_stage = parse_list4(value)?,
            "stage_strides" => self.stage_strides = parse_list4(value)?,
            "tssa_e" => {
                self.tssa_e = value
                    .parse::<f64>()
                    .map_err(|_| Error::invalid("config", format!("bad float `{}` for tssa_e", value)))?
            }
            "alpha" => {
                self.alpha_mode = if value == "sqrt_c" {
                    AlphaMode::SqrtChannels
                } else {
                    AlphaMode::Fixed(value.parse::<f64>().map_err(|_| {
                        Error::invalid("config", format!("alpha must be `sqrt_c` or a float, got `{}`", value))
                    })?)
                }
            }
            "head_hidden" => {
                self.head_hidden = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|p| p.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::invalid("config", format!("bad list `{}` for head_hidden", value)))?
                }
            }
            "out_dim" => self.out_dim = parse_usize(value)?,
            "norm_enabled" => self.norm_enabled = parse_bool(value)?,
            "gate_activation" => {
                self.gate_activation = Activation::parse(value).ok_or_else(|| {
                    Error::invalid("config", format!("unknown activation `{}`", value))
                })?
            }
            "expansion_ratio" => self.expansion_ratio = parse_usize(value)?,
            "post_block_relu" => self.post_block_relu = parse_bool(value)?,
            "gcu_pre_norm" => self.gcu_pre_norm = parse_bool(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (key, value) in parse_kv_lines(text)? {
            if !cfg.apply_kv(&key, &value)? {
                return Err(Error::invalid("config", format!("unknown key `{}`", key)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::invalid("config", format!("line {}: expected key=value, got `{}`", i + 1, line)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Either form of a rep-block, so one model type covers both phases.
#[derive(Clone, Debug)]
pub enum RepBlockForm<T: Element> {
    Train(RepBlockTrainParams<T>),
    Fused(RepBlockFusedParams<T>),
}

impl<T: Element> RepBlockForm<T> {
    pub fn in_channels(&self) -> usize {
        match self {
            RepBlockForm::Train(p) => p.in_channels,
            RepBlockForm::Fused(p) => p.wf.shape()[1],
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            RepBlockForm::Train(p) => p.out_channels,
            RepBlockForm::Fused(p) => p.wf.shape()[0],
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            RepBlockForm::Train(p) => p.stride,
            RepBlockForm::Fused(p) => p.stride,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            RepBlockForm::Train(p) => p.param_count(),
            RepBlockForm::Fused(p) => p.param_count(),
        }
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        match self {
            RepBlockForm::Train(p) => p.visit_params(f),
            RepBlockForm::Fused(p) => p.visit_params(f),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        match self {
            RepBlockForm::Train(p) => p.visit_params_mut(f),
            RepBlockForm::Fused(p) => p.visit_params_mut(f),
        }
    }

    fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        binder: &mut ParamBinder,
        xs: &[Var],
        mode: NormMode,
    ) -> Result<Vec<Var>> {
        match self {
            RepBlockForm::Train(p) => p.forward_batch(tape, binder, xs, mode),
            RepBlockForm::Fused(p) => p.forward_batch(tape, binder, xs),
        }
    }

    fn forward_batch_update(
        &mut self,
        tape: &mut Tape<T>,
        binder: &mut ParamBinder,
        xs: &[Var],
    ) -> Result<Vec<Var>> {
        match self {
            RepBlockForm::Train(p) => p.forward_batch_update(tape, binder, xs),
            RepBlockForm::Fused(p) => p.forward_batch(tape, binder, xs),
        }
    }
}

/// One backbone unit: rep-block, then a gated attention mixer with its
/// residual; a second residual wraps the whole unit when shapes permit.
#[derive(Clone, Debug)]
pub struct RepIlnBlock<T: Element> {
    pub rep: RepBlockForm<T>,
    pub gcu: GcuParams<T>,
}

impl<T: Element> RepIlnBlock<T> {
    fn outer_skip(&self) -> bool {
        self.rep.in_channels() == self.rep.out_channels() && self.rep.stride() == 1
    }
}

/// Fully-connected head over the time-pooled features.
#[derive(Clone, Debug)]
pub struct Mlp<T: Element> {
    /// `(weight [out, in], bias [out])` per layer; ReLU between layers.
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Element> Mlp<T> {
    fn new_random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| (kaiming_uniform(rng, vec![w[1], w[0]], w[0]), zeros_grad(vec![w[1]])))
            .collect();
        Mlp { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.numel() + b.numel()).sum()
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        for (w, b) in &self.layers {
            f(w);
            f(b);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        for (w, b) in &mut self.layers {
            f(w);
            f(b);
        }
    }

    /// Applies the stack to each pooled `[C]` vector.
    fn forward_batch(&self, tape: &mut Tape<T>, binder: &mut ParamBinder, xs: &[Var]) -> Result<Vec<Var>> {
        let bound: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|(w, b)| (binder.bind(tape, w), binder.bind(tape, b)))
            .collect();
        xs.iter()
            .map(|&x| {
                let c = tape.value(x).numel();
                let mut h = tape.reshape(x, vec![c, 1])?;
                for (i, &(w, b)) in bound.iter().enumerate() {
                    h = tape.matmul(w, h)?;
                    h = tape.add_channel(h, b)?;
                    if i + 1 < bound.len() {
                        h = tape.activation(h, Activation::Relu)?;
                    }
                }
                let out = tape.value(h).numel();
                tape.reshape(h, vec![out])
            })
            .collect()
    }
}

/// Per-channel input standardization constants, persisted with checkpoints.
#[derive(Clone, Debug)]
pub struct InputStats<T: Element> {
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub mode: ModelMode,
    pub stem: RepBlockForm<T>,
    pub blocks: Vec<RepIlnBlock<T>>,
    pub tail: RepBlockForm<T>,
    pub head: Mlp<T>,
    pub input_stats: Option<InputStats<T>>,
}

impl<T: Element> Model<T> {
    /// Fresh train-form model with seeded Kaiming-uniform initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let post = if config.post_block_relu {
            Some(Activation::Relu)
        } else {
            None
        };
        let plan = config.block_plan();
        let mk_rep = |rng: &mut ChaCha8Rng, (ci, co, stride): (usize, usize, usize)| {
            RepBlockForm::Train(RepBlockTrainParams::new_random(
                rng,
                ci,
                co,
                stride,
                config.norm_enabled,
                post,
            ))
        };
        let stem = mk_rep(&mut rng, plan[0]);
        let mut blocks = Vec::new();
        for &spec in &plan[1..plan.len() - 1] {
            let rep = mk_rep(&mut rng, spec);
            let gcu = GcuParams::new_random(
                &mut rng,
                spec.1,
                config.expansion_ratio,
                config.gate_activation,
                config.alpha_mode,
                config.tssa_e,
                config.gcu_pre_norm,
            );
            blocks.push(RepIlnBlock { rep, gcu });
        }
        let tail = mk_rep(&mut rng, plan[plan.len() - 1]);
        let head = Mlp::new_random(&mut rng, &config.head_dims());
        Ok(Model {
            config,
            mode: ModelMode::Train,
            stem,
            blocks,
            tail,
            head,
            input_stats: None,
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |t| n += t.numel());
        n
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a Tensor<T>)) {
        self.stem.visit_params(f);
        for b in &self.blocks {
            b.rep.visit_params(f);
            b.gcu.visit_params(f);
        }
        self.tail.visit_params(f);
        self.head.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Tensor<T>)) {
        self.stem.visit_params_mut(f);
        for b in &mut self.blocks {
            b.rep.visit_params_mut(f);
            b.gcu.visit_params_mut(f);
        }
        self.tail.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }

    fn check_input_shapes(&self, tape: &Tape<T>, xs: &[Var]) -> Result<()> {
        let want = [self.config.in_channels, self.config.window_len];
        for &x in xs {
            if tape.value(x).shape() != want {
                return Err(Error::shape(
                    "model_forward",
                    format!("window shape {:?}, expected {:?}", tape.value(x).shape(), want),
                ));
            }
        }
        Ok(())
    }

    /// Inference-path forward: normalization uses running statistics; the
    /// model is read-only and the batch windows stay independent.
    pub fn forward_eval(
        &self,
        tape: &mut Tape<T>,
        binder: &mut ParamBinder,
        xs: &[Var],
    ) -> Result<Vec<Var>> {
        self.check_input_shapes(tape, xs)?;
        let mut hs = self.stem.forward_batch(tape, binder, xs, NormMode::Running)?;
        for block in &self.blocks {
            hs = block_forward(tape, binder, block, &hs)?;
        }
        hs = self.tail.forward_batch(tape, binder, &hs, NormMode::Running)?;
        self.finish_head(tape, binder, &hs)
    }

    /// Training-path forward: batch-statistic normalization with running
    /// estimate updates.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<T>,
        binder: &mut ParamBinder,
        xs: &[Var],
    ) -> Result<Vec<Var>> {
        self.check_input_shapes(tape, xs)?;
        let mut hs = self.stem.forward_batch_update(tape, binder, xs)?;
        for block in &mut self.blocks {
            hs = block_forward_update(tape, binder, block, &hs)?;
        }
        hs = self.tail.forward_batch_update(tape, binder, &hs)?;
        self.finish_head(tape, binder, &hs)
    }

    fn finish_head(&self, tape: &mut Tape<T>, binder: &mut ParamBinder, hs: &[Var]) -> Result<Vec<Var>> {
        let pooled: Vec<Var> = hs
            .iter()
            .map(|&h| tape.channel_mean(&[h]))
            .collect::<Result<_>>()?;
        self.head.forward_batch(tape, binder, &pooled)
    }

    /// Convenience inference over owned windows; output tensors are
    /// `[out_dim]` each. Errors if any output is non-finite.
    pub fn predict(&self, windows: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let vars: Vec<Var> = windows.iter().map(|w| tape.constant(w.clone())).collect();
        let outs = self.forward_eval(&mut tape, &mut binder, &vars)?;
        outs.into_iter()
            .map(|v| {
                let t = tape.value(v).clone();
                t.validate_finite("model output")?;
                Ok(t)
            })
            .collect()
    }

    /// Copies leaf gradients back onto the parameter tensors after a
    /// backward pass, verifying binder order against the traversal.
    pub fn store_grads(&mut self, tape: &Tape<T>, binder: &ParamBinder) -> Result<()> {
        let mut idx = 0;
        let vars = binder.vars();
        let ptrs = binder.ptrs();
        let mut err = None;
        self.visit_params_mut(&mut |t| {
            if err.is_some() {
                return;
            }
            if idx >= vars.len() || ptrs[idx] != t as *const Tensor<T> as usize {
                err = Some(idx);
                return;
            }
            let g = tape
                .grad(vars[idx])
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); t.numel()]);
            t.set_grad(Some(g));
            idx += 1;
        });
        if let Some(at) = err {
            return Err(Error::invalid(
                "store_grads",
                format!("parameter traversal diverged from forward binding at index {}", at),
            ));
        }
        if idx != vars.len() {
            return Err(Error::invalid(
                "store_grads",
                format!("bound {} parameters but traversed {}", vars.len(), idx),
            ));
        }
        Ok(())
    }

    /// Merges every rep-block into its single-path form. Attention units and
    /// the head are untouched.
    pub fn fuse(&self) -> Result<Model<T>> {
        if self.mode == ModelMode::Deploy {
            return Err(Error::invalid("fuse", "model is already in deploy form"));
        }
        let fuse_form = |form: &RepBlockForm<T>| -> Result<RepBlockForm<T>> {
            match form {
                RepBlockForm::Train(p) => Ok(RepBlockForm::Fused(p.fuse()?)),
                RepBlockForm::Fused(_) => Err(Error::invalid("fuse", "block already fused")),
            }
        };
        Ok(Model {
            config: self.config.clone(),
            mode: ModelMode::Deploy,
            stem: fuse_form(&self.stem)?,
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    Ok(RepIlnBlock {
                        rep: fuse_form(&b.rep)?,
                        gcu: b.gcu.clone(),
                    })
                })
                .collect::<Result<_>>()?,
            tail: fuse_form(&self.tail)?,
            head: self.head.clone(),
            input_stats: self.input_stats.clone(),
        })
    }

    /// Analytic multiply-accumulate count of one forward pass at window
    /// length `l`.
    pub fn count_flops(&self, l: usize) -> u64 {
        let mut total = 0u64;
        let mut len = l;
        total += rep_macs(&self.stem, &mut len);
        for b in &self.blocks {
            total += rep_macs(&b.rep, &mut len);
            total += flops::gcu_macs(b.rep.out_channels(), b.gcu.hidden_channels(), len);
        }
        total += rep_macs(&self.tail, &mut len);
        total += flops::mlp_macs(&self.config.head_dims());
        total
    }
}

/// MACs of one rep-block at input length `*len`; advances `*len` past the
/// block's stride.
fn rep_macs<T: Element>(rep: &RepBlockForm<T>, len: &mut usize) -> u64 {
    let l_out = match rep.stride() {
        1 => *len,
        s => (*len - 1) / s + 1,
    };
    let macs = match rep {
        RepBlockForm::Train(p) => {
            let norms = [&p.norm3, &p.norm1, &p.norm_id].iter().filter(|n| n.is_some()).count();
            flops::repblock_train_macs(p.in_channels, p.out_channels, l_out, norms)
        }
        RepBlockForm::Fused(p) => flops::repblock_fused_macs(p.wf.shape()[1], p.wf.shape()[0], l_out),
    };
    *len = l_out;
    macs
}

/// `X' = RepBlock(X); X'' = X' + GCU(X'); out = X + X''` when shapes permit.
fn block_forward<T: Element>(
    tape: &mut Tape<T>,
    binder: &mut ParamBinder,
    block: &RepIlnBlock<T>,
    xs: &[Var],
) -> Result<Vec<Var>> {
    let h1 = block.rep.forward_batch(tape, binder, xs, NormMode::Running)?;
    block_mix(tape, binder, block, xs, h1)
}

fn block_forward_update<T: Element>(
    tape: &mut Tape<T>,
    binder: &mut ParamBinder,
    block: &mut RepIlnBlock<T>,
    xs: &[Var],
) -> Result<Vec<Var>> {
    let h1 = block.rep.forward_batch_update(tape, binder, xs)?;
    block_mix(tape, binder, block, xs, h1)
}

fn block_mix<T: Element>(
    tape: &mut Tape<T>,
    binder: &mut ParamBinder,
    block: &RepIlnBlock<T>,
    xs: &[Var],
    h1: Vec<Var>,
) -> Result<Vec<Var>> {
    let g = sa_gcu_forward_batch(tape, binder, &block.gcu, &h1)?;
    let mut outs = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let h2 = tape.add(h1[i], g[i])?;
        let out = if block.outer_skip() {
            tape.add(xs[i], h2)?
        } else {
            h2
        };
        outs.push(out);
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            window_len: 16,
            stage_channels: [4, 4, 8, 8],
            blocks_per_stage: [1, 1, 1, 1],
            head_hidden: vec![8],
            ..Default::default()
        }
    }

    #[test]
    fn default_config_shapes_and_plan() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_lengths(), [200, 100, 50, 25]);
        assert_eq!(cfg.head_input_channels(), 256);
        let plan = cfg.block_plan();
        assert_eq!(plan.len(), 1 + 8 + 1);
        assert_eq!(plan[0], (6, 64, 1));
        assert_eq!(plan[1], (64, 64, 1));
        assert_eq!(plan[2], (64, 64, 1)); // stage 1 final, stride 1
        assert_eq!(plan[3], (64, 64, 1));
        assert_eq!(plan[4], (64, 128, 2)); // stage 2 final downsamples
        assert_eq!(plan[5], (128, 128, 1));
        assert_eq!(plan[6], (128, 192, 2));
        assert_eq!(plan[7], (192, 192, 1));
        assert_eq!(plan[8], (192, 256, 2));
        assert_eq!(plan[9], (256, 256, 1)); // tail
    }

    #[test]
    fn indivisible_window_rejected() {
        let cfg = ModelConfig {
            window_len: 100,
            stage_strides: [1, 2, 2, 2],
            ..Default::default()
        };
        assert!(cfg.validate().is_err()); // 100 % 8 != 0
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = ModelConfig::tiny();
        cfg.tssa_e = 25.0;
        cfg.alpha_mode = AlphaMode::Fixed(1.5);
        cfg.head_hidden = vec![32, 16];
        cfg.norm_enabled = false;
        let text = cfg.to_kv_text();
        let back = ModelConfig::from_kv_text(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        assert!(ModelConfig::from_kv_text("bogus_key=1\n").is_err());
    }

    #[test]
    fn forward_shapes_and_finite_output() {
        let cfg = tiny_config();
        let model = Model::<f32>::new(cfg.clone(), 42).unwrap();
        let x = Tensor::<f32>::from_f64s(
            vec![6, 16],
            &(0..96).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(),
        )
        .unwrap();
        let outs = model.predict(&[x]).unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(outs[0].shape(), &[2]);
        outs[0].validate_finite("out").unwrap();
    }

    #[test]
    fn zeroed_head_final_layer_outputs_zero() {
        let cfg = tiny_config();
        let mut model = Model::<f32>::new(cfg, 7).unwrap();
        let last = model.head.layers.len() - 1;
        for v in model.head.layers[last].0.data_mut() {
            *v = 0.0;
        }
        for v in model.head.layers[last].1.data_mut() {
            *v = 0.0;
        }
        let x = Tensor::<f32>::from_f64s(vec![6, 16], &vec![0.5; 96]).unwrap();
        let outs = model.predict(&[x]).unwrap();
        assert_eq!(outs[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn batch_of_three_equals_looped_singles_bit_exactly() {
        let cfg = tiny_config();
        let model = Model::<f32>::new(cfg, 9).unwrap();
        let windows: Vec<Tensor<f32>> = (0..3)
            .map(|k| {
                Tensor::from_f64s(
                    vec![6, 16],
                    &(0..96).map(|i| ((i + k * 31) as f64 * 0.11).cos()).collect::<Vec<_>>(),
                )
                .unwrap()
            })
            .collect();
        let batched = model.predict(&windows).unwrap();
        for (i, w) in windows.iter().enumerate() {
            let single = model.predict(std::slice::from_ref(w)).unwrap();
            assert_eq!(single[0].data(), batched[i].data());
        }
    }

    #[test]
    fn fuse_preserves_outputs_and_reduces_params() {
        let cfg = tiny_config();
        let model = Model::<f64>::new(cfg, 3).unwrap();
        let fused = model.fuse().unwrap();
        assert_eq!(fused.mode, ModelMode::Deploy);
        assert!(fused.param_count() < model.param_count());
        assert!(fused.fuse().is_err());

        let x = Tensor::<f64>::from_f64s(
            vec![6, 16],
            &(0..96).map(|i| ((i * 13 % 17) as f64) * 0.1 - 0.8).collect::<Vec<_>>(),
        )
        .unwrap();
        let a = model.predict(std::slice::from_ref(&x)).unwrap();
        let b = fused.predict(std::slice::from_ref(&x)).unwrap();
        let d = a[0].max_abs_diff(&b[0]);
        assert!(d <= 1e-10, "deviation {}", d);
    }

    #[test]
    fn count_flops_tracks_attention_growth() {
        let cfg = ModelConfig {
            window_len: 64,
            ..tiny_config()
        };
        let model = Model::<f32>::new(cfg, 1).unwrap();
        let m1 = model.count_flops(64);
        let m2 = model.count_flops(128);
        // Superlinear growth driven by the attention terms.
        assert!(m2 as f64 > 2.1 * m1 as f64, "{} vs {}", m1, m2);
    }

    #[test]
    fn store_grads_aligns_with_traversal() {
        let cfg = tiny_config();
        let mut model = Model::<f64>::new(cfg, 5).unwrap();
        let x = Tensor::<f64>::from_f64s(vec![6, 16], &vec![0.25; 96]).unwrap();
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let xv = tape.constant(x);
        let outs = model.forward_train(&mut tape, &mut binder, &[xv]).unwrap();
        let target = tape.constant(Tensor::from_f64s(vec![2], &[1.0, -1.0]).unwrap());
        let loss = tape.mse_loss(outs[0], target).unwrap();
        tape.backward(loss).unwrap();
        model.store_grads(&tape, &binder).unwrap();
        // Every module holds at least one parameter with a gradient set.
        let mut any_missing = false;
        model.visit_params(&mut |t| {
            if t.grad().is_none() {
                any_missing = true;
            }
        });
        assert!(!any_missing);
    }
}
