//! Block and model definitions: vanilla FFN, channel-idle train-form FFN,
//! condensed inference-form FFN, multi-head self-attention, pooling token
//! mixer, patch embedding and classifier head.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    add, add_bias, batchnorm_apply_batch, batchnorm_eval, batchnorm_train_step, concat_cols, gelu,
    layernorm, matmul, matmul_fast, mean_over_rows, slice_cols, softmax_rows, BatchNormParams,
    Matrix2D,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixerKind {
    #[serde(rename = "self-attention")]
    SelfAttention,
    #[serde(rename = "average-pool")]
    AveragePool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FfnForm {
    #[serde(rename = "vanilla-ln")]
    VanillaLn,
    #[serde(rename = "idle-train")]
    IdleTrain,
    #[serde(rename = "idle-infer")]
    IdleInfer,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub expand_ratio: f64,
    pub idle_ratio: f64,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    pub mixer: MixerKind,
    pub ffn_form: FfnForm,
    pub seed: u64,
}

fn default_in_channels() -> usize {
    3
}

pub const PRESET_NAMES: &[&str] = &[
    "deit-tiny",
    "deit-small",
    "deit-base",
    "vit-large",
    "vit-huge",
    "pool-tiny",
];

impl ModelConfig {
    /// Named architecture presets. `idle_ratio` defaults to 0.75 and
    /// `ffn_form` to vanilla-ln; callers override both as needed.
    pub fn preset(name: &str) -> Result<ModelConfig> {
        let (depth, embed_dim, heads, patch, image, classes, mixer) = match name {
            "deit-tiny" => (12, 192, 3, 16, 224, 1000, MixerKind::SelfAttention),
            "deit-small" => (12, 384, 6, 16, 224, 1000, MixerKind::SelfAttention),
            "deit-base" => (12, 768, 12, 16, 224, 1000, MixerKind::SelfAttention),
            "vit-large" => (24, 1024, 16, 16, 224, 1000, MixerKind::SelfAttention),
            "vit-huge" => (32, 1280, 16, 14, 224, 1000, MixerKind::SelfAttention),
            "pool-tiny" => (2, 32, 1, 8, 32, 4, MixerKind::AveragePool),
            _ => {
                return Err(Error::Validation(format!(
                    "unknown preset '{name}', expected one of {PRESET_NAMES:?}"
                )))
            }
        };
        Ok(ModelConfig {
            depth,
            embed_dim,
            heads,
            expand_ratio: 4.0,
            idle_ratio: 0.75,
            patch_size: patch,
            image_size: image,
            in_channels: 3,
            num_classes: classes,
            mixer,
            ffn_form: FfnForm::VanillaLn,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Validation("depth must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Validation(format!(
                "embed_dim {} must be positive and divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Validation(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.expand_ratio < 1.0 {
            return Err(Error::Validation(format!(
                "expand_ratio {} must be >= 1",
                self.expand_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.idle_ratio) {
            return Err(Error::Validation(format!(
                "idle_ratio {} must be in [0, 1]",
                self.idle_ratio
            )));
        }
        if self.hidden_channels() == 0 {
            return Err(Error::Validation("expanded FFN width rounds to zero".into()));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Validation(
                "num_classes and in_channels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Expanded FFN width rho*C.
    pub fn hidden_channels(&self) -> usize {
        (self.expand_ratio * self.embed_dim as f64).round() as usize
    }

    /// Active (nonlinear) width mu*C = round((1 - theta) * rho*C).
    pub fn active_channels(&self) -> usize {
        ((1.0 - self.idle_ratio) * self.hidden_channels() as f64).round() as usize
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Token count including the class token.
    pub fn token_count(&self) -> usize {
        self.num_patches() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
    pub eps: S,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn identity_init(channels: usize, eps: S) -> Self {
        LayerNormParams {
            gamma: vec![S::one(); channels],
            beta: vec![S::zero(); channels],
            eps,
        }
    }

    pub fn apply(&self, x: &Matrix2D<S>) -> Result<Matrix2D<S>> {
        layernorm(x, &self.gamma, &self.beta, self.eps)
    }
}

/// Standard FFN with LayerNorm and full activation.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaFfn<S> {
    pub ln: LayerNormParams<S>,
    pub w_in: Matrix2D<S>,
    pub b_in: Vec<S>,
    pub w_out: Matrix2D<S>,
    pub b_out: Vec<S>,
}

/// Train-form channel-idle FFN: BN -> W_in -> partial GELU -> BN -> W_out, plus shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct IdleFfnTrain<S> {
    pub bn1: BatchNormParams<S>,
    pub w_in: Matrix2D<S>,
    pub b_in: Vec<S>,
    pub bn2: BatchNormParams<S>,
    pub w_out: Matrix2D<S>,
    pub b_out: Vec<S>,
    /// Active (nonlinear) column count; columns [active, hidden) idle.
    pub active: usize,
}

/// Condensed inference form: three weight matrices, two bias vectors,
/// no normalization parameters, no explicit shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct IdleFfnInfer<S> {
    pub w_act_in: Matrix2D<S>,
    pub b_act_in: Vec<S>,
    pub w_act_out: Matrix2D<S>,
    pub w_merged: Matrix2D<S>,
    pub b_merged: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnLayer<S> {
    Vanilla(VanillaFfn<S>),
    IdleTrain(IdleFfnTrain<S>),
    IdleInfer(IdleFfnInfer<S>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock<S> {
    pub ln: LayerNormParams<S>,
    pub w_qkv: Matrix2D<S>,
    pub b_qkv: Vec<S>,
    pub w_proj: Matrix2D<S>,
    pub b_proj: Vec<S>,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer<S> {
    Attention(AttentionBlock<S>),
    Pool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub mixer: Mixer<S>,
    pub ffn: FfnLayer<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed<S> {
    /// (P^2 * in_channels) x C patchify projection.
    pub weight: Matrix2D<S>,
    pub bias: Vec<S>,
    /// (T + 1) x C learned positional table, class token at row 0.
    pub pos: Matrix2D<S>,
    pub cls: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub cfg: ModelConfig,
    pub patch: PatchEmbed<S>,
    pub blocks: Vec<Block<S>>,
    pub final_norm: LayerNormParams<S>,
    pub head_w: Matrix2D<S>,
    pub head_b: Vec<S>,
}

/// Wall-clock seconds accumulated per component category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ComponentTimings {
    pub patch_embed: f64,
    pub mhsa: f64,
    pub ffn: f64,
    pub other: f64,
}

fn mm<S: Scalar>(fast: bool, a: &Matrix2D<S>, b: &Matrix2D<S>) -> Result<Matrix2D<S>> {
    if fast {
        matmul_fast(a, b)
    } else {
        matmul(a, b)
    }
}

/// Y = Act(LN(x) W_in + b_in) W_out + b_out + x.
pub fn forward_ffn_vanilla<S: Scalar>(
    ffn: &VanillaFfn<S>,
    x: &Matrix2D<S>,
    fast: bool,
) -> Result<Matrix2D<S>> {
    let h = ffn.ln.apply(x)?;
    let h = add_bias(&mm(fast, &h, &ffn.w_in)?, &ffn.b_in)?;
    let h = gelu(&h);
    let h = add_bias(&mm(fast, &h, &ffn.w_out)?, &ffn.b_out)?;
    add(&h, x)
}

impl<S: Scalar> IdleFfnTrain<S> {
    pub fn hidden(&self) -> usize {
        self.w_in.cols()
    }

    pub fn channels(&self) -> usize {
        self.w_in.rows()
    }

    /// Apply GELU to the active columns, pass the idle columns through.
    fn partial_activation(&self, h: &Matrix2D<S>) -> Result<Matrix2D<S>> {
        if self.active == 0 {
            Ok(h.clone())
        } else if self.active == self.hidden() {
            Ok(gelu(h))
        } else {
            let act = gelu(&slice_cols(h, 0, self.active)?);
            let idle = slice_cols(h, self.active, self.hidden())?;
            concat_cols(&act, &idle)
        }
    }

    /// Eval-mode forward with running statistics.
    pub fn forward_eval(&self, x: &Matrix2D<S>, fast: bool) -> Result<Matrix2D<S>> {
        let h = batchnorm_eval(x, &self.bn1)?;
        let h = add_bias(&mm(fast, &h, &self.w_in)?, &self.b_in)?;
        let h = self.partial_activation(&h)?;
        let h = batchnorm_eval(&h, &self.bn2)?;
        let h = add_bias(&mm(fast, &h, &self.w_out)?, &self.b_out)?;
        add(&h, x)
    }

    /// Train-mode forward: batch statistics, running stats updated.
    pub fn forward_train(&mut self, x: &Matrix2D<S>, momentum: S) -> Result<Matrix2D<S>> {
        if self.bn1.frozen || self.bn2.frozen {
            return Err(Error::State(
                "train-mode forward on a frozen channel-idle FFN".into(),
            ));
        }
        let h = batchnorm_train_step(x, &mut self.bn1, momentum)?;
        let h = add_bias(&matmul(&h, &self.w_in)?, &self.b_in)?;
        let h = self.partial_activation(&h)?;
        let h = batchnorm_train_step(&h, &mut self.bn2, momentum)?;
        let h = add_bias(&matmul(&h, &self.w_out)?, &self.b_out)?;
        add(&h, x)
    }

    /// Train-mode forward that leaves running statistics untouched; the
    /// gradient checker differentiates this map.
    pub fn forward_train_pure(&self, x: &Matrix2D<S>) -> Result<Matrix2D<S>> {
        let h = batchnorm_apply_batch(x, &self.bn1)?;
        let h = add_bias(&matmul(&h, &self.w_in)?, &self.b_in)?;
        let h = self.partial_activation(&h)?;
        let h = batchnorm_apply_batch(&h, &self.bn2)?;
        let h = add_bias(&matmul(&h, &self.w_out)?, &self.b_out)?;
        add(&h, x)
    }

    pub fn freeze(&mut self) {
        self.bn1.frozen = true;
        self.bn2.frozen = true;
    }
}

/// Z = Act(x W_act_in + b_act_in) W_act_out + x W_merged + b_merged.
pub fn forward_ffn_idle_infer<S: Scalar>(
    ffn: &IdleFfnInfer<S>,
    x: &Matrix2D<S>,
    fast: bool,
) -> Result<Matrix2D<S>> {
    let merged = add_bias(&mm(fast, x, &ffn.w_merged)?, &ffn.b_merged)?;
    if ffn.w_act_in.cols() == 0 {
        return Ok(merged);
    }
    let a = add_bias(&mm(fast, x, &ffn.w_act_in)?, &ffn.b_act_in)?;
    let a = mm(fast, &gelu(&a), &ffn.w_act_out)?;
    add(&a, &merged)
}

impl<S: Scalar> FfnLayer<S> {
    pub fn forward_eval(&self, x: &Matrix2D<S>, fast: bool) -> Result<Matrix2D<S>> {
        match self {
            FfnLayer::Vanilla(f) => forward_ffn_vanilla(f, x, fast),
            FfnLayer::IdleTrain(f) => f.forward_eval(x, fast),
            FfnLayer::IdleInfer(f) => forward_ffn_idle_infer(f, x, fast),
        }
    }
}

/// Standard multi-head self-attention sub-block with pre-LN and shortcut.
pub fn forward_mhsa<S: Scalar>(
    attn: &AttentionBlock<S>,
    x: &Matrix2D<S>,
    fast: bool,
) -> Result<Matrix2D<S>> {
    let c = x.cols();
    if attn.w_qkv.rows() != c {
        return Err(Error::Dimension(format!(
            "mhsa: input cols {} vs qkv rows {}",
            c,
            attn.w_qkv.rows()
        )));
    }
    let n = x.rows();
    let d = c / attn.heads;
    let h = attn.ln.apply(x)?;
    let qkv = add_bias(&mm(fast, &h, &attn.w_qkv)?, &attn.b_qkv)?;
    let scale = S::of_f64(1.0 / (d as f64).sqrt());
    let mut ctx = Matrix2D::zeros(n, c);
    for head in 0..attn.heads {
        let q = slice_cols(&qkv, head * d, (head + 1) * d)?;
        let k = slice_cols(&qkv, c + head * d, c + (head + 1) * d)?;
        let v = slice_cols(&qkv, 2 * c + head * d, 2 * c + (head + 1) * d)?;
        let mut scores = mm(fast, &q, &k.transpose())?;
        for s in scores.data_mut() {
            *s *= scale;
        }
        let weights = softmax_rows(&scores);
        let out = mm(fast, &weights, &v)?;
        for r in 0..n {
            ctx.row_mut(r)[head * d..(head + 1) * d].copy_from_slice(out.row(r));
        }
    }
    let proj = add_bias(&mm(fast, &ctx, &attn.w_proj)?, &attn.b_proj)?;
    add(&proj, x)
}

/// Pool token mixer: per-token residual update toward the token mean,
/// x + (mean - x), i.e. every token moves to the global token mean.
pub fn forward_pool_mixer<S: Scalar>(x: &Matrix2D<S>) -> Matrix2D<S> {
    let mean = mean_over_rows(x);
    let mut out = x.clone();
    for r in 0..out.rows() {
        out.row_mut(r).copy_from_slice(mean.row(0));
    }
    out
}

/// Patchify an image (CHW layout, channel-major patch vectors), project,
/// prepend the class token and add the positional table.
pub fn forward_patch_embed<S: Scalar>(
    model: &Model<S>,
    image: &[S],
    fast: bool,
) -> Result<Matrix2D<S>> {
    let cfg = &model.cfg;
    let expect = cfg.in_channels * cfg.image_size * cfg.image_size;
    if image.len() != expect {
        return Err(Error::Dimension(format!(
            "image has {} values, config {}x{}x{} needs {}",
            image.len(),
            cfg.in_channels,
            cfg.image_size,
            cfg.image_size,
            expect
        )));
    }
    let p = cfg.patch_size;
    let side = cfg.patches_per_side();
    let plane = cfg.image_size * cfg.image_size;
    let patch_dim = p * p * cfg.in_channels;
    let mut patches = Matrix2D::zeros(cfg.num_patches(), patch_dim);
    for py in 0..side {
        for px in 0..side {
            let row = patches.row_mut(py * side + px);
            let mut idx = 0;
            for ch in 0..cfg.in_channels {
                for dy in 0..p {
                    let base = ch * plane + (py * p + dy) * cfg.image_size + px * p;
                    row[idx..idx + p].copy_from_slice(&image[base..base + p]);
                    idx += p;
                }
            }
        }
    }
    let tokens = add_bias(&mm(fast, &patches, &model.patch.weight)?, &model.patch.bias)?;
    let c = cfg.embed_dim;
    let mut with_cls = Matrix2D::zeros(tokens.rows() + 1, c);
    with_cls.row_mut(0).copy_from_slice(&model.patch.cls);
    for r in 0..tokens.rows() {
        with_cls.row_mut(r + 1).copy_from_slice(tokens.row(r));
    }
    add(&with_cls, &model.patch.pos)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    pub timing: bool,
    pub fast: bool,
}

impl<S: Scalar> Model<S> {
    /// Full eval-mode forward from a CHW image to class logits.
    pub fn forward(
        &self,
        image: &[S],
        opts: ForwardOpts,
    ) -> Result<(Vec<S>, Option<ComponentTimings>)> {
        let mut t = ComponentTimings::default();
        let clock = |on: bool| if on { Some(Instant::now()) } else { None };
        let lap = |start: Option<Instant>, acc: &mut f64| {
            if let Some(s) = start {
                *acc += s.elapsed().as_secs_f64();
            }
        };

        let start = clock(opts.timing);
        let mut x = forward_patch_embed(self, image, opts.fast)?;
        lap(start, &mut t.patch_embed);

        for block in &self.blocks {
            let start = clock(opts.timing);
            x = match &block.mixer {
                Mixer::Attention(attn) => forward_mhsa(attn, &x, opts.fast)?,
                Mixer::Pool => forward_pool_mixer(&x),
            };
            lap(start, &mut t.mhsa);
            let start = clock(opts.timing);
            x = block.ffn.forward_eval(&x, opts.fast)?;
            lap(start, &mut t.ffn);
        }

        let start = clock(opts.timing);
        let x = self.final_norm.apply(&x)?;
        let cls = Matrix2D::from_vec(1, x.cols(), x.row(0).to_vec())?;
        let logits = add_bias(&mm(opts.fast, &cls, &self.head_w)?, &self.head_b)?;
        lap(start, &mut t.other);

        Ok((
            logits.row(0).to_vec(),
            if opts.timing { Some(t) } else { None },
        ))
    }

    /// Eval-mode forward over a ready token matrix (no patch embedding, no
    /// class token); the head reads the mean token. Used by the toy trainer.
    pub fn forward_tokens(&self, tokens: &Matrix2D<S>, fast: bool) -> Result<Vec<S>> {
        let mut x = tokens.clone();
        for block in &self.blocks {
            x = match &block.mixer {
                Mixer::Attention(attn) => forward_mhsa(attn, &x, fast)?,
                Mixer::Pool => forward_pool_mixer(&x),
            };
            x = block.ffn.forward_eval(&x, fast)?;
        }
        let x = self.final_norm.apply(&x)?;
        let pooled = mean_over_rows(&x);
        let logits = add_bias(&mm(fast, &pooled, &self.head_w)?, &self.head_b)?;
        Ok(logits.row(0).to_vec())
    }

    /// Freeze every BatchNorm in every FFN layer.
    pub fn freeze_batchnorms(&mut self) {
        for block in &mut self.blocks {
            if let FfnLayer::IdleTrain(f) = &mut block.ffn {
                f.freeze();
            }
        }
    }
}
