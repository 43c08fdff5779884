//! A small Vision Transformer with register attachment points.
//!
//! The encoder is pre-norm: `x += proj(attn(LN(x)))`, then
//! `x += mlp(LN(x))`, with a final LayerNorm whose CLS row is the output
//! feature. Sequences are processed as one `[batch*seq, dim]` tensor;
//! [`TokenSequence`] carries the layout (one CLS token at position 0,
//! then image slots, then appended register slots).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::TensorFile;
use crate::registers::RegisterBank;
use crate::rng::RngStream;
use crate::tensor::{
    concat_interleaved, multi_head_attention, AttentionCapture, AttentionSpec, Tensor, TensorError,
};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum VitError {
    #[error("bad config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint does not match model: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegisterMode {
    None,
    Learnable,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegisterDepth {
    Shallow,
    Deep,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub n_classes: usize,
    pub register_mode: RegisterMode,
    pub register_depth: RegisterDepth,
    pub register_count: usize,
    pub tau_init: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        // Desk-scale defaults: full training runs in minutes on a laptop.
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            depth: 4,
            heads: 4,
            dim: 64,
            mlp_ratio: 2.0,
            n_classes: 8,
            register_mode: RegisterMode::None,
            register_depth: RegisterDepth::Shallow,
            register_count: 16,
            tau_init: 0.1,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), VitError> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(VitError::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(VitError::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.tau_init <= 0.0 {
            return Err(VitError::Config(format!(
                "tau_init must be positive, got {}",
                self.tau_init
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(VitError::Config("mlp_ratio must be positive".into()));
        }
        if self.n_classes == 0 {
            return Err(VitError::Config("n_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Cls,
    Image,
    Register,
}

/// One or more token sequences of identical layout, batch folded into
/// rows: `tokens` is `[batch * seq_len, dim]` with per-image layout
/// `[CLS, image tokens, register tokens]`.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub batch: usize,
    pub n_image: usize,
    pub n_register: usize,
}

impl TokenSequence {
    pub fn seq_len(&self) -> usize {
        1 + self.n_image + self.n_register
    }

    /// Per-position roles: exactly one CLS at index 0, image slots
    /// contiguous, register slots after them.
    pub fn roles(&self) -> Vec<TokenRole> {
        let mut roles = Vec::with_capacity(self.seq_len());
        roles.push(TokenRole::Cls);
        roles.extend(std::iter::repeat(TokenRole::Image).take(self.n_image));
        roles.extend(std::iter::repeat(TokenRole::Register).take(self.n_register));
        roles
    }

    /// Absolute row indices of the register slots across the batch.
    pub fn register_rows(&self) -> Vec<usize> {
        let l = self.seq_len();
        let mut rows = Vec::with_capacity(self.batch * self.n_register);
        for b in 0..self.batch {
            for r in 0..self.n_register {
                rows.push(b * l + 1 + self.n_image + r);
            }
        }
        rows
    }

    /// Absolute row index of image slot `patch` for image `b`.
    pub fn image_row(&self, b: usize, patch: usize) -> usize {
        b * self.seq_len() + 1 + patch
    }
}

/// Raw attention copies for one block.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub block: usize,
    pub capture: AttentionCapture,
}

#[derive(Debug)]
pub struct EncoderBlock {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

impl EncoderBlock {
    fn init(cfg: &ViTConfig, rng: &mut RngStream) -> Result<EncoderBlock, TensorError> {
        let d = cfg.dim;
        let hidden = cfg.mlp_hidden();
        Ok(EncoderBlock {
            ln1_g: Tensor::param(&[d], vec![1.0; d])?,
            ln1_b: Tensor::param(&[d], vec![0.0; d])?,
            qkv_w: gaussian_param(&[d, 3 * d], rng)?,
            qkv_b: Tensor::param(&[3 * d], vec![0.0; 3 * d])?,
            proj_w: gaussian_param(&[d, d], rng)?,
            proj_b: Tensor::param(&[d], vec![0.0; d])?,
            ln2_g: Tensor::param(&[d], vec![1.0; d])?,
            ln2_b: Tensor::param(&[d], vec![0.0; d])?,
            fc1_w: gaussian_param(&[d, hidden], rng)?,
            fc1_b: Tensor::param(&[hidden], vec![0.0; hidden])?,
            fc2_w: gaussian_param(&[hidden, d], rng)?,
            fc2_b: Tensor::param(&[d], vec![0.0; d])?,
        })
    }

    fn named(&self, i: usize) -> Vec<(String, Tensor)> {
        let p = |suffix: &str, t: &Tensor| (format!("block{i}.{suffix}"), t.clone());
        vec![
            p("ln1.g", &self.ln1_g),
            p("ln1.b", &self.ln1_b),
            p("qkv.w", &self.qkv_w),
            p("qkv.b", &self.qkv_b),
            p("proj.w", &self.proj_w),
            p("proj.b", &self.proj_b),
            p("ln2.g", &self.ln2_g),
            p("ln2.b", &self.ln2_b),
            p("mlp.fc1.w", &self.fc1_w),
            p("mlp.fc1.b", &self.fc1_b),
            p("mlp.fc2.w", &self.fc2_w),
            p("mlp.fc2.b", &self.fc2_b),
        ]
    }
}

fn gaussian_param(shape: &[usize], rng: &mut RngStream) -> Result<Tensor, TensorError> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| INIT_STD * rng.next_gaussian()).collect();
    Tensor::param(shape, data)
}

pub struct VitModel {
    pub cfg: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    /// Positional embeddings for image slots only; CLS and registers
    /// carry none.
    pub pos: Tensor,
    pub cls: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub registers: RegisterBank,
}

impl VitModel {
    pub fn init(cfg: ViTConfig, rng: &mut RngStream) -> Result<VitModel, VitError> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            blocks.push(EncoderBlock::init(&cfg, rng)?);
        }
        let registers = RegisterBank::init(&cfg, rng)?;
        Ok(VitModel {
            patch_w: gaussian_param(&[cfg.patch_dim(), d], rng)?,
            patch_b: Tensor::param(&[d], vec![0.0; d])?,
            pos: gaussian_param(&[cfg.n_patches(), d], rng)?,
            cls: gaussian_param(&[1, d], rng)?,
            blocks,
            norm_g: Tensor::param(&[d], vec![1.0; d])?,
            norm_b: Tensor::param(&[d], vec![0.0; d])?,
            head_w: gaussian_param(&[d, cfg.n_classes], rng)?,
            head_b: Tensor::param(&[cfg.n_classes], vec![0.0; cfg.n_classes])?,
            registers,
            cfg,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("patch.w".to_string(), self.patch_w.clone()),
            ("patch.b".to_string(), self.patch_b.clone()),
            ("pos".to_string(), self.pos.clone()),
            ("cls".to_string(), self.cls.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(i));
        }
        out.push(("norm.g".to_string(), self.norm_g.clone()));
        out.push(("norm.b".to_string(), self.norm_b.clone()));
        out.push(("head.w".to_string(), self.head_w.clone()));
        out.push(("head.b".to_string(), self.head_b.clone()));
        out.extend(self.registers.named_params());
        out
    }

    /// Everything except the classifier head and register banks (the
    /// noise scales ride with the backbone).
    pub fn backbone_params(&self) -> Vec<Tensor> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("head.") && !n.starts_with("registers.bank"))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn head_params(&self) -> Vec<Tensor> {
        vec![self.head_w.clone(), self.head_b.clone()]
    }

    pub fn snapshot(&self) -> TensorFile {
        let mut f = TensorFile::default();
        for (name, t) in self.named_params() {
            f.push(&name, t.shape(), t.to_vec());
        }
        f
    }

    pub fn from_snapshot(cfg: ViTConfig, file: &TensorFile) -> Result<VitModel, VitError> {
        let mut rng = RngStream::new(0, "from-snapshot");
        let model = VitModel::init(cfg, &mut rng)?;
        let index = file
            .index()
            .map_err(|e| VitError::Checkpoint(e.to_string()))?;
        let named = model.named_params();
        if index.len() != named.len() {
            return Err(VitError::Checkpoint(format!(
                "tensor count {} != expected {}",
                index.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let (shape, data) = file
                .get(&name)
                .ok_or_else(|| VitError::Checkpoint(format!("missing tensor {name}")))?;
            if shape != t.shape().as_slice() {
                return Err(VitError::Checkpoint(format!(
                    "tensor {name}: shape {:?} != expected {:?}",
                    shape,
                    t.shape()
                )));
            }
            let values = data.to_vec();
            t.mutate_data(|d| d.copy_from_slice(&values));
        }
        Ok(model)
    }

    /// Copy with every parameter detached into a constant: forwards on
    /// the view build no graph. Shares nothing with `self`.
    pub fn eval_view(&self) -> VitModel {
        self.map_params(Tensor::detach)
    }

    /// Deep copy with fresh trainable parameters.
    pub fn trainable_clone(&self) -> VitModel {
        self.map_params(Tensor::clone_as_param)
    }

    fn map_params(&self, f: impl Fn(&Tensor) -> Tensor) -> VitModel {
        VitModel {
            cfg: self.cfg.clone(),
            patch_w: f(&self.patch_w),
            patch_b: f(&self.patch_b),
            pos: f(&self.pos),
            cls: f(&self.cls),
            blocks: self
                .blocks
                .iter()
                .map(|b| EncoderBlock {
                    ln1_g: f(&b.ln1_g),
                    ln1_b: f(&b.ln1_b),
                    qkv_w: f(&b.qkv_w),
                    qkv_b: f(&b.qkv_b),
                    proj_w: f(&b.proj_w),
                    proj_b: f(&b.proj_b),
                    ln2_g: f(&b.ln2_g),
                    ln2_b: f(&b.ln2_b),
                    fc1_w: f(&b.fc1_w),
                    fc1_b: f(&b.fc1_b),
                    fc2_w: f(&b.fc2_w),
                    fc2_b: f(&b.fc2_b),
                })
                .collect(),
            norm_g: f(&self.norm_g),
            norm_b: f(&self.norm_b),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
            registers: self.registers.map_params(&f),
        }
    }
}

// ----------------------------------------------------------------------
// Patchify
// ----------------------------------------------------------------------

/// Flatten an image `[channels, H, W]` into `[n_patches, patch_dim]`,
/// each row the (channel, y, x)-ordered pixels of one patch.
pub fn patch_matrix(pixels: &[f64], cfg: &ViTConfig) -> Vec<f64> {
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let grid = cfg.grid();
    let pd = cfg.patch_dim();
    let mut out = vec![0.0; grid * grid * pd];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            let mut w = 0;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        out[row * pd + w] = pixels[(ch * s + y) * s + x];
                        w += 1;
                    }
                }
            }
        }
    }
    out
}

/// Project a batch of images into token sequences: CLS token prepended
/// (own learned embedding, no positional term), each patch linearly
/// projected plus its learned positional embedding.
pub fn patchify_batch(model: &VitModel, images: &[&[f64]]) -> Result<TokenSequence, VitError> {
    let cfg = &model.cfg;
    let expected = cfg.channels * cfg.image_size * cfg.image_size;
    for img in images {
        if img.len() != expected {
            return Err(VitError::Config(format!(
                "image has {} values, expected {} for {}x{}x{}",
                img.len(),
                expected,
                cfg.channels,
                cfg.image_size,
                cfg.image_size
            )));
        }
    }
    let b = images.len();
    let n = cfg.n_patches();
    let pd = cfg.patch_dim();
    let mut patches = Vec::with_capacity(b * n * pd);
    for img in images {
        patches.extend_from_slice(&patch_matrix(img, cfg));
    }
    let patches = Tensor::from_vec(&[b * n, pd], patches)?;
    let projected = patches
        .matmul(&model.patch_w)?
        .add_bias_row(&model.patch_b)?;
    let pos = model.pos.repeat_rows(b)?;
    let img_tokens = projected.add(&pos)?;
    let cls = model.cls.repeat_rows(b)?;
    let tokens = concat_interleaved(&[&cls, &img_tokens], b)?;
    Ok(TokenSequence {
        tokens,
        batch: b,
        n_image: n,
        n_register: 0,
    })
}

/// Single-image convenience wrapper around [`patchify_batch`].
pub fn patchify(model: &VitModel, image: &[f64]) -> Result<TokenSequence, VitError> {
    patchify_batch(model, &[image])
}

// ----------------------------------------------------------------------
// Encoder forward
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSelect {
    All,
    Single(usize),
}

impl BlockSelect {
    fn hits(&self, block: usize) -> bool {
        match self {
            BlockSelect::All => true,
            BlockSelect::Single(b) => *b == block,
        }
    }
}

/// Gaussian noise added to the post-softmax attention maps.
pub struct AttnNoise {
    pub sigma: f64,
    pub rng: RngStream,
    pub blocks: BlockSelect,
}

/// Per-block register reinjection for deep register mode: at each block
/// entry past the first, the register slots are overwritten, so block
/// b+1's registers never depend on block b's register outputs.
pub enum DeepSource<'a> {
    Learnable(&'a [Tensor]),
    Random {
        count: usize,
        tau: Tensor,
        rng: RngStream,
    },
}

#[derive(Default)]
pub struct EncodeOptions<'a> {
    pub capture_attention: bool,
    pub attn_noise: Option<AttnNoise>,
    pub deep: Option<DeepSource<'a>>,
    /// Diagnostic hook: zero the register rows flowing out of each block
    /// before any reinjection. With deep reinjection active this must
    /// not change the output.
    pub zero_register_rows_between_blocks: bool,
}

/// Run the encoder over an assembled sequence; returns the final-norm
/// CLS features `[batch, dim]` and one attention record per block when
/// capture is requested.
pub fn encode(
    model: &VitModel,
    seq: &TokenSequence,
    mut opts: EncodeOptions,
) -> Result<(Tensor, Vec<AttentionRecord>), VitError> {
    let cfg = &model.cfg;
    let l = seq.seq_len();
    let b = seq.batch;
    if seq.tokens.rows() != b * l || seq.tokens.cols() != cfg.dim {
        return Err(VitError::Config(format!(
            "token tensor {:?} does not match batch {} x seq {} x dim {}",
            seq.tokens.shape(),
            b,
            l,
            cfg.dim
        )));
    }
    let spec = AttentionSpec {
        batch: b,
        seq: l,
        heads: cfg.heads,
        scale: 1.0 / (cfg.head_dim() as f64).sqrt(),
    };
    let reg_rows = seq.register_rows();

    let mut tokens = seq.tokens.clone();
    let mut records = Vec::new();
    for (i, block) in model.blocks.iter().enumerate() {
        if i > 0 && !reg_rows.is_empty() {
            if opts.zero_register_rows_between_blocks {
                let zeros = Tensor::zeros(&[reg_rows.len(), cfg.dim]);
                tokens = tokens.replace_rows(&reg_rows, &zeros)?;
            }
            if let Some(deep) = &mut opts.deep {
                let regs = match deep {
                    DeepSource::Learnable(banks) => banks
                        .get(i)
                        .ok_or_else(|| {
                            VitError::Config(format!("deep bank missing for block {i}"))
                        })?
                        .repeat_rows(b)?,
                    DeepSource::Random { count, tau, rng } => {
                        let mut z = vec![0.0; b * *count * cfg.dim];
                        rng.fill_gaussian(&mut z, 1.0);
                        Tensor::from_vec(&[b * *count, cfg.dim], z)?.mul_scalar(tau)?
                    }
                };
                tokens = tokens.replace_rows(&reg_rows, &regs)?;
            }
        }

        let noise = match &mut opts.attn_noise {
            Some(n) if n.blocks.hits(i) => {
                let mut buf = vec![0.0; b * cfg.heads * l * l];
                n.rng.fill_gaussian(&mut buf, n.sigma);
                Some(buf)
            }
            _ => None,
        };

        let h = tokens.layer_norm(&block.ln1_g, &block.ln1_b, LN_EPS)?;
        let qkv = h.matmul(&block.qkv_w)?.add_bias_row(&block.qkv_b)?;
        let (attn_out, cap) = multi_head_attention(&qkv, &spec, noise, opts.capture_attention)?;
        if let Some(capture) = cap {
            records.push(AttentionRecord { block: i, capture });
        }
        let attn_proj = attn_out
            .matmul(&block.proj_w)?
            .add_bias_row(&block.proj_b)?;
        tokens = tokens.add(&attn_proj)?;

        let h2 = tokens.layer_norm(&block.ln2_g, &block.ln2_b, LN_EPS)?;
        let mlp = h2
            .matmul(&block.fc1_w)?
            .add_bias_row(&block.fc1_b)?
            .gelu()?
            .matmul(&block.fc2_w)?
            .add_bias_row(&block.fc2_b)?;
        tokens = tokens.add(&mlp)?;
    }

    let cls_rows: Vec<usize> = (0..b).map(|i| i * l).collect();
    let cls = tokens.select_rows(&cls_rows)?;
    let feats = cls.layer_norm(&model.norm_g, &model.norm_b, LN_EPS)?;
    Ok((feats, records))
}

/// Features and classifier logits for an assembled sequence.
pub fn forward(
    model: &VitModel,
    seq: &TokenSequence,
    capture_attention: bool,
) -> Result<(Tensor, Tensor, Vec<AttentionRecord>), VitError> {
    forward_with(model, seq, EncodeOptions {
        capture_attention,
        ..Default::default()
    })
}

pub fn forward_with(
    model: &VitModel,
    seq: &TokenSequence,
    opts: EncodeOptions,
) -> Result<(Tensor, Tensor, Vec<AttentionRecord>), VitError> {
    let (feats, records) = encode(model, seq, opts)?;
    let logits = feats.matmul(&model.head_w)?.add_bias_row(&model.head_b)?;
    Ok((feats, logits, records))
}

/// Identical to [`forward`] except each block's post-softmax attention
/// becomes `A + eps`, `eps ~ N(0, sigma^2)` elementwise, used as-is.
pub fn forward_perturbed_attention(
    model: &VitModel,
    seq: &TokenSequence,
    sigma: f64,
    rng: RngStream,
    blocks: BlockSelect,
) -> Result<(Tensor, Tensor, Vec<AttentionRecord>), VitError> {
    forward_with(model, seq, EncodeOptions {
        capture_attention: false,
        attn_noise: Some(AttnNoise {
            sigma,
            rng,
            blocks,
        }),
        deep: None,
        zero_register_rows_between_blocks: false,
    })
}

/// Plain-evaluation CLS features for a list of images (registers
/// dropped, no graph). Returns `[len, dim]` row-major.
pub fn features_for_images(
    model: &VitModel,
    images: &[&[f64]],
    chunk: usize,
) -> Result<Vec<f64>, VitError> {
    let view = model.eval_view();
    let mut out = Vec::with_capacity(images.len() * model.cfg.dim);
    for group in images.chunks(chunk.max(1)) {
        let seq = patchify_batch(&view, group)?;
        let (feats, _) = encode(&view, &seq, EncodeOptions::default())?;
        out.extend_from_slice(&feats.data());
    }
    Ok(out)
}
