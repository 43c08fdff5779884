//! Source-domain training for every method variant.
//!
//! All methods share one loop (Adam, cross-entropy on the source
//! classifier); they differ only in how the input sequence is assembled
//! or which per-step noise is injected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::optim::Adam;
use crate::reap::{ablation_mask_batch, reap_input_batch, MaskMode, ReapError, ReapKnobs};
use crate::registers::{attach, Phase};
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};
use crate::vit::{
    encode, patchify_batch, AttnNoise, BlockSelect, DeepSource, EncodeOptions, RegisterDepth,
    RegisterMode, TokenSequence, ViTConfig, VitError, VitModel,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training job: {0}")]
    Job(String),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Reap(#[from] ReapError),
}

/// Source-training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    LearnableRegisters,
    RandomRegisters,
    Reap,
    RandomMask,
    ClusterMask,
    ImgP,
    FeaP,
    WeightP,
    AttnP,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Baseline,
        Method::LearnableRegisters,
        Method::RandomRegisters,
        Method::Reap,
        Method::RandomMask,
        Method::ClusterMask,
        Method::ImgP,
        Method::FeaP,
        Method::WeightP,
        Method::AttnP,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::LearnableRegisters => "learnable_registers",
            Method::RandomRegisters => "random_registers",
            Method::Reap => "reap",
            Method::RandomMask => "random_mask",
            Method::ClusterMask => "cluster_mask",
            Method::ImgP => "img_p",
            Method::FeaP => "fea_p",
            Method::WeightP => "weight_p",
            Method::AttnP => "attn_p",
        }
    }

    /// Register mode the model trains with under this method.
    pub fn register_mode(&self) -> RegisterMode {
        match self {
            Method::LearnableRegisters => RegisterMode::Learnable,
            Method::RandomRegisters | Method::Reap => RegisterMode::Random,
            _ => RegisterMode::None,
        }
    }

    pub fn uses_reap_knobs(&self) -> bool {
        matches!(self, Method::Reap | Method::RandomMask | Method::ClusterMask)
    }

    pub fn uses_perturb_sigma(&self) -> bool {
        matches!(
            self,
            Method::ImgP | Method::FeaP | Method::WeightP | Method::AttnP
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lr_registers: f64,
    pub reap: ReapKnobs,
    /// Noise scale for the img_p/fea_p/weight_p/attn_p baselines.
    pub perturb_sigma: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 30,
            batch_size: 64,
            lr_backbone: 1e-3,
            lr_head: 1e-3,
            lr_registers: 1e-3,
            reap: ReapKnobs::default(),
            perturb_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Train a model from scratch on the source dataset.
///
/// The model's register mode is forced to match the method. Everything
/// is a pure function of `(job, seed)`: two runs produce bit-identical
/// parameters.
pub fn train_source(
    mut cfg: ViTConfig,
    method: Method,
    dataset: &Dataset,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(VitModel, Vec<EpochStats>), TrainError> {
    cfg.register_mode = method.register_mode();
    if cfg.n_classes != dataset.class_count {
        return Err(TrainError::Job(format!(
            "model has {} classes but dataset has {}",
            cfg.n_classes, dataset.class_count
        )));
    }
    if method == Method::Reap && cfg.register_depth == RegisterDepth::Deep {
        return Err(TrainError::Job(
            "cluster replacement is defined for shallow registers".into(),
        ));
    }
    if dataset.records.is_empty() || settings.batch_size == 0 {
        return Err(TrainError::Job("empty dataset or zero batch size".into()));
    }

    let root = RngStream::new(seed, "train");
    let mut init_rng = root.fork("init", 0);
    let model = VitModel::init(cfg.clone(), &mut init_rng)?;

    let mut opt = Adam::new();
    opt.add_group(&model.backbone_params(), settings.lr_backbone);
    opt.add_group(&model.head_params(), settings.lr_head);
    let banks: Vec<Tensor> = model.registers.banks.clone();
    if !banks.is_empty() {
        opt.add_group(&banks, settings.lr_registers);
    }

    let n = dataset.records.len();
    let mut stats = Vec::with_capacity(settings.epochs);
    let mut step: u64 = 0;
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.fork("shuffle", epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let mut step_rng = root.fork("step", step);
            step += 1;
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.records[i].class).collect();
            let (loss, batch_correct) =
                train_step(&model, method, dataset, chunk, &labels, settings, &mut step_rng)?;
            loss_sum += loss * labels.len() as f64;
            correct += batch_correct;
            seen += labels.len();
            opt.step()?;
            opt.zero_grad();
        }
        stats.push(EpochStats {
            epoch,
            mean_loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        });
    }
    Ok((model, stats))
}

fn train_step(
    model: &VitModel,
    method: Method,
    dataset: &Dataset,
    indices: &[usize],
    labels: &[usize],
    settings: &TrainSettings,
    rng: &mut RngStream,
) -> Result<(f64, usize), TrainError> {
    let cfg = &model.cfg;
    let sigma = settings.perturb_sigma;

    // weight_p: params cosplay as (w + eps) for this forward/backward,
    // then the exact original bits come back before the update.
    let weight_noise_backup = if method == Method::WeightP && sigma > 0.0 {
        let mut noise_rng = rng.fork("weights", 0);
        let params = model.named_params();
        let mut backup = Vec::with_capacity(params.len());
        for (_, t) in &params {
            backup.push(t.to_vec());
            t.mutate_data(|d| {
                for v in d.iter_mut() {
                    *v += sigma * noise_rng.next_gaussian();
                }
            });
        }
        Some((params, backup))
    } else {
        None
    };

    // Per-method input assembly.
    let noisy_images: Vec<Vec<f64>>;
    let images: Vec<&[f64]> = match method {
        Method::ImgP if sigma > 0.0 => {
            let mut noise_rng = rng.fork("pixels", 0);
            noisy_images = indices
                .iter()
                .map(|&i| {
                    dataset.records[i]
                        .pixels
                        .iter()
                        .map(|&v| v + sigma * noise_rng.next_gaussian())
                        .collect()
                })
                .collect();
            noisy_images.iter().map(|v| v.as_slice()).collect()
        }
        _ => indices
            .iter()
            .map(|&i| dataset.records[i].pixels.as_slice())
            .collect(),
    };

    let seq = match method {
        Method::Reap => {
            let mut reap_rng = rng.fork("reap", 0);
            reap_input_batch(model, &images, &settings.reap, &mut reap_rng)?.0
        }
        Method::RandomMask | Method::ClusterMask => {
            let mode = if method == Method::RandomMask {
                MaskMode::RandomMask
            } else {
                MaskMode::ClusterMask
            };
            let mut mask_rng = rng.fork("mask", 0);
            ablation_mask_batch(mode, model, &images, &settings.reap, &mut mask_rng)?
        }
        _ => {
            let seq = patchify_batch(model, &images)?;
            let mut reg_rng = rng.fork("registers", 0);
            let seq = attach(&seq, &model.registers, Phase::Source, Some(&mut reg_rng))?;
            if method == Method::FeaP && sigma > 0.0 {
                let mut noise_rng = rng.fork("features", 0);
                let mut z = vec![0.0; seq.tokens.numel()];
                noise_rng.fill_gaussian(&mut z, sigma);
                let noise = Tensor::from_vec(&seq.tokens.shape(), z).map_err(VitError::Tensor)?;
                TokenSequence {
                    tokens: seq.tokens.add(&noise).map_err(VitError::Tensor)?,
                    ..seq
                }
            } else {
                seq
            }
        }
    };

    let deep = if cfg.register_depth == RegisterDepth::Deep && seq.n_register > 0 {
        match cfg.register_mode {
            RegisterMode::Learnable => Some(DeepSource::Learnable(&model.registers.banks)),
            RegisterMode::Random => Some(DeepSource::Random {
                count: model.registers.count,
                tau: model.registers.tau().map_err(VitError::Tensor)?,
                rng: rng.fork("deep", 0),
            }),
            RegisterMode::None => None,
        }
    } else {
        None
    };

    let attn_noise = if method == Method::AttnP && sigma > 0.0 {
        Some(AttnNoise {
            sigma,
            rng: rng.fork("attn", 0),
            blocks: BlockSelect::All,
        })
    } else {
        None
    };

    let (feats, _) = encode(model, &seq, EncodeOptions {
        capture_attention: false,
        attn_noise,
        deep,
        zero_register_rows_between_blocks: false,
    })?;
    let logits = feats
        .matmul(&model.head_w)
        .and_then(|t| t.add_bias_row(&model.head_b))?;
    let logit_values = logits.to_vec();
    let loss = logits.cross_entropy_mean(labels)?;
    let loss_value = loss.item();
    loss.backward()?;

    if let Some((params, backup)) = weight_noise_backup {
        for ((_, t), saved) in params.iter().zip(backup) {
            t.mutate_data(|d| d.copy_from_slice(&saved));
        }
    }

    let c = model.cfg.n_classes;
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logit_values[i * c..(i + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok((loss_value, correct))
}
