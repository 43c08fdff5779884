//! Episodic n-way k-shot evaluation and target-domain finetuning.
//!
//! Plain evaluation drops all registers, so features are a pure function
//! of the image: the whole dataset is featurized once and episodes are
//! sampled in feature space. Finetuning trains a fresh register bank and
//! a fresh linear head on each episode's support set against a frozen
//! copy of the backbone (the source model is never touched).

use thiserror::Error;

use crate::data::Dataset;
use crate::optim::Adam;
use crate::registers::{attach_tokens, sample_random_registers};
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};
use crate::vit::{features_for_images, patchify_batch, VitError, VitModel};

#[derive(Debug, Error)]
pub enum FewshotError {
    #[error("dataset too small: {0}")]
    Capacity(String),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One n-way k-shot task. Class labels are remapped to `0..n` within
/// the episode; `classes[label]` is the original dataset class.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    /// (dataset record index, episode label)
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    pub classes: Vec<usize>,
}

/// Uniform class choice, then disjoint support/query image choice.
pub fn sample_episode(
    dataset: &Dataset,
    n_way: usize,
    k_shot: usize,
    q_queries: usize,
    rng: &mut RngStream,
) -> Result<Episode, FewshotError> {
    let groups = dataset.by_class();
    let usable: Vec<usize> = (0..groups.len())
        .filter(|&c| groups[c].len() >= k_shot + q_queries)
        .collect();
    if usable.len() < n_way {
        return Err(FewshotError::Capacity(format!(
            "need {n_way} classes with >= {} images, have {}",
            k_shot + q_queries,
            usable.len()
        )));
    }
    let class_picks = rng.sample_without_replacement(usable.len(), n_way);
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_queries);
    let mut classes = Vec::with_capacity(n_way);
    for (label, &pick) in class_picks.iter().enumerate() {
        let class = usable[pick];
        classes.push(class);
        let members = &groups[class];
        let chosen = rng.sample_without_replacement(members.len(), k_shot + q_queries);
        for (j, &m) in chosen.iter().enumerate() {
            if j < k_shot {
                support.push((members[m], label));
            } else {
                query.push((members[m], label));
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        q_queries,
        support,
        query,
        classes,
    })
}

/// Per-class mean of support features: `[n_way, dim]` row-major.
pub fn prototypes(
    support_feats: &[f64],
    dim: usize,
    support_labels: &[usize],
    n_way: usize,
) -> Vec<f64> {
    let mut protos = vec![0.0; n_way * dim];
    let mut counts = vec![0usize; n_way];
    for (i, &label) in support_labels.iter().enumerate() {
        counts[label] += 1;
        for j in 0..dim {
            protos[label * dim + j] += support_feats[i * dim + j];
        }
    }
    for c in 0..n_way {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for j in 0..dim {
                protos[c * dim + j] *= inv;
            }
        }
    }
    protos
}

/// Nearest-prototype prediction in Euclidean distance; ties break to the
/// lowest class index.
pub fn prototype_classify(
    support_feats: &[f64],
    support_labels: &[usize],
    query_feats: &[f64],
    dim: usize,
    n_way: usize,
) -> Vec<usize> {
    let protos = prototypes(support_feats, dim, support_labels, n_way);
    let n_query = query_feats.len() / dim;
    let mut out = Vec::with_capacity(n_query);
    for q in 0..n_query {
        let qf = &query_feats[q * dim..(q + 1) * dim];
        let mut best = (f64::INFINITY, 0usize);
        for c in 0..n_way {
            let p = &protos[c * dim..(c + 1) * dim];
            let d2: f64 = qf.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, c);
            }
        }
        out.push(best.1);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Plain,
    Finetune,
}

/// Registers used while finetuning an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneRegisters {
    /// Fresh learnable bank, trained with the head, attached at query
    /// evaluation.
    Learnable,
    /// Plain head finetuning, no registers anywhere.
    NoRegisters,
    /// Fresh tau-scaled noise each step during finetuning, dropped at
    /// query evaluation.
    Random,
}

#[derive(Debug, Clone)]
pub struct FinetuneOptions {
    pub steps: usize,
    pub lr_registers: f64,
    pub lr_head: f64,
    pub registers: FinetuneRegisters,
    /// Unfreeze the backbone at `lr_backbone` (default keeps it frozen).
    pub finetune_backbone: bool,
    pub lr_backbone: f64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions {
            steps: 50,
            lr_registers: 1e-3,
            lr_head: 1e-3,
            registers: FinetuneRegisters::Learnable,
            finetune_backbone: false,
            lr_backbone: 1e-5,
        }
    }
}

/// Outcome of one episode finetune; the adapted parameters are returned,
/// the source model is untouched.
pub struct FinetuneOutcome {
    pub accuracy: f64,
    pub support_accuracy: f64,
    pub bank: Option<Tensor>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Train a fresh register bank (source count) and a fresh n-way linear
/// head on the support set by cross-entropy; report query accuracy with
/// the finetuned classifier.
pub fn finetune_episode(
    model: &VitModel,
    dataset: &Dataset,
    episode: &Episode,
    opts: &FinetuneOptions,
    rng: &mut RngStream,
) -> Result<FinetuneOutcome, FewshotError> {
    let dim = model.cfg.dim;
    let n_way = episode.n_way;
    let count = model.registers.count;

    // Frozen backbone: constants, no graph or gradients behind them.
    let backbone = if opts.finetune_backbone {
        model.trainable_clone()
    } else {
        model.eval_view()
    };

    let mut init_rng = rng.fork("init", 0);
    let bank = match opts.registers {
        FinetuneRegisters::Learnable if count > 0 => Some(Tensor::param(
            &[count, dim],
            (0..count * dim)
                .map(|_| 0.02 * init_rng.next_gaussian())
                .collect(),
        )?),
        _ => None,
    };
    let head_w = Tensor::param(
        &[dim, n_way],
        (0..dim * n_way)
            .map(|_| 0.02 * init_rng.next_gaussian())
            .collect(),
    )?;
    let head_b = Tensor::param(&[n_way], vec![0.0; n_way])?;

    let mut opt = Adam::new();
    if let Some(b) = &bank {
        opt.add_group(&[b.clone()], opts.lr_registers);
    }
    opt.add_group(&[head_w.clone(), head_b.clone()], opts.lr_head);
    if opts.finetune_backbone {
        opt.add_group(&backbone.backbone_params(), opts.lr_backbone);
    }

    let support_imgs: Vec<&[f64]> = episode
        .support
        .iter()
        .map(|&(i, _)| dataset.records[i].pixels.as_slice())
        .collect();
    let support_labels: Vec<usize> = episode.support.iter().map(|&(_, l)| l).collect();
    let tau = backbone.registers.tau_value();

    let mut support_accuracy = 0.0;
    let mut noise_rng = rng.fork("noise", 0);
    for _ in 0..opts.steps {
        opt.zero_grad();
        let seq = patchify_batch(&backbone, &support_imgs)?;
        let seq = match (&bank, opts.registers) {
            (Some(b), FinetuneRegisters::Learnable) => attach_tokens(&seq, b)?,
            (_, FinetuneRegisters::Random) if count > 0 => {
                let tau_c = Tensor::from_vec(&[1], vec![tau]).map_err(VitError::Tensor)?;
                let regs = sample_random_registers(
                    seq.batch * count,
                    dim,
                    &tau_c,
                    &mut noise_rng,
                )
                .map_err(VitError::Tensor)?;
                attach_tokens(&seq, &regs)?
            }
            _ => seq,
        };
        let (feats, _) = crate::vit::encode(&backbone, &seq, Default::default())?;
        let logits = feats.matmul(&head_w)?.add_bias_row(&head_b)?;
        support_accuracy = accuracy_from_logits(&logits.to_vec(), n_way, &support_labels);
        let loss = logits.cross_entropy_mean(&support_labels)?;
        loss.backward()?;
        opt.step()?;
    }

    // Query evaluation with the finetuned classifier. The trained bank
    // is part of the adapted model; untrained (steps = 0) or random
    // registers contribute nothing and queries run register-free.
    let query_imgs: Vec<&[f64]> = episode
        .query
        .iter()
        .map(|&(i, _)| dataset.records[i].pixels.as_slice())
        .collect();
    let query_labels: Vec<usize> = episode.query.iter().map(|&(_, l)| l).collect();
    let seq = patchify_batch(&backbone, &query_imgs)?;
    let seq = match &bank {
        Some(b) if opts.steps > 0 => attach_tokens(&seq, &b.detach())?,
        _ => seq,
    };
    let eval_backbone = if opts.finetune_backbone {
        backbone.eval_view()
    } else {
        backbone
    };
    let (feats, _) = crate::vit::encode(&eval_backbone, &seq, Default::default())?;
    let logits = feats.matmul(&head_w.detach())?.add_bias_row(&head_b.detach())?;
    let accuracy = accuracy_from_logits(&logits.to_vec(), n_way, &query_labels);

    Ok(FinetuneOutcome {
        accuracy,
        support_accuracy,
        bank,
        head_w,
        head_b,
    })
}

fn accuracy_from_logits(logits: &[f64], n_classes: usize, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * n_classes..(i + 1) * n_classes];
        let mut best = 0usize;
        for c in 1..n_classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub episodes: usize,
    pub mode: EvalMode,
    pub finetune: FinetuneOptions,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            n_way: 5,
            k_shot: 5,
            q_queries: 15,
            episodes: 200,
            mode: EvalMode::Plain,
            finetune: FinetuneOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub per_episode: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
}

pub fn summarize(per_episode: &[f64]) -> (f64, f64) {
    let n = per_episode.len() as f64;
    let mean = per_episode.iter().sum::<f64>() / n;
    if per_episode.len() < 2 {
        return (mean, 0.0);
    }
    let var = per_episode
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Mean episode accuracy with a 95% confidence interval
/// (`1.96 * std / sqrt(episodes)`). Per-episode RNG is derived from
/// `(seed stream, episode index)`, so results are order-independent.
pub fn evaluate(
    model: &VitModel,
    dataset: &Dataset,
    settings: &EvalSettings,
    rng: &RngStream,
) -> Result<EvalResult, FewshotError> {
    if settings.episodes == 0 {
        return Err(FewshotError::Capacity("need at least one episode".into()));
    }
    let dim = model.cfg.dim;
    let mut per_episode = Vec::with_capacity(settings.episodes);
    match settings.mode {
        EvalMode::Plain => {
            // Registers dropped: featurize the whole dataset once.
            let images: Vec<&[f64]> = dataset
                .records
                .iter()
                .map(|r| r.pixels.as_slice())
                .collect();
            let feats = features_for_images(model, &images, 64)?;
            for e in 0..settings.episodes {
                let mut erng = rng.fork("episode", e as u64);
                let ep = sample_episode(
                    dataset,
                    settings.n_way,
                    settings.k_shot,
                    settings.q_queries,
                    &mut erng,
                )?;
                let gather = |items: &[(usize, usize)]| -> (Vec<f64>, Vec<usize>) {
                    let mut f = Vec::with_capacity(items.len() * dim);
                    let mut l = Vec::with_capacity(items.len());
                    for &(idx, label) in items {
                        f.extend_from_slice(&feats[idx * dim..(idx + 1) * dim]);
                        l.push(label);
                    }
                    (f, l)
                };
                let (sf, sl) = gather(&ep.support);
                let (qf, ql) = gather(&ep.query);
                let preds = prototype_classify(&sf, &sl, &qf, dim, settings.n_way);
                let correct = preds.iter().zip(&ql).filter(|(p, l)| p == l).count();
                per_episode.push(correct as f64 / ql.len() as f64);
            }
        }
        EvalMode::Finetune => {
            for e in 0..settings.episodes {
                let mut erng = rng.fork("episode", e as u64);
                let ep = sample_episode(
                    dataset,
                    settings.n_way,
                    settings.k_shot,
                    settings.q_queries,
                    &mut erng,
                )?;
                let mut frng = rng.fork("finetune", e as u64);
                let outcome = finetune_episode(model, dataset, &ep, &settings.finetune, &mut frng)?;
                per_episode.push(outcome.accuracy);
            }
        }
    }
    let (mean, ci95) = summarize(&per_episode);
    Ok(EvalResult {
        per_episode,
        mean,
        ci95,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domain, DomainSpec, ImageRecord};
    use crate::vit::{RegisterDepth, RegisterMode, ViTConfig};

    fn toy_dataset(classes: usize, per_class: usize, size: usize) -> Dataset {
        // linearly separable: class c's images are constant value ramps
        let mut records = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                let base = (c as f64 + 1.0) / (classes as f64 + 1.0);
                let jitter = i as f64 * 1e-4;
                let pixels = vec![(base + jitter) as f32 as f64; 3 * size * size];
                records.push(ImageRecord {
                    pixels,
                    class: c,
                    domain: "toy".into(),
                });
            }
        }
        Dataset {
            class_count: classes,
            channels: 3,
            height: size,
            width: size,
            records,
        }
    }

    fn patterned_dataset(classes: usize, per_class: usize, size: usize) -> Dataset {
        // each class has a fixed random pixel pattern plus small jitter,
        // so features separate strongly through any encoder
        let mut records = Vec::new();
        for c in 0..classes {
            let mut crng = RngStream::new(c as u64, "class-pattern");
            let pattern: Vec<f64> = (0..3 * size * size).map(|_| crng.next_uniform()).collect();
            for i in 0..per_class {
                let mut irng = crng.fork("img", i as u64);
                let pixels: Vec<f64> = pattern
                    .iter()
                    .map(|&v| ((v + irng.next_range(-0.02, 0.02)).clamp(0.0, 1.0)) as f32 as f64)
                    .collect();
                records.push(ImageRecord {
                    pixels,
                    class: c,
                    domain: "toy".into(),
                });
            }
        }
        Dataset {
            class_count: classes,
            channels: 3,
            height: size,
            width: size,
            records,
        }
    }

    fn tiny_model(mode: RegisterMode, count: usize, n_classes: usize, seed: u64) -> VitModel {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            depth: 2,
            heads: 2,
            dim: 16,
            mlp_ratio: 2.0,
            n_classes,
            register_mode: mode,
            register_depth: RegisterDepth::Shallow,
            register_count: count,
            tau_init: 0.1,
        };
        let mut rng = RngStream::new(seed, "init");
        VitModel::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn episode_sizes_and_label_remap() {
        let ds = toy_dataset(7, 20, 8);
        let mut rng = RngStream::new(1, "ep");
        let ep = sample_episode(&ds, 5, 1, 15, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        let mut labels: Vec<usize> = ep.support.iter().map(|&(_, l)| l).collect();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        // disjoint support/query
        for &(qi, _) in &ep.query {
            assert!(ep.support.iter().all(|&(si, _)| si != qi));
        }
    }

    #[test]
    fn episode_is_deterministic_per_seed() {
        let ds = toy_dataset(6, 10, 8);
        let mut a = RngStream::new(2, "ep");
        let mut b = RngStream::new(2, "ep");
        let ea = sample_episode(&ds, 5, 2, 3, &mut a).unwrap();
        let eb = sample_episode(&ds, 5, 2, 3, &mut b).unwrap();
        assert_eq!(ea.support, eb.support);
        assert_eq!(ea.query, eb.query);
    }

    #[test]
    fn capacity_error_when_too_few_classes_or_images() {
        let ds = toy_dataset(3, 5, 8);
        let mut rng = RngStream::new(3, "ep");
        assert!(matches!(
            sample_episode(&ds, 5, 1, 15, &mut rng),
            Err(FewshotError::Capacity(_))
        ));
        assert!(matches!(
            sample_episode(&ds, 3, 3, 3, &mut rng),
            Err(FewshotError::Capacity(_))
        ));
    }

    #[test]
    fn prototype_zero_distance_and_geometry() {
        // k=1, query identical to a support sample
        let support = vec![1.0, 0.0, 0.0, 1.0]; // e1, e2
        let labels = vec![0, 1];
        let preds = prototype_classify(&support, &labels, &[1.0, 0.0], 2, 2);
        assert_eq!(preds, vec![0]);
        // query at 0.9 * e1 -> class of e1
        let preds = prototype_classify(&support, &labels, &[0.9, 0.0], 2, 2);
        assert_eq!(preds, vec![0]);
    }

    #[test]
    fn prototype_matches_exhaustive_distance_table() {
        let mut rng = RngStream::new(4, "proto");
        let (n, k, d, q) = (3, 2, 5, 7);
        let support: Vec<f64> = (0..n * k * d).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let labels: Vec<usize> = (0..n * k).map(|i| i % n).collect();
        let queries: Vec<f64> = (0..q * d).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let preds = prototype_classify(&support, &labels, &queries, d, n);
        // oracle: explicit per-class means and a full distance table
        for qi in 0..q {
            let qf = &queries[qi * d..(qi + 1) * d];
            let mut best = (f64::INFINITY, usize::MAX);
            for c in 0..n {
                let members: Vec<usize> = (0..n * k).filter(|&i| labels[i] == c).collect();
                let mut proto = vec![0.0; d];
                for &m in &members {
                    for j in 0..d {
                        proto[j] += support[m * d + j] / members.len() as f64;
                    }
                }
                let dist: f64 = qf
                    .iter()
                    .zip(&proto)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            assert_eq!(preds[qi], best.1);
        }
    }

    #[test]
    fn prototype_prediction_is_translation_invariant() {
        let mut rng = RngStream::new(5, "proto");
        let (n, k, d, q) = (4, 3, 6, 10);
        let support: Vec<f64> = (0..n * k * d).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let labels: Vec<usize> = (0..n * k).map(|i| i % n).collect();
        let queries: Vec<f64> = (0..q * d).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let shift: Vec<f64> = (0..d).map(|_| rng.next_range(-5.0, 5.0)).collect();
        let shifted = |v: &[f64]| -> Vec<f64> {
            v.chunks(d)
                .flat_map(|row| row.iter().zip(&shift).map(|(a, s)| a + s).collect::<Vec<_>>())
                .collect()
        };
        let a = prototype_classify(&support, &labels, &queries, d, n);
        let b = prototype_classify(&shifted(&support), &labels, &shifted(&queries), d, n);
        assert_eq!(a, b);
    }

    #[test]
    fn separable_toy_dataset_evaluates_to_perfect_accuracy() {
        let ds = toy_dataset(6, 12, 8);
        let model = tiny_model(RegisterMode::None, 0, 6, 7);
        let settings = EvalSettings {
            n_way: 5,
            k_shot: 1,
            q_queries: 5,
            episodes: 10,
            mode: EvalMode::Plain,
            finetune: FinetuneOptions::default(),
        };
        let rng = RngStream::new(8, "eval");
        let res = evaluate(&model, &ds, &settings, &rng).unwrap();
        // constant-valued class images stay separable through a random
        // encoder (features depend monotonically on the constant)
        assert!(res.mean > 0.95, "mean accuracy {}", res.mean);
    }

    #[test]
    fn label_shuffled_dataset_sits_at_chance_level() {
        let mut ds = toy_dataset(5, 40, 8);
        // break the image-label link: relabel by record parity
        let mut rng = RngStream::new(9, "shuffle");
        let mut labels: Vec<usize> = ds.records.iter().map(|r| r.class).collect();
        rng.shuffle(&mut labels);
        for (r, l) in ds.records.iter_mut().zip(labels) {
            r.class = l;
        }
        let model = tiny_model(RegisterMode::None, 0, 5, 10);
        let settings = EvalSettings {
            n_way: 5,
            k_shot: 5,
            q_queries: 10,
            episodes: 200,
            mode: EvalMode::Plain,
            finetune: FinetuneOptions::default(),
        };
        let res = evaluate(&model, &ds, &settings, &RngStream::new(11, "eval")).unwrap();
        let chance = 1.0 / 5.0;
        assert!(
            (res.mean - chance).abs() < res.ci95.max(0.03),
            "mean {} should be ~{chance} (ci {})",
            res.mean,
            res.ci95
        );
    }

    #[test]
    fn evaluation_is_deterministic() {
        let ds = toy_dataset(6, 10, 8);
        let model = tiny_model(RegisterMode::Random, 4, 6, 12);
        let settings = EvalSettings {
            n_way: 5,
            k_shot: 2,
            q_queries: 4,
            episodes: 12,
            mode: EvalMode::Plain,
            finetune: FinetuneOptions::default(),
        };
        let a = evaluate(&model, &ds, &settings, &RngStream::new(13, "eval")).unwrap();
        let b = evaluate(&model, &ds, &settings, &RngStream::new(13, "eval")).unwrap();
        assert_eq!(a.per_episode, b.per_episode);
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.ci95, b.ci95);
    }

    #[test]
    fn finetune_overfits_separable_support_and_preserves_source_model() {
        let ds = patterned_dataset(5, 8, 8);
        let model = tiny_model(RegisterMode::Random, 4, 5, 14);
        let before: Vec<Vec<f64>> = model.named_params().iter().map(|(_, t)| t.to_vec()).collect();
        let mut rng = RngStream::new(15, "ep");
        let ep = sample_episode(&ds, 3, 5, 2, &mut rng).unwrap();
        let opts = FinetuneOptions {
            steps: 60,
            ..Default::default()
        };
        let mut frng = RngStream::new(16, "ft");
        let out = finetune_episode(&model, &ds, &ep, &opts, &mut frng).unwrap();
        assert!(
            out.support_accuracy > 0.99,
            "support accuracy only {}",
            out.support_accuracy
        );
        // copy-on-finetune: source model bitwise untouched
        let after: Vec<Vec<f64>> = model.named_params().iter().map(|(_, t)| t.to_vec()).collect();
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(b, a);
        }
    }

    #[test]
    fn finetune_default_register_lr_is_1e_3() {
        assert_eq!(FinetuneOptions::default().lr_registers, 1e-3);
        assert_eq!(FinetuneOptions::default().steps, 50);
    }

    #[test]
    fn summary_matches_recomputation() {
        let ds = generate_domain(&DomainSpec {
            name: "d".into(),
            class_count: 5,
            images_per_class: 8,
            image_size: 8,
            palette_rotation_deg: 0.0,
            texture_family: 0,
            channel_drop: false,
            contrast_invert: false,
            seed: 3,
        });
        let model = tiny_model(RegisterMode::None, 0, 5, 17);
        let settings = EvalSettings {
            n_way: 5,
            k_shot: 2,
            q_queries: 4,
            episodes: 9,
            mode: EvalMode::Plain,
            finetune: FinetuneOptions::default(),
        };
        let res = evaluate(&model, &ds, &settings, &RngStream::new(18, "eval")).unwrap();
        let mean = res.per_episode.iter().sum::<f64>() / res.per_episode.len() as f64;
        assert!((mean - res.mean).abs() < 1e-12);
    }
}
