//! Cluster-replacement preprocessing for source-domain training.
//!
//! Pipeline per image: average each patch's pixels, pick random anchor
//! patches, grow cosine-similarity clusters around the anchors with an
//! automatically chosen threshold, then replace the clustered patches'
//! embedded tokens with fresh tau-scaled Gaussian registers and append a
//! few extra ones at the end of the sequence.
//!
//! Threshold rule: candidate thresholds are exactly the observed
//! anchor-patch similarities, scanned descending; the first (largest)
//! whose cluster union reaches the target count wins. If the union
//! overshoots, the lowest-similarity non-anchor members are released
//! (ties by lowest index) until the count is met exactly, so the
//! configured drop ratio is attained exactly whenever it is feasible
//! (`target >= anchor count`; anchors always stay replaced).

use serde::Serialize;
use thiserror::Error;

use crate::registers::attach_tokens;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::vit::{patchify_batch, TokenSequence, ViTConfig, VitError, VitModel};

#[derive(Debug, Error)]
pub enum ReapError {
    #[error("anchor_ratio must be in (0, 1), got {0}")]
    AnchorRatio(f64),
    #[error("drop_ratio must be in (0, 1), got {0}")]
    DropRatio(f64),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Vit(#[from] VitError),
}

/// Cluster/replacement decision for one image.
#[derive(Debug, Clone, Serialize)]
pub struct ReapPlan {
    pub anchor_indices: Vec<usize>,
    pub threshold: f64,
    pub replace_mask: Vec<bool>,
    pub replaced_count: usize,
}

impl ReapPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReapKnobs {
    pub anchor_ratio: f64,
    pub drop_ratio: f64,
    /// Separate tau for cluster-replacement registers (the appended
    /// registers always use the bank's main tau).
    pub split_tau: bool,
}

impl Default for ReapKnobs {
    fn default() -> Self {
        ReapKnobs {
            anchor_ratio: 0.7,
            drop_ratio: 0.7,
            split_tau: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Remove the same number of uniformly random patches (no clusters,
    /// no replacement).
    RandomMask,
    /// Remove the cluster patches without register replacement.
    ClusterMask,
}

/// Channel-wise mean of each patch's pixels: `[n_patches, channels]`.
pub fn patch_means(
    pixels: &[f64],
    channels: usize,
    size: usize,
    patch: usize,
) -> Result<Vec<f64>, ReapError> {
    if size % patch != 0 || pixels.len() != channels * size * size {
        return Err(ReapError::Invalid(format!(
            "pixel buffer {} does not match {channels}x{size}x{size} with patch {patch}",
            pixels.len()
        )));
    }
    let grid = size / patch;
    let n = grid * grid;
    let inv = 1.0 / (patch * patch) as f64;
    let mut out = vec![0.0; n * channels];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            for c in 0..channels {
                let mut sum = 0.0;
                for py in 0..patch {
                    let y = gy * patch + py;
                    let base = (c * size + y) * size + gx * patch;
                    for px in 0..patch {
                        sum += pixels[base + px];
                    }
                }
                out[row * channels + c] = sum * inv;
            }
        }
    }
    Ok(out)
}

/// `a = round(anchor_ratio * n)` distinct indices, uniform without
/// replacement, clamped to `1 <= a < n`.
///
/// Ratios below 0.6 are outside the recommended operating band and are
/// accepted (sweeps need them); validation happens at config level.
pub fn select_anchors(
    n: usize,
    anchor_ratio: f64,
    rng: &mut RngStream,
) -> Result<Vec<usize>, ReapError> {
    if !(anchor_ratio > 0.0 && anchor_ratio < 1.0) {
        return Err(ReapError::AnchorRatio(anchor_ratio));
    }
    let a = ((anchor_ratio * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    Ok(rng.sample_without_replacement(n, a))
}

/// Cosine similarity in [-1, 1]; a zero-norm vector never clusters
/// (similarity 0 against everything).
pub fn cosine_similarity(x: &[f64], a: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(a).map(|(u, v)| u * v).sum();
    let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || na == 0.0 {
        return 0.0;
    }
    (dot / (nx * na)).clamp(-1.0, 1.0)
}

/// Grow clusters around the anchors and trim to the exact target count.
pub fn build_clusters(
    means: &[f64],
    n: usize,
    channels: usize,
    anchors: &[usize],
    drop_ratio: f64,
) -> Result<ReapPlan, ReapError> {
    if !(drop_ratio > 0.0 && drop_ratio < 1.0) {
        return Err(ReapError::DropRatio(drop_ratio));
    }
    if means.len() != n * channels {
        return Err(ReapError::Invalid(format!(
            "means length {} != {n} patches x {channels} channels",
            means.len()
        )));
    }
    let mut is_anchor = vec![false; n];
    for &a in anchors {
        if a >= n {
            return Err(ReapError::Invalid(format!("anchor {a} out of range {n}")));
        }
        is_anchor[a] = true;
    }
    let target = ((drop_ratio * n as f64).round() as usize).max(anchors.len());

    // Membership is governed by each patch's best similarity to any
    // anchor; anchors score exactly 1 (self-similarity).
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut candidates: Vec<f64> = Vec::with_capacity(n * anchors.len());
    for i in 0..n {
        if is_anchor[i] {
            best[i] = 1.0;
            candidates.push(1.0);
            continue;
        }
        let xi = &means[i * channels..(i + 1) * channels];
        for &a in anchors {
            let s = cosine_similarity(xi, &means[a * channels..(a + 1) * channels]);
            candidates.push(s);
            if s > best[i] {
                best[i] = s;
            }
        }
    }
    candidates.sort_by(|a, b| b.partial_cmp(a).unwrap());
    candidates.dedup();

    // Largest threshold whose union reaches the target. The union only
    // grows as the threshold falls, and at the smallest candidate every
    // patch with an observed similarity joins, so the scan terminates.
    let mut threshold = *candidates.last().unwrap();
    for &t in &candidates {
        let count = best.iter().filter(|&&s| s >= t).count();
        if count >= target {
            threshold = t;
            break;
        }
    }

    let mut mask: Vec<bool> = best.iter().map(|&s| s >= threshold).collect();
    let mut count = mask.iter().filter(|&&m| m).count();

    // Exact trim: release lowest-similarity non-anchor members first,
    // ties by lowest index.
    if count > target {
        let mut members: Vec<usize> = (0..n).filter(|&i| mask[i] && !is_anchor[i]).collect();
        members.sort_by(|&i, &j| best[i].partial_cmp(&best[j]).unwrap().then(i.cmp(&j)));
        for &i in &members {
            if count == target {
                break;
            }
            mask[i] = false;
            count -= 1;
        }
    }

    Ok(ReapPlan {
        anchor_indices: anchors.to_vec(),
        threshold,
        replace_mask: mask,
        replaced_count: count,
    })
}

/// Convenience: anchors + clusters for one image.
pub fn plan_for_image(
    pixels: &[f64],
    cfg: &ViTConfig,
    knobs: &ReapKnobs,
    rng: &mut RngStream,
) -> Result<ReapPlan, ReapError> {
    let means = patch_means(pixels, cfg.channels, cfg.image_size, cfg.patch_size)?;
    let n = cfg.n_patches();
    let anchors = select_anchors(n, knobs.anchor_ratio, rng)?;
    build_clusters(&means, n, cfg.channels, &anchors, knobs.drop_ratio)
}

/// Assemble the full source-phase input for a batch: patchify, replace
/// each image's clustered tokens with fresh tau-scaled registers, then
/// append `register_count` extra random registers per image.
///
/// Replacement happens in token space after patch embedding: kept
/// positions carry exactly the tokens the plain pipeline would produce,
/// replaced positions are pure noise vectors with no positional term.
pub fn reap_input_batch(
    model: &VitModel,
    images: &[&[f64]],
    knobs: &ReapKnobs,
    rng: &mut RngStream,
) -> Result<(TokenSequence, Vec<ReapPlan>), ReapError> {
    let cfg = &model.cfg;
    let seq = patchify_batch(model, images)?;
    let mut plans = Vec::with_capacity(images.len());
    let mut rows = Vec::new();
    for (b, img) in images.iter().enumerate() {
        let mut img_rng = rng.fork("plan", b as u64);
        let plan = plan_for_image(img, cfg, knobs, &mut img_rng)?;
        for (patch, &replaced) in plan.replace_mask.iter().enumerate() {
            if replaced {
                rows.push(seq.image_row(b, patch));
            }
        }
        plans.push(plan);
    }

    let tau_extra = model.registers.tau().map_err(VitError::Tensor)?;
    let tau_cluster = if knobs.split_tau {
        model.registers.tau_cluster().map_err(VitError::Tensor)?
    } else {
        tau_extra.clone()
    };

    let mut replace_rng = rng.fork("replace", 0);
    let mut z = vec![0.0; rows.len() * cfg.dim];
    replace_rng.fill_gaussian(&mut z, 1.0);
    let replacement = Tensor::from_vec(&[rows.len(), cfg.dim], z)
        .and_then(|t| t.mul_scalar(&tau_cluster))
        .map_err(VitError::Tensor)?;
    let replaced_seq = TokenSequence {
        tokens: seq
            .tokens
            .replace_rows(&rows, &replacement)
            .map_err(VitError::Tensor)?,
        ..seq
    };

    let extra = cfg.register_count;
    let out = if extra > 0 {
        let mut extra_rng = rng.fork("extra", 0);
        let mut z = vec![0.0; images.len() * extra * cfg.dim];
        extra_rng.fill_gaussian(&mut z, 1.0);
        let regs = Tensor::from_vec(&[images.len() * extra, cfg.dim], z)
            .and_then(|t| t.mul_scalar(&tau_extra))
            .map_err(VitError::Tensor)?;
        attach_tokens(&replaced_seq, &regs)?
    } else {
        replaced_seq
    };
    Ok((out, plans))
}

/// Single-image wrapper around [`reap_input_batch`].
pub fn reap_input(
    model: &VitModel,
    image: &[f64],
    knobs: &ReapKnobs,
    rng: &mut RngStream,
) -> Result<(TokenSequence, ReapPlan), ReapError> {
    let (seq, mut plans) = reap_input_batch(model, &[image], knobs, rng)?;
    Ok((seq, plans.remove(0)))
}

/// Ablation inputs: the same number of patches removed (not replaced),
/// chosen uniformly at random or by the cluster rule. The CLS token is
/// kept; no registers are appended.
pub fn ablation_mask_batch(
    mode: MaskMode,
    model: &VitModel,
    images: &[&[f64]],
    knobs: &ReapKnobs,
    rng: &mut RngStream,
) -> Result<TokenSequence, ReapError> {
    let cfg = &model.cfg;
    let n = cfg.n_patches();
    let seq = patchify_batch(model, images)?;
    let l = seq.seq_len();

    let mut keep_rows = Vec::new();
    let mut kept_per_image = None;
    for (b, img) in images.iter().enumerate() {
        let mut img_rng = rng.fork("plan", b as u64);
        let removed: Vec<bool> = match mode {
            MaskMode::ClusterMask => plan_for_image(img, cfg, knobs, &mut img_rng)?.replace_mask,
            MaskMode::RandomMask => {
                // Parity with the cluster path: same removal count.
                let plan = plan_for_image(img, cfg, knobs, &mut img_rng)?;
                let mut mask = vec![false; n];
                for i in img_rng.sample_without_replacement(n, plan.replaced_count) {
                    mask[i] = true;
                }
                mask
            }
        };
        let kept = n - removed.iter().filter(|&&m| m).count();
        match kept_per_image {
            None => kept_per_image = Some(kept),
            Some(k) if k == kept => {}
            Some(k) => {
                return Err(ReapError::Invalid(format!(
                    "uneven kept counts in batch: {k} vs {kept}"
                )))
            }
        }
        keep_rows.push(b * l); // CLS
        for (patch, &m) in removed.iter().enumerate() {
            if !m {
                keep_rows.push(seq.image_row(b, patch));
            }
        }
    }
    let tokens = seq
        .tokens
        .select_rows(&keep_rows)
        .map_err(VitError::Tensor)?;
    Ok(TokenSequence {
        tokens,
        batch: images.len(),
        n_image: kept_per_image.unwrap_or(n),
        n_register: 0,
    })
}
