//! Register banks: extra tokens appended to the sequence, either
//! learnable parameters or fresh Gaussian noise scaled by a learnable
//! positive scale tau.
//!
//! Shallow banks attach once before block 0 and ride through the whole
//! encoder; deep banks are reinjected at every block entry (prior
//! register outputs discarded), mirroring deep prompt tuning. Random
//! registers are resampled on every forward pass during training and
//! dropped entirely for plain evaluation.

use thiserror::Error;

use crate::rng::RngStream;
use crate::tensor::{concat_interleaved, Tensor, TensorError};
use crate::vit::{RegisterDepth, RegisterMode, TokenSequence, ViTConfig, VitError};

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
}

/// Training/evaluation phase, deciding which registers are in play.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Source-domain training.
    Source,
    /// Target-domain finetuning on an episode's support set.
    Target,
    /// Prototype evaluation without finetuning: registers dropped.
    PlainEval,
}

/// What the current phase does with registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegisterPlan {
    NoRegisters,
    /// Attach the stored learnable bank.
    UseBank,
    /// Draw a fresh tau-scaled Gaussian bank (every step).
    FreshRandom { count: usize },
    /// Train a brand-new learnable bank of the source count.
    FreshLearnable { count: usize },
}

/// tau is kept positive by construction: the stored parameter is
/// log(tau) and every use goes through exp.
#[derive(Debug)]
pub struct RegisterBank {
    pub mode: RegisterMode,
    pub depth_mode: RegisterDepth,
    pub count: usize,
    /// Learnable mode: one bank (shallow) or one per block (deep).
    pub banks: Vec<Tensor>,
    pub log_tau: Tensor,
    /// Separate scale for cluster-replacement registers when the split
    /// option is on; otherwise unused.
    pub log_tau_cluster: Tensor,
}

impl RegisterBank {
    pub fn init(cfg: &ViTConfig, rng: &mut RngStream) -> Result<RegisterBank, TensorError> {
        let n_banks = match (cfg.register_mode, cfg.register_depth) {
            (RegisterMode::Learnable, RegisterDepth::Shallow) => 1,
            (RegisterMode::Learnable, RegisterDepth::Deep) => cfg.depth.max(1),
            _ => 0,
        };
        let mut banks = Vec::with_capacity(n_banks);
        for _ in 0..n_banks {
            let data: Vec<f64> = (0..cfg.register_count * cfg.dim)
                .map(|_| 0.02 * rng.next_gaussian())
                .collect();
            banks.push(Tensor::param(&[cfg.register_count, cfg.dim], data)?);
        }
        let log_tau = Tensor::param(&[1], vec![cfg.tau_init.ln()])?;
        let log_tau_cluster = Tensor::param(&[1], vec![cfg.tau_init.ln()])?;
        Ok(RegisterBank {
            mode: cfg.register_mode,
            depth_mode: cfg.register_depth,
            count: cfg.register_count,
            banks,
            log_tau,
            log_tau_cluster,
        })
    }

    /// tau as a graph node so gradients reach log_tau.
    pub fn tau(&self) -> Result<Tensor, TensorError> {
        self.log_tau.exp()
    }

    pub fn tau_cluster(&self) -> Result<Tensor, TensorError> {
        self.log_tau_cluster.exp()
    }

    pub fn tau_value(&self) -> f64 {
        self.log_tau.item().exp()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .banks
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("registers.bank{i}"), b.clone()))
            .collect();
        out.push(("registers.log_tau".to_string(), self.log_tau.clone()));
        out.push((
            "registers.log_tau_cluster".to_string(),
            self.log_tau_cluster.clone(),
        ));
        out
    }

    pub fn map_params(&self, f: &impl Fn(&Tensor) -> Tensor) -> RegisterBank {
        RegisterBank {
            mode: self.mode,
            depth_mode: self.depth_mode,
            count: self.count,
            banks: self.banks.iter().map(f).collect(),
            log_tau: f(&self.log_tau),
            log_tau_cluster: f(&self.log_tau_cluster),
        }
    }
}

/// i.i.d. N(0, tau^2) register vectors via the reparameterization
/// `T = tau * z`, `z ~ N(0, 1)`, so gradients flow to tau.
pub fn sample_random_registers(
    count: usize,
    dim: usize,
    tau: &Tensor,
    rng: &mut RngStream,
) -> Result<Tensor, TensorError> {
    let mut z = vec![0.0; count * dim];
    rng.fill_gaussian(&mut z, 1.0);
    Tensor::from_vec(&[count, dim], z)?.mul_scalar(tau)
}

/// Resolve the effective registers for a phase.
///
/// Source keeps the configured behaviour (fresh noise every step for
/// random mode); plain evaluation drops registers entirely; the target
/// finetuning phase trains a new learnable bank of the source count.
pub fn registers_for_phase(phase: Phase, bank: &RegisterBank) -> RegisterPlan {
    match phase {
        Phase::PlainEval => RegisterPlan::NoRegisters,
        Phase::Source => match bank.mode {
            RegisterMode::None => RegisterPlan::NoRegisters,
            RegisterMode::Learnable => RegisterPlan::UseBank,
            RegisterMode::Random => RegisterPlan::FreshRandom { count: bank.count },
        },
        Phase::Target => RegisterPlan::FreshLearnable { count: bank.count },
    }
}

/// Append register rows to a sequence. `regs` is either `[count, dim]`
/// (shared across the batch) or `[batch*count, dim]` (per image).
pub fn attach_tokens(seq: &TokenSequence, regs: &Tensor) -> Result<TokenSequence, VitError> {
    let dim = seq.tokens.cols();
    if regs.cols() != dim {
        return Err(VitError::Tensor(TensorError::DimensionMismatch {
            op: "attach_tokens",
            lhs: seq.tokens.shape(),
            rhs: regs.shape(),
        }));
    }
    let rows = regs.rows();
    let per_image = if rows % seq.batch == 0 && rows != 0 {
        rows / seq.batch
    } else {
        rows
    };
    let expanded;
    let regs_ref = if rows == per_image * seq.batch && rows != 0 {
        regs
    } else {
        expanded = regs.repeat_rows(seq.batch)?;
        &expanded
    };
    let count = regs_ref.rows() / seq.batch.max(1);
    let tokens = concat_interleaved(&[&seq.tokens, regs_ref], seq.batch)?;
    Ok(TokenSequence {
        tokens,
        batch: seq.batch,
        n_image: seq.n_image,
        n_register: seq.n_register + count,
    })
}

/// Phase-aware attachment for the source and plain-eval paths (the
/// target path builds its own fresh bank during finetuning).
///
/// Plain evaluation never consumes the RNG: a random-register model's
/// evaluation output is a pure function of the image.
pub fn attach(
    seq: &TokenSequence,
    bank: &RegisterBank,
    phase: Phase,
    rng: Option<&mut RngStream>,
) -> Result<TokenSequence, VitError> {
    match registers_for_phase(phase, bank) {
        RegisterPlan::NoRegisters => Ok(seq.clone()),
        RegisterPlan::UseBank => {
            if bank.banks.is_empty() || bank.count == 0 {
                return Ok(seq.clone());
            }
            attach_tokens(seq, &bank.banks[0])
        }
        RegisterPlan::FreshRandom { count } => {
            if count == 0 {
                return Ok(seq.clone());
            }
            let rng = rng.ok_or_else(|| {
                VitError::Config("random registers need an RNG stream".into())
            })?;
            let tau = bank.tau().map_err(VitError::Tensor)?;
            let dim = seq.tokens.cols();
            let regs = sample_random_registers(seq.batch * count, dim, &tau, rng)
                .map_err(VitError::Tensor)?;
            attach_tokens(seq, &regs)
        }
        RegisterPlan::FreshLearnable { .. } => Err(VitError::Config(
            "target-phase registers are created by episode finetuning, not attach()".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Adam;
    use crate::vit::{
        encode, forward, patchify, patchify_batch, DeepSource, EncodeOptions, VitModel,
    };

    fn cfg_with(mode: RegisterMode, depth_mode: RegisterDepth, count: usize) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            depth: 3,
            heads: 2,
            dim: 8,
            mlp_ratio: 2.0,
            n_classes: 3,
            register_mode: mode,
            register_depth: depth_mode,
            register_count: count,
            tau_init: 0.1,
        }
    }

    fn rand_image(cfg: &ViTConfig, rng: &mut RngStream) -> Vec<f64> {
        (0..cfg.channels * cfg.image_size * cfg.image_size)
            .map(|_| rng.next_uniform())
            .collect()
    }

    #[test]
    fn default_tau_matches_documented_initial_value() {
        assert_eq!(ViTConfig::default().tau_init, 0.1);
        assert_eq!(ViTConfig::default().register_count, 16);
    }

    #[test]
    fn sample_count_zero_is_empty() {
        let tau = Tensor::param(&[1], vec![0.1]).unwrap();
        let mut rng = RngStream::new(1, "reg");
        let r = sample_random_registers(0, 8, &tau, &mut rng).unwrap();
        assert_eq!(r.shape(), vec![0, 8]);
        assert_eq!(r.numel(), 0);
    }

    #[test]
    fn sample_moments_match_tau() {
        let tau_v: f64 = 0.1;
        let tau = Tensor::param(&[1], vec![tau_v]).unwrap();
        let mut rng = RngStream::new(2, "reg");
        let n = 100_000usize;
        let r = sample_random_registers(n / 10, 10, &tau, &mut rng).unwrap();
        let v = r.to_vec();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        let se_mean = tau_v / (n as f64).sqrt();
        let se_std = tau_v / (2.0 * n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var.sqrt() - tau_v).abs() < 3.0 * se_std, "std {}", var.sqrt());
    }

    #[test]
    fn gradient_reaches_tau_through_reparameterization() {
        let cfg = cfg_with(RegisterMode::Random, RegisterDepth::Shallow, 4);
        let mut rng = RngStream::new(3, "init");
        let bank = RegisterBank::init(&cfg, &mut rng).unwrap();
        let tau = bank.tau().unwrap();
        let regs = sample_random_registers(4, cfg.dim, &tau, &mut rng).unwrap();
        let loss = regs.mul(&regs).unwrap().sum_all();
        loss.backward().unwrap();
        let g = bank.log_tau.grad().unwrap();
        assert!(g[0].abs() > 0.0, "log_tau never received a gradient");
    }

    #[test]
    fn attach_shallow_16_registers_gives_l_33() {
        let mut cfg = ViTConfig::default();
        cfg.register_mode = RegisterMode::Learnable;
        let mut rng = RngStream::new(4, "init");
        let model = VitModel::init(cfg.clone(), &mut rng).unwrap();
        let img: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.next_uniform()).collect();
        let seq = patchify(&model, &img).unwrap();
        assert_eq!(seq.seq_len(), 17);
        let with = attach(&seq, &model.registers, Phase::Source, None).unwrap();
        assert_eq!(with.seq_len(), 33);
        assert_eq!(with.n_register, 16);
        assert_eq!(
            with.roles()
                .iter()
                .filter(|r| **r == crate::vit::TokenRole::Register)
                .count(),
            16
        );
    }

    #[test]
    fn mode_none_and_plain_eval_are_identity() {
        let cfg = cfg_with(RegisterMode::None, RegisterDepth::Shallow, 0);
        let mut rng = RngStream::new(5, "init");
        let model = VitModel::init(cfg.clone(), &mut rng).unwrap();
        let img = rand_image(&cfg, &mut rng);
        let seq = patchify(&model, &img).unwrap();
        let out = attach(&seq, &model.registers, Phase::Source, None).unwrap();
        assert_eq!(out.seq_len(), seq.seq_len());

        // random-mode model at plain eval: registers dropped, no RNG use
        let cfg = cfg_with(RegisterMode::Random, RegisterDepth::Shallow, 8);
        let model = VitModel::init(cfg.clone(), &mut rng).unwrap();
        let img = rand_image(&cfg, &mut rng);
        let seq = patchify(&model, &img).unwrap();
        let mut eval_rng = RngStream::new(77, "eval");
        let out = attach(&seq, &model.registers, Phase::PlainEval, Some(&mut eval_rng)).unwrap();
        assert_eq!(out.seq_len(), seq.seq_len());
        assert_eq!(eval_rng.draws(), 0, "plain eval must not consume RNG");
    }

    #[test]
    fn target_phase_plan_keeps_source_count() {
        let cfg = cfg_with(RegisterMode::Random, RegisterDepth::Shallow, 16);
        let mut rng = RngStream::new(6, "init");
        let bank = RegisterBank::init(&cfg, &mut rng).unwrap();
        assert_eq!(
            registers_for_phase(Phase::Target, &bank),
            RegisterPlan::FreshLearnable { count: 16 }
        );
        assert_eq!(
            registers_for_phase(Phase::PlainEval, &bank),
            RegisterPlan::NoRegisters
        );
    }

    #[test]
    fn tau_stays_positive_under_optimization() {
        let cfg = cfg_with(RegisterMode::Random, RegisterDepth::Shallow, 4);
        let mut rng = RngStream::new(7, "init");
        let bank = RegisterBank::init(&cfg, &mut rng).unwrap();
        let mut opt = Adam::new();
        opt.add_group(&[bank.log_tau.clone()], 0.5);
        // push tau downward hard: loss = tau
        for _ in 0..200 {
            opt.zero_grad();
            let loss = bank.tau().unwrap().sum_all();
            loss.backward().unwrap();
            opt.step().unwrap();
        }
        assert!(bank.tau_value() > 0.0);
        assert!(bank.tau_value() < 0.1);
    }

    #[test]
    fn learnable_bank_receives_gradient_on_generic_batch() {
        let cfg = cfg_with(RegisterMode::Learnable, RegisterDepth::Shallow, 4);
        let mut rng = RngStream::new(8, "init");
        let model = VitModel::init(cfg.clone(), &mut rng).unwrap();
        let imgs: Vec<Vec<f64>> = (0..3).map(|_| rand_image(&cfg, &mut rng)).collect();
        let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
        let seq = patchify_batch(&model, &refs).unwrap();
        let seq = attach(&seq, &model.registers, Phase::Source, None).unwrap();
        let (_, logits, _) = forward(&model, &seq, false).unwrap();
        let loss = logits.cross_entropy_mean(&[0, 1, 2]).unwrap();
        loss.backward().unwrap();
        let g = model.registers.banks[0].grad().unwrap();
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "bank gradient is numerically zero");
    }

    #[test]
    fn permuting_registers_leaves_cls_output_unchanged() {
        let cfg = cfg_with(RegisterMode::Learnable, RegisterDepth::Shallow, 5);
        let mut rng = RngStream::new(9, "init");
        let model = VitModel::init(cfg.clone(), &mut rng).unwrap();
        let img = rand_image(&cfg, &mut rng);
        let seq = patchify(&model, &img).unwrap();

        let bank = &model.registers.banks[0];
        let straight = attach_tokens(&seq, bank).unwrap();
        let permuted_bank = bank.select_rows(&[3, 0, 4, 2, 1]).unwrap();
        let permuted = attach_tokens(&seq, &permuted_bank).unwrap();

        let (f1, _, _) = forward(&model, &straight, false).unwrap();
        let (f2, _, _) = forward(&model, &permuted, false).unwrap();
        for (a, b) in f1.to_vec().iter().zip(f2.to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn deep_registers_are_independent_of_previous_block_outputs() {
        let cfg = cfg_with(RegisterMode::Learnable, RegisterDepth::Deep, 3);
        let mut rng = RngStream::new(10, "init");
        let model = VitModel::init(cfg.clone(), &mut rng).unwrap();
        assert_eq!(model.registers.banks.len(), cfg.depth);
        let img = rand_image(&cfg, &mut rng);
        let seq = patchify(&model, &img).unwrap();
        let seq = attach(&seq, &model.registers, Phase::Source, None).unwrap();

        let run = |zero_hook: bool| {
            let (f, _) = encode(&model, &seq, EncodeOptions {
                capture_attention: false,
                attn_noise: None,
                deep: Some(DeepSource::Learnable(&model.registers.banks)),
                zero_register_rows_between_blocks: zero_hook,
            })
            .unwrap();
            f.to_vec()
        };
        // Zeroing each block's register outputs must not matter: the next
        // block's registers come from its own bank.
        assert_eq!(run(false), run(true));
    }
}
