//! Experiment configuration: a versioned JSON schema with exhaustive
//! validation. Unknown keys are errors so sweep-script typos fail
//! loudly instead of silently running defaults.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DomainSpec;
use crate::reap::ReapKnobs;
use crate::train::{Method, TrainSettings};
use crate::vit::{RegisterDepth, ViTConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config validation failed:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: f64,
    pub n_classes: usize,
    /// Register count for the register methods (the register mode itself
    /// is derived from `method`).
    pub register_count: usize,
    pub register_depth: RegisterDepth,
    pub tau_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let v = ViTConfig::default();
        ModelConfig {
            image_size: v.image_size,
            patch_size: v.patch_size,
            channels: v.channels,
            depth: v.depth,
            heads: v.heads,
            dim: v.dim,
            mlp_ratio: v.mlp_ratio,
            n_classes: v.n_classes,
            register_count: v.register_count,
            register_depth: v.register_depth,
            tau_init: v.tau_init,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub lr_registers: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let t = TrainSettings::default();
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr_backbone: t.lr_backbone,
            lr_head: t.lr_head,
            lr_registers: t.lr_registers,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ReapConfig {
    pub anchor_ratio: f64,
    pub drop_ratio: f64,
    /// Count of extra random registers appended after the image slots.
    pub extra_registers: usize,
    /// Overrides model.tau_init for the replacement path when set.
    pub tau_init: Option<f64>,
    /// Separate learnable scale for cluster-replacement registers.
    pub split_tau: bool,
}

impl Default for ReapConfig {
    fn default() -> Self {
        ReapConfig {
            anchor_ratio: 0.7,
            drop_ratio: 0.7,
            extra_registers: 16,
            tau_init: None,
            split_tau: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub sigma: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig { sigma: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneRegistersConfig {
    Learnable,
    None,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub episodes: usize,
    pub finetune: bool,
    pub finetune_steps: usize,
    pub finetune_registers: FinetuneRegistersConfig,
    pub lr_registers: f64,
    pub lr_head: f64,
    pub finetune_backbone: bool,
    pub lr_backbone_finetune: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_way: 5,
            k_shot: 5,
            q_queries: 15,
            episodes: 200,
            finetune: false,
            finetune_steps: 50,
            finetune_registers: FinetuneRegistersConfig::Learnable,
            lr_registers: 1e-3,
            lr_head: 1e-3,
            finetune_backbone: false,
            lr_backbone_finetune: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// Sigma grid for the sharpness probe, sorted ascending.
    pub sigmas: Vec<f64>,
    pub draws: usize,
    /// Images per domain batch for the CKA probe.
    pub cka_batch: usize,
    /// Episode shape for the target-domain sharpness loss.
    pub sharpness_n_way: usize,
    pub sharpness_k_shot: usize,
    pub sharpness_q_queries: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            sigmas: vec![0.0, 0.001, 0.01, 0.1, 1.0],
            draws: 32,
            cka_batch: 64,
            sharpness_n_way: 5,
            sharpness_k_shot: 5,
            sharpness_q_queries: 15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generator seed for the whole suite (independent of train seeds).
    pub seed: u64,
    pub source_classes: usize,
    pub source_images_per_class: usize,
    pub target_classes: usize,
    pub target_images_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 9000,
            source_classes: 8,
            source_images_per_class: 200,
            target_classes: 5,
            target_images_per_class: 40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub method: Method,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reap: Option<ReapConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<PerturbConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub analyze: AnalyzeConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn new(method: Method) -> Self {
        let mut cfg = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            method,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            reap: None,
            perturb: None,
            eval: EvalConfig::default(),
            analyze: AnalyzeConfig::default(),
            seeds: vec![0],
        };
        if method.uses_reap_knobs() {
            cfg.reap = Some(ReapConfig::default());
        }
        if method.uses_perturb_sigma() {
            cfg.perturb = Some(PerturbConfig::default());
        }
        cfg
    }

    pub fn from_json(json: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(json)?;
        let warnings = cfg.validate()?;
        for w in warnings {
            eprintln!("config warning: {w}");
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<ExperimentConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hard errors abort; soft warnings are returned for logging.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let mut errors = Vec::new();
        let mut warnings = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errors.push(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            errors.push("seeds must not be empty".into());
        }
        {
            let mut sorted = self.seeds.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.seeds.len() {
                errors.push("seeds contain duplicates".into());
            }
        }
        if let Err(e) = self.vit_config().validate() {
            errors.push(e.to_string());
        }
        if self.model.n_classes != self.data.source_classes {
            errors.push(format!(
                "model.n_classes {} != data.source_classes {}",
                self.model.n_classes, self.data.source_classes
            ));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            errors.push("train.epochs and train.batch_size must be positive".into());
        }
        for (name, lr) in [
            ("train.lr_backbone", self.train.lr_backbone),
            ("train.lr_head", self.train.lr_head),
            ("train.lr_registers", self.train.lr_registers),
            ("eval.lr_registers", self.eval.lr_registers),
            ("eval.lr_head", self.eval.lr_head),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                errors.push(format!("{name} must be positive and finite, got {lr}"));
            }
        }

        // Method-specific knobs are rejected when the method cannot use
        // them, and validated when it can.
        match (&self.reap, self.method.uses_reap_knobs()) {
            (Some(_), false) => errors.push(format!(
                "reap knobs are rejected for method {}",
                self.method.name()
            )),
            (Some(r), true) => {
                if !(r.anchor_ratio > 0.0 && r.anchor_ratio < 1.0) {
                    errors.push(format!("reap.anchor_ratio {} outside (0,1)", r.anchor_ratio));
                } else if r.anchor_ratio < 0.6 {
                    warnings.push(format!(
                        "reap.anchor_ratio {} below the recommended 0.6 lower bound",
                        r.anchor_ratio
                    ));
                }
                if !(r.drop_ratio > 0.0 && r.drop_ratio < 1.0) {
                    errors.push(format!("reap.drop_ratio {} outside (0,1)", r.drop_ratio));
                }
                if let Some(t) = r.tau_init {
                    if t <= 0.0 {
                        errors.push(format!("reap.tau_init {t} must be positive"));
                    }
                }
            }
            (None, true) => {}
            (None, false) => {}
        }
        match (&self.perturb, self.method.uses_perturb_sigma()) {
            (Some(_), false) => errors.push(format!(
                "perturb knobs are rejected for method {}",
                self.method.name()
            )),
            (Some(p), true) => {
                if !(p.sigma >= 0.0 && p.sigma.is_finite()) {
                    errors.push(format!("perturb.sigma {} must be >= 0", p.sigma));
                }
            }
            _ => {}
        }

        if self.eval.n_way == 0 || self.eval.k_shot == 0 || self.eval.q_queries == 0 {
            errors.push("eval.n_way/k_shot/q_queries must be positive".into());
        }
        if self.eval.n_way > self.data.target_classes {
            errors.push(format!(
                "eval.n_way {} exceeds target_classes {}",
                self.eval.n_way, self.data.target_classes
            ));
        }
        if self.eval.k_shot + self.eval.q_queries > self.data.target_images_per_class {
            errors.push(format!(
                "k_shot + q_queries = {} exceeds target_images_per_class {}",
                self.eval.k_shot + self.eval.q_queries,
                self.data.target_images_per_class
            ));
        }
        if self.analyze.sigmas.windows(2).any(|w| w[0] > w[1]) {
            errors.push("analyze.sigmas must be sorted ascending".into());
        }
        if self.analyze.draws == 0 {
            errors.push("analyze.draws must be positive".into());
        }

        if errors.is_empty() {
            Ok(warnings)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    /// The model config resolved for this method: register mode derived,
    /// REAP's extra registers mapped onto the register count.
    pub fn vit_config(&self) -> ViTConfig {
        let m = &self.model;
        let mut tau = m.tau_init;
        let mut register_count = m.register_count;
        if let Some(r) = &self.reap {
            if self.method == Method::Reap {
                register_count = r.extra_registers;
                if let Some(t) = r.tau_init {
                    tau = t;
                }
            }
        }
        ViTConfig {
            image_size: m.image_size,
            patch_size: m.patch_size,
            channels: m.channels,
            depth: m.depth,
            heads: m.heads,
            dim: m.dim,
            mlp_ratio: m.mlp_ratio,
            n_classes: m.n_classes,
            register_mode: self.method.register_mode(),
            register_depth: m.register_depth,
            register_count,
            tau_init: tau,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        let reap_cfg = self.reap.clone().unwrap_or_default();
        TrainSettings {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr_backbone: self.train.lr_backbone,
            lr_head: self.train.lr_head,
            lr_registers: self.train.lr_registers,
            reap: ReapKnobs {
                anchor_ratio: reap_cfg.anchor_ratio,
                drop_ratio: reap_cfg.drop_ratio,
                split_tau: reap_cfg.split_tau,
            },
            perturb_sigma: self.perturb.clone().unwrap_or_default().sigma,
        }
    }

    /// Domain specs for the configured suite (source plus the three
    /// shift-ladder targets).
    pub fn suite(&self) -> (DomainSpec, Vec<DomainSpec>) {
        let (mut source, mut targets) = crate::data::default_suite(self.data.seed);
        source.class_count = self.data.source_classes;
        source.images_per_class = self.data.source_images_per_class;
        source.image_size = self.model.image_size;
        for t in &mut targets {
            t.class_count = self.data.target_classes;
            t.images_per_class = self.data.target_images_per_class;
            t.image_size = self.model.image_size;
        }
        (source, targets)
    }

    /// Stable hash of the resolved config, used in run directory names.
    pub fn config_hash(&self) -> String {
        crate::util::short_hash(self.to_json_pretty().as_bytes())
    }
}
