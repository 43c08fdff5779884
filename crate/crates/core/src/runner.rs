//! Experiment commands behind the CLI: data generation, training,
//! evaluation, analysis. Every command is idempotent for a given
//! (config, seed): re-running overwrites data files with byte-identical
//! content. Wall-clock timestamps only ever go to `run.log`.
//!
//! Output layout under `--out`:
//!
//! ```text
//! datasets/<domain>.rlds
//! runs/<method>-<confighash>-s<seed>/
//!   config.json            resolved config echo (seeds: [seed])
//!   checkpoint.rlab
//!   train_log.csv          epoch,mean_loss,accuracy
//!   eval_<domain>.csv      episode,mode,accuracy
//!   eval_summary.json
//!   analysis/...           sharpness/CKA/heatmap reports + manifest
//! run.log
//! ```

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::analysis::{
    attention_sharpness, domain_similarity, export_attention_heatmap, AnalysisError,
    SharpnessProbe, SharpnessReport,
};
use crate::checkpoint::{CheckpointError, TensorFile};
use crate::config::{ConfigError, ExperimentConfig, FinetuneRegistersConfig};
use crate::data::{generate_domain, load_dataset, write_dataset, DataError, Dataset};
use crate::fewshot::{
    evaluate, sample_episode, EvalMode, EvalResult, EvalSettings, FewshotError, FinetuneOptions,
    FinetuneRegisters,
};
use crate::rng::RngStream;
use crate::train::{train_source, EpochStats, TrainError};
use crate::util::{fmt_f64, run_parallel, write_file};
use crate::vit::{BlockSelect, VitError, VitModel};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Fewshot(#[from] FewshotError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error("missing artifact: {0} (run the producing command first)")]
    Missing(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl RunnerError {
    /// Exit code contract: 1 for validation problems, 2 for runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn append_run_log(out: &Path, line: &str) {
    let _ = std::fs::create_dir_all(out);
    if let Ok(mut f) = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("run.log"))
    {
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(f, "[{now}] {line}");
    }
}

/// Directory-name hash: stable across seed selection.
fn run_hash(config: &ExperimentConfig) -> String {
    let mut c = config.clone();
    c.seeds = Vec::new();
    c.config_hash()
}

pub fn run_dir(out: &Path, config: &ExperimentConfig, seed: u64) -> PathBuf {
    out.join("runs")
        .join(format!("{}-{}-s{seed}", config.method.name(), run_hash(config)))
}

fn effective_seeds(config: &ExperimentConfig, seed_override: Option<u64>) -> Vec<u64> {
    match seed_override {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    }
}

pub fn dataset_path(out: &Path, domain: &str) -> PathBuf {
    out.join("datasets").join(format!("{domain}.rlds"))
}

fn load_required_dataset(out: &Path, domain: &str) -> Result<Dataset, RunnerError> {
    let path = dataset_path(out, domain);
    if !path.exists() {
        return Err(RunnerError::Missing(path));
    }
    Ok(load_dataset(&path)?)
}

// ----------------------------------------------------------------------
// gen-data
// ----------------------------------------------------------------------

/// Write the source + target suite. Returns the file paths.
pub fn cmd_gen_data(
    config: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<PathBuf>, RunnerError> {
    config.validate()?;
    let (source, targets) = config.suite();
    std::fs::create_dir_all(out.join("datasets")).map_err(io_err(out))?;
    let mut written = Vec::new();
    for spec in std::iter::once(&source).chain(targets.iter()) {
        let ds = generate_domain(spec);
        let path = dataset_path(out, &spec.name);
        write_dataset(&ds, &path)?;
        written.push(path);
    }
    append_run_log(out, &format!("gen-data wrote {} files", written.len()));
    Ok(written)
}

// ----------------------------------------------------------------------
// train
// ----------------------------------------------------------------------

#[derive(Debug)]
pub struct TrainOutput {
    pub seed: u64,
    pub dir: PathBuf,
    pub stats: Vec<EpochStats>,
}

fn write_train_log(path: &Path, stats: &[EpochStats]) -> Result<(), RunnerError> {
    let mut csv = String::from("epoch,mean_loss,accuracy\n");
    for s in stats {
        csv.push_str(&format!(
            "{},{},{}\n",
            s.epoch,
            fmt_f64(s.mean_loss),
            fmt_f64(s.accuracy)
        ));
    }
    write_file(path, csv.as_bytes()).map_err(io_err(path))
}

/// Train one checkpoint per seed (in parallel across seeds).
pub fn cmd_train(
    config: &ExperimentConfig,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<Vec<TrainOutput>, RunnerError> {
    config.validate()?;
    let source = load_required_dataset(out, "source")?;
    let seeds = effective_seeds(config, seed_override);

    let jobs: Vec<Box<dyn FnOnce() -> Result<(u64, TensorFile, Vec<EpochStats>), RunnerError> + Send>> =
        seeds
            .iter()
            .map(|&seed| {
                let cfg = config.vit_config();
                let method = config.method;
                let settings = config.train_settings();
                let dataset = source.clone();
                Box::new(move || {
                    let (model, stats) = train_source(cfg, method, &dataset, &settings, seed)?;
                    Ok((seed, model.snapshot(), stats))
                }) as Box<dyn FnOnce() -> _ + Send>
            })
            .collect();

    let mut outputs = Vec::new();
    for result in run_parallel(jobs) {
        let (seed, snapshot, stats) = result?;
        let dir = run_dir(out, config, seed);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut echo = config.clone();
        echo.seeds = vec![seed];
        write_file(&dir.join("config.json"), echo.to_json_pretty().as_bytes())
            .map_err(io_err(&dir))?;
        snapshot.save(&dir.join("checkpoint.rlab"))?;
        write_train_log(&dir.join("train_log.csv"), &stats)?;
        outputs.push(TrainOutput { seed, dir, stats });
    }
    append_run_log(
        out,
        &format!("train method={} seeds={seeds:?}", config.method.name()),
    );
    Ok(outputs)
}

fn load_checkpoint(
    config: &ExperimentConfig,
    out: &Path,
    seed: u64,
) -> Result<VitModel, RunnerError> {
    let path = run_dir(out, config, seed).join("checkpoint.rlab");
    if !path.exists() {
        return Err(RunnerError::Missing(path));
    }
    let file = TensorFile::load(&path)?;
    Ok(VitModel::from_snapshot(config.vit_config(), &file)?)
}

// ----------------------------------------------------------------------
// eval
// ----------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct DomainSummary {
    pub domain: String,
    pub mode: String,
    pub episodes: usize,
    pub mean: f64,
    pub ci95: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub method: String,
    pub seed: u64,
    pub domains: Vec<DomainSummary>,
    /// Per mode, the mean over every episode of every domain.
    pub aggregate: Vec<DomainSummary>,
}

#[derive(Debug)]
pub struct EvalOutput {
    pub seed: u64,
    pub dir: PathBuf,
    /// (domain, mode) -> result
    pub results: Vec<(String, String, EvalResult)>,
}

fn finetune_options(config: &ExperimentConfig) -> FinetuneOptions {
    FinetuneOptions {
        steps: config.eval.finetune_steps,
        lr_registers: config.eval.lr_registers,
        lr_head: config.eval.lr_head,
        registers: match config.eval.finetune_registers {
            FinetuneRegistersConfig::Learnable => FinetuneRegisters::Learnable,
            FinetuneRegistersConfig::None => FinetuneRegisters::NoRegisters,
            FinetuneRegistersConfig::Random => FinetuneRegisters::Random,
        },
        finetune_backbone: config.eval.finetune_backbone,
        lr_backbone: config.eval.lr_backbone_finetune,
    }
}

/// Per-domain episodic evaluation of the trained checkpoints.
pub fn cmd_eval(
    config: &ExperimentConfig,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<Vec<EvalOutput>, RunnerError> {
    config.validate()?;
    let (_, target_specs) = config.suite();
    let mut targets = Vec::new();
    for spec in &target_specs {
        targets.push((spec.name.clone(), load_required_dataset(out, &spec.name)?));
    }
    let seeds = effective_seeds(config, seed_override);

    let mut outputs = Vec::new();
    for &seed in &seeds {
        let model = load_checkpoint(config, out, seed)?;
        let dir = run_dir(out, config, seed);
        let mut results = Vec::new();
        let mut domains = Vec::new();
        let mut per_mode_rows: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for (name, dataset) in &targets {
            let mut modes = vec![EvalMode::Plain];
            if config.eval.finetune {
                modes.push(EvalMode::Finetune);
            }
            let mut csv = String::from("episode,mode,accuracy\n");
            for mode in modes {
                let settings = EvalSettings {
                    n_way: config.eval.n_way,
                    k_shot: config.eval.k_shot,
                    q_queries: config.eval.q_queries,
                    episodes: config.eval.episodes,
                    mode,
                    finetune: finetune_options(config),
                };
                let mode_name = match mode {
                    EvalMode::Plain => "plain",
                    EvalMode::Finetune => "finetune",
                };
                // Episode streams depend on (train seed, domain) only, so
                // different methods see identical episodes.
                let rng = RngStream::new(seed, &format!("eval-{name}"));
                let result = evaluate(&model, dataset, &settings, &rng)?;
                for (e, acc) in result.per_episode.iter().enumerate() {
                    csv.push_str(&format!("{e},{mode_name},{}\n", fmt_f64(*acc)));
                }
                domains.push(DomainSummary {
                    domain: name.clone(),
                    mode: mode_name.to_string(),
                    episodes: result.per_episode.len(),
                    mean: result.mean,
                    ci95: result.ci95,
                });
                per_mode_rows
                    .entry(mode_name.to_string())
                    .or_default()
                    .extend(&result.per_episode);
                results.push((name.clone(), mode_name.to_string(), result));
            }
            let path = dir.join(format!("eval_{name}.csv"));
            write_file(&path, csv.as_bytes()).map_err(io_err(&path))?;
        }
        let aggregate = per_mode_rows
            .into_iter()
            .map(|(mode, rows)| {
                let (mean, ci95) = crate::fewshot::summarize(&rows);
                DomainSummary {
                    domain: "all".into(),
                    mode,
                    episodes: rows.len(),
                    mean,
                    ci95,
                }
            })
            .collect();
        let summary = EvalSummary {
            schema_version: 1,
            method: config.method.name().to_string(),
            seed,
            domains,
            aggregate,
        };
        let path = dir.join("eval_summary.json");
        write_file(
            &path,
            serde_json::to_string_pretty(&summary)
                .expect("summary serializes")
                .as_bytes(),
        )
        .map_err(io_err(&path))?;
        outputs.push(EvalOutput { seed, dir, results });
    }
    append_run_log(
        out,
        &format!("eval method={} seeds={seeds:?}", config.method.name()),
    );
    Ok(outputs)
}

// ----------------------------------------------------------------------
// analyze
// ----------------------------------------------------------------------

#[derive(Debug, Serialize)]
pub struct CkaReport {
    pub schema_version: u32,
    pub method: String,
    pub seed: u64,
    pub source_batch: String,
    pub feature_layer: String,
    /// (target domain, cka value)
    pub values: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct AnalyzeOutput {
    pub seed: u64,
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub sharpness: Vec<SharpnessReport>,
    pub cka: CkaReport,
}

fn heatmap_csv(heat: &[f64], grid: usize) -> String {
    let mut csv = String::new();
    for y in 0..grid {
        let row: Vec<String> = (0..grid).map(|x| fmt_f64(heat[y * grid + x])).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    csv
}

/// Emit sharpness reports (all-blocks and first-block), CKA reports,
/// heatmaps, and plot-ready long CSVs, plus a manifest of every file.
pub fn cmd_analyze(
    config: &ExperimentConfig,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<Vec<AnalyzeOutput>, RunnerError> {
    config.validate()?;
    let source = load_required_dataset(out, "source")?;
    let (_, target_specs) = config.suite();
    let mut targets = Vec::new();
    for spec in &target_specs {
        targets.push((spec.name.clone(), load_required_dataset(out, &spec.name)?));
    }
    let seeds = effective_seeds(config, seed_override);
    let an = &config.analyze;

    let mut outputs = Vec::new();
    for &seed in &seeds {
        let model = load_checkpoint(config, out, seed)?;
        let dir = run_dir(out, config, seed).join("analysis");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut files = Vec::new();
        let mut sharpness_reports = Vec::new();
        let mut sharpness_long = String::from("method,domain,blocks,sigma,sharpness\n");
        let method = config.method.name();

        // Source-domain sharpness: classifier cross-entropy on a fixed
        // batch.
        let mut batch_rng = RngStream::new(seed, "analysis-source-batch");
        let picks =
            batch_rng.sample_without_replacement(source.records.len(), an.cka_batch.min(source.records.len()));
        let src_images: Vec<&[f64]> = picks
            .iter()
            .map(|&i| source.records[i].pixels.as_slice())
            .collect();
        let src_labels: Vec<usize> = picks.iter().map(|&i| source.records[i].class).collect();

        let mut domains: Vec<(String, SharpnessProbe)> = vec![(
            "source".to_string(),
            SharpnessProbe::SourceBatch {
                images: src_images.clone(),
                labels: src_labels,
            },
        )];
        // Target-domain sharpness: prototype-episode loss on one fixed
        // episode per domain (shared across methods via seed-only
        // streams).
        let episodes: Vec<_> = targets
            .iter()
            .map(|(name, ds)| {
                let mut erng = RngStream::new(seed, &format!("sharp-episode-{name}"));
                sample_episode(
                    ds,
                    an.sharpness_n_way,
                    an.sharpness_k_shot,
                    an.sharpness_q_queries,
                    &mut erng,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        for ((name, ds), ep) in targets.iter().zip(&episodes) {
            domains.push((
                name.clone(),
                SharpnessProbe::Episode {
                    dataset: ds,
                    episode: ep,
                },
            ));
        }

        for (domain, probe) in &domains {
            for blocks in [BlockSelect::All, BlockSelect::Single(0)] {
                let rng = RngStream::new(seed, &format!("sharpness-{domain}"));
                let report = attention_sharpness(
                    &model, probe, domain, &an.sigmas, an.draws, blocks, &rng,
                )?;
                let tag = match blocks {
                    BlockSelect::All => "all",
                    BlockSelect::Single(_) => "block0",
                };
                for (s, v) in report.sigmas.iter().zip(&report.sharpness) {
                    sharpness_long.push_str(&format!(
                        "{method},{domain},{tag},{},{}\n",
                        fmt_f64(*s),
                        fmt_f64(*v)
                    ));
                }
                let path = dir.join(format!("sharpness_{domain}_{tag}.json"));
                write_file(
                    &path,
                    serde_json::to_string_pretty(&report)
                        .expect("report serializes")
                        .as_bytes(),
                )
                .map_err(io_err(&path))?;
                files.push(path);
                sharpness_reports.push(report);
            }
        }

        // CKA domain similarity against each target.
        let mut cka_values = Vec::new();
        let mut cka_long = String::from("method,domain,cka\n");
        for (name, ds) in &targets {
            let mut trng = RngStream::new(seed, &format!("analysis-target-batch-{name}"));
            let tpicks = trng
                .sample_without_replacement(ds.records.len(), an.cka_batch.min(ds.records.len()));
            let tgt_images: Vec<&[f64]> = tpicks
                .iter()
                .map(|&i| ds.records[i].pixels.as_slice())
                .collect();
            let n = src_images.len().min(tgt_images.len());
            let value = domain_similarity(&model, &src_images[..n], &tgt_images[..n])?;
            cka_long.push_str(&format!("{method},{name},{}\n", fmt_f64(value)));
            cka_values.push((name.clone(), value));
        }
        let cka_report = CkaReport {
            schema_version: 1,
            method: method.to_string(),
            seed,
            source_batch: format!("source[{}]", src_images.len()),
            feature_layer: "cls_final".into(),
            values: cka_values,
        };
        let path = dir.join("cka.json");
        write_file(
            &path,
            serde_json::to_string_pretty(&cka_report)
                .expect("report serializes")
                .as_bytes(),
        )
        .map_err(io_err(&path))?;
        files.push(path);

        // Heatmaps: first image of the source and of each target.
        let grid = config.vit_config().grid();
        let mut heat_jobs: Vec<(String, &Dataset)> = vec![("source".into(), &source)];
        for (name, ds) in &targets {
            heat_jobs.push((name.clone(), ds));
        }
        for (name, ds) in heat_jobs {
            let heat = export_attention_heatmap(&model, &ds.records[0].pixels)?;
            let path = dir.join(format!("heatmap_{name}.csv"));
            write_file(&path, heatmap_csv(&heat, grid).as_bytes()).map_err(io_err(&path))?;
            files.push(path);
        }

        let path = dir.join("sharpness_long.csv");
        write_file(&path, sharpness_long.as_bytes()).map_err(io_err(&path))?;
        files.push(path);
        let path = dir.join("cka_long.csv");
        write_file(&path, cka_long.as_bytes()).map_err(io_err(&path))?;
        files.push(path);

        // Manifest lists every emitted file (including itself last).
        let mut names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        names.push("manifest.json".into());
        names.sort();
        let manifest = serde_json::json!({ "schema_version": 1, "files": names });
        let path = dir.join("manifest.json");
        write_file(
            &path,
            serde_json::to_string_pretty(&manifest)
                .expect("manifest serializes")
                .as_bytes(),
        )
        .map_err(io_err(&path))?;
        files.push(path);

        outputs.push(AnalyzeOutput {
            seed,
            dir,
            files,
            sharpness: sharpness_reports,
            cka: cka_report,
        });
    }
    append_run_log(
        out,
        &format!("analyze method={} seeds={seeds:?}", config.method.name()),
    );
    Ok(outputs)
}
