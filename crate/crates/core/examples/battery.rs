// Trend-battery driver: trains the method grid over several seeds and
// prints the aggregate comparisons the acceptance suite checks, plus
// timings. Knobs come from env vars so sweeps don't need recompiles:
//   EPOCHS, SEEDS, METHODS (csv), EPISODES, ABL_ANCHOR, ABL_DROP, TAU
use std::time::Instant;

use reglab::analysis::{attention_sharpness, domain_similarity, SharpnessProbe};
use reglab::config::ExperimentConfig;
use reglab::data::generate_domain;
use reglab::fewshot::{
    evaluate, sample_episode, EvalMode, EvalSettings, FinetuneOptions, FinetuneRegisters,
};
use reglab::rng::RngStream;
use reglab::train::{train_source, Method, TrainSettings};
use reglab::util::run_parallel;
use reglab::vit::BlockSelect;

fn envf(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn envu(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let epochs = envu("EPOCHS", 30);
    let n_seeds = envu("SEEDS", 5);
    let episodes = envu("EPISODES", 200);
    let ft_episodes = envu("FT_EPISODES", 15);
    let ft_steps = envu("FT_STEPS", 30);
    let abl_anchor = envf("ABL_ANCHOR", 0.4);
    let abl_drop = envf("ABL_DROP", 0.7);
    let tau = envf("TAU", 0.1);
    let methods: Vec<Method> = std::env::var("METHODS")
        .map(|s| {
            s.split(',')
                .map(|m| match m {
                    "baseline" => Method::Baseline,
                    "learnable" => Method::LearnableRegisters,
                    "random" => Method::RandomRegisters,
                    "reap" => Method::Reap,
                    "random_mask" => Method::RandomMask,
                    "cluster_mask" => Method::ClusterMask,
                    other => panic!("unknown method {other}"),
                })
                .collect()
        })
        .unwrap_or_else(|_| {
            vec![
                Method::Baseline,
                Method::LearnableRegisters,
                Method::RandomRegisters,
                Method::Reap,
                Method::RandomMask,
                Method::ClusterMask,
            ]
        });

    let base = ExperimentConfig::new(Method::Baseline);
    let (source_spec, target_specs) = base.suite();
    let t0 = Instant::now();
    let source = generate_domain(&source_spec);
    let targets: Vec<_> = target_specs
        .iter()
        .map(|s| (s.name.clone(), generate_domain(s)))
        .collect();
    println!("data generated in {:.1}s", t0.elapsed().as_secs_f64());

    // (method, seed) training grid, parallel
    let mut jobs: Vec<Box<dyn FnOnce() -> (Method, u64, reglab::checkpoint::TensorFile, f64, f64) + Send>> =
        Vec::new();
    for &method in &methods {
        for seed in 0..n_seeds as u64 {
            let source = source.clone();
            jobs.push(Box::new(move || {
                let mut cfg = ExperimentConfig::new(method).vit_config();
                cfg.tau_init = tau;
                let mut settings = TrainSettings {
                    epochs,
                    ..Default::default()
                };
                settings.reap.anchor_ratio = abl_anchor;
                settings.reap.drop_ratio = abl_drop;
                let t = Instant::now();
                let (model, stats) = train_source(cfg, method, &source, &settings, seed).unwrap();
                let last = stats.last().unwrap();
                eprintln!(
                    "[{} s{}] final tau {:.4} loss {:.4}",
                    method.name(),
                    seed,
                    model.registers.tau_value(),
                    last.mean_loss
                );
                (
                    method,
                    seed,
                    model.snapshot(),
                    t.elapsed().as_secs_f64(),
                    last.accuracy,
                )
            }));
        }
    }
    let t0 = Instant::now();
    let trained = run_parallel(jobs);
    println!("trained {} runs in {:.1}s", trained.len(), t0.elapsed().as_secs_f64());

    // Rebuild models (per method/seed) and evaluate
    let rebuild = |method: Method, snap: &reglab::checkpoint::TensorFile| {
        let mut cfg = ExperimentConfig::new(method).vit_config();
        cfg.tau_init = tau;
        reglab::vit::VitModel::from_snapshot(cfg, snap).unwrap()
    };

    println!("\n== plain accuracy (mean over {} episodes x 3 domains) ==", episodes);
    let mut plain: std::collections::BTreeMap<(String, u64), f64> = Default::default();
    let t0 = Instant::now();
    for (method, seed, snap, ttrain, tacc) in &trained {
        let model = rebuild(*method, snap);
        let mut accs = Vec::new();
        for (name, ds) in &targets {
            let settings = EvalSettings {
                episodes,
                ..Default::default()
            };
            let rng = RngStream::new(*seed, &format!("eval-{name}"));
            let res = evaluate(&model, ds, &settings, &rng).unwrap();
            accs.push(res.mean);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!(
            "  {:20} seed {} train_acc {:.3} ({:5.1}s) -> targets {:.4} {:?}",
            method.name(),
            seed,
            tacc,
            ttrain,
            mean,
            accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        );
        plain.insert((method.name().to_string(), *seed), mean);
    }
    println!("eval took {:.1}s", t0.elapsed().as_secs_f64());

    for m in &methods {
        let vals: Vec<f64> = (0..n_seeds as u64)
            .filter_map(|s| plain.get(&(m.name().to_string(), s)).copied())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (vals.len().max(2) - 1) as f64;
        println!(
            "  {:20} mean {:.4} se {:.4}",
            m.name(),
            mean,
            (var / vals.len() as f64).sqrt()
        );
    }

    // CKA trends
    println!("\n== CKA (mean over domains, per seed) ==");
    let mut cka_batchs: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for (method, seed, snap, _, _) in &trained {
        let model = rebuild(*method, snap);
        let mut srng = RngStream::new(*seed, "analysis-source-batch");
        let picks = srng.sample_without_replacement(source.records.len(), 64);
        let src: Vec<&[f64]> = picks.iter().map(|&i| source.records[i].pixels.as_slice()).collect();
        let mut vals = Vec::new();
        for (name, ds) in &targets {
            let mut trng = RngStream::new(*seed, &format!("analysis-target-batch-{name}"));
            let tp = trng.sample_without_replacement(ds.records.len(), 64);
            let tgt: Vec<&[f64]> = tp.iter().map(|&i| ds.records[i].pixels.as_slice()).collect();
            vals.push(domain_similarity(&model, &src, &tgt).unwrap());
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        cka_batchs.entry(method.name().to_string()).or_default().push(mean);
    }
    for (m, vals) in &cka_batchs {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        println!("  {:20} cka mean {:.4} {:?}", m, mean, vals.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
    }

    // Sharpness at top sigma: learnable vs random per (seed, domain)
    if methods.contains(&Method::LearnableRegisters) && methods.contains(&Method::RandomRegisters) {
        println!("\n== sharpness at sigma=1.0 (learnable vs random) ==");
        let t0 = Instant::now();
        let sigmas = [0.0, 0.001, 0.01, 0.1, 1.0];
        for (name, ds) in &targets {
            let mut wins = 0;
            for seed in 0..n_seeds as u64 {
                let grab = |m: Method| {
                    trained
                        .iter()
                        .find(|(mm, ss, _, _, _)| *mm == m && *ss == seed)
                        .map(|(_, _, snap, _, _)| rebuild(m, snap))
                        .unwrap()
                };
                let ml = grab(Method::LearnableRegisters);
                let mr = grab(Method::RandomRegisters);
                let mut erng = RngStream::new(seed, &format!("sharp-episode-{name}"));
                let ep = sample_episode(ds, 5, 5, 15, &mut erng).unwrap();
                let probe = SharpnessProbe::Episode { dataset: ds, episode: &ep };
                let rng = RngStream::new(seed, &format!("sharpness-{name}"));
                let sl = attention_sharpness(&ml, &probe, name, &sigmas, 32, BlockSelect::All, &rng)
                    .unwrap();
                let sr = attention_sharpness(&mr, &probe, name, &sigmas, 32, BlockSelect::All, &rng)
                    .unwrap();
                let (l, r) = (*sl.sharpness.last().unwrap(), *sr.sharpness.last().unwrap());
                if l > r {
                    wins += 1;
                }
                print!("    seed {seed}: L {l:.3} R {r:.3} |");
            }
            println!("  {name}: learnable higher in {wins}/{n_seeds}");
        }
        println!("sharpness took {:.1}s", t0.elapsed().as_secs_f64());
    }

    // Finetune comparison on reap checkpoints (1-shot)
    if methods.contains(&Method::Reap) {
        println!("\n== finetune modes on reap checkpoints (5-way 1-shot, {ft_episodes} episodes x 3 domains) ==");
        let t0 = Instant::now();
        let mut jobs: Vec<Box<dyn FnOnce() -> (String, u64, f64) + Send>> = Vec::new();
        for (method, seed, snap, _, _) in &trained {
            if *method != Method::Reap {
                continue;
            }
            for (mode_name, mode) in [
                ("learnable", FinetuneRegisters::Learnable),
                ("regular", FinetuneRegisters::NoRegisters),
                ("random", FinetuneRegisters::Random),
            ] {
                let snap = snap.clone();
                let targets2: Vec<_> = targets.iter().map(|(n, d)| (n.clone(), d.clone())).collect();
                let seed = *seed;
                jobs.push(Box::new(move || {
                    let model = {
                        let mut cfg = ExperimentConfig::new(Method::Reap).vit_config();
                        cfg.tau_init = tau;
                        reglab::vit::VitModel::from_snapshot(cfg, &snap).unwrap()
                    };
                    let mut accs = Vec::new();
                    for (name, ds) in &targets2 {
                        let settings = EvalSettings {
                            n_way: 5,
                            k_shot: 1,
                            q_queries: 15,
                            episodes: ft_episodes,
                            mode: EvalMode::Finetune,
                            finetune: FinetuneOptions {
                                steps: ft_steps,
                                registers: mode,
                                ..Default::default()
                            },
                        };
                        let rng = RngStream::new(seed, &format!("eval-{name}"));
                        accs.push(evaluate(&model, ds, &settings, &rng).unwrap().mean);
                    }
                    (mode_name.to_string(), seed, accs.iter().sum::<f64>() / accs.len() as f64)
                }));
            }
        }
        let mut by_mode: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for (mode, seed, acc) in run_parallel(jobs) {
            println!("    {mode} seed {seed}: {acc:.4}");
            by_mode.entry(mode).or_default().push(acc);
        }
        for (mode, vals) in &by_mode {
            println!(
                "  finetune {:10} mean {:.4}",
                mode,
                vals.iter().sum::<f64>() / vals.len() as f64
            );
        }
        println!("finetune took {:.1}s", t0.elapsed().as_secs_f64());
    }
}
