use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use iced_core::agent::{evaluate as eval_levels, AgentModel};
use iced_core::driver::{self, EvalSetResult, RunReport, TrainConfig, TrainInputs};
use iced_core::env::LevelParams;
use iced_core::levelgen::{generate_dataset, scale_area, DatasetPreset, GenConfig};
use iced_core::nn::checkpoint;
use iced_core::rng::derive_seed;
use iced_core::vae::{pretrain, Vae};
use serde::Serialize;

use crate::config::{parse_named_path, FileConfig};
use crate::{Common, TrainArgs};

pub fn read_levels(path: &Path) -> Result<Vec<LevelParams>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading levels {}", path.display()))?;
    let levels: Vec<LevelParams> =
        serde_json::from_str(&text).with_context(|| format!("parsing levels {}", path.display()))?;
    if levels.is_empty() {
        bail!("level file {} is empty", path.display());
    }
    Ok(levels)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// `n` levels from `cfg` that do not occur in `exclude`.
fn fresh_levels(cfg: &GenConfig, n: usize, exclude: &HashSet<LevelParams>) -> Result<Vec<LevelParams>> {
    let mut draw = n;
    loop {
        let out: Vec<LevelParams> = generate_dataset(cfg, draw)?
            .into_iter()
            .filter(|l| !exclude.contains(l))
            .take(n)
            .collect();
        if out.len() == n {
            return Ok(out);
        }
        if draw >= 4 * n + 64 {
            bail!("could not draw {n} levels disjoint from the training set");
        }
        draw += n.max(16);
    }
}

pub fn gen_dataset(common: &Common, levels: Option<usize>) -> Result<()> {
    let mut cfg = FileConfig::load(common.preset, common.config.as_deref())?.dataset;
    if let Some(n) = levels {
        cfg.train_levels = n;
    }
    if let Some(seed) = common.seed {
        cfg.generator.seed = seed;
    }
    let out = common.out_dir.clone().unwrap_or_else(|| PathBuf::from("data"));
    fs::create_dir_all(&out)?;
    let base = &cfg.generator;
    let seed = base.seed;

    let train = generate_dataset(base, cfg.train_levels)?;
    let exclude: HashSet<LevelParams> = train.iter().cloned().collect();
    let with_seed = |c: GenConfig, tag: u64| GenConfig {
        seed: derive_seed(seed, &[tag]),
        ..c
    };
    let sets = [
        ("test", with_seed(base.clone(), 1), cfg.test_levels),
        ("edge_low_moss", with_seed(DatasetPreset::EdgeLowMoss.config(base), 2), cfg.edge_levels),
        (
            "edge_low_moss_high_lava",
            with_seed(DatasetPreset::EdgeLowMossHighLava.config(base), 3),
            cfg.edge_levels,
        ),
        ("large", with_seed(scale_area(base, cfg.large_scale), 4), cfg.large_levels),
    ];
    write_json(&out.join("train.json"), &train)?;
    log::info!("train: {} levels", train.len());
    for (name, gen, n) in sets {
        if n == 0 {
            continue;
        }
        let levels = fresh_levels(&gen, n, &exclude)?;
        write_json(&out.join(format!("{name}.json")), &levels)?;
        log::info!("{name}: {} levels, {}x{}", levels.len(), gen.height, gen.width);
    }
    write_json(&out.join("dataset.json"), &cfg)?;
    Ok(())
}

pub fn pretrain_vae(common: &Common, levels: &Path, epochs: Option<usize>) -> Result<()> {
    let mut cfg = FileConfig::load(common.preset, common.config.as_deref())?.vae;
    let data = read_levels(levels)?;
    // Grid size follows the dataset.
    cfg.height = data[0].height;
    cfg.width = data[0].width;
    if data.iter().any(|l| (l.height, l.width) != (cfg.height, cfg.width)) {
        bail!("{} mixes grid sizes", levels.display());
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let seed = common.seed.unwrap_or(0);
    let out = common.out_dir.clone().unwrap_or_else(|| PathBuf::from("vae"));
    fs::create_dir_all(&out)?;
    let (vae, report) = pretrain(&data, cfg, seed)?;
    vae.save(&out.join("vae.bin"))?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    log::info!(
        "reconstruction solvability {:.3}, interpolation solvability {:.3}, accuracy {:.3}",
        report.reconstruction_solvability,
        report.interpolation_solvability,
        report.reconstruction_accuracy
    );
    Ok(())
}

fn load_eval_sets(specs: &[String]) -> Result<Vec<(String, Vec<LevelParams>)>> {
    let mut sets = Vec::new();
    for spec in specs {
        let (name, path) = parse_named_path(spec)?;
        if sets.iter().any(|(n, _): &(String, _)| *n == name) {
            bail!("eval set name {name:?} given twice");
        }
        sets.push((name, read_levels(&path)?));
    }
    Ok(sets)
}

pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = FileConfig::load(args.common.preset, args.common.config.as_deref())?.train;
    if let Some(m) = args.method {
        cfg.method = m;
    }
    if let Some(u) = args.updates {
        cfg.updates = u;
    }
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    if let Some(w) = args.workers {
        cfg.ppo.workers = w;
    }
    if let Some(d) = args.dump_buffer_every {
        cfg.dump_buffer_every = d;
    }
    if let Some(s) = args.smi_sign {
        cfg.smi_sign = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = train_config(args)?;
    let vae = match &args.vae {
        Some(p) => Some(Vae::load(p).with_context(|| format!("loading vae {}", p.display()))?),
        None => None,
    };
    let inputs = TrainInputs {
        train: read_levels(&args.levels)?,
        eval_sets: load_eval_sets(&args.eval_sets)?,
        vae,
    };
    let out = args
        .common
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{}", cfg.method, cfg.seed)));
    let res = driver::train(&cfg, &inputs, Some(&out))?;
    for set in &res.report.eval_sets {
        log::info!("{}: return {:.3}, solved {:.3}", set.name, set.mean_return, set.solved_rate);
    }
    log::info!("run written to {}", out.display());
    Ok(())
}

pub fn evaluate(run_dir: &Path, specs: &[String], episodes: Option<usize>, seed: u64, greedy: bool) -> Result<()> {
    let cfg = FileConfig::train_from_json(&run_dir.join("config.json"))?;
    let mut model = AgentModel::<f32>::new(cfg.agent, 0);
    let ckpt = run_dir.join("agent.ckpt");
    checkpoint::load_into(&ckpt, &mut model.params).with_context(|| format!("loading {}", ckpt.display()))?;
    let episodes = episodes.unwrap_or(cfg.final_eval_episodes);
    let mut results = Vec::new();
    for (k, (name, levels)) in load_eval_sets(specs)?.into_iter().enumerate() {
        let refs: Vec<&LevelParams> = levels.iter().collect();
        let per_level = eval_levels(&model, &refs, episodes, cfg.ppo.max_steps, derive_seed(seed, &[k as u64]), greedy)?;
        let n = per_level.len() as f64;
        let res = EvalSetResult {
            name,
            levels: levels.len(),
            mean_return: per_level.iter().map(|e| e.mean_return).sum::<f64>() / n,
            solved_rate: per_level.iter().map(|e| e.solved_rate).sum::<f64>() / n,
            per_level,
        };
        println!("{}\treturn {:.4}\tsolved {:.4}", res.name, res.mean_return, res.solved_rate);
        results.push(res);
    }
    write_json(&run_dir.join("evaluation.json"), &results)
}

#[derive(Debug, Serialize)]
struct ReportRow {
    method: String,
    seed: u64,
    eval_set: String,
    levels: usize,
    mean_return: f64,
    solved_rate: f64,
    updates: usize,
    train_return: f64,
    test_return: f64,
    gen_gap: f64,
    mi_estimate: f64,
    probe_acc: f64,
    admitted: usize,
}

pub fn report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for dir in runs {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let rep: RunReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut sets = rep.eval_sets.clone();
        let extra = dir.join("evaluation.json");
        if extra.exists() {
            let text = fs::read_to_string(&extra)?;
            let later: Vec<EvalSetResult> =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", extra.display()))?;
            for s in later {
                sets.retain(|x| x.name != s.name);
                sets.push(s);
            }
        }
        let m = rep.final_metrics;
        for s in sets {
            rows.push(ReportRow {
                method: rep.method.to_string(),
                seed: rep.seed,
                eval_set: s.name,
                levels: s.levels,
                mean_return: s.mean_return,
                solved_rate: s.solved_rate,
                updates: rep.updates,
                train_return: m.map_or(f64::NAN, |m| m.train_return),
                test_return: m.map_or(f64::NAN, |m| m.test_return),
                gen_gap: m.map_or(f64::NAN, |m| m.gen_gap),
                mi_estimate: m.map_or(f64::NAN, |m| m.mi_estimate),
                probe_acc: m.map_or(f64::NAN, |m| m.probe_acc),
                admitted: rep.admitted_total,
            });
        }
    }
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
