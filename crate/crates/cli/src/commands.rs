use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use gaitlab::config::{Disentangle, IdLoss, RunConfig};
use gaitlab::data::{DatasetIndex, FrameBank};
use gaitlab::error::{Error, Result};
use gaitlab::eval::{ablation_csv, full_grid, run_ablation, run_protocol, Protocol};
use gaitlab::gradcheck::{run_all, GradcheckOptions};
use gaitlab::model::{mosaic, GaitNet, GaitStream};
use gaitlab::ppm;
use gaitlab::train::{self, load_model, CONFIG_FILE};
use gaitlab::walker::{generate_dataset, Condition, GenerateConfig};

use crate::{Ablate, Bench, Eval, GenData, Gradcheck, Global, RunOverrides, Train, Visualize};

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn gen_data(global: &Global, a: &GenData) -> Result<ExitCode> {
    let conditions = a
        .conditions
        .split(',')
        .map(str::parse)
        .collect::<Result<Vec<Condition>>>()?;
    let cfg = GenerateConfig {
        n_subjects: a.subjects,
        conditions,
        clips_per_condition: a.clips,
        clip_len: a.frames,
        seed: global.seed.unwrap_or(0),
        fps: a.fps,
        ..GenerateConfig::default()
    };
    let root = global.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let n = generate_dataset(&cfg, &root, a.force)?;
    println!("wrote {n} clips to {}", root.display());
    Ok(ExitCode::SUCCESS)
}

/// Defaults, then the config file, then command-line overrides.
fn resolve_config(global: &Global, run: &RunOverrides) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(o) = &global.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &run.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    for kv in &run.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(global: &Global, a: &Train) -> Result<ExitCode> {
    let cfg = resolve_config(global, &a.run)?;
    let index = DatasetIndex::load(&cfg.dataset)?;
    let (train_index, _) = cfg.split(&index)?;
    let bank = FrameBank::load(&train_index)?;
    let outcome = train::train(&cfg, &train_index, &bank, Some(&cfg.out))?;
    if let Some(r) = outcome.log.last() {
        println!("final step {}: total {} id {}", r.step, r.total, r.id);
    }
    if let Some(p) = outcome.checkpoints.last() {
        println!("checkpoint {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// The run configuration that belongs to a checkpoint: `--config` if given,
/// else `config.txt` in the run directory.
fn run_config_for(global: &Global, checkpoint: &Path) -> Result<Option<RunConfig>> {
    if let Some(p) = &global.config {
        return RunConfig::from_file(p).map(Some);
    }
    let dir = if checkpoint.is_dir() { Some(checkpoint) } else { checkpoint.parent() };
    match dir.map(|d| d.join(CONFIG_FILE)) {
        Some(p) if p.is_file() => RunConfig::from_file(&p).map(Some),
        _ => Ok(None),
    }
}

fn check_dims(cfg: &RunConfig, net: &GaitNet) -> Result<()> {
    let m = &net.config;
    let expect = cfg.model(m.n_classes);
    if expect != *m {
        return Err(Error::invalid(format!(
            "checkpoint dimensions {m:?} do not match the run configuration {expect:?}"
        )));
    }
    Ok(())
}

/// Model, dataset index and run configuration for eval-style commands.
fn load_for_eval(global: &Global, checkpoint: &Path, dataset: Option<&Path>) -> Result<(GaitNet, DatasetIndex, Option<RunConfig>)> {
    let net = load_model(checkpoint)?;
    let cfg = run_config_for(global, checkpoint)?;
    if let Some(c) = &cfg {
        check_dims(c, &net)?;
    }
    let root = match (dataset, &cfg) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(c)) => c.dataset.clone(),
        (None, None) => return Err(Error::invalid("no dataset given and no run configuration to take it from")),
    };
    Ok((net, DatasetIndex::load(&root)?, cfg))
}

pub fn eval(global: &Global, a: &Eval) -> Result<ExitCode> {
    let (net, index, cfg) = load_for_eval(global, &a.checkpoint, a.dataset.as_deref())?;
    let subset = a
        .subset
        .clone()
        .unwrap_or_else(|| if cfg.is_some() { "held-out".into() } else { "all".into() });
    let index = match (subset.as_str(), &cfg) {
        ("all", _) => index,
        ("held-out", Some(c)) => c.split(&index)?.1,
        ("train", Some(c)) => c.split(&index)?.0,
        ("held-out" | "train", None) => {
            return Err(Error::invalid(format!("--subset {subset} needs a run configuration")))
        }
        (other, _) => return Err(Error::invalid(format!("unknown subset {other:?} (held-out, train, all)"))),
    };
    let protocol = Protocol {
        ranks: a.ranks.clone(),
        fars: a.fars.clone(),
        ..Protocol::condition_change(&a.gallery, &a.probe)
    };
    let (report, scores) = run_protocol(&protocol, &index, &net)?;
    print!("{}", report.to_csv());
    let out = global.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
    write(&out.join("metrics.csv"), &report.to_csv())?;
    write(&out.join("scores.csv"), &scores.to_csv())?;
    Ok(ExitCode::SUCCESS)
}

/// Cells needed for both orderings: disentanglement terms under the
/// incremental identity loss, and the three identity losses under the full
/// disentanglement.
pub fn ordering_cells() -> Vec<(Disentangle, IdLoss)> {
    vec![
        (Disentangle::XReconGaitSim, IdLoss::IncAvg),
        (Disentangle::XRecon, IdLoss::IncAvg),
        (Disentangle::None, IdLoss::IncAvg),
        (Disentangle::XReconGaitSim, IdLoss::Avg),
        (Disentangle::XReconGaitSim, IdLoss::Single),
    ]
}

pub fn ablate(global: &Global, a: &Ablate) -> Result<ExitCode> {
    let cfg = resolve_config(global, &a.run)?;
    let cells = match a.cells.as_str() {
        "orderings" => ordering_cells(),
        "all" => full_grid(),
        other => return Err(Error::invalid(format!("unknown cell set {other:?} (orderings, all)"))),
    };
    let index = DatasetIndex::load(&cfg.dataset)?;
    let (train_index, eval_index) = cfg.split(&index)?;
    let bank = FrameBank::load(&train_index)?;
    let protocol = Protocol::condition_change(&a.gallery, &a.probe);
    let rows = run_ablation(&cfg, &train_index, &bank, &eval_index, &protocol, &cells)?;
    let csv = ablation_csv(&rows);
    print!("{csv}");
    write(&cfg.out.join(CONFIG_FILE), &cfg.to_text())?;
    write(&cfg.out.join("ablation.csv"), &csv)?;
    Ok(ExitCode::SUCCESS)
}

pub fn visualize(global: &Global, a: &Visualize) -> Result<ExitCode> {
    let (net, index, _) = load_for_eval(global, &a.checkpoint, a.dataset.as_deref())?;
    let frames = |ids: &[String]| -> Result<Vec<_>> {
        ids.iter()
            .map(|id| {
                let i = index
                    .find(id)
                    .ok_or_else(|| Error::invalid(format!("unknown clip id {id:?}")))?;
                if a.frame >= index.clip(i).n_frames {
                    return Err(Error::invalid(format!("clip {id} has no frame {}", a.frame)));
                }
                index.load_frame(i, a.frame)
            })
            .collect()
    };
    let grid = net.cross_decode_grid(&frames(&a.appearance)?, &frames(&a.pose)?)?;
    let out = global.out.clone().unwrap_or_else(|| PathBuf::from("visualize"));
    let path = out.join("mosaic.ppm");
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    ppm::write(&path, &mosaic(&grid))?;
    println!("{} x {} cells in {}", grid.len(), grid[0].len(), path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(global: &Global, a: &Gradcheck) -> Result<ExitCode> {
    let mut opts = GradcheckOptions {
        instances: a.instances,
        corrupt: a.corrupt.clone(),
        ..GradcheckOptions::default()
    };
    if let Some(s) = global.seed {
        opts.seed = s;
    }
    let start = Instant::now();
    let results = run_all(&opts)?;
    println!("{:<32} {:>9} {:>9} {:>12}  status", "check", "instances", "elements", "max_rel_err");
    for r in &results {
        println!(
            "{:<32} {:>9} {:>9} {:>12.3e}  {}",
            r.name,
            r.instances,
            r.elements,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {failed} failed, tolerance {:e}, {:.1} s",
        results.len(),
        opts.tolerance,
        start.elapsed().as_secs_f64()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

pub fn bench(global: &Global, a: &Bench) -> Result<ExitCode> {
    if a.frames == 0 {
        return Err(Error::invalid("--frames must be positive"));
    }
    let (net, index, _) = load_for_eval(global, &a.checkpoint, a.dataset.as_deref())?;
    let clips = index.eligible();
    if clips.is_empty() {
        return Err(Error::invalid("dataset has no clips to time"));
    }
    let (mut load_ms, mut infer_ms) = (Vec::with_capacity(a.frames), Vec::with_capacity(a.frames));
    'outer: for &i in clips.iter().cycle() {
        let mut stream = GaitStream::new(&net);
        for t in 0..index.clip(i).n_frames {
            if load_ms.len() == a.frames {
                break 'outer;
            }
            let start = Instant::now();
            let frame = index.load_frame(i, t)?;
            let loaded = Instant::now();
            stream.push(&frame)?;
            load_ms.push((loaded - start).as_secs_f64() * 1e3);
            infer_ms.push(loaded.elapsed().as_secs_f64() * 1e3);
        }
    }
    let total: Vec<f64> = load_ms.iter().zip(&infer_ms).map(|(a, b)| a + b).collect();
    let (lm, ls) = mean_std(&load_ms);
    let (im, is) = mean_std(&infer_ms);
    let (tm, ts) = mean_std(&total);
    let csv = format!(
        "statistic,preprocessing_ms,inference_ms,total_ms\nmean,{lm:.4},{im:.4},{tm:.4}\nstd,{ls:.4},{is:.4},{ts:.4}\n"
    );
    println!("{} frames", load_ms.len());
    print!("{csv}");
    if let Some(out) = &global.out {
        write(&out.join("bench.csv"), &csv)?;
    }
    Ok(ExitCode::SUCCESS)
}
