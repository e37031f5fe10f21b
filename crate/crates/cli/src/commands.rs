use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;

use rp2pn::checkpoint::{version_tag, Checkpoint};
use rp2pn::config::RunConfig;
use rp2pn::data::{dataset_split, load_input, plane_path, write_png16, write_synthetic_split, SceneTriplet, Split};
use rp2pn::evalharness::{evaluate_dataset, run_ablation, GroundTruthOracle, ModelAdapter, SeparationAdapter};
use rp2pn::features::build_extractor;
use rp2pn::model::{rp2pn_forward, Prediction};
use rp2pn::polarimetry::{compute_stokes, intensity_average};
use rp2pn::train::{TrainOutputs, Trainer};
use rp2pn::Error;

use crate::Global;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const VERSION_FILE: &str = "VERSION";

/// Preset, config file and overrides, with relative paths made absolute.
/// Output paths resolve against the output root when one is given.
fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p, &g.overrides)?,
        None => RunConfig::from_layers(None, &g.overrides)?,
    };
    if let Some(root) = &g.output_root {
        if cfg.output_dir.is_relative() {
            cfg.output_dir = root.join(&cfg.output_dir);
        }
    }
    let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
    cfg.resolve_paths(&cwd);
    Ok(cfg)
}

fn write_provenance(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(VERSION_FILE);
    fs::write(&path, format!("{}\n", version_tag())).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn load_split(root: &Path, split: Split) -> Result<Vec<SceneTriplet>> {
    Ok(dataset_split(root, split)?.collect::<rp2pn::Result<Vec<_>>>()?)
}

pub fn synth(g: &Global) -> Result<()> {
    let cfg = load_config(g)?;
    let root = &cfg.data.root;
    for split in Split::ALL {
        let ids = write_synthetic_split(root, split, cfg.synth.count(split), &cfg.synth.scene)?;
        println!("{split}: {} scenes", ids.len());
    }
    write_provenance(root, &cfg)?;
    println!("wrote {}", root.display());
    Ok(())
}

pub fn train(g: &Global, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(g)?;
    let root = &cfg.data.root;
    let train = load_split(root, Split::Train)?;
    let val = if Split::Val.manifest_path(root).is_file() {
        load_split(root, Split::Val)?
    } else {
        Vec::new()
    };
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::<f32>::load(path)?;
            let mut t = Trainer::resume(&ckpt, train, val)?;
            // The checkpoint fixes model and inputs; the schedule and the
            // output location follow the current config.
            t.run.schedule = cfg.schedule.clone();
            t.run.output_dir = cfg.output_dir.clone();
            println!("resuming from step {}", t.step);
            t
        }
        None => Trainer::new(cfg.clone(), train, val)?,
    };
    let out = trainer.run.output_dir.clone();
    write_provenance(&out, &trainer.run)?;
    let summary = trainer.run(&TrainOutputs::in_dir(&out), None)?;
    if let Some(last) = summary.records.last() {
        println!(
            "step {} pixel {:.5} percep {:.5} pncc {:.5} total {:.5}",
            last.step, last.loss.pixel, last.loss.percep, last.loss.pncc, last.loss.total
        );
    }
    if let Some((step, score)) = summary.best {
        println!("best validation T-PSNR {score:.2} dB at step {step}");
    }
    if let Some(path) = summary.final_checkpoint {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn write_prediction(dir: &Path, role: char, pred: &Prediction<f32>) -> Result<usize> {
    let Some(q) = pred.quad() else {
        write_png16(&dir.join(format!("{role}_intensity.png")), &pred.intensity().cast())?;
        return Ok(1);
    };
    let q = q.cast::<f64>();
    for (k, plane) in q.planes().iter().enumerate() {
        write_png16(&plane_path(dir, role, k), plane)?;
    }
    let stokes = compute_stokes(&q);
    let derived = [
        ("intensity", intensity_average(&q)),
        ("dop", stokes.dop()),
        ("aop", stokes.aop().map(|a| a / PI + 0.5)),
    ];
    for (name, img) in &derived {
        write_png16(&dir.join(format!("{role}_{name}.png")), img)?;
    }
    Ok(4 + derived.len())
}

pub fn infer(g: &Global, checkpoint: &Path, scene: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(g)?;
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let extractor = build_extractor::<f32>(&ckpt.run.extractor)?;
    let options = ckpt.run.input_options();
    ckpt.check_layout(&options, extractor.as_ref())?;
    let model = ckpt.restore_model()?;
    let input = load_input(scene)?;
    let result = rp2pn_forward(&model, &input, extractor.as_ref(), &options, ckpt.run.effective_iters())?;
    let dir: PathBuf = match out {
        Some(d) => d.to_path_buf(),
        None => {
            let name = scene.file_name().map_or("scene".into(), |n| n.to_string_lossy().into_owned());
            cfg.output_dir.join("infer").join(name)
        }
    };
    write_provenance(&dir, &ckpt.run)?;
    let (r, t) = result.last();
    let n = write_prediction(&dir, 'R', r)? + write_prediction(&dir, 'T', t)?;
    println!("wrote {n} images to {}", dir.display());
    Ok(())
}

pub fn eval(g: &Global, checkpoint: Option<&Path>, oracle: bool, split: Split, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(g)?;
    let scenes = dataset_split(&cfg.data.root, split)?;
    let dir = out.map_or_else(|| cfg.output_dir.join(format!("eval_{split}")), Path::to_path_buf);
    let (report, run) = match checkpoint {
        Some(path) if !oracle => {
            let ckpt = Checkpoint::<f32>::load(path)?;
            let extractor = build_extractor::<f32>(&ckpt.run.extractor)?;
            let options = ckpt.run.input_options();
            ckpt.check_layout(&options, extractor.as_ref())?;
            let model = ckpt.restore_model()?;
            let adapter = ModelAdapter {
                model: &model,
                extractor: extractor.as_ref(),
                options,
                n_iters: ckpt.run.effective_iters(),
                label: format!("rp2pn@{}", ckpt.step),
            };
            (evaluate_dataset(&adapter, scenes)?, ckpt.run.clone())
        }
        _ => {
            let adapter: &dyn SeparationAdapter = &GroundTruthOracle;
            (evaluate_dataset(adapter, scenes)?, cfg.clone())
        }
    };
    write_provenance(&dir, &run)?;
    report.write(&dir)?;
    print!("{}", report.summary_table());
    for f in &report.failures {
        eprintln!("scene {} failed [{}]: {}", f.scene, f.category, f.message);
    }
    println!("wrote {}", dir.display());
    Ok(())
}

pub fn ablate(g: &Global, split: Option<Split>) -> Result<()> {
    let cfg = load_config(g)?;
    let split = split.unwrap_or(cfg.ablation.eval_split);
    let train = load_split(&cfg.data.root, Split::Train)?;
    let eval = if split == Split::Train {
        train.clone()
    } else {
        load_split(&cfg.data.root, split)?
    };
    let dir = cfg.output_dir.join("ablation");
    write_provenance(&dir, &cfg)?;
    let table = run_ablation::<f32>(&cfg.ablation.specs, &cfg, &train, &eval, Some(&dir))?;
    print!("{}", table.to_text());
    println!("wrote {}", dir.display());
    Ok(())
}
