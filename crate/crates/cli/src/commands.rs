use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use cskd::analyze::{
    ensemble_predict, export_dynamics, mean_attention_distance, patch_response_map, write_responses_csv,
    AttentionDump, EnsembleMode,
};
use cskd::config::{RunConfig, RunDir, METRICS_FILE};
use cskd::nets::student_infer;
use cskd::train::{
    distill_student, epochs_trained, load_dataset, train_teacher, write_synth_split, Dataset, RunMetrics,
    TrainOutcome,
};
use cskd::{Checkpoint, Error, Result, VitConfig};
use log::info;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";

pub fn dispatch(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("gen-data", m)) => gen_data(m),
        Some(("train-teacher", m)) => run_teacher(&run_config(m)?),
        Some(("distill", m)) => run_distill(&run_config(m)?),
        Some(("eval", m)) => eval(m),
        Some(("analyze", m)) => match m.subcommand() {
            Some(("attention", m)) => attention(m),
            Some(("responses", m)) => responses(m),
            Some(("dynamics", m)) => dynamics(m),
            _ => unreachable!("clap requires a subcommand"),
        },
        _ => unreachable!("clap requires a subcommand"),
    }
}

fn num(m: &ArgMatches, name: &str) -> usize {
    m.get_one::<u64>(name).copied().unwrap_or_default() as usize
}

/// Config file (if any) with every `--<key>` flag applied on top.
fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let overrides: Vec<(String, String)> = RunConfig::KEYS
        .iter()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(Path::new(path), &overrides),
        None => RunConfig::parse("", &overrides),
    }
}

fn gen_data(m: &ArgMatches) -> Result<()> {
    let root = PathBuf::from(m.get_one::<String>("out").expect("required"));
    let (classes, size, seed) = (num(m, "classes"), num(m, "size"), num(m, "seed") as u64);
    // Distinct generator streams so validation images are not copies of training images.
    write_synth_split(&root, "train", num(m, "train"), size, classes, seed.wrapping_mul(2))?;
    write_synth_split(&root, "val", num(m, "val"), size, classes, seed.wrapping_mul(2) + 1)?;
    println!("wrote {}", root.display());
    Ok(())
}

fn load_split(cfg: &RunConfig, split: &str, limit: usize) -> Result<Dataset> {
    load_dataset(&cfg.data_root, split, cfg.num_classes)?.truncated(limit)
}

/// Runs `body` inside a fresh run directory, leaving a failure marker if it errors.
fn in_run_dir(cfg: &RunConfig, body: impl FnOnce(&RunDir) -> Result<()>) -> Result<()> {
    let dir = RunDir::create(&cfg.out_dir, cfg)?;
    let result = body(&dir);
    if let Err(e) = &result {
        dir.mark_failed(e)?;
    }
    result
}

fn save_outcome(dir: &RunDir, out: &TrainOutcome, stem: &str) -> Result<()> {
    out.metrics.save(&dir.file(METRICS_FILE))?;
    out.best.save(&dir.file(&format!("{stem}_best.ckpt")))?;
    for (epochs, ckpt) in &out.snapshots {
        ckpt.save(&dir.file(&format!("{stem}_e{epochs:03}.ckpt")))?;
    }
    // Written last: its presence marks a completed run.
    out.last.save(&dir.file(&format!("{stem}.ckpt")))
}

fn run_teacher(cfg: &RunConfig) -> Result<()> {
    let model = cfg.teacher_config();
    let train = load_split(cfg, &cfg.train_split, cfg.train_limit)?;
    let val = load_split(cfg, &cfg.val_split, cfg.val_limit)?;
    in_run_dir(cfg, |dir| {
        let out = train_teacher(&model, &cfg.train_config(), &train, &val)?;
        save_outcome(dir, &out, "teacher")?;
        if let (Some(row), Some(acc)) = (out.metrics.last(), out.train_top1.last()) {
            println!("train_top1={acc:.2} val_top1={:.2}", row.val_top1);
        }
        println!("checkpoint {}", dir.file(TEACHER_CKPT).display());
        Ok(())
    })
}

fn run_distill(cfg: &RunConfig) -> Result<()> {
    let path = cfg
        .teacher_ckpt()
        .ok_or_else(|| Error::Config("distill needs `teacher_ckpt` (a checkpoint from train-teacher)".into()))?;
    let teacher = Checkpoint::<f32>::load(path)?;
    let run = cfg.distill_run();
    let train = load_split(cfg, &cfg.train_split, cfg.train_limit)?;
    let val = load_split(cfg, &cfg.val_split, cfg.val_limit)?;
    in_run_dir(cfg, |dir| {
        let out = distill_student(&run, &teacher, &train, &val)?;
        save_outcome(dir, &out, "student")?;
        if let Some(row) = out.metrics.last() {
            println!("val_top1={:.2}", row.val_top1);
        }
        println!("checkpoint {}", dir.file(STUDENT_CKPT).display());
        Ok(())
    })
}

fn load_student(path: &str) -> Result<(VitConfig, Checkpoint<f32>)> {
    let ckpt = Checkpoint::<f32>::load(Path::new(path))?;
    let cfg = VitConfig::from_kv(&ckpt.config)?;
    Ok((cfg, ckpt))
}

/// Validation data shaped for `model`, ignoring the run config's model keys.
fn val_for(cfg: &RunConfig, model: &VitConfig, limit: usize) -> Result<Dataset> {
    load_dataset(&cfg.data_root, &cfg.val_split, model.num_classes)?.truncated(limit)
}

fn eval(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let (model, ckpt) = load_student(m.get_one::<String>("checkpoint").expect("required"))?;
    let modes: Vec<EnsembleMode> = match m.get_many::<String>("mode") {
        Some(v) => v.map(|s| s.parse()).collect::<Result<_>>()?,
        None => vec![EnsembleMode::Deit, EnsembleMode::CskdEnsemble],
    };
    let val = val_for(&cfg, &model, cfg.val_limit)?;
    let mut hits = vec![0usize; modes.len()];
    for b in val.sequential_batches(cfg.batch_size) {
        let out = student_infer(&model, &ckpt.params, &b.images)?;
        for (h, &mode) in hits.iter_mut().zip(&modes) {
            let pred = ensemble_predict(&out, mode)?.argmax_last();
            *h += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
        }
    }
    for (h, mode) in hits.iter().zip(&modes) {
        println!("{mode} top1={:.2}", 100.0 * *h as f64 / val.len() as f64);
    }
    Ok(())
}

fn output(path: Option<&String>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn attention(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let images = m.get_one::<u64>("images").map_or(cfg.attention_images, |&n| n as usize);
    if images == 0 {
        return Err(Error::Config("--images must be positive".into()));
    }
    let (model, ckpt) = load_student(m.get_one::<String>("checkpoint").expect("required"))?;
    let val = val_for(&cfg, &model, images)?;
    if val.len() < images {
        log::warn!("only {} validation images available, asked for {images}", val.len());
    }
    let outputs = val
        .sequential_batches(cfg.batch_size)
        .iter()
        .map(|b| student_infer(&model, &ckpt.params, &b.images))
        .collect::<Result<Vec<_>>>()?;
    let dump = AttentionDump::from_outputs(model.grid(), 2, &outputs)?;
    if let Some(p) = m.get_one::<String>("dump") {
        dump.save(Path::new(p))?;
    }
    let dist = mean_attention_distance(&dump)?;
    let mut w = output(m.get_one::<String>("out"))?;
    let heads = dist.first().map_or(0, Vec::len);
    let cols: Vec<String> = (0..heads).map(|h| format!("head{h}")).collect();
    writeln!(w, "layer,{},mean", cols.join(","))?;
    for (l, row) in dist.iter().enumerate() {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let vals: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(w, "{l},{},{mean}", vals.join(","))?;
    }
    w.flush()?;
    info!("attention distance over {} images", val.len());
    Ok(())
}

fn responses(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let images = num(m, "images");
    let out_dir = PathBuf::from(m.get_one::<String>("out").expect("required"));
    let mut per_sample: Vec<Vec<_>> = Vec::new();
    for path in m.get_many::<String>("checkpoint").expect("required") {
        let (model, ckpt) = load_student(path)?;
        let val = val_for(&cfg, &model, images)?;
        let batch = val.gather(&(0..val.len()).collect::<Vec<_>>());
        let out = student_infer(&model, &ckpt.params, &batch.images)?;
        let maps = patch_response_map(&out.patch_logits, epochs_trained(&ckpt)?)?;
        per_sample.resize_with(maps.len(), Vec::new);
        for (dst, map) in per_sample.iter_mut().zip(maps) {
            dst.push(map);
        }
    }
    fs::create_dir_all(&out_dir)?;
    for (i, maps) in per_sample.iter().enumerate() {
        let path = out_dir.join(format!("responses_s{i:03}.csv"));
        let mut w = BufWriter::new(File::create(&path)?);
        write_responses_csv(&mut w, maps)?;
        w.flush()?;
    }
    println!("wrote {} response files to {}", per_sample.len(), out_dir.display());
    Ok(())
}

fn dynamics(m: &ArgMatches) -> Result<()> {
    let run = RunMetrics::load(Path::new(m.get_one::<String>("metrics").expect("required")))?;
    let baseline = m
        .get_one::<String>("baseline")
        .map(|p| RunMetrics::load(Path::new(p)))
        .transpose()?;
    let text = export_dynamics(&run, baseline.as_ref())?;
    let mut w = output(m.get_one::<String>("out"))?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}
