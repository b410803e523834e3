use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::info;

use super::data::{Batch, Dataset};
use super::metrics::{EpochRow, RunMetrics};
use super::optim::{cosine_lr, named_grads, AdamWConfig, OptimState};
use crate::analyze::{ensemble_predict, EnsembleMode};
use crate::cskd::{
    align_student_dense, ckf_targets, cskd_loss, decay_alpha, deit_losses, total_loss, CkfSchedule, DecayStrategy,
    DistillConfig,
};
use crate::error::{Error, Result};
use crate::nets::{
    check_grid_ratio, student_forward, student_infer, teacher_forward, teacher_infer, update_running_stats,
    Checkpoint, NormMode, Params, TeacherConfig, VitConfig,
};
use crate::tensor::{Graph, Tensor};

/// Optimizer, schedule and loop settings shared by both drivers.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Fill the `seconds` metrics column with wall time; off keeps metrics
    /// files byte-identical across runs.
    pub record_time: bool,
    /// Keep a copy of the parameters every N epochs (0 = never).
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.05,
            warmup_epochs: 2,
            seed: 0,
            record_time: false,
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr, got lr={} lr_min={}",
                self.lr, self.lr_min
            )));
        }
        if !(self.weight_decay >= 0.0) || self.lr * self.weight_decay >= 1.0 {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative with lr * weight_decay < 1, got {}",
                self.weight_decay
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Which student objective to optimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    /// Token losses plus the dense patch-token term.
    #[default]
    Cskd,
    /// Token losses only; the dense branch is never built.
    Deit,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cskd" => Ok(Self::Cskd),
            "deit" => Ok(Self::Deit),
            _ => Err(Error::Config(format!("unknown method `{s}` (expected cskd or deit)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cskd => "cskd",
            Self::Deit => "deit",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillRun {
    pub student: VitConfig,
    pub distill: DistillConfig,
    pub decay: DecayStrategy,
    pub method: Method,
    pub train: TrainConfig,
}

/// Loss values of one optimizer step, as computed in the graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_ce: f32,
    pub loss_distill: f32,
    pub loss_cskd: f32,
    pub loss_total: f32,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint<f32>,
    /// Highest validation top-1 (earliest epoch on ties); the initialization
    /// when no epoch ran.
    pub best: Checkpoint<f32>,
    pub metrics: RunMetrics,
    pub steps: Vec<StepRecord>,
    /// Running training accuracy (percent) per epoch.
    pub train_top1: Vec<f64>,
    /// Wall time per epoch, always measured.
    pub epoch_seconds: Vec<f64>,
    /// `(epochs trained, checkpoint)` every `snapshot_every` epochs.
    pub snapshots: Vec<(usize, Checkpoint<f32>)>,
}

impl TrainOutcome {
    fn new(init: Checkpoint<f32>) -> Self {
        Self {
            last: init.clone(),
            best: init,
            metrics: RunMetrics::default(),
            steps: Vec::new(),
            train_top1: Vec::new(),
            epoch_seconds: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    fn end_epoch(&mut self, cfg: &TrainConfig, row: EpochRow, train_top1: f64, secs: f64, params: Checkpoint<f32>) {
        let epochs = row.epoch + 1;
        self.metrics.rows.push(row);
        self.train_top1.push(train_top1);
        self.epoch_seconds.push(secs);
        if cfg.snapshot_every > 0 && epochs % cfg.snapshot_every == 0 {
            self.snapshots.push((epochs, params));
        }
    }
}

/// Config header of a checkpoint taken after `epochs` epochs.
fn ckpt_header(model_kv: String, epochs: usize) -> String {
    format!("{model_kv}epochs_trained={epochs}\n")
}

/// Number of epochs recorded in a checkpoint header (0 when absent).
pub fn epochs_trained(ckpt: &Checkpoint<f32>) -> Result<usize> {
    let entries = crate::kv::parse(&ckpt.config)?;
    match entries.iter().rev().find(|e| e.key == "epochs_trained") {
        Some(e) => crate::kv::value(e),
        None => Ok(0),
    }
}

fn argmax_hits(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    logits.argmax_last().iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn check_finite(v: f32, what: &str, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} is {v} at epoch {epoch}, step {step}")))
    }
}

/// Sums a run's per-epoch quantities in `f64`.
#[derive(Default)]
struct EpochAccum {
    ce: f64,
    distill: f64,
    cskd: f64,
    total: f64,
    batches: usize,
    hits: usize,
    seen: usize,
}

impl EpochAccum {
    fn push(&mut self, r: &StepRecord, hits: usize, seen: usize) {
        self.ce += f64::from(r.loss_ce);
        self.distill += f64::from(r.loss_distill);
        self.cskd += f64::from(r.loss_cskd);
        self.total += f64::from(r.loss_total);
        self.batches += 1;
        self.hits += hits;
        self.seen += seen;
    }

    fn row(&self, epoch: usize, alpha: f64, lr: f64, val_top1: f64, seconds: f64) -> EpochRow {
        let n = self.batches.max(1) as f64;
        EpochRow {
            epoch,
            alpha,
            lr,
            loss_ce: self.ce / n,
            loss_distill: self.distill / n,
            loss_cskd: self.cskd / n,
            loss_total: self.total / n,
            val_top1,
            seconds,
        }
    }

    fn train_top1(&self) -> f64 {
        100.0 * self.hits as f64 / self.seen.max(1) as f64
    }
}

struct Schedule {
    total: usize,
    warmup: usize,
}

impl Schedule {
    fn new(cfg: &TrainConfig, n: usize) -> Self {
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        Self {
            total: cfg.epochs * steps_per_epoch,
            warmup: cfg.warmup_epochs * steps_per_epoch,
        }
    }

    fn lr(&self, cfg: &TrainConfig, step: usize) -> f64 {
        cosine_lr(step + 1, self.warmup, self.total, cfg.lr, cfg.lr_min)
    }
}

/// Top-1 accuracy (percent) of the teacher's pooled prediction, frozen statistics.
pub fn evaluate_teacher(cfg: &TeacherConfig, params: &Params<f32>, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut hits = 0;
    for b in data.sequential_batches(batch_size) {
        let out = teacher_infer(cfg, params, &b.images)?;
        hits += argmax_hits(&out.global_logits, &b.labels);
    }
    Ok(100.0 * hits as f64 / data.len() as f64)
}

/// Top-1 accuracy (percent) of the student under `mode`.
pub fn evaluate_student(
    cfg: &VitConfig,
    params: &Params<f32>,
    data: &Dataset,
    mode: EnsembleMode,
    batch_size: usize,
) -> Result<f64> {
    let mut hits = 0;
    for b in data.sequential_batches(batch_size) {
        let out = student_infer(cfg, params, &b.images)?;
        hits += argmax_hits(&ensemble_predict(&out, mode)?, &b.labels);
    }
    Ok(100.0 * hits as f64 / data.len() as f64)
}

fn check_dataset(data: &Dataset, channels: usize, size: usize, classes: usize) -> Result<()> {
    let (k, h, w) = data.image_shape();
    if (k, h, w) != (channels, size, size) {
        return Err(Error::Config(format!(
            "dataset images are {k}x{h}x{w}, model expects {channels}x{size}x{size}"
        )));
    }
    if data.num_classes != classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {classes}",
            data.num_classes
        )));
    }
    Ok(())
}

/// Cross-entropy training of the teacher on its pooled prediction.
pub fn train_teacher(model: &TeacherConfig, cfg: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    for d in [train, val] {
        check_dataset(d, model.in_channels, model.image_size, model.num_classes)?;
    }
    let mut params = model.init_params::<f32>(cfg.seed)?;
    let mut opt = OptimState::new(&params, cfg.adamw());
    let sched = Schedule::new(cfg, train.len());
    let ckpt = |p: &Params<f32>, epochs: usize| Checkpoint {
        config: ckpt_header(model.to_kv(), epochs),
        params: p.clone(),
    };
    let mut best = (f64::NEG_INFINITY, ckpt(&params, 0));
    let mut out = TrainOutcome::new(ckpt(&params, 0));
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut acc = EpochAccum::default();
        let mut lr = 0.0;
        for batch in train.shuffled_batches(cfg.batch_size, cfg.seed, epoch) {
            lr = sched.lr(cfg, step);
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let x = g.constant(batch.images);
            let fwd = teacher_forward(&mut g, model, &bound, x, NormMode::Batch)?;
            let loss = g.softmax_ce(fwd.global_logits, &batch.labels)?;
            let hits = argmax_hits(g.value(fwd.global_logits), &batch.labels);
            let value = g.value(loss).item();
            check_finite(value, "teacher loss", epoch, step)?;
            let rec = StepRecord {
                epoch,
                step,
                lr,
                loss_ce: value,
                loss_distill: 0.0,
                loss_cskd: 0.0,
                loss_total: value,
            };
            acc.push(&rec, hits, batch.labels.len());
            out.steps.push(rec);
            let stats = fwd.batch_stats;
            let grads = named_grads(&bound, &g.backward(loss)?);
            opt.update(&mut params, &grads, lr)?;
            update_running_stats(&mut params, &stats)?;
            step += 1;
        }
        let val_top1 = evaluate_teacher(model, &params, val, cfg.batch_size)?;
        let secs = start.elapsed().as_secs_f64();
        let row = acc.row(epoch, 0.0, lr, val_top1, if cfg.record_time { secs } else { 0.0 });
        info!(
            "teacher epoch {epoch}: loss {:.4} train {:.2}% val {:.2}% ({secs:.1}s)",
            row.loss_total,
            acc.train_top1(),
            val_top1
        );
        if val_top1 > best.0 {
            best = (val_top1, ckpt(&params, epoch + 1));
        }
        out.end_epoch(cfg, row, acc.train_top1(), secs, ckpt(&params, epoch + 1));
    }
    out.last = ckpt(&params, cfg.epochs);
    out.best = best.1;
    Ok(out)
}

/// Frozen-teacher predictions for every sample of a dataset.
struct TeacherCache {
    /// `[n, g, g, classes]`.
    dense: Tensor<f32>,
    /// `[n, classes]`.
    global: Tensor<f32>,
}

impl TeacherCache {
    /// Each sample's prediction depends only on that sample, so batching here
    /// gives the same bits as per-step inference.
    fn build(cfg: &TeacherConfig, params: &Params<f32>, data: &Dataset, batch_size: usize) -> Result<Self> {
        let (g, c) = (cfg.feature_grid(), cfg.num_classes);
        let mut dense = Vec::with_capacity(data.len() * g * g * c);
        let mut global = Vec::with_capacity(data.len() * c);
        for b in data.sequential_batches(batch_size) {
            let out = teacher_infer(cfg, params, &b.images)?;
            dense.extend_from_slice(out.dense_logits.data());
            global.extend_from_slice(out.global_logits.data());
        }
        Ok(Self {
            dense: Tensor::new(&[data.len(), g, g, c], dense)?,
            global: Tensor::new(&[data.len(), c], global)?,
        })
    }

    fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let pick = |t: &Tensor<f32>| {
            let per = t.len() / t.shape()[0];
            let mut data = Vec::with_capacity(indices.len() * per);
            for &i in indices {
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(&shape, data)
        };
        Ok((pick(&self.dense)?, pick(&self.global)?))
    }
}

/// Loss values of one student step.
struct StudentStep {
    record: StepRecord,
    hits: usize,
}

#[allow(clippy::too_many_arguments)]
fn student_step(
    run: &DistillRun,
    teacher: &TeacherCache,
    params: &mut Params<f32>,
    opt: &mut OptimState<f32>,
    batch: Batch,
    alpha: f64,
    lr: f64,
    (epoch, step): (usize, usize),
) -> Result<StudentStep> {
    let (dense_t, global_t) = teacher.gather(&batch.indices)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(batch.images);
    let s = student_forward(&mut g, &run.student, &bound, x)?;
    let tg = g.constant(global_t.clone());
    let (ce, distill) = deit_losses(
        &mut g,
        s.class_logits,
        s.distill_logits,
        tg,
        &batch.labels,
        &run.distill,
    )?;
    let dense = match run.method {
        Method::Deit => None,
        Method::Cskd => {
            let targets = ckf_targets(&dense_t, &global_t, alpha)?;
            let (_, h, w) = targets.grid();
            let aligned = align_student_dense(&mut g, s.patch_logits, (h, w))?;
            Some(cskd_loss(&mut g, aligned, &targets, &run.distill)?)
        }
    };
    let total = total_loss(&mut g, ce, distill, dense, &run.distill)?;
    let record = StepRecord {
        epoch,
        step,
        lr,
        loss_ce: g.value(ce).item(),
        loss_distill: g.value(distill).item(),
        loss_cskd: dense.map_or(0.0, |v| g.value(v).item()),
        loss_total: g.value(total).item(),
    };
    check_finite(record.loss_total, "student loss", epoch, step)?;
    let class = g.value(s.class_logits);
    let dist = g.value(s.distill_logits);
    let deit = Tensor::from_fn(class.shape(), |i| 0.5 * (class.data()[i] + dist.data()[i]));
    let hits = argmax_hits(&deit, &batch.labels);
    let grads = named_grads(&bound, &g.backward(total)?);
    opt.update(params, &grads, lr)?;
    Ok(StudentStep { record, hits })
}

/// Distills a frozen teacher into a fresh student.
pub fn distill_student(
    run: &DistillRun,
    teacher: &Checkpoint<f32>,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome> {
    let tcfg = TeacherConfig::from_kv(&teacher.config)?;
    let scfg = &run.student;
    scfg.validate()?;
    run.distill.validate()?;
    run.train.validate()?;
    check_grid_ratio(&tcfg, scfg)?;
    if (tcfg.in_channels, tcfg.image_size) != (scfg.in_channels, scfg.image_size) {
        return Err(Error::Config(format!(
            "teacher takes {}x{} inputs, student {}x{}",
            tcfg.in_channels, tcfg.image_size, scfg.in_channels, scfg.image_size
        )));
    }
    for d in [train, val] {
        check_dataset(d, scfg.in_channels, scfg.image_size, scfg.num_classes)?;
    }
    let cfg = &run.train;
    let cache = TeacherCache::build(&tcfg, &teacher.params, train, cfg.batch_size)?;
    let mut params = scfg.init_params::<f32>(cfg.seed)?;
    let mut opt = OptimState::new(&params, cfg.adamw());
    let sched = Schedule::new(cfg, train.len());
    let ckpt = |p: &Params<f32>, epochs: usize| Checkpoint {
        config: ckpt_header(scfg.to_kv(), epochs),
        params: p.clone(),
    };
    let mut best = (f64::NEG_INFINITY, ckpt(&params, 0));
    let mut out = TrainOutcome::new(ckpt(&params, 0));
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let alpha = match run.method {
            Method::Cskd => decay_alpha(&CkfSchedule {
                strategy: run.decay,
                t: epoch,
                t_max: cfg.epochs,
            })?,
            Method::Deit => 0.0,
        };
        let mut acc = EpochAccum::default();
        let mut lr = 0.0;
        for batch in train.shuffled_batches(cfg.batch_size, cfg.seed, epoch) {
            lr = sched.lr(cfg, step);
            let n = batch.labels.len();
            let s = student_step(
                run,
                &cache,
                &mut params,
                &mut opt,
                batch,
                alpha,
                lr,
                (epoch, step),
            )?;
            acc.push(&s.record, s.hits, n);
            out.steps.push(s.record);
            step += 1;
        }
        let val_top1 = evaluate_student(scfg, &params, val, EnsembleMode::Deit, cfg.batch_size)?;
        let secs = start.elapsed().as_secs_f64();
        let row = acc.row(epoch, alpha, lr, val_top1, if cfg.record_time { secs } else { 0.0 });
        info!(
            "{} epoch {epoch}: alpha {alpha:.3} loss {:.4} (ce {:.4} distill {:.4} cskd {:.4}) train {:.2}% val {:.2}% ({secs:.1}s)",
            run.method,
            row.loss_total,
            row.loss_ce,
            row.loss_distill,
            row.loss_cskd,
            acc.train_top1(),
            val_top1
        );
        if val_top1 > best.0 {
            best = (val_top1, ckpt(&params, epoch + 1));
        }
        out.end_epoch(cfg, row, acc.train_top1(), secs, ckpt(&params, epoch + 1));
    }
    out.last = ckpt(&params, cfg.epochs);
    out.best = best.1;
    Ok(out)
}
