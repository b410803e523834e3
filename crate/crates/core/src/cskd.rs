//! Dense spatial targets from the teacher, cumulative local-to-global fusion,
//! student alignment and the combined distillation loss.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Graph, Tensor, Var};

/// How the fusion weight decays from 1 (local) to 0 (global).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecayStrategy {
    #[default]
    Linear,
    Cosine,
    Parabolic,
}

impl DecayStrategy {
    pub const ALL: [DecayStrategy; 3] = [Self::Linear, Self::Cosine, Self::Parabolic];

    /// Weight at training progress `p = t / t_max` in `[0, 1]`.
    pub fn at_progress(self, p: f64) -> f64 {
        match self {
            Self::Linear => 1.0 - p,
            // cos(pi/2) is 6e-17, not 0; pin the endpoint.
            Self::Cosine if p >= 1.0 => 0.0,
            Self::Cosine => (std::f64::consts::FRAC_PI_2 * p).cos(),
            Self::Parabolic => (1.0 - p) * (1.0 - p),
        }
    }
}

impl FromStr for DecayStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            "parabolic" => Ok(Self::Parabolic),
            _ => Err(Error::Config(format!(
                "unknown decay strategy `{s}` (expected linear, cosine or parabolic)"
            ))),
        }
    }
}

impl fmt::Display for DecayStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::Cosine => "cosine",
            Self::Parabolic => "parabolic",
        })
    }
}

/// Fusion schedule position: epoch `t` (0-based) out of `t_max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CkfSchedule {
    pub strategy: DecayStrategy,
    pub t: usize,
    pub t_max: usize,
}

pub fn decay_alpha(schedule: &CkfSchedule) -> Result<f64> {
    let CkfSchedule { strategy, t, t_max } = *schedule;
    if t_max == 0 || t > t_max {
        return Err(Error::Schedule { t, t_max });
    }
    Ok(strategy.at_progress(t as f64 / t_max as f64))
}

/// Loss type used to match a target distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DistillMode {
    #[default]
    Hard,
    Soft,
    SoftHard,
}

impl FromStr for DistillMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            "soft+hard" => Ok(Self::SoftHard),
            _ => Err(Error::Config(format!(
                "unknown distillation mode `{s}` (expected hard, soft or soft+hard)"
            ))),
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
            Self::SoftHard => "soft+hard",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    /// Loss type for the dense patch-token term.
    pub distill_mode: DistillMode,
    /// Loss type for the distillation-token term.
    pub deit_distill_mode: DistillMode,
    pub temperature: f64,
    pub cskd_weight: f64,
    pub ce_weight: f64,
    pub deit_distill_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            distill_mode: DistillMode::Hard,
            deit_distill_mode: DistillMode::Hard,
            temperature: 1.0,
            cskd_weight: 1.0,
            ce_weight: 0.5,
            deit_distill_weight: 0.5,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, w) in [
            ("cskd_weight", self.cskd_weight),
            ("ce_weight", self.ce_weight),
            ("deit_distill_weight", self.deit_distill_weight),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Per-position teacher targets.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTargets<T> {
    /// Row-major over `[b, h, w]`.
    pub labels: Vec<usize>,
    /// `[b, h, w, classes]`, kept for soft matching.
    pub fused_logits: Tensor<T>,
}

impl<T: Element> DenseTargets<T> {
    /// `(b, h, w)`.
    pub fn grid(&self) -> (usize, usize, usize) {
        let s = self.fused_logits.shape();
        (s[0], s[1], s[2])
    }
}

/// Blends dense logits `[b,h,w,C]` with global logits `[b,C]` as
/// `alpha * dense + (1 - alpha) * global` and labels each position by argmax.
pub fn ckf_targets<T: Element>(dense: &Tensor<T>, global: &Tensor<T>, alpha: f64) -> Result<DenseTargets<T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("fusion weight must lie in [0, 1], got {alpha}")));
    }
    let (ds, gs) = (dense.shape(), global.shape());
    if ds.len() != 4 || gs.len() != 2 || ds[0] != gs[0] || ds[3] != gs[1] {
        return Err(Error::dim("ckf_targets", ds, gs));
    }
    let (classes, per_sample) = (ds[3], ds[1] * ds[2] * ds[3]);
    let (a, ac): (T, T) = (cst(alpha), cst(1.0 - alpha));
    let gd = global.data();
    let fused = Tensor::from_fn(ds, |i| {
        let (bi, c) = (i / per_sample, i % classes);
        a * dense.data()[i] + ac * gd[bi * classes + c]
    });
    Ok(DenseTargets {
        labels: fused.argmax_last(),
        fused_logits: fused,
    })
}

/// Pools student patch logits `[b,g,g,C]` with a 2x2 stride-2 window so they
/// land on the teacher grid `(h, w)`.
pub fn align_student_dense<T: Element>(g: &mut Graph<T>, patch_logits: Var, target: (usize, usize)) -> Result<Var> {
    let s = g.shape(patch_logits).to_vec();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::dim("align_student_dense", &s, &[0, target.0, target.1, 0]));
    }
    if s[1] != 2 * target.0 || s[2] != 2 * target.1 {
        return Err(Error::Config(format!(
            "student grid {}x{} must be exactly twice the teacher grid {}x{}",
            s[1], s[2], target.0, target.1
        )));
    }
    let x = g.permute(patch_logits, &[0, 3, 1, 2])?;
    let x = g.avg_pool2d(x, 2, 2)?;
    g.permute(x, &[0, 2, 3, 1])
}

/// Matches `[n, C]` student logits to a target distribution `teacher` and/or
/// its hard labels.
fn match_targets<T: Element>(
    g: &mut Graph<T>,
    student: Var,
    labels: &[usize],
    teacher: Var,
    mode: DistillMode,
    temperature: f64,
) -> Result<Var> {
    match mode {
        DistillMode::Hard => g.softmax_ce(student, labels),
        DistillMode::Soft => g.kl_div_temperature(student, teacher, temperature),
        DistillMode::SoftHard => {
            let hard = g.softmax_ce(student, labels)?;
            let soft = g.kl_div_temperature(student, teacher, temperature)?;
            let both = g.add(hard, soft)?;
            g.scale(both, 0.5)
        }
    }
}

/// Dense patch-token loss, averaged over every `b*h*w` position.
pub fn cskd_loss<T: Element>(
    g: &mut Graph<T>,
    aligned: Var,
    targets: &DenseTargets<T>,
    cfg: &DistillConfig,
) -> Result<Var> {
    let s = g.shape(aligned).to_vec();
    if s != targets.fused_logits.shape() {
        return Err(Error::dim("cskd_loss", &s, targets.fused_logits.shape()));
    }
    let rows = s[0] * s[1] * s[2];
    let flat = g.reshape(aligned, &[rows, s[3]])?;
    let teacher = match cfg.distill_mode {
        DistillMode::Hard => flat,
        _ => {
            let t = targets.fused_logits.reshape(&[rows, s[3]])?;
            g.constant(t)
        }
    };
    match_targets(g, flat, &targets.labels, teacher, cfg.distill_mode, cfg.temperature)
}

/// Class-token cross-entropy against ground truth and distillation-token loss
/// against the teacher's pooled prediction. The teacher never receives a gradient.
pub fn deit_losses<T: Element>(
    g: &mut Graph<T>,
    class_logits: Var,
    distill_logits: Var,
    teacher_global: Var,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<(Var, Var)> {
    let ce = g.softmax_ce(class_logits, labels)?;
    let teacher_labels = g.value(teacher_global).argmax_last();
    let (ss, ts) = (g.shape(distill_logits), g.shape(teacher_global));
    if ss != ts {
        return Err(Error::dim("deit_losses", ss, ts));
    }
    let distill = match_targets(
        g,
        distill_logits,
        &teacher_labels,
        teacher_global,
        cfg.deit_distill_mode,
        cfg.temperature,
    )?;
    Ok((ce, distill))
}

/// `(ce_weight * ce + deit_distill_weight * distill) + cskd_weight * cskd`.
/// Without a dense term this is exactly the token-only objective.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    ce: Var,
    distill: Var,
    cskd: Option<Var>,
    cfg: &DistillConfig,
) -> Result<Var> {
    let a = g.scale(ce, cfg.ce_weight)?;
    let b = g.scale(distill, cfg.deit_distill_weight)?;
    let base = g.add(a, b)?;
    match cskd {
        None => Ok(base),
        Some(c) => {
            let c = g.scale(c, cfg.cskd_weight)?;
            g.add(base, c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(strategy: DecayStrategy, t: usize, t_max: usize) -> f64 {
        decay_alpha(&CkfSchedule { strategy, t, t_max }).unwrap()
    }

    #[test]
    fn decay_examples() {
        assert_eq!(sched(DecayStrategy::Linear, 0, 20), 1.0);
        assert_eq!(sched(DecayStrategy::Linear, 20, 20), 0.0);
        assert!((sched(DecayStrategy::Cosine, 10, 20) - 0.7071068).abs() < 1e-6);
        assert!((sched(DecayStrategy::Parabolic, 10, 20) - 0.25).abs() < 1e-12);
        assert!(matches!(
            decay_alpha(&CkfSchedule {
                strategy: DecayStrategy::Linear,
                t: 21,
                t_max: 20
            }),
            Err(Error::Schedule { t: 21, t_max: 20 })
        ));
    }

    #[test]
    fn fused_label_example() {
        let dense = Tensor::new(&[1, 1, 1, 2], vec![2.0, 1.0]).unwrap();
        let global = Tensor::new(&[1, 2], vec![0.0, 3.0]).unwrap();
        let t = ckf_targets(&dense, &global, 0.5).unwrap();
        assert_eq!(t.fused_logits.data(), &[1.0, 2.0]);
        assert_eq!(t.labels, vec![1]);
    }

    #[test]
    fn names_round_trip() {
        for s in DecayStrategy::ALL {
            assert_eq!(s.to_string().parse::<DecayStrategy>().unwrap(), s);
        }
        for m in [DistillMode::Hard, DistillMode::Soft, DistillMode::SoftHard] {
            assert_eq!(m.to_string().parse::<DistillMode>().unwrap(), m);
        }
        assert!("exp".parse::<DecayStrategy>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DistillConfig {
            cskd_weight: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
