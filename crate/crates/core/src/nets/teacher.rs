use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{fan_in_uniform, trunc_normal, Bound, Params};
use crate::error::{Error, Result};
use crate::kv;
use crate::tensor::{cst, Element, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Convolutional teacher: `stage_channels.len()` stages of
/// 3x3 conv -> batch norm -> ReLU -> `downsample`x average pooling,
/// followed by a linear classifier shared by the global and dense paths.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub stage_channels: Vec<usize>,
    pub downsample: usize,
    pub num_classes: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 32,
            stage_channels: vec![16, 32, 64],
            downsample: 2,
            num_classes: 10,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 || self.stage_channels.is_empty() {
            return Err(Error::Config("teacher needs channels, classes and at least one stage".into()));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("teacher stage with zero channels".into()));
        }
        if self.downsample == 0 {
            return Err(Error::Config("teacher downsample factor must be positive".into()));
        }
        let total = self
            .downsample
            .checked_pow(self.stage_channels.len() as u32)
            .ok_or_else(|| Error::Config("teacher downsample overflows".into()))?;
        if self.image_size == 0 || self.image_size % total != 0 {
            return Err(Error::Config(format!(
                "teacher total downsample {total} does not divide image size {}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Side of the final feature grid.
    pub fn feature_grid(&self) -> usize {
        self.image_size / self.downsample.pow(self.stage_channels.len() as u32)
    }

    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }

    pub fn init_params<T: Element>(&self, seed: u64) -> Result<Params<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let mut c_in = self.in_channels;
        for (i, &c) in self.stage_channels.iter().enumerate() {
            p.insert(format!("stage{i}.conv.weight"), fan_in_uniform(&mut rng, &[c, c_in, 3, 3], c_in * 9));
            p.insert(format!("stage{i}.bn.weight"), Tensor::full(&[c], T::one()));
            p.insert(format!("stage{i}.bn.bias"), Tensor::zeros(&[c]));
            p.insert(format!("stage{i}.bn.running_mean"), Tensor::zeros(&[c]));
            p.insert(format!("stage{i}.bn.running_var"), Tensor::full(&[c], T::one()));
            c_in = c;
        }
        p.insert("head.weight", trunc_normal(&mut rng, &[c_in, self.num_classes], 0.02));
        p.insert("head.bias", Tensor::zeros(&[self.num_classes]));
        Ok(p)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "model=teacher\nin_channels={}\nimage_size={}\nstage_channels={}\ndownsample={}\nnum_classes={}\n",
            self.in_channels,
            self.image_size,
            kv::join(&self.stage_channels),
            self.downsample,
            self.num_classes
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let e = kv::parse(text)?;
        if kv::require(&e, "model")?.value != "teacher" {
            return Err(Error::Config("checkpoint does not hold a teacher".into()));
        }
        let cfg = Self {
            in_channels: kv::value(kv::require(&e, "in_channels")?)?,
            image_size: kv::value(kv::require(&e, "image_size")?)?,
            stage_channels: kv::list(kv::require(&e, "stage_channels")?)?,
            downsample: kv::value(kv::require(&e, "downsample")?)?,
            num_classes: kv::value(kv::require(&e, "num_classes")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which statistics batch norm uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch; running estimates are reported for update.
    Batch,
    /// Frozen running statistics.
    Running,
}

#[derive(Clone, Debug)]
pub struct BatchStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub struct TeacherForward {
    pub features: Var,
    pub global_logits: Var,
    pub dense_logits: Var,
    pub batch_stats: Vec<BatchStats>,
}

/// Materialized teacher predictions.
#[derive(Clone, Debug)]
pub struct TeacherOutputs<T> {
    /// Pre-pool features `[b, c, h, w]`.
    pub features: Tensor<T>,
    /// `[b, classes]`.
    pub global_logits: Tensor<T>,
    /// Classifier applied at every feature position, `[b, h, w, classes]`.
    pub dense_logits: Tensor<T>,
}

pub fn teacher_forward<T: Element>(
    g: &mut Graph<T>,
    cfg: &TeacherConfig,
    bound: &Bound,
    images: Var,
    mode: NormMode,
) -> Result<TeacherForward> {
    cfg.validate()?;
    let shape = g.shape(images).to_vec();
    let expect = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if shape.len() != 4 || shape[1..] != expect {
        return Err(Error::Config(format!(
            "teacher expects images [b, {}, {}, {}], got {shape:?}",
            expect[0], expect[1], expect[2]
        )));
    }
    let mut x = images;
    let mut batch_stats = Vec::new();
    for i in 0..cfg.stage_channels.len() {
        let w = bound.var(&format!("stage{i}.conv.weight"))?;
        x = g.conv2d(x, w, 1, 1)?;
        let gamma = bound.var(&format!("stage{i}.bn.weight"))?;
        let beta = bound.var(&format!("stage{i}.bn.bias"))?;
        x = match mode {
            NormMode::Batch => {
                let count = {
                    let s = g.shape(x);
                    s[0] * s[2] * s[3]
                };
                let (y, mean, var) = g.batch_norm2d_train(x, gamma, beta, BN_EPS)?;
                batch_stats.push(BatchStats {
                    prefix: format!("stage{i}.bn"),
                    mean,
                    var,
                    count,
                });
                y
            }
            NormMode::Running => {
                let mean = g.value(bound.var(&format!("stage{i}.bn.running_mean"))?).to_vec();
                let var = g.value(bound.var(&format!("stage{i}.bn.running_var"))?).to_vec();
                g.batch_norm2d_eval(x, gamma, beta, &mean, &var, BN_EPS)?
            }
        };
        x = g.relu(x)?;
        if cfg.downsample > 1 {
            x = g.avg_pool2d(x, cfg.downsample, cfg.downsample)?;
        }
    }
    let features = x;
    let (hw, w_head, b_head) = (
        cfg.feature_grid(),
        bound.var("head.weight")?,
        bound.var("head.bias")?,
    );
    let pooled = g.global_avg_pool(features)?;
    let global_logits = g.linear(pooled, w_head, b_head)?;
    let channels_last = g.permute(features, &[0, 2, 3, 1])?;
    let dense_logits = g.linear(channels_last, w_head, b_head)?;
    debug_assert_eq!(g.shape(dense_logits)[1], hw);
    Ok(TeacherForward {
        features,
        global_logits,
        dense_logits,
        batch_stats,
    })
}

impl TeacherForward {
    pub fn outputs<T: Element>(&self, g: &Graph<T>) -> TeacherOutputs<T> {
        TeacherOutputs {
            features: g.value(self.features).clone(),
            global_logits: g.value(self.global_logits).clone(),
            dense_logits: g.value(self.dense_logits).clone(),
        }
    }
}

/// Inference with frozen statistics and no gradient tracking.
pub fn teacher_infer<T: Element>(
    cfg: &TeacherConfig,
    params: &Params<T>,
    images: &Tensor<T>,
) -> Result<TeacherOutputs<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let fwd = teacher_forward(&mut g, cfg, &bound, x, NormMode::Running)?;
    Ok(fwd.outputs(&g))
}

/// Exponential moving update of the running batch-norm statistics
/// (variance is stored unbiased).
pub fn update_running_stats<T: Element>(params: &mut Params<T>, stats: &[BatchStats]) -> Result<()> {
    let m = BN_MOMENTUM;
    for s in stats {
        let mean_name = format!("{}.running_mean", s.prefix);
        let var_name = format!("{}.running_var", s.prefix);
        let unbias = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        let old_mean = params.get(&mean_name)?.clone();
        let old_var = params.get(&var_name)?.clone();
        let new_mean = Tensor::from_fn(old_mean.shape(), |i| {
            cst::<T>(1.0 - m) * old_mean.data()[i] + cst(m * s.mean[i])
        });
        let new_var = Tensor::from_fn(old_var.shape(), |i| {
            cst::<T>(1.0 - m) * old_var.data()[i] + cst(m * s.var[i] * unbias)
        });
        params.replace(&mean_name, new_mean)?;
        params.replace(&var_name, new_var)?;
    }
    Ok(())
}
