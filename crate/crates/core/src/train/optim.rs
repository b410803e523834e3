use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nets::{is_buffer, Bound, Params};
use crate::tensor::{cst, Element, Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Whether decoupled weight decay applies to a parameter: matrices and
/// kernels only, never biases, norm gains, learned tokens or position tables.
pub fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() >= 2 && !matches!(name, "cls_token" | "dist_token" | "pos_embed")
}

/// Moment buffers for every trainable parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Element> OptimState<T> {
    pub fn new(params: &Params<T>, config: AdamWConfig) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.len()];
        let trainable = || params.iter().filter(|(n, _)| !is_buffer(n));
        Self {
            config,
            step: 0,
            m: trainable().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
            v: trainable().map(|(n, t)| (n.to_string(), zeros(t))).collect(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[T]> {
        self.v.get(name).map(Vec::as_slice)
    }

    /// One update: `p <- p * (1 - lr * wd)`, then the bias-corrected Adam step.
    /// A non-finite gradient aborts before anything is modified.
    pub fn update(&mut self, params: &mut Params<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be nonnegative, got {lr}")));
        }
        for (name, p) in params.iter().filter(|(n, _)| !is_buffer(n)) {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of `{name}` is {} at flat index {i} (optimizer step {})",
                    g.data()[i],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2): (T, T) = (cst(c.beta1), cst(c.beta2));
        let (nb1, nb2): (T, T) = (cst(1.0 - c.beta1), cst(1.0 - c.beta2));
        let step_size: T = cst(lr / (1.0 - c.beta1.powi(t)));
        let inv_bc2: T = cst(1.0 / (1.0 - c.beta2.powi(t)));
        let eps: T = cst(c.eps);
        let shrink: T = cst(1.0 - lr * c.weight_decay);
        let names: Vec<String> = self.m.keys().cloned().collect();
        for name in names {
            let g = &grads[&name];
            let decay = c.weight_decay != 0.0 && decays(&name, g.shape());
            let m = self.m.get_mut(&name).expect("moment exists");
            let v = self.v.get_mut(&name).expect("moment exists");
            let mut p = params.get(&name)?.to_vec();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                if decay {
                    *pi = *pi * shrink;
                }
                *mi = b1 * *mi + nb1 * gi;
                *vi = b2 * *vi + nb2 * gi * gi;
                *pi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
            let shape = g.shape().to_vec();
            params.replace(&name, Tensor::new(&shape, p)?)?;
        }
        Ok(())
    }
}

/// Gradients of every bound parameter, by name.
pub fn named_grads<T: Element>(bound: &Bound, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
    bound
        .iter()
        .filter_map(|(name, v)| grads.get(v).map(|g| (name.to_string(), g.clone())))
        .collect()
}

/// Linear warmup from 0 to `lr_max` over `warmup` steps, then half-cosine
/// decay to `lr_min` at `total`.
pub fn cosine_lr(t: usize, warmup: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if t < warmup {
        return lr_max * t as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr_max;
    }
    let progress = ((t - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}
