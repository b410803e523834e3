use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{cst, read_named_records, write_named_records, Element, Graph, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSKC";

/// Named parameter tensors, ordered by name.
///
/// Entries whose names end in `.running_mean` / `.running_var` are
/// normalization buffers: they are stored and checkpointed but never trained.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Element> Params<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.iter().filter(|(n, _)| !is_buffer(n)).map(|(_, t)| t.len()).sum()
    }

    /// Places every entry on the graph as a leaf. Trainable entries require a
    /// gradient when `trainable` is set; buffers never do.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable && !is_buffer(name))))
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Element>(&self) -> Params<U> {
        Params {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub(crate) fn replace(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::dim("Params::replace", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }
}

/// Graph handles for a bound parameter set.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    /// Substitutes the handle for one parameter (used to differentiate w.r.t. a single tensor).
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Parameters plus the canonical `key=value` text of the model configuration
/// that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: String,
    pub params: Params<T>,
}

impl<T: Element> Checkpoint<T> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_named_records(w, CHECKPOINT_MAGIC, &self.config, self.params.iter())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = BufReader::new(File::open(path)?);
        let (config, records) = read_named_records(&mut r, CHECKPOINT_MAGIC)?;
        let mut params = Params::new();
        for (name, t) in records {
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }
}

/// Truncated normal (cut at two standard deviations).
pub(crate) fn trunc_normal<T: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break cst(z * std);
        }
    })
}

/// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
pub(crate) fn fan_in_uniform<T: Element, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| cst(rng.random_range(-bound..bound)))
}
