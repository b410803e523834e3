//! Post-hoc diagnostics: mean attention distance, patch response maps,
//! token ensembles and accuracy-dynamics export.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;
use crate::nets::StudentOutputs;
use crate::tensor::{cst, read_named_records, write_named_records, Element, Tensor};
use crate::train::{RunMetrics, METRICS_HEADER};

pub const ATTENTION_MAGIC: &[u8; 4] = b"CSKA";

/// Attention probabilities over the full token sequence for a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump<T> {
    /// Side of the patch grid.
    pub grid: usize,
    /// Leading non-patch tokens in each sequence.
    pub special_tokens: usize,
    /// Per layer, `[samples, heads, tokens, tokens]`.
    pub layers: Vec<Tensor<T>>,
}

impl<T: Element> AttentionDump<T> {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid + self.special_tokens
    }

    /// Checks that every layer has the same `[samples, heads, tokens, tokens]` shape
    /// and matches the grid geometry.
    pub fn check_geometry(&self) -> Result<(usize, usize)> {
        let t = self.tokens();
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Contract("attention dump has no layers".into()))?;
        let s = first.shape();
        if s.len() != 4 || s[2] != t || s[3] != t {
            return Err(Error::Contract(format!(
                "attention shape {s:?} does not match a {g}x{g} grid with {} special tokens",
                self.special_tokens,
                g = self.grid
            )));
        }
        if let Some((l, bad)) = self.layers.iter().enumerate().find(|(_, x)| x.shape() != s) {
            return Err(Error::Contract(format!(
                "layer {l} has shape {:?}, layer 0 has {s:?}",
                bad.shape()
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Largest deviation of any attention row sum from 1.
    pub fn max_row_error(&self) -> f64 {
        let t = self.tokens();
        self.layers
            .iter()
            .flat_map(|l| l.data().chunks_exact(t))
            .map(|row| (row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Collects the attention of one or more inference batches.
    pub fn from_outputs(grid: usize, special_tokens: usize, outputs: &[StudentOutputs<T>]) -> Result<Self> {
        let first = outputs
            .first()
            .ok_or_else(|| Error::Contract("no outputs to collect attention from".into()))?;
        let mut layers = Vec::with_capacity(first.attention.len());
        for l in 0..first.attention.len() {
            let s = first.attention[l].shape().to_vec();
            let mut data = Vec::new();
            let mut samples = 0;
            for o in outputs {
                let a = o
                    .attention
                    .get(l)
                    .ok_or_else(|| Error::Contract("batches disagree on layer count".into()))?;
                if a.shape()[1..] != s[1..] {
                    return Err(Error::dim("AttentionDump::from_outputs", &s, a.shape()));
                }
                samples += a.shape()[0];
                data.extend_from_slice(a.data());
            }
            layers.push(Tensor::new(&[samples, s[1], s[2], s[3]], data)?);
        }
        let dump = Self {
            grid,
            special_tokens,
            layers,
        };
        dump.check_geometry()?;
        Ok(dump)
    }

    /// One record per `(layer, head)` named `attn.L{l}.H{h}`, shape `[samples, tokens, tokens]`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let (samples, heads) = self.check_geometry()?;
        let t = self.tokens();
        let header = format!(
            "grid={}\nspecial_tokens={}\nlayers={}\nheads={heads}\n",
            self.grid,
            self.special_tokens,
            self.layers.len()
        );
        let mut records = Vec::with_capacity(self.layers.len() * heads);
        for (l, layer) in self.layers.iter().enumerate() {
            for h in 0..heads {
                let mut data = Vec::with_capacity(samples * t * t);
                for s in 0..samples {
                    let start = (s * heads + h) * t * t;
                    data.extend_from_slice(&layer.data()[start..start + t * t]);
                }
                records.push((format!("attn.L{l}.H{h}"), Tensor::new(&[samples, t, t], data)?));
            }
        }
        write_named_records(w, ATTENTION_MAGIC, &header, records.iter().map(|(n, t)| (n.as_str(), t)))
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
        let (header, records) = read_named_records::<T, _>(&mut BufReader::new(File::open(path)?), ATTENTION_MAGIC)?;
        let e = kv::parse(&header)?;
        let grid: usize = kv::value(kv::require(&e, "grid")?)?;
        let special_tokens: usize = kv::value(kv::require(&e, "special_tokens")?)?;
        let num_layers: usize = kv::value(kv::require(&e, "layers")?)?;
        let heads: usize = kv::value(kv::require(&e, "heads")?)?;
        let t = grid * grid + special_tokens;
        let lookup = |name: &str| {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, x)| x)
                .ok_or_else(|| Error::Contract(format!("attention dump lacks record `{name}`")))
        };
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let per_head: Vec<&Tensor<T>> = (0..heads)
                .map(|h| lookup(&format!("attn.L{l}.H{h}")))
                .collect::<Result<_>>()?;
            let samples = per_head[0].shape()[0];
            let mut data = Vec::with_capacity(samples * heads * t * t);
            for s in 0..samples {
                for x in &per_head {
                    if x.shape() != [samples, t, t] {
                        return Err(Error::dim("AttentionDump::load", x.shape(), &[samples, t, t]));
                    }
                    data.extend_from_slice(&x.data()[s * t * t..(s + 1) * t * t]);
                }
            }
            layers.push(Tensor::new(&[samples, heads, t, t], data)?);
        }
        let dump = Self {
            grid,
            special_tokens,
            layers,
        };
        dump.check_geometry()?;
        Ok(dump)
    }
}

/// Attention-weighted mean Euclidean distance (in patch units) between each
/// patch query and the patch keys, per `[layer][head]`.
///
/// Attention to special tokens is dropped and each query row is renormalized
/// over patch keys. A row with no mass on any patch key is skipped.
pub fn mean_attention_distance<T: Element>(dump: &AttentionDump<T>) -> Result<Vec<Vec<f64>>> {
    let (samples, heads) = dump.check_geometry()?;
    let (g, sp, t) = (dump.grid, dump.special_tokens, dump.tokens());
    let n = g * g;
    let dist: Vec<f64> = (0..n * n)
        .map(|i| {
            let (q, k) = (i / n, i % n);
            let dy = (q / g) as f64 - (k / g) as f64;
            let dx = (q % g) as f64 - (k % g) as f64;
            (dy * dy + dx * dx).sqrt()
        })
        .collect();
    let mut out = Vec::with_capacity(dump.layers.len());
    for layer in &dump.layers {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let (mut total, mut count) = (0.0, 0usize);
            for s in 0..samples {
                let base = (s * heads + h) * t * t;
                for q in 0..n {
                    let row = &layer.data()[base + (sp + q) * t + sp..base + (sp + q) * t + t];
                    let mut mass = 0.0;
                    let mut weighted = 0.0;
                    for (k, &a) in row.iter().enumerate() {
                        let a = a.to_f64().unwrap_or(f64::NAN);
                        mass += a;
                        weighted += a * dist[q * n + k];
                    }
                    if mass > 0.0 {
                        total += weighted / mass;
                        count += 1;
                    }
                }
            }
            per_head.push(if count == 0 { 0.0 } else { total / count as f64 });
        }
        out.push(per_head);
    }
    Ok(out)
}

/// Per-position predicted class and its softmax probability for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    pub epoch: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub classes: Vec<usize>,
    pub confidence: Vec<f64>,
}

pub const RESPONSE_HEADER: &str = "epoch,row,col,class,confidence";

/// One map per sample of `[b, h, w, classes]` patch logits.
pub fn patch_response_map<T: Element>(patch_logits: &Tensor<T>, epoch: usize) -> Result<Vec<ResponseMap>> {
    let s = patch_logits.shape();
    if s.len() != 4 {
        return Err(Error::dim("patch_response_map", s, &[0, 0, 0, 0]));
    }
    let (b, rows, cols, c) = (s[0], s[1], s[2], s[3]);
    let logits: Tensor<f64> = patch_logits.cast();
    let labels = logits.argmax_last();
    let mut maps = Vec::with_capacity(b);
    for bi in 0..b {
        let mut classes = Vec::with_capacity(rows * cols);
        let mut confidence = Vec::with_capacity(rows * cols);
        for p in 0..rows * cols {
            let i = bi * rows * cols + p;
            let row = &logits.data()[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            classes.push(labels[i]);
            confidence.push((row[labels[i]] - m).exp() / z);
        }
        maps.push(ResponseMap {
            epoch,
            rows,
            cols,
            classes,
            confidence,
        });
    }
    Ok(maps)
}

/// Writes maps (typically one sample across several epochs) as CSV.
pub fn write_responses_csv<W: Write>(w: &mut W, maps: &[ResponseMap]) -> Result<()> {
    writeln!(w, "{RESPONSE_HEADER}")?;
    for m in maps {
        for r in 0..m.rows {
            for c in 0..m.cols {
                let i = r * m.cols + c;
                writeln!(w, "{},{r},{c},{},{}", m.epoch, m.classes[i], m.confidence[i])?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EnsembleMode {
    /// Mean of class-token and distillation-token logits.
    #[default]
    Deit,
    /// Mean of class-token, distillation-token and averaged patch-token logits.
    CskdEnsemble,
}

impl FromStr for EnsembleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deit" => Ok(Self::Deit),
            "cskd_ensemble" => Ok(Self::CskdEnsemble),
            _ => Err(Error::Config(format!(
                "unknown inference mode `{s}` (expected deit or cskd_ensemble)"
            ))),
        }
    }
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Deit => "deit",
            Self::CskdEnsemble => "cskd_ensemble",
        })
    }
}

/// Mean of `values` computed as an offset from the first one, so equal
/// inputs return that value exactly.
fn anchored_mean<T: Element>(values: &[T]) -> T {
    let anchor = values[0];
    let spread = values.iter().fold(T::zero(), |acc, &v| acc + (v - anchor));
    anchor + spread / cst(values.len() as f64)
}

/// Final `[b, classes]` logits under the chosen inference mode.
pub fn ensemble_predict<T: Element>(outputs: &StudentOutputs<T>, mode: EnsembleMode) -> Result<Tensor<T>> {
    let (cl, dl) = (&outputs.class_logits, &outputs.distill_logits);
    if cl.shape() != dl.shape() || cl.rank() != 2 {
        return Err(Error::dim("ensemble_predict", cl.shape(), dl.shape()));
    }
    let (b, c) = (cl.shape()[0], cl.shape()[1]);
    match mode {
        EnsembleMode::Deit => Ok(Tensor::from_fn(&[b, c], |i| anchored_mean(&[cl.data()[i], dl.data()[i]]))),
        EnsembleMode::CskdEnsemble => {
            let p = &outputs.patch_logits;
            let ps = p.shape();
            if ps.len() != 4 || ps[0] != b || ps[3] != c {
                return Err(Error::dim("ensemble_predict", ps, cl.shape()));
            }
            let n = ps[1] * ps[2];
            let mut column = vec![T::zero(); n];
            Ok(Tensor::from_fn(&[b, c], |i| {
                let (bi, ci) = (i / c, i % c);
                for (k, slot) in column.iter_mut().enumerate() {
                    *slot = p.data()[(bi * n + k) * c + ci];
                }
                let patch = anchored_mean(&column);
                anchored_mean(&[cl.data()[i], dl.data()[i], patch])
            }))
        }
    }
}

/// Metrics CSV of `run`; with a `baseline`, an extra `delta` column holds
/// `run.val_top1 - baseline.val_top1` per epoch.
pub fn export_dynamics(run: &RunMetrics, baseline: Option<&RunMetrics>) -> Result<String> {
    if run.rows.is_empty() {
        return Err(Error::Contract("no epochs to export".into()));
    }
    let Some(base) = baseline else {
        return Ok(run.to_csv());
    };
    if base.rows.len() != run.rows.len() {
        return Err(Error::Contract(format!(
            "paired runs have {} and {} epochs",
            run.rows.len(),
            base.rows.len()
        )));
    }
    let mut out = format!("{METRICS_HEADER},delta\n");
    for (r, b) in run.rows.iter().zip(&base.rows) {
        if r.epoch != b.epoch {
            return Err(Error::Contract(format!("epoch {} paired with epoch {}", r.epoch, b.epoch)));
        }
        out.push_str(&format!("{},{}\n", r.to_csv_line(), r.val_top1 - b.val_top1));
    }
    Ok(out)
}
