use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,alpha,lr,loss_ce,loss_distill,loss_cskd,loss_total,val_top1,seconds";

/// One completed epoch. Losses are means over the epoch's batches; `lr` is
/// the rate of the epoch's last step; `val_top1` is a percentage.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub alpha: f64,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_distill: f64,
    pub loss_cskd: f64,
    pub loss_total: f64,
    pub val_top1: f64,
    pub seconds: f64,
}

impl EpochRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.alpha,
            self.lr,
            self.loss_ce,
            self.loss_distill,
            self.loss_cskd,
            self.loss_total,
            self.val_top1,
            self.seconds
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<EpochRow>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.to_csv_line());
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == METRICS_HEADER => {}
            other => {
                return Err(Error::format(
                    0,
                    format!("metrics header mismatch: expected `{METRICS_HEADER}`, got `{}`", other.unwrap_or("")),
                ))
            }
        }
        let mut rows = Vec::new();
        let mut offset = METRICS_HEADER.len() as u64 + 1;
        for line in lines {
            if line.trim().is_empty() {
                offset += line.len() as u64 + 1;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::format(offset, format!("expected 9 fields, got {}", f.len())));
            }
            let num = |i: usize| -> Result<f64> {
                f[i].trim()
                    .parse()
                    .map_err(|_| Error::format(offset, format!("bad number `{}`", f[i])))
            };
            rows.push(EpochRow {
                epoch: f[0]
                    .trim()
                    .parse()
                    .map_err(|_| Error::format(offset, format!("bad epoch `{}`", f[0])))?,
                alpha: num(1)?,
                lr: num(2)?,
                loss_ce: num(3)?,
                loss_distill: num(4)?,
                loss_cskd: num(5)?,
                loss_total: num(6)?,
                val_top1: num(7)?,
                seconds: num(8)?,
            });
            offset += line.len() as u64 + 1;
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}
