//! Detection accuracy: contingency tables against ground truth and summary
//! tables (mean/sd over repetitions) per method, sample size, and noise level.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ContingencyTable {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub sample_size: usize,
    pub noise_percent: f64,
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// True when any metric came from an empty denominator.
    #[serde(default)]
    pub degenerate: bool,
}

/// Counts restricted to `evaluable` voxels.
pub fn contingency(detected: &Mask, truth: &Mask, evaluable: &Mask) -> Result<ContingencyTable> {
    if detected.dims() != truth.dims() || detected.dims() != evaluable.dims() {
        return Err(Error::DimsMismatch("contingency mask dims".into()));
    }
    let mut t = ContingencyTable {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for ((&d, &g), &e) in detected
        .data()
        .iter()
        .zip(truth.data())
        .zip(evaluable.data())
    {
        if !e {
            continue;
        }
        match (d, g) {
            (true, true) => t.tp += 1,
            (true, false) => t.fp += 1,
            (false, true) => t.fn_ += 1,
            (false, false) => t.tn += 1,
        }
    }
    Ok(t)
}

// 0/0 -> 1 when the paired error count is also 0 (vacuously perfect), else 0.
fn ratio(num: usize, den: usize, errors: usize) -> (f64, bool) {
    if den == 0 {
        ((errors == 0) as u8 as f64, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Dice, sensitivity, and specificity from a contingency table.
pub fn metrics(t: &ContingencyTable) -> (f64, f64, f64, bool) {
    let (dice, d1) = ratio(2 * t.tp, 2 * t.tp + t.fp + t.fn_, t.fp + t.fn_);
    let (sen, d2) = ratio(t.tp, t.tp + t.fn_, t.fp);
    let (spc, d3) = ratio(t.tn, t.tn + t.fp, t.fn_);
    (dice, sen, spc, d1 || d2 || d3)
}

pub fn metric_row(
    t: &ContingencyTable,
    method: &str,
    sample_size: usize,
    noise_percent: f64,
) -> MetricRow {
    let (dice, sensitivity, specificity, degenerate) = metrics(t);
    MetricRow {
        method: method.to_string(),
        sample_size,
        noise_percent,
        dice,
        sensitivity,
        specificity,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub sample_size: usize,
    pub noise_percent: f64,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, sd)
}

/// Aggregates repetitions per (method, sample_size, noise): sample mean and
/// sample (n-1) standard deviation for each metric.
pub fn experiment_table(rows: &[MetricRow]) -> Vec<SummaryRow> {
    // BTreeMap keyed on a noise-in-millipercent integer for a total order
    let mut cells: BTreeMap<(String, usize, i64), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((
                r.method.clone(),
                r.sample_size,
                (r.noise_percent * 1000.0).round() as i64,
            ))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((method, sample_size, noise_key), members) in cells {
        let noise_percent = noise_key as f64 / 1000.0;
        for (metric, pick) in [
            ("dice", (|r: &MetricRow| r.dice) as fn(&MetricRow) -> f64),
            ("sensitivity", |r| r.sensitivity),
            ("specificity", |r| r.specificity),
        ] {
            let values: Vec<f64> = members.iter().map(|r| pick(r)).collect();
            let (mean, sd) = mean_sd(&values);
            out.push(SummaryRow {
                method: method.clone(),
                sample_size,
                noise_percent,
                metric: metric.to_string(),
                mean,
                sd,
            });
        }
    }
    out
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(f, "method,sample_size,noise_percent,metric,mean,sd").map_err(io_err)?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.method, r.sample_size, r.noise_percent, r.metric, r.mean, r.sd
        )
        .map_err(io_err)?;
    }
    f.flush().map_err(io_err)?;
    Ok(())
}
