//! Confusion matrices, IoU, mean IoU and two-class Jaccard.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::ClassMap;
use crate::error::{Error, Result};

/// `C×C` pixel counts; entry `(g, p)` counts pixels of ground truth `g`
/// predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &ClassMap, gt: &ClassMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Data(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let c = self.classes;
        if let Some(&bad) = pred.classes.iter().chain(&gt.classes).find(|&&v| v as usize >= c) {
            return Err(Error::Data(format!("class {bad} out of range for {c} classes")));
        }
        for (&p, &g) in pred.classes.iter().zip(&gt.classes) {
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Adds another shard's counts.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Data(format!(
                "cannot merge {} and {} class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both ground truth and
    /// prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..self.classes).map(|p| self.get(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|g| self.get(g, k)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    fn iou_fractions(&self) -> Vec<(u64, u64)> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..self.classes).map(|p| self.get(k, p)).sum();
                let col: u64 = (0..self.classes).map(|g| self.get(g, k)).sum();
                (tp, row + col - tp)
            })
            .filter(|&(_, d)| d > 0)
            .collect()
    }

    /// Mean IoU over the classes present in ground truth or prediction.
    /// The mean of the per-class fractions is formed exactly when it fits
    /// in integers, so the result is the correctly rounded value.
    pub fn miou(&self) -> Result<MeanIou> {
        let per_class = self.iou();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Data("mean IoU of an empty confusion matrix".into()));
        }
        let miou = exact_mean(&self.iou_fractions()).unwrap_or(present.iter().sum::<f64>() / present.len() as f64);
        Ok(MeanIou { miou, per_class })
    }

    /// IoU of `positive` in a two-class matrix. When neither ground truth
    /// nor prediction contains the positive class the index is defined as 1.
    pub fn jaccard_binary(&self, positive: usize) -> Result<f64> {
        if self.classes != 2 {
            return Err(Error::Data(format!("binary Jaccard needs 2 classes, got {}", self.classes)));
        }
        if positive >= 2 {
            return Err(Error::Data(format!("positive class {positive} out of range")));
        }
        Ok(self.iou()[positive].unwrap_or(1.0))
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num/den` fractions as one rational, then a single rounding.
fn exact_mean(fracs: &[(u64, u64)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(n, d) in fracs {
        let (n, d) = (n as u128, d as u128);
        let g = gcd(den, d);
        let lcm = den.checked_mul(d / g)?;
        num = num.checked_mul(lcm / den)?.checked_add(n.checked_mul(lcm / d)?)?;
        den = lcm;
        let r = gcd(num, den).max(1);
        (num, den) = (num / r, den / r);
    }
    den = den.checked_mul(fracs.len() as u128)?;
    let r = gcd(num, den).max(1);
    (num, den) = (num / r, den / r);
    const EXACT: u128 = 1 << 53;
    (num < EXACT && den < EXACT).then(|| num as f64 / den as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanIou {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Header of the metrics CSV; the leading comment line carries the schema
/// version.
pub const CSV_SCHEMA: &str = "# segcons-metrics v1";
pub const CSV_HEADER: &str = "run_id,step,split,metric,value";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(run_id: &str, step: usize, split: &str, metric: &str, value: f64) -> Self {
        Self {
            run_id: run_id.into(),
            step,
            split: split.into(),
            metric: metric.into(),
            value,
        }
    }
}

pub fn write_csv_header<W: Write>(w: &mut W) -> Result<()> {
    writeln!(w, "{CSV_SCHEMA}")?;
    writeln!(w, "{CSV_HEADER}")?;
    Ok(())
}

/// Values use Rust's shortest round-trip float formatting, so a row read
/// back parses to the identical `f64`.
pub fn write_csv_row<W: Write>(w: &mut W, row: &MetricRow) -> Result<()> {
    writeln!(w, "{},{},{},{},{:?}", row.run_id, row.step, row.split, row.metric, row.value)?;
    Ok(())
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(CSV_SCHEMA) => {}
        other => return Err(Error::Data(format!("metrics CSV: expected `{CSV_SCHEMA}`, found {other:?}"))),
    }
    match lines.next() {
        Some(CSV_HEADER) => {}
        other => return Err(Error::Data(format!("metrics CSV: expected `{CSV_HEADER}`, found {other:?}"))),
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let [run, step, split, metric, value] = f[..] else {
                return Err(Error::Data(format!("metrics CSV: malformed row `{l}`")));
            };
            let bad = |what: &str| Error::Data(format!("metrics CSV: bad {what} in `{l}`"));
            Ok(MetricRow {
                run_id: run.into(),
                step: step.parse().map_err(|_| bad("step"))?,
                split: split.into(),
                metric: metric.into(),
                value: value.parse().map_err(|_| bad("value"))?,
            })
        })
        .collect()
}
