//! Confusion-matrix metrics: completion IoU, per-class IoU, mIoU,
//! precision and recall.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::LabelGrid;

/// Counts over `(ground truth, prediction)` pairs of classes `0..K`.
#[derive(Debug, Clone, PartialEq, Eq)]
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

    pub fn add(&mut self, gt: usize, pred: usize) -> Result<()> {
        if gt >= self.classes || pred >= self.classes {
            return Err(Error::invalid(format!(
                "confusion: class pair ({gt}, {pred}) outside 0..{}",
                self.classes
            )));
        }
        self.counts[gt * self.classes + pred] += 1;
        Ok(())
    }

    /// Accumulates every valid voxel of `gt` against `pred`.
    pub fn accumulate(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape(format!(
                "evaluate: prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        for ((&p, &g), &inv) in pred.labels().iter().zip(gt.labels()).zip(gt.invalid()) {
            if !inv {
                self.add(g as usize, p as usize)?;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion: merging matrices of different size"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(TP, FP, FN)` of class `c`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let fp = (0..self.classes).map(|g| self.get(g, c)).sum::<u64>() - tp;
        let fn_ = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
        (tp, fp, fn_)
    }

    /// Binary occupancy counts `(TP, FP, FN)` with class 0 as empty.
    pub fn occupancy_counts(&self) -> (u64, u64, u64) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for g in 0..self.classes {
            for p in 0..self.classes {
                let n = self.get(g, p);
                match (g > 0, p > 0) {
                    (true, true) => tp += n,
                    (false, true) => fp += n,
                    (true, false) => fn_ += n,
                    (false, false) => {}
                }
            }
        }
        (tp, fp, fn_)
    }

    pub fn metrics(&self) -> Metrics {
        let (tp, fp, fn_) = self.occupancy_counts();
        let mut per_class = Vec::with_capacity(self.classes.saturating_sub(1));
        let mut present = Vec::with_capacity(per_class.capacity());
        for c in 1..self.classes {
            let (tp, fp, fn_) = self.class_counts(c);
            per_class.push(ratio(tp, tp + fp + fn_));
            present.push(tp + fp + fn_ > 0);
        }
        let miou = mean(per_class.iter().copied());
        let miou_present = mean(per_class.iter().zip(&present).filter(|(_, &p)| p).map(|(&v, _)| v));
        Metrics {
            iou: ratio(tp, tp + fp + fn_),
            miou,
            miou_present,
            per_class_iou: per_class,
            class_present: present,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            voxels: self.total(),
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Completion IoU, label > 0 counted as occupied.
    pub iou: f64,
    /// Mean IoU over semantic classes `1..K`, absent classes scoring 0.
    pub miou: f64,
    /// Mean IoU over semantic classes occurring in the ground truth or the
    /// prediction.
    pub miou_present: f64,
    /// IoU of class `c` at index `c − 1`.
    pub per_class_iou: Vec<f64>,
    pub class_present: Vec<bool>,
    pub precision: f64,
    pub recall: f64,
    pub voxels: u64,
}

/// Metrics of one prediction against its ground truth; `num_classes`
/// excludes the empty class.
pub fn evaluate(pred: &LabelGrid, gt: &LabelGrid, num_classes: usize) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(num_classes + 1);
    cm.accumulate(pred, gt)?;
    Ok(cm.metrics())
}

/// Named scalar results, written as `key = value` lines in key order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub values: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        self.values.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// `iou`, `miou`, `miou_present`, `precision`, `recall`, `voxels` and
    /// `class.NN.iou` for every semantic class.
    pub fn add_metrics(&mut self, m: &Metrics) {
        self.insert("iou", m.iou);
        self.insert("miou", m.miou);
        self.insert("miou_present", m.miou_present);
        self.insert("precision", m.precision);
        self.insert("recall", m.recall);
        self.insert("voxels", m.voxels as f64);
        for (i, &v) in m.per_class_iou.iter().enumerate() {
            self.insert(format!("class.{:02}.iou", i + 1), v);
        }
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("report line without `=`: {line}")))?;
            let v = v
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("report value is not a number: {line}")))?;
            r.insert(k.trim(), v);
        }
        Ok(r)
    }
}
