use mtuc_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::episode::{EpisodeLog, StepRecord, Termination};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::perception::{perceive_nn_with_mask, PathConfig};

/// Steps slower than this are excluded from dynamic measures (m/s).
pub const MOVING_SPEED: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicMetrics {
    /// Mean |theta_hat - theta_true| over moving steps.
    pub theta_dmae: f64,
    /// Mean |delta_true| over moving steps.
    pub dma_delta: f64,
    pub moving_steps: usize,
}

pub fn dynamic_metrics(records: &[StepRecord]) -> Result<DynamicMetrics> {
    let (mut th, mut de, mut n) = (0.0, 0.0, 0usize);
    for r in records.iter().filter(|r| r.v > MOVING_SPEED) {
        th += (r.theta_hat - r.theta_true).abs();
        de += r.delta_true.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config(format!(
            "no moving steps among {} records",
            records.len()
        )));
    }
    Ok(DynamicMetrics {
        theta_dmae: th / n as f64,
        dma_delta: de / n as f64,
        moving_steps: n,
    })
}

/// Pixel confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Counts from binary masks; nonzero means positive.
    pub fn from_masks(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::Config(format!(
                "mask shapes differ: {:?} vs {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p != 0.0, g != 0.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, o: &Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn metrics(&self) -> SegMetrics {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let total = self.tp + self.fp + self.fn_ + self.tn;
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        SegMetrics {
            accuracy: ratio(self.tp + self.tn, total),
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Pixel-wise metrics of binary masks; ratios with a zero denominator are 0.
pub fn seg_metrics(pred: &Tensor, gt: &Tensor) -> Result<SegMetrics> {
    Ok(Confusion::from_masks(pred, gt)?.metrics())
}

/// One row of metrics.csv. Fields that do not apply are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub track: String,
    pub termination: Option<Termination>,
    pub steps: usize,
    pub theta_dmae: Option<f64>,
    pub dma_delta: Option<f64>,
    pub seg_accuracy: Option<f64>,
    pub seg_precision: Option<f64>,
    pub seg_recall: Option<f64>,
    pub seg_f1: Option<f64>,
    pub heading_mae: Option<f64>,
    pub c1_accuracy: Option<f64>,
    pub c2_accuracy: Option<f64>,
    pub distance: Option<f64>,
    pub mean_speed: Option<f64>,
    pub max_abs_delta: Option<f64>,
}

impl MetricReport {
    pub fn empty(label: &str) -> Self {
        Self {
            label: label.to_string(),
            track: String::new(),
            termination: None,
            steps: 0,
            theta_dmae: None,
            dma_delta: None,
            seg_accuracy: None,
            seg_precision: None,
            seg_recall: None,
            seg_f1: None,
            heading_mae: None,
            c1_accuracy: None,
            c2_accuracy: None,
            distance: None,
            mean_speed: None,
            max_abs_delta: None,
        }
    }

    /// Summary of a closed-loop episode. Dynamic measures are empty when
    /// the vehicle never moved.
    pub fn from_episode(log: &EpisodeLog) -> Self {
        let recs = &log.records;
        let dynamic = dynamic_metrics(recs).ok();
        let moving: Vec<&StepRecord> = recs.iter().filter(|r| r.v > MOVING_SPEED).collect();
        let frac = |f: &dyn Fn(&StepRecord) -> bool| {
            (!moving.is_empty()).then(|| moving.iter().filter(|r| f(r)).count() as f64 / moving.len() as f64)
        };
        Self {
            track: log.track.clone(),
            termination: Some(log.termination),
            steps: recs.len(),
            theta_dmae: dynamic.map(|d| d.theta_dmae),
            dma_delta: dynamic.map(|d| d.dma_delta),
            heading_mae: dynamic.map(|d| d.theta_dmae),
            c1_accuracy: frac(&|r| r.c1_hat == r.c1_true),
            c2_accuracy: frac(&|r| r.c2_hat == r.c2_true),
            distance: Some(log.distance),
            mean_speed: (!recs.is_empty()).then(|| recs.iter().map(|r| r.v).sum::<f64>() / recs.len() as f64),
            max_abs_delta: recs.iter().map(|r| r.delta_true.abs()).reduce(f64::max),
            ..Self::empty(&log.label)
        }
    }
}

/// Static measures of a model over one split of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticMetrics {
    pub frames: usize,
    pub seg: SegMetrics,
    pub confusion: Confusion,
    pub heading_mae: f64,
    pub c1_accuracy: f64,
    pub c2_accuracy: f64,
}

impl StaticMetrics {
    pub fn report(&self, label: &str) -> MetricReport {
        MetricReport {
            steps: self.frames,
            seg_accuracy: Some(self.seg.accuracy),
            seg_precision: Some(self.seg.precision),
            seg_recall: Some(self.seg.recall),
            seg_f1: Some(self.seg.f1),
            heading_mae: Some(self.heading_mae),
            c1_accuracy: Some(self.c1_accuracy),
            c2_accuracy: Some(self.c2_accuracy),
            ..MetricReport::empty(label)
        }
    }
}

/// Evaluation-mode pass over `split`; segmentation confusion is pooled
/// over all pixels of all frames.
pub fn eval_static(model: &Model, data: &Dataset, split: Split, threshold: f64) -> Result<StaticMetrics> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::Dataset(format!("split {split:?} is empty")));
    }
    let mut conf = Confusion::default();
    let (mut heading, mut c1, mut c2) = (0.0, 0usize, 0usize);
    let path = PathConfig {
        threshold,
        ..PathConfig::default()
    };
    for &i in &idx {
        let f = &data.frames[i];
        let (est, prob) = perceive_nn_with_mask(model, &f.image, &path)?;
        let pred = prob.map(|p| if p >= threshold { 1.0 } else { 0.0 });
        conf.add(&Confusion::from_masks(&pred, &f.mask)?);
        heading += (est.theta_hat - f.theta).abs();
        c1 += usize::from(est.c1 == f.c1);
        c2 += usize::from(est.c2 == f.c2);
    }
    let n = idx.len() as f64;
    Ok(StaticMetrics {
        frames: idx.len(),
        seg: conf.metrics(),
        confusion: conf,
        heading_mae: heading / n,
        c1_accuracy: c1 as f64 / n,
        c2_accuracy: c2 as f64 / n,
    })
}
