//! Confusion-matrix metrics (accuracy, Dice, sensitivity, IoU) and timed
//! evaluation of a model over a dataset.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Fixed prediction threshold.
pub const THRESHOLD: f32 = 0.5;

/// `>= threshold` becomes 1, everything else 0.
pub fn binarize(predictions: &Tensor, threshold: f32) -> Tensor {
    predictions.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

/// Counts with disc (1) as the positive class.
pub fn confusion(pred: &Tensor, truth: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(shape_err!(
            "prediction {:?} and truth {:?} differ in shape",
            pred.shape(),
            truth.shape()
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == 1.0, t == 1.0) {
            _ if (p != 0.0 && p != 1.0) || (t != 0.0 && t != 1.0) => {
                return Err(Error::Parameter(format!(
                    "masks must be binary, found {p} / {t}"
                )))
            }
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Metric fractions in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub dice: f64,
    pub sensitivity: f64,
    pub iou: f64,
}

impl Metrics {
    pub fn as_percent(&self) -> Metrics {
        Metrics {
            accuracy: 100.0 * self.accuracy,
            dice: 100.0 * self.dice,
            sensitivity: 100.0 * self.sensitivity,
            iou: 100.0 * self.iou,
        }
    }
}

/// Metrics from counts. Degenerate cases: both masks empty gives Dice = IoU
/// = Sen = 1; exactly one empty gives Dice = IoU = 0 and Sen 0 (truth
/// nonempty) or 1 (truth empty).
pub fn compute_metrics(c: &ConfusionCounts) -> Metrics {
    let total = c.total();
    let accuracy = if total == 0 {
        1.0
    } else {
        (c.tp + c.tn) as f64 / total as f64
    };
    let truth = c.tp + c.fn_;
    let pred = c.tp + c.fp;
    if truth == 0 || pred == 0 {
        log::debug!("degenerate confusion counts {c:?}; using empty-mask conventions");
        return match (truth == 0, pred == 0) {
            (true, true) => Metrics { accuracy, dice: 1.0, sensitivity: 1.0, iou: 1.0 },
            (false, true) => Metrics { accuracy, dice: 0.0, sensitivity: 0.0, iou: 0.0 },
            _ => Metrics { accuracy, dice: 0.0, sensitivity: 1.0, iou: 0.0 },
        };
    }
    let tp = c.tp as f64;
    Metrics {
        accuracy,
        dice: 2.0 * tp / (2.0 * tp + c.fp as f64 + c.fn_ as f64),
        sensitivity: tp / truth as f64,
        iou: tp / (tp + c.fp as f64 + c.fn_ as f64),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageResult {
    pub source_id: String,
    pub counts: ConfusionCounts,
    /// Percentages.
    pub metrics: Metrics,
    pub seconds: f64,
}

/// Per-image and aggregate results; metrics are percentages.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageResult>,
    pub pooled_counts: ConfusionCounts,
    /// From the summed confusion counts.
    pub pooled: Metrics,
    /// Mean of per-image metrics.
    pub mean: Metrics,
    pub mean_seconds: f64,
}

impl EvalReport {
    pub fn from_images(images: Vec<ImageResult>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Parameter("cannot evaluate an empty dataset".into()));
        }
        let n = images.len() as f64;
        let pooled_counts = images
            .iter()
            .fold(ConfusionCounts::default(), |acc, r| acc.merge(&r.counts));
        let mut mean = Metrics::default();
        let mut seconds = 0.0;
        for r in &images {
            mean.accuracy += r.metrics.accuracy / n;
            mean.dice += r.metrics.dice / n;
            mean.sensitivity += r.metrics.sensitivity / n;
            mean.iou += r.metrics.iou / n;
            seconds += r.seconds;
        }
        Ok(EvalReport {
            pooled: compute_metrics(&pooled_counts).as_percent(),
            pooled_counts,
            mean,
            mean_seconds: seconds / n,
            images,
        })
    }

    /// Flat `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "images={}", self.images.len());
        for (prefix, m) in [("pooled", &self.pooled), ("mean", &self.mean)] {
            let _ = writeln!(out, "{prefix}_accuracy={:.4}", m.accuracy);
            let _ = writeln!(out, "{prefix}_dice={:.4}", m.dice);
            let _ = writeln!(out, "{prefix}_sensitivity={:.4}", m.sensitivity);
            let _ = writeln!(out, "{prefix}_iou={:.4}", m.iou);
        }
        let c = &self.pooled_counts;
        let _ = writeln!(out, "tp={}\nfp={}\ntn={}\nfn={}", c.tp, c.fp, c.tn, c.fn_);
        let _ = writeln!(out, "mean_seconds={:.6}", self.mean_seconds);
        out
    }

    /// One CSV row per image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,accuracy,dice,sensitivity,iou,tp,fp,tn,fn,seconds\n");
        for r in &self.images {
            let (m, c) = (&r.metrics, &r.counts);
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{:.4},{},{},{},{},{:.6}",
                r.source_id.replace(',', "_"),
                m.accuracy,
                m.dice,
                m.sensitivity,
                m.iou,
                c.tp,
                c.fp,
                c.tn,
                c.fn_,
                r.seconds
            );
        }
        out
    }
}

/// Evaluates any predictor mapping a `[1, H, W, 3]` batch to probabilities.
/// The timed region is the prediction plus binarization.
pub fn timed_evaluate_with(
    dataset: &Dataset,
    mut predict: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Parameter("cannot evaluate an empty dataset".into()));
    }
    let mut images = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let (image, truth) = dataset.batch(&[i])?;
        let start = Instant::now();
        let mask = binarize(&predict(&image)?, THRESHOLD);
        // clamp keeps the clock contract on coarse timers
        let seconds = start.elapsed().as_secs_f64().max(1e-9);
        let counts = confusion(&mask, &truth)?;
        images.push(ImageResult {
            source_id: s.source_id.clone(),
            counts,
            metrics: compute_metrics(&counts).as_percent(),
            seconds,
        });
    }
    EvalReport::from_images(images)
}

pub fn timed_evaluate(model: &Model, dataset: &Dataset) -> Result<EvalReport> {
    timed_evaluate_with(dataset, |batch| model.predict(batch))
}
