//! Binary classification metrics: confusion counts, accuracy, precision,
//! recall, F1, ROC curves and AUC, plus the per-run report and its CSV forms.
//!
//! Class 0 is benign and class 1 malignant throughout. Degenerate `0/0`
//! ratios evaluate to 0.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::ImageSample;
use crate::error::{Error, Result};
use crate::nn::MiniResNet;
use crate::tensor::softmax;
use crate::train::{normalize_batch, Normalization, EVAL_BATCH};

pub const BENIGN: usize = 0;
pub const MALIGNANT: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Share of all samples predicted correctly.
    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// Share of positive predictions that are actually positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Share of actual positives the model predicts positive.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }

    /// The same counts with the other class designated positive.
    pub fn swapped(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn confusion(preds: &[usize], labels: &[usize], positive: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "confusion: {} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("confusion: no samples"));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

fn class_counts(labels: &[usize], positive: usize) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == positive).count();
    (pos, labels.len() - pos)
}

/// ROC curve obtained by sweeping the threshold down through every distinct
/// score. The first point is `(0, 0)` at threshold `+inf`.
pub fn roc_curve(scores: &[f64], labels: &[usize], positive: usize) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "roc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc scores".into()));
    }
    let (n_pos, n_neg) = class_counts(labels, positive);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(
            "roc: both classes must be present in the labels",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold,
        });
    }
    Ok(points)
}

/// Area under the ROC curve by trapezoidal integration. Tied scores form a
/// single diagonal segment, which counts each tied pair as one half.
pub fn roc_auc(scores: &[f64], labels: &[usize], positive: usize) -> Result<f64> {
    let points = roc_curve(scores, labels, positive)?;
    Ok(points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum())
}

/// Per-run evaluation summary. Index 0 of each pair is benign, 1 malignant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: [f64; 2],
    pub recall: [f64; 2],
    pub f1: [f64; 2],
    pub auc: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// Metric columns in report order.
pub const METRIC_KEYS: [&str; 8] = [
    "accuracy",
    "precision_b",
    "precision_m",
    "recall_b",
    "recall_m",
    "f1_b",
    "f1_m",
    "auc",
];

impl MetricsReport {
    /// Builds a report from argmax predictions and malignant-class scores.
    pub fn from_predictions(
        preds: &[usize],
        labels: &[usize],
        malignant_scores: &[f64],
        seed: u64,
    ) -> Result<Self> {
        let malignant = confusion(preds, labels, MALIGNANT)?;
        let benign = malignant.swapped();
        Ok(MetricsReport {
            accuracy: malignant.accuracy(),
            precision: [benign.precision(), malignant.precision()],
            recall: [benign.recall(), malignant.recall()],
            f1: [benign.f1(), malignant.f1()],
            auc: roc_auc(malignant_scores, labels, MALIGNANT)?,
            n_samples: labels.len(),
            seed,
            wall_time_s: 0.0,
        })
    }

    /// Metric values in [`METRIC_KEYS`] order.
    pub fn values(&self) -> [f64; 8] {
        [
            self.accuracy,
            self.precision[0],
            self.precision[1],
            self.recall[0],
            self.recall[1],
            self.f1[0],
            self.f1[1],
            self.auc,
        ]
    }

    pub fn named_values(&self) -> Vec<(&'static str, f64)> {
        METRIC_KEYS.iter().copied().zip(self.values()).collect()
    }
}

/// One scored test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub pred: usize,
    pub score_malignant: f64,
}

pub fn write_predictions_csv<W: Write>(out: W, preds: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in preds {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<predictions csv>", e))?;
    Ok(())
}

pub fn read_predictions_csv<R: Read>(input: R) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_roc_csv<W: Write>(out: W, points: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<roc csv>", e))?;
    Ok(())
}

/// Result of scoring a model on a labelled split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    pub roc: Vec<RocPoint>,
}

/// Scores a two-class model on `samples` in eval mode. The malignant
/// softmax probability drives the ROC/AUC; argmax drives the counts.
pub fn evaluate(model: &MiniResNet, samples: &[ImageSample], seed: u64) -> Result<Evaluation> {
    evaluate_with(model, samples, seed, &Normalization::default())
}

pub fn evaluate_with(
    model: &MiniResNet,
    samples: &[ImageSample],
    seed: u64,
    norm: &Normalization,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate: empty test split"));
    }
    if model.num_classes() != 2 {
        return Err(Error::invalid(format!(
            "evaluate: expected a two-class model, got {} classes",
            model.num_classes()
        )));
    }
    let start = Instant::now();
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let probs = softmax(&model.predict(&normalize_batch(&refs, None, norm)?)?)?;
        for (sample, row) in chunk.iter().zip(probs.data().chunks(2)) {
            let pred = if row[MALIGNANT] > row[BENIGN] {
                MALIGNANT
            } else {
                BENIGN
            };
            predictions.push(Prediction {
                id: sample.id.clone(),
                label: sample.label,
                pred,
                score_malignant: row[MALIGNANT] as f64,
            });
        }
    }
    let labels: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let preds: Vec<usize> = predictions.iter().map(|p| p.pred).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.score_malignant).collect();
    let mut report = MetricsReport::from_predictions(&preds, &labels, &scores, seed)?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    let roc = roc_curve(&scores, &labels, MALIGNANT)?;
    Ok(Evaluation {
        report,
        predictions,
        roc,
    })
}
