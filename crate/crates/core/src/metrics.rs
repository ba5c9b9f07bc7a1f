//! Overlap metrics for binary segmentation and the degradation report.

use std::ops::{Add, AddAssign};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::unet::ModelGraph;
use crate::uq::{decompose_uncertainty, mc_predict, summarize, McConfig};

/// Probability at or above which a pixel counts as foreground.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel counts of a binarized prediction against a binary truth mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2tp / (2tp + fp + fn)`; 1 when both masks are empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// `tp / (tp + fp + fn)`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        match self.total() {
            0 => 1.0,
            n => (self.tp + self.tn) as f64 / n as f64,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

pub fn f1_score(c: &ConfusionCounts) -> f64 {
    c.f1()
}

pub fn iou(c: &ConfusionCounts) -> f64 {
    c.iou()
}

/// Counts pixels after thresholding `pred` (`p >= threshold` is foreground).
pub fn confusion_counts(pred: &Tensor<f32>, truth: &Tensor<f32>, threshold: f64) -> Result<ConfusionCounts> {
    const OP: &str = "confusion_counts";
    if pred.shape() != truth.shape() {
        return Err(Error::shape(OP, "shape", format!("{:?}", truth.shape()), format!("{:?}", pred.shape())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let positive = f64::from(p) >= threshold;
        match (positive, t) {
            (true, 1.0) => c.tp += 1,
            (true, 0.0) => c.fp += 1,
            (false, 1.0) => c.fn_ += 1,
            (false, 0.0) => c.tn += 1,
            _ => return Err(Error::invalid(OP, format!("truth value {t} is not binary"))),
        }
    }
    Ok(c)
}

/// Per-image scores averaged over a set of images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub mean_f1: f64,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

impl SegmentationScores {
    pub fn from_counts(per_image: &[ConfusionCounts]) -> Self {
        let n = per_image.len().max(1) as f64;
        let pooled = per_image.iter().fold(ConfusionCounts::default(), |a, &b| a + b);
        Self {
            mean_f1: per_image.iter().map(ConfusionCounts::f1).sum::<f64>() / n,
            mean_iou: per_image.iter().map(ConfusionCounts::iou).sum::<f64>() / n,
            pixel_accuracy: pooled.pixel_accuracy(),
        }
    }
}

/// One row of the degradation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub spec_id: String,
    pub kind: String,
    pub param: String,
    pub mean_total_unc: f64,
    pub pct_change_unc: f64,
    pub mean_f1: f64,
    pub mean_iou: f64,
}

pub fn write_report_csv(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Scores of the MC-averaged prediction on one degraded copy of a test set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradedScores {
    /// Spatial-mean total uncertainty averaged over images.
    pub mean_total_unc: f64,
    pub mean_term1: f64,
    pub mean_term2: f64,
    pub scores: SegmentationScores,
}

/// Corrupts every test image with `spec`, runs MC inference and scores the
/// mean probability at [`DEFAULT_THRESHOLD`].
pub fn evaluate_degraded(
    model: &ModelGraph<f32>,
    test: &[Sample],
    spec: &DegradationSpec,
    mc: &McConfig,
) -> Result<DegradedScores> {
    if test.is_empty() {
        return Err(Error::invalid("degradation_report", "empty test set"));
    }
    let degraded = test
        .par_iter()
        .enumerate()
        .map(|(i, s)| spec.apply(&s.image, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<f32>> = degraded.iter().collect();
    let passes = mc_predict(model, &refs, mc)?;
    let per_image = passes
        .par_iter()
        .zip(test)
        .map(|(samples, s)| {
            let r = decompose_uncertainty(samples, mc.label_convention)?;
            let summary = summarize(&r, None)?;
            // binarize in f64 so rounding to f32 cannot move a pixel across the threshold
            let hard = r.mean.data().iter().map(|&p| if p >= DEFAULT_THRESHOLD { 1.0 } else { 0.0 }).collect();
            let counts = confusion_counts(&Tensor::new(s.mask.shape().to_vec(), hard)?, &s.mask, DEFAULT_THRESHOLD)?;
            Ok((summary, counts))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let counts: Vec<ConfusionCounts> = per_image.iter().map(|(_, c)| *c).collect();
    Ok(DegradedScores {
        mean_total_unc: per_image.iter().map(|(s, _)| s.total).sum::<f64>() / n,
        mean_term1: per_image.iter().map(|(s, _)| s.term1).sum::<f64>() / n,
        mean_term2: per_image.iter().map(|(s, _)| s.term2).sum::<f64>() / n,
        scores: SegmentationScores::from_counts(&counts),
    })
}

/// One row per spec, with the uncertainty change relative to the clean test
/// set in percent.
///
/// Every spec reuses the MC seed of `mc`, so rows differ only through the
/// corruption. The clean baseline is the first `clean` spec in the list, or
/// an extra evaluation if there is none.
pub fn degradation_report(
    model: &ModelGraph<f32>,
    test: &[Sample],
    specs: &[DegradationSpec],
    mc: &McConfig,
) -> Result<Vec<ReportRow>> {
    if test.is_empty() {
        return Err(Error::invalid("degradation_report", "empty test set"));
    }
    for s in specs {
        s.validate()?;
    }
    let results = specs
        .iter()
        .map(|s| evaluate_degraded(model, test, s, mc))
        .collect::<Result<Vec<_>>>()?;
    let baseline = match specs.iter().position(|s| *s == DegradationSpec::Clean) {
        Some(i) => results[i].mean_total_unc,
        None => evaluate_degraded(model, test, &DegradationSpec::Clean, mc)?.mean_total_unc,
    };
    Ok(specs
        .iter()
        .zip(&results)
        .map(|(spec, r)| ReportRow {
            spec_id: spec.to_string(),
            kind: spec.kind().to_string(),
            param: spec.param().to_string(),
            mean_total_unc: r.mean_total_unc,
            pct_change_unc: 100.0 * (r.mean_total_unc - baseline) / baseline,
            mean_f1: r.scores.mean_f1,
            mean_iou: r.scores.mean_iou,
        })
        .collect())
}
