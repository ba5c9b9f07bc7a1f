//! Monte Carlo predictive uncertainty.
//!
//! `T` stochastic passes give probability maps `ŷ_t` and variance maps
//! `σ̂²_t`. The predictive variance splits into
//!
//! * `term1 = (1/T) Σ (ŷ_t − ȳ)²`, the spread of the pass means, and
//! * `term2 = (1/T) Σ σ̂²_t`, the average predicted variance,
//!
//! with `total = term1 + term2`. Which term is called aleatoric and which
//! epistemic is a naming choice, see [`LabelConvention`].

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::LayerMode;
use crate::data::{save_image, Sample};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, write_tensor, RngStream, Tensor};
use crate::unet::ModelGraph;

/// Units of the predicted variance before it is averaged into `term2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSpace {
    /// Delta-method map to probability units: `(p(1−p))² · exp(log_var)`.
    #[default]
    Probability,
    /// The raw logit-space variance `exp(log_var)`.
    Logit,
}

/// Names attached to `term1` and `term2`. Serialized as `paper` and
/// `kendall_gal`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelConvention {
    /// `term1` aleatoric, `term2` epistemic.
    #[default]
    #[serde(rename = "paper")]
    SpreadAleatoric,
    /// `term1` epistemic, `term2` aleatoric.
    #[serde(rename = "kendall_gal")]
    SpreadEpistemic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    /// Number of passes `T`.
    pub passes: usize,
    pub seed: u64,
    pub variance_space: VarianceSpace,
    pub label_convention: LabelConvention,
    /// How variational layers draw weights: `sample` (one kernel per pass)
    /// or `train` (the training estimator).
    pub layer_mode: LayerMode,
    /// Images per forward call.
    pub batch_size: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            passes: 20,
            seed: 0,
            variance_space: VarianceSpace::Probability,
            label_convention: LabelConvention::SpreadAleatoric,
            layer_mode: LayerMode::Sample,
            batch_size: 8,
        }
    }
}

/// One pass for one image: probability and variance maps, `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct McSample {
    pub prob: Tensor<f64>,
    pub var: Tensor<f64>,
}

/// Runs `cfg.passes` stochastic passes over a set of `[1, H, W]` images.
///
/// Pass `t` draws from stream `(cfg.seed, t)`, so the result does not depend
/// on batching, pass order or thread count. Returns `out[image][pass]`.
pub fn mc_predict(model: &ModelGraph<f32>, images: &[&Tensor<f32>], cfg: &McConfig) -> Result<Vec<Vec<McSample>>> {
    const OP: &str = "mc_predict";
    if cfg.passes == 0 {
        return Err(Error::invalid(OP, "need at least one pass"));
    }
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let shape = first.shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::shape(OP, "image", "[1, H, W]", format!("{shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if let Some(bad) = images.iter().find(|t| t.shape() != shape.as_slice()) {
        return Err(Error::shape(OP, "image", format!("{shape:?}"), format!("{:?}", bad.shape())));
    }
    let plane = h * w;
    let batch = cfg.batch_size.max(1);
    let per_pass: Vec<Vec<McSample>> = (0..cfg.passes)
        .into_par_iter()
        .map(|t| {
            let rng = RngStream::new(cfg.seed, t as u64);
            let mut out = Vec::with_capacity(images.len());
            for chunk in images.chunks(batch) {
                let mut data = Vec::with_capacity(chunk.len() * plane);
                for img in chunk {
                    data.extend_from_slice(img.data());
                }
                let y = model.predict(&Tensor::new([chunk.len(), 1, h, w], data)?, cfg.layer_mode, &rng)?;
                for i in 0..chunk.len() {
                    let base = 2 * i * plane;
                    let logits = &y.data()[base..base + plane];
                    let log_var = &y.data()[base + plane..base + 2 * plane];
                    let prob: Vec<f64> = logits.iter().map(|&l| sigmoid(f64::from(l))).collect();
                    let var = prob
                        .iter()
                        .zip(log_var)
                        .map(|(&p, &v)| {
                            let s2 = f64::from(v).exp();
                            match cfg.variance_space {
                                VarianceSpace::Probability => (p * (1.0 - p)).powi(2) * s2,
                                VarianceSpace::Logit => s2,
                            }
                        })
                        .collect();
                    out.push(McSample {
                        prob: Tensor::new([h, w], prob)?,
                        var: Tensor::new([h, w], var)?,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut by_image: Vec<Vec<McSample>> = (0..images.len()).map(|_| Vec::with_capacity(cfg.passes)).collect();
    for pass in per_pass {
        for (slot, s) in by_image.iter_mut().zip(pass) {
            slot.push(s);
        }
    }
    Ok(by_image)
}

/// Pixelwise mean of the pass probabilities.
pub fn mean_probability(samples: &[McSample]) -> Result<Tensor<f64>> {
    let first = samples.first().ok_or_else(|| Error::invalid("mean_probability", "no samples"))?;
    let n = first.prob.numel();
    let mut acc = vec![0.0; n];
    for s in samples {
        if s.prob.shape() != first.prob.shape() {
            return Err(Error::shape("mean_probability", "map", format!("{:?}", first.prob.shape()), format!("{:?}", s.prob.shape())));
        }
        for (a, &p) in acc.iter_mut().zip(s.prob.data()) {
            *a += p;
        }
    }
    let t = samples.len() as f64;
    Tensor::new(first.prob.shape().to_vec(), acc.into_iter().map(|a| a / t).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyResult {
    pub mean: Tensor<f64>,
    pub term1: Tensor<f64>,
    pub term2: Tensor<f64>,
    pub total: Tensor<f64>,
    pub labels: LabelConvention,
}

impl UncertaintyResult {
    pub fn aleatoric(&self) -> &Tensor<f64> {
        match self.labels {
            LabelConvention::SpreadAleatoric => &self.term1,
            LabelConvention::SpreadEpistemic => &self.term2,
        }
    }

    pub fn epistemic(&self) -> &Tensor<f64> {
        match self.labels {
            LabelConvention::SpreadAleatoric => &self.term2,
            LabelConvention::SpreadEpistemic => &self.term1,
        }
    }
}

/// Splits `T ≥ 2` passes into the two variance terms.
///
/// The mean is subtracted before squaring, so `term1 ≥ 0` holds in floating
/// point. Each pixel's sums run over the passes in the order given, which is
/// pass order from [`mc_predict`].
pub fn decompose_uncertainty(samples: &[McSample], labels: LabelConvention) -> Result<UncertaintyResult> {
    const OP: &str = "decompose_uncertainty";
    if samples.len() < 2 {
        return Err(Error::invalid(OP, format!("need T >= 2 passes, got {}", samples.len())));
    }
    let mean = mean_probability(samples)?;
    let shape = mean.shape().to_vec();
    let t = samples.len() as f64;
    let n = mean.numel();
    // Deviations are taken from the first pass, then centred, so identical
    // passes give exactly zero.
    let origin = samples[0].prob.data();
    let mut shift = vec![0.0; n];
    for s in samples {
        for (m, (&p, &o)) in shift.iter_mut().zip(s.prob.data().iter().zip(origin)) {
            *m += p - o;
        }
    }
    shift.iter_mut().for_each(|m| *m /= t);
    let (mut t1, mut t2) = (vec![0.0; n], vec![0.0; n]);
    for s in samples {
        if s.var.shape() != shape.as_slice() {
            return Err(Error::shape(OP, "variance map", format!("{shape:?}"), format!("{:?}", s.var.shape())));
        }
        if s.var.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid(OP, "variance maps must be finite and non-negative"));
        }
        for i in 0..n {
            let d = s.prob.data()[i] - origin[i] - shift[i];
            t1[i] += d * d;
            t2[i] += s.var.data()[i];
        }
    }
    let term1: Vec<f64> = t1.into_iter().map(|v| v / t).collect();
    let term2: Vec<f64> = t2.into_iter().map(|v| v / t).collect();
    let total: Vec<f64> = term1.iter().zip(&term2).map(|(a, b)| a + b).collect();
    Ok(UncertaintyResult {
        mean,
        term1: Tensor::new(shape.clone(), term1)?,
        term2: Tensor::new(shape.clone(), term2)?,
        total: Tensor::new(shape, total)?,
        labels,
    })
}

/// Spatial means of the uncertainty maps. `total` is formed as
/// `term1 + term2`, so the scalars add up exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label_convention: LabelConvention,
    pub pixels: usize,
    pub mean_probability: f64,
    pub term1: f64,
    pub term2: f64,
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

/// Averages the maps over all pixels, or over `region` (non-zero pixels) if given.
pub fn summarize(result: &UncertaintyResult, region: Option<&Tensor<f32>>) -> Result<Summary> {
    const OP: &str = "summarize";
    let keep: Vec<bool> = match region {
        None => vec![true; result.total.numel()],
        Some(m) => {
            if m.numel() != result.total.numel() {
                return Err(Error::shape(OP, "region", result.total.numel(), m.numel()));
            }
            m.data().iter().map(|&v| v != 0.0).collect()
        }
    };
    let pixels = keep.iter().filter(|&&k| k).count();
    if pixels == 0 {
        return Err(Error::invalid(OP, "empty region"));
    }
    let mean = |t: &Tensor<f64>| {
        t.data().iter().zip(&keep).filter(|(_, &k)| k).map(|(&v, _)| v).sum::<f64>() / pixels as f64
    };
    let (term1, term2) = (mean(&result.term1), mean(&result.term2));
    let (aleatoric, epistemic) = match result.labels {
        LabelConvention::SpreadAleatoric => (term1, term2),
        LabelConvention::SpreadEpistemic => (term2, term1),
    };
    Ok(Summary {
        label_convention: result.labels,
        pixels,
        mean_probability: mean(&result.mean),
        term1,
        term2,
        total: term1 + term2,
        aleatoric,
        epistemic,
    })
}

/// Spread of the scalar estimates at one `T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: usize,
    pub repeats: usize,
    pub mean_term1: f64,
    pub mean_term2: f64,
    pub var_term1: f64,
    pub var_term2: f64,
}

/// Variance across `repeats` independent estimates of the mean `term1` and
/// `term2`, for each `T` in `t_values`.
///
/// Repeat `r` draws its passes with seed `fork(r)` of `cfg.seed`; the
/// estimate at `T` uses that repeat's first `T` passes.
pub fn t_sweep(
    model: &ModelGraph<f32>,
    images: &[&Tensor<f32>],
    t_values: &[usize],
    repeats: usize,
    cfg: &McConfig,
) -> Result<Vec<SweepRow>> {
    const OP: &str = "t_sweep";
    if repeats < 2 {
        return Err(Error::invalid(OP, format!("need at least 2 repeats, got {repeats}")));
    }
    if images.is_empty() {
        return Err(Error::invalid(OP, "no images"));
    }
    if let Some(&t) = t_values.iter().find(|&&t| t < 2) {
        return Err(Error::invalid(OP, format!("T = {t} is below 2")));
    }
    let t_max = t_values.iter().copied().max().ok_or_else(|| Error::invalid(OP, "no T values"))?;
    let root = RngStream::new(cfg.seed, 0);
    // estimates[r][j] = (term1, term2) at t_values[j]
    let mut estimates = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mc = McConfig {
            passes: t_max,
            seed: root.fork(r as u64).seed(),
            ..cfg.clone()
        };
        let per_image = mc_predict(model, images, &mc)?;
        let mut row = Vec::with_capacity(t_values.len());
        for &t in t_values {
            let (mut a, mut b) = (0.0, 0.0);
            for samples in &per_image {
                let s = summarize(&decompose_uncertainty(&samples[..t], cfg.label_convention)?, None)?;
                a += s.term1;
                b += s.term2;
            }
            row.push((a / images.len() as f64, b / images.len() as f64));
        }
        estimates.push(row);
    }
    let stats = |xs: Vec<f64>| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
    };
    Ok(t_values
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let (mean_term1, var_term1) = stats(estimates.iter().map(|r| r[j].0).collect());
            let (mean_term2, var_term2) = stats(estimates.iter().map(|r| r[j].1).collect());
            SweepRow {
                t,
                repeats,
                mean_term1,
                mean_term2,
                var_term1,
                var_term2,
            }
        })
        .collect())
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Linear scaling used to render a map as an 8-bit heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapScale {
    pub map: String,
    pub min: f64,
    pub max: f64,
}

/// Writes `<name>.tensor` (f32 payload), `<name>.pgm` (min-max scaled) and
/// `<name>.json` (the scaling).
pub fn write_map(map: &Tensor<f64>, dir: impl AsRef<Path>, name: &str) -> Result<HeatmapScale> {
    let dir = dir.as_ref();
    let as_f32: Tensor<f32> = map.cast();
    write_tensor(&as_f32, dir.join(format!("{name}.tensor")))?;
    let (min, max) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = max - min;
    let scaled = map.map(|v| if span > 0.0 { (v - min) / span } else { 0.0 }).cast();
    save_image(&scaled, dir.join(format!("{name}.pgm")))?;
    let scale = HeatmapScale {
        map: name.to_string(),
        min,
        max,
    };
    fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(&scale)?)?;
    Ok(scale)
}

/// Images of a sample list as references, for [`mc_predict`].
pub fn images_of(samples: &[Sample]) -> Vec<&Tensor<f32>> {
    samples.iter().map(|s| &s.image).collect()
}
