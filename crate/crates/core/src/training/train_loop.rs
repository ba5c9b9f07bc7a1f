use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{elbo_loss, Adam, AdamConfig, ElboConfig, PlateauSchedule};
use crate::bayes::LayerMode;
use crate::data::{stack, Sample};
use crate::error::{Error, Result};
use crate::metrics::{confusion_counts, SegmentationScores, DEFAULT_THRESHOLD};
use crate::tensor::{sigmoid, Real, RngStream, Tape, Tensor};
use crate::unet::ModelGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub schedule: PlateauSchedule,
    pub elbo: ElboConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 8,
            seed: 0,
            optimizer: AdamConfig::default(),
            schedule: PlateauSchedule::default(),
            elbo: ElboConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("train", "epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train", "batch_size must be at least 1"));
        }
        self.schedule.validate()?;
        self.elbo.validate()
    }
}

/// One epoch of the training log. `f1`/`iou` are validation scores of the
/// posterior-mean network (NaN without a validation set).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub lr: f64,
    pub f1: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    /// Epoch whose parameters were kept (best validation F1, else the last).
    pub best_epoch: usize,
}

pub fn write_log_csv(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Sigmoid of the logit head for each sample, `[1, H, W]` each.
pub fn predict_probabilities(
    model: &ModelGraph<f32>,
    samples: &[Sample],
    mode: LayerMode,
    rng: &RngStream,
    batch_size: usize,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = stack(&refs)?;
        let y = model.predict(&images, mode, rng)?;
        let (n, _, h, w) = y.dims4()?;
        let plane = h * w;
        for i in 0..n {
            let logits = &y.data()[i * 2 * plane..i * 2 * plane + plane];
            out.push(Tensor::new([1, h, w], logits.iter().map(|&l| sigmoid(l)).collect())?);
        }
    }
    Ok(out)
}

/// Mean per-image F1/IoU of the posterior-mean network.
pub fn evaluate(model: &ModelGraph<f32>, samples: &[Sample], batch_size: usize) -> Result<SegmentationScores> {
    let probs = predict_probabilities(model, samples, LayerMode::Frozen, &RngStream::new(0, 0), batch_size)?;
    let counts = probs
        .iter()
        .zip(samples)
        .map(|(p, s)| confusion_counts(p, &s.mask, DEFAULT_THRESHOLD))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentationScores::from_counts(&counts))
}

/// Minimizes the minibatch ELBO with Adam and a plateau schedule.
///
/// Randomness is keyed by `(cfg.seed, epoch, batch)`, so a rerun with the
/// same inputs reproduces the log exactly. The parameters of the epoch with
/// the best validation F1 are restored at the end.
pub fn train(
    model: &mut ModelGraph<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let mut adam = Adam::new(cfg.optimizer.clone())?;
    let mut schedule = cfg.schedule.clone();
    let root = RngStream::new(cfg.seed, 0);
    let num_batches = train_set.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::tensor::ParamStore<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let epoch_rng = root.fork(epoch as u64);
        order.shuffle(&mut epoch_rng.fork(0));
        let lr = adam.lr();
        let (mut loss_sum, mut nll_sum) = (0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (images, masks) = stack(&refs)?;
            let tape = Tape::new();
            let params = model.params.bind(&tape);
            let terms = elbo_loss(model, &params, &images, &masks, b + 1, num_batches, &cfg.elbo, &epoch_rng.fork(1 + b as u64))
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {}", b + 1)),
                    e => e,
                })?;
            let loss = terms.loss.value().item()?.f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {loss} at epoch {epoch}, batch {} (nll {}, kl {})",
                    b + 1,
                    terms.nll,
                    terms.kl
                )));
            }
            let grads = tape.backward(&terms.loss)?;
            let collected = params.collect(&grads);
            drop(params);
            model.params.set_grads(collected);
            adam.step(&mut model.params).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {}", b + 1)),
                e => e,
            })?;
            loss_sum += loss;
            nll_sum += terms.nll;
        }
        let (f1, iou) = if val_set.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let s = evaluate(model, val_set, cfg.batch_size)?;
            (s.mean_f1, s.mean_iou)
        };
        let row = LogRow {
            epoch,
            loss: loss_sum / num_batches as f64,
            nll: nll_sum / num_batches as f64,
            kl: model.kl_value()?,
            lr,
            f1,
            iou,
        };
        if !val_set.is_empty() && best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, model.params.clone()));
        }
        adam.set_lr(schedule.step(row.loss, lr));
        on_epoch(&row);
        log.push(row);
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => cfg.epochs,
    };
    Ok(TrainOutcome { log, best_epoch })
}
