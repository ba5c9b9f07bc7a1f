//! Variational free-energy training.
//!
//! The minibatch loss is `β₀ · π_i · KL[q ‖ p] / P + NLL`, where the NLL
//! is averaged over the `P` pixels of the batch. Dividing the KL by `P`
//! keeps the two terms on the same per-pixel scale as a summed
//! likelihood would; [`KlNormalization::None`] drops the division.

mod optim;
mod schedule;
mod train_loop;

use serde::{Deserialize, Serialize};

pub use optim::{Adam, AdamConfig};
pub use schedule::PlateauSchedule;
pub use train_loop::{evaluate, predict_probabilities, train, write_log_csv, LogRow, TrainConfig, TrainOutcome};

use crate::bayes::LayerMode;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Binding, Real, RngStream, Tensor, Var};
use crate::unet::ModelGraph;

/// How the KL weight `π_i` is spread over the `M` minibatches of an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeighting {
    /// `1 / M`
    #[default]
    Uniform,
    /// `2^(M−i) / (2^M − 1)`: early batches carry most of the KL.
    Geometric,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlNormalization {
    /// Divide the KL term by the pixel count of the minibatch.
    #[default]
    PerPixel,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElboConfig {
    pub beta0: f64,
    pub kl_weighting: KlWeighting,
    pub kl_normalization: KlNormalization,
    /// Noise samples `K` of the logit-corrupted likelihood.
    pub likelihood_mc_samples: usize,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            beta0: 1.0,
            kl_weighting: KlWeighting::Uniform,
            kl_normalization: KlNormalization::PerPixel,
            likelihood_mc_samples: 10,
        }
    }
}

impl ElboConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 >= 0.0 && self.beta0.is_finite()) {
            return Err(Error::invalid("ElboConfig", format!("beta0 must be finite and >= 0, got {}", self.beta0)));
        }
        if self.likelihood_mc_samples == 0 {
            return Err(Error::invalid("ElboConfig", "likelihood_mc_samples must be at least 1"));
        }
        Ok(())
    }
}

/// KL weight of minibatch `i` (1-based) out of `m`.
pub fn kl_weight(i: usize, m: usize, weighting: KlWeighting) -> Result<f64> {
    if m == 0 || i == 0 || i > m {
        return Err(Error::invalid("kl_weight", format!("batch index {i} outside 1..={m}")));
    }
    Ok(match weighting {
        KlWeighting::Uniform => 1.0 / m as f64,
        KlWeighting::Geometric => {
            // 2^(m−i) / (2^m − 1) = 2^−i / (1 − 2^−m), finite for any m.
            let half = 0.5f64;
            half.powi(i as i32) / (1.0 - half.powi(m as i32))
        }
    })
}

/// Mean binary cross-entropy of `K` noisy logits `z = l + exp(v/2)·ε_k`.
pub fn heteroscedastic_nll<'t, F: Real>(
    logits: &Var<'t, F>,
    log_var: &Var<'t, F>,
    target: &Tensor<F>,
    k: usize,
    rng: &mut RngStream,
) -> Result<Var<'t, F>> {
    let noise: Vec<Tensor<F>> = (0..k).map(|_| Tensor::randn(logits.shape().to_vec(), rng)).collect();
    heteroscedastic_nll_with(logits, log_var, target, &noise)
}

/// [`heteroscedastic_nll`] with explicit standard-normal draws, one tensor per sample.
pub fn heteroscedastic_nll_with<'t, F: Real>(
    logits: &Var<'t, F>,
    log_var: &Var<'t, F>,
    target: &Tensor<F>,
    noise: &[Tensor<F>],
) -> Result<Var<'t, F>> {
    const OP: &str = "heteroscedastic_nll";
    if noise.is_empty() {
        return Err(Error::invalid(OP, "need at least one noise sample"));
    }
    let shape = logits.shape();
    for (name, s) in [("log_var", log_var.shape()), ("target", target.shape())]
        .into_iter()
        .chain(noise.iter().map(|e| ("noise", e.shape())))
    {
        if s != shape {
            return Err(Error::shape(OP, name, format!("{shape:?}"), format!("{s:?}")));
        }
    }
    if target.data().iter().any(|&y| y != F::zero() && y != F::one()) {
        return Err(Error::invalid(OP, "targets must be 0 or 1"));
    }
    let n = target.numel();
    let scale = 1.0 / (noise.len() * n) as f64;
    let (l, v, y) = (logits.value().data(), log_var.value().data(), target.data());
    let mut total = 0.0f64;
    let mut dl = vec![0.0f64; n];
    let mut dv = vec![0.0f64; n];
    for p in 0..n {
        let (lp, yp) = (l[p].f64(), y[p].f64());
        let s = (0.5 * v[p].f64()).exp();
        for eps in noise {
            let e = eps.data()[p].f64();
            let z = lp + s * e;
            total += softplus(z) - yp * z;
            let r = sigmoid(z) - yp;
            dl[p] += r;
            dv[p] += r * e * s * 0.5;
        }
    }
    let value = total * scale;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{OP} = {value}")));
    }
    let dims = shape.to_vec();
    let to_tensor = move |d: &[f64], g: F| Tensor::new(dims.clone(), d.iter().map(|&x| g * F::lit(x * scale)).collect());
    Ok(logits.tape().record(Tensor::scalar(F::lit(value)), &[logits, log_var], move |g, need| {
        let g = g.data()[0];
        vec![
            need[0].then(|| to_tensor(&dl, g).expect("shape")),
            need[1].then(|| to_tensor(&dv, g).expect("shape")),
        ]
    }))
}

/// Terms of one minibatch objective.
pub struct ElboTerms<'t, F: Real> {
    pub loss: Var<'t, F>,
    pub nll: f64,
    /// Unweighted KL of the whole model.
    pub kl: f64,
}

/// Training-mode forward pass and loss on one minibatch.
///
/// `batch_index` is 1-based out of `num_batches`. `rng` keys the pass: the
/// layers fork their own streams from it and the likelihood noise comes
/// from a dedicated fork.
#[allow(clippy::too_many_arguments)]
pub fn elbo_loss<'t, F: Real>(
    model: &ModelGraph<F>,
    params: &Binding<'t, '_, F>,
    images: &Tensor<F>,
    masks: &Tensor<F>,
    batch_index: usize,
    num_batches: usize,
    cfg: &ElboConfig,
    rng: &RngStream,
) -> Result<ElboTerms<'t, F>> {
    cfg.validate()?;
    let tape = params.tape();
    let out = model.forward(params, &tape.constant(images.clone()), LayerMode::Train, rng)?;
    let logits = out.narrow_channels(0, 1)?;
    let log_var = out.narrow_channels(1, 1)?;
    let nll = heteroscedastic_nll(&logits, &log_var, masks, cfg.likelihood_mc_samples, &mut rng.fork(u64::MAX))?;
    let kl = model.kl_total(params)?;
    let pixels = match cfg.kl_normalization {
        KlNormalization::PerPixel => masks.numel() as f64,
        KlNormalization::None => 1.0,
    };
    let weight = cfg.beta0 * kl_weight(batch_index, num_batches, cfg.kl_weighting)? / pixels;
    let (nll_v, kl_v) = (nll.value().item()?.f64(), kl.value().item()?.f64());
    let loss = nll.add(&kl.scale(F::lit(weight)))?;
    Ok(ElboTerms { loss, nll: nll_v, kl: kl_v })
}
