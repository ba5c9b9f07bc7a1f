//! Gaussian variational convolutions.
//!
//! Each kernel weight has an independent posterior `N(mu, softplus(rho)^2)`.
//! Biases stay deterministic point estimates. Three forward modes are
//! available:
//!
//! * **Flipout** (training): one shared perturbation `ΔW = σ ∘ ε` per
//!   minibatch, decorrelated across examples by Rademacher sign vectors
//!   `r_n` (output channels) and `s_n` (input channels):
//!   `y_n = conv(x_n, μ) + r_n ∘ conv(x_n ∘ s_n, ΔW) + b`.
//! * **Reparameterized** sampling: one full kernel `μ + σ ∘ ε` per call,
//!   shared by the whole batch. Used for Monte Carlo inference.
//! * **Frozen**: the posterior mean, no randomness.
//!
//! The KL divergence to a factorized Gaussian prior has the closed form
//! `Σ ln(σ_p/σ) + (σ² + (μ − m_p)²) / (2σ_p²) − 1/2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, softplus_inv, Binding, Padding, ParamId, ParamStore, Real, RngStream, Tensor, Var};

/// Initial posterior standard deviation of every variational weight.
pub const INIT_SIGMA: f64 = 0.05;

/// Factorized Gaussian prior `N(mean, std²)` over each weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mean: f64,
    pub std: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0 && self.std.is_finite() && self.mean.is_finite()) {
            return Err(Error::invalid("PriorSpec", format!("need finite mean and std > 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Posterior parameters of one kernel; `sigma = softplus(rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior<F: Real = f32> {
    pub mu: Tensor<F>,
    pub rho: Tensor<F>,
}

impl<F: Real> GaussianPosterior<F> {
    pub fn new(mu: Tensor<F>, rho: Tensor<F>) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::shape(
                "GaussianPosterior",
                "rho",
                format!("{:?}", mu.shape()),
                format!("{:?}", rho.shape()),
            ));
        }
        Ok(Self { mu, rho })
    }

    pub fn sigma(&self) -> Tensor<F> {
        self.rho.map(softplus)
    }

    /// `mu + sigma ∘ ε` with ε ~ N(0, I).
    pub fn sample(&self, rng: &mut RngStream) -> Tensor<F> {
        let eps = Tensor::randn(self.mu.shape().to_vec(), rng);
        self.sample_with(&eps).expect("shapes match")
    }

    pub fn sample_with(&self, eps: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = crate::Tape::no_grad();
        let w = sample_weights_with(&tape.constant(self.mu.clone()), &tape.constant(self.rho.clone()), eps)?;
        Ok(w.value().clone())
    }

    pub fn kl(&self, prior: &PriorSpec) -> Result<f64> {
        let tape = crate::Tape::no_grad();
        let kl = kl_divergence(&tape.constant(self.mu.clone()), &tape.constant(self.rho.clone()), prior)?;
        Ok(kl.value().item()?.f64())
    }
}

/// Reparameterized draw `mu + softplus(rho) ∘ ε`, differentiable in both.
pub fn sample_weights<'t, F: Real>(mu: &Var<'t, F>, rho: &Var<'t, F>, rng: &mut RngStream) -> Result<Var<'t, F>> {
    let eps = Tensor::randn(mu.shape().to_vec(), rng);
    sample_weights_with(mu, rho, &eps)
}

/// [`sample_weights`] with caller-supplied noise.
pub fn sample_weights_with<'t, F: Real>(mu: &Var<'t, F>, rho: &Var<'t, F>, eps: &Tensor<F>) -> Result<Var<'t, F>> {
    perturbation(rho, eps)?.add(mu)
}

/// `softplus(rho) ∘ ε`.
fn perturbation<'t, F: Real>(rho: &Var<'t, F>, eps: &Tensor<F>) -> Result<Var<'t, F>> {
    if eps.shape() != rho.shape() {
        return Err(Error::shape(
            "sample_weights",
            "eps",
            format!("{:?}", rho.shape()),
            format!("{:?}", eps.shape()),
        ));
    }
    rho.softplus().mul(&rho.tape().constant(eps.clone()))
}

/// Closed-form `KL[N(mu, softplus(rho)²) || prior]` summed over all weights.
pub fn kl_divergence<'t, F: Real>(mu: &Var<'t, F>, rho: &Var<'t, F>, prior: &PriorSpec) -> Result<Var<'t, F>> {
    const OP: &str = "kl_divergence";
    prior.validate()?;
    if mu.shape() != rho.shape() {
        return Err(Error::shape(OP, "rho", format!("{:?}", mu.shape()), format!("{:?}", rho.shape())));
    }
    if !mu.value().all_finite() || !rho.value().all_finite() {
        return Err(Error::NonFinite("posterior parameters".into()));
    }
    let (pm, ps) = (prior.mean, prior.std);
    let inv_var = 1.0 / (ps * ps);
    let mut total = 0.0f64;
    for (&m, &r) in mu.value().data().iter().zip(rho.value().data()) {
        let s = softplus(r).f64();
        let d = m.f64() - pm;
        total += (ps / s).ln() + 0.5 * (s * s + d * d) * inv_var - 0.5;
    }
    let (mu_v, rho_v) = (mu.value().clone(), rho.value().clone());
    Ok(mu.tape().record(Tensor::scalar(F::lit(total)), &[mu, rho], move |g, need| {
        let g = g.data()[0];
        let gmu = need[0].then(|| mu_v.map(|m| g * F::lit((m.f64() - pm) * inv_var)));
        let grho = need[1].then(|| {
            rho_v.map(|r| {
                let s = softplus(r).f64();
                g * F::lit((-1.0 / s + s * inv_var) * sigmoid(r).f64())
            })
        });
        vec![gmu, grho]
    }))
}

/// How a variational layer turns its posterior into a kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Shared perturbation with per-example sign flips.
    Flipout,
    /// One sampled kernel shared by the batch.
    Reparam,
}

/// Flipout convolution with explicit noise and sign vectors.
///
/// `eps` matches the kernel, `r` is `[N, Cout, 1, 1]`, `s` is
/// `[N, Cin, 1, 1]`, both with ±1 entries.
#[allow(clippy::too_many_arguments)]
pub fn flipout_conv<'t, F: Real>(
    x: &Var<'t, F>,
    mu: &Var<'t, F>,
    rho: &Var<'t, F>,
    bias: Option<&Var<'t, F>>,
    eps: &Tensor<F>,
    r: &Tensor<F>,
    s: &Tensor<F>,
    padding: Padding,
) -> Result<Var<'t, F>> {
    const OP: &str = "flipout_forward";
    let (n, cin, _, _) = x.value().dims4()?;
    if n == 0 {
        return Err(Error::invalid(OP, "empty batch"));
    }
    let cout = mu.shape()[0];
    if r.shape() != [n, cout, 1, 1] {
        return Err(Error::shape(OP, "r", format!("[{n}, {cout}, 1, 1]"), format!("{:?}", r.shape())));
    }
    if s.shape() != [n, cin, 1, 1] {
        return Err(Error::shape(OP, "s", format!("[{n}, {cin}, 1, 1]"), format!("{:?}", s.shape())));
    }
    let tape = x.tape();
    let mean = x.conv2d(mu, bias, 1, padding)?;
    let delta = perturbation(rho, eps)?;
    let flipped = x.mul(&tape.constant(s.clone()))?;
    let noise = flipped.conv2d(&delta, None, 1, padding)?.mul(&tape.constant(r.clone()))?;
    mean.add(&noise)
}

/// A 2D convolution whose kernel is a Gaussian posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalConv2d {
    pub name: String,
    pub mu: ParamId,
    pub rho: ParamId,
    pub bias: ParamId,
    pub prior: PriorSpec,
    pub estimator: Estimator,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    /// Label that keys this layer's random stream within a pass.
    pub stream_label: u64,
}

/// Forward behaviour of a variational layer for one pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    /// Use the layer's training estimator.
    Train,
    /// One reparameterized kernel per pass.
    Sample,
    /// Posterior mean.
    Frozen,
}

impl VariationalConv2d {
    /// Registers `mu` (He-uniform), `rho` (`softplus⁻¹(0.05)`) and a zero
    /// bias in `store`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        prior: PriorSpec,
        stream_label: u64,
        rng: &mut RngStream,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel_size, kernel_size];
        let bound = (6.0 / (in_channels * kernel_size * kernel_size) as f64).sqrt();
        let mu = store.add(format!("{name}.mu"), Tensor::rand_uniform(shape, -bound, bound, rng));
        let rho = store.add(format!("{name}.rho"), Tensor::full(shape, softplus_inv(F::lit(INIT_SIGMA))));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Self {
            name: name.to_string(),
            mu,
            rho,
            bias,
            prior,
            estimator: Estimator::Flipout,
            in_channels,
            out_channels,
            kernel_size,
            stream_label,
        }
    }

    pub fn posterior<F: Real>(&self, store: &ParamStore<F>) -> GaussianPosterior<F> {
        GaussianPosterior {
            mu: store.value(self.mu).clone(),
            rho: store.value(self.rho).clone(),
        }
    }

    /// Runs the layer. `rng` is the pass-level stream; the layer forks its
    /// own child from it so draws do not depend on layer evaluation order.
    pub fn forward<'t, F: Real>(
        &self,
        params: &Binding<'t, '_, F>,
        x: &Var<'t, F>,
        mode: LayerMode,
        rng: &RngStream,
    ) -> Result<Var<'t, F>> {
        let mut rng = rng.fork(self.stream_label);
        match (mode, self.estimator) {
            (LayerMode::Frozen, _) => self.frozen_forward(params, x),
            (LayerMode::Train, Estimator::Flipout) => self.flipout_forward(params, x, &mut rng),
            (LayerMode::Train, Estimator::Reparam) | (LayerMode::Sample, _) => self.reparam_forward(params, x, &mut rng),
        }
    }

    pub fn flipout_forward<'t, F: Real>(
        &self,
        params: &Binding<'t, '_, F>,
        x: &Var<'t, F>,
        rng: &mut RngStream,
    ) -> Result<Var<'t, F>> {
        let n = x.shape().first().copied().unwrap_or(0);
        let eps = Tensor::randn(self.kernel_shape(), rng);
        let r = Tensor::from_fn([n, self.out_channels, 1, 1], |_| rng.rademacher());
        let s = Tensor::from_fn([n, self.in_channels, 1, 1], |_| rng.rademacher());
        flipout_conv(
            x,
            &params.var(self.mu),
            &params.var(self.rho),
            Some(&params.var(self.bias)),
            &eps,
            &r,
            &s,
            Padding::Same,
        )
    }

    pub fn reparam_forward<'t, F: Real>(
        &self,
        params: &Binding<'t, '_, F>,
        x: &Var<'t, F>,
        rng: &mut RngStream,
    ) -> Result<Var<'t, F>> {
        let w = sample_weights(&params.var(self.mu), &params.var(self.rho), rng)?;
        x.conv2d(&w, Some(&params.var(self.bias)), 1, Padding::Same)
    }

    /// Deterministic convolution with the posterior mean; consumes no noise.
    pub fn frozen_forward<'t, F: Real>(&self, params: &Binding<'t, '_, F>, x: &Var<'t, F>) -> Result<Var<'t, F>> {
        x.conv2d(&params.var(self.mu), Some(&params.var(self.bias)), 1, Padding::Same)
    }

    pub fn kl<'t, F: Real>(&self, params: &Binding<'t, '_, F>) -> Result<Var<'t, F>> {
        kl_divergence(&params.var(self.mu), &params.var(self.rho), &self.prior)
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    /// `2 · |kernel| + |bias|`.
    pub fn param_count(&self) -> usize {
        2 * self.kernel_shape().iter().product::<usize>() + self.out_channels
    }
}
