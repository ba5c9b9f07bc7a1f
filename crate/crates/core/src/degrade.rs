//! Image corruptions applied before inference: Gaussian blur, additive
//! Rayleigh noise and brightness/contrast shifts. Images are intensities in
//! `[0, 1]`, shaped `[H, W]` or `[C, H, W]` (each plane handled alone).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// Truncation radius of the sampled kernel in units of `sigma`.
pub const KERNEL_RADIUS_SIGMAS: f64 = 3.0;

/// One corruption with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DegradationSpec {
    /// Identity; the baseline row of a report.
    Clean,
    Blur { sigma: f64 },
    /// Additive Rayleigh noise of scale `sigma`, keyed by `seed`.
    Rician {
        sigma: f64,
        #[serde(default)]
        seed: u64,
    },
    BrightnessContrast { delta: f64, gain: f64 },
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DegradationSpec::Clean => true,
            DegradationSpec::Blur { sigma } | DegradationSpec::Rician { sigma, .. } => sigma > 0.0 && sigma.is_finite(),
            DegradationSpec::BrightnessContrast { delta, gain } => gain > 0.0 && gain.is_finite() && delta.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("DegradationSpec", format!("invalid parameters in {self:?}")))
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DegradationSpec::Clean => "clean",
            DegradationSpec::Blur { .. } => "blur",
            DegradationSpec::Rician { .. } => "rician",
            DegradationSpec::BrightnessContrast { .. } => "brightness_contrast",
        }
    }

    /// The severity parameter: sigma for blur and noise, gain for contrast.
    pub fn param(&self) -> f64 {
        match *self {
            DegradationSpec::Clean => 0.0,
            DegradationSpec::Blur { sigma } | DegradationSpec::Rician { sigma, .. } => sigma,
            DegradationSpec::BrightnessContrast { gain, .. } => gain,
        }
    }

    /// Applies the corruption to image number `index` of a set. Noise for
    /// image `index` comes from its own stream, so the result does not depend
    /// on which other images are processed.
    pub fn apply(&self, image: &Tensor<f32>, index: u64) -> Result<Tensor<f32>> {
        self.validate()?;
        match *self {
            DegradationSpec::Clean => Ok(image.clone()),
            DegradationSpec::Blur { sigma } => gaussian_blur(image, sigma),
            DegradationSpec::Rician { sigma, seed } => {
                rician_noise_apply(image, sigma, &mut RngStream::new(seed, 0).fork(index))
            }
            DegradationSpec::BrightnessContrast { delta, gain } => brightness_contrast(image, delta, gain),
        }
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DegradationSpec::Clean => write!(f, "clean"),
            DegradationSpec::Blur { sigma } => write!(f, "blur_s{sigma}"),
            DegradationSpec::Rician { sigma, .. } => write!(f, "rician_s{sigma}"),
            DegradationSpec::BrightnessContrast { delta, gain } => write!(f, "bc_d{delta}_g{gain}"),
        }
    }
}

/// The continuous isotropic density `exp(−(x² + y²) / 2σ²) / (2πσ²)`.
pub fn gaussian_density(x: f64, y: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    (-(x * x + y * y) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2)
}

/// Square Gaussian kernel of radius `ceil(3σ)`: the density sampled at
/// integer offsets, renormalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Result<Tensor<f64>> {
    let g = gaussian_kernel_1d(sigma)?;
    let k = g.len();
    Ok(Tensor::from_fn([k, k], |i| g[i / k] * g[i % k]))
}

/// The normalized 1-D factor of [`gaussian_kernel`].
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("gaussian_kernel", format!("sigma must be > 0, got {sigma}")));
    }
    let r = (KERNEL_RADIUS_SIGMAS * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r).map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// Maps an out-of-range index back into `0..n` by mirroring about the
/// edges, with the edge sample repeated (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn planes(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape("degrade", "image", "[H, W] or [C, H, W]", format!("{:?}", image.shape()))),
    }
}

/// Separable Gaussian blur with mirrored borders.
///
/// The 2-D kernel is the outer product of the 1-D one, so two passes give
/// the same result as the full convolution. Accumulation is in `f64`.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let g = gaussian_kernel_1d(sigma)?;
    let r = (g.len() / 2) as i64;
    let (c, h, w) = planes(image)?;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    let mut rows = vec![0.0f64; h * w];
    for p in 0..c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = g
                    .iter()
                    .enumerate()
                    .map(|(k, &gk)| gk * f64::from(plane[y * w + reflect(x as i64 + k as i64 - r, w)]))
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = g
                    .iter()
                    .enumerate()
                    .map(|(k, &gk)| gk * rows[reflect(y as i64 + k as i64 - r, h) * w + x])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// One Rayleigh draw `sqrt(X² + Y²)` with `X, Y ~ N(0, σ²)`.
pub fn rayleigh(sigma: f64, rng: &mut RngStream) -> f64 {
    let x: f64 = rng.normal();
    let y: f64 = rng.normal();
    sigma * x.hypot(y)
}

pub fn rayleigh_sample(sigma: f64, n: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("rayleigh_sample", format!("sigma must be > 0, got {sigma}")));
    }
    Ok((0..n).map(|_| rayleigh(sigma, rng)).collect())
}

/// Adds an independent Rayleigh draw to every pixel and clamps to `[0, 1]`.
pub fn rician_noise_apply(image: &Tensor<f32>, sigma: f64, rng: &mut RngStream) -> Result<Tensor<f32>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("rician_noise_apply", format!("sigma must be > 0, got {sigma}")));
    }
    planes(image)?;
    let data = image
        .data()
        .iter()
        .map(|&v| (f64::from(v) + rayleigh(sigma, rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// `clamp(gain · (I − 0.5) + 0.5 + delta, 0, 1)`.
pub fn brightness_contrast(image: &Tensor<f32>, delta: f64, gain: f64) -> Result<Tensor<f32>> {
    if !(gain > 0.0 && gain.is_finite() && delta.is_finite()) {
        return Err(Error::invalid("brightness_contrast", format!("need gain > 0 and finite delta, got {gain}, {delta}")));
    }
    planes(image)?;
    Ok(image.map(|v| (gain * (f64::from(v) - 0.5) + 0.5 + delta).clamp(0.0, 1.0) as f32))
}
