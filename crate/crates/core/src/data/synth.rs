use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// Intensity model of the synthetic lesion images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub background: f64,
    pub texture_std: f64,
    pub lesion_offset: f64,
    pub max_ellipses: usize,
    /// Accepted range of the foreground fraction; draws outside are redrawn.
    pub min_fraction: f64,
    pub max_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            background: 0.2,
            texture_std: 0.05,
            lesion_offset: 0.4,
            max_ellipses: 2,
            min_fraction: 0.01,
            max_fraction: 0.30,
        }
    }
}

/// A filled ellipse in pixel coordinates; pixel `(x, y)` is sampled at its
/// centre `(x + 0.5, y + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl Ellipse {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.semi_x;
        let v = (-dx * s + dy * c) / self.semi_y;
        u * u + v * v <= 1.0
    }

    fn random(size: usize, rng: &mut RngStream) -> Self {
        let s = size as f64;
        Self {
            cx: rng.uniform(0.25, 0.75) * s,
            cy: rng.uniform(0.25, 0.75) * s,
            semi_x: rng.uniform(0.06, 0.2) * s,
            semi_y: rng.uniform(0.06, 0.2) * s,
            angle: rng.uniform(0.0, std::f64::consts::PI),
        }
    }
}

/// One image with its generating ellipses.
pub fn synth_sample(id: String, size: usize, cfg: &SynthConfig, rng: &mut RngStream) -> Result<(Sample, Vec<Ellipse>)> {
    if size == 0 {
        return Err(Error::invalid("gen_synthetic", "size must be positive"));
    }
    let mut attempts = 0;
    let (ellipses, mask) = loop {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::invalid(
                "gen_synthetic",
                format!("no draw within mask fraction [{}, {}]", cfg.min_fraction, cfg.max_fraction),
            ));
        }
        let count = 1 + rng.below(cfg.max_ellipses.max(1));
        let ellipses: Vec<Ellipse> = (0..count).map(|_| Ellipse::random(size, rng)).collect();
        let mask: Vec<f32> = (0..size * size)
            .map(|i| {
                let (x, y) = (i % size, i / size);
                f32::from(u8::from(ellipses.iter().any(|e| e.contains(x, y))))
            })
            .collect();
        let frac = mask.iter().map(|&v| f64::from(v)).sum::<f64>() / mask.len() as f64;
        if (cfg.min_fraction..=cfg.max_fraction).contains(&frac) {
            break (ellipses, mask);
        }
    };
    let image: Vec<f32> = mask
        .iter()
        .map(|&m| {
            let noise: f64 = rng.normal();
            let v = cfg.background + cfg.texture_std * noise + cfg.lesion_offset * f64::from(m);
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    let sample = Sample::new(id, Tensor::new([1, size, size], image)?, Tensor::new([1, size, size], mask)?)?;
    Ok((sample, ellipses))
}

/// `n` images of `size × size` with 1 to `max_ellipses` lesions each.
///
/// Sample `i` draws from `rng.fork(i)`, so the output does not depend on
/// the number of worker threads.
pub fn gen_synthetic(n: usize, size: usize, cfg: &SynthConfig, rng: &RngStream) -> Result<Vec<Sample>> {
    (0..n)
        .into_par_iter()
        .map(|i| synth_sample(format!("synth_{i:05}"), size, cfg, &mut rng.fork(i as u64)).map(|(s, _)| s))
        .collect()
}
