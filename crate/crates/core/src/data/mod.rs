//! Samples, splits, the synthetic generator and on-disk formats.

mod checkpoint;
mod image_io;
mod synth;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_VERSION};
pub use image_io::{
    load_image, load_mask, load_pair, read_dataset, save_image, save_mask, write_dataset, DatasetManifest,
    ManifestEntry, DATASET_VERSION,
};
pub use synth::{gen_synthetic, synth_sample, Ellipse, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// One grayscale image and its binary mask, both `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        const OP: &str = "Sample";
        if image.rank() != 3 || image.shape()[0] != 1 {
            return Err(Error::shape(OP, "image", "[1, H, W]", format!("{:?}", image.shape())));
        }
        if mask.shape() != image.shape() {
            return Err(Error::shape(OP, "mask", format!("{:?}", image.shape()), format!("{:?}", mask.shape())));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(OP, "mask values must be 0 or 1"));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn mask_fraction(&self) -> f64 {
        self.mask.data().iter().map(|&v| f64::from(v)).sum::<f64>() / self.mask.numel() as f64
    }
}

/// Stacks samples into `[N, 1, H, W]` image and mask batches.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::invalid("stack", "no samples"))?;
    let (h, w) = (first.height(), first.width());
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape("stack", "spatial size", format!("{h}x{w}"), format!("{}x{}", s.height(), s.width())));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let shape = vec![samples.len(), 1, h, w];
    Ok((Tensor::new(shape.clone(), images)?, Tensor::new(shape, masks)?))
}

/// Split fractions plus the shuffle seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split", format!("fractions {f:?} must be in [0, 1] and sum to 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes: rounded fractions, the test split takes
    /// the remainder.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let train = (self.train * n as f64).round() as usize;
        let val = ((self.val * n as f64).round() as usize).min(n - train);
        let test = n - train - val;
        for (name, frac, size) in [("train", self.train, train), ("val", self.val, val), ("test", self.test, test)] {
            if frac > 0.0 && size == 0 {
                return Err(Error::invalid("split", format!("{n} samples leave the {name} split empty")));
            }
        }
        Ok((train, val, test))
    }
}

/// Train, validation and test partitions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Shuffles with `spec.seed` and cuts into three disjoint parts.
pub fn split(samples: Vec<Sample>, spec: &SplitSpec) -> Result<Splits> {
    let (n_train, n_val, _) = spec.sizes(samples.len())?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut RngStream::new(spec.seed, 0).fork(0x5711));
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| idx.iter().map(|&i| slots[i].take().expect("each index once")).collect::<Vec<_>>();
    Ok(Splits {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}
