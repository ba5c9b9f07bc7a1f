use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{GrayImage, ImageEncoder};
use serde::{Deserialize, Serialize};

use super::{Sample, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_VERSION: u32 = 1;

fn read_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)?.to_luma8())
}

/// 8-bit grayscale file as `[1, H, W]` intensities in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = read_gray(path.as_ref())?;
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    Tensor::new([1, h as usize, w as usize], data)
}

/// 8-bit grayscale file binarized at 128.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = read_gray(path.as_ref())?;
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f32::from(u8::from(v >= 128))).collect();
    Tensor::new([1, h as usize, w as usize], data)
}

/// Loads an image and its mask; the id is the image file stem.
pub fn load_pair(image_path: impl AsRef<Path>, mask_path: impl AsRef<Path>) -> Result<Sample> {
    let image_path = image_path.as_ref();
    let image = load_image(image_path)?;
    let mask = load_mask(mask_path)?;
    if image.shape() != mask.shape() {
        return Err(Error::shape(
            "load_pair",
            "mask size",
            format!("{:?}", image.shape()),
            format!("{:?}", mask.shape()),
        ));
    }
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Sample::new(id, image, mask)
}

fn spatial(t: &Tensor<f32>) -> Result<(u32, u32)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Ok((w as u32, h as u32)),
        _ => Err(Error::shape("save_image", "shape", "[H, W] or [1, H, W]", format!("{:?}", t.shape()))),
    }
}

fn write_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let is_pgm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm") || e.eq_ignore_ascii_case("pnm"));
    if is_pgm {
        let out = BufWriter::new(File::create(path)?);
        PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::L8)?;
    } else {
        img.save(path)?;
    }
    Ok(())
}

/// Writes intensities in `[0, 1]` as 8-bit grayscale (PNG or PGM by extension).
pub fn save_image(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = spatial(t)?;
    let bytes = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_gray(&GrayImage::from_raw(w, h, bytes).expect("size checked"), path.as_ref())
}

/// Writes a binary mask as 0/255.
pub fn save_mask(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (w, h) = spatial(t)?;
    let bytes = t.data().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write_gray(&GrayImage::from_raw(w, h, bytes).expect("size checked"), path.as_ref())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
}

/// `manifest.json` of a dataset directory with `images/` and `masks/`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<ManifestEntry>,
}

fn sample_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join("images").join(format!("{id}.png")), dir.join("masks").join(format!("{id}.png")))
}

/// Writes `images/<id>.png`, `masks/<id>.png` and `manifest.json`.
pub fn write_dataset(dir: impl AsRef<Path>, splits: &Splits) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let parts = [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)];
    let first = parts
        .iter()
        .flat_map(|(_, s)| s.first())
        .next()
        .ok_or_else(|| Error::invalid("write_dataset", "no samples"))?;
    let (height, width) = (first.height(), first.width());
    let mut samples = Vec::new();
    for (name, part) in parts {
        for s in part.iter() {
            let (img, mask) = sample_paths(dir, &s.id);
            save_image(&s.image, img)?;
            save_mask(&s.mask, mask)?;
            samples.push(ManifestEntry {
                id: s.id.clone(),
                split: name.to_string(),
            });
        }
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        height,
        width,
        samples,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Splits> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != DATASET_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: DATASET_VERSION,
        });
    }
    let mut splits = Splits::default();
    for entry in &manifest.samples {
        let (img, mask) = sample_paths(dir, &entry.id);
        let s = load_pair(img, mask)?;
        if (s.height(), s.width()) != (manifest.height, manifest.width) {
            return Err(Error::Corrupt(format!("{} is not {}x{}", entry.id, manifest.height, manifest.width)));
        }
        match entry.split.as_str() {
            "train" => splits.train.push(s),
            "val" => splits.val.push(s),
            "test" => splits.test.push(s),
            other => return Err(Error::Corrupt(format!("unknown split {other:?} for {}", entry.id))),
        }
    }
    Ok(splits)
}
