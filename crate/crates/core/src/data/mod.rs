//! Dataset types, COCO-format I/O, synthetic shape generation and batching.

mod batch;
mod coco;
mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

pub use batch::{batch_iterator, resize_image, Batch, BatchIter, ResizedImage};
pub use coco::{load_coco, save_coco};
pub use synth::{generate_synthetic, ShapeKind, SizeBuckets, SynthConfig};

/// Smallest accepted image side, in pixels.
pub const MIN_IMAGE_SIDE: u32 = 32;

#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    /// Path relative to the manifest's image root.
    pub file_path: String,
    /// 3×H×W pixels in [0, 1], when already resident in memory.
    pub pixels: Option<Tensor>,
}

impl ImageRecord {
    /// Pixels as a 3×H×W tensor, reading from `root` when not resident.
    pub fn load_pixels(&self, root: &Path) -> Result<Tensor> {
        if let Some(p) = &self.pixels {
            return Ok(p.clone());
        }
        Ok(rgb_to_tensor(&load_image(&root.join(&self.file_path))?))
    }
}

/// Decode an image file to 8-bit RGB.
pub fn load_image(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })?
        .to_rgb8())
}

pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[(c * h + y as usize) * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    t
}

pub fn tensor_to_rgb(t: &Tensor) -> image::RgbImage {
    let (_, h, w) = t.chw();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = |c: usize| (t.at3(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([v(0), v(1), v(2)])
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub image_id: u64,
    /// Contiguous class id in `1..=C`.
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<GroundTruthBox>,
    /// Crowd regions: excluded from training, ignored during evaluation.
    pub crowd: Vec<GroundTruthBox>,
    /// Contiguous class id → name.
    pub categories: BTreeMap<usize, String>,
    /// Contiguous class id → original dataset category id.
    pub source_category_ids: BTreeMap<usize, u64>,
    pub image_root: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.id == id)
    }

    pub fn boxes_for(&self, image_id: u64) -> Vec<GroundTruthBox> {
        self.annotations.iter().filter(|a| a.image_id == image_id).cloned().collect()
    }

    /// Contiguous class id for an original category id.
    pub fn class_for_source(&self, source: u64) -> Option<usize> {
        self.source_category_ids.iter().find(|(_, &s)| s == source).map(|(&c, _)| c)
    }

    /// Keep only the first `n` images (and their annotations).
    pub fn truncated(&self, n: usize) -> DatasetManifest {
        let images: Vec<_> = self.images.iter().take(n).cloned().collect();
        let keep = |a: &&GroundTruthBox| images.iter().any(|r| r.id == a.image_id);
        DatasetManifest {
            annotations: self.annotations.iter().filter(keep).cloned().collect(),
            crowd: self.crowd.iter().filter(keep).cloned().collect(),
            images,
            categories: self.categories.clone(),
            source_category_ids: self.source_category_ids.clone(),
            image_root: self.image_root.clone(),
        }
    }
}
