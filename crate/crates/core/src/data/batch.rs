use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, GroundTruthBox};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An image letterboxed into a `target × target` canvas: scaled to fit
/// (aspect preserved) at the top-left, zero padding bottom/right.
#[derive(Clone, Debug)]
pub struct ResizedImage {
    pub pixels: Tensor,
    pub scale: f64,
}

/// Aspect-preserving bilinear resize into a zero-padded square canvas.
pub fn resize_image(src: &Tensor, target: usize) -> ResizedImage {
    let (c, h, w) = src.chw();
    let scale = target as f64 / h.max(w) as f64;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, target);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, target);
    let mut out = Tensor::zeros(&[c, target, target]);
    if nh == h && nw == w {
        for ch in 0..c {
            for y in 0..h {
                let row = &src.plane(ch)[y * w..(y + 1) * w];
                out.plane_mut(ch)[y * target..y * target + w].copy_from_slice(row);
            }
        }
        return ResizedImage { pixels: out, scale };
    }
    let (sy, sx) = (h as f64 / nh as f64, w as f64 / nw as f64);
    let taps = |o: usize, ratio: f64, len: usize| {
        let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    for ch in 0..c {
        let plane = src.plane(ch).to_vec();
        let dst = out.plane_mut(ch);
        for oy in 0..nh {
            let (y0, y1, ly) = taps(oy, sy, h);
            for ox in 0..nw {
                let (x0, x1, lx) = taps(ox, sx, w);
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                dst[oy * target + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    ResizedImage { pixels: out, scale }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub image_ids: Vec<u64>,
    /// One 3×S×S tensor per image.
    pub images: Vec<Tensor>,
    /// Ground truth in resized-canvas coordinates.
    pub boxes: Vec<Vec<GroundTruthBox>>,
    /// Per-image resize factor (canvas px per source px).
    pub scales: Vec<f64>,
}

pub struct BatchIter<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    target_size: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        Some(self.load(idx))
    }
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn load(&self, idx: &[usize]) -> Result<Batch> {
        let mut batch = Batch {
            image_ids: Vec::with_capacity(idx.len()),
            images: Vec::with_capacity(idx.len()),
            boxes: Vec::with_capacity(idx.len()),
            scales: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            let rec = &self.manifest.images[i];
            let pixels = rec.load_pixels(&self.manifest.image_root)?;
            let resized = resize_image(&pixels, self.target_size);
            let s = resized.scale;
            let boxes = self
                .manifest
                .annotations
                .iter()
                .filter(|a| a.image_id == rec.id)
                .map(|a| GroundTruthBox {
                    bbox: a.bbox.scale(s, s),
                    ..a.clone()
                })
                .collect();
            batch.image_ids.push(rec.id);
            batch.images.push(resized.pixels);
            batch.boxes.push(boxes);
            batch.scales.push(s);
        }
        Ok(batch)
    }
}

/// Iterate over the manifest in batches of resized images. Without a
/// shuffle seed the manifest order is kept.
pub fn batch_iterator(
    manifest: &DatasetManifest,
    batch_size: usize,
    target_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchIter<'_>> {
    if manifest.images.is_empty() {
        return Err(Error::Config("cannot batch an empty manifest".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if target_size == 0 || target_size % 32 != 0 {
        return Err(Error::Config(format!("target_size {target_size} must be a positive multiple of 32")));
    }
    let mut order: Vec<usize> = (0..manifest.images.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        manifest,
        order,
        cursor: 0,
        batch_size,
        target_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ImageRecord, SynthConfig};
    use crate::geometry::BBox;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn one_image_manifest(w: usize, h: usize) -> DatasetManifest {
        DatasetManifest {
            images: vec![ImageRecord {
                id: 1,
                width: w as u32,
                height: h as u32,
                file_path: String::new(),
                pixels: Some(Tensor::full(&[3, h, w], 0.5)),
            }],
            annotations: vec![GroundTruthBox {
                image_id: 1,
                class_id: 1,
                bbox: BBox::new(0.0, 0.0, w as f64, h as f64),
            }],
            crowd: vec![],
            categories: BTreeMap::from([(1, "a".to_string())]),
            source_category_ids: BTreeMap::from([(1, 1)]),
            image_root: Default::default(),
        }
    }

    #[test]
    fn scales_tall_image_and_its_boxes() {
        let m = one_image_manifest(100, 200);
        let b = batch_iterator(&m, 1, 128, None).unwrap().next().unwrap().unwrap();
        assert!((b.scales[0] - 0.64).abs() < 1e-12);
        assert_eq!(b.boxes[0][0].bbox, BBox::new(0.0, 0.0, 64.0, 128.0));
        assert_eq!(b.images[0].shape(), &[3, 128, 128]);
        // padding region is zero
        assert_eq!(b.images[0].at3(0, 10, 100), 0.0);
        assert!((b.images[0].at3(0, 10, 10) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_batch_when_batch_equals_dataset() {
        let m = generate_synthetic(&SynthConfig::default(), 3, None).unwrap();
        let it = batch_iterator(&m, 8, 128, None).unwrap();
        assert_eq!(it.num_batches(), 1);
        let batches: Vec<_> = it.collect::<Result<_>>().unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].images.len(), 8);
    }

    #[test]
    fn order_is_identity_without_seed_and_deterministic_with_one() {
        let m = generate_synthetic(&SynthConfig::default(), 3, None).unwrap();
        let ids: Vec<u64> = batch_iterator(&m, 3, 128, None)
            .unwrap()
            .flat_map(|b| b.unwrap().image_ids)
            .collect();
        assert_eq!(ids, (1..=8).collect::<Vec<_>>());
        let run = || -> Vec<u64> {
            batch_iterator(&m, 3, 128, Some(9))
                .unwrap()
                .flat_map(|b| b.unwrap().image_ids)
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_arguments() {
        let mut m = one_image_manifest(64, 64);
        assert!(batch_iterator(&m, 0, 128, None).is_err());
        assert!(batch_iterator(&m, 1, 100, None).is_err());
        m.images.clear();
        assert!(batch_iterator(&m, 1, 128, None).is_err());
    }

    proptest! {
        #[test]
        fn inverse_scaling_recovers_boxes(w in 32usize..400, h in 32usize..400,
                                           fx in 0.0f64..0.5, fy in 0.0f64..0.5, fw in 0.1f64..0.5, fh in 0.1f64..0.5) {
            let scale = 128.0 / w.max(h) as f64;
            let b = BBox::new(fx * w as f64, fy * h as f64, (fx + fw) * w as f64, (fy + fh) * h as f64);
            let back = b.scale(scale, scale).scale(1.0 / scale, 1.0 / scale);
            prop_assert!((back.x1 - b.x1).abs() <= 0.51);
            prop_assert!((back.y2 - b.y2).abs() <= 0.51);
        }
    }
}
