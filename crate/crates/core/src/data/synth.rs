//! Deterministic synthetic detection data: flat-colored geometric shapes on
//! a gray textured background, drawn from small/medium/large size buckets.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rgb_to_tensor, save_coco, tensor_to_rgb, DatasetManifest, GroundTruthBox, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            ShapeKind::Circle => [0.88, 0.16, 0.16],
            ShapeKind::Square => [0.16, 0.84, 0.22],
            ShapeKind::Triangle => [0.20, 0.30, 0.90],
        }
    }

    /// Whether the pixel centre `(px, py)` lies inside a shape of side `s` at `(x0, y0)`.
    fn covers(self, x0: f64, y0: f64, s: f64, px: f64, py: f64) -> bool {
        match self {
            ShapeKind::Square => px >= x0 && px < x0 + s && py >= y0 && py < y0 + s,
            ShapeKind::Circle => {
                let r = s / 2.0;
                let (dx, dy) = (px - (x0 + r), py - (y0 + r));
                dx * dx + dy * dy <= r * r
            }
            ShapeKind::Triangle => {
                // apex at top centre, base along the bottom edge
                if py < y0 || py > y0 + s {
                    return false;
                }
                let half = (py - y0) / s * s / 2.0;
                let cx = x0 + s / 2.0;
                px >= cx - half && px <= cx + half
            }
        }
    }
}

/// Inclusive side-length ranges (pixels) per object size bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub small: [u32; 2],
    pub medium: [u32; 2],
    pub large: [u32; 2],
}

impl Default for SizeBuckets {
    fn default() -> Self {
        SizeBuckets {
            small: [10, 26],
            medium: [40, 80],
            large: [100, 120],
        }
    }
}

impl SizeBuckets {
    fn ranges(&self) -> [[u32; 2]; 3] {
        [self.small, self.medium, self.large]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_images: usize,
    pub image_size: u32,
    pub classes: Vec<ShapeKind>,
    pub size_buckets: SizeBuckets,
    /// Relative small:medium:large proportions.
    pub mix: [f64; 3],
    pub max_objects_per_image: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 8,
            image_size: 128,
            classes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            size_buckets: SizeBuckets::default(),
            mix: [1.0, 1.0, 1.0],
            max_objects_per_image: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of 32", self.image_size)));
        }
        if self.classes.is_empty() || self.num_images == 0 || self.max_objects_per_image == 0 {
            return Err(Error::Config("need at least one class, image and object per image".into()));
        }
        let r = self.size_buckets.ranges();
        for b in &r {
            if b[0] == 0 || b[0] > b[1] {
                return Err(Error::Config(format!("invalid size range {b:?}")));
            }
        }
        if !(r[0][1] < r[1][0] && r[1][1] < r[2][0]) {
            return Err(Error::Config("size buckets must be disjoint and ordered small < medium < large".into()));
        }
        for (b, w) in r.iter().zip(self.mix) {
            if w > 0.0 && b[1] > self.image_size {
                return Err(Error::Config(format!(
                    "objects up to {} px cannot be placed in a {} px image",
                    b[1], self.image_size
                )));
            }
        }
        if self.mix.iter().any(|&w| w < 0.0) || self.mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("size mix weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct PlacedShape {
    kind: ShapeKind,
    class_id: usize,
    x0: u32,
    y0: u32,
    side: u32,
    color: [f64; 3],
}

struct ImagePlan {
    shapes: Vec<PlacedShape>,
    texture_seed: u64,
}

/// Generate a synthetic dataset. When `out_dir` is given, PNGs go to
/// `out_dir/images/` and the COCO JSON to `out_dir/annotations.json`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64, out_dir: Option<&Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.image_size;
    let total_w: f64 = cfg.mix.iter().sum();
    let frac: Vec<f64> = cfg.mix.iter().map(|w| w / total_w).collect();
    let ranges = cfg.size_buckets.ranges();
    let mut counts = [0usize; 3];

    // Sequential placement plan: bucket choice tracks the realized mix.
    let mut plans = Vec::with_capacity(cfg.num_images);
    for _ in 0..cfg.num_images {
        let n = rng.random_range(1..=cfg.max_objects_per_image);
        let mut shapes: Vec<PlacedShape> = Vec::new();
        for _ in 0..n {
            let placed: usize = counts.iter().sum();
            let bucket = (0..3)
                .filter(|&b| frac[b] > 0.0)
                .max_by(|&a, &b| {
                    let da = frac[a] * (placed + 1) as f64 - counts[a] as f64;
                    let db = frac[b] * (placed + 1) as f64 - counts[b] as f64;
                    da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                })
                .expect("non-empty mix");
            let side = rng.random_range(ranges[bucket][0]..=ranges[bucket][1]);
            let class_idx = rng.random_range(0..cfg.classes.len());
            let kind = cfg.classes[class_idx];
            let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
            let base = kind.base_color();
            let color = std::array::from_fn(|c| (base[c] + jitter[c]).clamp(0.0, 1.0));
            let mut spot = None;
            for _ in 0..64 {
                let x0 = rng.random_range(0..=size - side);
                let y0 = rng.random_range(0..=size - side);
                let cand = BBox::new(x0 as f64, y0 as f64, (x0 + side) as f64, (y0 + side) as f64);
                // keep a 2px gap so shapes never touch
                let clear = shapes.iter().all(|s| {
                    let other = BBox::new(
                        s.x0 as f64 - 2.0,
                        s.y0 as f64 - 2.0,
                        (s.x0 + s.side) as f64 + 2.0,
                        (s.y0 + s.side) as f64 + 2.0,
                    );
                    cand.intersection(&other) == 0.0
                });
                if clear {
                    spot = Some((x0, y0));
                    break;
                }
            }
            let Some((x0, y0)) = spot else { break };
            counts[bucket] += 1;
            shapes.push(PlacedShape {
                kind,
                class_id: class_idx + 1,
                x0,
                y0,
                side,
                color,
            });
        }
        plans.push(ImagePlan {
            shapes,
            texture_seed: rng.random(),
        });
    }

    let rendered = parallel::map(&plans, |plan| render(plan, size));

    let mut images = Vec::with_capacity(plans.len());
    let mut annotations = Vec::new();
    for (i, (pixels, boxes)) in rendered.into_iter().enumerate() {
        let id = i as u64 + 1;
        for (class_id, bbox) in boxes {
            annotations.push(GroundTruthBox {
                image_id: id,
                class_id,
                bbox,
            });
        }
        images.push(ImageRecord {
            id,
            width: size,
            height: size,
            file_path: format!("images/synth_{id:06}.png"),
            pixels: Some(pixels),
        });
    }
    let categories: BTreeMap<usize, String> =
        cfg.classes.iter().enumerate().map(|(i, k)| (i + 1, k.name().to_string())).collect();
    let manifest = DatasetManifest {
        images,
        annotations,
        crowd: Vec::new(),
        source_category_ids: categories.keys().map(|&c| (c, c as u64)).collect(),
        categories,
        image_root: out_dir.map(Path::to_path_buf).unwrap_or_default(),
    };

    if let Some(dir) = out_dir {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for rec in &manifest.images {
            let path = dir.join(&rec.file_path);
            tensor_to_rgb(rec.pixels.as_ref().expect("resident pixels")).save(&path)?;
        }
        save_coco(&manifest, &dir.join("annotations.json"))?;
    }
    Ok(manifest)
}

/// Rasterize one image; boxes are the tight bounds of each shape's pixels.
fn render(plan: &ImagePlan, size: u32) -> (Tensor, Vec<(usize, BBox)>) {
    let n = size as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.texture_seed);
    let (fx, fy, phase) = (
        rng.random_range(0.05..0.3),
        rng.random_range(0.05..0.3),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut img = Tensor::zeros(&[3, n, n]);
    for y in 0..n {
        for x in 0..n {
            let base = 0.45 + 0.07 * ((x as f64 * fx + phase).sin() * (y as f64 * fy).cos());
            let noise: f64 = rng.random_range(-0.04..0.04);
            for c in 0..3 {
                let tint: f64 = rng.random_range(-0.01..0.01);
                img.data_mut()[(c * n + y) * n + x] = base + noise + tint;
            }
        }
    }
    let mut boxes = Vec::with_capacity(plan.shapes.len());
    for s in &plan.shapes {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let (x0, y0, side) = (s.x0 as usize, s.y0 as usize, s.side as usize);
        for y in y0..(y0 + side).min(n) {
            for x in x0..(x0 + side).min(n) {
                if s.kind.covers(s.x0 as f64, s.y0 as f64, s.side as f64, x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..3 {
                        img.data_mut()[(c * n + y) * n + x] = s.color[c];
                    }
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        boxes.push((s.class_id, BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64)));
    }
    // quantize so in-memory pixels match the PNG written to disk
    let quantized = rgb_to_tensor(&tensor_to_rgb(&img));
    (quantized, boxes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_images: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn every_box_is_in_bounds_and_nondegenerate() {
        let m = generate_synthetic(&small_cfg(), 7, None).unwrap();
        assert_eq!(m.images.len(), 8);
        for a in &m.annotations {
            assert!(0.0 <= a.bbox.x1 && a.bbox.x1 < a.bbox.x2 && a.bbox.x2 <= 128.0);
            assert!(0.0 <= a.bbox.y1 && a.bbox.y1 < a.bbox.y2 && a.bbox.y2 <= 128.0);
        }
        for img in &m.images {
            let n = m.boxes_for(img.id).len();
            assert!((1..=3).contains(&n));
        }
    }

    #[test]
    fn rejects_unplaceable_and_misaligned_configs() {
        let too_big = SynthConfig {
            image_size: 64,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&too_big, 1, None), Err(Error::Config(_))));
        let odd = SynthConfig {
            image_size: 100,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&odd, 1, None), Err(Error::Config(_))));
        let overlapping = SynthConfig {
            size_buckets: SizeBuckets {
                small: [10, 50],
                medium: [40, 80],
                large: [100, 120],
            },
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&overlapping, 1, None), Err(Error::Config(_))));
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_synthetic(&small_cfg(), 1, None).unwrap();
        let b = generate_synthetic(&small_cfg(), 2, None).unwrap();
        assert_ne!(a.annotations, b.annotations);
    }
}
