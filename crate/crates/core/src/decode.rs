//! Box decoding, scoring and non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::assign::LevelLocations;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::head::HeadOutputs;
use crate::nn::kernels::sigmoid;
use crate::tensor::Tensor;

/// Boxes narrower or shorter than this after clipping are dropped.
pub const MIN_BOX_SIDE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    /// Map boxes from network input space back to source pixels.
    pub fn rescaled(&self, scale: f64, width: f64, height: f64) -> DetectionSet {
        DetectionSet {
            image_id: self.image_id,
            detections: self
                .detections
                .iter()
                .map(|d| Detection {
                    bbox: d.bbox.scale(1.0 / scale, 1.0 / scale).clip(width, height),
                    ..d.clone()
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections_per_image: usize,
    pub pre_nms_top_k: usize,
    /// Shift each location by its semantic offset before decoding.
    pub revise: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            score_threshold: 0.05,
            nms_iou: 0.6,
            max_detections_per_image: 100,
            pre_nms_top_k: 1000,
            revise: true,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score_threshold", self.score_threshold), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("postprocess.{name} {v} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Decode one level. `distances` is 4×H×W `(l, t, r, b)`, `offsets` 2×H×W.
/// Boxes are `(x+ox−l, y+oy−t, x+ox+r, y+oy+b)`, clipped to the image;
/// without `revise` the offsets are ignored.
pub fn decode_boxes(
    locs: &LevelLocations,
    distances: &Tensor,
    offsets: &Tensor,
    revise: bool,
    image_size: (f64, f64),
) -> Result<Vec<BBox>> {
    let n = locs.points.len();
    if distances.shape() != [4, locs.height, locs.width] || offsets.shape() != [2, locs.height, locs.width] {
        return Err(Error::Shape(format!(
            "distances {:?} / offsets {:?} do not match a {}×{} level",
            distances.shape(),
            offsets.shape(),
            locs.height,
            locs.width
        )));
    }
    let (d, o) = (distances.data(), offsets.data());
    Ok(locs
        .points
        .iter()
        .enumerate()
        .map(|(p, &(x, y))| {
            let (cx, cy) = if revise { (x + o[p], y + o[n + p]) } else { (x, y) };
            BBox::new(cx - d[p], cy - d[n + p], cx + d[2 * n + p], cy + d[3 * n + p]).clip(image_size.0, image_size.1)
        })
        .collect())
}

/// Candidate before NMS.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub level: usize,
    pub location: usize,
    pub class_id: usize,
    pub score: f64,
}

/// `σ(cls) · σ(ctr)` per class and location; keep scores above the
/// threshold and at most `pre_nms_top_k` per level, best first.
pub fn score_and_filter(outputs: &HeadOutputs, level: usize, cfg: &PostprocessConfig) -> Vec<Candidate> {
    let (c, h, w) = outputs.cls_logits.chw();
    let hw = h * w;
    let mut out = Vec::new();
    for p in 0..hw {
        let ctr = sigmoid(outputs.centerness_logit.data()[p]);
        for k in 0..c {
            let score = sigmoid(outputs.cls_logits.data()[k * hw + p]) * ctr;
            if score > cfg.score_threshold {
                out.push(Candidate {
                    level,
                    location: p,
                    class_id: k + 1,
                    score,
                });
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.pre_nms_top_k);
    out
}

/// Greedy NMS within one class: visit by descending score and drop any box
/// whose IoU with an already-kept box exceeds `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Candidates from all levels → decoded boxes → per-class NMS → top
/// `max_detections_per_image`.
pub fn postprocess(
    locs: &[LevelLocations],
    outputs: &[HeadOutputs],
    cfg: &PostprocessConfig,
    image_size: (f64, f64),
) -> Result<Vec<Detection>> {
    if locs.len() != outputs.len() {
        return Err(Error::Shape(format!("{} location levels for {} outputs", locs.len(), outputs.len())));
    }
    let mut per_class: std::collections::BTreeMap<usize, Vec<Detection>> = Default::default();
    for (level, (l, o)) in locs.iter().zip(outputs).enumerate() {
        let cands = score_and_filter(o, level, cfg);
        if cands.is_empty() {
            continue;
        }
        let boxes = decode_boxes(l, &o.distances(), &o.offsets(), cfg.revise, image_size)?;
        for c in cands {
            let b = boxes[c.location];
            if b.width() < MIN_BOX_SIDE || b.height() < MIN_BOX_SIDE {
                continue;
            }
            per_class.entry(c.class_id).or_default().push(Detection {
                bbox: b,
                class_id: c.class_id,
                score: c.score,
            });
        }
    }
    let mut all: Vec<Detection> = per_class.into_values().flat_map(|d| nms(d, cfg.nms_iou)).collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(cfg.max_detections_per_image);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::generate_locations;

    fn one_cell(x: f64, y: f64) -> LevelLocations {
        LevelLocations {
            stride: 8,
            height: 1,
            width: 1,
            points: vec![(x, y)],
        }
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection {
            bbox: b,
            class_id: 1,
            score,
        }
    }

    #[test]
    fn revised_decode_hand_value() {
        let d = Tensor::from_vec(&[4, 1, 1], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let o = Tensor::from_vec(&[2, 1, 1], vec![2.0, -3.0]).unwrap();
        let b = decode_boxes(&one_cell(100.0, 100.0), &d, &o, true, (1000.0, 1000.0)).unwrap();
        assert_eq!(b[0], BBox::new(92.0, 77.0, 132.0, 137.0));
        let g = decode_boxes(&one_cell(100.0, 100.0), &d, &o, false, (1000.0, 1000.0)).unwrap();
        assert_eq!(g[0], BBox::new(90.0, 80.0, 130.0, 140.0));
    }

    #[test]
    fn zero_offsets_match_geometric_decode() {
        let grid = generate_locations(&[(4, 4)], &[8]).unwrap();
        let d = crate::nn::Initializer::with_std(3, 5.0).gaussian(&[4, 4, 4]).map(f64::abs);
        let o = Tensor::zeros(&[2, 4, 4]);
        let a = decode_boxes(&grid.levels[0], &d, &o, true, (32.0, 32.0)).unwrap();
        let b = decode_boxes(&grid.levels[0], &d, &o, false, (32.0, 32.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_clips_to_image() {
        let d = Tensor::from_vec(&[4, 1, 1], vec![50.0, 50.0, 50.0, 50.0]).unwrap();
        let b = decode_boxes(&one_cell(4.0, 4.0), &d, &Tensor::zeros(&[2, 1, 1]), true, (32.0, 16.0)).unwrap();
        assert_eq!(b[0], BBox::new(0.0, 0.0, 32.0, 16.0));
    }

    #[test]
    fn score_is_product_of_sigmoids() {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let o = HeadOutputs {
            cls_logits: Tensor::from_vec(&[1, 1, 1], vec![logit(0.8)]).unwrap(),
            reg_raw: Tensor::zeros(&[4, 1, 1]),
            centerness_logit: Tensor::from_vec(&[1, 1, 1], vec![0.0]).unwrap(),
            semantic_raw: Tensor::zeros(&[2, 1, 1]),
            stride: 8,
            scale: 1.0,
        };
        let c = score_and_filter(&o, 0, &PostprocessConfig::default());
        assert_eq!(c.len(), 1);
        assert!((c[0].score - 0.4).abs() < 1e-12);

        let mut gated = o.clone();
        gated.centerness_logit = Tensor::from_vec(&[1, 1, 1], vec![-800.0]).unwrap();
        assert!(score_and_filter(&gated, 0, &PostprocessConfig::default()).is_empty());
    }

    #[test]
    fn zero_threshold_keeps_everything_up_to_top_k() {
        let o = HeadOutputs {
            cls_logits: Tensor::zeros(&[3, 2, 2]),
            reg_raw: Tensor::zeros(&[4, 2, 2]),
            centerness_logit: Tensor::zeros(&[1, 2, 2]),
            semantic_raw: Tensor::zeros(&[2, 2, 2]),
            stride: 8,
            scale: 1.0,
        };
        let mut cfg = PostprocessConfig {
            score_threshold: 0.0,
            ..Default::default()
        };
        assert_eq!(score_and_filter(&o, 0, &cfg).len(), 12);
        cfg.pre_nms_top_k = 5;
        assert_eq!(score_and_filter(&o, 0, &cfg).len(), 5);
    }

    #[test]
    fn nms_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let kept = nms(vec![det(a, 0.8), det(a, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let b = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(nms(vec![det(a, 0.9), det(b, 0.8)], 0.5).len(), 2);

        // IoU 0.6: 10×10 boxes overlapping in 7.5×10
        let c = BBox::new(2.5, 0.0, 12.5, 10.0);
        assert!((iou(&a, &c) - 0.6).abs() < 1e-9);
        let kept = nms(vec![det(a, 0.9), det(c, 0.7)], 0.5);
        assert_eq!(kept, vec![det(a, 0.9)]);
    }

    #[test]
    fn constant_offset_translates_boxes() {
        let mut grid = generate_locations(&[(2, 3)], &[16]).unwrap();
        // keep every box clear of the image border
        grid.levels[0].points.iter_mut().for_each(|p| *p = (p.0 + 500.0, p.1 + 500.0));
        let d = crate::nn::Initializer::with_std(9, 4.0).gaussian(&[4, 2, 3]).map(|v| v.abs() + 1.0);
        let zero = Tensor::zeros(&[2, 2, 3]);
        let mut shift = Tensor::zeros(&[2, 2, 3]);
        shift.plane_mut(0).fill(1.5);
        shift.plane_mut(1).fill(-2.0);
        let big = (1e6, 1e6);
        let a = decode_boxes(&grid.levels[0], &d, &zero, true, big).unwrap();
        let b = decode_boxes(&grid.levels[0], &d, &shift, true, big).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let t = x.translate(1.5, -2.0);
            assert!((t.x1 - y.x1).abs() < 1e-9 && (t.y2 - y.y2).abs() < 1e-9);
        }
    }
}
