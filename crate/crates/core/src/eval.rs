//! COCO-style box evaluation: greedy matching at ten IoU thresholds,
//! 101-point interpolated AP, and small/medium/large area buckets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::decode::{Detection, DetectionSet};
use crate::error::{Error, Result};
pub use crate::geometry::iou;
use crate::geometry::BBox;
use crate::parallel;

pub const MAX_DETS: usize = 100;
pub const RECALL_POINTS: usize = 101;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub const ALL: [AreaRange; 4] = [AreaRange::All, AreaRange::Small, AreaRange::Medium, AreaRange::Large];

    pub fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA,
            AreaRange::Medium => (SMALL_AREA..MEDIUM_AREA).contains(&area),
            AreaRange::Large => area >= MEDIUM_AREA,
        }
    }
}

/// A ground-truth region taking part in matching.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGt {
    pub bbox: BBox,
    pub crowd: bool,
    /// Excluded from the recall denominator.
    pub ignore: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per detection (in the order given): index of the matched GT.
    pub det_match: Vec<Option<usize>>,
    /// Per detection: neither true nor false positive.
    pub det_ignore: Vec<bool>,
    /// Per GT: matched by some detection.
    pub gt_matched: Vec<bool>,
}

/// Crowd regions are matched by the share of the detection they cover.
fn match_iou(det: &BBox, gt: &EvalGt) -> f64 {
    if gt.crowd {
        let a = det.area();
        if a <= 0.0 {
            0.0
        } else {
            det.intersection(&gt.bbox) / a
        }
    } else {
        iou(det, &gt.bbox)
    }
}

/// Greedy matching of score-ordered detections. Each detection takes the
/// highest-IoU GT at or above `threshold` that is not yet taken, preferring
/// regular GTs over ignored ones; crowd regions can absorb many
/// detections. A detection matched to an ignored GT is itself ignored.
pub fn match_detections(dets: &[Detection], gts: &[EvalGt], threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by_key(|&g| gts[g].ignore);
    let mut gt_matched = vec![false; gts.len()];
    let mut det_match = vec![None; dets.len()];
    let mut det_ignore = vec![false; dets.len()];
    for (d, det) in dets.iter().enumerate() {
        let mut best = threshold.min(1.0 - 1e-10);
        let mut m: Option<usize> = None;
        for &g in &order {
            if gt_matched[g] && !gts[g].crowd {
                continue;
            }
            if let Some(prev) = m {
                if !gts[prev].ignore && gts[g].ignore {
                    break;
                }
            }
            let v = match_iou(&det.bbox, &gts[g]);
            if v < best {
                continue;
            }
            best = v;
            m = Some(g);
        }
        if let Some(g) = m {
            det_match[d] = Some(g);
            det_ignore[d] = gts[g].ignore;
            gt_matched[g] = true;
        }
    }
    MatchResult {
        det_match,
        det_ignore,
        gt_matched,
    }
}

/// 101-point interpolated AP from true-positive flags sorted by descending
/// score. Precision is made non-increasing from the right and sampled at
/// the first detection reaching each recall level.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &is_tp in tp {
        if is_tp {
            t += 1;
        } else {
            f += 1;
        }
        recall.push(t as f64 / num_gt as f64);
        precision.push(t as f64 / (t + f) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&v| v < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over IoU thresholds 0.50:0.05:0.95.
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub ap_l: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    /// Means over classes that have ground truth in the relevant bucket.
    pub aggregate: Metrics,
    pub per_class: BTreeMap<usize, Metrics>,
}

impl MetricsTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Per (class, area range): AP at each IoU threshold, `None` without GT.
fn class_aps(
    class_id: usize,
    image_ids: &[u64],
    dets: &BTreeMap<(u64, usize), Vec<Detection>>,
    gts: &BTreeMap<(u64, usize), Vec<(BBox, bool)>>,
    range: AreaRange,
) -> Option<[f64; 10]> {
    let thresholds = iou_thresholds();
    let mut scored: Vec<Vec<(f64, bool, bool)>> = vec![Vec::new(); thresholds.len()];
    let mut num_gt = 0usize;
    for &img in image_ids {
        let key = (img, class_id);
        let eval_gts: Vec<EvalGt> = gts
            .get(&key)
            .map(|v| {
                v.iter()
                    .map(|&(bbox, crowd)| EvalGt {
                        bbox,
                        crowd,
                        ignore: crowd || !range.contains(bbox.area()),
                    })
                    .collect()
            })
            .unwrap_or_default();
        num_gt += eval_gts.iter().filter(|g| !g.ignore).count();
        let mut d: Vec<Detection> = dets.get(&key).cloned().unwrap_or_default();
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        d.truncate(MAX_DETS);
        for (ti, &t) in thresholds.iter().enumerate() {
            let m = match_detections(&d, &eval_gts, t);
            for (k, det) in d.iter().enumerate() {
                let ignored = m.det_ignore[k] || (m.det_match[k].is_none() && !range.contains(det.bbox.area()));
                scored[ti].push((det.score, m.det_match[k].is_some(), ignored));
            }
        }
    }
    if num_gt == 0 {
        return None;
    }
    Some(std::array::from_fn(|ti| {
        let mut s = scored[ti].clone();
        s.sort_by(|a, b| b.0.total_cmp(&a.0));
        let tp: Vec<bool> = s.iter().filter(|x| !x.2).map(|x| x.1).collect();
        average_precision(&tp, num_gt)
    }))
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Evaluate detections (in source-image pixels) against a manifest's
/// annotations; crowd regions are ignored rather than scored.
pub fn evaluate(detections: &[DetectionSet], manifest: &DatasetManifest) -> Result<MetricsTable> {
    let mut dets: BTreeMap<(u64, usize), Vec<Detection>> = BTreeMap::new();
    for set in detections {
        if manifest.image(set.image_id).is_none() {
            return Err(Error::Format(format!("detection references unknown image {}", set.image_id)));
        }
        for d in &set.detections {
            if !manifest.categories.contains_key(&d.class_id) {
                return Err(Error::Format(format!("detection references unknown category {}", d.class_id)));
            }
            dets.entry((set.image_id, d.class_id)).or_default().push(d.clone());
        }
    }
    let mut gts: BTreeMap<(u64, usize), Vec<(BBox, bool)>> = BTreeMap::new();
    for a in &manifest.annotations {
        gts.entry((a.image_id, a.class_id)).or_default().push((a.bbox, false));
    }
    for a in &manifest.crowd {
        gts.entry((a.image_id, a.class_id)).or_default().push((a.bbox, true));
    }
    let image_ids: Vec<u64> = manifest.images.iter().map(|r| r.id).collect();
    let classes: Vec<usize> = manifest.categories.keys().copied().collect();

    let rows = parallel::map(&classes, |&c| {
        let per_range: Vec<Option<[f64; 10]>> = AreaRange::ALL
            .iter()
            .map(|&r| class_aps(c, &image_ids, &dets, &gts, r))
            .collect();
        let all = per_range[0];
        Metrics {
            ap: all.and_then(mean),
            ap50: all.map(|a| a[0]),
            ap75: all.map(|a| a[5]),
            ap_s: per_range[1].and_then(mean),
            ap_m: per_range[2].and_then(mean),
            ap_l: per_range[3].and_then(mean),
        }
    });
    let per_class: BTreeMap<usize, Metrics> = classes.into_iter().zip(rows).collect();
    let agg = |f: fn(&Metrics) -> Option<f64>| mean(per_class.values().filter_map(f));
    Ok(MetricsTable {
        aggregate: Metrics {
            ap: agg(|m| m.ap),
            ap50: agg(|m| m.ap50),
            ap75: agg(|m| m.ap75),
            ap_s: agg(|m| m.ap_s),
            ap_m: agg(|m| m.ap_m),
            ap_l: agg(|m| m.ap_l),
        },
        per_class,
    })
}

/// One entry of a COCO results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

/// COCO results entries with original category ids.
pub fn results_entries(sets: &[DetectionSet], manifest: &DatasetManifest) -> Result<Vec<ResultEntry>> {
    let mut out = Vec::new();
    for s in sets {
        for d in &s.detections {
            let category_id = *manifest
                .source_category_ids
                .get(&d.class_id)
                .ok_or_else(|| Error::Format(format!("class {} has no source category", d.class_id)))?;
            out.push(ResultEntry {
                image_id: s.image_id,
                category_id,
                bbox: d.bbox.to_xywh(),
                score: d.score,
            });
        }
    }
    Ok(out)
}

pub fn save_results(sets: &[DetectionSet], manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let entries = results_entries(sets, manifest)?;
    std::fs::write(path, serde_json::to_string_pretty(&entries)?).map_err(|e| Error::io(path, e))
}

/// Parse a COCO results file into per-image detection sets (one per
/// manifest image, in manifest order).
pub fn load_results(path: &Path, manifest: &DatasetManifest) -> Result<Vec<DetectionSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ResultEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut by_image: BTreeMap<u64, Vec<Detection>> = manifest.images.iter().map(|r| (r.id, Vec::new())).collect();
    for e in entries {
        let class_id = manifest
            .class_for_source(e.category_id)
            .ok_or_else(|| Error::Format(format!("result references unknown category {}", e.category_id)))?;
        by_image
            .get_mut(&e.image_id)
            .ok_or_else(|| Error::Format(format!("result references unknown image {}", e.image_id)))?
            .push(Detection {
                bbox: BBox::from_xywh(e.bbox),
                class_id,
                score: e.score,
            });
    }
    Ok(manifest
        .images
        .iter()
        .map(|r| DetectionSet {
            image_id: r.id,
            detections: by_image.remove(&r.id).unwrap_or_default(),
        })
        .collect())
}
