//! Location grids and per-location training targets.

use serde::{Deserialize, Serialize};

use crate::data::GroundTruthBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LevelLocations {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `(x, y)` pixel centres.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocationGrid {
    pub levels: Vec<LevelLocations>,
}

impl LocationGrid {
    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.points.len()).sum()
    }
}

/// Cell `(cx, cy)` at stride `s` sits at `(s/2 + cx·s, s/2 + cy·s)`.
pub fn generate_locations(level_shapes: &[(usize, usize)], strides: &[usize]) -> Result<LocationGrid> {
    if level_shapes.len() != strides.len() {
        return Err(Error::Shape(format!(
            "{} level shapes but {} strides",
            level_shapes.len(),
            strides.len()
        )));
    }
    let levels = level_shapes
        .iter()
        .zip(strides)
        .map(|(&(h, w), &s)| {
            let half = s as f64 / 2.0;
            let points = (0..h)
                .flat_map(|cy| (0..w).map(move |cx| (half + (cx * s) as f64, half + (cy * s) as f64)))
                .collect();
            LevelLocations {
                stride: s,
                height: h,
                width: w,
                points,
            }
        })
        .collect();
    Ok(LocationGrid { levels })
}

/// Per-level `(min, max]` bounds on a location's largest target margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelRanges {
    pub ranges: Vec<(f64, f64)>,
}

pub const REFERENCE_INPUT: f64 = 800.0;
const REFERENCE_BOUNDS: [f64; 3] = [64.0, 128.0, 256.0];

impl LevelRanges {
    /// Default buckets (0,64], (64,128], (128,256], (256,∞) at an 800 px
    /// input, scaled proportionally to `input_size`.
    pub fn for_input(input_size: usize) -> Self {
        let k = input_size as f64 / REFERENCE_INPUT;
        let b: Vec<f64> = REFERENCE_BOUNDS.iter().map(|v| v * k).collect();
        LevelRanges {
            ranges: vec![(0.0, b[0]), (b[0], b[1]), (b[1], b[2]), (b[2], f64::INFINITY)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.ranges;
        if r.is_empty() || r[0].0 != 0.0 || r.last().unwrap().1 != f64::INFINITY {
            return Err(Error::Config("level ranges must start at 0 and end at infinity".into()));
        }
        if r.windows(2).any(|w| w[0].1 != w[1].0) || r.iter().any(|(a, b)| a >= b) {
            return Err(Error::Config("level ranges must be contiguous and increasing".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignMode {
    #[default]
    Static,
    Semantic,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelTargets {
    /// 0 = background, otherwise class id in `1..=C`.
    pub labels: Vec<usize>,
    /// `(l, t, r, b)` from the unshifted location; zero for background.
    pub distances: Vec<[f64; 4]>,
    pub centerness: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoxTargets {
    pub levels: Vec<LevelTargets>,
}

impl BoxTargets {
    pub fn n_pos(&self) -> usize {
        self.levels.iter().flat_map(|l| &l.labels).filter(|&&c| c > 0).count()
    }

    pub fn centerness_sum(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.labels.iter().zip(&l.centerness))
            .filter(|(&c, _)| c > 0)
            .map(|(_, w)| w)
            .sum()
    }
}

/// `sqrt(min(l,r)/max(l,r) · min(t,b)/max(t,b))`.
pub fn centerness_target(d: [f64; 4]) -> Result<f64> {
    let [l, t, r, b] = d;
    if d.iter().any(|&v| v.is_nan() || v <= 0.0) {
        return Err(Error::Contract(format!("centerness needs positive margins, got {d:?}")));
    }
    Ok(((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt())
}

/// Assign each location a class and regression target.
///
/// A location is positive for a box when the box strictly contains both
/// the location and its effective centre (location plus semantic offset in
/// semantic mode), and the largest margin from the location falls in the
/// level's range. Overlapping candidates resolve to the smallest box.
pub fn assign_targets(
    locs: &LocationGrid,
    gts: &[GroundTruthBox],
    ranges: &LevelRanges,
    offsets: Option<&[Tensor]>,
    mode: AssignMode,
) -> Result<BoxTargets> {
    if ranges.ranges.len() < locs.levels.len() {
        return Err(Error::Config(format!(
            "{} level ranges for {} levels",
            ranges.ranges.len(),
            locs.levels.len()
        )));
    }
    let offsets = match mode {
        AssignMode::Static => None,
        AssignMode::Semantic => {
            let o = offsets.ok_or_else(|| Error::Contract("semantic assignment requires offsets".into()))?;
            if o.len() != locs.levels.len() {
                return Err(Error::Contract("one offset map per level is required".into()));
            }
            for (t, l) in o.iter().zip(&locs.levels) {
                if t.shape() != [2, l.height, l.width] {
                    return Err(Error::Contract(format!(
                        "offset map {:?} does not match a {}×{} level",
                        t.shape(),
                        l.height,
                        l.width
                    )));
                }
            }
            Some(o)
        }
    };

    let mut levels = Vec::with_capacity(locs.levels.len());
    for (li, level) in locs.levels.iter().enumerate() {
        let (lo, hi) = ranges.ranges[li];
        let n = level.points.len();
        let mut out = LevelTargets {
            labels: vec![0; n],
            distances: vec![[0.0; 4]; n],
            centerness: vec![0.0; n],
        };
        for (p, &(x, y)) in level.points.iter().enumerate() {
            let (ex, ey) = match offsets {
                Some(o) => (x + o[li].data()[p], y + o[li].data()[n + p]),
                None => (x, y),
            };
            let mut best: Option<(f64, &GroundTruthBox, [f64; 4])> = None;
            for gt in gts {
                let b = &gt.bbox;
                if !b.contains_strict(x, y) || !b.contains_strict(ex, ey) {
                    continue;
                }
                let d = [x - b.x1, y - b.y1, b.x2 - x, b.y2 - y];
                let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !(lo < m && m <= hi) {
                    continue;
                }
                let area = b.area();
                if best.as_ref().is_none_or(|(a, _, _)| area < *a) {
                    best = Some((area, gt, d));
                }
            }
            if let Some((_, gt, d)) = best {
                out.labels[p] = gt.class_id;
                out.distances[p] = d;
                out.centerness[p] = centerness_target(d)?;
            }
        }
        levels.push(out);
    }
    Ok(BoxTargets { levels })
}
