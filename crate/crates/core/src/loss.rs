//! Three-term detection loss: sigmoid focal classification, centerness-
//! weighted IoU regression and center-ness cross-entropy, each normalized
//! by the batch positive count. Every term comes with its analytic
//! gradient with respect to the head outputs.

use serde::{Deserialize, Serialize};

use crate::assign::BoxTargets;
use crate::error::{Error, Result};
use crate::head::HeadOutputs;
use crate::tensor::Tensor;

pub const IOU_LOSS_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegLoss {
    /// `−ln(IoU)`.
    #[default]
    LogIou,
    /// `1 − GIoU`.
    Giou,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma_focal: f64,
    /// Weight of the regression term.
    pub gamma_balance: f64,
    /// Weight of the center-ness term.
    pub beta_balance: f64,
    pub reg_loss: RegLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.25,
            gamma_focal: 2.0,
            gamma_balance: 1.0,
            beta_balance: 1.0,
            reg_loss: RegLoss::LogIou,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub center: f64,
    pub total: f64,
    pub n_pos: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.cls.is_finite() && self.reg.is_finite() && self.center.is_finite() && self.total.is_finite()
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.cls += other.cls;
        self.reg += other.reg;
        self.center += other.center;
        self.total += other.total;
        self.n_pos += other.n_pos;
    }
}

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::nn::kernels::sigmoid(x)
}

/// Sigmoid focal loss of one logit and its derivative.
pub fn focal_element(logit: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    if positive {
        let log_p = -softplus(-logit);
        let q = (1.0 - p).powf(gamma);
        (-alpha * q * log_p, alpha * q * (gamma * p * log_p - (1.0 - p)))
    } else {
        let log_q = -softplus(logit);
        let pg = p.powf(gamma);
        (-(1.0 - alpha) * pg * log_q, (1.0 - alpha) * pg * (p - gamma * (1.0 - p) * log_q))
    }
}

/// Binary cross-entropy between `σ(logit)` and `target`, and its derivative.
pub fn bce_element(logit: f64, target: f64) -> (f64, f64) {
    let loss = target * softplus(-logit) + (1.0 - target) * softplus(logit);
    (loss, sigmoid(logit) - target)
}

/// Regression loss of one prediction against one target. Both are margin
/// quadruples `(l, t, r, b)` about the same location; the prediction's
/// centre is shifted by `offset`. Returns the loss, its gradient with
/// respect to the predicted margins, and with respect to the offset.
pub fn box_loss_element(pred: [f64; 4], offset: (f64, f64), target: [f64; 4], kind: RegLoss) -> (f64, [f64; 4], [f64; 2]) {
    let (ox, oy) = offset;
    let p = [ox - pred[0], oy - pred[1], ox + pred[2], oy + pred[3]];
    let t = [-target[0], -target[1], target[2], target[3]];

    let iw = p[2].min(t[2]) - p[0].max(t[0]);
    let ih = p[3].min(t[3]) - p[1].max(t[1]);
    let overlap = iw > 0.0 && ih > 0.0;
    let inter = if overlap { iw * ih } else { 0.0 };
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let area_p = pw * ph;
    let area_t = (t[2] - t[0]) * (t[3] - t[1]);
    let union = area_p + area_t - inter;

    // d/d(px1, py1, px2, py2)
    let d_inter = if overlap {
        [
            if p[0] > t[0] { -ih } else { 0.0 },
            if p[1] > t[1] { -iw } else { 0.0 },
            if p[2] < t[2] { ih } else { 0.0 },
            if p[3] < t[3] { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_area_p = [-ph, -pw, ph, pw];
    let d_union: [f64; 4] = std::array::from_fn(|i| d_area_p[i] - d_inter[i]);

    let (loss, dp): (f64, [f64; 4]) = match kind {
        RegLoss::LogIou => {
            let (ue, ie) = (union + IOU_LOSS_EPS, inter + IOU_LOSS_EPS);
            let loss = ue.ln() - ie.ln();
            (loss, std::array::from_fn(|i| d_union[i] / ue - d_inter[i] / ie))
        }
        RegLoss::Giou => {
            let cw = p[2].max(t[2]) - p[0].min(t[0]);
            let ch = p[3].max(t[3]) - p[1].min(t[1]);
            let hull = cw * ch;
            let d_hull = [
                if p[0] < t[0] { -ch } else { 0.0 },
                if p[1] < t[1] { -cw } else { 0.0 },
                if p[2] > t[2] { ch } else { 0.0 },
                if p[3] > t[3] { cw } else { 0.0 },
            ];
            let ue = union + IOU_LOSS_EPS;
            let he = hull + IOU_LOSS_EPS;
            let loss = 1.0 - inter / ue + (hull - union) / he;
            let dp = std::array::from_fn(|i| {
                -d_inter[i] / ue + inter * d_union[i] / (ue * ue) + (d_hull[i] - d_union[i]) / he
                    - (hull - union) * d_hull[i] / (he * he)
            });
            (loss, dp)
        }
    };
    let dpred = [-dp[0], -dp[1], dp[2], dp[3]];
    let doff = [dp[0] + dp[2], dp[1] + dp[3]];
    (loss, dpred, doff)
}

/// Focal classification loss over all locations and classes, divided by
/// the positive count (floored at 1).
pub fn focal_loss(cls_logits: &[Tensor], targets: &BoxTargets, alpha: f64, gamma: f64) -> Result<f64> {
    check_levels(cls_logits.len(), targets)?;
    let mut sum = 0.0;
    for (logits, t) in cls_logits.iter().zip(&targets.levels) {
        let (c, h, w) = logits.chw();
        let hw = h * w;
        if t.labels.len() != hw {
            return Err(Error::Shape(format!("{} targets for a {h}×{w} level", t.labels.len())));
        }
        for k in 0..c {
            for p in 0..hw {
                sum += focal_element(logits.data()[k * hw + p], t.labels[p] == k + 1, alpha, gamma).0;
            }
        }
    }
    Ok(sum / (targets.n_pos().max(1) as f64))
}

/// Centerness-weighted regression loss over positive locations, normalized
/// by the sum of weights. Predictions and targets share each location.
pub fn iou_loss(pred: &[[f64; 4]], target: &[[f64; 4]], weights: &[f64]) -> Result<f64> {
    iou_loss_with(pred, target, weights, RegLoss::LogIou)
}

pub fn iou_loss_with(pred: &[[f64; 4]], target: &[[f64; 4]], weights: &[f64], kind: RegLoss) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != weights.len() {
        return Err(Error::Shape("prediction, target and weight counts differ".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((p, t), &w) in pred.iter().zip(target).zip(weights) {
        if p.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Contract(format!("predicted margins must be positive, got {p:?}")));
        }
        num += w * box_loss_element(*p, (0.0, 0.0), *t, kind).0;
        den += w;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Center-ness cross-entropy over positive locations, divided by the
/// positive count; zero without positives.
pub fn centerness_loss(logits: &[Tensor], targets: &BoxTargets) -> Result<f64> {
    check_levels(logits.len(), targets)?;
    let n_pos = targets.n_pos();
    if n_pos == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (l, t) in logits.iter().zip(&targets.levels) {
        for (p, &label) in t.labels.iter().enumerate() {
            if label > 0 {
                sum += bce_element(l.data()[p], t.centerness[p]).0;
            }
        }
    }
    Ok(sum / n_pos as f64)
}

fn check_levels(n: usize, targets: &BoxTargets) -> Result<()> {
    if n != targets.levels.len() {
        return Err(Error::Shape(format!("{n} prediction levels but {} target levels", targets.levels.len())));
    }
    Ok(())
}

/// Borrowed per-level predictions in loss space.
#[derive(Clone, Copy, Debug)]
pub struct LevelPrediction<'a> {
    pub cls_logits: &'a Tensor,
    /// 4×H×W margins in pixels.
    pub distances: &'a Tensor,
    pub centerness_logit: &'a Tensor,
    /// 2×H×W semantic offsets in pixels.
    pub offsets: &'a Tensor,
}

#[derive(Clone, Debug)]
pub struct LevelGrads {
    pub cls_logits: Tensor,
    pub distances: Tensor,
    pub centerness_logit: Tensor,
    pub offsets: Tensor,
}

/// Batch-wide normalizers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizers {
    /// Positive count, floored at 1.
    pub n_pos: f64,
    /// Sum of centerness weights over positives.
    pub weight_sum: f64,
}

impl Normalizers {
    pub fn from_targets<'a>(targets: impl IntoIterator<Item = &'a BoxTargets>) -> Self {
        let (mut n, mut w) = (0usize, 0.0);
        for t in targets {
            n += t.n_pos();
            w += t.centerness_sum();
        }
        Normalizers {
            n_pos: n.max(1) as f64,
            weight_sum: w,
        }
    }
}

/// Loss contribution of one image and its gradients with respect to the
/// head outputs. Terms are pre-divided by the batch normalizers, so the
/// batch loss is the plain sum over images. With `revise_regression` the
/// predicted box is shifted by the semantic offset before comparison.
pub fn image_loss(
    preds: &[LevelPrediction],
    targets: &BoxTargets,
    cfg: &LossConfig,
    norms: Normalizers,
    revise_regression: bool,
) -> Result<(LossBreakdown, Vec<LevelGrads>)> {
    check_levels(preds.len(), targets)?;
    let mut cls = 0.0;
    let mut reg = 0.0;
    let mut center = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    let reg_scale = if norms.weight_sum > 0.0 { cfg.gamma_balance / norms.weight_sum } else { 0.0 };

    for (pred, t) in preds.iter().zip(&targets.levels) {
        let (c, h, w) = pred.cls_logits.chw();
        let hw = h * w;
        if t.labels.len() != hw || pred.distances.shape() != [4, h, w] || pred.offsets.shape() != [2, h, w] {
            return Err(Error::Shape(format!("level prediction/target shape mismatch at {h}×{w}")));
        }
        let mut g_cls = Tensor::zeros(&[c, h, w]);
        for k in 0..c {
            for p in 0..hw {
                let i = k * hw + p;
                let (l, g) = focal_element(pred.cls_logits.data()[i], t.labels[p] == k + 1, cfg.alpha, cfg.gamma_focal);
                cls += l;
                g_cls.data_mut()[i] = g / norms.n_pos;
            }
        }
        let mut g_dist = Tensor::zeros(&[4, h, w]);
        let mut g_ctr = Tensor::zeros(&[1, h, w]);
        let mut g_off = Tensor::zeros(&[2, h, w]);
        for p in 0..hw {
            if t.labels[p] == 0 {
                continue;
            }
            let d: [f64; 4] = std::array::from_fn(|k| pred.distances.data()[k * hw + p]);
            if d.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                reg = f64::INFINITY;
                continue;
            }
            let off = if revise_regression {
                (pred.offsets.data()[p], pred.offsets.data()[hw + p])
            } else {
                (0.0, 0.0)
            };
            let weight = t.centerness[p];
            let (l, dd, doff) = box_loss_element(d, off, t.distances[p], cfg.reg_loss);
            reg += weight * l;
            for k in 0..4 {
                g_dist.data_mut()[k * hw + p] = weight * dd[k] * reg_scale;
            }
            if revise_regression {
                g_off.data_mut()[p] = weight * doff[0] * reg_scale;
                g_off.data_mut()[hw + p] = weight * doff[1] * reg_scale;
            }
            let (lc, gc) = bce_element(pred.centerness_logit.data()[p], weight);
            center += lc;
            g_ctr.data_mut()[p] = cfg.beta_balance * gc / norms.n_pos;
        }
        grads.push(LevelGrads {
            cls_logits: g_cls,
            distances: g_dist,
            centerness_logit: g_ctr,
            offsets: g_off,
        });
    }

    let cls = cls / norms.n_pos;
    let reg = if norms.weight_sum > 0.0 { reg / norms.weight_sum } else { 0.0 };
    let center = center / norms.n_pos;
    let breakdown = LossBreakdown {
        cls,
        reg,
        center,
        total: cls + cfg.gamma_balance * reg + cfg.beta_balance * center,
        n_pos: targets.n_pos(),
    };
    Ok((breakdown, grads))
}

/// Full loss over all levels of one image's head outputs.
pub fn total_loss(outputs: &[HeadOutputs], targets: &BoxTargets, cfg: &LossConfig) -> Result<LossBreakdown> {
    let dist: Vec<Tensor> = outputs.iter().map(HeadOutputs::distances).collect();
    let offs: Vec<Tensor> = outputs.iter().map(HeadOutputs::offsets).collect();
    let preds: Vec<LevelPrediction> = outputs
        .iter()
        .zip(dist.iter().zip(&offs))
        .map(|(o, (d, off))| LevelPrediction {
            cls_logits: &o.cls_logits,
            distances: d,
            centerness_logit: &o.centerness_logit,
            offsets: off,
        })
        .collect();
    let norms = Normalizers::from_targets([targets]);
    Ok(image_loss(&preds, targets, cfg, norms, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::LevelTargets;

    #[test]
    fn focal_hand_values() {
        let (l, _) = focal_element(0.0, true, 0.25, 2.0);
        assert!((l - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.043_321_698_784_996_6).abs() < 1e-12);
        assert!(focal_element(60.0, true, 0.25, 2.0).0 < 1e-20);
        assert!(focal_element(-60.0, false, 0.25, 2.0).0 < 1e-20);
    }

    #[test]
    fn elementwise_gradients_match_differences() {
        let h = 1e-6;
        for &x in &[-3.0, -0.4, 0.0, 0.7, 2.5] {
            for pos in [true, false] {
                let fd = (focal_element(x + h, pos, 0.25, 2.0).0 - focal_element(x - h, pos, 0.25, 2.0).0) / (2.0 * h);
                assert!((fd - focal_element(x, pos, 0.25, 2.0).1).abs() < 1e-8);
            }
            let fd = (bce_element(x + h, 0.3).0 - bce_element(x - h, 0.3).0) / (2.0 * h);
            assert!((fd - bce_element(x, 0.3).1).abs() < 1e-8);
        }
        let target = [3.0, 2.0, 5.0, 4.0];
        for kind in [RegLoss::LogIou, RegLoss::Giou] {
            let pred = [2.3, 2.9, 4.1, 3.3];
            let off = (0.4, -0.7);
            let (_, dp, doff) = box_loss_element(pred, off, target, kind);
            for k in 0..4 {
                let mut a = pred;
                let mut b = pred;
                a[k] += h;
                b[k] -= h;
                let fd = (box_loss_element(a, off, target, kind).0 - box_loss_element(b, off, target, kind).0) / (2.0 * h);
                assert!((fd - dp[k]).abs() < 1e-6, "{kind:?} margin {k}: {fd} vs {}", dp[k]);
            }
            let fdx = (box_loss_element(pred, (off.0 + h, off.1), target, kind).0
                - box_loss_element(pred, (off.0 - h, off.1), target, kind).0)
                / (2.0 * h);
            assert!((fdx - doff[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn iou_loss_hand_values() {
        assert_eq!(iou_loss(&[[1.0, 2.0, 3.0, 4.0]], &[[1.0, 2.0, 3.0, 4.0]], &[0.5]).unwrap(), 0.0);
        let l = iou_loss(&[[1.0, 1.0, 1.0, 3.0]], &[[1.0, 1.0, 1.0, 1.0]], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);
        assert!(matches!(
            iou_loss(&[[0.0, 1.0, 1.0, 1.0]], &[[1.0; 4]], &[1.0]),
            Err(Error::Contract(_))
        ));
        // co-anchored boxes always overlap, so the loss stays finite
        let l = iou_loss(&[[1e-3, 1e-3, 1e-3, 1e-3]], &[[50.0, 50.0, 50.0, 50.0]], &[1.0]).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn centerness_bce_hand_values() {
        let targets = BoxTargets {
            levels: vec![LevelTargets {
                labels: vec![1, 0],
                distances: vec![[1.0; 4], [0.0; 4]],
                centerness: vec![1.0, 0.0],
            }],
        };
        let logits = vec![Tensor::from_vec(&[1, 1, 2], vec![0.0, 5.0]).unwrap()];
        assert!((centerness_loss(&logits, &targets).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let empty = BoxTargets {
            levels: vec![LevelTargets {
                labels: vec![0, 0],
                distances: vec![[0.0; 4]; 2],
                centerness: vec![0.0; 2],
            }],
        };
        assert_eq!(centerness_loss(&logits, &empty).unwrap(), 0.0);
    }
}
