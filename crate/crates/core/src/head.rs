//! Shared detection head: classification, margin regression, center-ness
//! and semantic-center branches, one parameter set for every level plus a
//! learnable regression scale per level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::sigmoid;
use crate::nn::layers::{Conv2d, ConvNormRelu};
use crate::nn::{Initializer, ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub tower_depth: usize,
    /// Initial foreground probability encoded in the classification bias.
    pub prior_prob: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_classes: 80,
            tower_depth: 4,
            prior_prob: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub channels: usize,
    pub num_classes: usize,
    pub cls_tower: Vec<ConvNormRelu>,
    pub reg_tower: Vec<ConvNormRelu>,
    pub cls_out: Conv2d,
    pub reg_out: Conv2d,
    pub ctr_out: Conv2d,
    pub sem_out: Conv2d,
    pub scales: Vec<ParamId>,
}

/// Raw per-level predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub cls_logits: Tensor,
    pub reg_raw: Tensor,
    pub centerness_logit: Tensor,
    pub semantic_raw: Tensor,
    pub stride: usize,
    /// Value of this level's learnable regression scale.
    pub scale: f64,
}

impl HeadOutputs {
    /// Margins in pixels: `exp(scale · raw) · stride`.
    pub fn distances(&self) -> Tensor {
        let (s, k) = (self.scale, self.stride as f64);
        self.reg_raw.map(|v| (s * v).exp() * k)
    }

    pub fn offsets(&self) -> Tensor {
        semantic_offsets(&self.semantic_raw, self.stride)
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.cls_logits.chw();
        (h, w)
    }
}

/// Tape handles for one level's head outputs, already mapped to pixels.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub cls_logits: Var,
    pub reg_raw: Var,
    pub distances: Var,
    pub centerness_logit: Var,
    pub semantic_raw: Var,
    pub offsets: Var,
    pub stride: usize,
    pub level: usize,
}

/// Semantic center offsets in pixels: `(2σ(raw) − 1) · stride`.
pub fn semantic_offsets(raw: &Tensor, stride: usize) -> Tensor {
    let s = stride as f64;
    raw.map(|v| (2.0 * sigmoid(v) - 1.0) * s)
}

impl HeadParams {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        channels: usize,
        num_levels: usize,
        cfg: &HeadConfig,
    ) -> Result<Self> {
        if cfg.num_classes == 0 {
            return Err(Error::Config("head.num_classes must be positive".into()));
        }
        if !(0.0 < cfg.prior_prob && cfg.prior_prob < 1.0) {
            return Err(Error::Config("head.prior_prob must lie in (0, 1)".into()));
        }
        let tower = |store: &mut ParamStore, init: &mut Initializer, name: &str| -> Vec<ConvNormRelu> {
            (0..cfg.tower_depth)
                .map(|i| ConvNormRelu::new(store, init, &format!("head.{name}{i}"), channels, channels, 3, 1))
                .collect()
        };
        let cls_tower = tower(store, init, "cls_tower");
        let reg_tower = tower(store, init, "reg_tower");
        let cls_out = Conv2d::new(store, init, "head.cls_out", channels, cfg.num_classes, 3, 1, true);
        let prior = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
        store
            .get_mut(cls_out.bias.expect("cls bias"))
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = prior);
        let reg_out = Conv2d::new(store, init, "head.reg_out", channels, 4, 3, 1, true);
        let ctr_out = Conv2d::new(store, init, "head.ctr_out", channels, 1, 3, 1, true);
        let sem_out = Conv2d::new(store, init, "head.sem_out", channels, 2, 3, 1, true);
        // zero offsets at start: semantic assignment begins from the static one
        for id in [Some(sem_out.weight), sem_out.bias].into_iter().flatten() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let scales = (0..num_levels)
            .map(|i| store.add(format!("head.scale{i}"), Tensor::scalar(1.0)))
            .collect();
        Ok(HeadParams {
            channels,
            num_classes: cfg.num_classes,
            cls_tower,
            reg_tower,
            cls_out,
            reg_out,
            ctr_out,
            sem_out,
            scales,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, level: usize, stride: usize) -> Result<HeadVars> {
        let c = tape.value(x).chw().0;
        if c != self.channels {
            return Err(Error::Shape(format!("head expects {} channels, got {c}", self.channels)));
        }
        let scale = *self
            .scales
            .get(level)
            .ok_or_else(|| Error::Shape(format!("no regression scale for level {level}")))?;
        let mut cls = x;
        for b in &self.cls_tower {
            cls = b.forward(tape, cls);
        }
        let mut reg = x;
        for b in &self.reg_tower {
            reg = b.forward(tape, reg);
        }
        let cls_logits = self.cls_out.forward(tape, cls);
        let reg_raw = self.reg_out.forward(tape, reg);
        let centerness_logit = self.ctr_out.forward(tape, reg);
        let semantic_raw = self.sem_out.forward(tape, reg);
        let s = tape.param(scale);
        let distances = tape.scaled_exp(reg_raw, s, stride as f64);
        let sig = tape.sigmoid(semantic_raw);
        let offsets = tape.affine(sig, 2.0 * stride as f64, -(stride as f64));
        Ok(HeadVars {
            cls_logits,
            reg_raw,
            distances,
            centerness_logit,
            semantic_raw,
            offsets,
            stride,
            level,
        })
    }

    pub fn outputs(&self, tape: &Tape, v: &HeadVars) -> HeadOutputs {
        HeadOutputs {
            cls_logits: tape.value(v.cls_logits).clone(),
            reg_raw: tape.value(v.reg_raw).clone(),
            centerness_logit: tape.value(v.centerness_logit).clone(),
            semantic_raw: tape.value(v.semantic_raw).clone(),
            stride: v.stride,
            scale: tape.params().get(self.scales[v.level]).data()[0],
        }
    }

    /// Scalar parameters excluding the per-level regression scales.
    pub fn shared_param_count(store: &ParamStore) -> usize {
        store
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("head.") && !e.name.starts_with("head.scale"))
            .map(|e| e.tensor.len())
            .sum()
    }
}

/// Run the head on a plain feature map.
pub fn head_forward(store: &ParamStore, head: &HeadParams, f: &Tensor, level: usize, stride: usize) -> Result<HeadOutputs> {
    let mut tape = Tape::new(store);
    let x = tape.input(f.clone());
    let v = head.forward(&mut tape, x, level, stride)?;
    Ok(head.outputs(&tape, &v))
}
