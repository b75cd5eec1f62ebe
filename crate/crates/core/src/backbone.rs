//! Basis feature pyramid: a small built-in convolutional backbone whose
//! four stage outputs (strides 4, 8, 16, 32) are projected by 1×1 lateral
//! convolutions to a uniform channel width. No cross-level fusion here.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvNormRelu};
use crate::nn::{Initializer, ParamStore, Tape, Var};
use crate::parallel;
use crate::tensor::Tensor;

pub const BASIS_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const BASIS_CHANNELS: usize = 256;
/// Stage output widths of ResNet-50's C2–C5.
pub const RESNET50_STAGE_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<FeatureMap>,
}

impl Pyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Tiny,
    Resnet50Adapter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub base_width: usize,
    /// Channel width of every basis level after lateral projection.
    pub out_channels: usize,
    /// External weight source; required by the ResNet-50 adapter.
    pub weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Tiny,
            base_width: 16,
            out_channels: BASIS_CHANNELS,
            weights: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TinyStage {
    pub down: ConvNormRelu,
    pub refine: ConvNormRelu,
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Tiny {
        stem: ConvNormRelu,
        stages: Vec<TinyStage>,
        laterals: Vec<Conv2d>,
        widths: Vec<usize>,
    },
    /// Projects externally computed C2–C5 stage outputs to the basis width.
    Resnet50Adapter { laterals: Vec<Conv2d> },
}

impl Backbone {
    pub fn build(cfg: &BackboneConfig, store: &mut ParamStore, init: &mut Initializer) -> Result<Self> {
        if cfg.out_channels == 0 {
            return Err(Error::Config("backbone out_channels must be positive".into()));
        }
        match cfg.kind {
            BackboneKind::Tiny => {
                if cfg.base_width < 8 {
                    return Err(Error::Config(format!("base_width {} must be at least 8", cfg.base_width)));
                }
                let stem = ConvNormRelu::new(store, init, "backbone.stem", 3, cfg.base_width, 3, 2);
                let widths: Vec<usize> = (0..4).map(|i| cfg.base_width << i).collect();
                let mut stages = Vec::new();
                let mut c_in = cfg.base_width;
                for (i, &w) in widths.iter().enumerate() {
                    stages.push(TinyStage {
                        down: ConvNormRelu::new(store, init, &format!("backbone.stage{i}.down"), c_in, w, 3, 2),
                        refine: ConvNormRelu::new(store, init, &format!("backbone.stage{i}.refine"), w, w, 3, 1),
                    });
                    c_in = w;
                }
                let laterals = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        Conv2d::new(store, init, &format!("backbone.lateral{i}"), w, cfg.out_channels, 1, 1, true)
                    })
                    .collect();
                Ok(Backbone::Tiny {
                    stem,
                    stages,
                    laterals,
                    widths,
                })
            }
            BackboneKind::Resnet50Adapter => {
                if cfg.weights.is_none() {
                    return Err(Error::Config(
                        "resnet50-adapter backbone: weights required (set backbone.weights)".into(),
                    ));
                }
                let laterals = RESNET50_STAGE_CHANNELS
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        Conv2d::new(store, init, &format!("backbone.lateral{i}"), w, cfg.out_channels, 1, 1, true)
                    })
                    .collect();
                Ok(Backbone::Resnet50Adapter { laterals })
            }
        }
    }

    /// Stage widths before lateral projection.
    pub fn stage_widths(&self) -> Vec<usize> {
        match self {
            Backbone::Tiny { widths, .. } => widths.clone(),
            Backbone::Resnet50Adapter { .. } => RESNET50_STAGE_CHANNELS.to_vec(),
        }
    }

    /// Record the basis pyramid for one 3×S×S image.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("expected a 3×S×S image, got {shape:?}")));
        }
        for (dim, &n) in ["height", "width"].iter().zip(&shape[1..]) {
            if n == 0 || n % 32 != 0 {
                return Err(Error::Shape(format!("image {dim} {n} is not divisible by 32")));
            }
        }
        match self {
            Backbone::Tiny {
                stem, stages, laterals, ..
            } => {
                let mut x = stem.forward(tape, image);
                let mut out = Vec::with_capacity(4);
                for (stage, lateral) in stages.iter().zip(laterals) {
                    x = stage.down.forward(tape, x);
                    x = stage.refine.forward(tape, x);
                    out.push(lateral.forward(tape, x));
                }
                Ok(out)
            }
            Backbone::Resnet50Adapter { .. } => Err(Error::Config(
                "resnet50-adapter consumes external stage features; use forward_stages".into(),
            )),
        }
    }

    /// Project externally supplied C2–C5 stage features (adapter only).
    pub fn forward_stages(&self, tape: &mut Tape, stages: &[Var]) -> Result<Vec<Var>> {
        let laterals = match self {
            Backbone::Resnet50Adapter { laterals } => laterals,
            Backbone::Tiny { .. } => return Err(Error::Config("tiny backbone computes its own stages".into())),
        };
        if stages.len() != 4 {
            return Err(Error::Shape(format!("expected 4 stage features, got {}", stages.len())));
        }
        let mut out = Vec::with_capacity(4);
        for (i, (&s, l)) in stages.iter().zip(laterals).enumerate() {
            let c = tape.value(s).chw().0;
            if c != l.in_channels {
                return Err(Error::Shape(format!("stage {i} has {c} channels, expected {}", l.in_channels)));
            }
            out.push(l.forward(tape, s));
        }
        Ok(out)
    }
}

/// Basis pyramids for a batch of images (parallel over images).
pub fn extract_basis(backbone: &Backbone, store: &ParamStore, images: &[Tensor]) -> Result<Vec<Pyramid>> {
    parallel::map(images, |img| {
        let mut tape = Tape::new(store);
        let x = tape.input(img.clone());
        let levels = backbone.forward(&mut tape, x)?;
        Ok(Pyramid {
            levels: levels
                .iter()
                .zip(BASIS_STRIDES)
                .map(|(&v, stride)| FeatureMap {
                    values: tape.value(v).clone(),
                    stride,
                })
                .collect(),
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(base: usize, out: usize, seed: u64) -> (Backbone, ParamStore) {
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            base_width: base,
            out_channels: out,
            ..Default::default()
        };
        let b = Backbone::build(&cfg, &mut store, &mut Initializer::new(seed)).unwrap();
        (b, store)
    }

    #[test]
    fn stage_widths_double() {
        let (b, _) = tiny(16, 256, 0);
        assert_eq!(b.stage_widths(), vec![16, 32, 64, 128]);
    }

    #[test]
    fn build_is_seed_deterministic() {
        let (_, a) = tiny(8, 16, 5);
        let (_, b) = tiny(8, 16, 5);
        assert_eq!(a, b);
    }

    #[test]
    fn level_shapes_at_128() {
        let (b, store) = tiny(8, 256, 1);
        let img = Initializer::with_std(2, 0.3).gaussian(&[3, 128, 128]);
        let pyr = extract_basis(&b, &store, &[img]).unwrap();
        let sizes: Vec<_> = pyr[0].levels.iter().map(|l| l.values.shape().to_vec()).collect();
        assert_eq!(sizes, vec![vec![256, 32, 32], vec![256, 16, 16], vec![256, 8, 8], vec![256, 4, 4]]);
        let strides: Vec<_> = pyr[0].levels.iter().map(|l| l.stride).collect();
        assert_eq!(strides, BASIS_STRIDES);
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let (b, store) = tiny(8, 16, 1);
        let pyr = extract_basis(&b, &store, &[Tensor::zeros(&[3, 64, 64])]).unwrap();
        for l in &pyr[0].levels {
            assert!(l.values.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn indivisible_input_names_dimension() {
        let (b, store) = tiny(8, 16, 1);
        match extract_basis(&b, &store, &[Tensor::zeros(&[3, 64, 80])]) {
            Err(Error::Shape(msg)) => assert!(msg.contains("width 80")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adapter_needs_weights() {
        let cfg = BackboneConfig {
            kind: BackboneKind::Resnet50Adapter,
            ..Default::default()
        };
        let r = Backbone::build(&cfg, &mut ParamStore::new(), &mut Initializer::new(0));
        match r {
            Err(Error::Config(msg)) => assert!(msg.contains("weights required")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn small_base_width_rejected() {
        let cfg = BackboneConfig {
            base_width: 4,
            ..Default::default()
        };
        assert!(Backbone::build(&cfg, &mut ParamStore::new(), &mut Initializer::new(0)).is_err());
    }
}
