//! The assembled detector: backbone → optional SEDAM → shared head.

use serde::{Deserialize, Serialize};

use crate::assign::{generate_locations, LocationGrid};
use crate::attention::AttentionVariant;
use crate::backbone::{Backbone, BackboneConfig, BASIS_STRIDES};
use crate::decode::{postprocess, DetectionSet, PostprocessConfig};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadOutputs, HeadParams, HeadVars};
use crate::nn::{Initializer, ParamStore, Tape, Var};
use crate::sedam::{Sedam, SedamConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub use_sedam: bool,
    pub sedam: SedamConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            use_sedam: true,
            sedam: SedamConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

/// The four compared architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// No shared encoder-decoder.
    A,
    /// Encoder-decoder with CBAM.
    B,
    /// Encoder-decoder with CBAM plus minimum pooling.
    C,
    /// Encoder-decoder with channel-only attention.
    Ours,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::Ours];

    pub fn name(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::Ours => "ours",
        }
    }

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut c = cfg.clone();
        c.use_sedam = self != Variant::A;
        c.sedam.attention = match self {
            Variant::A => cfg.sedam.attention,
            Variant::B => AttentionVariant::Cbam,
            Variant::C => AttentionVariant::CbamMin,
            Variant::Ours => AttentionVariant::ChannelOnly,
        };
        c
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub sedam: Option<Sedam>,
    pub head: HeadParams,
}

impl Detector {
    /// Build and initialize: Gaussian(0, 0.01) weights, zero biases, unit
    /// norm scales, classification prior bias, unit level scales.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let backbone = Backbone::build(&config.backbone, &mut store, &mut init)?;
        let channels = config.backbone.out_channels;
        let sedam = if config.use_sedam {
            Some(Sedam::new(&mut store, &mut init, channels, &config.sedam)?)
        } else {
            None
        };
        let head = HeadParams::new(&mut store, &mut init, channels, BASIS_STRIDES.len(), &config.head)?;
        Ok(Detector {
            config: config.clone(),
            store,
            backbone,
            sedam,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    pub fn strides(&self) -> [usize; 4] {
        BASIS_STRIDES
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Record the full forward pass for one image.
    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<Vec<HeadVars>> {
        let basis = self.backbone.forward(tape, image)?;
        let levels = match &self.sedam {
            Some(s) => s.forward(tape, &basis)?,
            None => basis,
        };
        levels
            .iter()
            .zip(BASIS_STRIDES)
            .enumerate()
            .map(|(i, (&x, stride))| self.head.forward(tape, x, i, stride))
            .collect()
    }

    /// Head outputs for one image.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<HeadOutputs>> {
        let mut tape = Tape::new(&self.store);
        let x = tape.input(image.clone());
        let vars = self.forward(&mut tape, x)?;
        Ok(vars.iter().map(|v| self.head.outputs(&tape, v)).collect())
    }

    /// Location grid matching the head outputs for an `h × w` input.
    pub fn locations(&self, h: usize, w: usize) -> Result<LocationGrid> {
        let shapes: Vec<(usize, usize)> = BASIS_STRIDES.iter().map(|s| (h / s, w / s)).collect();
        generate_locations(&shapes, &BASIS_STRIDES)
    }

    /// Zero the semantic-offset output conv.
    pub fn zero_semantic_branch(&mut self) {
        let ids = [Some(self.head.sem_out.weight), self.head.sem_out.bias];
        for id in ids.into_iter().flatten() {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Full inference on one network-ready image (3×H×W, H and W multiples of
/// 32). Boxes are in the image's pixel frame.
pub fn infer_image(model: &Detector, image_id: u64, image: &Tensor, cfg: &PostprocessConfig) -> Result<DetectionSet> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected a 3×H×W image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let outputs = model.predict(image)?;
    let locs = model.locations(h, w)?;
    let detections = postprocess(&locs.levels, &outputs, cfg, (w as f64, h as f64))?;
    Ok(DetectionSet { image_id, detections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;

    pub(crate) fn tiny_config(classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                base_width: 8,
                out_channels: 32,
                ..Default::default()
            },
            use_sedam: true,
            sedam: SedamConfig {
                width: 32,
                attention_params: AttentionConfig {
                    reduction: 4,
                    spatial_kernel: 3,
                    shared_mlp: true,
                },
                ..Default::default()
            },
            head: HeadConfig {
                num_classes: classes,
                tower_depth: 1,
                prior_prob: 0.01,
            },
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Detector::new(&tiny_config(2), 4).unwrap();
        let b = Detector::new(&tiny_config(2), 4).unwrap();
        for (x, y) in a.store.entries().iter().zip(b.store.entries()) {
            assert_eq!(x.tensor, y.tensor);
        }
        let c = Detector::new(&tiny_config(2), 5).unwrap();
        assert_ne!(a.store.entries()[0].tensor, c.store.entries()[0].tensor);
    }

    #[test]
    fn norm_shifts_start_at_zero() {
        let d = Detector::new(&tiny_config(2), 0).unwrap();
        for e in d.store.entries() {
            if e.name.ends_with(".beta") {
                assert!(e.tensor.data().iter().all(|&v| v == 0.0));
            }
            if e.name.ends_with(".gamma") {
                assert!(e.tensor.data().iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn variant_a_is_smallest() {
        let base = tiny_config(2);
        let counts: Vec<usize> = Variant::ALL
            .iter()
            .map(|v| Detector::new(&v.apply(&base), 0).unwrap().num_params())
            .collect();
        assert!(counts[0] < counts[1] && counts[0] < counts[2] && counts[0] < counts[3]);
        assert_eq!(counts[2] - counts[1], 3 * 9);
    }

    #[test]
    fn untrained_model_detects_nothing() {
        let d = Detector::new(&tiny_config(3), 1).unwrap();
        let img = Initializer::with_std(2, 0.3).gaussian(&[3, 64, 64]);
        let set = infer_image(&d, 1, &img, &PostprocessConfig::default()).unwrap();
        assert!(set.detections.is_empty());
        assert!(matches!(
            infer_image(&d, 1, &Tensor::zeros(&[3, 40, 64]), &PostprocessConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zeroed_semantic_branch_makes_revision_a_no_op() {
        let mut d = Detector::new(&tiny_config(2), 3).unwrap();
        d.zero_semantic_branch();
        let img = Initializer::with_std(2, 0.3).gaussian(&[3, 64, 64]);
        let cfg = PostprocessConfig {
            score_threshold: 0.0,
            ..Default::default()
        };
        let a = infer_image(&d, 1, &img, &cfg).unwrap();
        let b = infer_image(&d, 1, &img, &PostprocessConfig { revise: false, ..cfg }).unwrap();
        assert!(!a.detections.is_empty());
        assert_eq!(a, b);
    }
}
