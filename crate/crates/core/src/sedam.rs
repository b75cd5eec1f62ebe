//! Shared encoder-decoder with attention. One parameter set is applied to
//! every pyramid level: three stride-2 conv blocks and a smoothing conv
//! encode, three bilinear-upsample blocks (each ending in an attention
//! gate) decode, and the result is fused back onto the level's input.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionBlock, AttentionConfig, AttentionVariant};
use crate::backbone::{FeatureMap, Pyramid};
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, ConvNormRelu};
use crate::nn::{Initializer, ParamStore, Tape, Var};
use crate::parallel;

pub const ENCODER_BLOCKS: usize = 3;
/// Spatial reduction of the encoder (2^3).
pub const ENCODER_FACTOR: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Add,
    ConcatProject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SedamConfig {
    pub width: usize,
    pub attention: AttentionVariant,
    pub fusion: Fusion,
    #[serde(flatten)]
    pub attention_params: AttentionConfig,
}

impl Default for SedamConfig {
    fn default() -> Self {
        SedamConfig {
            width: 640,
            attention: AttentionVariant::ChannelOnly,
            fusion: Fusion::Add,
            attention_params: AttentionConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub conv: ConvNormRelu,
    pub attention: AttentionBlock,
}

#[derive(Clone, Debug)]
pub struct Sedam {
    pub channels: usize,
    pub width: usize,
    pub fusion: Fusion,
    pub encoder: Vec<ConvNormRelu>,
    pub smooth: Conv2d,
    pub decoder: Vec<DecoderBlock>,
    pub project: Option<Conv2d>,
}

impl Sedam {
    /// Build for basis features of `channels` channels.
    pub fn new(store: &mut ParamStore, init: &mut Initializer, channels: usize, cfg: &SedamConfig) -> Result<Self> {
        if cfg.width == 0 || cfg.width % 32 != 0 {
            return Err(Error::Config(format!("sedam.width {} must be a positive multiple of 32", cfg.width)));
        }
        let w = cfg.width;
        let encoder = (0..ENCODER_BLOCKS)
            .map(|i| {
                let c_in = if i == 0 { channels } else { w };
                ConvNormRelu::new(store, init, &format!("sedam.enc{i}"), c_in, w, 3, 2)
            })
            .collect();
        let smooth = Conv2d::new(store, init, "sedam.smooth", w, w, 3, 1, true);
        let mut decoder = Vec::with_capacity(ENCODER_BLOCKS);
        for i in 0..ENCODER_BLOCKS {
            let c_out = if i + 1 == ENCODER_BLOCKS { channels } else { w };
            decoder.push(DecoderBlock {
                conv: ConvNormRelu::new(store, init, &format!("sedam.dec{i}"), w, c_out, 1, 1),
                attention: AttentionBlock::new(
                    store,
                    init,
                    &format!("sedam.dec{i}.att"),
                    cfg.attention,
                    c_out,
                    &cfg.attention_params,
                )?,
            });
        }
        let project = (cfg.fusion == Fusion::ConcatProject)
            .then(|| Conv2d::new(store, init, "sedam.fuse", 2 * channels, channels, 1, 1, true));
        Ok(Sedam {
            channels,
            width: w,
            fusion: cfg.fusion,
            encoder,
            smooth,
            decoder,
            project,
        })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<(usize, usize)> {
        let (c, h, w) = tape.value(x).chw();
        if c != self.channels {
            return Err(Error::Shape(format!("sedam expects {} channels, got {c}", self.channels)));
        }
        Ok((h, w))
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (h, w) = self.check_input(tape, x)?;
        if h % ENCODER_FACTOR != 0 || w % ENCODER_FACTOR != 0 {
            return Err(Error::Shape(format!("sedam input {h}×{w} is not divisible by {ENCODER_FACTOR}")));
        }
        let mut y = x;
        for block in &self.encoder {
            y = block.forward(tape, y);
        }
        Ok(self.smooth.forward(tape, y))
    }

    pub fn decode(&self, tape: &mut Tape, latent: Var) -> Result<Var> {
        let c = tape.value(latent).chw().0;
        if c != self.width {
            return Err(Error::Shape(format!("latent has {c} channels, expected {}", self.width)));
        }
        let mut y = latent;
        for block in &self.decoder {
            y = tape.upsample2x(y);
            y = block.conv.forward(tape, y);
            y = block.attention.forward(tape, y)?;
        }
        Ok(y)
    }

    /// Enhance one level. Levels smaller than 8 cells on a side bypass the
    /// encoder-decoder and pass through unchanged.
    pub fn apply_level(&self, tape: &mut Tape, x: Var, level: usize) -> Result<Var> {
        let (h, w) = self.check_input(tape, x).map_err(|e| level_err(level, e))?;
        if h < ENCODER_FACTOR || w < ENCODER_FACTOR {
            return Ok(x);
        }
        let latent = self.encode(tape, x).map_err(|e| level_err(level, e))?;
        let dec = self.decode(tape, latent)?;
        match &self.project {
            None => Ok(tape.add(dec, x)),
            Some(p) => {
                let cat = tape.concat(&[dec, x]);
                Ok(p.forward(tape, cat))
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, levels: &[Var]) -> Result<Vec<Var>> {
        levels
            .iter()
            .enumerate()
            .map(|(i, &x)| self.apply_level(tape, x, i))
            .collect()
    }
}

fn level_err(level: usize, e: Error) -> Error {
    match e {
        Error::Shape(msg) => Error::Shape(format!("pyramid level {level}: {msg}")),
        other => other,
    }
}

/// Apply the shared module to every level of a pyramid (parallel over levels).
pub fn sedam_apply(store: &ParamStore, sedam: &Sedam, pyr: &Pyramid) -> Result<Pyramid> {
    let results = parallel::map_range(pyr.levels.len(), |i| {
        let mut tape = Tape::new(store);
        let x = tape.input(pyr.levels[i].values.clone());
        let y = sedam.apply_level(&mut tape, x, i)?;
        Ok(FeatureMap {
            values: tape.value(y).clone(),
            stride: pyr.levels[i].stride,
        })
    });
    Ok(Pyramid {
        levels: results.into_iter().collect::<Result<_>>()?,
    })
}
