//! Attention mechanisms used inside the shared encoder-decoder.
//!
//! * `Cbam`: channel gate from an average-pooled MLP, then a spatial gate
//!   from a k×k conv over (avg, max) channel-pooled planes.
//! * `CbamMin`: as `Cbam`, with a third min-pooled plane in the spatial stage.
//! * `ChannelOnly`: channel gate from the sum of an avg-pooled and a
//!   max-pooled MLP path; no spatial stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::reduce;
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::{Initializer, ParamStore, PoolMode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    #[default]
    None,
    Cbam,
    CbamMin,
    ChannelOnly,
}

impl AttentionVariant {
    pub fn spatial_modes(self) -> &'static [PoolMode] {
        match self {
            AttentionVariant::Cbam => &[PoolMode::Avg, PoolMode::Max],
            AttentionVariant::CbamMin => &[PoolMode::Avg, PoolMode::Max, PoolMode::Min],
            _ => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub reduction: usize,
    pub spatial_kernel: usize,
    /// Share one MLP between the avg and max paths of the channel-only gate.
    pub shared_mlp: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            reduction: 16,
            spatial_kernel: 7,
            shared_mlp: true,
        }
    }
}

/// Per-channel statistic over all spatial positions.
pub fn pool_global(f: &Tensor, mode: PoolMode) -> Result<Vec<f64>> {
    if f.is_empty() {
        return Err(Error::Shape("cannot pool an empty feature map".into()));
    }
    let (c, _, _) = f.chw();
    Ok((0..c).map(|ch| reduce(f.plane(ch).iter().copied(), mode).0).collect())
}

/// Stack of statistics across the channel axis, one plane per requested
/// mode, in fixed (avg, max, min) order.
pub fn pool_across_channels(f: &Tensor, modes: &[PoolMode]) -> Result<Tensor> {
    if modes.is_empty() {
        return Err(Error::Config("at least one pooling mode is required".into()));
    }
    let (c, h, w) = f.chw();
    let hw = h * w;
    let ordered: Vec<PoolMode> = [PoolMode::Avg, PoolMode::Max, PoolMode::Min]
        .into_iter()
        .filter(|m| modes.contains(m))
        .collect();
    let mut out = Tensor::zeros(&[ordered.len(), h, w]);
    for (pi, &mode) in ordered.iter().enumerate() {
        for p in 0..hw {
            out.data_mut()[pi * hw + p] = reduce((0..c).map(|ch| f.data()[ch * hw + p]), mode).0;
        }
    }
    Ok(out)
}

/// Two-layer bottleneck MLP: C → C/r → C with a ReLU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, channels: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, channels),
        }
    }

    fn forward(&self, tape: &mut Tape, v: Var) -> Var {
        let h = self.fc1.forward(tape, v);
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct ChannelAttentionParams {
    pub channels: usize,
    pub avg_mlp: Mlp,
    /// Separate MLP for the max path; `None` means the avg MLP is shared.
    pub max_mlp: Option<Mlp>,
}

#[derive(Clone, Debug)]
pub struct SpatialAttentionParams {
    pub conv: Conv2d,
}

impl SpatialAttentionParams {
    pub fn input_planes(&self) -> usize {
        self.conv.in_channels
    }
}

/// Parameters of one attention block for a fixed variant and channel count.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub variant: AttentionVariant,
    pub channel: Option<ChannelAttentionParams>,
    pub spatial: Option<SpatialAttentionParams>,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        variant: AttentionVariant,
        channels: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        if variant == AttentionVariant::None {
            return Ok(AttentionBlock {
                variant,
                channel: None,
                spatial: None,
            });
        }
        if cfg.reduction == 0 || channels % cfg.reduction != 0 {
            return Err(Error::Config(format!(
                "attention reduction {} must divide {channels} channels",
                cfg.reduction
            )));
        }
        if cfg.spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!("spatial kernel {} must be odd", cfg.spatial_kernel)));
        }
        let hidden = channels / cfg.reduction;
        let avg_mlp = Mlp::new(store, init, &format!("{name}.channel.mlp"), channels, hidden);
        let max_mlp = (variant == AttentionVariant::ChannelOnly && !cfg.shared_mlp)
            .then(|| Mlp::new(store, init, &format!("{name}.channel.max_mlp"), channels, hidden));
        let channel = Some(ChannelAttentionParams {
            channels,
            avg_mlp,
            max_mlp,
        });
        let planes = variant.spatial_modes().len();
        let spatial = (planes > 0).then(|| SpatialAttentionParams {
            conv: Conv2d::new(
                store,
                init,
                &format!("{name}.spatial.conv"),
                planes,
                1,
                cfg.spatial_kernel,
                1,
                true,
            ),
        });
        Ok(AttentionBlock {
            variant,
            channel,
            spatial,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        apply_attention(tape, x, self.variant, self)
    }
}

fn check_channels(tape: &Tape, x: Var, p: &ChannelAttentionParams) -> Result<()> {
    let c = tape.value(x).chw().0;
    if c != p.channels {
        return Err(Error::Shape(format!(
            "attention expects {} channels, got {c}",
            p.channels
        )));
    }
    Ok(())
}

/// Output of an attention block together with the gates it applied.
#[derive(Clone, Copy, Debug)]
pub struct Gated {
    pub output: Var,
    /// Per-channel gate (C).
    pub channel_gate: Option<Var>,
    /// Per-position gate (1×H×W).
    pub spatial_gate: Option<Var>,
}

/// Channel-only gate: `x · σ(MLP(avg(x)) + MLP(max(x)))` per channel.
pub fn channel_attention_ours(tape: &mut Tape, x: Var, p: &ChannelAttentionParams) -> Result<Var> {
    Ok(channel_attention_gated(tape, x, p)?.output)
}

fn channel_attention_gated(tape: &mut Tape, x: Var, p: &ChannelAttentionParams) -> Result<Gated> {
    check_channels(tape, x, p)?;
    let avg = tape.global_pool(x, PoolMode::Avg);
    let max = tape.global_pool(x, PoolMode::Max);
    let a = p.avg_mlp.forward(tape, avg);
    let m = p.max_mlp.as_ref().unwrap_or(&p.avg_mlp).forward(tape, max);
    let s = tape.add(a, m);
    let g = tape.sigmoid(s);
    Ok(Gated {
        output: tape.mul_channel(x, g),
        channel_gate: Some(g),
        spatial_gate: None,
    })
}

/// Cascaded channel (avg-pooled) then spatial gating.
pub fn cbam(
    tape: &mut Tape,
    x: Var,
    cp: &ChannelAttentionParams,
    sp: &SpatialAttentionParams,
    min_pool: bool,
) -> Result<Var> {
    Ok(cbam_gated(tape, x, cp, sp, min_pool)?.output)
}

fn cbam_gated(
    tape: &mut Tape,
    x: Var,
    cp: &ChannelAttentionParams,
    sp: &SpatialAttentionParams,
    min_pool: bool,
) -> Result<Gated> {
    check_channels(tape, x, cp)?;
    let expected = if min_pool { 3 } else { 2 };
    if sp.input_planes() != expected {
        return Err(Error::Shape(format!(
            "spatial conv consumes {} planes, expected {expected}",
            sp.input_planes()
        )));
    }
    let avg = tape.global_pool(x, PoolMode::Avg);
    let s = cp.avg_mlp.forward(tape, avg);
    let gc = tape.sigmoid(s);
    let refined = tape.mul_channel(x, gc);

    let mut planes = vec![
        tape.channel_pool(refined, PoolMode::Avg),
        tape.channel_pool(refined, PoolMode::Max),
    ];
    if min_pool {
        planes.push(tape.channel_pool(refined, PoolMode::Min));
    }
    let stacked = tape.concat(&planes);
    let a = sp.conv.forward(tape, stacked);
    let gs = tape.sigmoid(a);
    Ok(Gated {
        output: tape.mul_spatial(refined, gs),
        channel_gate: Some(gc),
        spatial_gate: Some(gs),
    })
}

/// Dispatch on `variant`; `block` must have been built for that variant.
pub fn apply_attention(tape: &mut Tape, x: Var, variant: AttentionVariant, block: &AttentionBlock) -> Result<Var> {
    Ok(apply_attention_gated(tape, x, variant, block)?.output)
}

/// [`apply_attention`] also returning the gates.
pub fn apply_attention_gated(
    tape: &mut Tape,
    x: Var,
    variant: AttentionVariant,
    block: &AttentionBlock,
) -> Result<Gated> {
    let mismatch = || Error::Config(format!("attention parameters built for {:?}, used as {variant:?}", block.variant));
    if block.variant != variant {
        return Err(mismatch());
    }
    match variant {
        AttentionVariant::None => Ok(Gated {
            output: x,
            channel_gate: None,
            spatial_gate: None,
        }),
        AttentionVariant::ChannelOnly => {
            let cp = block.channel.as_ref().ok_or_else(mismatch)?;
            channel_attention_gated(tape, x, cp)
        }
        AttentionVariant::Cbam | AttentionVariant::CbamMin => {
            let cp = block.channel.as_ref().ok_or_else(mismatch)?;
            let sp = block.spatial.as_ref().ok_or_else(mismatch)?;
            cbam_gated(tape, x, cp, sp, variant == AttentionVariant::CbamMin)
        }
    }
}

/// Gate values and output of an attention block on a plain tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GateValues {
    pub output: Tensor,
    pub channel_gate: Option<Tensor>,
    pub spatial_gate: Option<Tensor>,
}

pub fn attend_with_gates(store: &ParamStore, block: &AttentionBlock, f: &Tensor) -> Result<GateValues> {
    let mut tape = Tape::new(store);
    let x = tape.input(f.clone());
    let g = apply_attention_gated(&mut tape, x, block.variant, block)?;
    Ok(GateValues {
        output: tape.value(g.output).clone(),
        channel_gate: g.channel_gate.map(|v| tape.value(v).clone()),
        spatial_gate: g.spatial_gate.map(|v| tape.value(v).clone()),
    })
}

/// Evaluate an attention block on a plain tensor.
pub fn attend(store: &ParamStore, block: &AttentionBlock, f: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new(store);
    let x = tape.input(f.clone());
    let y = block.forward(&mut tape, x)?;
    Ok(tape.value(y).clone())
}
