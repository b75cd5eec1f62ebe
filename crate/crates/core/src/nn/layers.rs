//! Parameterized building blocks that record onto a [`Tape`].

use super::kernels::norm_groups;
use super::params::{Initializer, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.gaussian(&[out_channels, in_channels, kernel, kernel]),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        GroupNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: norm_groups(channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.group_norm(x, g, b, self.groups)
    }
}

/// conv → group norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvNormRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv2d::new(store, init, &format!("{name}.conv"), in_channels, out_channels, kernel, stride, true);
        let norm = GroupNorm::new(store, &format!("{name}.gn"), out_channels);
        ConvNormRelu { conv, norm }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let y = self.conv.forward(tape, x);
        let y = self.norm.forward(tape, y);
        tape.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), init.gaussian(&[outputs, inputs])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.linear(x, w, b)
    }
}
