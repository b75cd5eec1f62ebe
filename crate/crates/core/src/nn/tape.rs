//! Reverse-mode differentiation over a per-sample tape.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied. `backward` seeds the
//! gradient of a scalar objective with respect to any set of recorded
//! values and returns gradients for every parameter.

use super::kernels::{self, GroupNormCache, PoolMode};
use super::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: GroupNormCache,
    },
    Relu(Var),
    Add(Var, Var),
    Upsample2x(Var),
    GlobalPool {
        x: Var,
        mode: PoolMode,
        args: Vec<usize>,
    },
    ChannelPool {
        x: Var,
        mode: PoolMode,
        args: Vec<usize>,
    },
    Concat(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sigmoid(Var),
    MulChannel {
        x: Var,
        g: Var,
    },
    MulSpatial {
        x: Var,
        g: Var,
    },
    ScaledExp {
        x: Var,
        s: Var,
    },
    Affine {
        x: Var,
        a: f64,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv { x, w, b, stride, pad }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (y, cache) = kernels::group_norm(self.value(x), self.value(gamma), self.value(beta), groups);
        self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                cache,
            },
            &[x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        assert_eq!(y.shape(), self.value(b).shape(), "add shape mismatch");
        y.add_assign(self.value(b));
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let y = kernels::upsample2x(self.value(x));
        self.push(y, Op::Upsample2x(x), &[x])
    }

    /// Per-channel spatial statistic: C×H×W → C.
    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Var {
        let t = self.value(x);
        let (c, _, _) = t.chw();
        let mut out = Tensor::zeros(&[c]);
        let mut args = Vec::with_capacity(c);
        for ch in 0..c {
            let (v, a) = kernels::reduce(t.plane(ch).iter().copied(), mode);
            out.data_mut()[ch] = v;
            args.push(a);
        }
        self.push(out, Op::GlobalPool { x, mode, args }, &[x])
    }

    /// Statistic across the channel axis: C×H×W → 1×H×W.
    pub fn channel_pool(&mut self, x: Var, mode: PoolMode) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let hw = h * w;
        let mut out = Tensor::zeros(&[1, h, w]);
        let mut args = Vec::with_capacity(hw);
        for p in 0..hw {
            let (v, a) = kernels::reduce((0..c).map(|ch| t.data()[ch * hw + p]), mode);
            out.data_mut()[p] = v;
            args.push(a);
        }
        self.push(out, Op::ChannelPool { x, mode, args }, &[x])
    }

    /// Stack rank-3 tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (pc, ph, pw) = t.chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            c += pc;
            data.extend_from_slice(t.data());
        }
        let y = Tensor::from_vec(&[c, h, w], data).expect("concat shape");
        self.push(y, Op::Concat(parts.to_vec()), parts)
    }

    /// `w · x + b` for vector `x` (length C), `w` O×C, `b` length O.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (o, c) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.len(), c, "linear expects {} inputs, got {}", c, xv.len());
        let mut out = bv.clone();
        for i in 0..o {
            let row = &wv.data()[i * c..(i + 1) * c];
            out.data_mut()[i] += row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        self.push(out, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    /// Scale each channel plane of `x` (C×H×W) by `g[c]`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Var {
        let mut y = self.value(x).clone();
        let gv = self.value(g).data().to_vec();
        let (c, _, _) = y.chw();
        assert_eq!(gv.len(), c, "channel gate length mismatch");
        for (ch, &s) in gv.iter().enumerate() {
            for v in y.plane_mut(ch) {
                *v *= s;
            }
        }
        self.push(y, Op::MulChannel { x, g }, &[x, g])
    }

    /// Scale every channel of `x` (C×H×W) pointwise by `g` (1×H×W).
    pub fn mul_spatial(&mut self, x: Var, g: Var) -> Var {
        let mut y = self.value(x).clone();
        let gv = self.value(g).data().to_vec();
        let (c, h, w) = y.chw();
        assert_eq!(gv.len(), h * w, "spatial gate extent mismatch");
        for ch in 0..c {
            for (v, s) in y.plane_mut(ch).iter_mut().zip(&gv) {
                *v *= s;
            }
        }
        self.push(y, Op::MulSpatial { x, g }, &[x, g])
    }

    /// `exp(s · x) · factor` with scalar parameter `s`.
    pub fn scaled_exp(&mut self, x: Var, s: Var, factor: f64) -> Var {
        let sv = self.value(s).data()[0];
        let y = self.value(x).map(|v| (sv * v).exp() * factor);
        self.push(y, Op::ScaledExp { x, s }, &[x, s])
    }

    /// `a · x + offset`.
    pub fn affine(&mut self, x: Var, a: f64, offset: f64) -> Var {
        let y = self.value(x).map(|v| a * v + offset);
        self.push(y, Op::Affine { x, a }, &[x])
    }

    /// Back-propagate from `seeds` (∂objective/∂value pairs).
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads, v, g);
        }
        let mut out = self.params.zeros_like();
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.get_mut(*id).add_assign(&dy),
                Op::Conv { x, w, b, stride, pad } => {
                    let g = kernels::conv2d_backward(self.value(*x), self.value(*w), &dy, *stride, *pad, wants(*x));
                    if let Some(dx) = g.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    accumulate(&mut grads, *w, g.dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, g.db);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    cache,
                } => {
                    let (dx, dg, db) = kernels::group_norm_backward(cache, self.value(*gamma), &dy, *groups);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, dy.clone());
                    accumulate(&mut grads, *a, dy);
                }
                Op::Upsample2x(x) => accumulate(&mut grads, *x, kernels::upsample2x_backward(&dy)),
                Op::GlobalPool { x, mode, args } => {
                    let xv = self.value(*x);
                    let (c, h, w) = xv.chw();
                    let hw = h * w;
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let g = dy.data()[ch];
                        let plane = dx.plane_mut(ch);
                        match mode {
                            PoolMode::Avg => plane.iter_mut().for_each(|v| *v = g / hw as f64),
                            _ => plane[args[ch]] = g,
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ChannelPool { x, mode, args } => {
                    let xv = self.value(*x);
                    let (c, h, w) = xv.chw();
                    let hw = h * w;
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for p in 0..hw {
                        let g = dy.data()[p];
                        match mode {
                            PoolMode::Avg => {
                                for ch in 0..c {
                                    dx.data_mut()[ch * hw + p] = g / c as f64;
                                }
                            }
                            _ => dx.data_mut()[args[p] * hw + p] = g,
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let n: usize = shape.iter().product();
                        let piece = Tensor::from_vec(&shape, dy.data()[offset..offset + n].to_vec()).expect("concat grad");
                        offset += n;
                        accumulate(&mut grads, p, piece);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (o, c) = (wv.shape()[0], wv.shape()[1]);
                    let mut dw = Tensor::zeros(&[o, c]);
                    let mut dx = Tensor::zeros(xv.shape());
                    for i in 0..o {
                        let g = dy.data()[i];
                        for j in 0..c {
                            dw.data_mut()[i * c + j] = g * xv.data()[j];
                            dx.data_mut()[j] += g * wv.data()[i * c + j];
                        }
                    }
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *b, dy);
                }
                Op::Sigmoid(x) => {
                    let y = self.value(Var(idx));
                    let mut dx = dy;
                    for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= s * (1.0 - s);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MulChannel { x, g } => {
                    let (xv, gv) = (self.value(*x), self.value(*g));
                    let (c, _, _) = xv.chw();
                    let mut dx = dy.clone();
                    let mut dg = Tensor::zeros(&[c]);
                    for ch in 0..c {
                        let s = gv.data()[ch];
                        dg.data_mut()[ch] = dy.plane(ch).iter().zip(xv.plane(ch)).map(|(a, b)| a * b).sum();
                        dx.plane_mut(ch).iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *g, dg);
                }
                Op::MulSpatial { x, g } => {
                    let (xv, gv) = (self.value(*x), self.value(*g));
                    let (c, h, w) = xv.chw();
                    let mut dx = dy.clone();
                    let mut dg = Tensor::zeros(&[1, h, w]);
                    for ch in 0..c {
                        for p in 0..h * w {
                            dg.data_mut()[p] += dy.plane(ch)[p] * xv.plane(ch)[p];
                        }
                        for (v, s) in dx.plane_mut(ch).iter_mut().zip(gv.data()) {
                            *v *= s;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *g, dg);
                }
                Op::ScaledExp { x, s } => {
                    let (xv, y) = (self.value(*x), self.value(Var(idx)));
                    let sv = self.value(*s).data()[0];
                    let mut ds = 0.0;
                    let mut dx = dy.clone();
                    for ((d, &xi), &yi) in dx.data_mut().iter_mut().zip(xv.data()).zip(y.data()) {
                        ds += *d * yi * xi;
                        *d *= yi * sv;
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *s, Tensor::scalar(ds));
                }
                Op::Affine { x, a } => {
                    let mut dx = dy;
                    dx.scale(*a);
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
