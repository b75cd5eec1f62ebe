//! Forward and backward kernels on C×H×W tensors. Everything here is a
//! pure function of its inputs; the tape in `autograd` wires them up.

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, gemm_at, gemm_bt, Tensor};

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let (c, h, w) = x.chw();
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let n = ho * wo;
    let mut cols = vec![0.0; c * k * k * n];
    let xd = x.data();
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &[f64], shape: (usize, usize, usize), k: usize, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = shape;
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let n = ho * wo;
    let mut out = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            od[base + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn is_pointwise(k: usize, stride: usize, pad: usize) -> bool {
    k == 1 && stride == 1 && pad == 0
}

/// 2-D convolution. `w` is O×C×k×k, `b` has length O.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be O×C×k×k");
    assert_eq!(ws[1], c, "conv weight expects {} input channels, got {}", ws[1], c);
    let (o, k) = (ws[0], ws[2]);
    let kk = c * k * k;
    let (ho, wo) = (conv_out_dim(h, k, stride, pad), conv_out_dim(wd, k, stride, pad));
    let mut out = Tensor::zeros(&[o, ho, wo]);
    if is_pointwise(k, stride, pad) {
        gemm(o, kk, h * wd, w.data(), x.data(), out.data_mut());
    } else {
        let (cols, _, _) = im2col(x, k, stride, pad);
        gemm(o, kk, ho * wo, w.data(), &cols, out.data_mut());
    }
    if let Some(b) = b {
        let n = ho * wo;
        for (oc, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            let bv = b.data()[oc];
            for v in chunk {
                *v += bv;
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> ConvGrads {
    let (c, h, wd) = x.chw();
    let ws = w.shape();
    let (o, k) = (ws[0], ws[2]);
    let kk = c * k * k;
    let (_, ho, wo) = dout.chw();
    let n = ho * wo;

    let mut db = Tensor::zeros(&[o]);
    for (oc, chunk) in dout.data().chunks(n).enumerate() {
        db.data_mut()[oc] = chunk.iter().sum();
    }

    let mut dw = Tensor::zeros(ws);
    let pointwise = is_pointwise(k, stride, pad);
    if pointwise {
        gemm_bt(o, n, kk, dout.data(), x.data(), dw.data_mut(), 0.0);
    } else {
        let (cols, _, _) = im2col(x, k, stride, pad);
        gemm_bt(o, n, kk, dout.data(), &cols, dw.data_mut(), 0.0);
    }

    let dx = need_dx.then(|| {
        let mut dcols = vec![0.0; kk * n];
        gemm_at(kk, o, n, w.data(), dout.data(), &mut dcols);
        if pointwise {
            Tensor::from_vec(&[c, h, wd], dcols).expect("pointwise dcols shape")
        } else {
            col2im(&dcols, (c, h, wd), k, stride, pad)
        }
    });
    ConvGrads { dx, dw, db }
}

/// Cached statistics from a group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupNormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization over `groups` channel groups with per-channel affine.
/// A group whose values are all identical normalizes to exactly zero.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> (Tensor, GroupNormCache) {
    let (c, h, w) = x.chw();
    assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
    let per = c / groups * h * w;
    let hw = h * w;
    let mut xhat = Tensor::zeros(&[c, h, w]);
    let mut rstd = vec![0.0; groups];
    for g in 0..groups {
        let src = &x.data()[g * per..(g + 1) * per];
        let first = src[0];
        let constant = src.iter().all(|&v| v == first);
        let mean = src.iter().sum::<f64>() / per as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
        rstd[g] = r;
        let dst = &mut xhat.data_mut()[g * per..(g + 1) * per];
        if !constant {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
        }
    }
    let mut y = xhat.clone();
    for ch in 0..c {
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for v in &mut y.data_mut()[ch * hw..(ch + 1) * hw] {
            *v = gm * *v + bt;
        }
    }
    (y, GroupNormCache { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    cache: &GroupNormCache,
    gamma: &Tensor,
    dy: &Tensor,
    groups: usize,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = dy.chw();
    let hw = h * w;
    let per = c / groups * hw;
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dxhat = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let dyc = &dy.data()[ch * hw..(ch + 1) * hw];
        let xc = &cache.xhat.data()[ch * hw..(ch + 1) * hw];
        dgamma.data_mut()[ch] = dyc.iter().zip(xc).map(|(a, b)| a * b).sum();
        dbeta.data_mut()[ch] = dyc.iter().sum();
        let gm = gamma.data()[ch];
        for (d, g) in dxhat.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().zip(dyc) {
            *d = g * gm;
        }
    }
    let mut dx = Tensor::zeros(&[c, h, w]);
    let n = per as f64;
    for g in 0..groups {
        let dxh = &dxhat.data()[g * per..(g + 1) * per];
        let xh = &cache.xhat.data()[g * per..(g + 1) * per];
        let sum_d: f64 = dxh.iter().sum();
        let sum_dx: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        let r = cache.rstd[g];
        for ((o, &d), &xv) in dx.data_mut()[g * per..(g + 1) * per].iter_mut().zip(dxh).zip(xh) {
            *o = r / n * (n * d - sum_d - xv * sum_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Number of group-norm groups for a layer of `channels` channels: 32 when
/// it divides, otherwise the largest common divisor with 32.
pub fn norm_groups(channels: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    gcd(channels, 32).max(1)
}

/// Source index pair and blend weight for half-pixel ×2 bilinear sampling.
fn bilinear_taps(out_idx: usize, in_len: usize) -> (usize, usize, f64) {
    let src = ((out_idx as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear ×2 upsampling (half-pixel centres, edge clamped).
pub fn upsample2x(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let ys: Vec<_> = (0..ho).map(|y| bilinear_taps(y, h)).collect();
    let xs: Vec<_> = (0..wo).map(|x| bilinear_taps(x, w)).collect();
    for ch in 0..c {
        let src = x.plane(ch).to_vec();
        let dst = out.plane_mut(ch);
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn upsample2x_backward(dy: &Tensor) -> Tensor {
    let (c, ho, wo) = dy.chw();
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros(&[c, h, w]);
    let ys: Vec<_> = (0..ho).map(|y| bilinear_taps(y, h)).collect();
    let xs: Vec<_> = (0..wo).map(|x| bilinear_taps(x, w)).collect();
    for ch in 0..c {
        let g = dy.plane(ch).to_vec();
        let dst = dx.plane_mut(ch);
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let v = g[oy * wo + ox];
                dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                dst[y1 * w + x0] += v * ly * (1.0 - lx);
                dst[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
    Min,
}

/// Reduce a slice by `mode`; also returns the arg index for max/min (first hit).
pub fn reduce(values: impl Iterator<Item = f64>, mode: PoolMode) -> (f64, usize) {
    let mut n = 0usize;
    let mut acc = match mode {
        PoolMode::Avg => 0.0,
        PoolMode::Max => f64::NEG_INFINITY,
        PoolMode::Min => f64::INFINITY,
    };
    let mut arg = 0;
    for (i, v) in values.enumerate() {
        n += 1;
        match mode {
            PoolMode::Avg => acc += v,
            PoolMode::Max => {
                if v > acc {
                    acc = v;
                    arg = i;
                }
            }
            PoolMode::Min => {
                if v < acc {
                    acc = v;
                    arg = i;
                }
            }
        }
    }
    if mode == PoolMode::Avg {
        acc /= n as f64;
    }
    (acc, arg)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = x.chw();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[o, ho, wo]);
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at3(ci, iy as usize, ix as usize)
                                        * w.data()[((oc * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out.data_mut()[(oc * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.3).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = ramp(&[3, 6, 6], 0.05);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 1, 3)] {
            let w = ramp(&[4, 3, k, k], 0.01);
            let got = conv2d(&x, &w, None, s, p);
            let want = naive_conv(&x, &w, s, p);
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn stride_two_conv_halves_even_extent() {
        let x = Tensor::zeros(&[2, 16, 16]);
        let w = Tensor::zeros(&[5, 2, 3, 3]);
        assert_eq!(conv2d(&x, &w, None, 2, 1).shape(), &[5, 8, 8]);
    }

    #[test]
    fn upsample_preserves_constants_and_doubles_extent() {
        let x = Tensor::full(&[2, 3, 5], 1.75);
        let y = upsample2x(&x);
        assert_eq!(y.shape(), &[2, 6, 10]);
        assert!(y.data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn group_norm_of_constant_group_is_exactly_zero() {
        let x = Tensor::full(&[4, 3, 3], 0.1);
        let (y, _) = group_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 2);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let x = ramp(&[4, 5, 5], 0.3);
        let (y, _) = group_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 2);
        for g in 0..2 {
            let s = &y.data()[g * 50..(g + 1) * 50];
            let mean: f64 = s.iter().sum::<f64>() / 50.0;
            let var: f64 = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn norm_groups_prefers_32() {
        assert_eq!(norm_groups(640), 32);
        assert_eq!(norm_groups(256), 32);
        assert_eq!(norm_groups(16), 16);
        assert_eq!(norm_groups(24), 8);
    }

    #[test]
    fn reduce_modes() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(reduce(v.iter().copied(), PoolMode::Avg).0, 2.5);
        assert_eq!(reduce(v.iter().copied(), PoolMode::Max), (4.0, 3));
        assert_eq!(reduce(v.iter().copied(), PoolMode::Min), (1.0, 0));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
