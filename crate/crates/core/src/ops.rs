//! Layer primitives. Every layer returns its output together with the exact
//! number of multiply-accumulates it performed.
//!
//! Feature maps are `[H, W, C]`, convolution kernels `[Kh, Kw, Cin, Cout]`,
//! depthwise kernels `[Kh, Kw, C]` and dense weights `[N, M]`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{MacCount, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    /// Output size `ceil(in / stride)`, zero padding split with the extra row/column at the end.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Output length and leading pad for one spatial axis.
fn axis_geometry(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(shape_err("stride must be positive"));
    }
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(shape_err(format!("kernel {kernel} exceeds input extent {input}")));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, needed / 2))
        }
    }
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    stride: (usize, usize),
    padding: Padding,
) -> Result<(Tensor, MacCount)> {
    let (h, w, cin) = input.dims3()?;
    let [kh, kw, kcin, cout] = *kernel.shape() else {
        return Err(shape_err(format!("conv kernel must be [Kh,Kw,Cin,Cout], got {:?}", kernel.shape())));
    };
    if kcin != cin {
        return Err(shape_err(format!("conv kernel expects {kcin} input channels, input has {cin}")));
    }
    if bias.len() != cout {
        return Err(shape_err(format!("conv bias has {} entries for {cout} output channels", bias.len())));
    }
    let (ho, pad_top) = axis_geometry(h, kh, stride.0, padding)?;
    let (wo, pad_left) = axis_geometry(w, kw, stride.1, padding)?;

    let x = input.data();
    let k = kernel.data();
    let mut out = Vec::with_capacity(ho * wo * cout);
    for oh in 0..ho {
        for ow in 0..wo {
            let base = out.len();
            out.extend_from_slice(bias);
            let acc = &mut out[base..];
            for dh in 0..kh {
                let Some(ih) = (oh * stride.0 + dh).checked_sub(pad_top).filter(|&i| i < h) else {
                    continue;
                };
                for dw in 0..kw {
                    let Some(iw) = (ow * stride.1 + dw).checked_sub(pad_left).filter(|&i| i < w) else {
                        continue;
                    };
                    let pixel = &x[(ih * w + iw) * cin..][..cin];
                    let taps = &k[(dh * kw + dw) * cin * cout..][..cin * cout];
                    for (&v, row) in pixel.iter().zip(taps.chunks_exact(cout)) {
                        for (a, &wt) in acc.iter_mut().zip(row) {
                            *a += v * wt;
                        }
                    }
                }
            }
        }
    }
    let macs = MacCount::of(&[kh, kw, cin, cout, ho, wo]);
    Ok((Tensor::new(vec![ho, wo, cout], out)?, macs))
}

pub fn depthwise_conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &[f32],
    stride: (usize, usize),
    padding: Padding,
) -> Result<(Tensor, MacCount)> {
    let (h, w, c) = input.dims3()?;
    let [kh, kw, kc] = *kernel.shape() else {
        return Err(shape_err(format!("depthwise kernel must be [Kh,Kw,C], got {:?}", kernel.shape())));
    };
    if kc != c {
        return Err(shape_err(format!("depthwise kernel has {kc} channels, input has {c}")));
    }
    if bias.len() != c {
        return Err(shape_err(format!("depthwise bias has {} entries for {c} channels", bias.len())));
    }
    let (ho, pad_top) = axis_geometry(h, kh, stride.0, padding)?;
    let (wo, pad_left) = axis_geometry(w, kw, stride.1, padding)?;

    let x = input.data();
    let k = kernel.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    for oh in 0..ho {
        for ow in 0..wo {
            let base = out.len();
            out.extend_from_slice(bias);
            let acc = &mut out[base..];
            for dh in 0..kh {
                let Some(ih) = (oh * stride.0 + dh).checked_sub(pad_top).filter(|&i| i < h) else {
                    continue;
                };
                for dw in 0..kw {
                    let Some(iw) = (ow * stride.1 + dw).checked_sub(pad_left).filter(|&i| i < w) else {
                        continue;
                    };
                    let pixel = &x[(ih * w + iw) * c..][..c];
                    let taps = &k[(dh * kw + dw) * c..][..c];
                    for ((a, &v), &wt) in acc.iter_mut().zip(pixel).zip(taps) {
                        *a += v * wt;
                    }
                }
            }
        }
    }
    let macs = MacCount::of(&[kh, kw, c, ho, wo]);
    Ok((Tensor::new(vec![ho, wo, c], out)?, macs))
}

/// Valid-mode pooling. Max-pool costs no MACs; avg-pool costs one per output element.
pub fn pool2d(
    input: &Tensor,
    kind: PoolKind,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, MacCount)> {
    let (h, w, c) = input.dims3()?;
    if window.0 == 0 || window.1 == 0 {
        return Err(shape_err("pool window must be positive"));
    }
    if window.0 > h || window.1 > w {
        return Err(shape_err(format!("pool window {window:?} larger than input {h}x{w}")));
    }
    let (ho, _) = axis_geometry(h, window.0, stride.0, Padding::Valid)?;
    let (wo, _) = axis_geometry(w, window.1, stride.1, Padding::Valid)?;

    let x = input.data();
    let init = match kind {
        PoolKind::Max => f32::NEG_INFINITY,
        PoolKind::Avg => 0.0,
    };
    let scale = 1.0 / (window.0 * window.1) as f32;
    let mut out = Vec::with_capacity(ho * wo * c);
    for oh in 0..ho {
        for ow in 0..wo {
            let base = out.len();
            out.resize(base + c, init);
            let acc = &mut out[base..];
            for ih in oh * stride.0..oh * stride.0 + window.0 {
                for iw in ow * stride.1..ow * stride.1 + window.1 {
                    let pixel = &x[(ih * w + iw) * c..][..c];
                    match kind {
                        PoolKind::Max => acc.iter_mut().zip(pixel).for_each(|(a, &v)| *a = a.max(v)),
                        PoolKind::Avg => acc.iter_mut().zip(pixel).for_each(|(a, &v)| *a += v),
                    }
                }
            }
            if kind == PoolKind::Avg {
                acc.iter_mut().for_each(|a| *a *= scale);
            }
        }
    }
    let macs = match kind {
        PoolKind::Max => MacCount::ZERO,
        PoolKind::Avg => MacCount::of(&[ho, wo, c]),
    };
    Ok((Tensor::new(vec![ho, wo, c], out)?, macs))
}

/// `y = x · W + b` with `W` shaped `[N, M]`.
pub fn dense(input: &[f32], weights: &Tensor, bias: &[f32]) -> Result<(Vec<f32>, MacCount)> {
    let [n, m] = *weights.shape() else {
        return Err(shape_err(format!("dense weights must be [N,M], got {:?}", weights.shape())));
    };
    if input.len() != n {
        return Err(shape_err(format!("dense expects {n} inputs, got {}", input.len())));
    }
    if bias.len() != m {
        return Err(shape_err(format!("dense bias has {} entries for {m} outputs", bias.len())));
    }
    let mut out = bias.to_vec();
    for (&v, row) in input.iter().zip(weights.data().chunks_exact(m)) {
        for (o, &wt) in out.iter_mut().zip(row) {
            *o += v * wt;
        }
    }
    Ok((out, MacCount::of(&[n, m])))
}

pub fn relu_in_place(values: &mut [f32]) {
    values.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Max-stabilized softmax.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(shape_err("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&v| f64::from(v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| (e / total) as f32).collect())
}

/// Folds the time axis into the channel axis: `(t, h, w, c)` moves to `(h, w, t·C + c)`.
pub fn reorder_time_antenna(input: &Tensor) -> Result<Tensor> {
    let (t, h, w, c) = input.dims4()?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for ti in 0..t {
        for hw in 0..h * w {
            let src = &x[(ti * h * w + hw) * c..][..c];
            out[hw * t * c + ti * c..][..c].copy_from_slice(src);
        }
    }
    Tensor::new(vec![h, w, t * c], out)
}

/// Inverse of [`reorder_time_antenna`] for a known number of time-steps.
pub fn restore_time_antenna(input: &Tensor, timesteps: usize) -> Result<Tensor> {
    let (h, w, tc) = input.dims3()?;
    if timesteps == 0 || tc % timesteps != 0 {
        return Err(shape_err(format!("{tc} channels do not split into {timesteps} time-steps")));
    }
    let c = tc / timesteps;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for ti in 0..timesteps {
        for hw in 0..h * w {
            out[(ti * h * w + hw) * c..][..c].copy_from_slice(&x[hw * tc + ti * c..][..c]);
        }
    }
    Tensor::new(vec![timesteps, h, w, c], out)
}

pub fn euclidean_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err(format!("distance between vectors of length {} and {}", a.len(), b.len())));
    }
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> Result<usize> {
    let (first, rest) = values
        .split_first()
        .ok_or_else(|| shape_err("argmax of an empty vector"))?;
    let mut best = (0, *first);
    for (i, &v) in rest.iter().enumerate() {
        if v > best.1 {
            best = (i + 1, v);
        }
    }
    Ok(best.0)
}
