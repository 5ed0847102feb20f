#![allow(dead_code, clippy::needless_range_loop, clippy::manual_div_ceil)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use temporal_exit::graph::{Activation, ExitGraph, ExitHead, Layer, Segment};
use temporal_exit::ops::Padding;
use temporal_exit::{Frame, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), || rng.random_range(-1.0f32..1.0)).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn assert_close(a: &[f32], b: &[f32], tol: f32) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

/// Pad amounts (before, after) on one axis, computed from scratch.
fn pads(input: usize, k: usize, s: usize, padding: Padding) -> (usize, usize, usize) {
    match padding {
        Padding::Valid => ((input - k) / s + 1, 0, 0),
        Padding::Same => {
            let out = (input + s - 1) / s;
            let total = ((out - 1) * s + k).saturating_sub(input);
            (out, total / 2, total - total / 2)
        }
    }
}

/// Reads `x[h, w, c]` treating out-of-range coordinates as zero padding.
fn at(x: &Tensor, h: isize, w: isize, c: usize) -> f32 {
    let s = x.shape();
    if h < 0 || w < 0 || h as usize >= s[0] || w as usize >= s[1] {
        0.0
    } else {
        x.data()[(h as usize * s[1] + w as usize) * s[2] + c]
    }
}

pub fn naive_conv(x: &Tensor, k: &Tensor, bias: &[f32], stride: (usize, usize), padding: Padding) -> Vec<f32> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (kh, kw, cin, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let (ho, ph, _) = pads(h, kh, stride.0, padding);
    let (wo, pw, _) = pads(w, kw, stride.1, padding);
    let mut out = Vec::new();
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut acc = bias[co] as f64;
                for dy in 0..kh {
                    for dx in 0..kw {
                        for ci in 0..cin {
                            let iy = (oy * stride.0 + dy) as isize - ph as isize;
                            let ix = (ox * stride.1 + dx) as isize - pw as isize;
                            let kv = k.data()[((dy * kw + dx) * cin + ci) * cout + co];
                            acc += at(x, iy, ix, ci) as f64 * kv as f64;
                        }
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

pub fn naive_depthwise(x: &Tensor, k: &Tensor, bias: &[f32], stride: (usize, usize), padding: Padding) -> Vec<f32> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (k.shape()[0], k.shape()[1]);
    let (ho, ph, _) = pads(h, kh, stride.0, padding);
    let (wo, pw, _) = pads(w, kw, stride.1, padding);
    let mut out = Vec::new();
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut acc = bias[ch] as f64;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iy = (oy * stride.0 + dy) as isize - ph as isize;
                        let ix = (ox * stride.1 + dx) as isize - pw as isize;
                        acc += at(x, iy, ix, ch) as f64 * k.data()[(dy * kw + dx) * c + ch] as f64;
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

pub fn naive_pool(x: &Tensor, max: bool, window: (usize, usize), stride: (usize, usize)) -> Vec<f32> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h - window.0) / stride.0 + 1;
    let wo = (w - window.1) / stride.1 + 1;
    let mut out = Vec::new();
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut vals = Vec::new();
                for dy in 0..window.0 {
                    for dx in 0..window.1 {
                        vals.push(at(x, (oy * stride.0 + dy) as isize, (ox * stride.1 + dx) as isize, ch));
                    }
                }
                out.push(if max {
                    vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
                } else {
                    (vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64) as f32
                });
            }
        }
    }
    out
}

pub fn naive_dense(x: &[f32], wt: &Tensor, bias: &[f32]) -> Vec<f32> {
    let (n, m) = (wt.shape()[0], wt.shape()[1]);
    (0..m)
        .map(|j| {
            let mut acc = bias[j] as f64;
            for i in 0..n {
                acc += x[i] as f64 * wt.data()[i * m + j] as f64;
            }
            acc as f32
        })
        .collect()
}

/// Graph whose `[1, 1, exits·classes]` input is the concatenated logits of
/// every exit. Segments are identity 1×1 average pools (`n` MACs each) and head
/// `k` selects slice `k` with a 0/1 dense layer, so head outputs are
/// `softmax(logits[k])`, fully scripted by the frame.
pub fn stub_graph(exits: usize, classes: usize) -> ExitGraph {
    let n = exits * classes;
    let segments = (0..exits)
        .map(|_| Segment {
            layers: vec![Layer::Pool {
                kind: temporal_exit::ops::PoolKind::Avg,
                window: (1, 1),
                stride: (1, 1),
            }],
        })
        .collect();
    let heads = (0..exits)
        .map(|k| {
            let mut w = vec![0.0f32; n * classes];
            for c in 0..classes {
                w[(k * classes + c) * classes + c] = 1.0;
            }
            ExitHead {
                layers: vec![
                    Layer::Dense {
                        weights: Tensor::new(vec![n, classes], w).unwrap(),
                        bias: vec![0.0; classes],
                        activation: Activation::None,
                    },
                    Layer::Softmax,
                ],
            }
        })
        .collect();
    ExitGraph::new(vec![1, 1, n], classes, segments, heads).unwrap()
}

/// Logits whose softmax is (close to) one-hot on `class`.
pub fn one_hot_logits(class: usize, classes: usize) -> Vec<f32> {
    (0..classes).map(|c| if c == class { 20.0 } else { 0.0 }).collect()
}

pub fn stub_frame(per_exit: &[Vec<f32>]) -> Frame {
    let data: Vec<f32> = per_exit.concat();
    Frame::new(Tensor::new(vec![1, 1, data.len()], data).unwrap())
}

/// Small random convolutional graph with three exits, used for engine checks.
pub fn small_conv_graph(seed: u64) -> ExitGraph {
    let mut r = rng(seed);
    let mut conv = |cin: usize, cout: usize| Layer::Conv2d {
        kernel: random_tensor(&mut r, &[3, 3, cin, cout]),
        bias: vec![0.1; cout],
        stride: (1, 1),
        padding: Padding::Same,
        activation: Activation::Relu,
    };
    let c0 = conv(4, 4);
    let c1 = conv(4, 6);
    let c2 = conv(6, 8);
    let mut r = rng(seed + 1);
    let mut head = |n: usize| ExitHead {
        layers: vec![
            Layer::Dense {
                weights: random_tensor(&mut r, &[n, 3]),
                bias: vec![0.0; 3],
                activation: Activation::None,
            },
            Layer::Softmax,
        ],
    };
    let heads = vec![head(6 * 6 * 4), head(3 * 3 * 6), head(3 * 3 * 8)];
    let pool = Layer::Pool {
        kind: temporal_exit::ops::PoolKind::Max,
        window: (2, 2),
        stride: (2, 2),
    };
    let segments = vec![
        Segment { layers: vec![Layer::ReorderTimeAntenna, c0] },
        Segment { layers: vec![pool, c1] },
        Segment { layers: vec![c2] },
    ];
    ExitGraph::new(vec![2, 6, 6, 2], 3, segments, heads).unwrap()
}
