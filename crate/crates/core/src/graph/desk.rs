//! Constructive model builder: a seeded random depthwise-separable trunk with
//! nearest-centroid classifier heads, so no training loop is needed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Activation, ExitGraph, ExitHead, Frame, Layer, Segment};
use crate::error::{Error, Result};
use crate::ops::{Padding, PoolKind};
use crate::tensor::Tensor;

/// Hyperparameters of the desk model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkConfig {
    /// Pointwise output channels of each segment; one segment per entry.
    pub widths: Vec<usize>,
    /// Depthwise kernel side.
    pub kernel: usize,
    /// Pool window (and stride) at the start of every segment but the first.
    pub inter_pool: usize,
    pub inter_pool_kind: PoolKind,
    /// Bias of every pointwise convolution, placing the ReLU operating point.
    pub activation_offset: f32,
    /// Side of the average-pooled grid each head sees. `1` is global pooling.
    pub head_grid: Vec<usize>,
    /// Mean logit gap between two class centroids in each head's feature space.
    pub logit_scale: f32,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 32, 64],
            kernel: 3,
            inter_pool: 2,
            inter_pool_kind: PoolKind::Avg,
            activation_offset: 4.0,
            head_grid: vec![1, 2, 4],
            logit_scale: 6.0,
        }
    }
}

fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Tensor::from_fn(shape, || normal.sample(rng) as f32)
}

fn head_pool(spatial: usize, grid: usize) -> Result<Option<Layer>> {
    if grid == 0 || grid > spatial || !spatial.is_multiple_of(grid) {
        return Err(Error::InvalidArgument(format!(
            "head grid {grid} does not divide feature map side {spatial}"
        )));
    }
    if grid == spatial {
        return Ok(None);
    }
    let window = spatial / grid;
    Ok(Some(Layer::Pool {
        kind: PoolKind::Avg,
        window: (window, window),
        stride: (window, window),
    }))
}

/// Builds the trunk from `seed`, then fits each head as a nearest-centroid
/// classifier on the pooled features of the noiseless class centroids: for a
/// centroid feature `mu` the dense column is `2·mu / tau` and the bias
/// `-|mu|² / tau`, where `tau` normalizes the mean squared centroid gap to
/// `logit_scale`.
pub fn build_desk_model(centroids: &[Tensor], config: &TrunkConfig, seed: u64) -> Result<ExitGraph> {
    if centroids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 class centroids, got {}",
            centroids.len()
        )));
    }
    let input_shape = centroids[0].shape().to_vec();
    if let Some(bad) = centroids.iter().find(|c| c.shape() != input_shape.as_slice()) {
        return Err(Error::Shape(format!(
            "centroid shape {:?} differs from {:?}",
            bad.shape(),
            input_shape
        )));
    }
    let [t, h, w, c] = *input_shape.as_slice() else {
        return Err(Error::Shape(format!("centroids must be [T,H,W,C], got {input_shape:?}")));
    };
    if config.widths.is_empty() || config.head_grid.len() != config.widths.len() {
        return Err(Error::InvalidArgument("one head grid entry per segment is required".into()));
    }
    if config.kernel == 0 || config.inter_pool == 0 || config.logit_scale.is_nan() || config.logit_scale <= 0.0 {
        return Err(Error::InvalidArgument("kernel, pool window and logit scale must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep weight draws apart from stream generators sharing the same seed
    rng.set_stream(1 << 32);
    let k = config.kernel;
    let mut segments = Vec::with_capacity(config.widths.len());
    let mut channels = t * c;
    for (i, &width) in config.widths.iter().enumerate() {
        let mut layers = Vec::new();
        if i == 0 {
            layers.push(Layer::ReorderTimeAntenna);
        } else {
            let p = config.inter_pool;
            layers.push(Layer::Pool {
                kind: config.inter_pool_kind,
                window: (p, p),
                stride: (p, p),
            });
        }
        layers.push(Layer::DepthwiseConv2d {
            kernel: gaussian_tensor(&mut rng, vec![k, k, channels], 1.0 / k as f64)?,
            bias: vec![0.0; channels],
            stride: (1, 1),
            padding: Padding::Same,
            activation: Activation::None,
        });
        layers.push(Layer::Conv2d {
            kernel: gaussian_tensor(&mut rng, vec![1, 1, channels, width], (2.0 / channels as f64).sqrt())?,
            bias: vec![config.activation_offset; width],
            stride: (1, 1),
            padding: Padding::Same,
            activation: Activation::Relu,
        });
        segments.push(Segment { layers });
        channels = width;
    }

    // Placeholder heads let the trunk run through ExitGraph for feature extraction.
    let mut pools = Vec::with_capacity(segments.len());
    let mut feature_len = Vec::with_capacity(segments.len());
    let mut side = (h, w);
    for (i, (&width, &grid)) in config.widths.iter().zip(&config.head_grid).enumerate() {
        if i > 0 {
            side = (side.0 / config.inter_pool, side.1 / config.inter_pool);
        }
        if side.0 != side.1 {
            return Err(Error::InvalidArgument(format!("segment {i} feature map is not square: {side:?}")));
        }
        pools.push(head_pool(side.0, grid)?);
        feature_len.push(grid * grid * width);
    }
    let classes = centroids.len();
    let stub_heads = feature_len
        .iter()
        .zip(&pools)
        .map(|(&n, pool)| {
            let mut layers: Vec<Layer> = pool.iter().cloned().collect();
            layers.push(Layer::Dense {
                weights: Tensor::zeros(vec![n, classes])?,
                bias: vec![0.0; classes],
                activation: Activation::None,
            });
            layers.push(Layer::Softmax);
            Ok(ExitHead { layers })
        })
        .collect::<Result<Vec<_>>>()?;
    let trunk = ExitGraph::new(input_shape.clone(), classes, segments, stub_heads)?;

    let mut features: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(classes); trunk.exit_count()];
    for centroid in centroids {
        let frame = Frame::new(centroid.clone());
        let run = trunk.run_to_exit(&frame, trunk.final_exit(), None)?;
        for (k, activation) in run.activations.iter().enumerate() {
            let pooled = match &pools[k] {
                Some(pool) => pool.forward(activation)?.0,
                None => activation.clone(),
            };
            features[k].push(pooled.data().iter().map(|&v| f64::from(v)).collect());
        }
    }

    let mut heads = Vec::with_capacity(features.len());
    for (k, mus) in features.iter().enumerate() {
        let n = feature_len[k];
        let mut gap = 0.0;
        let mut pairs = 0usize;
        for a in 0..classes {
            for b in a + 1..classes {
                gap += mus[a].iter().zip(&mus[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                pairs += 1;
            }
        }
        let gap = gap / pairs as f64;
        if gap.is_nan() || gap <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "class centroids are indistinguishable at exit {k}"
            )));
        }
        let tau = gap / f64::from(config.logit_scale);
        let mut weights = vec![0.0f32; n * classes];
        let mut bias = vec![0.0f32; classes];
        for (cls, mu) in mus.iter().enumerate() {
            for (i, &m) in mu.iter().enumerate() {
                weights[i * classes + cls] = (2.0 * m / tau) as f32;
            }
            bias[cls] = (-mu.iter().map(|m| m * m).sum::<f64>() / tau) as f32;
        }
        let mut layers: Vec<Layer> = pools[k].iter().cloned().collect();
        layers.push(Layer::Dense {
            weights: Tensor::new(vec![n, classes], weights)?,
            bias,
            activation: Activation::None,
        });
        layers.push(Layer::Softmax);
        heads.push(ExitHead { layers });
    }
    let (segments, _) = (trunk.segments, trunk.heads);
    ExitGraph::new(input_shape, classes, segments, heads)
}
