//! Early-exit network topology: a linear trunk split into segments, with one
//! classifier head attached after every segment.
//!
//! Execution is incremental. A [`PartialRun`] caches every trunk activation
//! computed so far, so going deeper on the same frame never recomputes a
//! segment.

pub mod desk;
pub mod format;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, Padding, PoolKind};
use crate::tensor::{MacCount, Tensor};

pub use desk::{build_desk_model, TrunkConfig};
pub use format::{load_model, read_model, save_model, write_model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `[T, H, W, C]` to `[H, W, T·C]`.
    ReorderTimeAntenna,
    Conv2d {
        kernel: Tensor,
        bias: Vec<f32>,
        stride: (usize, usize),
        padding: Padding,
        activation: Activation,
    },
    DepthwiseConv2d {
        kernel: Tensor,
        bias: Vec<f32>,
        stride: (usize, usize),
        padding: Padding,
        activation: Activation,
    },
    Pool {
        kind: PoolKind,
        window: (usize, usize),
        stride: (usize, usize),
    },
    /// Flattens its input before the matrix product.
    Dense {
        weights: Tensor,
        bias: Vec<f32>,
        activation: Activation,
    },
    Softmax,
}

fn activate(mut t: Tensor, activation: Activation) -> Tensor {
    if activation == Activation::Relu {
        ops::relu_in_place(t.data_mut());
    }
    t
}

fn spatial_out(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<usize> {
    if stride == 0 {
        return Err(shape_err("stride must be positive"));
    }
    match padding {
        Padding::Valid if kernel > input => Err(shape_err(format!("kernel {kernel} exceeds extent {input}"))),
        Padding::Valid => Ok((input - kernel) / stride + 1),
        Padding::Same => Ok(input.div_ceil(stride)),
    }
}

impl Layer {
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, MacCount)> {
        match self {
            Layer::ReorderTimeAntenna => Ok((ops::reorder_time_antenna(input)?, MacCount::ZERO)),
            Layer::Conv2d { kernel, bias, stride, padding, activation } => {
                let (y, macs) = ops::conv2d(input, kernel, bias, *stride, *padding)?;
                Ok((activate(y, *activation), macs))
            }
            Layer::DepthwiseConv2d { kernel, bias, stride, padding, activation } => {
                let (y, macs) = ops::depthwise_conv2d(input, kernel, bias, *stride, *padding)?;
                Ok((activate(y, *activation), macs))
            }
            Layer::Pool { kind, window, stride } => ops::pool2d(input, *kind, *window, *stride),
            Layer::Dense { weights, bias, activation } => {
                let (y, macs) = ops::dense(input.data(), weights, bias)?;
                let len = y.len();
                Ok((activate(Tensor::new(vec![len], y)?, *activation), macs))
            }
            Layer::Softmax => {
                let p = ops::softmax(input.data())?;
                let len = p.len();
                Ok((Tensor::new(vec![len], p)?, MacCount::ZERO))
            }
        }
    }

    /// Output shape and MAC cost derived from the input shape alone.
    pub fn static_cost(&self, input: &[usize]) -> Result<(Vec<usize>, MacCount)> {
        let hwc = || match *input {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(shape_err(format!("expected [H,W,C] input, got {input:?}"))),
        };
        match self {
            Layer::ReorderTimeAntenna => match *input {
                [t, h, w, c] => Ok((vec![h, w, t * c], MacCount::ZERO)),
                _ => Err(shape_err(format!("reorder expects [T,H,W,C], got {input:?}"))),
            },
            Layer::Conv2d { kernel, stride, padding, .. } => {
                let (h, w, c) = hwc()?;
                let [kh, kw, cin, cout] = *kernel.shape() else {
                    return Err(shape_err("conv kernel must be rank 4"));
                };
                if cin != c {
                    return Err(shape_err(format!("conv expects {cin} channels, got {c}")));
                }
                let ho = spatial_out(h, kh, stride.0, *padding)?;
                let wo = spatial_out(w, kw, stride.1, *padding)?;
                Ok((vec![ho, wo, cout], MacCount::of(&[kh, kw, cin, cout, ho, wo])))
            }
            Layer::DepthwiseConv2d { kernel, stride, padding, .. } => {
                let (h, w, c) = hwc()?;
                let [kh, kw, kc] = *kernel.shape() else {
                    return Err(shape_err("depthwise kernel must be rank 3"));
                };
                if kc != c {
                    return Err(shape_err(format!("depthwise expects {kc} channels, got {c}")));
                }
                let ho = spatial_out(h, kh, stride.0, *padding)?;
                let wo = spatial_out(w, kw, stride.1, *padding)?;
                Ok((vec![ho, wo, c], MacCount::of(&[kh, kw, c, ho, wo])))
            }
            Layer::Pool { kind, window, stride } => {
                let (h, w, c) = hwc()?;
                if window.0 == 0 || window.1 == 0 || window.0 > h || window.1 > w {
                    return Err(shape_err(format!("pool window {window:?} does not fit {h}x{w}")));
                }
                let ho = spatial_out(h, window.0, stride.0, Padding::Valid)?;
                let wo = spatial_out(w, window.1, stride.1, Padding::Valid)?;
                let macs = match kind {
                    PoolKind::Max => MacCount::ZERO,
                    PoolKind::Avg => MacCount::of(&[ho, wo, c]),
                };
                Ok((vec![ho, wo, c], macs))
            }
            Layer::Dense { weights, .. } => {
                let [n, m] = *weights.shape() else {
                    return Err(shape_err("dense weights must be rank 2"));
                };
                let flat: usize = input.iter().product();
                if flat != n {
                    return Err(shape_err(format!("dense expects {n} inputs, got {input:?}")));
                }
                Ok((vec![m], MacCount::of(&[n, m])))
            }
            Layer::Softmax => {
                if input.len() != 1 {
                    return Err(shape_err(format!("softmax expects a vector, got {input:?}")));
                }
                Ok((input.to_vec(), MacCount::ZERO))
            }
        }
    }
}

/// Which part of the graph a traced layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Segment(usize),
    Head(usize),
}

/// One executed layer, as reported by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub unit: Unit,
    pub layer: usize,
    pub macs: MacCount,
}

static NEXT_FRAME_ID: AtomicU64 = AtomicU64::new(1);

/// An input frame tagged with an identity token. Clones share the token.
#[derive(Debug, Clone)]
pub struct Frame {
    id: u64,
    tensor: Tensor,
}

impl Frame {
    pub fn new(tensor: Tensor) -> Self {
        Self {
            id: NEXT_FRAME_ID.fetch_add(1, Ordering::Relaxed),
            tensor,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

/// Execution state for one frame: which segments ran, which exits produced outputs, and the cost so far.
///
/// Every executed segment's output stays cached, so a head can be evaluated
/// later without touching the trunk again.
#[derive(Debug, Clone)]
pub struct PartialRun {
    frame_id: u64,
    activations: Vec<Tensor>,
    exit_outputs: Vec<Option<Vec<f32>>>,
    macs: MacCount,
    trace: Vec<TraceEvent>,
}

impl PartialRun {
    pub fn frame_id(&self) -> u64 {
        self.frame_id
    }

    pub fn deepest_segment(&self) -> Option<usize> {
        self.activations.len().checked_sub(1)
    }

    /// Cached output of the deepest executed segment.
    pub fn trunk_activation(&self) -> Option<&Tensor> {
        self.activations.last()
    }

    pub fn macs(&self) -> MacCount {
        self.macs
    }

    pub fn exit_output(&self, exit: usize) -> Option<&[f32]> {
        self.exit_outputs.get(exit)?.as_deref()
    }

    /// Indices of exits whose heads have run.
    pub fn executed_exits(&self) -> impl Iterator<Item = usize> + '_ {
        self.exit_outputs
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.as_ref().map(|_| i))
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    /// Argmax of every exit output, or `None` if some head has not run.
    pub fn all_predictions(&self) -> Option<Vec<usize>> {
        self.exit_outputs
            .iter()
            .map(|o| o.as_deref().map(|p| ops::argmax(p).expect("head outputs are non-empty")))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitHead {
    pub layers: Vec<Layer>,
}

/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitGraph {
    input_shape: Vec<usize>,
    class_count: usize,
    segments: Vec<Segment>,
    heads: Vec<ExitHead>,
    segment_costs: Vec<MacCount>,
    head_costs: Vec<MacCount>,
}

fn chain_cost(layers: &[Layer], input: &[usize]) -> Result<(Vec<usize>, MacCount)> {
    layers.iter().try_fold((input.to_vec(), MacCount::ZERO), |(shape, total), layer| {
        let (next, macs) = layer.static_cost(&shape)?;
        Ok((next, total + macs))
    })
}

impl ExitGraph {
    /// Validates the topology by propagating shapes through every segment and head.
    pub fn new(
        input_shape: Vec<usize>,
        class_count: usize,
        segments: Vec<Segment>,
        heads: Vec<ExitHead>,
    ) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Inconsistent("graph has no segments".into()));
        }
        if segments.len() != heads.len() {
            return Err(Error::Inconsistent(format!(
                "{} segments but {} heads",
                segments.len(),
                heads.len()
            )));
        }
        if class_count < 1 {
            return Err(Error::Inconsistent("class count must be positive".into()));
        }
        let mut shape = input_shape.clone();
        let mut segment_costs = Vec::with_capacity(segments.len());
        let mut head_costs = Vec::with_capacity(heads.len());
        for (k, (segment, head)) in segments.iter().zip(&heads).enumerate() {
            let (next, cost) = chain_cost(&segment.layers, &shape)
                .map_err(|e| Error::Inconsistent(format!("segment {k}: {e}")))?;
            let (out, head_cost) = chain_cost(&head.layers, &next)
                .map_err(|e| Error::Inconsistent(format!("head {k}: {e}")))?;
            if out != [class_count] {
                return Err(Error::Inconsistent(format!(
                    "head {k} produces {out:?}, expected [{class_count}]"
                )));
            }
            if head.layers.last() != Some(&Layer::Softmax) {
                return Err(Error::Inconsistent(format!("head {k} must end in softmax")));
            }
            shape = next;
            segment_costs.push(cost);
            head_costs.push(head_cost);
        }
        Ok(Self {
            input_shape,
            class_count,
            segments,
            heads,
            segment_costs,
            head_costs,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Number of classifiers, including the final one.
    pub fn exit_count(&self) -> usize {
        self.heads.len()
    }

    pub fn final_exit(&self) -> usize {
        self.heads.len() - 1
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn heads(&self) -> &[ExitHead] {
        &self.heads
    }

    pub fn segment_cost(&self, k: usize) -> Result<MacCount> {
        self.check_exit(k)?;
        Ok(self.segment_costs[k])
    }

    pub fn head_cost(&self, k: usize) -> Result<MacCount> {
        self.check_exit(k)?;
        Ok(self.head_costs[k])
    }

    /// Cost of terminating at exit `k`: segments `0..=k` plus head `k` only.
    pub fn cumulative_cost(&self, k: usize) -> Result<MacCount> {
        self.check_exit(k)?;
        Ok(self.segment_costs[..=k].iter().copied().sum::<MacCount>() + self.head_costs[k])
    }

    /// Every segment and every head, as needed for a majority vote.
    pub fn full_vote_cost(&self) -> MacCount {
        self.segment_costs.iter().chain(&self.head_costs).copied().sum()
    }

    /// Trunk plus the final head, without any early heads.
    pub fn single_exit_cost(&self) -> MacCount {
        self.cumulative_cost(self.final_exit()).expect("final exit exists")
    }

    fn check_exit(&self, k: usize) -> Result<()> {
        if k < self.heads.len() {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                what: "exit",
                index: k,
                len: self.heads.len(),
            })
        }
    }

    fn check_frame(&self, frame: &Frame) -> Result<()> {
        if frame.tensor().shape() != self.input_shape.as_slice() {
            return Err(shape_err(format!(
                "frame shape {:?} does not match model input {:?}",
                frame.tensor().shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn resume(&self, frame: &Frame, prior: Option<PartialRun>) -> Result<PartialRun> {
        match prior {
            Some(run) if run.frame_id != frame.id() => Err(Error::FrameMismatch {
                run: run.frame_id,
                frame: frame.id(),
            }),
            Some(run) => Ok(run),
            None => {
                self.check_frame(frame)?;
                Ok(PartialRun {
                    frame_id: frame.id(),
                    activations: Vec::with_capacity(self.segments.len()),
                    exit_outputs: vec![None; self.heads.len()],
                    macs: MacCount::ZERO,
                    trace: Vec::new(),
                })
            }
        }
    }

    fn advance_trunk(&self, frame: &Frame, run: &mut PartialRun, target: usize) -> Result<()> {
        for k in run.activations.len()..=target {
            let mut x = run.activations.last().unwrap_or(frame.tensor()).clone();
            for (i, layer) in self.segments[k].layers.iter().enumerate() {
                let (y, macs) = layer.forward(&x)?;
                run.macs += macs;
                run.trace.push(TraceEvent { unit: Unit::Segment(k), layer: i, macs });
                x = y;
            }
            run.activations.push(x);
        }
        Ok(())
    }

    fn run_head(&self, run: &mut PartialRun, k: usize) -> Result<()> {
        if run.exit_outputs[k].is_some() {
            return Ok(());
        }
        let mut x = run.activations[k].clone();
        for (i, layer) in self.heads[k].layers.iter().enumerate() {
            let (y, macs) = layer.forward(&x)?;
            run.macs += macs;
            run.trace.push(TraceEvent { unit: Unit::Head(k), layer: i, macs });
            x = y;
        }
        run.exit_outputs[k] = Some(x.into_data());
        Ok(())
    }

    /// Executes segments up to `exit` and head `exit` only, resuming from `prior` when given.
    pub fn run_to_exit(&self, frame: &Frame, exit: usize, prior: Option<PartialRun>) -> Result<PartialRun> {
        self.check_exit(exit)?;
        let mut run = self.resume(frame, prior)?;
        self.advance_trunk(frame, &mut run, exit)?;
        self.run_head(&mut run, exit)?;
        Ok(run)
    }

    /// Completes a run: every remaining segment and every head that has not produced an output yet.
    pub fn resume_full(&self, frame: &Frame, prior: Option<PartialRun>) -> Result<PartialRun> {
        let mut run = self.resume(frame, prior)?;
        self.advance_trunk(frame, &mut run, self.final_exit())?;
        for k in 0..self.heads.len() {
            self.run_head(&mut run, k)?;
        }
        Ok(run)
    }

    /// Runs every segment and every head.
    pub fn run_full(&self, frame: &Frame) -> Result<PartialRun> {
        self.resume_full(frame, None)
    }
}
