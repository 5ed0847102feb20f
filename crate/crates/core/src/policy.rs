//! Runtime termination policies.
//!
//! * Difference Detection tracks exit 0. While the distance between the
//!   current exit-0 output and the scene's first exit-0 output stays below the
//!   threshold, the scene's majority-vote label is reused. Otherwise the full
//!   network runs, all classifiers vote, and a new scene starts.
//! * Temporal Patience tracks the shallowest exit that agreed with the vote at
//!   scene start. It stays in the scene only while that exit's output is close
//!   to its scene-initial output and still predicts the same class.
//! * Confidence thresholding and the single-exit network are the baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ExitGraph, Frame, PartialRun, TraceEvent};
use crate::ops::{argmax, euclidean_distance};
use crate::tensor::MacCount;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[serde(alias = "single")]
    SingleExit,
    Confidence,
    #[serde(alias = "dd")]
    DifferenceDetection,
    #[serde(alias = "tp")]
    TemporalPatience,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::SingleExit => "single_exit",
            PolicyKind::Confidence => "confidence",
            PolicyKind::DifferenceDetection => "difference_detection",
            PolicyKind::TemporalPatience => "temporal_patience",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_exit" | "single" => Ok(PolicyKind::SingleExit),
            "confidence" => Ok(PolicyKind::Confidence),
            "difference_detection" | "dd" => Ok(PolicyKind::DifferenceDetection),
            "temporal_patience" | "tp" => Ok(PolicyKind::TemporalPatience),
            other => Err(Error::Config(format!("unknown policy kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Scene-change threshold on the Euclidean distance between output vectors.
    /// `f64::INFINITY` disables scene changes after the first sample.
    pub threshold: f64,
    /// Minimum max-probability per non-final exit for the confidence policy.
    pub confidence_thresholds: Vec<f32>,
}

impl PolicyConfig {
    pub fn single_exit() -> Self {
        Self {
            kind: PolicyKind::SingleExit,
            threshold: 0.0,
            confidence_thresholds: Vec::new(),
        }
    }

    pub fn difference_detection(threshold: f64) -> Self {
        Self {
            kind: PolicyKind::DifferenceDetection,
            threshold,
            confidence_thresholds: Vec::new(),
        }
    }

    pub fn temporal_patience(threshold: f64) -> Self {
        Self {
            kind: PolicyKind::TemporalPatience,
            threshold,
            confidence_thresholds: Vec::new(),
        }
    }

    pub fn confidence(thresholds: Vec<f32>) -> Self {
        Self {
            kind: PolicyKind::Confidence,
            threshold: 0.0,
            confidence_thresholds: thresholds,
        }
    }

    pub fn validate(&self, graph: &ExitGraph) -> Result<()> {
        check_threshold(self.threshold)?;
        if self.kind == PolicyKind::Confidence {
            check_confidence_thresholds(graph, &self.confidence_thresholds)?;
        }
        Ok(())
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {threshold}")));
    }
    Ok(())
}

fn check_confidence_thresholds(graph: &ExitGraph, thresholds: &[f32]) -> Result<()> {
    let early = graph.exit_count() - 1;
    if thresholds.len() != early {
        return Err(Error::InvalidArgument(format!(
            "{} confidence thresholds given for {early} early exits",
            thresholds.len()
        )));
    }
    if thresholds.iter().any(|t| t.is_nan() || *t < 0.0) {
        return Err(Error::InvalidArgument("confidence thresholds must be non-negative".into()));
    }
    Ok(())
}

/// Where a step terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitUsed {
    Exit(usize),
    /// Every classifier ran and voted.
    FullVote,
}

impl ExitUsed {
    /// Column in an exit-share vector of length `exit_count + 1`.
    pub fn slot(self, exit_count: usize) -> usize {
        match self {
            ExitUsed::Exit(k) => k,
            ExitUsed::FullVote => exit_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub prediction: usize,
    /// Cost of exactly the layers executed during this step.
    pub macs: MacCount,
    pub exit_used: ExitUsed,
    pub scene_changed: bool,
}

/// Per-stream scene bookkeeping shared by both temporal policies.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    /// Output of `selected_exit` on the scene's first sample.
    pub reference_vector: Vec<f32>,
    /// Majority vote on the scene's first sample.
    pub reference_vote: usize,
    pub selected_exit: usize,
    /// Stream position of the scene's first sample.
    pub scene_start: u64,
}

/// Most frequent class; among tied classes the one predicted by the deepest classifier wins.
pub fn majority_vote(predictions: &[usize]) -> Result<usize> {
    let max = predictions
        .iter()
        .copied()
        .max()
        .ok_or_else(|| Error::InvalidArgument("majority vote over no predictions".into()))?;
    let mut counts = vec![0usize; max + 1];
    for &p in predictions {
        counts[p] += 1;
    }
    let mut best = (predictions[predictions.len() - 1], 0);
    for &p in predictions.iter().rev() {
        if counts[p] > best.1 {
            best = (p, counts[p]);
        }
    }
    Ok(best.0)
}

/// Shallowest exit whose prediction equals the vote.
pub fn tp_select(predictions: &[usize], vote: usize) -> usize {
    predictions
        .iter()
        .position(|&p| p == vote)
        .expect("the vote is always predicted by at least one classifier")
}

/// Reference handling for Difference Detection.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReferenceMode {
    /// Compare against the scene's first sample.
    #[default]
    SceneInitial,
    /// Compare against the immediately preceding sample. Ablation only.
    Predecessor,
}

fn vote_of(run: &PartialRun) -> Result<(Vec<usize>, usize)> {
    let preds = run
        .all_predictions()
        .ok_or_else(|| Error::Inconsistent("vote requested before every head ran".into()))?;
    let vote = majority_vote(&preds)?;
    Ok((preds, vote))
}

fn output(run: &PartialRun, exit: usize) -> &[f32] {
    run.exit_output(exit).expect("exit executed")
}

fn new_scene(
    graph: &ExitGraph,
    frame: &Frame,
    prior: Option<PartialRun>,
    track_agreeing_exit: bool,
    position: u64,
) -> Result<(StepResult, SceneState, PartialRun)> {
    let run = graph.resume_full(frame, prior)?;
    let (preds, vote) = vote_of(&run)?;
    let selected_exit = if track_agreeing_exit { tp_select(&preds, vote) } else { 0 };
    let state = SceneState {
        reference_vector: output(&run, selected_exit).to_vec(),
        reference_vote: vote,
        selected_exit,
        scene_start: position,
    };
    let step = StepResult {
        prediction: vote,
        macs: run.macs(),
        exit_used: ExitUsed::FullVote,
        scene_changed: true,
    };
    Ok((step, state, run))
}

pub(crate) fn dd_step_traced(
    state: Option<&SceneState>,
    graph: &ExitGraph,
    frame: &Frame,
    threshold: f64,
    position: u64,
    mode: ReferenceMode,
) -> Result<(StepResult, SceneState, PartialRun)> {
    check_threshold(threshold)?;
    let Some(state) = state else {
        return new_scene(graph, frame, None, false, position);
    };
    let run = graph.run_to_exit(frame, 0, None)?;
    let current = output(&run, 0);
    if euclidean_distance(current, &state.reference_vector)? < threshold {
        let mut next = state.clone();
        if mode == ReferenceMode::Predecessor {
            next.reference_vector = current.to_vec();
        }
        let step = StepResult {
            prediction: state.reference_vote,
            macs: run.macs(),
            exit_used: ExitUsed::Exit(0),
            scene_changed: false,
        };
        return Ok((step, next, run));
    }
    new_scene(graph, frame, Some(run), false, position)
}

/// One Difference Detection step. `state` is `None` at stream start.
pub fn dd_step(
    state: Option<&SceneState>,
    graph: &ExitGraph,
    frame: &Frame,
    threshold: f64,
    position: u64,
) -> Result<(StepResult, SceneState)> {
    dd_step_traced(state, graph, frame, threshold, position, ReferenceMode::SceneInitial).map(|(s, st, _)| (s, st))
}

pub(crate) fn tp_step_traced(
    state: Option<&SceneState>,
    graph: &ExitGraph,
    frame: &Frame,
    threshold: f64,
    position: u64,
) -> Result<(StepResult, SceneState, PartialRun)> {
    check_threshold(threshold)?;
    let Some(state) = state else {
        return new_scene(graph, frame, None, true, position);
    };
    let exit = state.selected_exit;
    // Only the tracked exit's head runs; shallower heads are skipped.
    let run = graph.run_to_exit(frame, exit, None)?;
    let current = output(&run, exit);
    let label = argmax(current)?;
    let close = euclidean_distance(current, &state.reference_vector)? < threshold;
    if close && label == argmax(&state.reference_vector)? {
        let step = StepResult {
            prediction: label,
            macs: run.macs(),
            exit_used: ExitUsed::Exit(exit),
            scene_changed: false,
        };
        return Ok((step, state.clone(), run));
    }
    new_scene(graph, frame, Some(run), true, position)
}

/// One Temporal Patience step. `state` is `None` at stream start.
pub fn tp_step(
    state: Option<&SceneState>,
    graph: &ExitGraph,
    frame: &Frame,
    threshold: f64,
    position: u64,
) -> Result<(StepResult, SceneState)> {
    tp_step_traced(state, graph, frame, threshold, position).map(|(s, st, _)| (s, st))
}

pub(crate) fn confidence_step_traced(
    graph: &ExitGraph,
    frame: &Frame,
    thresholds: &[f32],
) -> Result<(StepResult, PartialRun)> {
    check_confidence_thresholds(graph, thresholds)?;
    let mut run = None;
    for (exit, &min_confidence) in thresholds.iter().enumerate() {
        let r = graph.run_to_exit(frame, exit, run)?;
        let probs = output(&r, exit);
        let best = argmax(probs)?;
        if probs[best] >= min_confidence {
            let step = StepResult {
                prediction: best,
                macs: r.macs(),
                exit_used: ExitUsed::Exit(exit),
                scene_changed: false,
            };
            return Ok((step, r));
        }
        run = Some(r);
    }
    let last = graph.final_exit();
    let r = graph.run_to_exit(frame, last, run)?;
    let step = StepResult {
        prediction: argmax(output(&r, last))?,
        macs: r.macs(),
        exit_used: ExitUsed::Exit(last),
        scene_changed: false,
    };
    Ok((step, r))
}

/// Stops at the first exit whose top probability reaches its threshold, else uses the final classifier.
pub fn confidence_step(graph: &ExitGraph, frame: &Frame, thresholds: &[f32]) -> Result<StepResult> {
    confidence_step_traced(graph, frame, thresholds).map(|(s, _)| s)
}

pub(crate) fn single_exit_step_traced(graph: &ExitGraph, frame: &Frame) -> Result<(StepResult, PartialRun)> {
    let last = graph.final_exit();
    let run = graph.run_to_exit(frame, last, None)?;
    let step = StepResult {
        prediction: argmax(output(&run, last))?,
        macs: run.macs(),
        exit_used: ExitUsed::Exit(last),
        scene_changed: false,
    };
    Ok((step, run))
}

/// Trunk plus final head; the early heads never run.
pub fn single_exit_step(graph: &ExitGraph, frame: &Frame) -> Result<StepResult> {
    single_exit_step_traced(graph, frame).map(|(s, _)| s)
}

/// A policy bound to one stream. Owns the scene state; feed samples in order.
#[derive(Debug)]
pub struct PolicyRunner<'g> {
    graph: &'g ExitGraph,
    config: PolicyConfig,
    state: Option<SceneState>,
    position: u64,
    reference_mode: ReferenceMode,
    last_trace: Vec<TraceEvent>,
}

impl<'g> PolicyRunner<'g> {
    pub fn new(graph: &'g ExitGraph, config: PolicyConfig) -> Result<Self> {
        config.validate(graph)?;
        Ok(Self {
            graph,
            config,
            state: None,
            position: 0,
            reference_mode: ReferenceMode::SceneInitial,
            last_trace: Vec::new(),
        })
    }

    #[doc(hidden)]
    pub fn with_reference_mode(mut self, mode: ReferenceMode) -> Self {
        self.reference_mode = mode;
        self
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&SceneState> {
        self.state.as_ref()
    }

    /// Engine trace of the layers executed by the most recent step.
    pub fn last_trace(&self) -> &[TraceEvent] {
        &self.last_trace
    }

    pub fn step(&mut self, frame: &Frame) -> Result<StepResult> {
        let graph = self.graph;
        let position = self.position;
        let (step, run) = match self.config.kind {
            PolicyKind::SingleExit => single_exit_step_traced(graph, frame)?,
            PolicyKind::Confidence => confidence_step_traced(graph, frame, &self.config.confidence_thresholds)?,
            PolicyKind::DifferenceDetection => {
                let (step, state, run) = dd_step_traced(
                    self.state.as_ref(),
                    graph,
                    frame,
                    self.config.threshold,
                    position,
                    self.reference_mode,
                )?;
                self.state = Some(state);
                (step, run)
            }
            PolicyKind::TemporalPatience => {
                let (step, state, run) =
                    tp_step_traced(self.state.as_ref(), graph, frame, self.config.threshold, position)?;
                self.state = Some(state);
                (step, run)
            }
        };
        self.last_trace.clear();
        self.last_trace.extend_from_slice(run.trace());
        self.position += 1;
        Ok(step)
    }
}
