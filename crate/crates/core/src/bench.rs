//! Benchmark protocol: accuracy, mean MACs per inference and exit usage for
//! each policy, threshold sweeps, and the new-scene labeling comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{ExitGraph, PartialRun};
use crate::ops::argmax;
use crate::par;
use crate::policy::{majority_vote, PolicyConfig, PolicyKind, PolicyRunner, ReferenceMode};
use crate::stream::StreamSample;

/// Summary of one policy pass over a stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub policy: PolicyConfig,
    pub accuracy: f64,
    pub mean_macs: f64,
    /// Fraction of steps ending at each exit, with the full vote in the last slot.
    pub exit_shares: Vec<f64>,
    pub scene_change_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub kind: PolicyKind,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    fn single(metrics: RunMetrics) -> Self {
        Self {
            kind: metrics.policy.kind,
            rows: vec![SweepRow {
                threshold: metrics.policy.threshold,
                metrics,
            }],
        }
    }
}

/// Sixteen thresholds spaced geometrically from 1e-3 to √2, the largest possible
/// distance between two probability vectors.
pub fn default_threshold_grid() -> Vec<f64> {
    geometric_grid(1e-3, std::f64::consts::SQRT_2, 16)
}

pub fn geometric_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let ratio = (hi / lo).powf(1.0 / (points - 1) as f64);
            let mut grid: Vec<f64> = (0..points).map(|i| lo * ratio.powi(i as i32)).collect();
            grid[points - 1] = hi;
            grid
        }
    }
}

fn check_stream(graph: &ExitGraph, stream: &[StreamSample]) -> Result<()> {
    let first = stream
        .first()
        .ok_or_else(|| Error::InvalidArgument("stream is empty".into()))?;
    if first.frame.tensor().shape() != graph.input_shape() {
        return Err(Error::Shape(format!(
            "stream frames are {:?}, model expects {:?}",
            first.frame.tensor().shape(),
            graph.input_shape()
        )));
    }
    Ok(())
}

#[doc(hidden)]
pub fn evaluate_with_reference(
    policy: &PolicyConfig,
    graph: &ExitGraph,
    stream: &[StreamSample],
    mode: ReferenceMode,
) -> Result<RunMetrics> {
    check_stream(graph, stream)?;
    let mut runner = PolicyRunner::new(graph, policy.clone())?.with_reference_mode(mode);
    let slots = graph.exit_count() + 1;
    let mut counts = vec![0usize; slots];
    let mut correct = 0usize;
    let mut total_macs = 0u128;
    let mut changes = 0usize;
    for sample in stream {
        let step = runner.step(&sample.frame)?;
        correct += usize::from(step.prediction == sample.label);
        total_macs += u128::from(step.macs.get());
        counts[step.exit_used.slot(graph.exit_count())] += 1;
        changes += usize::from(step.scene_changed);
    }
    let n = stream.len() as f64;
    Ok(RunMetrics {
        policy: policy.clone(),
        accuracy: correct as f64 / n,
        mean_macs: total_macs as f64 / n,
        exit_shares: counts.iter().map(|&c| c as f64 / n).collect(),
        scene_change_count: changes,
    })
}

/// Feeds the stream through a fresh policy instance, in order.
pub fn evaluate(policy: &PolicyConfig, graph: &ExitGraph, stream: &[StreamSample]) -> Result<RunMetrics> {
    evaluate_with_reference(policy, graph, stream, ReferenceMode::SceneInitial)
}

/// One evaluation per threshold, rows in increasing threshold order.
/// Threshold points are independent and run in parallel when enabled.
pub fn sweep(kind: PolicyKind, thresholds: &[f64], graph: &ExitGraph, stream: &[StreamSample]) -> Result<SweepTable> {
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("threshold list is empty".into()));
    }
    if thresholds.iter().any(|t| t.is_nan()) {
        return Err(Error::InvalidArgument("threshold list contains NaN".into()));
    }
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let configs: Vec<PolicyConfig> = sorted
        .iter()
        .map(|&threshold| PolicyConfig {
            kind,
            threshold,
            confidence_thresholds: Vec::new(),
        })
        .collect();
    let metrics = par::try_map(&configs, |cfg| evaluate(cfg, graph, stream))?;
    Ok(SweepTable {
        kind,
        rows: sorted
            .into_iter()
            .zip(metrics)
            .map(|(threshold, metrics)| SweepRow { threshold, metrics })
            .collect(),
    })
}

/// Exit outputs of a full run over every sample.
pub fn full_runs(graph: &ExitGraph, stream: &[StreamSample]) -> Result<Vec<PartialRun>> {
    check_stream(graph, stream)?;
    par::try_map(stream, |s| graph.run_full(&s.frame))
}

/// Accuracy of every individual exit, followed by the accuracy of the majority vote.
pub fn exit_accuracies(graph: &ExitGraph, stream: &[StreamSample]) -> Result<Vec<f64>> {
    let runs = full_runs(graph, stream)?;
    let mut correct = vec![0usize; graph.exit_count() + 1];
    for (run, sample) in runs.iter().zip(stream) {
        let preds = run.all_predictions().expect("full run");
        for (slot, &p) in preds.iter().enumerate() {
            correct[slot] += usize::from(p == sample.label);
        }
        correct[graph.exit_count()] += usize::from(majority_vote(&preds)? == sample.label);
    }
    Ok(correct.iter().map(|&c| c as f64 / stream.len() as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelingComparison {
    pub vote_accuracy: f64,
    pub confidence_accuracy: f64,
}

impl LabelingComparison {
    pub fn gap(&self) -> f64 {
        (self.vote_accuracy - self.confidence_accuracy).abs()
    }
}

fn confidence_label(run: &PartialRun, thresholds: &[f32], last: usize) -> usize {
    for (exit, &min) in thresholds.iter().enumerate() {
        let probs = run.exit_output(exit).expect("full run");
        let best = argmax(probs).expect("non-empty");
        if probs[best] >= min {
            return best;
        }
    }
    argmax(run.exit_output(last).expect("full run")).expect("non-empty")
}

/// Labels every sample twice from a full run: by majority vote and by the
/// first sufficiently confident exit.
pub fn labeling_comparison(
    graph: &ExitGraph,
    stream: &[StreamSample],
    confidence_thresholds: &[f32],
) -> Result<LabelingComparison> {
    PolicyConfig::confidence(confidence_thresholds.to_vec()).validate(graph)?;
    let runs = full_runs(graph, stream)?;
    let last = graph.final_exit();
    let mut vote_ok = 0usize;
    let mut conf_ok = 0usize;
    for (run, sample) in runs.iter().zip(stream) {
        let preds = run.all_predictions().expect("full run");
        vote_ok += usize::from(majority_vote(&preds)? == sample.label);
        conf_ok += usize::from(confidence_label(run, confidence_thresholds, last) == sample.label);
    }
    let n = stream.len() as f64;
    Ok(LabelingComparison {
        vote_accuracy: vote_ok as f64 / n,
        confidence_accuracy: conf_ok as f64 / n,
    })
}

/// Candidate per-exit confidence thresholds: 0.50, 0.55, ..., 0.95.
pub fn default_confidence_grid() -> Vec<f32> {
    (0..10).map(|i| 0.5 + 0.05 * i as f32).collect()
}

/// Exhaustive search over `grid` for every early exit. Picks the most accurate
/// configuration whose mean cost stays below the single-exit cost; ties go to
/// the cheaper one, then to the first in grid order. If nothing is cheaper than
/// the single-exit network, the cheapest configuration is returned.
pub fn tune_confidence(graph: &ExitGraph, stream: &[StreamSample], grid: &[f32]) -> Result<Vec<f32>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("confidence grid is empty".into()));
    }
    let runs = full_runs(graph, stream)?;
    let early = graph.exit_count() - 1;
    let last = graph.final_exit();
    // cost of stopping at exit k after evaluating heads 0..=k
    let stop_costs: Vec<u64> = (0..graph.exit_count())
        .map(|k| {
            (0..=k)
                .map(|j| graph.segment_cost(j).and_then(|s| Ok(s.get() + graph.head_cost(j)?.get())))
                .sum::<Result<u64>>()
        })
        .collect::<Result<_>>()?;
    let labelled: Vec<(Vec<(usize, f32)>, usize)> = runs
        .iter()
        .zip(stream)
        .map(|(run, s)| {
            let tops = (0..graph.exit_count())
                .map(|k| {
                    let p = run.exit_output(k).expect("full run");
                    let best = argmax(p).expect("non-empty");
                    (best, p[best])
                })
                .collect();
            (tops, s.label)
        })
        .collect();

    let combos = grid.len().pow(early as u32);
    let candidates: Vec<Vec<f32>> = (0..combos)
        .map(|mut code| {
            let mut t = vec![0.0; early];
            for slot in t.iter_mut() {
                *slot = grid[code % grid.len()];
                code /= grid.len();
            }
            t
        })
        .collect();
    let scored = par::map(&candidates, |thresholds| {
        let mut correct = 0usize;
        let mut cost = 0u128;
        for (tops, label) in &labelled {
            let exit = thresholds
                .iter()
                .enumerate()
                .find(|&(k, &min)| tops[k].1 >= min)
                .map_or(last, |(k, _)| k);
            correct += usize::from(tops[exit].0 == *label);
            cost += u128::from(stop_costs[exit]);
        }
        (correct, cost)
    });
    let budget = u128::from(graph.single_exit_cost().get()) * labelled.len() as u128;
    let best_feasible = scored
        .iter()
        .enumerate()
        .filter(|(_, (_, cost))| *cost < budget)
        .max_by(|(ia, a), (ib, b)| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(ib.cmp(ia)));
    let pick = match best_feasible {
        Some((i, _)) => i,
        None => scored
            .iter()
            .enumerate()
            .min_by(|(ia, a), (ib, b)| a.1.cmp(&b.1).then(ia.cmp(ib)))
            .map(|(i, _)| i)
            .expect("grid is non-empty"),
    };
    Ok(candidates[pick].clone())
}

/// Everything the `sweep` command reports for one model and stream.
pub fn benchmark_tables(
    graph: &ExitGraph,
    stream: &[StreamSample],
    grid: &[f64],
    confidence_thresholds: &[f32],
) -> Result<Vec<SweepTable>> {
    let single = evaluate(&PolicyConfig::single_exit(), graph, stream)?;
    let confidence = evaluate(&PolicyConfig::confidence(confidence_thresholds.to_vec()), graph, stream)?;
    Ok(vec![
        SweepTable::single(single),
        SweepTable::single(confidence),
        sweep(PolicyKind::DifferenceDetection, grid, graph, stream)?,
        sweep(PolicyKind::TemporalPatience, grid, graph, stream)?,
    ])
}

/// Formats like C's `%g` with six significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let trim = |s: &str| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

pub fn csv_header(exit_count: usize) -> String {
    let mut h = String::from("policy,threshold,accuracy,mean_macs");
    for k in 0..exit_count {
        let _ = write!(h, ",share_exit{k}");
    }
    h.push_str(",share_full_vote,scene_changes");
    h
}

pub fn render_csv(tables: &[SweepTable]) -> Result<String> {
    let width = tables
        .iter()
        .flat_map(|t| &t.rows)
        .map(|r| r.metrics.exit_shares.len())
        .next()
        .ok_or_else(|| Error::InvalidArgument("no rows to report".into()))?;
    if tables.iter().flat_map(|t| &t.rows).any(|r| r.metrics.exit_shares.len() != width) {
        return Err(Error::InvalidArgument("rows disagree on exit count".into()));
    }
    let mut out = csv_header(width - 1);
    out.push('\n');
    for table in tables {
        for row in &table.rows {
            let m = &row.metrics;
            let _ = write!(
                out,
                "{},{},{},{}",
                table.kind.name(),
                format_sig6(row.threshold),
                format_sig6(m.accuracy),
                format_sig6(m.mean_macs)
            );
            for share in &m.exit_shares {
                let _ = write!(out, ",{}", format_sig6(*share));
            }
            let _ = writeln!(out, ",{}", m.scene_change_count);
        }
    }
    Ok(out)
}

pub fn report_csv(tables: &[SweepTable], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_csv(tables)?)?;
    Ok(())
}
