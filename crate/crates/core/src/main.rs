use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use temporal_exit::bench::{self, format_sig6, LabelingComparison};
use temporal_exit::config::RunConfig;
use temporal_exit::graph::{build_desk_model, load_model, save_model, ExitGraph};
use temporal_exit::stream::{class_centroids, generate_split, generate_stream, load_stream, save_stream};
use temporal_exit::{Error, Result, StreamConfig, StreamSample};

#[derive(Parser)]
#[command(name = "temporal-exit", version, about = "Temporal early-exit inference benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the desk model and write it as a model file.
    GenModel(Common),
    /// Generate the synthetic radar stream and write it as a stream file.
    GenStream(Common),
    /// Evaluate the configured policy and write one CSV row.
    Run(Inputs),
    /// Evaluate single exit, confidence, and DD/TP threshold sweeps as CSV.
    Sweep(Inputs),
    /// Compare majority-vote and confidence labeling of new scenes.
    CompareLabeling(Inputs),
}

#[derive(Args)]
struct Common {
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; CSV commands print to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct Inputs {
    #[command(flatten)]
    common: Common,
    /// Model file to evaluate instead of building the desk model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Stream file to evaluate instead of generating one.
    #[arg(long)]
    stream: Option<PathBuf>,
}

struct Context {
    config: RunConfig,
    stream: StreamConfig,
}

impl Common {
    fn context(&self) -> Result<Context> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if self.seed.is_some() {
            config.seed = self.seed;
        }
        let stream = config.stream_config();
        stream.validate()?;
        init_threads(self.threads)?;
        Ok(Context { config, stream })
    }
}

#[cfg(feature = "parallel")]
fn init_threads(threads: usize) -> Result<()> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn init_threads(_threads: usize) -> Result<()> {
    Ok(())
}

fn desk_model(ctx: &Context) -> Result<ExitGraph> {
    let centroids = class_centroids(&ctx.stream)?;
    build_desk_model(&centroids, &ctx.config.trunk_config(), ctx.stream.seed)
}

fn load_inputs(inputs: &Inputs, ctx: &Context) -> Result<(ExitGraph, Vec<StreamSample>)> {
    let graph = match &inputs.model {
        Some(path) => load_model(path)?,
        None => desk_model(ctx)?,
    };
    let samples = match &inputs.stream {
        Some(path) => {
            let file = load_stream(path)?;
            if file.class_count != graph.class_count() {
                return Err(Error::Inconsistent(format!(
                    "stream has {} classes, model has {}",
                    file.class_count,
                    graph.class_count()
                )));
            }
            file.samples
        }
        None => generate_stream(&ctx.stream)?.samples,
    };
    Ok((graph, samples))
}

/// Confidence thresholds from the config, or tuned on a held-out split.
fn confidence_thresholds(ctx: &Context, graph: &ExitGraph) -> Result<Vec<f32>> {
    if let Some(t) = &ctx.config.confidence_thresholds {
        return Ok(t.clone());
    }
    let mut held = ctx.stream.clone();
    held.stream_length = ctx.config.tuning_length.unwrap_or((ctx.stream.stream_length / 2).max(1));
    let tuning = generate_split(&held, 1)?;
    let grid = ctx.config.confidence_grid.clone().unwrap_or_else(bench::default_confidence_grid);
    bench::tune_confidence(graph, &tuning.samples, &grid)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--out <path> is required".into()))
}

fn labeling_csv(c: &LabelingComparison, thresholds: &[f32]) -> String {
    let mut out = String::from("vote_accuracy,confidence_accuracy,gap,confidence_thresholds\n");
    let t: Vec<String> = thresholds.iter().map(|&v| format_sig6(f64::from(v))).collect();
    let _ = writeln!(
        out,
        "{:.4},{:.4},{:.4},{}",
        c.vote_accuracy,
        c.confidence_accuracy,
        c.gap(),
        t.join(";")
    );
    out
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenModel(common) => {
            let ctx = common.context()?;
            save_model(&desk_model(&ctx)?, require_out(&common)?)
        }
        Command::GenStream(common) => {
            let ctx = common.context()?;
            let stream = generate_stream(&ctx.stream)?;
            save_stream(&stream.samples, ctx.stream.class_count, require_out(&common)?)
        }
        Command::Run(inputs) => {
            let ctx = inputs.common.context()?;
            let policy = ctx.config.policy_config()?;
            let (graph, samples) = load_inputs(&inputs, &ctx)?;
            let metrics = bench::evaluate(&policy, &graph, &samples)?;
            let table = bench::SweepTable {
                kind: policy.kind,
                rows: vec![bench::SweepRow {
                    threshold: policy.threshold,
                    metrics,
                }],
            };
            emit(inputs.common.out.as_deref(), &bench::render_csv(&[table])?)
        }
        Command::Sweep(inputs) => {
            let ctx = inputs.common.context()?;
            let (graph, samples) = load_inputs(&inputs, &ctx)?;
            let grid = ctx.config.thresholds.clone().unwrap_or_else(bench::default_threshold_grid);
            let confidence = confidence_thresholds(&ctx, &graph)?;
            let tables = bench::benchmark_tables(&graph, &samples, &grid, &confidence)?;
            emit(inputs.common.out.as_deref(), &bench::render_csv(&tables)?)
        }
        Command::CompareLabeling(inputs) => {
            let ctx = inputs.common.context()?;
            let (graph, samples) = load_inputs(&inputs, &ctx)?;
            let confidence = confidence_thresholds(&ctx, &graph)?;
            let comparison = bench::labeling_comparison(&graph, &samples, &confidence)?;
            emit(inputs.common.out.as_deref(), &labeling_csv(&comparison, &confidence))
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
