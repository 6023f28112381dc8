//! Command-line front end over the run pipeline. Every subcommand loads
//! the TOML run configuration, applies the `MINDVLA_SEED` override, and
//! reads or writes artifacts beneath the configured output directory.

use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mindvla_core::config::{RunConfig, SEED_ENV_VAR};
use mindvla_core::layout::Mode;
use mindvla_core::mot::Grouping;
use mindvla_core::pipeline::{self, BackboneKind};
use mindvla_core::train::TemporalMode;

#[derive(Parser)]
#[command(
    name = "mindvla",
    version,
    about = "Desk-scale driving stack: synthetic scenarios, a joint language \
             and trajectory model, streaming memory, evaluation, and reward \
             post-training"
)]
struct Cli {
    /// Run configuration; missing sections fall back to the desk defaults.
    #[arg(long, global = true, default_value = "configs/desk.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval scenario splits.
    GenData,
    /// Train under a temporal regime and save the checkpoint.
    Train(TemporalArgs),
    /// Evaluate a checkpoint and write the metric report.
    Eval(EvalArgs),
    /// Trace per-frame replans over one scenario and stitch them.
    Stream(StreamArgs),
    /// Denoise one frame and render the snapshots and the intent fan-out.
    Infer(InferArgs),
    /// Reward post-training on top of a supervised checkpoint.
    Grpo(CheckpointArgs),
    /// Tie the routed backbone to a dense checkpoint, check the drift, and
    /// time the reduced generation path.
    Mot(MotArgs),
    /// Regenerate SVG charts from the run logs.
    Plot,
}

fn parse_temporal(s: &str) -> std::result::Result<TemporalMode, String> {
    TemporalMode::from_str(s)
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    match s {
        "vqa_first" => Ok(Mode::VqaFirst),
        "vqa_only" => Ok(Mode::VqaOnly),
        "action_first" => Ok(Mode::ActionFirst),
        "action_only" => Ok(Mode::ActionOnly),
        other => Err(format!(
            "unknown mode {other:?} (vqa_first, vqa_only, action_first, action_only)"
        )),
    }
}

fn parse_grouping(s: &str) -> std::result::Result<Grouping, String> {
    match s {
        "context-proprio-action" => Ok(Grouping::ContextProprioAction),
        "context-action" => Ok(Grouping::ContextAction),
        other => {
            Err(format!("unknown grouping {other:?} (context-proprio-action, context-action)"))
        }
    }
}

#[derive(Args)]
struct TemporalArgs {
    /// chunk, stream, or stream+memory.
    #[arg(long, default_value = "chunk", value_parser = parse_temporal)]
    temporal: TemporalMode,
}

#[derive(Args)]
struct EvalArgs {
    /// chunk, stream, or stream+memory.
    #[arg(long, default_value = "chunk", value_parser = parse_temporal)]
    temporal: TemporalMode,
    /// Defaults to the regime's own training checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    /// stream or stream+memory (chunk traces but cannot stitch).
    #[arg(long, default_value = "stream+memory", value_parser = parse_temporal)]
    temporal: TemporalMode,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Index into the eval split.
    #[arg(long, default_value_t = 0)]
    scenario: usize,
}

#[derive(Args)]
struct InferArgs {
    /// vqa_first, action_first, or action_only.
    #[arg(long, default_value = "action_first", value_parser = parse_mode)]
    mode: Mode,
    /// Condition on this intent instead of the model's own prediction.
    #[arg(long)]
    intent: Option<String>,
    /// Guidance strength; defaults to the configured value.
    #[arg(long)]
    cfg_scale: Option<f64>,
    /// dense or mot.
    #[arg(long, default_value = "dense")]
    backbone: String,
    /// Expert grouping; only meaningful with --backbone mot.
    #[arg(long, value_parser = parse_grouping)]
    grouping: Option<Grouping>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Index into the eval split.
    #[arg(long, default_value_t = 0)]
    scenario: usize,
    /// Frame within the scenario.
    #[arg(long, default_value_t = 0)]
    frame: usize,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Defaults to the chunk-regime training checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct MotArgs {
    /// context-proprio-action or context-action.
    #[arg(long, default_value = "context-proprio-action", value_parser = parse_grouping)]
    grouping: Grouping,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn backbone_kind(backbone: &str, grouping: Option<Grouping>) -> Result<BackboneKind> {
    match backbone {
        "dense" => {
            if grouping.is_some() {
                bail!("--grouping only applies with --backbone mot");
            }
            Ok(BackboneKind::Dense)
        }
        "mot" => Ok(BackboneKind::Mot(grouping.unwrap_or(Grouping::ContextProprioAction))),
        other => bail!("unknown backbone {other:?} (dense, mot)"),
    }
}

fn horizon_line(values: &[mindvla_core::metrics::HorizonValue]) -> String {
    values
        .iter()
        .map(|hv| match hv.value {
            Some(v) => format!("{}s: {v:.3}", hv.horizon_s),
            None => format!("{}s: -", hv.horizon_s),
        })
        .collect::<Vec<_>>()
        .join("  ")
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut rc = RunConfig::load(&cli.config)
        .with_context(|| format!("loading config {}", cli.config.display()))?;
    if rc.apply_env()? {
        eprintln!("seed overridden to {} via {SEED_ENV_VAR}", rc.seed);
    }

    match cli.command {
        Command::GenData => {
            let s = pipeline::generate_datasets(&rc)?;
            println!(
                "wrote {} train scenarios to {} and {} eval scenarios to {}",
                s.train,
                s.train_path.display(),
                s.eval,
                s.eval_path.display()
            );
        }
        Command::Train(a) => {
            let s = pipeline::train_from_config(&rc, a.temporal)?;
            if let Some(last) = s.rows.last() {
                println!(
                    "{} training finished after {} steps (language loss {:.4}, velocity loss {:.4})",
                    s.temporal.name(),
                    s.rows.len(),
                    last.l_ar,
                    last.l_fm
                );
            }
            println!("checkpoint: {}", s.checkpoint.display());
            println!("log: {}", s.log.display());
        }
        Command::Eval(a) => {
            let s = pipeline::evaluate(&rc, a.temporal, a.checkpoint.as_deref())?;
            let r = &s.report;
            println!("{} evaluation over {} replans", s.temporal.name(), r.frames);
            println!("  rater score mean: {:.3}", r.rfs_mean);
            println!("  trust region rate: {:.3}", r.trust_region_rate);
            println!("  displacement vs ground truth: {}", horizon_line(&r.ade_gt));
            println!("  executed-path displacement: {}", horizon_line(&r.sequence_ade));
            println!("report: {}", s.report_path.display());
        }
        Command::Stream(a) => {
            let s = pipeline::stream_trace(&rc, a.temporal, a.checkpoint.as_deref(), a.scenario)?;
            println!("{} trace over {} replans: {}", s.temporal.name(), s.replans, s.trace_path.display());
            match (s.stitched_csv, s.stitched_svg, s.mean_join_residual) {
                (Some(csv), Some(svg), Some(res)) => {
                    println!("stitched path ({} joins at {res:.4} m mean residual):", s.replans - 1);
                    println!("  {}", csv.display());
                    println!("  {}", svg.display());
                }
                _ => println!("replans share no waypoints, nothing to stitch"),
            }
        }
        Command::Infer(a) => {
            let backbone = backbone_kind(&a.backbone, a.grouping)?;
            let s = pipeline::infer_frame(
                &rc,
                &backbone,
                a.mode,
                a.intent.as_deref(),
                a.cfg_scale,
                a.checkpoint.as_deref(),
                a.scenario,
                a.frame,
            )?;
            let source = if s.intent_was_predicted { "predicted" } else { "given" };
            println!("intent: {} ({source}), backbone: {}", s.intent, backbone.name());
            let end = s.waypoints.last().expect("trajectory is never empty");
            println!("trajectory endpoint after 5 s: ({:.2}, {:.2}) m", end[0], end[1]);
            println!("denoising snapshots: {}", s.denoise_svg.display());
            println!("intent fan-out: {}", s.fanout_svg.display());
        }
        Command::Grpo(a) => {
            let s = pipeline::post_train(&rc, a.checkpoint.as_deref())?;
            let first = s.stats.first().expect("at least one iteration");
            let last = s.stats.last().expect("at least one iteration");
            println!(
                "post-training over {} iterations: mean reward {:.3} -> {:.3}",
                s.stats.len(),
                first.mean_reward,
                last.mean_reward
            );
            println!("checkpoint: {}", s.checkpoint.display());
            println!("log: {}", s.log.display());
            println!("reward curve: {}", s.reward_svg.display());
        }
        Command::Mot(a) => {
            let s = pipeline::mot_report(&rc, a.grouping, a.checkpoint.as_deref())?;
            println!("grouping {}: max divergence from dense {:.3e}", s.grouping, s.max_divergence);
            let b = &s.benchmark;
            println!(
                "reduced pass {} tokens vs {} full: {:.1} ms vs {:.1} ms over {} reps",
                b.fast_len,
                b.slow_len,
                1e3 * b.fast_secs / b.reps as f64,
                1e3 * b.slow_secs / b.reps as f64,
                b.reps
            );
            println!("report: {}", s.report_path.display());
        }
        Command::Plot => {
            let s = pipeline::render_plots(&rc)?;
            if s.written.is_empty() {
                println!("no logs found to plot");
            } else {
                for p in &s.written {
                    println!("wrote {}", p.display());
                }
            }
        }
    }
    Ok(())
}
