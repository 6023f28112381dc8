//! Run orchestration. Every entry point takes a `RunConfig`, resolves its
//! inputs from the run directory, and writes artifacts back beneath it:
//! datasets, checkpoints, training logs, evaluation reports, streaming
//! traces, and SVG charts. The evaluation loop is the reference
//! implementation of the three temporal regimes; everything else routes
//! through the library trainers.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::flow::{euler_integrate, DenoiseResult, FlowError};
use crate::grpo::{run_grpo, write_grpo_csv, GrpoError, GrpoStats};
use crate::intent::{cfg_velocity, guided_denoise};
use crate::layout::Mode;
use crate::memory::{self, add_memory_params, has_memory_params, MemoryChannel, MemoryEntry};
use crate::metrics::{
    ade, rater_matched_ade, rfs, sequence_ade, synthetic_raters, EvalAccumulator, EvalReport,
    FrameEval, HorizonValue, MetricsError, SEQUENCE_HORIZONS_S,
};
use crate::model::{
    denormalize_actions, init_params, ActionIo, Conditioning, FrameInputs, ModelCtx, ModelError,
};
use crate::mot::{benchmark_fast_mode, mot_forward, tied_from_dense, FastModeBenchmark, Grouping};
use crate::rng;
use crate::scenario::bev::GridConfig;
use crate::scenario::io::{read_jsonl, write_jsonl};
use crate::scenario::vocab::IntentVocabulary;
use crate::scenario::{
    generate_scenario, ActionTrajectory, Scenario, ScenarioError, ScenarioParams, ACTION_DIMS,
    FUTURE_RATE_HZ, L_F,
};
use crate::se2::{stitch_chain, Clip, Se2Error};
use crate::svg::{plot_denoise, SvgPlot, Style};
use crate::tensor::{
    load_params, save_params, CheckpointDtype, ParamSet, Tape, TensorError,
};
use crate::train::{
    build_dataset, train_sft, train_streaming, write_log_csv, LogRow, TemporalMode, TrainError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    PostTrain(#[from] GrpoError),
    #[error(transparent)]
    Geometry(#[from] Se2Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    BadRequest(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Filesystem layout of one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn of(rc: &RunConfig) -> Self {
        RunPaths::new(rc.out_dir())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data").join("train.jsonl")
    }

    pub fn eval_data(&self) -> PathBuf {
        self.root.join("data").join("eval.jsonl")
    }

    pub fn checkpoint(&self, tag: &str) -> PathBuf {
        self.root.join("ckpt").join(format!("{tag}.bin"))
    }

    pub fn train_log(&self, tag: &str) -> PathBuf {
        self.root.join("logs").join(format!("train-{tag}.csv"))
    }

    pub fn grpo_log(&self) -> PathBuf {
        self.root.join("logs").join("grpo.csv")
    }

    pub fn report(&self, temporal: TemporalMode) -> PathBuf {
        self.root.join("reports").join(format!("eval-{}.json", temporal.name()))
    }

    pub fn trace(&self, temporal: TemporalMode) -> PathBuf {
        self.root.join("traces").join(format!("trace-{}.jsonl", temporal.name()))
    }

    pub fn stitched_csv(&self, temporal: TemporalMode) -> PathBuf {
        self.root.join("traces").join(format!("stitched-{}.csv", temporal.name()))
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(format!("{name}.svg"))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Outcome of `generate_datasets`.
#[derive(Debug, Clone)]
pub struct DataSummary {
    pub train: usize,
    pub eval: usize,
    pub train_path: PathBuf,
    pub eval_path: PathBuf,
}

fn sample_set(seed: u64, label: &str, count: usize) -> Result<Vec<Scenario>> {
    let vocab = IntentVocabulary::three_class();
    let params = ScenarioParams::desk();
    let mut r = rng::stream(seed, label);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let intent = &vocab.names()[i % vocab.len()];
        out.push(generate_scenario(r.next_u64(), intent, &params)?);
    }
    Ok(out)
}

/// Deterministic synthetic splits for one run directory, intents cycled
/// evenly through the vocabulary.
pub fn generate_datasets(rc: &RunConfig) -> Result<DataSummary> {
    let paths = RunPaths::of(rc);
    rc.write_resolved(paths.root())?;
    let train = sample_set(rc.seed, "data/train", rc.data.train_scenarios)?;
    let eval = sample_set(rc.seed, "data/eval", rc.data.eval_scenarios)?;
    let train_path = paths.train_data();
    let eval_path = paths.eval_data();
    ensure_parent(&train_path)?;
    write_jsonl(&train_path, &train)?;
    write_jsonl(&eval_path, &eval)?;
    Ok(DataSummary { train: train.len(), eval: eval.len(), train_path, eval_path })
}

fn load_or_generate(rc: &RunConfig) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
    let paths = RunPaths::of(rc);
    if !paths.train_data().exists() || !paths.eval_data().exists() {
        generate_datasets(rc)?;
    }
    Ok((read_jsonl(&paths.train_data())?, read_jsonl(&paths.eval_data())?))
}

fn resolve_checkpoint(paths: &RunPaths, explicit: Option<&Path>, default_tag: &str) -> Result<ParamSet> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => paths.checkpoint(default_tag),
    };
    if !path.exists() {
        return Err(PipelineError::BadRequest(format!(
            "checkpoint {} not found; train first or pass one explicitly",
            path.display()
        )));
    }
    Ok(load_params(&path)?)
}

/// Outcome of `train_from_config`.
#[derive(Debug)]
pub struct TrainSummary {
    pub temporal: TemporalMode,
    pub rows: Vec<LogRow>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Supervised training under a temporal regime. `Chunk` runs the framewise
/// trainer over the flattened dataset; the stream regimes run the streaming
/// trainer. The checkpoint always carries the memory parameters so any
/// regime can evaluate it.
pub fn train_from_config(rc: &RunConfig, temporal: TemporalMode) -> Result<TrainSummary> {
    let paths = RunPaths::of(rc);
    rc.write_resolved(paths.root())?;
    let (train_scen, _) = load_or_generate(rc)?;
    let mut params = init_params(&rc.backbone, rc.seed);
    add_memory_params(&mut params, &rc.backbone, rc.seed.wrapping_add(1));
    let grid = GridConfig::default();
    let vocab = IntentVocabulary::three_class();
    let rows = match temporal {
        TemporalMode::Chunk => {
            let dataset = build_dataset(&train_scen, &vocab, &grid)?;
            train_sft(&mut params, &rc.backbone, &dataset, &rc.sft_config())?
        }
        TemporalMode::Stream | TemporalMode::StreamMemory => {
            train_streaming(&mut params, &rc.backbone, &train_scen, &rc.stream_config(), temporal, &grid)?
        }
    };
    let checkpoint = paths.checkpoint(temporal.name());
    ensure_parent(&checkpoint)?;
    save_params(&checkpoint, &params, CheckpointDtype::F64)?;
    let log = paths.train_log(temporal.name());
    ensure_parent(&log)?;
    write_log_csv(&log, &rows)?;
    Ok(TrainSummary { temporal, rows, checkpoint, log })
}

/// One replan's output while rolling a scenario.
#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub frame_idx: usize,
    pub intent_class: usize,
    /// Predicted waypoints in the frame's ego coordinates.
    pub waypoints: Vec<[f64; 2]>,
    /// Channel occupancy after this frame's write (memory regime only).
    pub channel_len: usize,
}

/// Future waypoints per frame step; frames tick slower than waypoints.
fn ticks_per_frame(s: &Scenario) -> usize {
    if s.frames.len() < 2 {
        return L_F;
    }
    let dt = s.frames[1].timestamp - s.frames[0].timestamp;
    ((dt * FUTURE_RATE_HZ).round() as usize).clamp(1, L_F)
}

/// Frames between replans in the chunk regime: the prediction horizon in
/// frames, so consecutive chunks touch without overlap.
fn replan_interval(s: &Scenario) -> usize {
    (L_F / ticks_per_frame(s)).max(1)
}

/// Roll fixed parameters over one scenario under a temporal regime,
/// producing a prediction per replan. Each replan runs one language pass
/// for the intent, then the guided Euler loop on the same tape so the
/// memory read is shared across steps; only the memory regime carries the
/// channel between frames.
pub fn roll_scenario(
    params: &ParamSet,
    rc: &RunConfig,
    temporal: TemporalMode,
    scenario: &Scenario,
    vocab: &IntentVocabulary,
    grid: &GridConfig,
) -> Result<Vec<FramePrediction>> {
    if temporal.uses_memory() && !has_memory_params(params) {
        return Err(PipelineError::BadRequest(
            "the memory regime needs a checkpoint with memory parameters".into(),
        ));
    }
    let cfg = &rc.backbone;
    let steps = rc.flow.steps;
    let replan = match temporal {
        TemporalMode::Chunk => replan_interval(scenario),
        _ => 1,
    };
    let mut preds = Vec::new();
    let mut held: Option<(Tape, MemoryChannel)> = None;
    for (fi, frame) in scenario.frames.iter().enumerate() {
        if fi % replan != 0 {
            continue;
        }
        let tape = Tape::new();
        let mut channel = match &held {
            Some((old_tape, ch)) if temporal.uses_memory() => ch.carry_to(old_tape, &tape),
            _ => MemoryChannel::new(rc.memory.capacity),
        };
        let bound = params.bind_frozen(&tape);
        let ctx = ModelCtx::new(&tape, &bound, cfg);
        let inputs = FrameInputs::from_frame(frame, &scenario.qa_pairs[0], grid);
        let mem = if temporal.uses_memory() {
            Some(memory::read(&ctx, &channel, &frame.ego_pose, frame.timestamp, rc.memory.time_scale)?)
        } else {
            None
        };
        let (h_lang, lay_lang) = ctx.forward(Mode::VqaOnly, &inputs, mem, None)?;
        let class = ctx.predict_intent(h_lang, &lay_lang, vocab)?;

        let mut noise = rng::stream(rc.seed, &format!("eval/noise/{}/{fi}", scenario.id));
        let mut x: Vec<f64> = (0..L_F * ACTION_DIMS).map(|_| rng::normal(&mut noise)).collect();
        let dt = 1.0 / steps as f64;
        let mut last_hidden = h_lang;
        for k in 0..steps {
            let t = (steps - k) as f64 / steps as f64;
            let io = ActionIo { x_t: tape.constant(&[L_F, ACTION_DIMS], x.clone()), t };
            let (hidden, lay) = ctx.forward(Mode::ActionOnly, &inputs, mem, Some(&io))?;
            let v_c = tape.data(ctx.action_head(hidden, &lay, t, Conditioning::Class(class))?);
            let v_u = tape.data(ctx.action_head(hidden, &lay, t, Conditioning::Unconditional)?);
            let v = cfg_velocity(&v_u, &v_c, rc.guidance.scale);
            for (xi, vi) in x.iter_mut().zip(&v) {
                *xi -= dt * vi;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::NonFinite { step: k }.into());
            }
            last_hidden = hidden;
        }
        if temporal.uses_memory() {
            let tokens = memory::write(&ctx, last_hidden)?;
            channel.push(MemoryEntry { tokens, pose: frame.ego_pose, timestamp: frame.timestamp });
        }
        let waypoints = ActionTrajectory { values: denormalize_actions(&x) }.waypoints();
        preds.push(FramePrediction {
            frame_idx: fi,
            intent_class: class,
            waypoints,
            channel_len: channel.len(),
        });
        held = Some((tape, channel));
    }
    Ok(preds)
}

/// Waypoints actually driven under a regime, in the world frame. Stream
/// regimes commit one frame's worth of each replan and the entire final
/// prediction; the chunk regime drives each full chunk between replans.
fn executed_path(s: &Scenario, preds: &[FramePrediction], temporal: TemporalMode) -> Vec<[f64; 2]> {
    let commit = ticks_per_frame(s);
    let mut out = Vec::new();
    for (k, p) in preds.iter().enumerate() {
        let pose = &s.frames[p.frame_idx].ego_pose;
        let take = match temporal {
            TemporalMode::Chunk => p.waypoints.len(),
            _ if k + 1 == preds.len() => p.waypoints.len(),
            _ => commit.min(p.waypoints.len()),
        };
        out.extend(p.waypoints[..take].iter().map(|&w| pose.apply(w)));
    }
    out
}

/// Ground truth at the same absolute ticks as an executed path of length
/// `len`: tick k is frame (k / ticks-per-frame)'s own labeled future,
/// clamped to the final frame, which keeps every tick inside some frame's
/// horizon. Frame futures agree where they overlap, so the clamp only
/// changes whose copy of the label is read.
fn gt_executed(s: &Scenario, len: usize) -> Vec<[f64; 2]> {
    let tpf = ticks_per_frame(s);
    let futures: Vec<Vec<[f64; 2]>> = s.frames.iter().map(|f| f.gt_future.waypoints()).collect();
    (0..len)
        .map(|k| {
            let j = (k / tpf).min(s.frames.len() - 1);
            let local = k - j * tpf;
            debug_assert!(local < futures[j].len());
            s.frames[j].ego_pose.apply(futures[j][local])
        })
        .collect()
}

fn frame_speed(s: &Scenario, frame_idx: usize) -> f64 {
    let last = s.frames[frame_idx].ego_history.last().expect("history is never empty");
    (last[2] * last[2] + last[3] * last[3]).sqrt()
}

/// Evaluate fixed parameters over scenarios under one temporal regime.
/// Per-replan rows feed the rater metrics; per-scenario executed paths feed
/// the long-horizon sequence displacement.
pub fn evaluate_params(
    params: &ParamSet,
    rc: &RunConfig,
    temporal: TemporalMode,
    scenarios: &[Scenario],
) -> Result<EvalReport> {
    let vocab = IntentVocabulary::three_class();
    let grid = GridConfig::default();
    let mut acc = EvalAccumulator::new();
    let mut seq_sum = vec![(0.0f64, 0usize); SEQUENCE_HORIZONS_S.len()];
    for (si, s) in scenarios.iter().enumerate() {
        let preds = roll_scenario(params, rc, temporal, s, &vocab, &grid)?;
        for p in &preds {
            let gt = s.frames[p.frame_idx].gt_future.waypoints();
            let raters =
                synthetic_raters(&gt, rc.seed ^ ((si as u64) << 20) ^ p.frame_idx as u64);
            let speed = frame_speed(s, p.frame_idx);
            let b = rfs(&p.waypoints, &raters, speed, &rc.metrics)?;
            let min_dev = b.deviations.iter().cloned().fold(f64::INFINITY, f64::min);
            acc.add(FrameEval {
                intent: vocab.names()[p.intent_class].clone(),
                rfs: b.score,
                in_trust_region: min_dev <= b.radius,
                ade_gt_3s: ade(&p.waypoints, &gt, 3.0, rc.metrics.rate_hz)?,
                ade_gt_5s: ade(&p.waypoints, &gt, 5.0, rc.metrics.rate_hz)?,
                ade_matched_3s: rater_matched_ade(&p.waypoints, &raters, speed, &rc.metrics, 3.0)?,
                ade_matched_5s: rater_matched_ade(&p.waypoints, &raters, speed, &rc.metrics, 5.0)?,
            });
        }
        let exec = executed_path(s, &preds, temporal);
        let gt_exec = gt_executed(s, exec.len());
        let per = sequence_ade(&exec, &gt_exec, 1.0 / FUTURE_RATE_HZ, &SEQUENCE_HORIZONS_S)?;
        for (slot, hv) in seq_sum.iter_mut().zip(&per) {
            if let Some(v) = hv.value {
                slot.0 += v;
                slot.1 += 1;
            }
        }
    }
    let sequence = SEQUENCE_HORIZONS_S
        .iter()
        .zip(&seq_sum)
        .map(|(&h, &(sum, n))| HorizonValue {
            horizon_s: h,
            value: if n > 0 { Some(sum / n as f64) } else { None },
        })
        .collect();
    Ok(acc.finalize(sequence))
}

/// Outcome of `evaluate`.
#[derive(Debug)]
pub struct EvalSummary {
    pub temporal: TemporalMode,
    pub report: EvalReport,
    pub report_path: PathBuf,
}

/// Evaluate a checkpoint on the run's eval split and write the JSON report.
/// With no explicit checkpoint the regime's own training output is used.
pub fn evaluate(rc: &RunConfig, temporal: TemporalMode, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    let paths = RunPaths::of(rc);
    rc.write_resolved(paths.root())?;
    let (_, eval_scen) = load_or_generate(rc)?;
    let params = resolve_checkpoint(&paths, checkpoint, temporal.name())?;
    let report = evaluate_params(&params, rc, temporal, &eval_scen)?;
    let report_path = paths.report(temporal);
    ensure_parent(&report_path)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&report_path, json)?;
    Ok(EvalSummary { temporal, report, report_path })
}

#[derive(Serialize)]
struct TraceRow<'a> {
    frame: usize,
    intent: &'a str,
    channel_len: usize,
    waypoints: &'a [[f64; 2]],
}

/// Outcome of `stream_trace`.
#[derive(Debug)]
pub struct StreamSummary {
    pub temporal: TemporalMode,
    pub replans: usize,
    pub trace_path: PathBuf,
    pub stitched_csv: Option<PathBuf>,
    pub stitched_svg: Option<PathBuf>,
    pub mean_join_residual: Option<f64>,
}

/// Per-replan trace over one eval scenario, one JSONL row per replan, plus
/// the stitched world path registered from the overlapping local
/// predictions. Chunk replans share no ticks, so only the stream regimes
/// produce a stitched output.
pub fn stream_trace(
    rc: &RunConfig,
    temporal: TemporalMode,
    checkpoint: Option<&Path>,
    scenario_idx: usize,
) -> Result<StreamSummary> {
    let paths = RunPaths::of(rc);
    rc.write_resolved(paths.root())?;
    let (_, eval_scen) = load_or_generate(rc)?;
    let s = eval_scen.get(scenario_idx).ok_or_else(|| {
        PipelineError::BadRequest(format!(
            "scenario index {scenario_idx} out of range ({} eval scenarios)",
            eval_scen.len()
        ))
    })?;
    let params = resolve_checkpoint(&paths, checkpoint, temporal.name())?;
    let vocab = IntentVocabulary::three_class();
    let preds = roll_scenario(&params, rc, temporal, s, &vocab, &GridConfig::default())?;

    let trace_path = paths.trace(temporal);
    ensure_parent(&trace_path)?;
    let mut f = fs::File::create(&trace_path)?;
    for p in &preds {
        let row = TraceRow {
            frame: p.frame_idx,
            intent: &vocab.names()[p.intent_class],
            channel_len: p.channel_len,
            waypoints: &p.waypoints,
        };
        writeln!(f, "{}", serde_json::to_string(&row)?)?;
    }

    let stride = ticks_per_frame(s)
        * preds.get(1).map(|p| p.frame_idx - preds[0].frame_idx).unwrap_or(L_F);
    let overlap = L_F.saturating_sub(stride);
    let (mut stitched_csv, mut stitched_svg, mut residual) = (None, None, None);
    if preds.len() >= 2 && overlap >= 2 {
        let clips: Vec<Clip> =
            preds.iter().map(|p| Clip { points: p.waypoints.clone() }).collect();
        let stitched = stitch_chain(&clips, overlap)?;
        let csv_path = paths.stitched_csv(temporal);
        ensure_parent(&csv_path)?;
        let mut c = fs::File::create(&csv_path)?;
        writeln!(c, "tick,x,y")?;
        for (i, p) in stitched.trajectory.iter().enumerate() {
            writeln!(c, "{},{},{}", i, p[0], p[1])?;
        }
        let clip_points: Vec<Vec<[f64; 2]>> = clips.iter().map(|c| c.points.clone()).collect();
        let svg = crate::svg::plot_chain(
            &format!("stitched replans ({})", temporal.name()),
            &clip_points,
            &stitched.trajectory,
        );
        let svg_path = paths.plot(&format!("stitched-{}", temporal.name()));
        ensure_parent(&svg_path)?;
        fs::write(&svg_path, svg)?;
        residual = Some(
            stitched.join_residuals.iter().sum::<f64>() / stitched.join_residuals.len() as f64,
        );
        stitched_csv = Some(csv_path);
        stitched_svg = Some(svg_path);
    }
    Ok(StreamSummary {
        temporal,
        replans: preds.len(),
        trace_path,
        stitched_csv,
        stitched_svg,
        mean_join_residual: residual,
    })
}

/// Forward-pass routing for inference commands. `Mot` ties the routed
/// experts to the dense checkpoint, so both kinds speak for the same
/// weights.
#[derive(Debug, Clone)]
pub enum BackboneKind {
    Dense,
    Mot(Grouping),
}

impl BackboneKind {
    pub fn name(&self) -> &str {
        match self {
            BackboneKind::Dense => "dense",
            BackboneKind::Mot(g) => g.name(),
        }
    }
}

/// Guided denoising under either routing. The dense path reuses the
/// library routine; the routed path runs the same Euler loop through the
/// expert backbone with the shared action head.
fn guided_denoise_any(
    params: &ParamSet,
    rc: &RunConfig,
    backbone: &BackboneKind,
    mode: Mode,
    inputs: &FrameInputs,
    class: usize,
    scale: f64,
    eps: Vec<f64>,
    steps: usize,
) -> Result<DenoiseResult> {
    match backbone {
        BackboneKind::Dense => {
            Ok(guided_denoise(params, &rc.backbone, mode, inputs, class, scale, eps, steps, false)?)
        }
        BackboneKind::Mot(grouping) => {
            let (cfg, mot_params) = tied_from_dense(params, &rc.backbone, grouping.clone());
            Ok(euler_integrate(eps, steps, |x, t| {
                let tape = Tape::new();
                let bound = mot_params.bind_frozen(&tape);
                let ctx = ModelCtx::new(&tape, &bound, &rc.backbone);
                let io = ActionIo { x_t: tape.constant(&[L_F, ACTION_DIMS], x.to_vec()), t };
                let (hidden, lay) = mot_forward(&ctx, &cfg, mode, inputs, None, Some(&io), false)?;
                let v_c = tape.data(ctx.action_head(hidden, &lay, t, Conditioning::Class(class))?);
                let v_u =
                    tape.data(ctx.action_head(hidden, &lay, t, Conditioning::Unconditional)?);
                Ok(cfg_velocity(&v_u, &v_c, scale))
            })?)
        }
    }
}

/// Outcome of `infer_frame`.
#[derive(Debug)]
pub struct InferSummary {
    pub intent: String,
    pub intent_was_predicted: bool,
    pub waypoints: Vec<[f64; 2]>,
    pub denoise_svg: PathBuf,
    pub fanout_svg: PathBuf,
}

/// Single-frame inference with visual output: the guided denoising
/// snapshots under one intent, and one trajectory per intent class from
/// the same noise draw.
#[allow(clippy::too_many_arguments)]
pub fn infer_frame(
    rc: &RunConfig,
    backbone: &BackboneKind,
    mode: Mode,
    intent: Option<&str>,
    cfg_scale: Option<f64>,
    checkpoint: Option<&Path>,
    scenario_idx: usize,
    frame_idx: usize,
) -> Result<InferSummary> {
    if mode == Mode::VqaOnly {
        return Err(PipelineError::BadRequest(
            "vqa_only has no action span; pick an action-bearing mode".into(),
        ));
    }
    let paths = RunPaths::of(rc);
    rc.write_resolved(paths.root())?;
    let (_, eval_scen) = load_or_generate(rc)?;
    let s = eval_scen.get(scenario_idx).ok_or_else(|| {
        PipelineError::BadRequest(format!(
            "scenario index {scenario_idx} out of range ({} eval scenarios)",
            eval_scen.len()
        ))
    })?;
    let frame = s.frames.get(frame_idx).ok_or_else(|| {
        PipelineError::BadRequest(format!(
            "frame index {frame_idx} out of range ({} frames)",
            s.frames.len()
        ))
    })?;
    let params = resolve_checkpoint(&paths, checkpoint, TemporalMode::Chunk.name())?;
    let vocab = IntentVocabulary::three_class();
    let grid = GridConfig::default();
    let inputs = FrameInputs::from_frame(frame, &s.qa_pairs[0], &grid);
    let scale = cfg_scale.unwrap_or(rc.guidance.scale);

    let (class, predicted) = match intent {
        Some(name) => (
            vocab.class_of_name(name).ok_or_else(|| {
                PipelineError::BadRequest(format!(
                    "unknown intent {name:?} (expected one of {:?})",
                    vocab.names()
                ))
            })?,
            false,
        ),
        None => {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &rc.backbone);
            let (hidden, layout) = ctx.forward(Mode::VqaOnly, &inputs, None, None)?;
            (ctx.predict_intent(hidden, &layout, &vocab)?, true)
        }
    };

    let mut noise = rng::stream(rc.seed, "infer/noise");
    let eps: Vec<f64> = (0..L_F * ACTION_DIMS).map(|_| rng::normal(&mut noise)).collect();
    let out = guided_denoise_any(
        &params, rc, backbone, mode, &inputs, class, scale, eps.clone(), rc.flow.steps,
    )?;
    let snapshots: Vec<(f64, Vec<[f64; 2]>)> = out
        .snapshots
        .iter()
        .map(|sn| {
            (sn.t, ActionTrajectory { values: denormalize_actions(&sn.state) }.waypoints())
        })
        .collect();
    let waypoints = out.trajectory().waypoints();
    let gt = frame.gt_future.waypoints();
    let name = vocab.names()[class].clone();

    let denoise_svg = paths.plot(&format!("denoise-{}", mode.name()));
    ensure_parent(&denoise_svg)?;
    fs::write(
        &denoise_svg,
        plot_denoise(&format!("denoising toward {name:?}"), &snapshots, &waypoints),
    )?;

    let mut plot = SvgPlot::new("intent fan-out");
    for c in 0..vocab.len().min(rc.backbone.intent_classes) {
        let res = guided_denoise_any(
            &params, rc, backbone, mode, &inputs, c, scale, eps.clone(), rc.flow.steps,
        )?;
        plot.add(&vocab.names()[c], &res.trajectory().waypoints(), Style::auto(c));
    }
    plot.add("ground truth", &gt, Style { width: 2.5, ..Style::dashed("#000") });
    let fanout_svg = paths.plot("fanout");
    ensure_parent(&fanout_svg)?;
    fs::write(&fanout_svg, plot.render(640.0, 640.0))?;

    Ok(InferSummary {
        intent: name,
        intent_was_predicted: predicted,
        waypoints,
        denoise_svg,
        fanout_svg,
    })
}

/// Outcome of `post_train`.
#[derive(Debug)]
pub struct PostTrainSummary {
    pub stats: Vec<GrpoStats>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub reward_svg: PathBuf,
}

/// Reward post-training from a supervised checkpoint (the chunk tag by
/// default); writes the stats CSV, the updated checkpoint, and a reward
/// curve.
pub fn post_train(rc: &RunConfig, checkpoint: Option<&Path>) -> Result<PostTrainSummary> {
    let paths = RunPaths::of(rc);
    rc.write_resolved(paths.root())?;
    let (train_scen, _) = load_or_generate(rc)?;
    let mut params = resolve_checkpoint(&paths, checkpoint, TemporalMode::Chunk.name())?;
    let vocab = IntentVocabulary::three_class();
    let stats = run_grpo(
        &mut params,
        &rc.backbone,
        &train_scen,
        &vocab,
        &GridConfig::default(),
        &rc.grpo_config(),
    )?;
    let ckpt = paths.checkpoint("grpo");
    ensure_parent(&ckpt)?;
    save_params(&ckpt, &params, CheckpointDtype::F64)?;
    let log = paths.grpo_log();
    ensure_parent(&log)?;
    write_grpo_csv(&log, &stats)?;

    let xs: Vec<f64> = stats.iter().map(|r| r.iteration as f64).collect();
    let ys: Vec<f64> = stats.iter().map(|r| r.mean_reward).collect();
    let reward_svg = paths.plot("reward");
    ensure_parent(&reward_svg)?;
    fs::write(&reward_svg, series_plot("post-training reward", &[("mean reward", &xs, &ys)]))?;
    Ok(PostTrainSummary { stats, checkpoint: ckpt, log, reward_svg })
}

/// Outcome of `mot_report`.
#[derive(Debug)]
pub struct MotSummary {
    pub grouping: String,
    /// Largest elementwise gap between the dense hidden states and the
    /// tied routed ones on the probe frame.
    pub max_divergence: f64,
    pub benchmark: FastModeBenchmark,
    pub report_path: PathBuf,
}

#[derive(Serialize)]
struct MotReportBody<'a> {
    grouping: &'a str,
    max_divergence: f64,
    fast_secs: f64,
    slow_secs: f64,
    fast_len: usize,
    slow_len: usize,
    answer_len: usize,
    reps: usize,
}

/// Tie the routed backbone to a dense checkpoint, measure how far its
/// hidden states drift from the dense ones on a probe frame, and time the
/// reduced generation path against the full sequence.
pub fn mot_report(rc: &RunConfig, grouping: Grouping, checkpoint: Option<&Path>) -> Result<MotSummary> {
    let paths = RunPaths::of(rc);
    rc.write_resolved(paths.root())?;
    let (_, eval_scen) = load_or_generate(rc)?;
    let s = &eval_scen[0];
    let params = resolve_checkpoint(&paths, checkpoint, TemporalMode::Chunk.name())?;
    let (cfg, mot_params) = tied_from_dense(&params, &rc.backbone, grouping.clone());
    let inputs = FrameInputs::from_frame(&s.frames[0], &s.qa_pairs[0], &GridConfig::default());

    let probe_x = vec![0.05; L_F * ACTION_DIMS];
    let dense_hidden = {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let ctx = ModelCtx::new(&tape, &bound, &rc.backbone);
        let io = ActionIo { x_t: tape.constant(&[L_F, ACTION_DIMS], probe_x.clone()), t: 0.5 };
        let (hidden, _) = ctx.forward(Mode::ActionFirst, &inputs, None, Some(&io))?;
        tape.data(hidden)
    };
    let routed_hidden = {
        let tape = Tape::new();
        let bound = mot_params.bind_frozen(&tape);
        let ctx = ModelCtx::new(&tape, &bound, &rc.backbone);
        let io = ActionIo { x_t: tape.constant(&[L_F, ACTION_DIMS], probe_x), t: 0.5 };
        let (hidden, _) = mot_forward(&ctx, &cfg, Mode::ActionFirst, &inputs, None, Some(&io), false)?;
        tape.data(hidden)
    };
    let max_divergence = dense_hidden
        .iter()
        .zip(&routed_hidden)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    let benchmark = benchmark_fast_mode(&mot_params, &cfg, &inputs, 3)?;
    let report_path = paths.root().join("reports").join(format!("mot-{}.json", grouping.name()));
    ensure_parent(&report_path)?;
    let body = MotReportBody {
        grouping: grouping.name(),
        max_divergence,
        fast_secs: benchmark.fast_secs,
        slow_secs: benchmark.slow_secs,
        fast_len: benchmark.fast_len,
        slow_len: benchmark.slow_len,
        answer_len: benchmark.answer_len,
        reps: benchmark.reps,
    };
    let mut json = serde_json::to_string_pretty(&body)?;
    json.push('\n');
    fs::write(&report_path, json)?;
    Ok(MotSummary { grouping: grouping.name().to_string(), max_divergence, benchmark, report_path })
}

/// The trajectory plotter keeps both axes at one scale, so run charts
/// rescale the step axis to twice the shared value span first.
fn series_plot(title: &str, series: &[(&str, &[f64], &[f64])]) -> String {
    let mut xmax = 1.0f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, xs, ys) in series {
        for &x in *xs {
            xmax = xmax.max(x);
        }
        for &y in *ys {
            lo = lo.min(y);
            hi = hi.max(y);
        }
    }
    let sx = 2.0 * (hi - lo).max(1e-9) / xmax;
    let mut plot = SvgPlot::new(title);
    for (i, (label, xs, ys)) in series.iter().enumerate() {
        let pts: Vec<[f64; 2]> = xs.iter().zip(*ys).map(|(&x, &y)| [x * sx, y]).collect();
        plot.add(label, &pts, Style::auto(i));
    }
    plot.render(800.0, 480.0)
}

fn read_csv_rows(path: &Path, cols: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| {
                PipelineError::BadRequest(format!("{}: bad csv row: {e}", path.display()))
            })?;
        if vals.len() != cols {
            return Err(PipelineError::BadRequest(format!(
                "{}: expected {cols} columns, got {}",
                path.display(),
                vals.len()
            )));
        }
        out.push(vals);
    }
    Ok(out)
}

/// Outcome of `render_plots`.
#[derive(Debug)]
pub struct PlotSummary {
    pub written: Vec<PathBuf>,
}

/// Regenerate SVG charts from whatever logs the run directory holds.
pub fn render_plots(rc: &RunConfig) -> Result<PlotSummary> {
    let paths = RunPaths::of(rc);
    let mut written = Vec::new();
    for temporal in [TemporalMode::Chunk, TemporalMode::Stream, TemporalMode::StreamMemory] {
        let log = paths.train_log(temporal.name());
        if !log.exists() {
            continue;
        }
        let rows = read_csv_rows(&log, 4)?;
        if rows.is_empty() {
            continue;
        }
        let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let ar: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let fm: Vec<f64> = rows.iter().map(|r| r[2]).collect();
        let svg = series_plot(
            &format!("training loss ({})", temporal.name()),
            &[("language loss", &xs, &ar), ("velocity loss", &xs, &fm)],
        );
        let path = paths.plot(&format!("loss-{}", temporal.name()));
        ensure_parent(&path)?;
        fs::write(&path, svg)?;
        written.push(path);
    }
    let grpo_log = paths.grpo_log();
    if grpo_log.exists() {
        let rows = read_csv_rows(&grpo_log, 5)?;
        if !rows.is_empty() {
            let xs: Vec<f64> = rows.iter().map(|r| r[0]).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r[1]).collect();
            let path = paths.plot("reward");
            ensure_parent(&path)?;
            fs::write(&path, series_plot("post-training reward", &[("mean reward", &xs, &ys)]))?;
            written.push(path);
        }
    }
    Ok(PlotSummary { written })
}
