//! Policy post-training on the rater-feedback score.
//!
//! The deterministic flow policy is made stochastic by adding Gaussian
//! noise after every Euler step; the realized step's squared distance from
//! the policy mean gives per-step log-densities. All rollouts in a group
//! share one starting noise sample, so reward spread comes only from the
//! step noise. Rewards are normalized within the group and updates use the
//! clipped surrogate plus a k3 divergence penalty against the frozen
//! starting snapshot.
//!
//! Log-densities are stored without the Gaussian normalization constant:
//! every use (ratios, k3) is a difference of log-densities with the same
//! sigma and dimension, so the constants cancel.

use crate::layout::Mode;
use crate::metrics::{synthetic_raters, trust_region_rate, RaterSet, RfsParams};
use crate::model::{
    denormalize_actions, ActionIo, BackboneConfig, Conditioning, FrameInputs, ModelCtx, ModelError,
};
use crate::optim::{AdamW, AdamWConfig, GradBuffer};
use crate::rng;
use crate::scenario::bev::GridConfig;
use crate::scenario::vocab::IntentVocabulary;
use crate::scenario::{ActionTrajectory, Scenario, ACTION_DIMS};
use crate::tensor::{ParamSet, Tape, TensorId};
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("{0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, GrpoError>;

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    /// Rollouts per frame (the advantage group).
    pub group_size: usize,
    /// Surrogate ratio clip half-width.
    pub clip: f64,
    pub beta_kl: f64,
    /// Per-step Gaussian noise scale in normalized action units.
    pub sigma: f64,
    /// Euler steps per rollout.
    pub steps: usize,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub iterations: usize,
    pub frames_per_iteration: usize,
    pub seed: u64,
    pub rfs: RfsParams,
}

impl GrpoConfig {
    pub fn desk() -> Self {
        GrpoConfig {
            group_size: 8,
            clip: 0.2,
            beta_kl: 0.008,
            sigma: 0.05,
            steps: 2,
            optimizer: AdamWConfig { lr: 5e-7, weight_decay: 0.0, ..AdamWConfig::default() },
            grad_clip: 0.3,
            iterations: 200,
            frames_per_iteration: 4,
            seed: 0,
            rfs: RfsParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(GrpoError::BadConfig(format!(
                "group size {} leaves no reward spread",
                self.group_size
            )));
        }
        if self.clip <= 0.0 || self.beta_kl < 0.0 {
            return Err(GrpoError::BadConfig("clip must be positive, beta nonnegative".into()));
        }
        if self.sigma <= 0.0 {
            return Err(GrpoError::BadConfig(format!(
                "stochastic rollouts need sigma > 0, got {}",
                self.sigma
            )));
        }
        if self.steps == 0 || self.iterations == 0 || self.frames_per_iteration == 0 {
            return Err(GrpoError::BadConfig("steps, iterations, frames must be positive".into()));
        }
        Ok(())
    }
}

/// One frame prepared for post-training: model inputs, the class the
/// rollouts are conditioned on, and a rater set to score against.
#[derive(Debug, Clone)]
pub struct GrpoFrame {
    pub inputs: FrameInputs,
    pub intent_class: usize,
    pub raters: RaterSet,
    pub speed: f64,
}

/// Flatten scenarios into the rotating frame pool, building a synthetic
/// rater set per frame around its logged future.
pub fn frame_pool(
    scenarios: &[Scenario],
    vocab: &IntentVocabulary,
    grid: &GridConfig,
    seed: u64,
) -> Result<Vec<GrpoFrame>> {
    let mut out = Vec::new();
    for (si, s) in scenarios.iter().enumerate() {
        let class = vocab.class_of_name(&s.intent_label).ok_or_else(|| {
            GrpoError::BadConfig(format!("intent {:?} outside the vocabulary", s.intent_label))
        })?;
        for (fi, f) in s.frames.iter().enumerate() {
            let gt = f.gt_future.waypoints();
            let last = f.ego_history.last().expect("history is never empty");
            out.push(GrpoFrame {
                inputs: FrameInputs::from_frame(f, &s.qa_pairs[0], grid),
                intent_class: class,
                raters: synthetic_raters(&gt, seed ^ ((si as u64) << 20) ^ fi as u64),
                speed: (last[2] * last[2] + last[3] * last[3]).sqrt(),
            });
        }
    }
    if out.is_empty() {
        return Err(GrpoError::BadConfig("no frames".into()));
    }
    Ok(out)
}

/// One recorded stochastic Euler transition.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// State the step started from.
    pub x: Vec<f64>,
    pub t: f64,
    /// Realized next state (mean step plus noise).
    pub next: Vec<f64>,
    /// Log-density of `next` under the behavior policy, constant dropped.
    pub logp_old: f64,
    /// Same under the frozen reference policy.
    pub logp_ref: f64,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub steps: Vec<StepRecord>,
    /// Final normalized state.
    pub x0: Vec<f64>,
    pub reward: f64,
}

impl Rollout {
    pub fn trajectory(&self) -> ActionTrajectory {
        ActionTrajectory { values: denormalize_actions(&self.x0) }
    }
}

fn velocity(
    ctx: &ModelCtx,
    inputs: &FrameInputs,
    x: &[f64],
    t: f64,
    cond: Conditioning,
) -> Result<TensorId> {
    let io = ActionIo { x_t: ctx.tape.constant(&[ctx.cfg.l_f, ACTION_DIMS], x.to_vec()), t };
    let (hidden, layout) = ctx.forward(Mode::ActionOnly, inputs, None, Some(&io))?;
    Ok(ctx.action_head(hidden, &layout, t, cond)?)
}

/// Variable part of the Gaussian step log-density: -|next - mean|^2 / (2 s^2).
/// Written as sequential sum then product so the update-time recomputation
/// on the tape (sum node, then scale node) reproduces it bitwise.
fn logp_var(next: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let ss: f64 = next.iter().zip(mean).map(|(n, m)| (n - m) * (n - m)).sum();
    ss * (-1.0 / (2.0 * sigma * sigma))
}

/// Sample a group of stochastic rollouts for one frame under the current
/// policy, scoring each final trajectory against the frame's raters. The
/// reference log-density of every realized transition is recorded for the
/// divergence penalty.
pub fn rollout_group(
    params: &ParamSet,
    ref_params: &ParamSet,
    cfg: &BackboneConfig,
    frame: &GrpoFrame,
    gc: &GrpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Rollout>> {
    gc.validate()?;
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let ref_bound = ref_params.bind_frozen(&tape);
    let ctx = ModelCtx::new(&tape, &bound, cfg);
    let ref_ctx = ModelCtx::new(&tape, &ref_bound, cfg);
    let cond = Conditioning::Class(frame.intent_class);
    let dt = 1.0 / gc.steps as f64;
    let n = cfg.l_f * ACTION_DIMS;
    let x_init: Vec<f64> = (0..n).map(|_| rng::normal(rng)).collect();
    let mut group = Vec::with_capacity(gc.group_size);
    for _ in 0..gc.group_size {
        let mut x = x_init.clone();
        let mut steps = Vec::with_capacity(gc.steps);
        for k in 0..gc.steps {
            let t = (gc.steps - k) as f64 / gc.steps as f64;
            let v = tape.data(velocity(&ctx, &frame.inputs, &x, t, cond)?);
            let v_ref = tape.data(velocity(&ref_ctx, &frame.inputs, &x, t, cond)?);
            let mean: Vec<f64> = x.iter().zip(&v).map(|(xi, vi)| xi - dt * vi).collect();
            let mean_ref: Vec<f64> = x.iter().zip(&v_ref).map(|(xi, vi)| xi - dt * vi).collect();
            let next: Vec<f64> = mean.iter().map(|m| m + gc.sigma * rng::normal(rng)).collect();
            steps.push(StepRecord {
                x: x.clone(),
                t,
                next: next.clone(),
                logp_old: logp_var(&next, &mean, gc.sigma),
                logp_ref: logp_var(&next, &mean_ref, gc.sigma),
            });
            x = next;
        }
        let reward = crate::metrics::rfs(
            &ActionTrajectory { values: denormalize_actions(&x) }.waypoints(),
            &frame.raters,
            frame.speed,
            &gc.rfs,
        )?
        .score;
        group.push(Rollout { steps, x0: x, reward });
    }
    Ok(group)
}

/// Group-normalized advantages: exactly zero mean; unit variance up to the
/// stabilizer when rewards vary, all zeros when they do not.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect()
}

/// k3 divergence estimate: beta * (exp(r - c) - (r - c) - 1). Nonnegative
/// everywhere, zero exactly when the log-densities agree.
pub fn kl_k3(r: f64, c: f64, beta: f64) -> f64 {
    let d = r - c;
    beta * (d.exp() - d - 1.0)
}

/// Pick the surrogate branch eagerly. The clipped branch enters the graph
/// as a constant, so where it is active the objective is exactly flat in
/// the ratio; ties keep the live branch.
fn clip_objective(tape: &Tape, ratio: TensorId, r_val: f64, adv: f64, clip: f64) -> (TensorId, bool) {
    let unclipped = r_val * adv;
    let clamped = r_val.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clamped {
        (tape.scale(ratio, adv).expect("scaling a scalar node"), false)
    } else {
        (tape.scalar(clamped), true)
    }
}

/// Per-iteration training statistics; also the CSV row format.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoStats {
    pub iteration: usize,
    pub mean_reward: f64,
    /// Mean k3 estimate (unscaled by beta) over surviving terms.
    pub mean_kl: f64,
    pub clip_fraction: f64,
    /// Fraction of rollouts ending inside some rater's trust region.
    pub trust_rate: f64,
    /// Steps dropped for non-finite ratios.
    pub skipped: usize,
    pub lr: f64,
}

pub fn write_grpo_csv(path: &std::path::Path, rows: &[GrpoStats]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "iteration,mean_reward,kl,clip_fraction,trust_rate")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.iteration, r.mean_reward, r.mean_kl, r.clip_fraction, r.trust_rate
        )?;
    }
    Ok(())
}

/// One optimizer step over already-sampled groups. Every recorded
/// transition is re-evaluated under the live parameters; gradients are
/// averaged per frame, then over frames, then clipped.
pub fn grpo_update(
    params: &mut ParamSet,
    cfg: &BackboneConfig,
    batch: &[(&GrpoFrame, &[Rollout])],
    gc: &GrpoConfig,
    opt: &mut AdamW,
    iteration: usize,
) -> Result<GrpoStats> {
    gc.validate()?;
    if batch.is_empty() {
        return Err(GrpoError::BadConfig("empty update batch".into()));
    }
    let dt = 1.0 / gc.steps as f64;
    let mut buf = GradBuffer::zeros(params);
    let mut reward_sum = 0.0;
    let mut n_rollouts = 0usize;
    let mut kl_sum = 0.0;
    let mut clip_hits = 0usize;
    let mut n_terms = 0usize;
    let mut skipped = 0usize;
    for (frame, rollouts) in batch {
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        reward_sum += rewards.iter().sum::<f64>();
        n_rollouts += rewards.len();
        let advs = group_advantages(&rewards);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let ctx = ModelCtx::new(&tape, &bound, cfg);
        let cond = Conditioning::Class(frame.intent_class);
        let mut total: Option<TensorId> = None;
        let mut count = 0usize;
        for (rollout, adv) in rollouts.iter().zip(&advs) {
            for step in &rollout.steps {
                let v = velocity(&ctx, &frame.inputs, &step.x, step.t, cond)?;
                let x_const = tape.constant(&[cfg.l_f, ACTION_DIMS], step.x.clone());
                let mean = tape.add(x_const, tape.scale(v, -dt)?)?;
                let next_const = tape.constant(&[cfg.l_f, ACTION_DIMS], step.next.clone());
                let diff = tape.sub(next_const, mean)?;
                let sq = tape.mul(diff, diff)?;
                let logp_new = tape.scale(tape.sum(sq)?, -1.0 / (2.0 * gc.sigma * gc.sigma))?;
                let ratio = tape.exp(tape.sub(logp_new, tape.scalar(step.logp_old))?)?;
                let r_val = tape.value_scalar(ratio);
                let d_ref = tape.sub(tape.scalar(step.logp_ref), logp_new)?;
                let k3 = tape.sub(tape.sub(tape.exp(d_ref)?, d_ref)?, tape.scalar(1.0))?;
                let k3_val = tape.value_scalar(k3);
                if !r_val.is_finite() || !k3_val.is_finite() {
                    skipped += 1;
                    continue;
                }
                let (obj, clipped) = clip_objective(&tape, ratio, r_val, *adv, gc.clip);
                if clipped {
                    clip_hits += 1;
                }
                kl_sum += k3_val;
                n_terms += 1;
                let term = tape.add(tape.scale(obj, -1.0)?, tape.scale(k3, gc.beta_kl)?)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
                count += 1;
            }
        }
        if let Some(total) = total {
            let loss = tape.scale(total, 1.0 / count as f64)?;
            let grads = tape.backward(loss)?;
            buf.accumulate(&bound, &grads);
        }
    }
    buf.scale(1.0 / batch.len() as f64);
    buf.clip_global_norm(gc.grad_clip);
    let lr = opt.step(params, &buf);
    let owned: Vec<(Vec<[f64; 2]>, &RaterSet, f64)> = batch
        .iter()
        .flat_map(|(frame, rollouts)| {
            rollouts.iter().map(move |r| (r.trajectory().waypoints(), &frame.raters, frame.speed))
        })
        .collect();
    let cases: Vec<(&[[f64; 2]], &RaterSet, f64)> =
        owned.iter().map(|(w, rs, s)| (w.as_slice(), *rs, *s)).collect();
    Ok(GrpoStats {
        iteration,
        mean_reward: reward_sum / n_rollouts as f64,
        mean_kl: if n_terms > 0 { kl_sum / n_terms as f64 } else { 0.0 },
        clip_fraction: if n_terms > 0 { clip_hits as f64 / n_terms as f64 } else { 0.0 },
        trust_rate: trust_region_rate(&cases, &gc.rfs)?,
        skipped,
        lr,
    })
}

/// Full post-training loop: freeze the starting parameters as the
/// reference policy, then rotate through the frame pool, sampling a group
/// per frame and taking one optimizer step per iteration.
pub fn run_grpo(
    params: &mut ParamSet,
    cfg: &BackboneConfig,
    scenarios: &[Scenario],
    vocab: &IntentVocabulary,
    grid: &GridConfig,
    gc: &GrpoConfig,
) -> Result<Vec<GrpoStats>> {
    gc.validate()?;
    let pool = frame_pool(scenarios, vocab, grid, gc.seed)?;
    let ref_params = params.clone();
    let mut opt = AdamW::new(params, gc.optimizer, None);
    let mut rng = rng::stream(gc.seed, "grpo/rollouts");
    let mut stats = Vec::with_capacity(gc.iterations);
    for it in 1..=gc.iterations {
        let start = (it - 1) * gc.frames_per_iteration % pool.len();
        let mut groups = Vec::with_capacity(gc.frames_per_iteration);
        for j in 0..gc.frames_per_iteration {
            let frame = &pool[(start + j) % pool.len()];
            groups.push((frame, rollout_group(params, &ref_params, cfg, frame, gc, &mut rng)?));
        }
        let batch: Vec<(&GrpoFrame, &[Rollout])> =
            groups.iter().map(|(f, g)| (*f, g.as_slice())).collect();
        stats.push(grpo_update(params, cfg, &batch, gc, &mut opt, it)?);
    }
    Ok(stats)
}
