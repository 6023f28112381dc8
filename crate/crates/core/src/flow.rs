//! Continuous trajectory generation by velocity-field matching.
//!
//! Training draws a time t, blends data with Gaussian noise as
//! x_t = t * eps + (1 - t) * x0, and regresses the head onto eps - x0.
//! Inference integrates that field backwards from pure noise (t = 1) to
//! data (t = 0) with fixed-step Euler. All of it happens in the normalized
//! action space.

use crate::model::{
    denormalize_actions, ActionIo, BackboneConfig, Conditioning, FrameInputs, ModelCtx, ModelError,
};
use crate::layout::Mode;
use crate::scenario::{ActionTrajectory, ACTION_DIMS};
use crate::tensor::{ParamSet, Tape};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow time {0} outside [0, 1]")]
    BadTime(f64),
    #[error("integration needs at least one step")]
    ZeroSteps,
    #[error("state and velocity lengths differ ({state} vs {velocity})")]
    LengthMismatch { state: usize, velocity: usize },
    #[error("non-finite state after integration step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, FlowError>;

/// Draw a training time from Beta(1.5, 1): denser near t = 1 where the
/// velocity target is hardest. Inverse-CDF of t^1.5 is u^(2/3).
pub fn sample_time(rng: &mut ChaCha8Rng) -> f64 {
    crate::rng::uniform(rng).powf(2.0 / 3.0)
}

/// Blend data and noise at time `t` along the straight probability path.
pub fn noise_sample(x0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::BadTime(t));
    }
    if x0.len() != eps.len() {
        return Err(FlowError::LengthMismatch { state: x0.len(), velocity: eps.len() });
    }
    Ok(x0.iter().zip(eps).map(|(a, e)| t * e + (1.0 - t) * a).collect())
}

/// State recorded at the start of each integration step; the final state
/// lives in `DenoiseResult::x0`.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenoiseResult {
    /// Final integrated state at t = 0, still normalized.
    pub x0: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
}

impl DenoiseResult {
    /// Denormalized trajectory ready for geometry and metrics.
    pub fn trajectory(&self) -> ActionTrajectory {
        ActionTrajectory { values: denormalize_actions(&self.x0) }
    }
}

/// Fixed-step Euler from t = 1 down to t = 0: x <- x - dt * v(x, t).
/// `velocity` is evaluated at the step's start time.
pub fn euler_integrate<F>(start: Vec<f64>, steps: usize, mut velocity: F) -> Result<DenoiseResult>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>>,
{
    if steps == 0 {
        return Err(FlowError::ZeroSteps);
    }
    let dt = 1.0 / steps as f64;
    let mut x = start;
    let mut snapshots = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = (steps - k) as f64 / steps as f64;
        snapshots.push(Snapshot { t, state: x.clone() });
        let v = velocity(&x, t)?;
        if v.len() != x.len() {
            return Err(FlowError::LengthMismatch { state: x.len(), velocity: v.len() });
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= dt * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite { step: k });
        }
    }
    Ok(DenoiseResult { x0: x, snapshots })
}

/// Deterministic denoising with the model's velocity field under one fixed
/// conditioning. Each step is a fresh forward pass on its own tape.
pub fn denoise_actions(
    params: &ParamSet,
    cfg: &BackboneConfig,
    mode: Mode,
    inputs: &FrameInputs,
    cond: Conditioning,
    eps: Vec<f64>,
    steps: usize,
) -> Result<DenoiseResult> {
    euler_integrate(eps, steps, |x, t| {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let ctx = ModelCtx::new(&tape, &bound, cfg);
        let x_t = tape.constant(&[cfg.l_f, ACTION_DIMS], x.to_vec());
        let (hidden, layout) = ctx.forward(mode, inputs, None, Some(&ActionIo { x_t, t }))?;
        let v = ctx.action_head(hidden, &layout, t, cond)?;
        Ok(tape.data(v))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, normalize_actions};
    use crate::rng;
    use crate::scenario::{generate_scenario, ScenarioParams, L_F};
    use crate::scenario::bev::GridConfig;

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::stream(seed, "flow_test");
        (0..n).map(|_| rng::normal(&mut r)).collect()
    }

    #[test]
    fn time_sampler_matches_the_beta_law() {
        let mut r = rng::stream(0, "flow_test/time");
        let n = 20000;
        let mut below_half = 0usize;
        let mut sum = 0.0;
        for _ in 0..n {
            let t = sample_time(&mut r);
            assert!((0.0..=1.0).contains(&t));
            sum += t;
            if t <= 0.5 {
                below_half += 1;
            }
        }
        // Beta(1.5, 1): mean 0.6, CDF(0.5) = 0.5^1.5 ~ 0.3536.
        let mean = sum / n as f64;
        assert!((mean - 0.6).abs() < 0.01, "mean {mean}");
        let frac = below_half as f64 / n as f64;
        assert!((frac - 0.5f64.powf(1.5)).abs() < 0.015, "cdf {frac}");
    }

    #[test]
    fn noising_endpoints_return_the_inputs_bitwise() {
        let x0 = rand_vec(1, 30);
        let eps = rand_vec(2, 30);
        assert_eq!(noise_sample(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(noise_sample(&x0, &eps, 1.0).unwrap(), eps);
        assert!(matches!(noise_sample(&x0, &eps, 1.5), Err(FlowError::BadTime(_))));
        assert!(matches!(noise_sample(&x0, &eps, -0.1), Err(FlowError::BadTime(_))));
        assert!(matches!(
            noise_sample(&x0, &eps[..10], 0.5),
            Err(FlowError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn exact_field_recovers_the_data_at_any_step_count() {
        // Along the straight path the true velocity is the constant
        // eps - x0, so Euler is exact for every K.
        let x0 = rand_vec(3, 60);
        let eps = rand_vec(4, 60);
        let v: Vec<f64> = eps.iter().zip(&x0).map(|(e, a)| e - a).collect();
        for steps in [1usize, 2, 5] {
            let out = euler_integrate(eps.clone(), steps, |_, _| Ok(v.clone())).unwrap();
            assert_eq!(out.snapshots.len(), steps);
            for (got, want) in out.x0.iter().zip(&x0) {
                assert!((got - want).abs() < 1e-12, "K={steps}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn intermediate_states_follow_the_closed_form_path() {
        let x0 = rand_vec(5, 24);
        let eps = rand_vec(6, 24);
        let v: Vec<f64> = eps.iter().zip(&x0).map(|(e, a)| e - a).collect();
        let out = euler_integrate(eps.clone(), 5, |_, _| Ok(v.clone())).unwrap();
        for pair in out.snapshots.windows(2) {
            assert!(pair[1].t < pair[0].t, "snapshot times must decrease");
        }
        for snap in &out.snapshots {
            let want = noise_sample(&x0, &eps, snap.t).unwrap();
            for (g, w) in snap.state.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "t={}", snap.t);
            }
        }
    }

    #[test]
    fn non_finite_velocity_aborts_with_the_step_index() {
        let eps = rand_vec(7, 12);
        let res = euler_integrate(eps, 4, |_, t| {
            Ok(if t < 0.8 { vec![f64::NAN; 12] } else { vec![0.0; 12] })
        });
        match res {
            Err(FlowError::NonFinite { step }) => assert_eq!(step, 1),
            other => panic!("expected step-1 abort, got {other:?}"),
        }
        assert!(matches!(
            euler_integrate(vec![0.0; 4], 0, |_, _| Ok(vec![0.0; 4])),
            Err(FlowError::ZeroSteps)
        ));
    }

    #[test]
    fn model_denoising_is_deterministic_and_shaped() {
        let cfg = BackboneConfig::tiny();
        let params = init_params(&cfg, 21);
        let s = generate_scenario(9, "right", &ScenarioParams::desk()).unwrap();
        let inputs = FrameInputs::from_frame(&s.frames[2], &s.qa_pairs[0], &GridConfig::default());
        let eps = rand_vec(8, L_F * ACTION_DIMS);
        let run = || {
            denoise_actions(
                &params,
                &cfg,
                Mode::ActionOnly,
                &inputs,
                Conditioning::Class(1),
                eps.clone(),
                2,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.x0.len(), L_F * ACTION_DIMS);
        assert_eq!(a.snapshots.len(), 2);
        assert_eq!(a.x0, b.x0);
        let traj = a.trajectory();
        let denorm = denormalize_actions(&a.x0);
        assert_eq!(traj.values, denorm);
        // Conditioning changes the output.
        let c = denoise_actions(
            &params,
            &cfg,
            Mode::ActionOnly,
            &inputs,
            Conditioning::Class(0),
            eps.clone(),
            2,
        )
        .unwrap();
        assert_ne!(a.x0, c.x0);
        let _ = normalize_actions(&traj.values);
    }
}
