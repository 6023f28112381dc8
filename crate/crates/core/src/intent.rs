//! Intent conditioning for trajectory generation.
//!
//! The driving intent enters only the action head, so one backbone pass per
//! denoising step yields both the conditional and unconditional velocity,
//! which classifier-free guidance then blends:
//! v = v_u + s * (v_c - v_u).

use crate::flow::{euler_integrate, DenoiseResult, FlowError};
use crate::layout::Mode;
use crate::model::{ActionIo, BackboneConfig, Conditioning, FrameInputs, ModelCtx};
use crate::scenario::vocab::IntentVocabulary;
use crate::scenario::{ActionTrajectory, ACTION_DIMS};
use crate::tensor::{ParamSet, Tape};
use rand_chacha::ChaCha8Rng;

/// Default guidance strength.
pub const CFG_SCALE: f64 = 1.5;

/// Probability of replacing the true intent with the unconditional symbol
/// during supervised training.
pub const INTENT_DROP_P: f64 = 0.15;

/// Heading threshold separating a turn from going straight.
pub const TURN_THRESHOLD_RAD: f64 = std::f64::consts::PI / 12.0;

/// Where the action head's intent comes from at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntentSource {
    /// Dataset label.
    GroundTruth,
    /// Greedy readout of the language head's intent answer.
    Predicted,
    /// Classified from the heading of an already-generated trajectory.
    TrajectoryDerived,
}

/// Guidance blend of unconditional and conditional velocities.
pub fn cfg_velocity(v_u: &[f64], v_c: &[f64], scale: f64) -> Vec<f64> {
    assert_eq!(v_u.len(), v_c.len());
    v_u.iter().zip(v_c).map(|(u, c)| u + scale * (c - u)).collect()
}

/// Bernoulli(p) draw for intent dropout.
pub fn drop_intent(rng: &mut ChaCha8Rng, p: f64) -> bool {
    crate::rng::uniform(rng) < p
}

/// Classify a generated trajectory by its final velocity heading: beyond
/// +/-15 degrees is a turn, otherwise straight. Classes follow the
/// three-class vocabulary (left, right, straight).
pub fn trajectory_derived_intent(traj: &ActionTrajectory) -> usize {
    let last = traj.row(crate::scenario::L_F - 1);
    let heading = last[3].atan2(last[2]);
    if heading > TURN_THRESHOLD_RAD {
        0
    } else if heading < -TURN_THRESHOLD_RAD {
        1
    } else {
        2
    }
}

/// Guided denoising. Each Euler step runs the backbone once and evaluates
/// the action head twice (conditional and unconditional). With
/// `literal_two_pass` the backbone is instead rerun for the unconditional
/// head as a cross-check; intent never enters the backbone, so both code
/// paths produce identical bits.
#[allow(clippy::too_many_arguments)]
pub fn guided_denoise(
    params: &ParamSet,
    cfg: &BackboneConfig,
    mode: Mode,
    inputs: &FrameInputs,
    class: usize,
    scale: f64,
    eps: Vec<f64>,
    steps: usize,
    literal_two_pass: bool,
) -> Result<DenoiseResult, FlowError> {
    euler_integrate(eps, steps, |x, t| {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let ctx = ModelCtx::new(&tape, &bound, cfg);
        let make_io = |tape: &Tape| ActionIo {
            x_t: tape.constant(&[cfg.l_f, ACTION_DIMS], x.to_vec()),
            t,
        };
        let io = make_io(&tape);
        let (hidden, layout) = ctx.forward(mode, inputs, None, Some(&io))?;
        let v_c = tape.data(ctx.action_head(hidden, &layout, t, Conditioning::Class(class))?);
        let v_u = if literal_two_pass {
            let tape2 = Tape::new();
            let bound2 = params.bind_frozen(&tape2);
            let ctx2 = ModelCtx::new(&tape2, &bound2, cfg);
            let io2 = make_io(&tape2);
            let (hidden2, layout2) = ctx2.forward(mode, inputs, None, Some(&io2))?;
            tape2.data(ctx2.action_head(hidden2, &layout2, t, Conditioning::Unconditional)?)
        } else {
            tape.data(ctx.action_head(hidden, &layout, t, Conditioning::Unconditional)?)
        };
        Ok(cfg_velocity(&v_u, &v_c, scale))
    })
}

/// One guided trajectory per intent class, labeled by class name.
#[allow(clippy::too_many_arguments)]
pub fn fan_out(
    params: &ParamSet,
    cfg: &BackboneConfig,
    mode: Mode,
    inputs: &FrameInputs,
    vocab: &IntentVocabulary,
    scale: f64,
    eps: &[f64],
    steps: usize,
) -> Result<Vec<(String, DenoiseResult)>, FlowError> {
    (0..cfg.intent_classes.min(vocab.len()))
        .map(|c| {
            let out =
                guided_denoise(params, cfg, mode, inputs, c, scale, eps.to_vec(), steps, false)?;
            Ok((vocab.names()[c].clone(), out))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::denoise_actions;
    use crate::model::init_params;
    use crate::rng;
    use crate::scenario::bev::GridConfig;
    use crate::scenario::{generate_scenario, ScenarioParams, L_F};

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::stream(seed, "intent_test");
        (0..n).map(|_| rng::normal(&mut r)).collect()
    }

    fn test_inputs(seed: u64, intent: &str) -> FrameInputs {
        let s = generate_scenario(seed, intent, &ScenarioParams::desk()).unwrap();
        FrameInputs::from_frame(&s.frames[2], &s.qa_pairs[0], &GridConfig::default())
    }

    #[test]
    fn guidance_interpolates_along_the_conditional_direction() {
        let v_u = rand_vec(1, 40);
        let v_c = rand_vec(2, 40);
        assert_eq!(cfg_velocity(&v_u, &v_c, 0.0), v_u);
        for s in [0.5, 1.0, 1.5, 2.7] {
            let g = cfg_velocity(&v_u, &v_c, s);
            for i in 0..v_u.len() {
                let got = g[i] - v_u[i];
                let want = s * (v_c[i] - v_u[i]);
                assert!((got - want).abs() < 1e-10, "s={s} i={i}");
            }
        }
        let at_one = cfg_velocity(&v_u, &v_c, 1.0);
        for (g, c) in at_one.iter().zip(&v_c) {
            assert!((g - c).abs() < 1e-12);
        }
    }

    #[test]
    fn one_backbone_pass_matches_the_literal_two_pass_bitwise() {
        let cfg = BackboneConfig::tiny();
        let params = init_params(&cfg, 31);
        let inputs = test_inputs(4, "left");
        let eps = rand_vec(3, L_F * ACTION_DIMS);
        let fast = guided_denoise(
            &params, &cfg, Mode::ActionOnly, &inputs, 0, CFG_SCALE, eps.clone(), 2, false,
        )
        .unwrap();
        let slow = guided_denoise(
            &params, &cfg, Mode::ActionOnly, &inputs, 0, CFG_SCALE, eps, 2, true,
        )
        .unwrap();
        let fast_bits: Vec<u64> = fast.x0.iter().map(|v| v.to_bits()).collect();
        let slow_bits: Vec<u64> = slow.x0.iter().map(|v| v.to_bits()).collect();
        assert_eq!(fast_bits, slow_bits);
    }

    #[test]
    fn guidance_scale_changes_the_sample_and_zero_scale_is_unconditional() {
        let cfg = BackboneConfig::tiny();
        let params = init_params(&cfg, 32);
        let inputs = test_inputs(5, "right");
        let eps = rand_vec(6, L_F * ACTION_DIMS);
        let guided = guided_denoise(
            &params, &cfg, Mode::ActionOnly, &inputs, 1, CFG_SCALE, eps.clone(), 2, false,
        )
        .unwrap();
        let at_zero = guided_denoise(
            &params, &cfg, Mode::ActionOnly, &inputs, 1, 0.0, eps.clone(), 2, false,
        )
        .unwrap();
        let uncond = denoise_actions(
            &params,
            &cfg,
            Mode::ActionOnly,
            &inputs,
            Conditioning::Unconditional,
            eps,
            2,
        )
        .unwrap();
        assert_ne!(guided.x0, at_zero.x0);
        // s = 0 collapses the blend to the unconditional field exactly:
        // v_u + 0 * d adds a signed zero, which is the identity on the
        // finite nonzero velocities a live head produces.
        assert_eq!(at_zero.x0, uncond.x0);
    }

    #[test]
    fn dropout_rate_concentrates_near_p() {
        let mut r = rng::stream(0, "intent_test/drop");
        let n = 10000;
        let hits = (0..n).filter(|_| drop_intent(&mut r, INTENT_DROP_P)).count();
        let frac = hits as f64 / n as f64;
        assert!((0.13..=0.17).contains(&frac), "observed {frac}");
    }

    #[test]
    fn trajectory_heading_classifies_synthetic_rows() {
        let mk = |heading: f64| {
            let mut rows = vec![[0.0; 6]; L_F];
            for r in rows.iter_mut() {
                r[2] = heading.cos() * 5.0;
                r[3] = heading.sin() * 5.0;
            }
            ActionTrajectory::from_rows(&rows)
        };
        assert_eq!(trajectory_derived_intent(&mk(30f64.to_radians())), 0);
        assert_eq!(trajectory_derived_intent(&mk(-30f64.to_radians())), 1);
        assert_eq!(trajectory_derived_intent(&mk(5f64.to_radians())), 2);
        assert_eq!(trajectory_derived_intent(&mk(-5f64.to_radians())), 2);
    }

    #[test]
    fn trajectory_heading_classifies_generated_futures() {
        for (intent, class) in [("left", 0), ("right", 1), ("straight", 2)] {
            let s = generate_scenario(11, intent, &ScenarioParams::desk()).unwrap();
            let got = trajectory_derived_intent(&s.frames[1].gt_future);
            assert_eq!(got, class, "{intent}");
        }
    }

    #[test]
    fn fan_out_emits_one_labeled_trajectory_per_class() {
        let cfg = BackboneConfig::tiny();
        let params = init_params(&cfg, 33);
        let inputs = test_inputs(7, "straight");
        let eps = rand_vec(9, L_F * ACTION_DIMS);
        let vocab = IntentVocabulary::three_class();
        let out =
            fan_out(&params, &cfg, Mode::ActionOnly, &inputs, &vocab, CFG_SCALE, &eps, 1).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].0, "left");
        assert_eq!(out[1].0, "right");
        assert_eq!(out[2].0, "straight");
        assert_ne!(out[0].1.x0, out[1].1.x0);
        assert_ne!(out[0].1.x0, out[2].1.x0);
    }
}
