//! Synthetic 2D driving world.
//!
//! Scenarios are closed-form kinematic realizations of an intent (straight
//! lead-in, constant-curvature arc, straight tail) sampled at a fixed frame
//! rate, with background agents and a templated QA set over a tiny closed
//! vocabulary. The path is analytic, so every frame's ground-truth future is
//! an exact re-expression of the same curve in that frame's ego coordinates.

pub mod bev;
pub mod io;
pub mod vocab;

use crate::rng;
use crate::se2::Pose2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Past ego states fed to the state encoders.
pub const HISTORY_LEN: usize = 16;
/// Future waypoints per frame.
pub const L_F: usize = 20;
/// Channels per waypoint: delta position, velocity, acceleration (x, y each).
pub const ACTION_DIMS: usize = 6;
/// Future waypoint rate in Hz (frame rate is separate and configurable).
pub const FUTURE_RATE_HZ: f64 = 4.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("infeasible params: {0}")]
    Infeasible(String),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// L_f x 6 trajectory: rows are (dx, dy, vx, vy, ax, ay) in the owning
/// frame's ego coordinates. Positions are stored as per-step displacements;
/// [`ActionTrajectory::waypoints`] integrates them back to absolute points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionTrajectory {
    pub values: Vec<f64>,
}

impl ActionTrajectory {
    pub fn zeros() -> Self {
        ActionTrajectory { values: vec![0.0; L_F * ACTION_DIMS] }
    }

    pub fn from_rows(rows: &[[f64; ACTION_DIMS]]) -> Self {
        assert_eq!(rows.len(), L_F, "trajectory must have {L_F} rows");
        ActionTrajectory { values: rows.iter().flatten().copied().collect() }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * ACTION_DIMS..(k + 1) * ACTION_DIMS]
    }

    /// Absolute ego-frame waypoints (cumulative sum of the delta channel).
    pub fn waypoints(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(L_F);
        let mut p = [0.0, 0.0];
        for k in 0..L_F {
            let r = self.row(k);
            p = [p[0] + r[0], p[1] + r[1]];
            out.push(p);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub extent: [f64; 2],
    pub class_id: u32,
}

/// One observation. `ego_history` and `agents` are stored in world
/// coordinates (ego-relative views are derived at the model boundary), while
/// `gt_future` is ego-relative as the action head consumes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub timestamp: f64,
    pub ego_pose: Pose2,
    /// HISTORY_LEN x (x, y, vx, vy, ax, ay), oldest first, world frame.
    pub ego_history: Vec<[f64; ACTION_DIMS]>,
    pub agents: Vec<Agent>,
    pub gt_future: ActionTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub frames: Vec<Frame>,
    pub intent_label: String,
    pub qa_pairs: Vec<vocab::QaPair>,
}

impl Scenario {
    /// Structural invariants (vocabulary membership is part of the word list
    /// check since intent names are ordinary vocabulary words).
    pub fn validate(&self) -> Result<(), String> {
        if self.frames.len() < 2 {
            return Err(format!("need at least 2 frames, got {}", self.frames.len()));
        }
        if vocab::token_id(&self.intent_label).is_none() {
            return Err(format!("intent_label {:?} is not a vocabulary word", self.intent_label));
        }
        for w in self.frames.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(format!(
                    "timestamps not strictly increasing: {} then {}",
                    w[0].timestamp, w[1].timestamp
                ));
            }
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.ego_history.len() != HISTORY_LEN {
                return Err(format!("frame {i}: ego_history has {} states", f.ego_history.len()));
            }
            if f.gt_future.values.len() != L_F * ACTION_DIMS {
                return Err(format!("frame {i}: gt_future has {} values", f.gt_future.values.len()));
            }
        }
        Ok(())
    }
}

/// Closed-form ego path: straight until `turn_start_s`, constant-curvature
/// arc for `turn_duration_s`, straight after, all at constant speed. Defined
/// for every time (negative times extend the lead-in), so histories and
/// futures are slices of one curve.
#[derive(Debug, Clone, Copy)]
pub struct PathSpec {
    pub speed: f64,
    /// Signed curvature of the arc in 1/m; 0 means straight throughout.
    pub curvature: f64,
    pub turn_start_s: f64,
    pub turn_duration_s: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PathState {
    pub position: [f64; 2],
    pub heading: f64,
    pub velocity: [f64; 2],
    pub acceleration: [f64; 2],
}

impl PathSpec {
    pub fn state(&self, t: f64) -> PathState {
        let v = self.speed;
        let k = self.curvature;
        let t0 = self.turn_start_s;
        let t1 = t0 + self.turn_duration_s;
        if k == 0.0 || t < t0 {
            return PathState {
                position: [v * t, 0.0],
                heading: 0.0,
                velocity: [v, 0.0],
                acceleration: [0.0, 0.0],
            };
        }
        if t < t1 {
            let phi = k * v * (t - t0);
            let (s, c) = phi.sin_cos();
            PathState {
                position: [v * t0 + s / k, (1.0 - c) / k],
                heading: phi,
                velocity: [v * c, v * s],
                acceleration: [-v * v * k * s, v * v * k * c],
            }
        } else {
            let phi1 = k * v * (t1 - t0);
            let (s1, c1) = phi1.sin_cos();
            let d = v * (t - t1);
            PathState {
                position: [v * t0 + s1 / k + d * c1, (1.0 - c1) / k + d * s1],
                heading: phi1,
                velocity: [v * c1, v * s1],
                acceleration: [0.0, 0.0],
            }
        }
    }
}

/// Kinematic family description handed to [`generate_scenario`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub frame_rate_hz: f64,
    pub n_frames: usize,
    pub speed_range: [f64; 2],
    /// Base curvature magnitude; the realized value is jittered +-20%.
    pub curvature_base: f64,
    pub turn_start_s: f64,
    pub turn_duration_s: f64,
    pub max_agents: usize,
    /// History-dependent family: a signaling agent whose lateral offset
    /// encodes the turn direction, visible only in the first frames.
    pub cue_agent: bool,
    pub cue_visible_frames: usize,
}

impl ScenarioParams {
    /// General mixed set used by the bundled desk configuration.
    pub fn desk() -> Self {
        ScenarioParams {
            frame_rate_hz: 2.0,
            n_frames: 6,
            speed_range: [4.0, 8.0],
            curvature_base: 0.06,
            turn_start_s: 1.0,
            turn_duration_s: 2.5,
            max_agents: 4,
            cue_agent: false,
            cue_visible_frames: 0,
        }
    }

    /// Intent-conditioning family: every frame precedes the turn, so the
    /// observable history is identical across intents and the conditioning
    /// signal is the only cue for lateral direction.
    pub fn controllability() -> Self {
        ScenarioParams {
            frame_rate_hz: 2.0,
            n_frames: 5,
            speed_range: [5.0, 7.0],
            curvature_base: 0.06,
            turn_start_s: 2.2,
            turn_duration_s: 2.6,
            max_agents: 2,
            cue_agent: false,
            cue_visible_frames: 0,
        }
    }

    /// History-dependent family: the cue disappears before the turn begins,
    /// so frames in between are ambiguous without memory of the cue.
    pub fn cue_family(n_frames: usize) -> Self {
        ScenarioParams {
            frame_rate_hz: 2.0,
            n_frames,
            speed_range: [5.5, 6.5],
            curvature_base: 0.065,
            turn_start_s: 1.5,
            turn_duration_s: 3.0,
            max_agents: 0,
            cue_agent: true,
            cue_visible_frames: 2,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Infeasible(m));
        if !(self.frame_rate_hz > 0.0) {
            return bad(format!("frame_rate_hz must be positive, got {}", self.frame_rate_hz));
        }
        if self.n_frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.n_frames));
        }
        if !(self.speed_range[0] > 0.0 && self.speed_range[1] >= self.speed_range[0]) {
            return bad(format!("speed_range {:?} must be positive and ordered", self.speed_range));
        }
        if self.turn_duration_s < 0.0 {
            return bad(format!("turn_duration_s must be >= 0, got {}", self.turn_duration_s));
        }
        if self.cue_agent && self.cue_visible_frames == 0 {
            return bad("cue_agent requires cue_visible_frames >= 1".into());
        }
        Ok(())
    }
}

fn intent_turn_sign(intent: &str) -> f64 {
    if intent.contains("left") {
        1.0
    } else if intent.contains("right") {
        -1.0
    } else if intent == "u_turn" {
        1.0
    } else {
        0.0
    }
}

struct AgentTrack {
    start: [f64; 2],
    velocity: [f64; 2],
    extent: [f64; 2],
    class_id: u32,
}

impl AgentTrack {
    fn at(&self, t: f64) -> Agent {
        Agent {
            position: [self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t],
            velocity: self.velocity,
            extent: self.extent,
            class_id: self.class_id,
        }
    }
}

/// Generate one scenario. Identical (seed, intent, params) triples produce
/// byte-identical serializations; left/right intents with the same seed share
/// every random draw, differing only in the curvature sign.
pub fn generate_scenario(
    seed: u64,
    intent: &str,
    params: &ScenarioParams,
) -> Result<Scenario, ScenarioError> {
    params.validate()?;
    if vocab::token_id(intent).is_none() {
        return Err(ScenarioError::Infeasible(format!("unknown intent {intent:?}")));
    }
    let mut kin = rng::stream(seed, "scenario/kinematics");
    let speed =
        params.speed_range[0] + rng::uniform(&mut kin) * (params.speed_range[1] - params.speed_range[0]);
    let kappa = params.curvature_base * (0.8 + 0.4 * rng::uniform(&mut kin));
    let path = PathSpec {
        speed,
        curvature: intent_turn_sign(intent) * kappa,
        turn_start_s: params.turn_start_s,
        turn_duration_s: params.turn_duration_s,
    };

    let t_last = (params.n_frames - 1) as f64 / params.frame_rate_hz;
    let mut agr = rng::stream(seed, "scenario/agents");
    let n_agents = rng::below(&mut agr, params.max_agents + 1);
    let mut tracks = Vec::with_capacity(n_agents);
    for _ in 0..n_agents {
        let anchor = path.state(rng::uniform(&mut agr) * t_last);
        let lon = -4.0 + 24.0 * rng::uniform(&mut agr);
        let lat = -8.0 + 16.0 * rng::uniform(&mut agr);
        let (sh, ch) = anchor.heading.sin_cos();
        let pos = [
            anchor.position[0] + ch * lon - sh * lat,
            anchor.position[1] + sh * lon + ch * lat,
        ];
        let sp = 8.0 * rng::uniform(&mut agr);
        let ang = anchor.heading + 0.8 * (rng::uniform(&mut agr) - 0.5);
        let velocity = [sp * ang.cos(), sp * ang.sin()];
        tracks.push(AgentTrack {
            start: pos,
            velocity,
            extent: [3.8 + 1.2 * rng::uniform(&mut agr), 1.8 + 0.4 * rng::uniform(&mut agr)],
            class_id: rng::below(&mut agr, 4) as u32,
        });
    }
    let cue_track = if params.cue_agent {
        let s0 = path.state(0.0);
        let lat = 6.0 * intent_turn_sign(intent);
        let (sh, ch) = s0.heading.sin_cos();
        Some(AgentTrack {
            start: [
                s0.position[0] + ch * 4.0 - sh * lat,
                s0.position[1] + sh * 4.0 + ch * lat,
            ],
            velocity: s0.velocity,
            extent: [4.5, 2.0],
            class_id: 3,
        })
    } else {
        None
    };

    let mut frames = Vec::with_capacity(params.n_frames);
    for i in 0..params.n_frames {
        let t_i = i as f64 / params.frame_rate_hz;
        let here = path.state(t_i);
        let ego_pose = Pose2::new(here.position[0], here.position[1], here.heading);

        // History times are exact lattice points shared between consecutive
        // frames so the shift-by-one law holds bitwise.
        let mut ego_history = Vec::with_capacity(HISTORY_LEN);
        for k in 0..HISTORY_LEN {
            let steps = i as i64 - (HISTORY_LEN - 1 - k) as i64;
            let s = path.state(steps as f64 / params.frame_rate_hz);
            ego_history.push([
                s.position[0],
                s.position[1],
                s.velocity[0],
                s.velocity[1],
                s.acceleration[0],
                s.acceleration[1],
            ]);
        }

        let inv = ego_pose.inverse();
        let mut rows = Vec::with_capacity(L_F);
        let mut prev = [0.0, 0.0];
        for k in 0..L_F {
            let s = path.state(t_i + (k + 1) as f64 / FUTURE_RATE_HZ);
            let p = inv.apply(s.position);
            let v = inv.rotate(s.velocity);
            let a = inv.rotate(s.acceleration);
            rows.push([p[0] - prev[0], p[1] - prev[1], v[0], v[1], a[0], a[1]]);
            prev = p;
        }

        let mut agents: Vec<Agent> = tracks.iter().map(|a| a.at(t_i)).collect();
        if let Some(cue) = &cue_track {
            if i < params.cue_visible_frames {
                agents.push(cue.at(t_i));
            }
        }

        frames.push(Frame {
            timestamp: t_i,
            ego_pose,
            ego_history,
            agents,
            gt_future: ActionTrajectory::from_rows(&rows),
        });
    }

    let qa_pairs = vocab::build_qa(intent, speed, &frames[0]);
    Ok(Scenario {
        id: format!("scn-{seed:08x}-{intent}"),
        frames,
        intent_label: intent.to_string(),
        qa_pairs,
    })
}

/// Ego history re-expressed in the frame's own coordinates, flattened to
/// HISTORY_LEN x 6 (position, velocity, acceleration). This is the model's
/// view; storage stays in world coordinates.
pub fn ego_history_relative(frame: &Frame) -> Vec<f64> {
    let inv = frame.ego_pose.inverse();
    let mut out = Vec::with_capacity(HISTORY_LEN * ACTION_DIMS);
    for s in &frame.ego_history {
        let p = inv.apply([s[0], s[1]]);
        let v = inv.rotate([s[2], s[3]]);
        let a = inv.rotate([s[4], s[5]]);
        out.extend_from_slice(&[p[0], p[1], v[0], v[1], a[0], a[1]]);
    }
    out
}
