//! Trajectory quality metrics: rater-feedback score with speed-scaled
//! trust regions, displacement errors against logged or rater-matched
//! references, sequence-level displacement over stitched streams, and the
//! aggregated evaluation report.
//!
//! All geometry is planar; trajectories enter as waypoint position lists
//! at a fixed rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("a rater set needs 1 to 3 raters, got {0}")]
    RaterCount(usize),
    #[error("rater score {0} outside [0, 10]")]
    BadScore(f64),
    #[error("horizon {horizon_s} s needs {needed} waypoints, trajectory has {have}")]
    HorizonExceedsSpan { horizon_s: f64, needed: usize, have: usize },
    #[error("waypoint lists differ in length ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("{0}")]
    BadParams(String),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// One reference trajectory with its human score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rater {
    pub waypoints: Vec<[f64; 2]>,
    pub score: f64,
}

/// One to three scored references for a single frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaterSet {
    raters: Vec<Rater>,
}

impl RaterSet {
    pub fn new(raters: Vec<Rater>) -> Result<Self> {
        if raters.is_empty() || raters.len() > 3 {
            return Err(MetricsError::RaterCount(raters.len()));
        }
        for r in &raters {
            if !(0.0..=10.0).contains(&r.score) {
                return Err(MetricsError::BadScore(r.score));
            }
        }
        Ok(RaterSet { raters })
    }

    pub fn raters(&self) -> &[Rater] {
        &self.raters
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfsParams {
    /// Base trust radius in meters.
    pub base_radius_m: f64,
    /// Radius growth per m/s of current speed (seconds).
    pub speed_gain_s: f64,
    /// Exponential decay rate outside the region, per meter.
    pub decay_per_m: f64,
    /// Times of the deviation checkpoints.
    pub checkpoint_times_s: Vec<f64>,
    /// Waypoint rate of all trajectories involved.
    pub rate_hz: f64,
}

impl Default for RfsParams {
    fn default() -> Self {
        RfsParams {
            base_radius_m: 1.0,
            speed_gain_s: 0.2,
            decay_per_m: 0.5,
            checkpoint_times_s: vec![3.0, 5.0],
            rate_hz: 4.0,
        }
    }
}

impl RfsParams {
    pub fn validate(&self) -> Result<()> {
        if self.base_radius_m <= 0.0 || self.speed_gain_s < 0.0 || self.decay_per_m <= 0.0 {
            return Err(MetricsError::BadParams(format!(
                "radius {} must be positive, gain {} nonnegative, decay {} positive",
                self.base_radius_m, self.speed_gain_s, self.decay_per_m
            )));
        }
        if self.checkpoint_times_s.is_empty() || self.rate_hz <= 0.0 {
            return Err(MetricsError::BadParams("need checkpoints and a positive rate".into()));
        }
        Ok(())
    }

    pub fn radius(&self, speed: f64) -> f64 {
        self.base_radius_m + self.speed_gain_s * speed
    }

    /// Waypoint index of each checkpoint; the first waypoint sits one
    /// period after the frame, so time t maps to index t*rate - 1.
    pub fn checkpoint_indices(&self) -> Vec<usize> {
        self.checkpoint_times_s
            .iter()
            .map(|t| (t * self.rate_hz - 1.0).round() as usize)
            .collect()
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Worst checkpoint deviation between a prediction and one reference.
fn checkpoint_deviation(pred: &[[f64; 2]], reference: &[[f64; 2]], idx: &[usize]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(MetricsError::LengthMismatch { a: pred.len(), b: reference.len() });
    }
    let mut worst = 0.0f64;
    for &c in idx {
        if c >= pred.len() {
            return Err(MetricsError::HorizonExceedsSpan {
                horizon_s: 0.0,
                needed: c + 1,
                have: pred.len(),
            });
        }
        worst = worst.max(dist(pred[c], reference[c]));
    }
    Ok(worst)
}

/// Per-rater detail behind a score.
#[derive(Debug, Clone, Serialize)]
pub struct RfsBreakdown {
    pub score: f64,
    /// Index of the rater achieving the max (lowest index on ties).
    pub matched: usize,
    pub per_rater: Vec<f64>,
    pub deviations: Vec<f64>,
    pub radius: f64,
}

/// Rater-feedback score: full credit inside the speed-scaled trust region,
/// exponential decay outside, floored so a decent rater's score never
/// drops below 4. Raters scored below 4 keep their own score as the floor,
/// which keeps the result monotone in deviation and never above the best
/// rater's score.
pub fn rfs(
    pred: &[[f64; 2]],
    raters: &RaterSet,
    speed: f64,
    params: &RfsParams,
) -> Result<RfsBreakdown> {
    params.validate()?;
    let idx = params.checkpoint_indices();
    let radius = params.radius(speed);
    let mut per_rater = Vec::with_capacity(raters.raters().len());
    let mut deviations = Vec::with_capacity(raters.raters().len());
    for rater in raters.raters() {
        let d = checkpoint_deviation(pred, &rater.waypoints, &idx)?;
        let score = if d <= radius {
            rater.score
        } else {
            let floor = rater.score.min(4.0);
            floor.max(rater.score * (-params.decay_per_m * (d - radius)).exp())
        };
        per_rater.push(score);
        deviations.push(d);
    }
    let (matched, &score) = per_rater
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .expect("RaterSet is never empty");
    Ok(RfsBreakdown { score, matched, per_rater, deviations, radius })
}

/// Mean Euclidean displacement over the waypoints inside the horizon.
pub fn ade(pred: &[[f64; 2]], reference: &[[f64; 2]], horizon_s: f64, rate_hz: f64) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(MetricsError::LengthMismatch { a: pred.len(), b: reference.len() });
    }
    let n = (horizon_s * rate_hz).round() as usize;
    if n == 0 || n > pred.len() {
        return Err(MetricsError::HorizonExceedsSpan { horizon_s, needed: n, have: pred.len() });
    }
    Ok((0..n).map(|k| dist(pred[k], reference[k])).sum::<f64>() / n as f64)
}

/// Displacement against the reference of the rater that determined the
/// score.
pub fn rater_matched_ade(
    pred: &[[f64; 2]],
    raters: &RaterSet,
    speed: f64,
    params: &RfsParams,
    horizon_s: f64,
) -> Result<f64> {
    let breakdown = rfs(pred, raters, speed, params)?;
    ade(pred, &raters.raters()[breakdown.matched].waypoints, horizon_s, params.rate_hz)
}

/// Per-horizon displacement between two already-global waypoint streams.
/// `dt` is the spacing of consecutive waypoints. Horizons the stream is
/// too short for are reported as absent.
pub fn sequence_ade(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    dt: f64,
    horizons_s: &[f64],
) -> Result<Vec<HorizonValue>> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { a: pred.len(), b: gt.len() });
    }
    Ok(horizons_s
        .iter()
        .map(|&h| {
            let n = (h / dt).round() as usize;
            let value = if n == 0 || n > pred.len() {
                None
            } else {
                Some((0..n).map(|k| dist(pred[k], gt[k])).sum::<f64>() / n as f64)
            };
            HorizonValue { horizon_s: h, value }
        })
        .collect())
}

pub const SEQUENCE_HORIZONS_S: [f64; 6] = [3.0, 5.0, 10.0, 15.0, 20.0, 25.0];

/// Fraction of predictions landing inside at least one rater's trust
/// region.
pub fn trust_region_rate(
    cases: &[(&[[f64; 2]], &RaterSet, f64)],
    params: &RfsParams,
) -> Result<f64> {
    if cases.is_empty() {
        return Ok(0.0);
    }
    let idx = params.checkpoint_indices();
    let mut inside = 0usize;
    for (pred, raters, speed) in cases {
        let radius = params.radius(*speed);
        let min_d = raters
            .raters()
            .iter()
            .map(|r| checkpoint_deviation(pred, &r.waypoints, &idx))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        if min_d <= radius {
            inside += 1;
        }
    }
    Ok(inside as f64 / cases.len() as f64)
}

/// Synthetic rater set for a frame: the logged future scored 10, plus two
/// laterally displaced alternatives with lower scores. Deterministic in
/// the seed.
pub fn synthetic_raters(gt_waypoints: &[[f64; 2]], seed: u64) -> RaterSet {
    let mut r = crate::rng::stream(seed, "metrics/raters");
    let mut perturbed = |amplitude: f64, score: f64| {
        let side = if crate::rng::uniform(&mut r) < 0.5 { -1.0 } else { 1.0 };
        let waypoints: Vec<[f64; 2]> = gt_waypoints
            .iter()
            .enumerate()
            .map(|(k, p)| {
                // Offset grows smoothly from zero so the alternative still
                // starts at the vehicle.
                let ramp = (k as f64 + 1.0) / gt_waypoints.len() as f64;
                [p[0], p[1] + side * amplitude * ramp]
            })
            .collect();
        Rater { waypoints, score }
    };
    let alt_a = perturbed(1.5, 7.0);
    let alt_b = perturbed(3.5, 5.0);
    RaterSet::new(vec![
        Rater { waypoints: gt_waypoints.to_vec(), score: 10.0 },
        alt_a,
        alt_b,
    ])
    .expect("three raters with fixed scores")
}

/// One scored horizon (absent when the stream is too short).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonValue {
    pub horizon_s: f64,
    pub value: Option<f64>,
}

/// Per-intent slice of the evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentBucket {
    pub intent: String,
    pub count: usize,
    pub rfs_mean: f64,
    pub ade_gt_3s: f64,
    pub ade_gt_5s: f64,
}

/// Aggregated evaluation output, serialized as the eval report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub rfs_mean: f64,
    pub trust_region_rate: f64,
    pub ade_gt: Vec<HorizonValue>,
    pub ade_matched: Vec<HorizonValue>,
    pub sequence_ade: Vec<HorizonValue>,
    pub per_intent: Vec<IntentBucket>,
}

/// Streaming aggregation of per-frame metric rows into an `EvalReport`.
#[derive(Debug, Default)]
pub struct EvalAccumulator {
    rows: Vec<FrameEval>,
}

#[derive(Debug, Clone)]
pub struct FrameEval {
    pub intent: String,
    pub rfs: f64,
    pub in_trust_region: bool,
    pub ade_gt_3s: f64,
    pub ade_gt_5s: f64,
    pub ade_matched_3s: f64,
    pub ade_matched_5s: f64,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, row: FrameEval) {
        self.rows.push(row);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn finalize(&self, sequence: Vec<HorizonValue>) -> EvalReport {
        let n = self.rows.len();
        let mean = |f: &dyn Fn(&FrameEval) -> f64| -> f64 {
            if n == 0 {
                0.0
            } else {
                self.rows.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        let mut intents: Vec<String> = self.rows.iter().map(|r| r.intent.clone()).collect();
        intents.sort();
        intents.dedup();
        let per_intent = intents
            .into_iter()
            .map(|intent| {
                let rows: Vec<&FrameEval> =
                    self.rows.iter().filter(|r| r.intent == intent).collect();
                let c = rows.len() as f64;
                IntentBucket {
                    intent,
                    count: rows.len(),
                    rfs_mean: rows.iter().map(|r| r.rfs).sum::<f64>() / c,
                    ade_gt_3s: rows.iter().map(|r| r.ade_gt_3s).sum::<f64>() / c,
                    ade_gt_5s: rows.iter().map(|r| r.ade_gt_5s).sum::<f64>() / c,
                }
            })
            .collect();
        EvalReport {
            frames: n,
            rfs_mean: mean(&|r| r.rfs),
            trust_region_rate: mean(&|r| if r.in_trust_region { 1.0 } else { 0.0 }),
            ade_gt: vec![
                HorizonValue { horizon_s: 3.0, value: Some(mean(&|r| r.ade_gt_3s)) },
                HorizonValue { horizon_s: 5.0, value: Some(mean(&|r| r.ade_gt_5s)) },
            ],
            ade_matched: vec![
                HorizonValue { horizon_s: 3.0, value: Some(mean(&|r| r.ade_matched_3s)) },
                HorizonValue { horizon_s: 5.0, value: Some(mean(&|r| r.ade_matched_5s)) },
            ],
            sequence_ade: sequence,
            per_intent,
        }
    }
}
