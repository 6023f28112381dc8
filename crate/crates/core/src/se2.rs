//! Planar rigid motions and trajectory-clip registration.
//!
//! [`Pose2`] is an element of SE(2) with heading wrapped to (-pi, pi].
//! [`align_clips`] solves the 2-point-set rigid registration in closed form
//! (centroid-subtracted cross-covariance, rotation from its atan2), and
//! [`stitch_chain`] composes per-join transforms into one global frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Se2Error {
    #[error("alignment needs at least 2 point pairs, got {0}")]
    TooFewPoints(usize),
    #[error("alignment got {lhs} vs {rhs} points")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("alignment is degenerate: source points are (numerically) coincident")]
    DegeneratePoints,
    #[error("join {join}: {source}")]
    JoinFailed { join: usize, source: Box<Se2Error> },
    #[error("stitching needs at least one clip")]
    NoClips,
    #[error("clips overlap by {got} points at join {join}, need at least 2")]
    BadOverlap { join: usize, got: usize },
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut t = theta % two_pi;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    } else if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// Rigid motion in the plane: rotation by `heading` then translation by
/// `(x, y)`. Standard semantics: `apply` maps local coordinates to parent
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose2 { x, y, heading: wrap_angle(heading) }
    }

    pub fn identity() -> Self {
        Pose2 { x: 0.0, y: 0.0, heading: 0.0 }
    }

    /// `self` then `other` as maps: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.heading.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.heading + other.heading,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.heading.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.heading)
    }

    /// Map a point from this pose's local frame into the parent frame.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Rotate a direction vector (no translation), e.g. velocities.
    pub fn rotate(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }
}

/// Result of registering one point set onto another.
#[derive(Debug, Clone)]
pub struct Alignment {
    /// Maps source points into the target frame.
    pub transform: Pose2,
    /// Euclidean distance per point pair after alignment.
    pub residuals: Vec<f64>,
    pub mean_residual: f64,
    /// Number of point pairs used (all pairs; no trimming).
    pub inliers: usize,
}

/// Closed-form least-squares rigid registration of `source` onto `target`
/// (same length, index-matched). Errors if fewer than 2 pairs or if the
/// source points are coincident (rotation unobservable).
pub fn align_clips(target: &[[f64; 2]], source: &[[f64; 2]]) -> Result<Alignment, Se2Error> {
    if target.len() != source.len() {
        return Err(Se2Error::LengthMismatch { lhs: target.len(), rhs: source.len() });
    }
    let n = target.len();
    if n < 2 {
        return Err(Se2Error::TooFewPoints(n));
    }
    let nf = n as f64;
    let mut tc = [0.0; 2];
    let mut sc = [0.0; 2];
    for i in 0..n {
        tc[0] += target[i][0];
        tc[1] += target[i][1];
        sc[0] += source[i][0];
        sc[1] += source[i][1];
    }
    tc = [tc[0] / nf, tc[1] / nf];
    sc = [sc[0] / nf, sc[1] / nf];

    // Cross-covariance of centered pairs; rotation angle from its skew part.
    let (mut sxx, mut sxy, mut syx, mut syy) = (0.0, 0.0, 0.0, 0.0);
    let mut source_spread = 0.0;
    for i in 0..n {
        let a = [target[i][0] - tc[0], target[i][1] - tc[1]];
        let b = [source[i][0] - sc[0], source[i][1] - sc[1]];
        sxx += a[0] * b[0];
        sxy += a[0] * b[1];
        syx += a[1] * b[0];
        syy += a[1] * b[1];
        source_spread += b[0] * b[0] + b[1] * b[1];
    }
    if source_spread / nf < 1e-18 {
        return Err(Se2Error::DegeneratePoints);
    }
    let heading = (syx - sxy).atan2(sxx + syy);
    let (s, c) = heading.sin_cos();
    let t = [tc[0] - (c * sc[0] - s * sc[1]), tc[1] - (s * sc[0] + c * sc[1])];
    let transform = Pose2::new(t[0], t[1], heading);

    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let m = transform.apply(source[i]);
            ((m[0] - target[i][0]).powi(2) + (m[1] - target[i][1]).powi(2)).sqrt()
        })
        .collect();
    let mean_residual = residuals.iter().sum::<f64>() / nf;
    Ok(Alignment { transform, residuals, mean_residual, inliers: n })
}

/// A trajectory clip expressed in its own local frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clip {
    pub points: Vec<[f64; 2]>,
}

/// Result of stitching clips into the first clip's frame.
#[derive(Debug, Clone)]
pub struct Stitched {
    /// Transform of each clip into the global (clip 0) frame.
    pub transforms: Vec<Pose2>,
    /// All clip points mapped to the global frame, clip by clip, with the
    /// overlapping head of each later clip dropped.
    pub trajectory: Vec<[f64; 2]>,
    /// Mean alignment residual per join (one entry per consecutive pair).
    pub join_residuals: Vec<f64>,
}

/// Register each clip onto its predecessor over the trailing/leading
/// `overlap` points and chain the transforms. Clip `k`'s global transform is
/// the composition of all joins up to `k`.
pub fn stitch_chain(clips: &[Clip], overlap: usize) -> Result<Stitched, Se2Error> {
    if clips.is_empty() {
        return Err(Se2Error::NoClips);
    }
    let mut transforms = vec![Pose2::identity()];
    let mut join_residuals = Vec::new();
    for j in 1..clips.len() {
        let prev = &clips[j - 1].points;
        let next = &clips[j].points;
        if overlap < 2 || overlap > prev.len() || overlap > next.len() {
            return Err(Se2Error::BadOverlap { join: j, got: overlap.min(prev.len()).min(next.len()) });
        }
        let tail = &prev[prev.len() - overlap..];
        let head = &next[..overlap];
        let aligned = align_clips(tail, head)
            .map_err(|e| Se2Error::JoinFailed { join: j, source: Box::new(e) })?;
        let global = transforms[j - 1].compose(&aligned.transform);
        transforms.push(global);
        join_residuals.push(aligned.mean_residual);
    }

    let mut trajectory = Vec::new();
    for (k, clip) in clips.iter().enumerate() {
        let skip = if k == 0 { 0 } else { overlap };
        for p in &clip.points[skip..] {
            trajectory.push(transforms[k].apply(*p));
        }
    }
    Ok(Stitched { transforms, trajectory, join_residuals })
}

/// Cut a global trajectory into overlapping clips, each re-expressed in the
/// frame anchored at its first point with the heading of its first segment.
/// Inverse of [`stitch_chain`] up to floating-point error; used by tests and
/// the stitch demo.
pub fn split_into_clips(
    global: &[[f64; 2]],
    clip_len: usize,
    overlap: usize,
) -> Result<Vec<Clip>, Se2Error> {
    assert!(clip_len >= 2 && overlap >= 2 && overlap < clip_len, "need 2 <= overlap < clip_len");
    if global.len() < clip_len {
        return Err(Se2Error::TooFewPoints(global.len()));
    }
    let stride = clip_len - overlap;
    let mut clips = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + clip_len).min(global.len());
        let window = &global[start..end];
        let heading = (window[1][1] - window[0][1]).atan2(window[1][0] - window[0][0]);
        let anchor = Pose2::new(window[0][0], window[0][1], heading);
        let inv = anchor.inverse();
        clips.push(Clip { points: window.iter().map(|&p| inv.apply(p)).collect() });
        if end == global.len() {
            break;
        }
        start += stride;
    }
    Ok(clips)
}
