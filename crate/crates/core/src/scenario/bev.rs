//! Ego-centered bird's-eye-view patch tokens.
//!
//! The grid splits a square window around the ego vehicle into patches; each
//! patch token is an occupancy/velocity summary of the agents inside it plus
//! a fixed position code. Summary features are relative to the patch center,
//! so translating the scene by a whole patch shifts tokens between cells
//! without changing their summary content.

use super::Frame;
use serde::{Deserialize, Serialize};

/// Aggregate features per cell (zero vector for an empty cell).
pub const SUMMARY_DIMS: usize = 8;
/// Normalized patch-center coordinates appended after the summary.
pub const POS_CODE_DIMS: usize = 2;
pub const D_IN: usize = SUMMARY_DIMS + POS_CODE_DIMS;

const VEL_SCALE: f64 = 16.0;
const EXTENT_SCALE: f64 = 8.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    /// Side length of the square window in meters, centered on the ego.
    pub extent_m: f64,
    pub patches_per_side: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { extent_m: 32.0, patches_per_side: 4 }
    }
}

impl GridConfig {
    pub fn n_tokens(&self) -> usize {
        self.patches_per_side * self.patches_per_side
    }

    pub fn cell_size(&self) -> f64 {
        self.extent_m / self.patches_per_side as f64
    }
}

/// Encode a frame into `n_tokens x D_IN` row-major features. Agents are
/// re-expressed in ego coordinates; agents outside the window are dropped.
pub fn encode_scene_tokens(frame: &Frame, grid: &GridConfig) -> Vec<f64> {
    let n = grid.patches_per_side;
    let half = grid.extent_m / 2.0;
    let cell = grid.cell_size();
    let inv = frame.ego_pose.inverse();

    // Accumulators: count, sum rel-x, sum rel-y, sum vx, sum vy, sum speed,
    // sum extent-x, sum extent-y.
    let mut acc = vec![[0.0f64; SUMMARY_DIMS]; n * n];
    for a in &frame.agents {
        let p = inv.apply(a.position);
        let v = inv.rotate(a.velocity);
        if p[0] <= -half || p[0] >= half || p[1] <= -half || p[1] >= half {
            continue;
        }
        let ix = ((p[0] + half) / cell) as usize;
        let iy = ((p[1] + half) / cell) as usize;
        let (ix, iy) = (ix.min(n - 1), iy.min(n - 1));
        let cx = -half + (ix as f64 + 0.5) * cell;
        let cy = -half + (iy as f64 + 0.5) * cell;
        let slot = &mut acc[iy * n + ix];
        slot[0] += 1.0;
        slot[1] += p[0] - cx;
        slot[2] += p[1] - cy;
        slot[3] += v[0];
        slot[4] += v[1];
        slot[5] += (v[0] * v[0] + v[1] * v[1]).sqrt();
        slot[6] += a.extent[0];
        slot[7] += a.extent[1];
    }

    let mut out = Vec::with_capacity(n * n * D_IN);
    for iy in 0..n {
        for ix in 0..n {
            let slot = &acc[iy * n + ix];
            let count = slot[0];
            if count == 0.0 {
                out.extend_from_slice(&[0.0; SUMMARY_DIMS]);
            } else {
                out.push(count.min(4.0) / 4.0);
                out.push(slot[1] / count / (cell / 2.0));
                out.push(slot[2] / count / (cell / 2.0));
                out.push(slot[3] / count / VEL_SCALE);
                out.push(slot[4] / count / VEL_SCALE);
                out.push(slot[5] / count / VEL_SCALE);
                out.push(slot[6] / count / EXTENT_SCALE);
                out.push(slot[7] / count / EXTENT_SCALE);
            }
            let cx = -half + (ix as f64 + 0.5) * cell;
            let cy = -half + (iy as f64 + 0.5) * cell;
            out.push(cx / half);
            out.push(cy / half);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{ActionTrajectory, Agent, HISTORY_LEN};
    use crate::se2::Pose2;

    fn frame(agents: Vec<Agent>) -> Frame {
        Frame {
            timestamp: 0.0,
            ego_pose: Pose2::identity(),
            ego_history: vec![[0.0; 6]; HISTORY_LEN],
            agents,
            gt_future: ActionTrajectory::zeros(),
        }
    }

    fn agent(x: f64, y: f64, vx: f64, vy: f64) -> Agent {
        Agent { position: [x, y], velocity: [vx, vy], extent: [4.0, 2.0], class_id: 0 }
    }

    fn summaries(tokens: &[f64]) -> Vec<&[f64]> {
        tokens.chunks(D_IN).map(|t| &t[..SUMMARY_DIMS]).collect()
    }

    #[test]
    fn empty_scene_gives_the_empty_cell_constant_everywhere() {
        let grid = GridConfig::default();
        let toks = encode_scene_tokens(&frame(vec![]), &grid);
        assert_eq!(toks.len(), grid.n_tokens() * D_IN);
        for s in summaries(&toks) {
            assert!(s.iter().all(|&v| v == 0.0));
        }
        // Position codes still distinguish cells.
        let codes: Vec<&[f64]> = toks.chunks(D_IN).map(|t| &t[SUMMARY_DIMS..]).collect();
        assert_ne!(codes[0], codes[1]);
    }

    #[test]
    fn one_agent_touches_exactly_one_cell() {
        let grid = GridConfig::default();
        let toks = encode_scene_tokens(&frame(vec![agent(5.0, -3.0, 2.0, 0.0)]), &grid);
        let occupied: Vec<usize> = summaries(&toks)
            .iter()
            .enumerate()
            .filter(|(_, s)| s.iter().any(|&v| v != 0.0))
            .map(|(i, _)| i)
            .collect();
        // x=5 -> ix=2, y=-3 -> iy=1 in a 4x4 grid over [-16,16).
        assert_eq!(occupied, vec![1 * 4 + 2]);
    }

    #[test]
    fn whole_cell_translation_shifts_tokens_by_one_cell() {
        let grid = GridConfig::default();
        let cell = grid.cell_size();
        let base = vec![agent(-6.0, 2.5, 3.0, 1.0), agent(1.0, -9.0, -2.0, 0.5), agent(2.2, 2.2, 0.0, 4.0)];
        let shifted: Vec<Agent> = base
            .iter()
            .map(|a| Agent { position: [a.position[0] + cell, a.position[1]], ..a.clone() })
            .collect();
        let t0 = encode_scene_tokens(&frame(base), &grid);
        let t1 = encode_scene_tokens(&frame(shifted), &grid);
        let s0 = summaries(&t0);
        let s1 = summaries(&t1);
        let n = grid.patches_per_side;
        for iy in 0..n {
            for ix in 0..n - 1 {
                // Equal up to rounding: the shifted coordinates are summed
                // before the cell center is subtracted back out.
                for (a, b) in s1[iy * n + ix + 1].iter().zip(s0[iy * n + ix]) {
                    assert!((a - b).abs() < 1e-12, "cell ({ix},{iy}): {a} vs {b}");
                }
            }
            // The vacated left column is empty in the shifted encoding.
            assert!(s1[iy * n].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn agents_outside_the_window_are_dropped() {
        let grid = GridConfig::default();
        let toks = encode_scene_tokens(&frame(vec![agent(40.0, 0.0, 1.0, 0.0)]), &grid);
        for s in summaries(&toks) {
            assert!(s.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoding_respects_the_ego_pose() {
        // Same world scene seen from a translated, rotated ego: features are
        // functions of the relative geometry only.
        let grid = GridConfig::default();
        let world_agent = agent(10.0, 10.0, 1.0, 1.0);
        let pose = Pose2::new(10.0, 4.0, std::f64::consts::FRAC_PI_2);
        let mut f = frame(vec![world_agent]);
        f.ego_pose = pose;
        let toks = encode_scene_tokens(&f, &grid);
        // Relative position is pose^{-1} applied to (10,10) = (6, 0): ix=2, iy=2.
        let s = summaries(&toks);
        let occupied: Vec<usize> =
            s.iter().enumerate().filter(|(_, v)| v.iter().any(|&x| x != 0.0)).map(|(i, _)| i).collect();
        assert_eq!(occupied, vec![2 * 4 + 2]);
    }
}
