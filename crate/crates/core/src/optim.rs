//! AdamW with decoupled weight decay, a warmup-then-cosine learning-rate
//! schedule, and global gradient-norm clipping.
//!
//! Gradients arrive through a [`GradBuffer`] aligned with the parameter
//! set's insertion order, so batches evaluated on separate tapes can be
//! accumulated before one update.

use crate::tensor::{Bound, Grads, ParamSet};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, weight_decay: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Linear warmup to the base rate, then cosine decay to `floor_frac` of it
/// by `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_frac: f64,
}

impl LrSchedule {
    pub fn desk(total_steps: usize) -> Self {
        LrSchedule { warmup_steps: 100, total_steps, floor_frac: 0.1 }
    }

    /// Multiplier for 1-based step `t`.
    pub fn factor(&self, t: usize) -> f64 {
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            return t as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps || t >= self.total_steps {
            return self.floor_frac;
        }
        let progress =
            (t - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.floor_frac + (1.0 - self.floor_frac) * cos
    }
}

/// Accumulated gradients in parameter-set index order.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    slots: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros(params: &ParamSet) -> Self {
        GradBuffer {
            slots: (0..params.len())
                .map(|i| vec![0.0; params.shape(i).iter().product()])
                .collect(),
        }
    }

    /// Add the gradients of one tape's backward pass. `bound` must come
    /// from the same `ParamSet` the buffer was sized for.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Grads) {
        assert_eq!(bound.len(), self.slots.len(), "bound set does not match the buffer");
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if let Some(g) = grads.get(bound.id_at(i)) {
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for slot in &mut self.slots {
            for v in slot.iter_mut() {
                *v *= f;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scale so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        &self.slots[i]
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|v| v.is_finite())
    }
}

/// Decoupled-weight-decay Adam. Decay applies only to tensors with two or
/// more axes; biases, gains, and other vectors are exempt.
#[derive(Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub schedule: Option<LrSchedule>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamWConfig, schedule: Option<LrSchedule>) -> Self {
        let zero: Vec<Vec<f64>> =
            (0..params.len()).map(|i| vec![0.0; params.shape(i).iter().product()]).collect();
        AdamW { cfg, schedule, m: zero.clone(), v: zero, step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Current learning rate for the NEXT update.
    pub fn next_lr(&self) -> f64 {
        let t = self.step + 1;
        match &self.schedule {
            Some(s) => self.cfg.lr * s.factor(t),
            None => self.cfg.lr,
        }
    }

    /// One update from an accumulated gradient buffer; returns the learning
    /// rate that was applied.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradBuffer) -> f64 {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter set");
        self.step += 1;
        let lr = match &self.schedule {
            Some(s) => self.cfg.lr * s.factor(self.step),
            None => self.cfg.lr,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let decay = if params.shape(i).len() >= 2 { self.cfg.weight_decay } else { 0.0 };
            let g = grads.slot(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.values_mut(i);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.cfg.eps);
                p[k] -= lr * (update + decay * p[k]);
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn single(name: &str, shape: &[usize], values: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, shape, values);
        p
    }

    #[test]
    fn quadratic_bowl_converges_to_the_minimum() {
        let mut params = single("x", &[1], vec![-4.0]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(&params, cfg, None);
        for _ in 0..400 {
            let mut g = GradBuffer::zeros(&params);
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let d = tape.sub(bound.id_at(0), tape.constant(&[1], vec![3.0])).unwrap();
            let loss = tape.mean(tape.mul(d, d).unwrap()).unwrap();
            let grads = tape.backward(loss).unwrap();
            g.accumulate(&bound, &grads);
            opt.step(&mut params, &g);
        }
        assert!((params.values(0)[0] - 3.0).abs() < 1e-3, "got {}", params.values(0)[0]);
    }

    #[test]
    fn first_step_moves_by_the_learning_rate_regardless_of_gradient_scale() {
        for &gscale in &[1e-6, 1.0, 1e6] {
            let mut params = single("w", &[2, 1], vec![1.0, -1.0]);
            let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..AdamWConfig::default() };
            let mut opt = AdamW::new(&params, cfg, None);
            let mut g = GradBuffer::zeros(&params);
            g.slots[0] = vec![gscale, -gscale];
            opt.step(&mut params, &g);
            // Bias-corrected Adam's first update is lr * sign(g) up to the
            // eps term in the denominator.
            assert!((params.values(0)[0] - (1.0 - 1e-3)).abs() < 0.02e-3, "gscale {gscale}");
            assert!((params.values(0)[1] - (-1.0 + 1e-3)).abs() < 0.02e-3, "gscale {gscale}");
        }
    }

    #[test]
    fn weight_decay_skips_single_axis_tensors() {
        let mut params = ParamSet::new();
        params.insert("w", &[2, 2], vec![1.0; 4]);
        params.insert("b", &[2], vec![1.0; 2]);
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.5, ..AdamWConfig::default() };
        let mut opt = AdamW::new(&params, cfg, None);
        let g = GradBuffer::zeros(&params);
        opt.step(&mut params, &g);
        // Zero gradient: only the decoupled decay moves anything.
        for v in params.by_name("w") {
            assert!((v - (1.0 - 0.01 * 0.5)).abs() < 1e-15);
        }
        for v in params.by_name("b") {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn schedule_hits_the_analytic_anchor_points() {
        let s = LrSchedule { warmup_steps: 100, total_steps: 1100, floor_frac: 0.1 };
        assert!((s.factor(1) - 0.01).abs() < 1e-15);
        assert!((s.factor(50) - 0.5).abs() < 1e-15);
        assert!((s.factor(100) - 1.0).abs() < 1e-15);
        // Cosine midpoint: halfway between peak and floor.
        assert!((s.factor(600) - 0.55).abs() < 1e-12);
        assert!((s.factor(1100) - 0.1).abs() < 1e-15);
        assert!((s.factor(5000) - 0.1).abs() < 1e-15);
        // Monotone non-increasing after warmup.
        let mut last = f64::INFINITY;
        for t in 100..1100 {
            let f = s.factor(t);
            assert!(f <= last + 1e-15);
            last = f;
        }
    }

    #[test]
    fn global_clip_rescales_only_above_the_threshold() {
        let params = single("w", &[2, 2], vec![0.0; 4]);
        let mut g = GradBuffer::zeros(&params);
        g.slots[0] = vec![3.0, 4.0, 0.0, 0.0];
        let before = g.clip_global_norm(10.0);
        assert_eq!(before, 5.0);
        assert_eq!(g.slot(0), &[3.0, 4.0, 0.0, 0.0]);
        let before = g.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert!((g.slot(0)[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn accumulate_sums_gradients_across_tapes() {
        let params = single("w", &[2], vec![1.0, 2.0]);
        let mut buf = GradBuffer::zeros(&params);
        for _ in 0..2 {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let loss = tape.mean(bound.id_at(0)).unwrap();
            let grads = tape.backward(loss).unwrap();
            buf.accumulate(&bound, &grads);
        }
        assert_eq!(buf.slot(0), &[1.0, 1.0]);
        assert!(buf.is_finite());
    }
}
