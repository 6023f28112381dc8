//! Streaming scene memory.
//!
//! After each frame's forward pass, a small propagation transformer
//! compresses the frame's hidden states into a fixed number of memory
//! tokens, which go into a FIFO channel alongside the ego pose and
//! timestamp. At the next frame the channel is read back: every stored
//! entry is modulated by its relative pose and age with respect to the
//! current frame, then the same propagation transformer (shared weights)
//! cross-attends the query tokens over all modulated entries. The read
//! output becomes the Memory span of the sequence.
//!
//! Storing raw tokens and applying the relative transform only at read time
//! keeps entries valid as the ego moves: the channel never has to be
//! rewritten when the current pose changes.

use crate::model::{BackboneConfig, ModelCtx, ModelError};
use crate::se2::Pose2;
use crate::tensor::{init_normal, init_value, ParamSet, Tape, TensorId};
use std::collections::VecDeque;

const MOD_HIDDEN: usize = 32;
const PROP_LAYERS: usize = 2;
const RMS_EPS: f64 = 1e-6;

/// Relative-geometry feature length: heading cosine/sine, planar offset,
/// normalized age.
pub const MOD_FEATURE_DIMS: usize = 5;

type Result<T> = std::result::Result<T, ModelError>;

/// One stored frame summary: compressed tokens plus where and when they
/// were written.
#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub tokens: TensorId,
    pub pose: Pose2,
    pub timestamp: f64,
}

/// Bounded FIFO of frame summaries; pushing past capacity evicts the
/// oldest entry.
#[derive(Debug, Clone)]
pub struct MemoryChannel {
    entries: VecDeque<MemoryEntry>,
    capacity: usize,
}

impl MemoryChannel {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "memory channel needs room for at least one entry");
        MemoryChannel { entries: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, entry: MemoryEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Move the stored tokens onto a fresh tape as constants, cutting any
    /// gradient history. Used between optimization windows and between
    /// inference frames.
    pub fn carry_to(&self, old_tape: &Tape, new_tape: &Tape) -> MemoryChannel {
        let mut out = MemoryChannel::new(self.capacity);
        for e in &self.entries {
            let shape = old_tape.shape(e.tokens);
            let tokens = new_tape.constant(&shape, old_tape.data(e.tokens));
            out.push(MemoryEntry { tokens, pose: e.pose, timestamp: e.timestamp });
        }
        out
    }
}

fn prop_param_specs(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>, bool)> {
    let h = cfg.hidden;
    let mut spec: Vec<(String, Vec<usize>, bool)> = vec![
        ("mem/query".into(), vec![cfg.n_memory, h], false),
        ("mem/null".into(), vec![1, h], false),
        ("mem/mod/w1".into(), vec![MOD_FEATURE_DIMS, MOD_HIDDEN], false),
        ("mem/mod/b1".into(), vec![MOD_HIDDEN], true),
        // Zero-initialized output layer keeps modulation an exact no-op at step 0.
        ("mem/mod/w2".into(), vec![MOD_HIDDEN, h], true),
        ("mem/mod/b2".into(), vec![h], true),
    ];
    for l in 0..PROP_LAYERS {
        for blk in ["self", "cross"] {
            for p in ["wq", "wk", "wv", "wo"] {
                spec.push((format!("mem/prop{l}/{blk}/{p}"), vec![h, h], false));
            }
        }
        spec.push((format!("mem/prop{l}/ffn/w1"), vec![h, cfg.ffn_width], false));
        spec.push((format!("mem/prop{l}/ffn/b1"), vec![cfg.ffn_width], true));
        spec.push((format!("mem/prop{l}/ffn/w2"), vec![cfg.ffn_width, h], false));
        spec.push((format!("mem/prop{l}/ffn/b2"), vec![h], true));
    }
    spec
}

/// Add the memory parameters to a backbone parameter set.
pub fn add_memory_params(params: &mut ParamSet, cfg: &BackboneConfig, seed: u64) {
    for (name, shape, zero) in prop_param_specs(cfg) {
        let values =
            if zero { init_value(&shape, 0.0) } else { init_normal(seed, &name, &shape, 0.02) };
        params.insert(&name, &shape, values);
    }
}

pub fn has_memory_params(params: &ParamSet) -> bool {
    params.position("mem/query").is_some()
}

/// Relative geometry of entry `j` as seen from the current frame `i`:
/// heading and translation of P_i^-1 . P_j, plus the entry's age scaled by
/// the channel's nominal time span and clamped to [0, 1].
pub fn modulation_feature(
    now_pose: &Pose2,
    now_time: f64,
    entry_pose: &Pose2,
    entry_time: f64,
    time_scale: f64,
) -> [f64; MOD_FEATURE_DIMS] {
    let rel = now_pose.inverse().compose(entry_pose);
    let age = ((now_time - entry_time) / time_scale).clamp(0.0, 1.0);
    [rel.heading.cos(), rel.heading.sin(), rel.x, rel.y, age]
}

fn attention(
    ctx: &ModelCtx,
    prefix: &str,
    queries: TensorId,
    context: TensorId,
) -> Result<TensorId> {
    let tape = ctx.tape;
    let cfg = ctx.cfg;
    let dh = cfg.head_dim();
    let q = tape.matmul(queries, ctx.bound.get(&format!("{prefix}/wq")))?;
    let k = tape.matmul(context, ctx.bound.get(&format!("{prefix}/wk")))?;
    let v = tape.matmul(context, ctx.bound.get(&format!("{prefix}/wv")))?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let scores =
            tape.scale(tape.matmul(qh, tape.transpose(kh)?)?, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.softmax_last(scores)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat(&heads, 1)?;
    Ok(tape.matmul(merged, ctx.bound.get(&format!("{prefix}/wo")))?)
}

/// Two pre-norm layers of [query self-attention, cross-attention over the
/// context, feed-forward]; memory tokens carry no positional code.
fn prop_forward(ctx: &ModelCtx, queries: TensorId, context: TensorId) -> Result<TensorId> {
    let tape = ctx.tape;
    let mut x = queries;
    for l in 0..PROP_LAYERS {
        let ln = tape.rms_norm_last(x, RMS_EPS)?;
        x = tape.add(x, attention(ctx, &format!("mem/prop{l}/self"), ln, ln)?)?;
        let ln = tape.rms_norm_last(x, RMS_EPS)?;
        let kv = tape.rms_norm_last(context, RMS_EPS)?;
        x = tape.add(x, attention(ctx, &format!("mem/prop{l}/cross"), ln, kv)?)?;
        let ln = tape.rms_norm_last(x, RMS_EPS)?;
        let f = tape.matmul(ln, ctx.bound.get(&format!("mem/prop{l}/ffn/w1")))?;
        let f = tape.add_broadcast(f, ctx.bound.get(&format!("mem/prop{l}/ffn/b1")))?;
        let f = tape.silu(f)?;
        let f = tape.matmul(f, ctx.bound.get(&format!("mem/prop{l}/ffn/w2")))?;
        let f = tape.add_broadcast(f, ctx.bound.get(&format!("mem/prop{l}/ffn/b2")))?;
        x = tape.add(x, f)?;
    }
    Ok(x)
}

/// Add the geometry MLP's output to every token of one entry.
fn modulate(ctx: &ModelCtx, tokens: TensorId, feature: [f64; MOD_FEATURE_DIMS]) -> Result<TensorId> {
    let tape = ctx.tape;
    let f = tape.constant(&[1, MOD_FEATURE_DIMS], feature.to_vec());
    let h = tape.matmul(f, ctx.bound.get("mem/mod/w1"))?;
    let h = tape.add_broadcast(h, ctx.bound.get("mem/mod/b1"))?;
    let h = tape.silu(h)?;
    let h = tape.matmul(h, ctx.bound.get("mem/mod/w2"))?;
    let h = tape.add_broadcast(h, ctx.bound.get("mem/mod/b2"))?;
    let row = tape.reshape(h, &[ctx.cfg.hidden])?;
    Ok(tape.add_broadcast(tokens, row)?)
}

/// Read the channel from the current frame's viewpoint. Empty channels
/// yield the learned null token; otherwise the query tokens attend over
/// every entry, each modulated by its relative pose and age.
pub fn read(
    ctx: &ModelCtx,
    channel: &MemoryChannel,
    now_pose: &Pose2,
    now_time: f64,
    time_scale: f64,
) -> Result<TensorId> {
    if channel.is_empty() {
        return Ok(ctx.bound.get("mem/null"));
    }
    let mut blocks = Vec::with_capacity(channel.len());
    for e in channel.entries() {
        let feat = modulation_feature(now_pose, now_time, &e.pose, e.timestamp, time_scale);
        blocks.push(modulate(ctx, e.tokens, feat)?);
    }
    let context = ctx.tape.concat(&blocks, 0)?;
    prop_forward(ctx, ctx.bound.get("mem/query"), context)
}

/// Compress a frame's hidden states into the channel's token format with
/// the same propagation transformer used for reads.
pub fn write(ctx: &ModelCtx, hidden: TensorId) -> Result<TensorId> {
    prop_forward(ctx, ctx.bound.get("mem/query"), hidden)
}

/// One streaming frame: read the channel, run the backbone with the read
/// output as the Memory span, compress the result back into the channel.
/// Heads run on the returned hidden state; the caller decides when (or
/// whether) to detach the channel.
pub fn stream_step(
    ctx: &ModelCtx,
    channel: &mut MemoryChannel,
    mode: crate::layout::Mode,
    inputs: &crate::model::FrameInputs,
    action: Option<&crate::model::ActionIo>,
    pose: Pose2,
    timestamp: f64,
    time_scale: f64,
) -> Result<(TensorId, crate::layout::SequenceLayout)> {
    let mem = read(ctx, channel, &pose, timestamp, time_scale)?;
    let (hidden, layout) = ctx.forward(mode, inputs, Some(mem), action)?;
    let tokens = write(ctx, hidden)?;
    channel.push(MemoryEntry { tokens, pose, timestamp });
    Ok((hidden, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Mode;
    use crate::model::{init_params, ActionIo, FrameInputs};
    use crate::rng;
    use crate::scenario::bev::GridConfig;
    use crate::scenario::{generate_scenario, ScenarioParams, ACTION_DIMS};

    fn tiny_with_memory(seed: u64) -> (BackboneConfig, ParamSet) {
        let cfg = BackboneConfig::tiny();
        let mut params = init_params(&cfg, seed);
        add_memory_params(&mut params, &cfg, seed + 1);
        (cfg, params)
    }

    fn frame_inputs(seed: u64, idx: usize) -> FrameInputs {
        let s = generate_scenario(seed, "left", &ScenarioParams::desk()).unwrap();
        FrameInputs::from_frame(&s.frames[idx], &s.qa_pairs[0], &GridConfig::default())
    }

    #[test]
    fn fifo_evicts_the_oldest_entry_first() {
        let tape = Tape::new();
        let mut ch = MemoryChannel::new(2);
        let mk = |t: f64| MemoryEntry {
            tokens: tape.constant(&[1, 4], vec![t; 4]),
            pose: Pose2::identity(),
            timestamp: t,
        };
        ch.push(mk(0.0));
        ch.push(mk(1.0));
        ch.push(mk(2.0));
        assert_eq!(ch.len(), 2);
        let times: Vec<f64> = ch.entries().map(|e| e.timestamp).collect();
        assert_eq!(times, vec![1.0, 2.0]);
    }

    #[test]
    fn fifo_fuzz_matches_a_sliding_window_oracle() {
        let tape = Tape::new();
        let mut r = rng::stream(0, "memory_test/fuzz");
        for capacity in [1usize, 2, 5] {
            let mut ch = MemoryChannel::new(capacity);
            let mut oracle: Vec<f64> = Vec::new();
            for i in 0..1000 {
                let t = i as f64 + rng::uniform(&mut r);
                ch.push(MemoryEntry {
                    tokens: tape.constant(&[1, 2], vec![t, -t]),
                    pose: Pose2::identity(),
                    timestamp: t,
                });
                oracle.push(t);
                let keep = &oracle[oracle.len().saturating_sub(capacity)..];
                let got: Vec<f64> = ch.entries().map(|e| e.timestamp).collect();
                assert_eq!(got, keep);
                assert!(ch.len() <= capacity);
            }
        }
    }

    #[test]
    fn zero_initialized_modulation_is_the_identity() {
        let (cfg, params) = tiny_with_memory(1);
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let ctx = ModelCtx::new(&tape, &bound, &cfg);
        let tokens = tape.constant(
            &[cfg.n_memory, cfg.hidden],
            (0..cfg.n_memory * cfg.hidden).map(|i| (i as f64).sin()).collect(),
        );
        let feat = modulation_feature(
            &Pose2::new(3.0, -2.0, 0.4),
            7.0,
            &Pose2::new(1.0, 1.0, -0.2),
            6.5,
            1.0,
        );
        let out = modulate(&ctx, tokens, feat).unwrap();
        assert_eq!(tape.data(out), tape.data(tokens));
    }

    #[test]
    fn same_pose_same_time_feature_is_the_identity_geometry() {
        let pose = Pose2::new(12.0, -3.0, 1.1);
        let f = modulation_feature(&pose, 4.0, &pose, 4.0, 1.0);
        assert!((f[0] - 1.0).abs() < 1e-12);
        for v in &f[1..] {
            assert!(v.abs() < 1e-12);
        }
        // Age clamps to one full window.
        let old = modulation_feature(&pose, 10.0, &pose, 0.0, 1.0);
        assert_eq!(old[4], 1.0);
    }

    #[test]
    fn reads_are_invariant_to_a_rigid_world_motion() {
        let (cfg, params) = tiny_with_memory(2);
        let world = Pose2::new(-40.0, 17.0, 2.2);
        let run = |shift: Option<Pose2>| {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &cfg);
            let mut ch = MemoryChannel::new(2);
            let mut rr = rng::stream(5, "memory_test/tok");
            for (i, base) in
                [Pose2::new(0.0, 0.0, 0.0), Pose2::new(3.0, 1.0, 0.3)].iter().enumerate()
            {
                let pose = match shift {
                    Some(g) => g.compose(base),
                    None => *base,
                };
                let tokens = tape.constant(
                    &[cfg.n_memory, cfg.hidden],
                    (0..cfg.n_memory * cfg.hidden).map(|_| rng::normal(&mut rr)).collect(),
                );
                ch.push(MemoryEntry { tokens, pose, timestamp: i as f64 * 0.5 });
            }
            let now = Pose2::new(5.0, 2.0, 0.6);
            let now = match shift {
                Some(g) => g.compose(&now),
                None => now,
            };
            tape.data(read(&ctx, &ch, &now, 1.0, 1.0).unwrap())
        };
        let plain = run(None);
        let moved = run(Some(world));
        for (a, b) in plain.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_channel_reads_the_learned_null_token() {
        let (cfg, params) = tiny_with_memory(3);
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let ctx = ModelCtx::new(&tape, &bound, &cfg);
        let ch = MemoryChannel::new(2);
        let out = read(&ctx, &ch, &Pose2::identity(), 0.0, 1.0).unwrap();
        assert_eq!(tape.shape(out), vec![1, cfg.hidden]);
        assert_eq!(tape.data(out), params.by_name("mem/null"));
    }

    #[test]
    fn live_memory_changes_the_forward_pass() {
        let (cfg, params) = tiny_with_memory(4);
        let inputs = frame_inputs(8, 2);
        let hidden_with = |filled: bool| {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &cfg);
            let mut ch = MemoryChannel::new(2);
            if filled {
                let tokens = tape.constant(
                    &[cfg.n_memory, cfg.hidden],
                    (0..cfg.n_memory * cfg.hidden).map(|i| ((i * 7) as f64).cos()).collect(),
                );
                ch.push(MemoryEntry { tokens, pose: Pose2::identity(), timestamp: 0.0 });
            }
            let mem = read(&ctx, &ch, &Pose2::new(1.0, 0.0, 0.1), 0.5, 1.0).unwrap();
            let (hidden, layout) = ctx.forward(Mode::VqaOnly, &inputs, Some(mem), None).unwrap();
            // Compare at the question rows, which any memory change reaches.
            let q = layout.span(crate::layout::TokenRole::Question);
            let h = cfg.hidden;
            tape.data(hidden)[q.start * h..q.end * h].to_vec()
        };
        assert_ne!(hidden_with(false), hidden_with(true));
    }

    #[test]
    fn gradients_flow_across_frames_through_the_channel() {
        // Three frames on one tape; the loss sits on frame 2, yet a leaf
        // injected into frame 0's action span must receive gradient through
        // write -> channel -> read. A carry_to detach must sever it.
        let (cfg, params) = tiny_with_memory(5);
        let scenario = generate_scenario(12, "left", &ScenarioParams::desk()).unwrap();
        let time_scale = 1.0;
        let run = |detach_between: bool| -> (f64, f64) {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &cfg);
            let leaf = tape.leaf(
                &[cfg.l_f, ACTION_DIMS],
                (0..cfg.l_f * ACTION_DIMS).map(|i| (i as f64 * 0.37).sin()).collect(),
            );
            let mut ch = MemoryChannel::new(cfg.n_memory.min(2));
            let mut last = None;
            for (i, frame) in scenario.frames.iter().take(3).enumerate() {
                let inputs =
                    FrameInputs::from_frame(frame, &scenario.qa_pairs[0], &GridConfig::default());
                let mem = read(&ctx, &ch, &frame.ego_pose, frame.timestamp, time_scale).unwrap();
                let io = ActionIo {
                    x_t: if i == 0 {
                        leaf
                    } else {
                        tape.constant(&[cfg.l_f, ACTION_DIMS], vec![0.1; cfg.l_f * ACTION_DIMS])
                    },
                    t: 0.5,
                };
                let (hidden, layout) =
                    ctx.forward(Mode::ActionOnly, &inputs, Some(mem), Some(&io)).unwrap();
                let tokens = write(&ctx, hidden).unwrap();
                ch.push(MemoryEntry {
                    tokens,
                    pose: frame.ego_pose,
                    timestamp: frame.timestamp,
                });
                if detach_between {
                    ch = ch.carry_to(&tape, &tape);
                }
                last = Some((hidden, layout));
            }
            let (hidden, layout) = last.unwrap();
            let span = layout.span(crate::layout::TokenRole::Action);
            let rows = tape.slice(hidden, 0, span.start, span.len()).unwrap();
            let loss = tape.mean(tape.mul(rows, rows).unwrap()).unwrap();
            let grads = tape.backward(loss).unwrap();
            let leaf_norm = grads
                .get_or_zeros(leaf, cfg.l_f * ACTION_DIMS)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let query_norm = grads
                .get_or_zeros(bound.get("mem/query"), cfg.n_memory * cfg.hidden)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            (leaf_norm, query_norm)
        };
        let (leaf_flowing, query_flowing) = run(false);
        assert!(leaf_flowing > 0.0, "cross-frame gradient vanished");
        assert!(query_flowing > 0.0, "query tokens got no gradient");
        let (leaf_detached, query_detached) = run(true);
        assert_eq!(leaf_detached, 0.0, "detach must cut cross-frame flow");
        assert!(query_detached > 0.0, "current-frame read path must stay live");
    }

    #[test]
    fn stream_steps_grow_the_channel_and_the_memory_span() {
        let (cfg, params) = tiny_with_memory(7);
        let scenario = generate_scenario(14, "straight", &ScenarioParams::desk()).unwrap();
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let ctx = ModelCtx::new(&tape, &bound, &cfg);
        let mut ch = MemoryChannel::new(2);
        let mut span_lens = Vec::new();
        for frame in scenario.frames.iter().take(4) {
            let inputs =
                FrameInputs::from_frame(frame, &scenario.qa_pairs[0], &GridConfig::default());
            let (_, layout) = stream_step(
                &ctx,
                &mut ch,
                Mode::VqaOnly,
                &inputs,
                None,
                frame.ego_pose,
                frame.timestamp,
                1.0,
            )
            .unwrap();
            span_lens.push(layout.span(crate::layout::TokenRole::Memory).len());
        }
        // Null token first, then the query-token block regardless of how
        // many entries are stored.
        assert_eq!(span_lens, vec![1, cfg.n_memory, cfg.n_memory, cfg.n_memory]);
        assert_eq!(ch.len(), 2);
    }

    #[test]
    fn carried_channels_preserve_values_and_capacity() {
        let (cfg, params) = tiny_with_memory(6);
        let tape_a = Tape::new();
        let mut ch = MemoryChannel::new(2);
        let vals: Vec<f64> = (0..cfg.n_memory * cfg.hidden).map(|i| i as f64 * 0.01).collect();
        ch.push(MemoryEntry {
            tokens: tape_a.constant(&[cfg.n_memory, cfg.hidden], vals.clone()),
            pose: Pose2::new(1.0, 2.0, 0.3),
            timestamp: 4.5,
        });
        let tape_b = Tape::new();
        let carried = ch.carry_to(&tape_a, &tape_b);
        assert_eq!(carried.len(), 1);
        assert_eq!(carried.capacity(), 2);
        let e = carried.entries().next().unwrap();
        assert_eq!(tape_b.data(e.tokens), vals);
        assert_eq!(e.pose, Pose2::new(1.0, 2.0, 0.3));
        assert_eq!(e.timestamp, 4.5);
        let _ = params;
    }
}
