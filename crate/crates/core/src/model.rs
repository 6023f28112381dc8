//! The shared backbone: one transformer over all role spans, with a language
//! head at answer positions and a velocity-field head at action positions.
//!
//! Action-trajectory channels are trained in a normalized space (per-channel
//! scales below) with positions as per-step displacements. Intent
//! conditioning enters only the action head's time embedding, never the
//! backbone, so conditional and unconditional velocity fields share one
//! backbone pass.

use crate::layout::{build_mask, LayoutError, Mode, SequenceLayout, SpanLengths, TokenRole};
use crate::scenario::bev::{encode_scene_tokens, GridConfig, D_IN};
use crate::scenario::vocab::{IntentVocabulary, QaPair};
use crate::scenario::{ego_history_relative, Frame, ACTION_DIMS, HISTORY_LEN};
use crate::tensor::{
    init_normal, init_value, Bound, ParamSet, Tape, TensorError, TensorId,
};
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use thiserror::Error;

/// Per-channel normalization: displacements and accelerations ~ O(1) after
/// dividing by 4, velocities after dividing by 16.
pub const ACTION_SCALES: [f64; 6] = [4.0, 4.0, 16.0, 16.0, 4.0, 4.0];

/// Component weights of the velocity-field loss: position, velocity,
/// acceleration pairs.
pub const FM_WEIGHTS: [f64; 6] = [1.0, 1.0, 0.5, 0.5, 0.5, 0.5];

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite activations after layer {layer}")]
    NonFinite { layer: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("{0}")]
    BadInput(String),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub n_memory: usize,
    pub l_f: usize,
    pub action_dims: usize,
    pub action_head_hidden: usize,
    pub intent_classes: usize,
    pub rope_base: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::desk()
    }
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig {
            hidden: 64,
            layers: 4,
            heads: 4,
            ffn_width: 256,
            vocab_size: 64,
            n_memory: 8,
            l_f: crate::scenario::L_F,
            action_dims: ACTION_DIMS,
            action_head_hidden: 128,
            intent_classes: 3,
            rope_base: 10000.0,
        }
    }

    /// Two-layer hidden-16 model for finite-difference verification.
    pub fn tiny() -> Self {
        BackboneConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            ffn_width: 32,
            vocab_size: 34,
            n_memory: 4,
            l_f: crate::scenario::L_F,
            action_dims: ACTION_DIMS,
            action_head_hidden: 24,
            intent_classes: 3,
            rope_base: 10000.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(ModelError::BadInput(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(ModelError::BadInput(format!(
                "head dim {} must be even for rotary pairs",
                self.head_dim()
            )));
        }
        if self.l_f == 0 || self.action_dims != ACTION_DIMS {
            return Err(ModelError::BadInput("action shape must be L_f x 6".into()));
        }
        Ok(())
    }
}

pub(crate) enum Init {
    Normal,
    Zero,
}

pub(crate) fn param_specs(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>, Init)> {
    let h = cfg.hidden;
    let mut spec: Vec<(String, Vec<usize>, Init)> = vec![
        ("embed/token".into(), vec![cfg.vocab_size, h], Init::Normal),
        ("vision/w".into(), vec![D_IN, h], Init::Normal),
        ("vision/b".into(), vec![h], Init::Zero),
        ("action/lift/w".into(), vec![cfg.action_dims, h], Init::Normal),
        ("action/lift/b".into(), vec![h], Init::Zero),
    ];
    for part in ["pos", "vel", "acc"] {
        spec.push((format!("ego/{part}/w1"), vec![2 * HISTORY_LEN, h], Init::Normal));
        spec.push((format!("ego/{part}/b1"), vec![h], Init::Zero));
        spec.push((format!("ego/{part}/w2"), vec![h, h], Init::Normal));
        spec.push((format!("ego/{part}/b2"), vec![h], Init::Zero));
    }
    for l in 0..cfg.layers {
        for p in ["wq", "wk", "wv", "wo"] {
            spec.push((format!("layer{l}/attn/{p}"), vec![h, h], Init::Normal));
        }
        spec.push((format!("layer{l}/ffn/w1"), vec![h, cfg.ffn_width], Init::Normal));
        spec.push((format!("layer{l}/ffn/b1"), vec![cfg.ffn_width], Init::Zero));
        spec.push((format!("layer{l}/ffn/w2"), vec![cfg.ffn_width, h], Init::Normal));
        spec.push((format!("layer{l}/ffn/b2"), vec![h], Init::Zero));
    }
    spec.push(("head/w1".into(), vec![h, cfg.action_head_hidden], Init::Normal));
    spec.push(("head/b1".into(), vec![cfg.action_head_hidden], Init::Zero));
    spec.push(("head/w2".into(), vec![cfg.action_head_hidden, cfg.action_dims], Init::Normal));
    spec.push(("head/b2".into(), vec![cfg.action_dims], Init::Zero));
    spec.push(("lm/w".into(), vec![h, cfg.vocab_size], Init::Normal));
    spec.push(("intent/table".into(), vec![cfg.intent_classes + 1, h], Init::Normal));
    spec.push(("intent/proj".into(), vec![h, h], Init::Normal));
    spec
}

/// Fresh backbone parameters. The unconditional intent row (the table's last
/// row) starts at zero so conditioning on it is the identity at step 0.
pub fn init_params(cfg: &BackboneConfig, seed: u64) -> ParamSet {
    let mut params = ParamSet::new();
    for (name, shape, init) in param_specs(cfg) {
        let values = match init {
            Init::Normal => init_normal(seed, &name, &shape, 0.02),
            Init::Zero => init_value(&shape, 0.0),
        };
        params.insert(&name, &shape, values);
    }
    let h = cfg.hidden;
    let table = params.by_name_mut("intent/table");
    let start = cfg.intent_classes * h;
    table[start..start + h].fill(0.0);
    params
}

/// Check that a loaded parameter set matches this config's names and shapes.
pub fn validate_params(cfg: &BackboneConfig, params: &ParamSet) -> Result<()> {
    for (name, shape, _) in param_specs(cfg) {
        match params.position(&name) {
            None => return Err(ModelError::BadInput(format!("checkpoint missing tensor {name:?}"))),
            Some(i) if params.shape(i) != shape => {
                return Err(ModelError::BadInput(format!(
                    "tensor {name:?} has shape {:?}, config wants {shape:?}",
                    params.shape(i)
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

pub fn normalize_actions(values: &[f64]) -> Vec<f64> {
    values.iter().enumerate().map(|(i, v)| v / ACTION_SCALES[i % ACTION_DIMS]).collect()
}

pub fn denormalize_actions(values: &[f64]) -> Vec<f64> {
    values.iter().enumerate().map(|(i, v)| v * ACTION_SCALES[i % ACTION_DIMS]).collect()
}

/// Sinusoidal embedding of the flow time, length `hidden`.
pub fn time_embedding(hidden: usize, t: f64) -> Vec<f64> {
    let half = hidden / 2;
    let mut out = vec![0.0; hidden];
    for j in 0..half {
        let freq = 1000.0 * (10000.0f64).powf(-(j as f64) / half as f64);
        out[2 * j] = (t * freq).sin();
        out[2 * j + 1] = (t * freq).cos();
    }
    out
}

/// Raw per-frame inputs in model form (vision grid features, ego-relative
/// history, token ids for one QA pair).
#[derive(Debug, Clone)]
pub struct FrameInputs {
    pub vision: Vec<f64>,
    pub n_vision: usize,
    pub ego: Vec<f64>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

impl FrameInputs {
    pub fn from_frame(frame: &Frame, qa: &QaPair, grid: &GridConfig) -> Self {
        FrameInputs {
            vision: encode_scene_tokens(frame, grid),
            n_vision: grid.n_tokens(),
            ego: ego_history_relative(frame),
            question: qa.question.clone(),
            answer: qa.answer.clone(),
        }
    }
}

/// Intent source for the action head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Unconditional,
    Class(usize),
}

/// Noisy action input for one forward pass: a normalized L_f x 6 sample on
/// the tape plus its flow time.
#[derive(Debug, Clone, Copy)]
pub struct ActionIo {
    pub x_t: TensorId,
    pub t: f64,
}

pub struct Assembled {
    pub layout: SequenceLayout,
    pub embedded: TensorId,
    pub mask: Rc<Vec<bool>>,
}

/// One tape-scoped view of the model: all graph-building entry points.
pub struct ModelCtx<'a> {
    pub tape: &'a Tape,
    pub bound: &'a Bound,
    pub cfg: &'a BackboneConfig,
}

impl<'a> ModelCtx<'a> {
    pub fn new(tape: &'a Tape, bound: &'a Bound, cfg: &'a BackboneConfig) -> Self {
        ModelCtx { tape, bound, cfg }
    }

    fn p(&self, name: &str) -> TensorId {
        self.bound.get(name)
    }

    fn linear(&self, x: TensorId, w: &str, b: Option<&str>) -> Result<TensorId> {
        let y = self.tape.matmul(x, self.p(w))?;
        Ok(match b {
            Some(b) => self.tape.add_broadcast(y, self.p(b))?,
            None => y,
        })
    }

    fn ego_encoder(&self, name: &str, input: Vec<f64>) -> Result<TensorId> {
        let x = self.tape.constant(&[1, 2 * HISTORY_LEN], input);
        let h = self.linear(x, &format!("ego/{name}/w1"), Some(&format!("ego/{name}/b1")))?;
        let h = self.tape.silu(h)?;
        self.linear(h, &format!("ego/{name}/w2"), Some(&format!("ego/{name}/b2")))
    }

    /// One State token: the sum of the three channel encoders' outputs.
    fn state_token(&self, ego: &[f64]) -> Result<TensorId> {
        assert_eq!(ego.len(), HISTORY_LEN * ACTION_DIMS, "ego history must be 16 x 6");
        let channel = |off: usize| -> Vec<f64> {
            (0..HISTORY_LEN).flat_map(|k| [ego[k * 6 + off], ego[k * 6 + off + 1]]).collect()
        };
        let p = self.ego_encoder("pos", channel(0))?;
        let v = self.ego_encoder("vel", channel(2))?;
        let a = self.ego_encoder("acc", channel(4))?;
        Ok(self.tape.add(self.tape.add(p, v)?, a)?)
    }

    /// Embed all spans in mode order. `memory` is an already-embedded
    /// N x hidden block (the streaming read output); `action` is required
    /// exactly when the mode has an Action span.
    pub fn assemble(
        &self,
        mode: Mode,
        inputs: &FrameInputs,
        memory: Option<TensorId>,
        action: Option<&ActionIo>,
    ) -> Result<Assembled> {
        if mode.has_action() && action.is_none() {
            return Err(ModelError::BadInput(format!("{} needs an action input", mode.name())));
        }
        let mem_len = memory.map_or(0, |m| self.tape.shape(m)[0]);
        let lens = SpanLengths {
            memory: mem_len,
            vision: inputs.n_vision,
            state: 1,
            question: if mode.has_language() { inputs.question.len() } else { 0 },
            answer: if mode.has_language() { inputs.answer.len() } else { 0 },
            action: if mode.has_action() { self.cfg.l_f } else { 0 },
        };
        let layout = SequenceLayout::build(mode, &lens)?;

        let token_table = self.p("embed/token");
        let mut parts: Vec<TensorId> = Vec::new();
        for &role in mode.span_order() {
            match role {
                TokenRole::Memory => {
                    if let Some(m) = memory {
                        parts.push(m);
                    }
                }
                TokenRole::Vision => {
                    let v = self.tape.constant(&[inputs.n_vision, D_IN], inputs.vision.clone());
                    parts.push(self.linear(v, "vision/w", Some("vision/b"))?);
                }
                TokenRole::State => parts.push(self.state_token(&inputs.ego)?),
                TokenRole::Question => {
                    if !inputs.question.is_empty() {
                        parts.push(self.tape.embed_lookup(token_table, &inputs.question)?);
                    }
                }
                TokenRole::Answer => {
                    if mode.has_language() && !inputs.answer.is_empty() {
                        parts.push(self.tape.embed_lookup(token_table, &inputs.answer)?);
                    }
                }
                TokenRole::Action => {
                    let io = action.expect("checked above");
                    let lifted = self.linear(io.x_t, "action/lift/w", Some("action/lift/b"))?;
                    let te = self
                        .tape
                        .constant(&[self.cfg.hidden], time_embedding(self.cfg.hidden, io.t));
                    parts.push(self.tape.add_broadcast(lifted, te)?);
                }
            }
        }
        let embedded = self.tape.concat(&parts, 0)?;
        let mask = Rc::new(build_mask(&layout));
        Ok(Assembled { layout, embedded, mask })
    }

    /// Shared self-attention + FFN stack; returns the residual stream before
    /// any output normalization.
    pub fn backbone(&self, asm: &Assembled) -> Result<TensorId> {
        let cfg = self.cfg;
        let dh = cfg.head_dim();
        let positions = asm.layout.position_ids();
        let mut x = asm.embedded;
        for l in 0..cfg.layers {
            let ln = self.tape.rms_norm_last(x, RMS_EPS)?;
            let q = self.tape.rope(self.linear(ln, &format!("layer{l}/attn/wq"), None)?, &positions, cfg.rope_base)?;
            let k = self.tape.rope(self.linear(ln, &format!("layer{l}/attn/wk"), None)?, &positions, cfg.rope_base)?;
            let v = self.linear(ln, &format!("layer{l}/attn/wv"), None)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = self.tape.slice(q, 1, h * dh, dh)?;
                let kh = self.tape.slice(k, 1, h * dh, dh)?;
                let vh = self.tape.slice(v, 1, h * dh, dh)?;
                let scores = self.tape.scale(
                    self.tape.matmul(qh, self.tape.transpose(kh)?)?,
                    1.0 / (dh as f64).sqrt(),
                )?;
                let masked = self.tape.masked_fill(scores, Rc::clone(&asm.mask), -1e30)?;
                let attn = self.tape.softmax_last(masked)?;
                heads.push(self.tape.matmul(attn, vh)?);
            }
            let merged = self.tape.concat(&heads, 1)?;
            x = self.tape.add(x, self.linear(merged, &format!("layer{l}/attn/wo"), None)?)?;

            let ln2 = self.tape.rms_norm_last(x, RMS_EPS)?;
            let f = self.linear(ln2, &format!("layer{l}/ffn/w1"), Some(&format!("layer{l}/ffn/b1")))?;
            let f = self.tape.silu(f)?;
            let f = self.linear(f, &format!("layer{l}/ffn/w2"), Some(&format!("layer{l}/ffn/b2")))?;
            x = self.tape.add(x, f)?;
            if self.tape.has_non_finite(x) {
                return Err(ModelError::NonFinite { layer: l });
            }
        }
        Ok(x)
    }

    pub fn forward(
        &self,
        mode: Mode,
        inputs: &FrameInputs,
        memory: Option<TensorId>,
        action: Option<&ActionIo>,
    ) -> Result<(TensorId, SequenceLayout)> {
        let asm = self.assemble(mode, inputs, memory, action)?;
        let hidden = self.backbone(&asm)?;
        Ok((hidden, asm.layout))
    }

    /// Language logits for `len` rows starting at `start` (normalized read).
    pub fn lm_logits(&self, hidden: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let rows = self.tape.slice(hidden, 0, start, len)?;
        let rows = self.tape.rms_norm_last(rows, RMS_EPS)?;
        Ok(self.tape.matmul(rows, self.p("lm/w"))?)
    }

    /// Mean negative log-likelihood over the answer span, each token
    /// predicted from the hidden state one position earlier.
    pub fn ar_loss(&self, hidden: TensorId, layout: &SequenceLayout, answer: &[usize]) -> Result<TensorId> {
        let span = layout.span(TokenRole::Answer);
        if span.is_empty() || answer.is_empty() {
            return Err(ModelError::BadInput("ar_loss needs a non-empty answer span".into()));
        }
        assert_eq!(span.len(), answer.len(), "answer targets must match the span");
        let logits = self.lm_logits(hidden, span.start - 1, span.len())?;
        Ok(self.tape.cross_entropy(logits, answer)?)
    }

    /// Projected intent row added to the action head input; the table's last
    /// row is the learned unconditional symbol.
    pub fn intent_vector(&self, cond: Conditioning) -> Result<TensorId> {
        let idx = match cond {
            Conditioning::Unconditional => self.cfg.intent_classes,
            Conditioning::Class(c) => {
                if c >= self.cfg.intent_classes {
                    return Err(ModelError::BadInput(format!(
                        "intent class {c} out of range (have {})",
                        self.cfg.intent_classes
                    )));
                }
                c
            }
        };
        let row = self.tape.slice(self.p("intent/table"), 0, idx, 1)?;
        let proj = self.tape.matmul(row, self.p("intent/proj"))?;
        Ok(self.tape.reshape(proj, &[self.cfg.hidden])?)
    }

    /// Velocity field at the action positions: 2-layer silu MLP over the
    /// normalized hidden state plus time and intent embeddings.
    pub fn action_head(
        &self,
        hidden: TensorId,
        layout: &SequenceLayout,
        t: f64,
        cond: Conditioning,
    ) -> Result<TensorId> {
        let span = layout.span(TokenRole::Action);
        if span.is_empty() {
            return Err(ModelError::BadInput("action head needs an Action span".into()));
        }
        let rows = self.tape.slice(hidden, 0, span.start, span.len())?;
        let rows = self.tape.rms_norm_last(rows, RMS_EPS)?;
        let te = self.tape.constant(&[self.cfg.hidden], time_embedding(self.cfg.hidden, t));
        let x = self.tape.add_broadcast(rows, te)?;
        let x = self.tape.add_broadcast(x, self.intent_vector(cond)?)?;
        let h = self.tape.silu(self.linear(x, "head/w1", Some("head/b1"))?)?;
        Ok(self.linear(h, "head/w2", Some("head/b2"))?)
    }

    /// Component-weighted velocity-matching loss (mean over all elements).
    pub fn fm_loss(&self, v_pred: TensorId, target: TensorId) -> Result<TensorId> {
        let se = self.tape.squared_error(v_pred, target)?;
        let w = self.tape.constant(&[ACTION_DIMS], FM_WEIGHTS.to_vec());
        Ok(self.tape.mean(self.tape.mul_broadcast(se, w)?)?)
    }

    /// Greedy next-token intent restricted to the vocabulary's class tokens,
    /// read where the first answer token would be predicted. Ties take the
    /// lowest class index.
    pub fn predict_intent(
        &self,
        hidden: TensorId,
        layout: &SequenceLayout,
        vocab: &IntentVocabulary,
    ) -> Result<usize> {
        if !layout.mode.has_language() {
            return Err(ModelError::BadInput(format!(
                "{} has no language path; supply ground-truth or trajectory-derived intent",
                layout.mode.name()
            )));
        }
        let q = layout.span(TokenRole::Question);
        let logits = self.lm_logits(hidden, q.end - 1, 1)?;
        let row = self.tape.data(logits);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..vocab.len() {
            let v = row[vocab.token_of_class(c)];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        Ok(best)
    }
}

/// Greedy answer decoding in vqa_only mode; each step rebuilds the sequence
/// with the grown answer span (no KV reuse). Stops at `<eos>` or `max_len`.
pub fn decode_answer(
    params: &ParamSet,
    cfg: &BackboneConfig,
    inputs: &FrameInputs,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut answer: Vec<usize> = Vec::new();
    while answer.len() < max_len {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let ctx = ModelCtx::new(&tape, &bound, cfg);
        let mut step_inputs = inputs.clone();
        step_inputs.answer = answer.clone();
        let (hidden, layout) = ctx.forward(Mode::VqaOnly, &step_inputs, None, None)?;
        let logits = ctx.lm_logits(hidden, layout.len() - 1, 1)?;
        let row = tape.data(logits);
        let next = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        answer.push(next);
        if next == crate::scenario::vocab::EOS {
            break;
        }
    }
    Ok(answer)
}
