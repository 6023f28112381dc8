//! Two-group expert routing over the shared backbone.
//!
//! Every token is routed by role to one expert group. Per layer, each
//! group owns its attention projections and FFN, while attention itself
//! runs over a union key/value pool: each position's K/V comes from its
//! own group's projections, and every query row attends over that shared
//! pool under the ordinary sequence mask. The action-side group uses fewer
//! query heads and a narrower FFN; head widths stay compatible because all
//! groups project K/V to the context group's per-head dimension.
//!
//! The fast generation path drops the Answer span entirely (vision and
//! question stay as conditioning prefix). Action rows never attend past
//! their own span start, so their states match the full sequence bit for
//! bit while the forward pass gets strictly shorter.

use crate::layout::{Mode, SequenceLayout, TokenRole};
use crate::model::{
    param_specs, ActionIo, Assembled, BackboneConfig, FrameInputs, Init, ModelCtx, ModelError,
};
use crate::tensor::{init_normal, init_value, ParamSet, TensorId};
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use thiserror::Error;

type Result<T> = std::result::Result<T, ModelError>;

const RMS_EPS: f64 = 1e-6;
const N_GROUPS: usize = 2;
pub const CONTEXT_GROUP: usize = 0;
pub const ACTION_GROUP: usize = 1;

/// Role-to-group assignment. Both presets keep vision and language in the
/// context group; they differ in where memory and state go.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Grouping {
    /// {Vision, Question, Answer} vs {Memory, State, Action}.
    ContextProprioAction,
    /// {Vision, Question, Answer, Memory, State} vs {Action}.
    ContextAction,
    /// Explicit role map for experiments; `None` leaves a role unrouted,
    /// which is an error if that role appears in a sequence.
    Custom { name: String, map: [Option<usize>; 6] },
}

impl Grouping {
    pub fn group_of(&self, role: TokenRole) -> Option<usize> {
        match self {
            Grouping::ContextProprioAction => Some(match role {
                TokenRole::Vision | TokenRole::Question | TokenRole::Answer => CONTEXT_GROUP,
                TokenRole::Memory | TokenRole::State | TokenRole::Action => ACTION_GROUP,
            }),
            Grouping::ContextAction => Some(match role {
                TokenRole::Action => ACTION_GROUP,
                _ => CONTEXT_GROUP,
            }),
            Grouping::Custom { map, .. } => map[role as usize],
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Grouping::ContextProprioAction => "context-proprio-action",
            Grouping::ContextAction => "context-action",
            Grouping::Custom { name, .. } => name,
        }
    }
}

impl std::str::FromStr for Grouping {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "context-proprio-action" => Ok(Grouping::ContextProprioAction),
            "context-action" => Ok(Grouping::ContextAction),
            other => Err(format!(
                "unknown grouping {other:?} (expected context-action or context-proprio-action)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotConfig {
    pub base: BackboneConfig,
    pub grouping: Grouping,
    /// Query heads in the action group; keys and values keep the context
    /// group's head count.
    pub action_heads: usize,
    /// FFN width of the action group.
    pub action_ffn: usize,
}

impl MotConfig {
    pub fn desk(grouping: Grouping) -> Self {
        MotConfig { base: BackboneConfig::desk(), grouping, action_heads: 2, action_ffn: 128 }
    }

    pub fn tiny(grouping: Grouping) -> Self {
        MotConfig { base: BackboneConfig::tiny(), grouping, action_heads: 1, action_ffn: 16 }
    }

    /// Same widths in both groups, for parameter-tying comparisons.
    pub fn tied(base: BackboneConfig, grouping: Grouping) -> Self {
        let action_heads = base.heads;
        let action_ffn = base.ffn_width;
        MotConfig { base, grouping, action_heads, action_ffn }
    }

    fn query_width(&self, group: usize) -> usize {
        match group {
            CONTEXT_GROUP => self.base.hidden,
            _ => self.action_heads * self.base.head_dim(),
        }
    }

    fn query_heads(&self, group: usize) -> usize {
        match group {
            CONTEXT_GROUP => self.base.heads,
            _ => self.action_heads,
        }
    }

    fn ffn_width(&self, group: usize) -> usize {
        match group {
            CONTEXT_GROUP => self.base.ffn_width,
            _ => self.action_ffn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.action_heads == 0 || self.action_heads > self.base.heads {
            return Err(ModelError::BadInput(format!(
                "action group needs 1..={} query heads, got {}",
                self.base.heads, self.action_heads
            )));
        }
        if self.action_ffn == 0 {
            return Err(ModelError::BadInput("action ffn width must be positive".into()));
        }
        Ok(())
    }
}

fn group_layer_specs(cfg: &MotConfig) -> Vec<(String, Vec<usize>, Init)> {
    let h = cfg.base.hidden;
    let mut spec = Vec::new();
    for g in 0..N_GROUPS {
        let qw = cfg.query_width(g);
        let fw = cfg.ffn_width(g);
        for l in 0..cfg.base.layers {
            let p = |part: &str| format!("mot/g{g}/layer{l}/{part}");
            spec.push((p("attn/wq"), vec![h, qw], Init::Normal));
            spec.push((p("attn/wk"), vec![h, h], Init::Normal));
            spec.push((p("attn/wv"), vec![h, h], Init::Normal));
            spec.push((p("attn/wo"), vec![qw, h], Init::Normal));
            spec.push((p("ffn/w1"), vec![h, fw], Init::Normal));
            spec.push((p("ffn/b1"), vec![fw], Init::Zero));
            spec.push((p("ffn/w2"), vec![fw, h], Init::Normal));
            spec.push((p("ffn/b2"), vec![h], Init::Zero));
        }
    }
    spec
}

fn shared_specs(base: &BackboneConfig) -> Vec<(String, Vec<usize>, Init)> {
    param_specs(base).into_iter().filter(|(name, _, _)| !name.starts_with("layer")).collect()
}

fn insert_specs(params: &mut ParamSet, specs: &[(String, Vec<usize>, Init)], seed: u64) {
    for (name, shape, init) in specs {
        let values = match init {
            Init::Normal => init_normal(seed, name, shape, 0.02),
            Init::Zero => init_value(shape, 0.0),
        };
        params.insert(name, shape, values);
    }
}

fn zero_unconditional_row(params: &mut ParamSet, base: &BackboneConfig) {
    let h = base.hidden;
    let start = base.intent_classes * h;
    params.by_name_mut("intent/table")[start..start + h].fill(0.0);
}

/// Fresh routed-model parameters: shared embeddings and heads plus
/// per-group layer stacks.
pub fn init_mot_params(cfg: &MotConfig, seed: u64) -> ParamSet {
    let mut params = ParamSet::new();
    insert_specs(&mut params, &shared_specs(&cfg.base), seed);
    insert_specs(&mut params, &group_layer_specs(cfg), seed);
    zero_unconditional_row(&mut params, &cfg.base);
    params
}

/// Warm start from a dense checkpoint: shared parameters and the context
/// group are cloned; the action group is freshly initialized at its own
/// (usually narrower) width.
pub fn from_dense(dense: &ParamSet, cfg: &MotConfig, seed: u64) -> ParamSet {
    let mut params = ParamSet::new();
    for (name, shape, _) in shared_specs(&cfg.base) {
        params.insert(&name, &shape, dense.by_name(&name).to_vec());
    }
    for (name, shape, init) in group_layer_specs(cfg) {
        let values = if let Some(rest) = name.strip_prefix("mot/g0/") {
            dense.by_name(rest).to_vec()
        } else {
            match init {
                Init::Normal => init_normal(seed, &name, &shape, 0.02),
                Init::Zero => init_value(&shape, 0.0),
            }
        };
        params.insert(&name, &shape, values);
    }
    params
}

/// Both groups cloned from the dense checkpoint at full width; the routed
/// forward must then reproduce the dense forward.
pub fn tied_from_dense(
    dense: &ParamSet,
    base: &BackboneConfig,
    grouping: Grouping,
) -> (MotConfig, ParamSet) {
    let cfg = MotConfig::tied(base.clone(), grouping);
    let mut params = ParamSet::new();
    for (name, shape, _) in shared_specs(base) {
        params.insert(&name, &shape, dense.by_name(&name).to_vec());
    }
    for (name, shape, _) in group_layer_specs(&cfg) {
        let dense_name = name.splitn(3, '/').nth(2).expect("mot/gN/<rest>");
        params.insert(&name, &shape, dense.by_name(dense_name).to_vec());
    }
    (cfg, params)
}

/// Per-position group ids; errors if the grouping leaves any present role
/// unrouted or routes one outside the two implemented groups.
fn route(layout: &SequenceLayout, grouping: &Grouping) -> Result<Vec<usize>> {
    layout
        .roles
        .iter()
        .map(|&role| match grouping.group_of(role) {
            Some(g) if g < N_GROUPS => Ok(g),
            Some(g) => Err(ModelError::BadInput(format!(
                "grouping {:?} routes {role:?} to group {g}, but only {N_GROUPS} groups exist",
                grouping.name()
            ))),
            None => Err(ModelError::BadInput(format!(
                "grouping {:?} does not route role {role:?}",
                grouping.name()
            ))),
        })
        .collect()
}

/// Row selector: true for positions routed to `group`, repeated across
/// `width` columns for masked_fill on a [T, width] tensor.
fn row_mask(groups: &[usize], group: usize, width: usize) -> Rc<Vec<bool>> {
    Rc::new(groups.iter().flat_map(|&g| std::iter::repeat_n(g == group, width)).collect())
}

/// Keep only the rows of `group`, zero the rest, then sum over groups to
/// stitch per-group computations back into sequence order.
fn select_rows(
    ctx: &ModelCtx,
    parts: &[(usize, TensorId)],
    groups: &[usize],
    width: usize,
) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    for &(g, tensor) in parts {
        let kept = ctx.tape.masked_fill(tensor, row_mask(groups, g, width), 0.0)?;
        acc = Some(match acc {
            Some(a) => ctx.tape.add(a, kept)?,
            None => kept,
        });
    }
    Ok(acc.expect("at least one group"))
}

/// Routed backbone over an assembled sequence. `block_cross_group` is a
/// diagnostic that hides other groups' keys from every query row,
/// demonstrating (by contrast) that the unmodified model moves information
/// across groups through the shared pool.
pub fn mot_backbone(
    ctx: &ModelCtx,
    cfg: &MotConfig,
    asm: &Assembled,
    block_cross_group: bool,
) -> Result<TensorId> {
    cfg.validate()?;
    let tape = ctx.tape;
    let base = &cfg.base;
    let dh = base.head_dim();
    let h = base.hidden;
    let t_len = asm.layout.len();
    let groups = route(&asm.layout, &cfg.grouping)?;
    let positions = asm.layout.position_ids();

    // Per-query-group sequence masks, with cross-group keys optionally hidden.
    let masks: Vec<Rc<Vec<bool>>> = (0..N_GROUPS)
        .map(|g| {
            if !block_cross_group {
                return Rc::clone(&asm.mask);
            }
            let mut m = asm.mask.as_ref().clone();
            for q in 0..t_len {
                for k in 0..t_len {
                    if groups[k] != g {
                        m[q * t_len + k] = false;
                    }
                }
            }
            Rc::new(m)
        })
        .collect();

    let mut x = asm.embedded;
    for l in 0..base.layers {
        let ln = tape.rms_norm_last(x, RMS_EPS)?;
        // Union key/value pool: each position projected by its own group.
        let mut k_parts = Vec::new();
        let mut v_parts = Vec::new();
        for g in 0..N_GROUPS {
            let wk = ctx.bound.get(&format!("mot/g{g}/layer{l}/attn/wk"));
            let wv = ctx.bound.get(&format!("mot/g{g}/layer{l}/attn/wv"));
            k_parts.push((g, tape.rope(tape.matmul(ln, wk)?, &positions, base.rope_base)?));
            v_parts.push((g, tape.matmul(ln, wv)?));
        }
        let k_pool = select_rows(ctx, &k_parts, &groups, h)?;
        let v_pool = select_rows(ctx, &v_parts, &groups, h)?;

        let mut attn_parts = Vec::new();
        for g in 0..N_GROUPS {
            let wq = ctx.bound.get(&format!("mot/g{g}/layer{l}/attn/wq"));
            let wo = ctx.bound.get(&format!("mot/g{g}/layer{l}/attn/wo"));
            // A narrow query holds only the first heads of the pool's
            // layout, so it rotates on the pool's frequency schedule.
            let q = tape.rope_scheduled(
                tape.matmul(ln, wq)?,
                &positions,
                base.rope_base,
                h / 2,
            )?;
            let mut heads = Vec::with_capacity(cfg.query_heads(g));
            for hh in 0..cfg.query_heads(g) {
                let qh = tape.slice(q, 1, hh * dh, dh)?;
                let kh = tape.slice(k_pool, 1, hh * dh, dh)?;
                let vh = tape.slice(v_pool, 1, hh * dh, dh)?;
                let scores =
                    tape.scale(tape.matmul(qh, tape.transpose(kh)?)?, 1.0 / (dh as f64).sqrt())?;
                let masked = tape.masked_fill(scores, Rc::clone(&masks[g]), -1e30)?;
                let attn = tape.softmax_last(masked)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat(&heads, 1)?;
            attn_parts.push((g, tape.matmul(merged, wo)?));
        }
        x = tape.add(x, select_rows(ctx, &attn_parts, &groups, h)?)?;

        let ln2 = tape.rms_norm_last(x, RMS_EPS)?;
        let mut ffn_parts = Vec::new();
        for g in 0..N_GROUPS {
            let p = |part: &str| ctx.bound.get(&format!("mot/g{g}/layer{l}/ffn/{part}"));
            let f = tape.add_broadcast(tape.matmul(ln2, p("w1"))?, p("b1"))?;
            let f = tape.silu(f)?;
            let f = tape.add_broadcast(tape.matmul(f, p("w2"))?, p("b2"))?;
            ffn_parts.push((g, f));
        }
        x = tape.add(x, select_rows(ctx, &ffn_parts, &groups, h)?)?;
        if tape.has_non_finite(x) {
            return Err(ModelError::NonFinite { layer: l });
        }
    }
    Ok(x)
}

/// Assemble-and-run convenience mirroring `ModelCtx::forward`.
pub fn mot_forward(
    ctx: &ModelCtx,
    cfg: &MotConfig,
    mode: Mode,
    inputs: &FrameInputs,
    memory: Option<TensorId>,
    action: Option<&ActionIo>,
    block_cross_group: bool,
) -> Result<(TensorId, SequenceLayout)> {
    let asm = ctx.assemble(mode, inputs, memory, action)?;
    let hidden = mot_backbone(ctx, cfg, &asm, block_cross_group)?;
    Ok((hidden, asm.layout))
}

/// Inputs for the reduced generation pass: the Answer span is removed,
/// vision and question stay as conditioning prefix.
pub fn fast_inputs(inputs: &FrameInputs) -> FrameInputs {
    let mut out = inputs.clone();
    out.answer.clear();
    out
}

/// Wall-clock comparison of the reduced generation pass against the full
/// sequence, report only.
#[derive(Debug, Clone, Serialize)]
pub struct FastModeBenchmark {
    pub fast_secs: f64,
    pub slow_secs: f64,
    pub fast_len: usize,
    pub slow_len: usize,
    pub answer_len: usize,
    pub reps: usize,
}

pub fn benchmark_fast_mode(
    params: &ParamSet,
    cfg: &MotConfig,
    inputs: &FrameInputs,
    reps: usize,
) -> Result<FastModeBenchmark> {
    use crate::scenario::ACTION_DIMS;
    use crate::tensor::Tape;
    let reduced = fast_inputs(inputs);
    let mut lens = (0usize, 0usize);
    let mut time_of = |frame_inputs: &FrameInputs, slot: usize| -> Result<f64> {
        let started = std::time::Instant::now();
        for rep in 0..reps {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &cfg.base);
            let x_t = tape.constant(
                &[cfg.base.l_f, ACTION_DIMS],
                vec![0.05; cfg.base.l_f * ACTION_DIMS],
            );
            let io = ActionIo { x_t, t: 0.5 };
            let (_, layout) =
                mot_forward(&ctx, cfg, Mode::ActionFirst, frame_inputs, None, Some(&io), false)?;
            if rep == 0 {
                if slot == 0 {
                    lens.0 = layout.len();
                } else {
                    lens.1 = layout.len();
                }
            }
        }
        Ok(started.elapsed().as_secs_f64())
    };
    let fast_secs = time_of(&reduced, 0)?;
    let slow_secs = time_of(inputs, 1)?;
    Ok(FastModeBenchmark {
        fast_secs,
        slow_secs,
        fast_len: lens.0,
        slow_len: lens.1,
        answer_len: inputs.answer.len(),
        reps,
    })
}

/// Extension slots for future expert groups: bindings are recorded and
/// checked for role collisions but the desk model instantiates none.
#[derive(Debug, Default)]
pub struct ExpertRegistry {
    bindings: Vec<ExpertBinding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBinding {
    pub name: String,
    pub roles: Vec<TokenRole>,
}

#[derive(Debug, Error, PartialEq)]
pub enum RegistryError {
    #[error("role {role:?} already bound to expert {bound_to:?}")]
    RoleTaken { role: TokenRole, bound_to: String },
    #[error("binding {0:?} lists no roles")]
    Empty(String),
}

impl ExpertRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, binding: ExpertBinding) -> std::result::Result<(), RegistryError> {
        if binding.roles.is_empty() {
            return Err(RegistryError::Empty(binding.name));
        }
        for existing in &self.bindings {
            for &role in &binding.roles {
                if existing.roles.contains(&role) {
                    return Err(RegistryError::RoleTaken {
                        role,
                        bound_to: existing.name.clone(),
                    });
                }
            }
        }
        self.bindings.push(binding);
        Ok(())
    }

    pub fn bindings(&self) -> &[ExpertBinding] {
        &self.bindings
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Conditioning};
    use crate::rng;
    use crate::scenario::bev::GridConfig;
    use crate::scenario::{generate_scenario, ScenarioParams, ACTION_DIMS};
    use crate::tensor::Tape;

    fn test_inputs() -> FrameInputs {
        let s = generate_scenario(5, "left", &ScenarioParams::desk()).unwrap();
        FrameInputs::from_frame(&s.frames[4], &s.qa_pairs[0], &GridConfig::default())
    }

    fn noise(cfg: &BackboneConfig, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, "mot_test/noise");
        (0..cfg.l_f * ACTION_DIMS).map(|_| rng::normal(&mut r)).collect()
    }

    #[test]
    fn tied_parameters_reproduce_the_dense_forward_in_both_presets() {
        let base = BackboneConfig::tiny();
        let dense = init_params(&base, 41);
        let inputs = test_inputs();
        let dense_hidden = {
            let tape = Tape::new();
            let bound = dense.bind_frozen(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &base);
            let x_t = tape.constant(&[base.l_f, ACTION_DIMS], noise(&base, 1));
            let (hidden, _) = ctx
                .forward(Mode::VqaFirst, &inputs, None, Some(&ActionIo { x_t, t: 0.4 }))
                .unwrap();
            tape.data(hidden)
        };
        for grouping in [Grouping::ContextProprioAction, Grouping::ContextAction] {
            let (cfg, params) = tied_from_dense(&dense, &base, grouping.clone());
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &base);
            let x_t = tape.constant(&[base.l_f, ACTION_DIMS], noise(&base, 1));
            let (hidden, _) =
                mot_forward(&ctx, &cfg, Mode::VqaFirst, &inputs, None, Some(&ActionIo { x_t, t: 0.4 }), false)
                    .unwrap();
            let routed = tape.data(hidden);
            let max = routed
                .iter()
                .zip(&dense_hidden)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max <= 1e-12, "{}: max abs diff {max}", grouping.name());
        }
    }

    #[test]
    fn action_group_ffn_is_invisible_to_same_layer_context_tokens() {
        let mut base = BackboneConfig::tiny();
        base.layers = 1;
        let inputs = test_inputs();
        let run = |params: &ParamSet, cfg: &MotConfig| {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &base);
            let x_t = tape.constant(&[base.l_f, ACTION_DIMS], noise(&base, 2));
            let (hidden, layout) =
                mot_forward(&ctx, cfg, Mode::VqaFirst, &inputs, None, Some(&ActionIo { x_t, t: 0.6 }), false)
                    .unwrap();
            (tape.data(hidden), layout)
        };
        let cfg = MotConfig::tiny(Grouping::ContextProprioAction);
        let cfg = MotConfig { base: base.clone(), ..cfg };
        let clean = init_mot_params(&cfg, 42);
        let mut poked = init_mot_params(&cfg, 42);
        poked.by_name_mut("mot/g1/layer0/ffn/w1")[3] += 0.5;
        let (a, layout) = run(&clean, &cfg);
        let (b, _) = run(&poked, &cfg);
        let h = base.hidden;
        for role in [TokenRole::Vision, TokenRole::Question, TokenRole::Answer] {
            for p in layout.span(role) {
                assert_eq!(
                    a[p * h..(p + 1) * h],
                    b[p * h..(p + 1) * h],
                    "{role:?} row {p} changed within the same layer"
                );
            }
        }
        // State row (action group) must change.
        let s = layout.span(TokenRole::State).start;
        assert_ne!(a[s * h..(s + 1) * h], b[s * h..(s + 1) * h]);
    }

    #[test]
    fn action_group_ffn_reaches_later_context_rows_through_shared_attention() {
        let base = BackboneConfig::tiny();
        let cfg = MotConfig::tiny(Grouping::ContextProprioAction);
        let inputs = test_inputs();
        let run = |params: &ParamSet| {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &base);
            let (hidden, layout) =
                mot_forward(&ctx, &cfg, Mode::VqaOnly, &inputs, None, None, false).unwrap();
            (tape.data(hidden), layout)
        };
        let clean = init_mot_params(&cfg, 43);
        let mut poked = init_mot_params(&cfg, 43);
        poked.by_name_mut("mot/g1/layer0/ffn/w1")[3] += 0.5;
        let (a, layout) = run(&clean);
        let (b, _) = run(&poked);
        // Question rows sit after the State row, so with two layers the
        // perturbation reaches them through layer-1 attention.
        let q = layout.span(TokenRole::Question);
        let h = base.hidden;
        assert_ne!(a[q.start * h..q.end * h], b[q.start * h..q.end * h]);
    }

    #[test]
    fn sequence_mask_still_holds_under_routing() {
        let base = BackboneConfig::tiny();
        let cfg = MotConfig::tiny(Grouping::ContextProprioAction);
        let params = init_mot_params(&cfg, 44);
        let inputs = test_inputs();
        let run = |noise_seed: u64| {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &base);
            let x_t = tape.constant(&[base.l_f, ACTION_DIMS], noise(&base, noise_seed));
            let (hidden, layout) =
                mot_forward(&ctx, &cfg, Mode::VqaFirst, &inputs, None, Some(&ActionIo { x_t, t: 0.7 }), false)
                    .unwrap();
            (tape.data(hidden), layout)
        };
        let (a, layout) = run(1);
        let (b, _) = run(2);
        let act_start = layout.span(TokenRole::Action).start;
        let h = base.hidden;
        for p in 0..act_start {
            assert_eq!(a[p * h..(p + 1) * h], b[p * h..(p + 1) * h], "position {p} leaked");
        }
    }

    #[test]
    fn blocking_cross_group_attention_changes_dependent_rows_only() {
        let base = BackboneConfig::tiny();
        let inputs = test_inputs();
        let run = |grouping: Grouping, block: bool| {
            let cfg = MotConfig::tiny(grouping);
            let params = init_mot_params(&cfg, 45);
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &base);
            let x_t = tape.constant(&[base.l_f, ACTION_DIMS], noise(&base, 3));
            let (hidden, layout) =
                mot_forward(&ctx, &cfg, Mode::VqaFirst, &inputs, None, Some(&ActionIo { x_t, t: 0.3 }), block)
                    .unwrap();
            (tape.data(hidden), layout)
        };
        // Proprio grouping: question rows read the State row across groups,
        // so hiding other groups' keys must change them.
        let (a, layout) = run(Grouping::ContextProprioAction, false);
        let (b, _) = run(Grouping::ContextProprioAction, true);
        let q = layout.span(TokenRole::Question);
        let h = base.hidden;
        assert_ne!(a[q.start * h..q.end * h], b[q.start * h..q.end * h]);
        // Context-action grouping: context rows never see the Action span
        // (it sits later in the sequence), so blocking leaves them intact.
        let (a, layout) = run(Grouping::ContextAction, false);
        let (b, _) = run(Grouping::ContextAction, true);
        let act = layout.span(TokenRole::Action);
        for p in 0..act.start {
            assert_eq!(a[p * h..(p + 1) * h], b[p * h..(p + 1) * h], "context row {p}");
        }
        assert_ne!(a[act.start * h..act.end * h], b[act.start * h..act.end * h]);
    }

    #[test]
    fn fast_pass_matches_full_action_first_bitwise_at_action_rows() {
        let base = BackboneConfig::tiny();
        let cfg = MotConfig::tiny(Grouping::ContextProprioAction);
        let params = init_mot_params(&cfg, 46);
        let mut inputs = test_inputs();
        inputs.answer = vec![3; 16];
        let eval = |frame_inputs: &FrameInputs| {
            let tape = Tape::new();
            let bound = params.bind_frozen(&tape);
            let ctx = ModelCtx::new(&tape, &bound, &base);
            let x_t = tape.constant(&[base.l_f, ACTION_DIMS], noise(&base, 6));
            let (hidden, layout) =
                mot_forward(&ctx, &cfg, Mode::ActionFirst, frame_inputs, None, Some(&ActionIo { x_t, t: 0.5 }), false)
                    .unwrap();
            (tape.data(hidden), layout)
        };
        let reduced = fast_inputs(&inputs);
        assert!(reduced.answer.is_empty() && !reduced.question.is_empty());
        let (fast, fast_layout) = eval(&reduced);
        let (slow, slow_layout) = eval(&inputs);
        assert!(fast_layout.len() < slow_layout.len());
        assert_eq!(
            fast_layout.span(TokenRole::Action),
            slow_layout.span(TokenRole::Action),
        );
        let h = base.hidden;
        let mut max = 0.0f64;
        for p in fast_layout.span(TokenRole::Action) {
            for i in 0..h {
                max = max.max((fast[p * h + i] - slow[p * h + i]).abs());
            }
        }
        assert_eq!(max, 0.0);
    }

    #[test]
    fn fast_mode_benchmark_reports_plausible_numbers() {
        let cfg = MotConfig::tiny(Grouping::ContextAction);
        let params = init_mot_params(&cfg, 47);
        let mut inputs = test_inputs();
        inputs.answer = vec![3; 16];
        let bench = benchmark_fast_mode(&params, &cfg, &inputs, 3).unwrap();
        assert!(bench.fast_secs > 0.0 && bench.slow_secs > 0.0);
        assert!(bench.fast_len < bench.slow_len);
        assert_eq!(bench.answer_len, 16);
    }

    #[test]
    fn unrouted_roles_are_rejected() {
        let base = BackboneConfig::tiny();
        let grouping = Grouping::Custom {
            name: "no-action".into(),
            map: [Some(0), Some(0), Some(0), Some(0), Some(0), None],
        };
        let cfg = MotConfig { base: base.clone(), grouping, action_heads: 1, action_ffn: 16 };
        let params = init_mot_params(&cfg, 48);
        let inputs = test_inputs();
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let ctx = ModelCtx::new(&tape, &bound, &base);
        let x_t = tape.constant(&[base.l_f, ACTION_DIMS], noise(&base, 7));
        let err =
            mot_forward(&ctx, &cfg, Mode::ActionOnly, &inputs, None, Some(&ActionIo { x_t, t: 0.5 }), false);
        assert!(matches!(err, Err(ModelError::BadInput(_))));
        // Language-only sequences never touch the unrouted Action role.
        assert!(mot_forward(&ctx, &cfg, Mode::VqaOnly, &inputs, None, None, false).is_ok());
    }

    #[test]
    fn every_routed_parameter_receives_gradient() {
        let base = BackboneConfig::tiny();
        let cfg = MotConfig::tiny(Grouping::ContextProprioAction);
        let params = init_mot_params(&cfg, 49);
        let inputs = test_inputs();
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let ctx = ModelCtx::new(&tape, &bound, &base);
        let x_t_data = noise(&base, 8);
        let x0: Vec<f64> = x_t_data.iter().map(|v| v * 0.5).collect();
        let x_t = tape.constant(&[base.l_f, ACTION_DIMS], x_t_data);
        let (hidden, layout) =
            mot_forward(&ctx, &cfg, Mode::VqaFirst, &inputs, None, Some(&ActionIo { x_t, t: 0.5 }), false)
                .unwrap();
        let ar = ctx.ar_loss(hidden, &layout, &inputs.answer).unwrap();
        let v = ctx.action_head(hidden, &layout, 0.5, Conditioning::Class(0)).unwrap();
        let target = tape.constant(&[base.l_f, ACTION_DIMS], x0);
        let fm = ctx.fm_loss(v, target).unwrap();
        let loss = tape.add(ar, fm).unwrap();
        let grads = tape.backward(loss).unwrap();
        for i in 0..params.len() {
            let g = grads.get_or_zeros(bound.id_at(i), params.values(i).len());
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "parameter {} got zero gradient", params.name(i));
        }
    }

    #[test]
    fn warm_start_clones_context_and_randomizes_action() {
        let base = BackboneConfig::tiny();
        let dense = init_params(&base, 50);
        let cfg = MotConfig::tiny(Grouping::ContextAction);
        let cfg = MotConfig { base: base.clone(), ..cfg };
        let params = from_dense(&dense, &cfg, 51);
        assert_eq!(params.by_name("mot/g0/layer0/attn/wq"), dense.by_name("layer0/attn/wq"));
        assert_eq!(params.by_name("mot/g0/layer1/ffn/w1"), dense.by_name("layer1/ffn/w1"));
        assert_eq!(params.by_name("embed/token"), dense.by_name("embed/token"));
        let action_wq = params.by_name("mot/g1/layer0/attn/wq");
        assert_eq!(action_wq.len(), base.hidden * cfg.action_heads * base.head_dim());
        assert_ne!(
            &action_wq[..base.hidden.min(action_wq.len())],
            &dense.by_name("layer0/attn/wq")[..base.hidden.min(action_wq.len())]
        );
        assert_eq!(
            params.by_name("mot/g1/layer0/ffn/w1").len(),
            base.hidden * cfg.action_ffn
        );
    }

    #[test]
    fn registry_accepts_disjoint_bindings_and_rejects_collisions() {
        let mut reg = ExpertRegistry::new();
        reg.register(ExpertBinding {
            name: "reasoning".into(),
            roles: vec![TokenRole::Question, TokenRole::Answer],
        })
        .unwrap();
        reg.register(ExpertBinding { name: "safety".into(), roles: vec![TokenRole::Action] })
            .unwrap();
        let err = reg
            .register(ExpertBinding { name: "dup".into(), roles: vec![TokenRole::Action] })
            .unwrap_err();
        assert_eq!(
            err,
            RegistryError::RoleTaken { role: TokenRole::Action, bound_to: "safety".into() }
        );
        assert!(matches!(
            reg.register(ExpertBinding { name: "empty".into(), roles: vec![] }),
            Err(RegistryError::Empty(_))
        ));
        assert_eq!(reg.bindings().len(), 2);
    }
}
