//! Token roles, span ordering per mode, and the attention mask.
//!
//! A frame's sequence is a concatenation of contiguous role spans whose order
//! depends on the decoding mode. The mask is causal over non-Action tokens
//! while the Action block is mutually bidirectional and blind to anything at
//! or after its own start. Position ids are plain sequence indices, so
//! truncating a sequence after the Action span leaves earlier positions'
//! visibility sets untouched.

use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    Memory,
    Vision,
    State,
    Question,
    Answer,
    Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    VqaFirst,
    VqaOnly,
    ActionFirst,
    ActionOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::VqaFirst, Mode::VqaOnly, Mode::ActionFirst, Mode::ActionOnly];

    pub fn span_order(self) -> &'static [TokenRole] {
        use TokenRole::*;
        match self {
            Mode::VqaFirst => &[Memory, Vision, State, Question, Answer, Action],
            Mode::VqaOnly => &[Memory, Vision, State, Question, Answer],
            Mode::ActionFirst => &[Memory, Vision, State, Action, Question, Answer],
            Mode::ActionOnly => &[Memory, Vision, State, Action],
        }
    }

    pub fn has_action(self) -> bool {
        !matches!(self, Mode::VqaOnly)
    }

    pub fn has_language(self) -> bool {
        !matches!(self, Mode::ActionOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::VqaFirst => "vqa_first",
            Mode::VqaOnly => "vqa_only",
            Mode::ActionFirst => "action_first",
            Mode::ActionOnly => "action_only",
        }
    }
}

impl FromStr for Mode {
    type Err = LayoutError;

    fn from_str(s: &str) -> Result<Self, LayoutError> {
        match s {
            "vqa_first" => Ok(Mode::VqaFirst),
            "vqa_only" => Ok(Mode::VqaOnly),
            "action_first" => Ok(Mode::ActionFirst),
            "action_only" => Ok(Mode::ActionOnly),
            other => Err(LayoutError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("unknown mode {0:?} (expected vqa_first, vqa_only, action_first, or action_only)")]
    UnknownMode(String),
    #[error("{mode} requires a non-empty {role:?} span")]
    MissingSpan { mode: &'static str, role: TokenRole },
    #[error("{mode} does not take a {role:?} span, got {len} tokens")]
    ForbiddenSpan { mode: &'static str, role: TokenRole, len: usize },
}

/// Token counts per role for one frame sequence. Roles a mode excludes must
/// be zero; Memory and Answer may be empty in any mode.
#[derive(Debug, Clone, Copy, Default)]
pub struct SpanLengths {
    pub memory: usize,
    pub vision: usize,
    pub state: usize,
    pub question: usize,
    pub answer: usize,
    pub action: usize,
}

impl SpanLengths {
    fn get(&self, role: TokenRole) -> usize {
        match role {
            TokenRole::Memory => self.memory,
            TokenRole::Vision => self.vision,
            TokenRole::State => self.state,
            TokenRole::Question => self.question,
            TokenRole::Answer => self.answer,
            TokenRole::Action => self.action,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceLayout {
    pub mode: Mode,
    pub roles: Vec<TokenRole>,
    spans: Vec<(TokenRole, Range<usize>)>,
}

impl SequenceLayout {
    pub fn build(mode: Mode, lens: &SpanLengths) -> Result<SequenceLayout, LayoutError> {
        use TokenRole::*;
        let order = mode.span_order();
        for role in [Vision, State] {
            if lens.get(role) == 0 {
                return Err(LayoutError::MissingSpan { mode: mode.name(), role });
            }
        }
        if mode.has_language() && lens.question == 0 {
            return Err(LayoutError::MissingSpan { mode: mode.name(), role: Question });
        }
        if mode.has_action() && lens.action == 0 {
            return Err(LayoutError::MissingSpan { mode: mode.name(), role: Action });
        }
        for role in [Question, Answer, Action] {
            if !order.contains(&role) && lens.get(role) != 0 {
                return Err(LayoutError::ForbiddenSpan { mode: mode.name(), role, len: lens.get(role) });
            }
        }
        let mut roles = Vec::new();
        let mut spans = Vec::new();
        for &role in order {
            let len = lens.get(role);
            spans.push((role, roles.len()..roles.len() + len));
            roles.extend(std::iter::repeat(role).take(len));
        }
        Ok(SequenceLayout { mode, roles, spans })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn span(&self, role: TokenRole) -> Range<usize> {
        self.spans
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, range)| range.clone())
            .unwrap_or(0..0)
    }

    /// Plain sequence indices; rotary encoding consumes these directly.
    pub fn position_ids(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Row-major T x T visibility matrix (true = query row attends key column):
/// non-Action rows attend everything at their position or earlier; Action
/// rows attend all non-Action tokens before the Action span plus the whole
/// Action block.
pub fn build_mask(layout: &SequenceLayout) -> Vec<bool> {
    let t = layout.len();
    let act = layout.span(TokenRole::Action);
    let mut mask = vec![false; t * t];
    for q in 0..t {
        let row = &mut mask[q * t..(q + 1) * t];
        if layout.roles[q] == TokenRole::Action {
            for (k, slot) in row.iter_mut().enumerate() {
                *slot = k < act.start || layout.roles[k] == TokenRole::Action;
            }
        } else {
            for slot in row.iter_mut().take(q + 1) {
                *slot = true;
            }
        }
    }
    mask
}
