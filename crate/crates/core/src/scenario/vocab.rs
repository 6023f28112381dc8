//! Closed token vocabulary and QA templating.
//!
//! The word list is fixed and small so next-token prediction is meaningful
//! without a tokenizer: special symbols, question words, answer words, and
//! every intent class name from both intent vocabularies. The model's
//! embedding table may be larger; ids past the word list are simply unused.

use super::Frame;
use serde::{Deserialize, Serialize};

pub const EOS: usize = 0;
pub const QMARK: usize = 1;

pub const VOCAB: [&str; 34] = [
    "<eos>",
    "?",
    "intent",
    "speed",
    "nearest",
    "agent",
    "side",
    "front",
    "none",
    "slow",
    "fast",
    "left",
    "right",
    "straight",
    "accelerating",
    "cruising",
    "turning_right",
    "starting",
    "stopping",
    "avoiding_obstacle",
    "waiting",
    "turning_left",
    "decelerating",
    "following",
    "lane_change_right",
    "braking",
    "lane_change_left",
    "yielding",
    "u_turn",
    "reversing",
    "parking",
    "emergency_stop",
    "merging",
    "crossing",
];

pub fn token_id(word: &str) -> Option<usize> {
    VOCAB.iter().position(|&w| w == word)
}

pub fn word(id: usize) -> Option<&'static str> {
    VOCAB.get(id).copied()
}

/// Ordered intent class list; class index is the position in `names`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentVocabulary {
    names: Vec<String>,
}

impl IntentVocabulary {
    pub fn three_class() -> Self {
        IntentVocabulary { names: vec!["left".into(), "right".into(), "straight".into()] }
    }

    pub fn twenty_class() -> Self {
        IntentVocabulary { names: VOCAB[14..].iter().map(|s| s.to_string()).collect() }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn class_of_name(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Vocabulary token id carrying this class's name.
    pub fn token_of_class(&self, class: usize) -> usize {
        token_id(&self.names[class]).expect("intent names are vocabulary words")
    }

    pub fn class_of_token(&self, token: usize) -> Option<usize> {
        word(token).and_then(|w| self.class_of_name(w))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

fn ids(words: &[&str]) -> Vec<usize> {
    words.iter().map(|w| token_id(w).expect("templated word in vocabulary")).collect()
}

/// Template the scenario's QA set from scene attributes. The intent question
/// is always first; answers always end with `<eos>`.
pub fn build_qa(intent: &str, speed: f64, frame0: &Frame) -> Vec<QaPair> {
    let intent_tok = token_id(intent).expect("intent is a vocabulary word");
    let speed_word = if speed >= 6.0 { "fast" } else { "slow" };
    let side_word = nearest_agent_side(frame0);
    vec![
        QaPair { question: ids(&["intent", "?"]), answer: vec![intent_tok, EOS] },
        QaPair { question: ids(&["speed", "?"]), answer: vec![token_id(speed_word).unwrap(), EOS] },
        QaPair {
            question: ids(&["nearest", "agent", "side", "?"]),
            answer: vec![token_id(side_word).unwrap(), EOS],
        },
    ]
}

/// Side of the nearest agent in the first frame's ego coordinates: `front`
/// within the +-45 degree forward cone, otherwise by lateral sign; `none`
/// when the scene is empty. Ties resolve to the first agent in list order.
fn nearest_agent_side(frame: &Frame) -> &'static str {
    let inv = frame.ego_pose.inverse();
    let mut best: Option<([f64; 2], f64)> = None;
    for a in &frame.agents {
        let p = inv.apply(a.position);
        let d2 = p[0] * p[0] + p[1] * p[1];
        if best.map_or(true, |(_, bd)| d2 < bd) {
            best = Some((p, d2));
        }
    }
    match best {
        None => "none",
        Some(([x, y], _)) => {
            if x >= y.abs() {
                "front"
            } else if y > 0.0 {
                "left"
            } else {
                "right"
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, ActionTrajectory, Agent, ScenarioParams};
    use crate::se2::Pose2;

    fn frame_with_agents(agents: Vec<Agent>) -> Frame {
        Frame {
            timestamp: 0.0,
            ego_pose: Pose2::identity(),
            ego_history: vec![[0.0; 6]; crate::scenario::HISTORY_LEN],
            agents,
            gt_future: ActionTrajectory::zeros(),
        }
    }

    fn agent_at(x: f64, y: f64) -> Agent {
        Agent { position: [x, y], velocity: [0.0, 0.0], extent: [4.0, 2.0], class_id: 0 }
    }

    #[test]
    fn vocabulary_is_unique_and_fits_the_token_budget() {
        assert!(VOCAB.len() <= 64);
        for (i, w) in VOCAB.iter().enumerate() {
            assert_eq!(token_id(w), Some(i));
        }
        let mut sorted: Vec<&str> = VOCAB.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), VOCAB.len(), "duplicate vocabulary word");
    }

    #[test]
    fn intent_vocabularies_round_trip_through_tokens() {
        for vocab in [IntentVocabulary::three_class(), IntentVocabulary::twenty_class()] {
            for c in 0..vocab.len() {
                let tok = vocab.token_of_class(c);
                assert_eq!(vocab.class_of_token(tok), Some(c));
            }
        }
        assert_eq!(IntentVocabulary::three_class().len(), 3);
        assert_eq!(IntentVocabulary::twenty_class().len(), 20);
        // A non-intent word maps to no class.
        let v = IntentVocabulary::three_class();
        assert_eq!(v.class_of_token(token_id("fast").unwrap()), None);
    }

    #[test]
    fn qa_set_starts_with_the_intent_question() {
        let s = generate_scenario(1, "left", &ScenarioParams::desk()).unwrap();
        assert_eq!(s.qa_pairs[0].question, ids(&["intent", "?"]));
        assert_eq!(s.qa_pairs[0].answer, vec![token_id("left").unwrap(), EOS]);
        for qa in &s.qa_pairs {
            assert_eq!(*qa.answer.last().unwrap(), EOS);
            assert!(qa.answer.len() >= 2);
        }
    }

    #[test]
    fn nearest_agent_side_covers_all_cases() {
        assert_eq!(nearest_agent_side(&frame_with_agents(vec![])), "none");
        assert_eq!(nearest_agent_side(&frame_with_agents(vec![agent_at(5.0, 1.0)])), "front");
        assert_eq!(nearest_agent_side(&frame_with_agents(vec![agent_at(1.0, 5.0)])), "left");
        assert_eq!(nearest_agent_side(&frame_with_agents(vec![agent_at(1.0, -5.0)])), "right");
        // Nearest wins over farther agents on the other side.
        let f = frame_with_agents(vec![agent_at(0.0, 20.0), agent_at(0.0, -3.0)]);
        assert_eq!(nearest_agent_side(&f), "right");
    }
}
