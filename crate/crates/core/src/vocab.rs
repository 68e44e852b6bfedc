//! Token vocabulary for the synthetic dialogue corpus.
//!
//! The vocabulary is laid out deterministically from the corpus configuration
//! so that a token id has the same meaning in every artifact produced under
//! that configuration. Ranges, in order:
//!
//! ```text
//! [ specials | class patterns | class labels | facts | fillers | speech ]
//! ```
//!
//! * specials — role markers and the two probe markers,
//! * class patterns — `pattern_len` contiguous ids per event class; the
//!   in-context evidence for the anchor's class,
//! * class labels — one id per class; the answer tokens for acoustic probes,
//! * facts — the pool of semantic fact tokens; answer tokens for semantic
//!   probes, one of which is embedded verbatim in the anchor turn,
//! * fillers — neutral conversation tokens, partitioned by topic,
//! * speech — anchor-turn carrier tokens that class patterns are mixed into.
//!
//! Patterns, labels, facts, fillers, and speech tokens are pairwise disjoint
//! by construction, which is what makes the leakage guarantees checkable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id. The model's embedding table is indexed by this.
pub type Token = u32;

/// Event class id, `0..classes`.
pub type ClassId = usize;

/// Padding token (bank files pad attention rows with zeros, not PAD; this
/// exists so checkpoints can reserve id 0).
pub const PAD: Token = 0;
/// Marks the start of a user turn.
pub const USER: Token = 1;
/// Marks the start of an assistant turn.
pub const ASSISTANT: Token = 2;
/// Marks an acoustic probe turn (asks for the anchor's event class).
pub const PROBE_ACOUSTIC: Token = 3;
/// Marks a semantic probe turn (asks for the fact stated in the anchor).
pub const PROBE_SEMANTIC: Token = 4;

const N_SPECIALS: u32 = 5;

/// Default event-class names, grouped into four families.
const DEFAULT_CLASS_NAMES: [(&str, &str); 10] = [
    ("rain", "weather_water"),
    ("thunderstorm", "weather_water"),
    ("sea_waves", "weather_water"),
    ("engine", "mechanical"),
    ("vacuum_cleaner", "mechanical"),
    ("car_horn", "mechanical"),
    ("dog", "animal_human"),
    ("crying_baby", "animal_human"),
    ("clock_tick", "domestic"),
    ("crackling_fire", "domestic"),
];

const FAMILIES: [&str; 4] = ["weather_water", "mechanical", "animal_human", "domestic"];

/// Default dialogue topics for filler turns.
pub const TOPIC_NAMES: [&str; 8] = [
    "errands",
    "cooking",
    "travel_plans",
    "gardening",
    "office_chatter",
    "music_practice",
    "sports",
    "weekend_plans",
];

/// Sizing knobs for the vocabulary; part of [`crate::corpus::CorpusConfig`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    /// Number of event classes (C). At least 4 so acoustic probes can draw
    /// three distinct distractor classes.
    pub classes: usize,
    /// Tokens per class pattern.
    pub pattern_len: usize,
    /// Size of the semantic-fact pool. At least 4.
    pub n_facts: usize,
    /// Number of filler topics.
    pub topics: usize,
    /// Filler tokens reserved per topic.
    pub fillers_per_topic: usize,
    /// Anchor-turn carrier tokens.
    pub speech_tokens: usize,
}

impl Default for VocabLayout {
    fn default() -> Self {
        VocabLayout {
            classes: 10,
            pattern_len: 4,
            n_facts: 16,
            topics: TOPIC_NAMES.len(),
            fillers_per_topic: 30,
            speech_tokens: 32,
        }
    }
}

/// One event class: its name, family, evidence pattern, and label token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventClass {
    pub id: ClassId,
    pub name: String,
    pub family: String,
    /// The contiguous pattern tokens mixed into anchor slots.
    pub pattern: Vec<Token>,
    /// The answer token naming this class in probe options.
    pub label: Token,
}

/// What a token is, for scans and error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    ClassPattern(ClassId),
    ClassLabel(ClassId),
    Fact(usize),
    Filler { topic: usize, index: usize },
    Speech(usize),
    OutOfRange,
}

/// Deterministic vocabulary derived from a [`VocabLayout`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    layout: VocabLayout,
    pattern_base: u32,
    label_base: u32,
    fact_base: u32,
    filler_base: u32,
    speech_base: u32,
    size: u32,
}

impl Vocab {
    /// Builds the vocabulary for `layout`, validating its minimum sizes.
    pub fn new(layout: VocabLayout) -> Result<Self> {
        if layout.classes < 4 {
            return Err(Error::config(format!(
                "need at least 4 classes for 3-distractor probes, got {}",
                layout.classes
            )));
        }
        if layout.n_facts < 4 {
            return Err(Error::config(format!(
                "need at least 4 facts for 3-distractor probes, got {}",
                layout.n_facts
            )));
        }
        if layout.pattern_len == 0 || layout.speech_tokens == 0 {
            return Err(Error::config(
                "pattern_len and speech_tokens must be nonzero".to_string(),
            ));
        }
        if layout.topics == 0 || layout.fillers_per_topic == 0 {
            return Err(Error::config(
                "topics and fillers_per_topic must be nonzero".to_string(),
            ));
        }
        let pattern_base = N_SPECIALS;
        let label_base = pattern_base + (layout.classes * layout.pattern_len) as u32;
        let fact_base = label_base + layout.classes as u32;
        let filler_base = fact_base + layout.n_facts as u32;
        let speech_base = filler_base + (layout.topics * layout.fillers_per_topic) as u32;
        let size = speech_base + layout.speech_tokens as u32;
        Ok(Vocab {
            layout,
            pattern_base,
            label_base,
            fact_base,
            filler_base,
            speech_base,
            size,
        })
    }

    pub fn layout(&self) -> &VocabLayout {
        &self.layout
    }

    /// Total number of token ids; the model's embedding rows.
    pub fn size(&self) -> usize {
        self.size as usize
    }

    /// The event-class table, ids `0..classes`.
    pub fn classes(&self) -> Vec<EventClass> {
        (0..self.layout.classes).map(|c| self.class(c)).collect()
    }

    /// A single event class.
    pub fn class(&self, id: ClassId) -> EventClass {
        assert!(id < self.layout.classes, "class id {id} out of range");
        let (name, family) = if id < DEFAULT_CLASS_NAMES.len() && self.layout.classes <= 10 {
            let (n, f) = DEFAULT_CLASS_NAMES[id];
            (n.to_string(), f.to_string())
        } else {
            (format!("class_{id}"), FAMILIES[id % FAMILIES.len()].to_string())
        };
        EventClass {
            id,
            name,
            family,
            pattern: self.class_pattern(id),
            label: self.class_label(id),
        }
    }

    /// The pattern tokens of class `id`.
    pub fn class_pattern(&self, id: ClassId) -> Vec<Token> {
        assert!(id < self.layout.classes, "class id {id} out of range");
        let start = self.pattern_base + (id * self.layout.pattern_len) as u32;
        (start..start + self.layout.pattern_len as u32).collect()
    }

    /// The label (answer) token of class `id`.
    pub fn class_label(&self, id: ClassId) -> Token {
        assert!(id < self.layout.classes, "class id {id} out of range");
        self.label_base + id as u32
    }

    /// The `idx`-th fact token.
    pub fn fact(&self, idx: usize) -> Token {
        assert!(idx < self.layout.n_facts, "fact index {idx} out of range");
        self.fact_base + idx as u32
    }

    /// The `idx`-th filler token of `topic`.
    pub fn filler(&self, topic: usize, idx: usize) -> Token {
        assert!(topic < self.layout.topics, "topic {topic} out of range");
        assert!(
            idx < self.layout.fillers_per_topic,
            "filler index {idx} out of range"
        );
        self.filler_base + (topic * self.layout.fillers_per_topic + idx) as u32
    }

    /// The `idx`-th anchor carrier token.
    pub fn speech(&self, idx: usize) -> Token {
        assert!(
            idx < self.layout.speech_tokens,
            "speech index {idx} out of range"
        );
        self.speech_base + idx as u32
    }

    /// Classifies an arbitrary token id.
    pub fn kind(&self, token: Token) -> TokenKind {
        if token < N_SPECIALS {
            TokenKind::Special
        } else if token < self.label_base {
            TokenKind::ClassPattern(((token - self.pattern_base) as usize) / self.layout.pattern_len)
        } else if token < self.fact_base {
            TokenKind::ClassLabel((token - self.label_base) as usize)
        } else if token < self.filler_base {
            TokenKind::Fact((token - self.fact_base) as usize)
        } else if token < self.speech_base {
            let rel = (token - self.filler_base) as usize;
            TokenKind::Filler {
                topic: rel / self.layout.fillers_per_topic,
                index: rel % self.layout.fillers_per_topic,
            }
        } else if token < self.size {
            TokenKind::Speech((token - self.speech_base) as usize)
        } else {
            TokenKind::OutOfRange
        }
    }

    /// Human-readable name for a token, used in debug dumps.
    pub fn describe(&self, token: Token) -> String {
        match self.kind(token) {
            TokenKind::Special => match token {
                PAD => "<pad>".into(),
                USER => "<user>".into(),
                ASSISTANT => "<assistant>".into(),
                PROBE_ACOUSTIC => "<probe:acoustic>".into(),
                PROBE_SEMANTIC => "<probe:semantic>".into(),
                _ => unreachable!(),
            },
            TokenKind::ClassPattern(c) => format!("pat:{}:{}", self.class(c).name, token),
            TokenKind::ClassLabel(c) => format!("label:{}", self.class(c).name),
            TokenKind::Fact(i) => format!("fact_{i}"),
            TokenKind::Filler { topic, index } => {
                format!("say:{}:{}", TOPIC_NAMES[topic % TOPIC_NAMES.len()], index)
            }
            TokenKind::Speech(i) => format!("speech_{i}"),
            TokenKind::OutOfRange => format!("<invalid:{token}>"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_vocab() -> Vocab {
        Vocab::new(VocabLayout::default()).unwrap()
    }

    #[test]
    fn ranges_are_disjoint_and_cover_size() {
        let v = default_vocab();
        let mut seen = vec![false; v.size()];
        let mut mark = |t: Token| {
            let i = t as usize;
            assert!(!seen[i], "token {i} assigned twice");
            seen[i] = true;
        };
        for t in [PAD, USER, ASSISTANT, PROBE_ACOUSTIC, PROBE_SEMANTIC] {
            mark(t);
        }
        for c in 0..10 {
            for t in v.class_pattern(c) {
                mark(t);
            }
            mark(v.class_label(c));
        }
        for f in 0..16 {
            mark(v.fact(f));
        }
        for topic in 0..8 {
            for i in 0..30 {
                mark(v.filler(topic, i));
            }
        }
        for s in 0..32 {
            mark(v.speech(s));
        }
        assert!(seen.iter().all(|&b| b), "vocabulary has holes");
    }

    #[test]
    fn kind_inverts_constructors() {
        let v = default_vocab();
        assert_eq!(v.kind(v.class_pattern(3)[2]), TokenKind::ClassPattern(3));
        assert_eq!(v.kind(v.class_label(9)), TokenKind::ClassLabel(9));
        assert_eq!(v.kind(v.fact(15)), TokenKind::Fact(15));
        assert_eq!(
            v.kind(v.filler(7, 29)),
            TokenKind::Filler { topic: 7, index: 29 }
        );
        assert_eq!(v.kind(v.speech(31)), TokenKind::Speech(31));
        assert_eq!(v.kind(v.size() as Token), TokenKind::OutOfRange);
    }

    #[test]
    fn class_table_has_four_families() {
        let v = default_vocab();
        let classes = v.classes();
        assert_eq!(classes.len(), 10);
        let mut families: Vec<&str> = classes.iter().map(|c| c.family.as_str()).collect();
        families.sort_unstable();
        families.dedup();
        assert_eq!(families.len(), 4);
        assert_eq!(classes[0].name, "rain");
        assert_eq!(classes[9].name, "crackling_fire");
    }

    #[test]
    fn too_few_classes_or_facts_rejected() {
        let mut layout = VocabLayout::default();
        layout.classes = 3;
        assert!(Vocab::new(layout).is_err());

        let mut layout = VocabLayout::default();
        layout.n_facts = 3;
        assert!(Vocab::new(layout).is_err());
    }

    #[test]
    fn patterns_of_distinct_classes_share_no_tokens() {
        let v = default_vocab();
        for a in 0..10 {
            for b in (a + 1)..10 {
                let pa = v.class_pattern(a);
                for t in v.class_pattern(b) {
                    assert!(!pa.contains(&t));
                }
            }
        }
    }
}
