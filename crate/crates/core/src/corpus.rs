//! Balanced synthetic multi-turn dialogue corpus.
//!
//! Each *cell* of the corpus is a (class, N) condition holding `per_cell`
//! independent dialogue templates. A template is a skeleton of N turns:
//! turn 1 is the user *anchor* (carrier tokens plus one fact token), turns
//! 2..N−1 alternate assistant/user small talk drawn from a topic-specific
//! neutral pool, and turn N is a probe placeholder. Templates pass a leakage
//! filter (no blacklisted token in turns 1..N−1), the anchor is mixed with
//! the cell's class pattern at `mix_ratio`, and the template is finalized
//! twice — once with an acoustic probe (which class produced the anchor?) and
//! once with a semantic probe (which fact did the anchor state?) — yielding
//! sibling trials that are token-identical outside the probe span.
//!
//! Everything is a pure function of the configuration and the master seed:
//! each random choice draws from a stream named by cell indices, so corpora
//! are reproducible token-for-token regardless of generation order.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::{
    ClassId, Token, Vocab, VocabLayout, ASSISTANT, PROBE_ACOUSTIC, PROBE_SEMANTIC, USER,
};

/// Number of answer options per probe.
pub const N_OPTIONS: usize = 4;

/// Speaker of a turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::User => write!(f, "user"),
            Role::Assistant => write!(f, "assistant"),
        }
    }
}

/// Which question the probe turn asks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Acoustic,
    Semantic,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 2] = [ProbeKind::Acoustic, ProbeKind::Semantic];

    /// Stable short name used in file names and report keys.
    pub fn tag(self) -> &'static str {
        match self {
            ProbeKind::Acoustic => "acoustic",
            ProbeKind::Semantic => "semantic",
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Corpus configuration; the master seed plus this struct determines every
/// token of every trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Number of event classes (C).
    pub classes: usize,
    /// Context lengths (N, in turns); each must be even and ≥ 2.
    pub lengths: Vec<usize>,
    /// Templates per (class, N) cell (T).
    pub per_cell: usize,
    /// Fraction of anchor slots replaced by class-pattern tokens.
    pub mix_ratio: f64,
    /// Mixable carrier slots in the anchor turn.
    pub anchor_slots: usize,
    /// Content tokens per filler turn.
    pub filler_len: usize,
    /// Master seed; all streams derive from it.
    pub master_seed: u64,
    /// Template-id namespace (`main` for analysis corpora, `train` for
    /// training corpora); namespaces make splits disjoint by id.
    pub namespace: String,
    /// Attempts allowed per template before a cell is declared unsatisfiable.
    pub filter_budget: usize,
    /// Vocabulary sizing.
    pub vocab: VocabLayout,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            classes: 10,
            lengths: vec![2, 4, 8, 16],
            per_cell: 50,
            mix_ratio: 0.3,
            anchor_slots: 16,
            filler_len: 4,
            master_seed: 7,
            namespace: "main".to_string(),
            filter_budget: 64,
            vocab: VocabLayout::default(),
        }
    }
}

impl CorpusConfig {
    /// Validates the configuration and builds its vocabulary.
    pub fn build_vocab(&self) -> Result<Vocab> {
        if self.lengths.is_empty() {
            return Err(Error::config("lengths must be non-empty"));
        }
        for &n in &self.lengths {
            if n < 2 || n % 2 != 0 {
                return Err(Error::config(format!(
                    "context length N={n} invalid: must be even and >= 2"
                )));
            }
        }
        if self.per_cell == 0 {
            return Err(Error::config("per_cell must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::config(format!(
                "mix_ratio {} outside [0, 1]",
                self.mix_ratio
            )));
        }
        if self.anchor_slots == 0 {
            return Err(Error::config("anchor_slots must be >= 1"));
        }
        if self.filler_len == 0 {
            return Err(Error::config("filler_len must be >= 1"));
        }
        if self.filter_budget == 0 {
            return Err(Error::config("filter_budget must be >= 1"));
        }
        let mut layout = self.vocab.clone();
        layout.classes = self.classes;
        Vocab::new(layout)
    }

    /// Longest flattened token sequence this configuration can produce.
    pub fn max_sequence_len(&self) -> usize {
        let n_max = self.lengths.iter().copied().max().unwrap_or(2);
        sequence_len(self, n_max)
    }
}

/// Flattened sequence length for a dialogue of `n` turns under `cfg`.
pub fn sequence_len(cfg: &CorpusConfig, n: usize) -> usize {
    let anchor = 1 + cfg.anchor_slots + 1; // marker + slots + fact
    let filler = 1 + cfg.filler_len; // marker + content
    let probe = 1 + N_OPTIONS; // marker + options
    anchor + n.saturating_sub(2) * filler + probe
}

/// One turn of a template: marker token is *not* stored; it is added when the
/// dialogue is flattened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based turn id.
    pub turn_id: usize,
    pub role: Role,
    /// Content tokens (empty for the probe placeholder).
    pub tokens: Vec<Token>,
    /// True only for turn N.
    pub is_probe_placeholder: bool,
}

/// A dialogue skeleton before probe finalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DialogueTemplate {
    pub template_id: String,
    pub n_turns: usize,
    pub topic: usize,
    pub anchor_class: ClassId,
    /// Index into the fact pool of the fact stated in the anchor.
    pub fact_index: usize,
    pub turns: Vec<Turn>,
}

impl DialogueTemplate {
    /// Checks the structural invariants: consecutive 1-based ids, alternating
    /// roles on turns 1..N−1 (odd = user), probe placeholder last.
    pub fn validate(&self) -> Result<()> {
        if self.turns.len() != self.n_turns {
            return Err(Error::config(format!(
                "template {}: {} turns recorded, n_turns={}",
                self.template_id,
                self.turns.len(),
                self.n_turns
            )));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let id = i + 1;
            if turn.turn_id != id {
                return Err(Error::config(format!(
                    "template {}: turn_id {} at position {id}",
                    self.template_id, turn.turn_id
                )));
            }
            let is_last = id == self.n_turns;
            if turn.is_probe_placeholder != is_last {
                return Err(Error::config(format!(
                    "template {}: probe placeholder must be exactly the final turn",
                    self.template_id
                )));
            }
            let expected_role = if is_last {
                Role::User // the probe is a user question
            } else if id % 2 == 1 {
                Role::User
            } else {
                Role::Assistant
            };
            if turn.role != expected_role {
                return Err(Error::config(format!(
                    "template {}: turn {id} has role {}, expected {expected_role}",
                    self.template_id, turn.role
                )));
            }
        }
        Ok(())
    }
}

/// Token span `[start, end)` of one turn in the flattened sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSpan {
    pub turn_id: usize,
    pub role: Role,
    pub start: usize,
    pub end: usize,
    pub is_probe: bool,
}

/// A finalized evaluation item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: String,
    pub template_id: String,
    /// Sibling trial sharing every token outside the probe span.
    pub sibling_id: String,
    pub n_turns: usize,
    pub probe_kind: ProbeKind,
    pub anchor_class: ClassId,
    pub topic: usize,
    /// The fact token embedded in the anchor turn.
    pub fact_token: Token,
    /// Flattened token sequence, including turn markers.
    pub tokens: Vec<Token>,
    /// Per-turn spans partitioning `tokens`.
    pub turn_spans: Vec<TurnSpan>,
    /// Answer options presented in the probe turn, in presented order.
    pub options: [Token; N_OPTIONS],
    /// Index into `options` of the correct answer.
    pub correct_option: usize,
}

impl Trial {
    /// Span of the anchor (turn 1).
    pub fn anchor_span(&self) -> (usize, usize) {
        let s = &self.turn_spans[0];
        (s.start, s.end)
    }

    /// Span of the probe (turn N).
    pub fn probe_span(&self) -> (usize, usize) {
        let s = self.turn_spans.last().expect("trial has turns");
        (s.start, s.end)
    }

    /// The correct answer token.
    pub fn correct_token(&self) -> Token {
        self.options[self.correct_option]
    }

    /// Spans of non-anchor, non-probe user turns (the filler user turns).
    pub fn filler_user_spans(&self) -> Vec<TurnSpan> {
        self.turn_spans
            .iter()
            .filter(|s| s.role == Role::User && s.turn_id != 1 && !s.is_probe)
            .copied()
            .collect()
    }
}

/// Blacklist used by the leakage filter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    blacklist: BTreeSet<Token>,
}

impl Lexicon {
    /// Default lexicon: every class-pattern token and every class-label token.
    pub fn from_vocab(vocab: &Vocab) -> Self {
        let mut blacklist = BTreeSet::new();
        for c in 0..vocab.layout().classes {
            blacklist.extend(vocab.class_pattern(c));
            blacklist.insert(vocab.class_label(c));
        }
        Lexicon { blacklist }
    }

    /// Adds extra banned tokens (used by tests to provoke rejections).
    pub fn with_extra(mut self, extra: impl IntoIterator<Item = Token>) -> Self {
        self.blacklist.extend(extra);
        self
    }

    pub fn contains(&self, token: Token) -> bool {
        self.blacklist.contains(&token)
    }

    pub fn len(&self) -> usize {
        self.blacklist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blacklist.is_empty()
    }
}

/// Outcome of the leakage filter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    /// First offending (turn_id, token).
    Reject { turn_id: usize, token: Token },
}

/// Scans turns 1..N−1 of a template for blacklisted tokens. The template
/// holds pre-mix anchor carriers, so the class pattern injected later is
/// exempt by construction; the probe turn is excluded because options may
/// legitimately quote label tokens.
pub fn filter_leakage(template: &DialogueTemplate, lexicon: &Lexicon) -> FilterDecision {
    for turn in &template.turns {
        if turn.is_probe_placeholder {
            continue;
        }
        for &tok in &turn.tokens {
            if lexicon.contains(tok) {
                return FilterDecision::Reject {
                    turn_id: turn.turn_id,
                    token: tok,
                };
            }
        }
    }
    FilterDecision::Accept
}

/// Generates the template for cell (`class`, `n`, `template_index`).
///
/// All choices (topic, carriers, fact, filler content) derive from streams
/// named by the cell, so the function is a pure function of its arguments.
pub fn gen_template(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    class: ClassId,
    n: usize,
    template_index: usize,
    attempt: usize,
) -> Result<DialogueTemplate> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::config(format!(
            "context length N={n} invalid: must be even and >= 2"
        )));
    }
    if class >= cfg.classes {
        return Err(Error::config(format!(
            "class {class} out of range (classes={})",
            cfg.classes
        )));
    }
    let cell = [class as u64, n as u64, template_index as u64, attempt as u64];
    let mut topic_rng = rng::stream(cfg.master_seed, "template.topic", &cell);
    let topic = topic_rng.gen_range(0..vocab.layout().topics);

    let mut anchor_rng = rng::stream(cfg.master_seed, "template.anchor", &cell);
    let mut anchor_tokens: Vec<Token> = (0..cfg.anchor_slots)
        .map(|_| vocab.speech(anchor_rng.gen_range(0..vocab.layout().speech_tokens)))
        .collect();
    let mut fact_rng = rng::stream(cfg.master_seed, "template.fact", &cell);
    let fact_index = fact_rng.gen_range(0..vocab.layout().n_facts);
    // The fact occupies a reserved final position of the anchor turn; it is
    // not one of the mixable slots, so it survives any mix_ratio.
    anchor_tokens.push(vocab.fact(fact_index));

    let mut turns = Vec::with_capacity(n);
    turns.push(Turn {
        turn_id: 1,
        role: Role::User,
        tokens: anchor_tokens,
        is_probe_placeholder: false,
    });
    let mut filler_rng = rng::stream(cfg.master_seed, "template.filler", &cell);
    for turn_id in 2..n {
        let role = if turn_id % 2 == 1 {
            Role::User
        } else {
            Role::Assistant
        };
        let tokens = (0..cfg.filler_len)
            .map(|_| vocab.filler(topic, filler_rng.gen_range(0..vocab.layout().fillers_per_topic)))
            .collect();
        turns.push(Turn {
            turn_id,
            role,
            tokens,
            is_probe_placeholder: false,
        });
    }
    turns.push(Turn {
        turn_id: n,
        role: Role::User,
        tokens: Vec::new(),
        is_probe_placeholder: true,
    });

    let template = DialogueTemplate {
        template_id: format!("{}-c{class:02}-n{n:02}-t{template_index:03}", cfg.namespace),
        n_turns: n,
        topic,
        anchor_class: class,
        fact_index,
        turns,
    };
    template.validate()?;
    Ok(template)
}

/// Mixes the cell's class pattern into the anchor turn.
///
/// Exactly `round(mix_ratio * anchor_slots)` slot positions, chosen by the
/// template's embed stream, are replaced by the class's pattern tokens (cycled
/// in position order). The reserved fact position is untouched.
pub fn embed_anchor(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    template: &mut DialogueTemplate,
) -> Vec<usize> {
    let slots = cfg.anchor_slots;
    let k = (cfg.mix_ratio * slots as f64).round() as usize;
    let k = k.min(slots);
    let cell_key = rng::derive(
        cfg.master_seed,
        "embed.slots",
        &[template.anchor_class as u64, template.n_turns as u64],
    );
    let mut slot_rng = rng::stream(cell_key, &template.template_id, &[]);
    let mut positions: Vec<usize> = (0..slots).collect();
    positions.shuffle(&mut slot_rng);
    let mut chosen: Vec<usize> = positions.into_iter().take(k).collect();
    chosen.sort_unstable();

    let pattern = vocab.class_pattern(template.anchor_class);
    let anchor = &mut template.turns[0].tokens;
    for (i, &pos) in chosen.iter().enumerate() {
        anchor[pos] = pattern[i % pattern.len()];
    }
    chosen
}

/// Finalizes a probe of `kind` over an embedded template, producing a trial.
pub fn make_probe(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    template: &DialogueTemplate,
    kind: ProbeKind,
) -> Result<Trial> {
    let class = template.anchor_class;
    let n = template.n_turns;
    let correct_token = match kind {
        ProbeKind::Acoustic => vocab.class_label(class),
        ProbeKind::Semantic => vocab.fact(template.fact_index),
    };

    // Distractors: three distinct wrong answers from the same answer family.
    let mut distractor_rng = rng::stream(
        rng::derive(cfg.master_seed, "probe.distractors", &[kind as u64]),
        &template.template_id,
        &[],
    );
    let pool: Vec<Token> = match kind {
        ProbeKind::Acoustic => (0..cfg.classes)
            .filter(|&c| c != class)
            .map(|c| vocab.class_label(c))
            .collect(),
        ProbeKind::Semantic => (0..vocab.layout().n_facts)
            .filter(|&f| f != template.fact_index)
            .map(|f| vocab.fact(f))
            .collect(),
    };
    if pool.len() < N_OPTIONS - 1 {
        return Err(Error::config(format!(
            "need {} distractors for a {kind} probe, pool has {}",
            N_OPTIONS - 1,
            pool.len()
        )));
    }
    let mut pool = pool;
    pool.shuffle(&mut distractor_rng);
    let distractors: Vec<Token> = pool.into_iter().take(N_OPTIONS - 1).collect();

    // Option order: correct index uniform over 0..4 under the option stream.
    let mut options: Vec<Token> = Vec::with_capacity(N_OPTIONS);
    options.push(correct_token);
    options.extend(&distractors);
    let mut option_rng = rng::stream(
        rng::derive(cfg.master_seed, "probe.options", &[kind as u64]),
        &template.template_id,
        &[],
    );
    options.shuffle(&mut option_rng);
    let correct_option = options
        .iter()
        .position(|&t| t == correct_token)
        .expect("correct token survives the shuffle");

    // Flatten: every turn contributes [marker, content...]; spans partition
    // the sequence with no slack tokens, so attention mass per turn is well
    // defined.
    let mut tokens: Vec<Token> = Vec::with_capacity(sequence_len(cfg, n));
    let mut turn_spans: Vec<TurnSpan> = Vec::with_capacity(n);
    for turn in &template.turns {
        let start = tokens.len();
        if turn.is_probe_placeholder {
            tokens.push(match kind {
                ProbeKind::Acoustic => PROBE_ACOUSTIC,
                ProbeKind::Semantic => PROBE_SEMANTIC,
            });
            tokens.extend(&options);
        } else {
            tokens.push(match turn.role {
                Role::User => USER,
                Role::Assistant => ASSISTANT,
            });
            tokens.extend(&turn.tokens);
        }
        turn_spans.push(TurnSpan {
            turn_id: turn.turn_id,
            role: turn.role,
            start,
            end: tokens.len(),
            is_probe: turn.is_probe_placeholder,
        });
    }
    debug_assert_eq!(tokens.len(), sequence_len(cfg, n));

    let options: [Token; N_OPTIONS] = options.try_into().expect("exactly 4 options");
    let sibling_kind = match kind {
        ProbeKind::Acoustic => ProbeKind::Semantic,
        ProbeKind::Semantic => ProbeKind::Acoustic,
    };
    Ok(Trial {
        trial_id: format!("{}-{}", template.template_id, kind.tag()),
        template_id: template.template_id.clone(),
        sibling_id: format!("{}-{}", template.template_id, sibling_kind.tag()),
        n_turns: n,
        probe_kind: kind,
        anchor_class: class,
        topic: template.topic,
        fact_token: vocab.fact(template.fact_index),
        tokens,
        turn_spans,
        options,
        correct_option,
    })
}

/// A complete corpus: configuration, vocabulary, and trials in canonical
/// order (class-major, then N, then template index, acoustic before semantic).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub vocab_size: usize,
    pub trials: Vec<Trial>,
}

impl CorpusManifest {
    pub fn vocab(&self) -> Result<Vocab> {
        self.config.build_vocab()
    }

    /// Trials of one (N, kind) slice, in canonical order.
    pub fn slice(&self, n: usize, kind: ProbeKind) -> Vec<&Trial> {
        self.trials
            .iter()
            .filter(|t| t.n_turns == n && t.probe_kind == kind)
            .collect()
    }

    pub fn find(&self, trial_id: &str) -> Option<&Trial> {
        self.trials.iter().find(|t| t.trial_id == trial_id)
    }
}

/// Generates the full corpus for `cfg`.
///
/// Per template: draw candidates until the leakage filter accepts one or the
/// budget runs out (the neutral filler pool always passes with the default
/// lexicon; the budget guards doctored lexicons), then mix the anchor and
/// finalize both sibling probes.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<CorpusManifest> {
    let vocab = cfg.build_vocab()?;
    let lexicon = Lexicon::from_vocab(&vocab);
    build_corpus_with_lexicon(cfg, &vocab, &lexicon)
}

/// As [`build_corpus`] but with a caller-supplied lexicon (tests use this to
/// exercise the filter budget).
pub fn build_corpus_with_lexicon(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    lexicon: &Lexicon,
) -> Result<CorpusManifest> {
    let mut trials = Vec::with_capacity(2 * cfg.classes * cfg.lengths.len() * cfg.per_cell);
    for class in 0..cfg.classes {
        for &n in &cfg.lengths {
            for t in 0..cfg.per_cell {
                let mut accepted = None;
                for attempt in 0..cfg.filter_budget {
                    let candidate = gen_template(cfg, vocab, class, n, t, attempt)?;
                    if filter_leakage(&candidate, lexicon) == FilterDecision::Accept {
                        accepted = Some(candidate);
                        break;
                    }
                }
                let mut template = accepted.ok_or(Error::UnsatisfiableCell {
                    class,
                    n,
                    template_index: t,
                    attempts: cfg.filter_budget,
                })?;
                embed_anchor(cfg, vocab, &mut template);
                trials.push(make_probe(cfg, vocab, &template, ProbeKind::Acoustic)?);
                trials.push(make_probe(cfg, vocab, &template, ProbeKind::Semantic)?);
            }
        }
    }
    Ok(CorpusManifest {
        config: cfg.clone(),
        vocab_size: vocab.size(),
        trials,
    })
}

// ---------------------------------------------------------------------------
// JSONL persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct HeaderLine<'a> {
    kind: &'a str,
    #[serde(flatten)]
    body: HeaderBody,
}

#[derive(Serialize, Deserialize)]
struct HeaderBody {
    config: CorpusConfig,
    vocab_size: usize,
    n_trials: usize,
}

#[derive(Serialize, Deserialize)]
struct TrialLine<'a> {
    kind: &'a str,
    #[serde(flatten)]
    trial: Trial,
}

/// Writes a manifest as JSONL: one header line, then one line per trial.
pub fn write_jsonl<W: Write>(manifest: &CorpusManifest, mut w: W) -> Result<()> {
    let header = HeaderLine {
        kind: "manifest",
        body: HeaderBody {
            config: manifest.config.clone(),
            vocab_size: manifest.vocab_size,
            n_trials: manifest.trials.len(),
        },
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for trial in &manifest.trials {
        let line = TrialLine {
            kind: "trial",
            trial: trial.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a manifest written by [`write_jsonl`], validating counts.
pub fn read_jsonl<R: BufRead>(r: R, path_for_errors: &str) -> Result<CorpusManifest> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format {
            path: path_for_errors.to_string(),
            message: "empty corpus file".to_string(),
        })??;
    let header: HeaderLine = serde_json::from_str(&header_line)?;
    if header.kind != "manifest" {
        return Err(Error::Format {
            path: path_for_errors.to_string(),
            message: format!("first line kind `{}`, expected `manifest`", header.kind),
        });
    }
    let mut trials = Vec::with_capacity(header.body.n_trials);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TrialLine = serde_json::from_str(&line)?;
        if t.kind != "trial" {
            return Err(Error::Format {
                path: path_for_errors.to_string(),
                message: format!("unexpected line kind `{}`", t.kind),
            });
        }
        trials.push(t.trial);
    }
    if trials.len() != header.body.n_trials {
        return Err(Error::Format {
            path: path_for_errors.to_string(),
            message: format!(
                "header promises {} trials, found {}",
                header.body.n_trials,
                trials.len()
            ),
        });
    }
    Ok(CorpusManifest {
        config: header.body.config,
        vocab_size: header.body.vocab_size,
        trials,
    })
}

/// Writes a manifest to `path` (creating parent directories).
pub fn save_jsonl(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    write_jsonl(manifest, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Loads a manifest from `path`, mapping a missing file to a missing-artifact
/// error that names the producing stage.
pub fn load_jsonl(path: &Path) -> Result<CorpusManifest> {
    let file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::missing(path.display().to_string(), "gen")
        } else {
            Error::Io(e)
        }
    })?;
    read_jsonl(std::io::BufReader::new(file), &path.display().to_string())
}
