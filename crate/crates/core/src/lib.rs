//! echoprobe core: a desk-scale testbed for long-context memory diagnostics.
//!
//! The crate builds a balanced synthetic dialogue corpus whose first turn
//! carries both an event-class pattern (the "acoustic" signal) and a stated
//! fact (the "semantic" signal), trains a small instrumented decoder-only
//! transformer on it, and then measures how the two kinds of memory degrade
//! as the dialogue grows, using four instruments:
//!
//! * layer-wise linear probes over captured hidden states,
//! * linear CKA representation similarity between failure and success runs,
//! * attention-coverage statistics over the decoding row,
//! * causal interventions (activation patching and attention-mask edits).
//!
//! Modules mirror the pipeline stages; the most important types are
//! re-exported at the crate root.

pub mod attnstats;
pub mod bank;
pub mod cka;
pub mod corpus;
pub mod error;
pub mod interventions;
pub mod metrics;
pub mod model;
pub mod probes;
pub mod rng;
pub mod vocab;

pub use attnstats::{
    anchor_gap, attn_analysis, cov90, delta_d, mean_turn_distance, round2, turn_masses, AttnCell,
    AttnReport,
};
pub use bank::{capture_banks, find_bank, load_banks, save_banks, BankMeta, TraceBank};
pub use cka::{
    build_pairs, cka_analysis, control_pairs, drop_layer, linear_cka, linear_cka_gram,
    phase_bounds, CkaReport, Comparison, PairSet,
};
pub use corpus::{
    build_corpus, CorpusConfig, CorpusManifest, DialogueTemplate, Lexicon, ProbeKind, Role, Trial,
    TurnSpan,
};
pub use error::{Error, Result};
pub use interventions::{
    run_mask_experiment, run_patch_experiment, DonorKind, InterventionConfig,
    InterventionOutcome, MaskReport, PatchReport,
};
pub use metrics::{
    accuracy_table, delta_n, delta_profile, paired_bootstrap, AccuracyCell, AccuracyTable,
    BootstrapSummary, OutcomeRow,
};
pub use model::{
    batch_eval, ForwardOptions, ForwardTrace, MaskEdit, Model, ModelConfig, PatchSpec,
    TrainConfig, TrainReport, TrialOutcome,
};
pub use probes::{
    cross_validated_accuracy, probe_sweep, train_probe, ProbeCell, ProbeConfig, ProbeModel,
    ProbeReport, Subset,
};
pub use vocab::{ClassId, EventClass, Token, Vocab, VocabLayout};
