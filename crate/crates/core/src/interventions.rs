//! Causal interventions on failed trials: residual-stream patching from
//! donor trials, and multiplicative attention-mask edits on the final
//! decoding row.
//!
//! Patching asks whether writing a donor's hidden state into the target's
//! final-position residual stream at a given depth flips the target to the
//! correct answer. Three donor pools isolate what matters: a clean donor of
//! the same class, a contaminated (also-failed) donor of the same class, and
//! a correct donor of a different class.
//!
//! Mask edits scale the attention mass on chosen spans (anchor span
//! amplification, filler-turn suppression, and a random-turn control) and
//! measure the same flip rate. Every skipped combination is recorded rather
//! than silently dropped.

use serde::{Deserialize, Serialize};

use crate::bank::{find_bank, TraceBank};
use crate::corpus::{CorpusManifest, ProbeKind, Trial};
use crate::error::{Error, Result};
use crate::metrics::{paired_bootstrap, BootstrapSummary};
use crate::model::{ForwardOptions, MaskEdit, Model, PatchSpec};
use crate::rng;
use rand::Rng;

/// Donor pool taxonomy for patching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DonorKind {
    /// Correct-outcome trial of a different class.
    WrongClass,
    /// Failed trial of the same class.
    ContaminatedSameClass,
    /// Correct-outcome trial of the same class.
    CleanSameClass,
}

impl DonorKind {
    pub const ALL: [DonorKind; 3] = [
        DonorKind::WrongClass,
        DonorKind::ContaminatedSameClass,
        DonorKind::CleanSameClass,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            DonorKind::WrongClass => "wrong_class",
            DonorKind::ContaminatedSameClass => "contaminated_same_class",
            DonorKind::CleanSameClass => "clean_same_class",
        }
    }

    fn index(self) -> u64 {
        match self {
            DonorKind::WrongClass => 0,
            DonorKind::ContaminatedSameClass => 1,
            DonorKind::CleanSameClass => 2,
        }
    }
}

/// Settings shared by both intervention families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionConfig {
    /// Reference depth (block index) interventions are anchored to.
    pub probe_layer: usize,
    /// Cap on failed-trial targets per context length.
    pub max_targets: usize,
    pub seed: u64,
    /// Bootstrap resamples for the per-setting confidence intervals.
    pub bootstrap_resamples: usize,
    /// Patch offsets relative to `probe_layer`; the positive offset is
    /// clamped by depth as `min(4, L - 1 - probe_layer)`.
    pub patch_offsets: Vec<i64>,
    /// Mask sweep offsets relative to `probe_layer`.
    pub mask_offsets: Vec<i64>,
    /// Amplification multipliers for the anchor span.
    pub amplify: Vec<f64>,
    /// Suppression multipliers for the filler user spans.
    pub suppress: Vec<f64>,
    /// Multiplier for the random-turn control.
    pub control_multiplier: f64,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            probe_layer: 6,
            max_targets: 80,
            seed: 2026,
            bootstrap_resamples: 2000,
            patch_offsets: vec![-8, 0, 4],
            mask_offsets: vec![-8, -4, 0, 4],
            amplify: vec![2.0, 4.0, 8.0],
            suppress: vec![0.5, 0.25, 0.0],
            control_multiplier: 4.0,
        }
    }
}

impl InterventionConfig {
    /// Patch offsets with the positive tail clamped to stay inside depth L:
    /// any offset > 0 becomes `min(offset, 4, L - 1 - probe_layer)`.
    pub fn effective_patch_offsets(&self, layers: usize) -> Vec<i64> {
        let head = layers as i64 - 1 - self.probe_layer as i64;
        let mut out: Vec<i64> = self
            .patch_offsets
            .iter()
            .map(|&o| if o > 0 { o.min(4).min(head.max(0)) } else { o })
            .collect();
        out.dedup();
        out
    }
}

/// One (donor kind, offset) or (mask setting, layer) outcome over the target
/// set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionOutcome {
    /// Donor tag (`wrong_class`, ...) or mask tag (`amplify_x4`,
    /// `suppress_x0.25`, `random_control`).
    pub setting: String,
    /// Offset relative to the probe layer (patches) or the block index
    /// (masks).
    pub offset: i64,
    /// Resolved layer the intervention ran at, when it ran.
    pub layer: Option<usize>,
    /// Why the whole combination was skipped, when it was.
    pub skipped: Option<String>,
    /// Targets actually evaluated (had a donor / applicable spans).
    pub n_eval: usize,
    /// Targets skipped for per-target reasons (e.g. empty donor pool).
    pub n_skipped: usize,
    /// Targets that flipped to the correct answer.
    pub n_flipped: usize,
    /// Per-target result aligned with the target list: 1 = flipped to
    /// correct, 0 = still wrong, -1 = skipped (no donor / inapplicable).
    pub flip_by_target: Vec<i8>,
    /// Flip rate minus the (re-verified zero) baseline, in percentage points.
    pub delta_pp: Option<f64>,
    pub bootstrap: Option<BootstrapSummary>,
}

/// Patch experiment report for one context length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchReport {
    pub n_turns: usize,
    pub probe_layer: usize,
    pub n_targets: usize,
    pub outcomes: Vec<InterventionOutcome>,
}

/// Mask experiment report for one context length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskReport {
    pub n_turns: usize,
    /// Block index the main numbers use (the last block).
    pub main_layer: usize,
    pub probe_layer: usize,
    pub n_targets: usize,
    pub outcomes: Vec<InterventionOutcome>,
}

/// Failed-trial targets of the acoustic bank at `n`, capped at
/// `max_targets`, with their manifest trials. Every target's failure is
/// re-verified with a clean forward before use.
fn collect_targets<'a>(
    model: &Model,
    bank: &TraceBank,
    manifest: &'a CorpusManifest,
    max_targets: usize,
) -> Result<Vec<(usize, &'a Trial)>> {
    let mut targets = Vec::new();
    for idx in bank.failed_indices() {
        if targets.len() >= max_targets {
            break;
        }
        let id = bank.meta.trial_ids[idx].as_str();
        let trial = manifest
            .trials
            .iter()
            .find(|t| t.trial_id == id)
            .ok_or_else(|| Error::config(format!("bank trial {id} missing from manifest")))?;
        let trace = model.forward(&trial.tokens, &trial.options, &ForwardOptions::default())?;
        if trace.predicted_option == trial.correct_option {
            return Err(Error::numeric(format!(
                "target integrity: trial {id} is marked failed in the bank but the model now \
                 answers it correctly; banks are stale for this model"
            )));
        }
        targets.push((idx, trial));
    }
    Ok(targets)
}

/// Uniform donor choice from `pool` (bank row indices), never `target_row`,
/// keyed by (kind, target position).
fn select_donor(
    pool: &[usize],
    target_row: usize,
    kind: DonorKind,
    target_pos: usize,
    seed: u64,
) -> Option<usize> {
    let filtered: Vec<usize> = pool.iter().copied().filter(|&i| i != target_row).collect();
    if filtered.is_empty() {
        return None;
    }
    let mut rng = rng::stream(seed, "patch.donor", &[kind.index(), target_pos as u64]);
    Some(filtered[rng.gen_range(0..filtered.len())])
}

/// Runs the patch experiment for the acoustic bank at `n_turns`.
pub fn run_patch_experiment(
    model: &Model,
    banks: &[TraceBank],
    manifest: &CorpusManifest,
    n_turns: usize,
    cfg: &InterventionConfig,
) -> Result<PatchReport> {
    let layers = model.cfg.layers;
    if cfg.probe_layer >= layers {
        return Err(Error::config(format!(
            "probe_layer {} out of range for {layers} blocks",
            cfg.probe_layer
        )));
    }
    let bank = find_bank(banks, ProbeKind::Acoustic, n_turns)?;
    let targets = collect_targets(model, bank, manifest, cfg.max_targets)?;

    // Donor pools, by class, split by outcome.
    let correct_rows = bank.correct_indices();
    let failed_rows = bank.failed_indices();
    let pool_for = |kind: DonorKind, class: usize| -> Vec<usize> {
        match kind {
            DonorKind::WrongClass => correct_rows
                .iter()
                .copied()
                .filter(|&i| bank.meta.classes[i] != class)
                .collect(),
            DonorKind::ContaminatedSameClass => failed_rows
                .iter()
                .copied()
                .filter(|&i| bank.meta.classes[i] == class)
                .collect(),
            DonorKind::CleanSameClass => correct_rows
                .iter()
                .copied()
                .filter(|&i| bank.meta.classes[i] == class)
                .collect(),
        }
    };

    let offsets = cfg.effective_patch_offsets(layers);
    let mut outcomes = Vec::new();
    for kind in DonorKind::ALL {
        for (oi, &offset) in offsets.iter().enumerate() {
            let layer = cfg.probe_layer as i64 + offset;
            let mut outcome = InterventionOutcome {
                setting: kind.tag().to_string(),
                offset,
                layer: None,
                skipped: None,
                n_eval: 0,
                n_skipped: 0,
                n_flipped: 0,
                flip_by_target: Vec::new(),
                delta_pp: None,
                bootstrap: None,
            };
            if layer < 0 || layer >= layers as i64 {
                outcome.skipped = Some(format!(
                    "patch layer {layer} (probe {} + offset {offset}) outside [0, {layers})",
                    cfg.probe_layer
                ));
                outcomes.push(outcome);
                continue;
            }
            let layer = layer as usize;
            outcome.layer = Some(layer);
            if targets.is_empty() {
                outcome.skipped = Some("no failed targets".to_string());
                outcomes.push(outcome);
                continue;
            }

            let mut flips = Vec::with_capacity(targets.len());
            for (pos, &(row, trial)) in targets.iter().enumerate() {
                let class = bank.meta.classes[row];
                let donor = match select_donor(&pool_for(kind, class), row, kind, pos, cfg.seed) {
                    Some(dv) => dv,
                    None => {
                        outcome.n_skipped += 1;
                        outcome.flip_by_target.push(-1);
                        continue;
                    }
                };
                let patch = PatchSpec {
                    layer,
                    vector: bank.hidden_at(donor, layer).to_vec(),
                    donor_trial: bank.meta.trial_ids[donor].clone(),
                    donor_layer: layer,
                };
                let opts = ForwardOptions {
                    patch: Some(patch),
                    ..ForwardOptions::default()
                };
                let trace = model.forward(&trial.tokens, &trial.options, &opts)?;
                let flipped = trace.predicted_option == trial.correct_option;
                outcome.flip_by_target.push(flipped as i8);
                flips.push(if flipped { 1.0f64 } else { 0.0f64 });
            }
            outcome.n_eval = flips.len();
            outcome.n_flipped = flips.iter().filter(|&&f| f > 0.5).count();
            if !flips.is_empty() {
                let baseline = vec![0.0f64; flips.len()];
                let boot_seed = rng::derive(
                    cfg.seed,
                    "patch.boot",
                    &[n_turns as u64, kind.index(), oi as u64],
                );
                let boot = paired_bootstrap(
                    &baseline,
                    &flips,
                    cfg.bootstrap_resamples,
                    boot_seed,
                )?;
                outcome.delta_pp = Some(boot.point * 100.0);
                outcome.bootstrap = Some(boot);
            } else {
                outcome.skipped = Some("every target lacked a donor".to_string());
            }
            outcomes.push(outcome);
        }
    }

    Ok(PatchReport {
        n_turns,
        probe_layer: cfg.probe_layer,
        n_targets: targets.len(),
        outcomes,
    })
}

/// Mask settings, in report order.
fn mask_settings(cfg: &InterventionConfig) -> Vec<(String, MaskTarget, f64)> {
    let mut out = Vec::new();
    for &v in &cfg.amplify {
        out.push((format!("amplify_x{v}"), MaskTarget::Anchor, v));
    }
    for &v in &cfg.suppress {
        out.push((format!("suppress_x{v}"), MaskTarget::Fillers, v));
    }
    out.push((
        "random_control".to_string(),
        MaskTarget::RandomFiller,
        cfg.control_multiplier,
    ));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MaskTarget {
    Anchor,
    Fillers,
    RandomFiller,
}

/// Runs the mask experiment for the acoustic bank at `n_turns`. The edited
/// layers are the last block (main) plus the config's sweep offsets around
/// the probe layer; duplicates collapse.
pub fn run_mask_experiment(
    model: &Model,
    banks: &[TraceBank],
    manifest: &CorpusManifest,
    n_turns: usize,
    cfg: &InterventionConfig,
) -> Result<MaskReport> {
    let layers = model.cfg.layers;
    if cfg.probe_layer >= layers {
        return Err(Error::config(format!(
            "probe_layer {} out of range for {layers} blocks",
            cfg.probe_layer
        )));
    }
    let main_layer = layers - 1;
    let bank = find_bank(banks, ProbeKind::Acoustic, n_turns)?;
    let targets = collect_targets(model, bank, manifest, cfg.max_targets)?;

    // Layer list: main layer first, then valid sweep layers, deduplicated.
    let mut layer_list: Vec<(i64, usize)> = vec![(main_layer as i64 - cfg.probe_layer as i64, main_layer)];
    for &off in &cfg.mask_offsets {
        let l = cfg.probe_layer as i64 + off;
        if l >= 0 && (l as usize) < layers && !layer_list.iter().any(|&(_, ll)| ll == l as usize) {
            layer_list.push((off, l as usize));
        }
    }

    let mut outcomes = Vec::new();
    for (setting, target_kind, v) in mask_settings(cfg) {
        for &(offset, layer) in &layer_list {
            let mut outcome = InterventionOutcome {
                setting: setting.clone(),
                offset,
                layer: Some(layer),
                skipped: None,
                n_eval: 0,
                n_skipped: 0,
                n_flipped: 0,
                flip_by_target: Vec::new(),
                delta_pp: None,
                bootstrap: None,
            };
            if targets.is_empty() {
                outcome.skipped = Some("no failed targets".to_string());
                outcomes.push(outcome);
                continue;
            }
            if matches!(target_kind, MaskTarget::Fillers | MaskTarget::RandomFiller)
                && n_turns == 2
            {
                outcome.skipped =
                    Some("N=2 has no filler user turns to suppress or randomize".to_string());
                outcomes.push(outcome);
                continue;
            }

            let mut flips = Vec::with_capacity(targets.len());
            for (pos, &(_, trial)) in targets.iter().enumerate() {
                let edits: Vec<MaskEdit> = match target_kind {
                    MaskTarget::Anchor => {
                        let (a0, a1) = trial.anchor_span();
                        vec![MaskEdit::from_multiplier(layer, (a0, a1), v)?]
                    }
                    MaskTarget::Fillers => trial
                        .filler_user_spans()
                        .iter()
                        .map(|s| MaskEdit::from_multiplier(layer, (s.start, s.end), v))
                        .collect::<Result<Vec<_>>>()?,
                    MaskTarget::RandomFiller => {
                        let fillers = trial.filler_user_spans();
                        let mut rng =
                            rng::stream(cfg.seed, "mask.random_turn", &[pos as u64]);
                        let s = fillers[rng.gen_range(0..fillers.len())];
                        vec![MaskEdit::from_multiplier(layer, (s.start, s.end), v)?]
                    }
                };
                let opts = ForwardOptions {
                    mask_edits: edits,
                    ..ForwardOptions::default()
                };
                let trace = model.forward(&trial.tokens, &trial.options, &opts)?;
                let flipped = trace.predicted_option == trial.correct_option;
                outcome.flip_by_target.push(flipped as i8);
                flips.push(if flipped { 1.0f64 } else { 0.0f64 });
            }
            outcome.n_eval = flips.len();
            outcome.n_flipped = flips.iter().filter(|&&f| f > 0.5).count();
            let baseline = vec![0.0f64; flips.len()];
            let boot_seed = rng::derive(
                cfg.seed,
                "mask.boot",
                &[n_turns as u64, outcomes.len() as u64],
            );
            let boot =
                paired_bootstrap(&baseline, &flips, cfg.bootstrap_resamples, boot_seed)?;
            outcome.delta_pp = Some(boot.point * 100.0);
            outcome.bootstrap = Some(boot);
            outcomes.push(outcome);
        }
    }

    Ok(MaskReport {
        n_turns,
        main_layer,
        probe_layer: cfg.probe_layer,
        n_targets: targets.len(),
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::capture_banks;
    use crate::corpus::{build_corpus, CorpusConfig, CorpusManifest};
    use crate::model::{Model, ModelConfig};

    fn setup() -> (Model, CorpusManifest, Vec<TraceBank>) {
        let ccfg = CorpusConfig {
            classes: 4,
            lengths: vec![2, 4],
            per_cell: 8,
            master_seed: 61,
            ..CorpusConfig::default()
        };
        let manifest = build_corpus(&ccfg).unwrap();
        let mcfg = ModelConfig {
            layers: 3,
            width: 16,
            heads: 2,
            mlp_ratio: 2,
            max_seq_len: 48,
            vocab_size: manifest.vocab_size,
            init_std: 0.02,
            seed: 23,
        };
        let model = Model::init(mcfg).unwrap();
        let banks = capture_banks(&model, &manifest, "p").unwrap();
        (model, manifest, banks)
    }

    fn test_cfg() -> InterventionConfig {
        InterventionConfig {
            probe_layer: 1,
            max_targets: 10,
            bootstrap_resamples: 200,
            ..InterventionConfig::default()
        }
    }

    #[test]
    fn effective_offsets_clamp_to_depth() {
        let cfg = InterventionConfig {
            probe_layer: 6,
            ..InterventionConfig::default()
        };
        assert_eq!(cfg.effective_patch_offsets(8), vec![-8, 0, 1]);
        let cfg2 = InterventionConfig {
            probe_layer: 2,
            ..InterventionConfig::default()
        };
        assert_eq!(cfg2.effective_patch_offsets(8), vec![-8, 0, 4]);
        let cfg3 = InterventionConfig {
            probe_layer: 7,
            ..InterventionConfig::default()
        };
        // Head room is 0: positive offset collapses onto 0 and dedups.
        assert_eq!(cfg3.effective_patch_offsets(8), vec![-8, 0]);
    }

    #[test]
    fn patch_report_structure_and_skips() {
        let (model, manifest, banks) = setup();
        let cfg = test_cfg();
        let report = run_patch_experiment(&model, &banks, &manifest, 4, &cfg).unwrap();
        assert!(report.n_targets > 0, "untrained model should fail trials");
        // offsets for L=3, probe 1: {-8, 0, min(4, 1)=1} -> -8 skipped.
        let offsets = cfg.effective_patch_offsets(3);
        assert_eq!(report.outcomes.len(), 3 * offsets.len());
        for o in &report.outcomes {
            if o.offset == -8 {
                assert!(o.skipped.is_some());
                assert!(o.layer.is_none());
            } else if o.skipped.is_none() {
                assert_eq!(o.n_eval + o.n_skipped, report.n_targets);
                assert!(o.bootstrap.is_some());
                let b = o.bootstrap.as_ref().unwrap();
                assert!(b.ci_lo <= b.point && b.point <= b.ci_hi);
                assert_eq!(o.delta_pp.unwrap(), b.point * 100.0);
            }
        }
    }

    #[test]
    fn identity_patch_with_own_state_keeps_failure() {
        // Patching a target with its *own* captured state must not change
        // the outcome; this exercises the donor plumbing end to end.
        let (model, manifest, banks) = setup();
        let bank = find_bank(&banks, ProbeKind::Acoustic, 4).unwrap();
        let row = bank.failed_indices()[0];
        let id = bank.meta.trial_ids[row].as_str();
        let trial = manifest.trials.iter().find(|t| t.trial_id == id).unwrap();
        for layer in 0..model.cfg.layers {
            let patch = PatchSpec {
                layer,
                vector: bank.hidden_at(row, layer).to_vec(),
                donor_trial: id.to_string(),
                donor_layer: layer,
            };
            let opts = ForwardOptions {
                patch: Some(patch),
                ..ForwardOptions::default()
            };
            let trace = model.forward(&trial.tokens, &trial.options, &opts).unwrap();
            assert_ne!(
                trace.predicted_option, trial.correct_option,
                "self-patch at layer {layer} changed the outcome"
            );
        }
    }

    #[test]
    fn donor_selection_never_picks_target_and_is_deterministic() {
        let pool = vec![3, 5, 7, 9];
        for pos in 0..20 {
            let d = select_donor(&pool, 5, DonorKind::CleanSameClass, pos, 2026).unwrap();
            assert_ne!(d, 5);
            let d2 = select_donor(&pool, 5, DonorKind::CleanSameClass, pos, 2026).unwrap();
            assert_eq!(d, d2);
        }
        assert!(select_donor(&[4], 4, DonorKind::WrongClass, 0, 2026).is_none());
        assert!(select_donor(&[], 4, DonorKind::WrongClass, 0, 2026).is_none());
    }

    #[test]
    fn mask_report_skips_suppression_at_n2() {
        let (model, manifest, banks) = setup();
        let cfg = test_cfg();
        let report = run_mask_experiment(&model, &banks, &manifest, 2, &cfg).unwrap();
        for o in &report.outcomes {
            if o.setting.starts_with("suppress") || o.setting == "random_control" {
                assert!(o.skipped.is_some(), "{} should be skipped at N=2", o.setting);
            } else if report.n_targets > 0 {
                assert!(o.skipped.is_none(), "{} unexpectedly skipped", o.setting);
                assert_eq!(o.n_eval, report.n_targets);
            }
        }
    }

    #[test]
    fn mask_report_full_at_n4() {
        let (model, manifest, banks) = setup();
        let cfg = test_cfg();
        let report = run_mask_experiment(&model, &banks, &manifest, 4, &cfg).unwrap();
        assert_eq!(report.main_layer, 2);
        // settings: 3 amplify + 3 suppress + control = 7; layers: main(2),
        // probe-4 invalid, probe+0 (1), probe+4 invalid, probe-8 invalid ->
        // dedup gives [2, 1] wait probe offsets {-8,-4,0,4}: 1-8<0, 1-4<0,
        // 1+0=1 ok, 1+4=5 >= 3 -> layers = [2, 1].
        let layers: std::collections::BTreeSet<usize> =
            report.outcomes.iter().filter_map(|o| o.layer).collect();
        assert_eq!(layers, [1usize, 2].into_iter().collect());
        assert_eq!(report.outcomes.len(), 7 * 2);
        for o in &report.outcomes {
            if o.skipped.is_none() {
                assert_eq!(o.n_eval, report.n_targets);
                assert!(o.bootstrap.is_some());
            }
        }
        // Determinism end to end.
        let again = run_mask_experiment(&model, &banks, &manifest, 4, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn multiplier_one_mask_is_a_no_op_on_outcomes() {
        let (model, manifest, banks) = setup();
        let bank = find_bank(&banks, ProbeKind::Acoustic, 4).unwrap();
        let row = bank.failed_indices()[0];
        let id = bank.meta.trial_ids[row].as_str();
        let trial = manifest.trials.iter().find(|t| t.trial_id == id).unwrap();
        let (a0, a1) = trial.anchor_span();
        let edit = MaskEdit::from_multiplier(2, (a0, a1), 1.0).unwrap();
        let opts = ForwardOptions {
            mask_edits: vec![edit],
            ..ForwardOptions::default()
        };
        let masked = model.forward(&trial.tokens, &trial.options, &opts).unwrap();
        let clean = model
            .forward(&trial.tokens, &trial.options, &ForwardOptions::default())
            .unwrap();
        assert_eq!(masked.option_logits, clean.option_logits);
    }

    #[test]
    fn bad_probe_layer_is_rejected() {
        let (model, manifest, banks) = setup();
        let cfg = InterventionConfig {
            probe_layer: 99,
            ..InterventionConfig::default()
        };
        assert!(run_patch_experiment(&model, &banks, &manifest, 4, &cfg).is_err());
        assert!(run_mask_experiment(&model, &banks, &manifest, 4, &cfg).is_err());
    }
}
