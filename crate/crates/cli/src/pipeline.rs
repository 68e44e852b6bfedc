//! Pipeline stages. Each stage reads its upstream artifacts from the output
//! directory, does its work, and writes its own artifacts atomically. A
//! missing upstream artifact is reported with the subcommand that produces
//! it.

use std::fs;

use serde::{Deserialize, Serialize};

use echoprobe_core::attnstats::{attn_analysis, AttnReport};
use echoprobe_core::bank::{capture_banks, load_banks, save_banks};
use echoprobe_core::cka::{cka_analysis, CkaReport, Comparison};
use echoprobe_core::corpus::{build_corpus, load_jsonl, write_jsonl, CorpusManifest, ProbeKind};
use echoprobe_core::error::{Error, Result};
use echoprobe_core::interventions::{
    run_mask_experiment, run_patch_experiment, MaskReport, PatchReport,
};
use echoprobe_core::metrics::{accuracy_table, delta_profile, AccuracyTable, OutcomeRow};
use echoprobe_core::model::{batch_eval, Model, TrainReport, TrialOutcome};
use echoprobe_core::probes::{probe_sweep, ProbeReport};

use crate::config::RunConfig;
use crate::io::{atomic_write, atomic_write_json, read_json, Paths};

// ---------------------------------------------------------------------------
// Artifact wrappers (field order is the on-disk order; keep it stable)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainArtifact {
    pub provenance: String,
    pub report: TrainReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptureArtifact {
    pub provenance: String,
    pub accuracy: AccuracyTable,
    /// Differential degradation per context length.
    pub delta: Vec<(usize, f64)>,
    pub outcomes: Vec<TrialOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeArtifact {
    pub provenance: String,
    pub acoustic: ProbeReport,
    pub semantic: ProbeReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkaEntry {
    pub n_turns: usize,
    pub comparison: Comparison,
    pub skipped: Option<String>,
    pub report: Option<CkaReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkaArtifact {
    pub provenance: String,
    pub entries: Vec<CkaEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnArtifact {
    pub provenance: String,
    pub layer: usize,
    pub acoustic: AttnReport,
    pub semantic: AttnReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchArtifact {
    pub provenance: String,
    pub reports: Vec<PatchReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskArtifact {
    pub provenance: String,
    pub reports: Vec<MaskReport>,
}

/// The assembled report: every analysis artifact in one document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullReport {
    pub provenance: String,
    pub accuracy: AccuracyTable,
    pub delta: Vec<(usize, f64)>,
    pub probe: ProbeArtifact,
    pub cka: CkaArtifact,
    pub attn: AttnArtifact,
    pub patch: PatchArtifact,
    pub mask: MaskArtifact,
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// gen: build the main corpus and write it as JSONL.
pub fn stage_gen(cfg: &RunConfig, paths: &Paths) -> Result<String> {
    let manifest = build_corpus(&cfg.corpus)?;
    let mut buf = Vec::new();
    write_jsonl(&manifest, &mut buf)?;
    atomic_write(&paths.corpus(), &buf)?;
    Ok(format!(
        "gen: wrote {} trials ({} classes x {:?} lengths x {} per cell x 2 kinds) to {}",
        manifest.trials.len(),
        cfg.corpus.classes,
        cfg.corpus.lengths,
        cfg.corpus.per_cell,
        paths.corpus().display()
    ))
}

/// train: build the disjoint training corpus, train the model on it, and
/// checkpoint the weights.
pub fn stage_train(cfg: &RunConfig, paths: &Paths) -> Result<String> {
    let train_manifest = build_corpus(&cfg.train_corpus())?;
    let mut buf = Vec::new();
    write_jsonl(&train_manifest, &mut buf)?;
    atomic_write(&paths.train_corpus(), &buf)?;

    let model_cfg = cfg.resolved_model(train_manifest.vocab_size);
    let mut model = Model::init(model_cfg)?;
    let report = echoprobe_core::model::train(&mut model, &train_manifest, &cfg.train)?;

    // Checkpoint atomically: save to a temp stem, then rename both files.
    let tmp_stem = paths.out.join(format!(".model.tmp{}", std::process::id()));
    model.save(&tmp_stem)?;
    let stem = paths.model_stem();
    fs::rename(
        tmp_stem.with_extension("bin"),
        stem.with_extension("bin"),
    )?;
    fs::rename(
        tmp_stem.with_extension("json"),
        stem.with_extension("json"),
    )?;

    let heldout_summary: Vec<String> = report
        .heldout
        .cells
        .iter()
        .map(|c| format!("{}@{}={:.2}", c.kind.tag(), c.n_turns, c.accuracy))
        .collect();
    atomic_write_json(
        &paths.train_report(),
        &TrainArtifact {
            provenance: cfg.hash(),
            report,
        },
    )?;
    Ok(format!(
        "train: {} steps on {} trials; held-out [{}]",
        cfg.train.steps,
        train_manifest.trials.len(),
        heldout_summary.join(", ")
    ))
}

fn load_model(paths: &Paths) -> Result<Model> {
    Model::load(&paths.model_stem())
}

fn load_corpus(paths: &Paths) -> Result<CorpusManifest> {
    load_jsonl(&paths.corpus())
}

/// capture: run the trained model over the main corpus, storing hidden
/// states, attention rows, outcomes, and the degradation profile.
pub fn stage_capture(cfg: &RunConfig, paths: &Paths) -> Result<String> {
    let manifest = load_corpus(paths)?;
    let model = load_model(paths)?;
    if model.cfg.vocab_size != manifest.vocab_size {
        return Err(Error::config(format!(
            "model vocab {} does not match corpus vocab {}; regenerate or retrain",
            model.cfg.vocab_size, manifest.vocab_size
        )));
    }
    let provenance = cfg.hash();
    let banks = capture_banks(&model, &manifest, &provenance)?;

    // Swap the banks directory in atomically.
    let tmp_dir = paths.out.join(format!(".banks.tmp{}", std::process::id()));
    if tmp_dir.exists() {
        fs::remove_dir_all(&tmp_dir)?;
    }
    save_banks(&banks, &tmp_dir)?;
    let final_dir = paths.banks_dir();
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir)?;
    }
    fs::rename(&tmp_dir, &final_dir)?;

    let outcomes = batch_eval(&model, &manifest.trials)?;
    let rows: Vec<OutcomeRow> = outcomes
        .iter()
        .map(|o| OutcomeRow {
            kind: o.probe_kind,
            n_turns: o.n_turns,
            correct: o.correct,
        })
        .collect();
    let accuracy = accuracy_table(&rows)?;
    let delta = delta_profile(&accuracy)?;
    let acc_summary: Vec<String> = accuracy
        .cells
        .iter()
        .map(|c| format!("{}@{}={:.2}", c.kind.tag(), c.n_turns, c.accuracy))
        .collect();
    atomic_write_json(
        &paths.outcomes(),
        &CaptureArtifact {
            provenance,
            accuracy,
            delta,
            outcomes,
        },
    )?;
    Ok(format!(
        "capture: {} banks over {} trials; accuracy [{}]",
        banks.len(),
        manifest.trials.len(),
        acc_summary.join(", ")
    ))
}

/// probe: layer-wise linear probing sweeps for both probe kinds.
pub fn stage_probe(cfg: &RunConfig, paths: &Paths) -> Result<String> {
    let manifest = load_corpus(paths)?;
    let banks = load_banks(&paths.banks_dir(), &manifest.config.lengths)?;
    let classes = manifest.config.classes;
    let acoustic = probe_sweep(&banks, ProbeKind::Acoustic, classes, &cfg.probe)?;
    let semantic = probe_sweep(&banks, ProbeKind::Semantic, classes, &cfg.probe)?;
    let probed = acoustic
        .cells
        .iter()
        .chain(semantic.cells.iter())
        .filter(|c| c.skipped.is_none())
        .count();
    let skipped = acoustic.cells.len() + semantic.cells.len() - probed;
    atomic_write_json(
        &paths.probe_report(),
        &ProbeArtifact {
            provenance: cfg.hash(),
            acoustic,
            semantic,
        },
    )?;
    Ok(format!(
        "probe: {probed} cells probed, {skipped} skipped; report at {}",
        paths.probe_report().display()
    ))
}

/// cka: failed-versus-success representation similarity, per length and
/// comparison.
pub fn stage_cka(cfg: &RunConfig, paths: &Paths) -> Result<String> {
    let manifest = load_corpus(paths)?;
    let banks = load_banks(&paths.banks_dir(), &manifest.config.lengths)?;
    let mut entries = Vec::new();
    for n in cfg.cka_lengths() {
        for &comparison in &cfg.cka.comparisons {
            match cka_analysis(&banks, n, comparison, cfg.cka.max_pairs, cfg.cka.seed) {
                Ok(report) => entries.push(CkaEntry {
                    n_turns: n,
                    comparison,
                    skipped: None,
                    report: Some(report),
                }),
                // A cell that cannot form pairs is recorded, not fatal.
                Err(Error::Config(msg)) => entries.push(CkaEntry {
                    n_turns: n,
                    comparison,
                    skipped: Some(msg),
                    report: None,
                }),
                Err(other) => return Err(other),
            }
        }
    }
    let ran = entries.iter().filter(|e| e.report.is_some()).count();
    let skipped = entries.len() - ran;
    atomic_write_json(
        &paths.cka_report(),
        &CkaArtifact {
            provenance: cfg.hash(),
            entries,
        },
    )?;
    Ok(format!("cka: {ran} settings analyzed, {skipped} skipped"))
}

/// attn: anchor gap, coverage, and matched look-back distances.
pub fn stage_attn(cfg: &RunConfig, paths: &Paths) -> Result<String> {
    let manifest = load_corpus(paths)?;
    let banks = load_banks(&paths.banks_dir(), &manifest.config.lengths)?;
    let layers = banks
        .first()
        .map(|b| b.meta.layers)
        .ok_or_else(|| Error::config("no banks found"))?;
    let layer = cfg.attn.layer.unwrap_or(layers - 1);
    let acoustic = attn_analysis(
        &banks,
        &manifest,
        ProbeKind::Acoustic,
        layer,
        cfg.attn.max_pairs,
        cfg.attn.seed,
    )?;
    let semantic = attn_analysis(
        &banks,
        &manifest,
        ProbeKind::Semantic,
        layer,
        cfg.attn.max_pairs,
        cfg.attn.seed,
    )?;
    atomic_write_json(
        &paths.attn_report(),
        &AttnArtifact {
            provenance: cfg.hash(),
            layer,
            acoustic,
            semantic,
        },
    )?;
    Ok(format!(
        "attn: decoding-row statistics at block {layer} for {} lengths",
        manifest.config.lengths.len()
    ))
}

/// patch: donor-state rescue experiments per context length.
pub fn stage_patch(cfg: &RunConfig, paths: &Paths) -> Result<String> {
    let manifest = load_corpus(paths)?;
    let model = load_model(paths)?;
    let banks = load_banks(&paths.banks_dir(), &manifest.config.lengths)?;
    let mut reports = Vec::new();
    let mut lengths = manifest.config.lengths.clone();
    lengths.sort_unstable();
    for n in lengths {
        reports.push(run_patch_experiment(
            &model,
            &banks,
            &manifest,
            n,
            &cfg.interventions,
        )?);
    }
    let targets: usize = reports.iter().map(|r| r.n_targets).sum();
    atomic_write_json(
        &paths.patch_report(),
        &PatchArtifact {
            provenance: cfg.hash(),
            reports,
        },
    )?;
    Ok(format!("patch: rescue sweep over {targets} failed targets"))
}

/// mask: attention-mask amplification/suppression experiments per length.
pub fn stage_mask(cfg: &RunConfig, paths: &Paths) -> Result<String> {
    let manifest = load_corpus(paths)?;
    let model = load_model(paths)?;
    let banks = load_banks(&paths.banks_dir(), &manifest.config.lengths)?;
    let mut reports = Vec::new();
    let mut lengths = manifest.config.lengths.clone();
    lengths.sort_unstable();
    for n in lengths {
        reports.push(run_mask_experiment(
            &model,
            &banks,
            &manifest,
            n,
            &cfg.interventions,
        )?);
    }
    let targets: usize = reports.iter().map(|r| r.n_targets).sum();
    atomic_write_json(
        &paths.mask_report(),
        &MaskArtifact {
            provenance: cfg.hash(),
            reports,
        },
    )?;
    Ok(format!("mask: attention-edit sweep over {targets} failed targets"))
}

/// report: assemble the stored analysis artifacts into one document plus CSV
/// tables. Nothing is recomputed here.
pub fn stage_report(_cfg: &RunConfig, paths: &Paths) -> Result<String> {
    let capture: CaptureArtifact = read_json(&paths.outcomes(), "capture")?;
    let probe: ProbeArtifact = read_json(&paths.probe_report(), "probe")?;
    let cka: CkaArtifact = read_json(&paths.cka_report(), "cka")?;
    let attn: AttnArtifact = read_json(&paths.attn_report(), "attn")?;
    let patch: PatchArtifact = read_json(&paths.patch_report(), "patch")?;
    let mask: MaskArtifact = read_json(&paths.mask_report(), "mask")?;

    // All artifacts must come from the same configuration.
    let provenances = [
        &capture.provenance,
        &probe.provenance,
        &cka.provenance,
        &attn.provenance,
        &patch.provenance,
        &mask.provenance,
    ];
    if provenances.iter().any(|p| *p != provenances[0]) {
        return Err(Error::config(
            "artifacts were produced by different configurations; rerun the pipeline",
        ));
    }

    let dir = paths.report_dir();
    fs::create_dir_all(&dir)?;

    // --- CSV tables -------------------------------------------------------
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();

    let mut accuracy_csv = String::from("kind,n_turns,count,accuracy\n");
    for c in &capture.accuracy.cells {
        accuracy_csv.push_str(&format!(
            "{},{},{},{}\n",
            c.kind.tag(),
            c.n_turns,
            c.count,
            c.accuracy
        ));
    }
    atomic_write(&dir.join("accuracy.csv"), accuracy_csv.as_bytes())?;

    let mut delta_csv = String::from("n_turns,delta\n");
    for (n, d) in &capture.delta {
        delta_csv.push_str(&format!("{n},{d}\n"));
    }
    atomic_write(&dir.join("delta.csv"), delta_csv.as_bytes())?;

    let mut probe_csv = String::from(
        "kind,n_turns,layer,subset,rows,dropped_rows,folds,accuracy,control,skipped\n",
    );
    for (kind, report) in [("acoustic", &probe.acoustic), ("semantic", &probe.semantic)] {
        for c in &report.cells {
            probe_csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                kind,
                c.n_turns,
                c.layer,
                c.subset.tag(),
                c.rows,
                c.dropped_rows,
                c.folds,
                fmt_opt(c.accuracy),
                fmt_opt(c.control_accuracy),
                c.skipped.clone().unwrap_or_default().replace(',', ";")
            ));
        }
    }
    atomic_write(&dir.join("probe.csv"), probe_csv.as_bytes())?;

    let mut cka_csv = String::from(
        "n_turns,comparison,layer,cka_fail_success,cka_control,delta\n",
    );
    let mut cka_summary_csv = String::from(
        "n_turns,comparison,pairs,control_pairs,drop_layer,phase1,phase2,phase3,skipped\n",
    );
    for e in &cka.entries {
        match &e.report {
            Some(r) => {
                for l in 0..r.diag_fail_success.len() {
                    cka_csv.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        e.n_turns,
                        e.comparison.tag(),
                        l,
                        r.diag_fail_success[l],
                        r.diag_control[l],
                        r.delta[l]
                    ));
                }
                cka_summary_csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},\n",
                    e.n_turns,
                    e.comparison.tag(),
                    r.n_pairs,
                    r.n_control_pairs,
                    r.drop_layer,
                    r.phase_means[0],
                    r.phase_means[1],
                    r.phase_means[2]
                ));
            }
            None => {
                cka_summary_csv.push_str(&format!(
                    "{},{},0,0,,,,,{}\n",
                    e.n_turns,
                    e.comparison.tag(),
                    e.skipped.clone().unwrap_or_default().replace(',', ";")
                ));
            }
        }
    }
    atomic_write(&dir.join("cka_layers.csv"), cka_csv.as_bytes())?;
    atomic_write(&dir.join("cka_summary.csv"), cka_summary_csv.as_bytes())?;

    let mut attn_csv = String::from(
        "kind,n_turns,trials,failed,gap_failed,gap_success,cov90_failed,cov90_success,\
         dist_failed,dist_success,delta_d,matched_pairs\n",
    );
    for (kind, report) in [("acoustic", &attn.acoustic), ("semantic", &attn.semantic)] {
        for c in &report.cells {
            attn_csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                kind,
                c.n_turns,
                c.trials,
                c.failed,
                fmt_opt(c.gap_failed),
                fmt_opt(c.gap_success),
                fmt_opt(c.cov90_failed),
                fmt_opt(c.cov90_success),
                fmt_opt(c.dist_failed),
                fmt_opt(c.dist_success),
                fmt_opt(c.delta_d),
                c.matched_pairs
            ));
        }
    }
    atomic_write(&dir.join("attn.csv"), attn_csv.as_bytes())?;

    let mut patch_csv = String::from(
        "n_turns,donor,offset,layer,n_eval,n_skipped,n_flipped,delta_pp,ci_lo,ci_hi,p,skipped\n",
    );
    for r in &patch.reports {
        for o in &r.outcomes {
            let (lo, hi, p) = o
                .bootstrap
                .as_ref()
                .map(|b| {
                    (
                        b.ci_lo.to_string(),
                        b.ci_hi.to_string(),
                        b.p_one_sided.to_string(),
                    )
                })
                .unwrap_or_default();
            patch_csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.n_turns,
                o.setting,
                o.offset,
                o.layer.map(|l| l.to_string()).unwrap_or_default(),
                o.n_eval,
                o.n_skipped,
                o.n_flipped,
                fmt_opt(o.delta_pp),
                lo,
                hi,
                p,
                o.skipped.clone().unwrap_or_default().replace(',', ";")
            ));
        }
    }
    atomic_write(&dir.join("patch.csv"), patch_csv.as_bytes())?;

    let mut mask_csv = String::from(
        "n_turns,setting,offset,layer,n_eval,n_flipped,delta_pp,ci_lo,ci_hi,p,skipped\n",
    );
    for r in &mask.reports {
        for o in &r.outcomes {
            let (lo, hi, p) = o
                .bootstrap
                .as_ref()
                .map(|b| {
                    (
                        b.ci_lo.to_string(),
                        b.ci_hi.to_string(),
                        b.p_one_sided.to_string(),
                    )
                })
                .unwrap_or_default();
            mask_csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.n_turns,
                o.setting,
                o.offset,
                o.layer.map(|l| l.to_string()).unwrap_or_default(),
                o.n_eval,
                o.n_flipped,
                fmt_opt(o.delta_pp),
                lo,
                hi,
                p,
                o.skipped.clone().unwrap_or_default().replace(',', ";")
            ));
        }
    }
    atomic_write(&dir.join("mask.csv"), mask_csv.as_bytes())?;

    // --- Markdown summary --------------------------------------------------
    let mut md = String::new();
    md.push_str("# echoprobe report\n\n");
    md.push_str(&format!("Configuration hash: `{}`\n\n", capture.provenance));
    md.push_str("## Accuracy by kind and context length\n\n");
    md.push_str("| kind | N | accuracy |\n|---|---|---|\n");
    for c in &capture.accuracy.cells {
        md.push_str(&format!(
            "| {} | {} | {:.4} |\n",
            c.kind.tag(),
            c.n_turns,
            c.accuracy
        ));
    }
    md.push_str("\n## Differential degradation\n\n| N | delta |\n|---|---|\n");
    for (n, d) in &capture.delta {
        md.push_str(&format!("| {n} | {d:.4} |\n"));
    }
    md.push_str("\n## Probe peaks (all-trials subset)\n\n");
    md.push_str("| kind | N | best layer | accuracy |\n|---|---|---|---|\n");
    for (kind, report) in [("acoustic", &probe.acoustic), ("semantic", &probe.semantic)] {
        let mut lengths: Vec<usize> = report.cells.iter().map(|c| c.n_turns).collect();
        lengths.sort_unstable();
        lengths.dedup();
        for n in lengths {
            let best = report
                .cells
                .iter()
                .filter(|c| {
                    c.n_turns == n
                        && c.subset == echoprobe_core::probes::Subset::All
                        && c.accuracy.is_some()
                })
                .max_by(|a, b| {
                    a.accuracy
                        .partial_cmp(&b.accuracy)
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
            if let Some(cell) = best {
                md.push_str(&format!(
                    "| {} | {} | {} | {:.4} |\n",
                    kind,
                    n,
                    cell.layer,
                    cell.accuracy.unwrap()
                ));
            }
        }
    }
    md.push_str("\n## Representational divergence (phase means of control - fail/success)\n\n");
    md.push_str("| N | comparison | phase I | phase II | phase III | drop layer |\n|---|---|---|---|---|---|\n");
    for e in &cka.entries {
        if let Some(r) = &e.report {
            md.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.4} | {} |\n",
                e.n_turns,
                e.comparison.tag(),
                r.phase_means[0],
                r.phase_means[1],
                r.phase_means[2],
                r.drop_layer
            ));
        }
    }
    md.push_str("\n## Attention look-back (acoustic)\n\n");
    md.push_str("| N | gap failed | gap success | cov90 failed | cov90 success | delta_d |\n|---|---|---|---|---|---|\n");
    for c in &attn.acoustic.cells {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            c.n_turns,
            c.gap_failed.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            c.gap_success.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            c.cov90_failed.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
            c.cov90_success.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
            c.delta_d.map(|v| format!("{v:+.2}")).unwrap_or_else(|| "-".into()),
        ));
    }
    md.push_str("\n## Patch rescue at offset 0\n\n");
    md.push_str("| N | donor | rescued / evaluated | delta (pp) | p |\n|---|---|---|---|---|\n");
    for r in &patch.reports {
        for o in &r.outcomes {
            if o.offset == 0 && o.skipped.is_none() {
                md.push_str(&format!(
                    "| {} | {} | {} / {} | {} | {} |\n",
                    r.n_turns,
                    o.setting,
                    o.n_flipped,
                    o.n_eval,
                    o.delta_pp.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into()),
                    o.bootstrap
                        .as_ref()
                        .map(|b| format!("{:.4}", b.p_one_sided))
                        .unwrap_or_else(|| "-".into())
                ));
            }
        }
    }
    md.push_str("\n## Mask edits at the final block\n\n");
    md.push_str("| N | setting | flipped / evaluated | delta (pp) |\n|---|---|---|---|\n");
    for r in &mask.reports {
        for o in &r.outcomes {
            if o.layer == Some(r.main_layer) && o.skipped.is_none() {
                md.push_str(&format!(
                    "| {} | {} | {} / {} | {} |\n",
                    r.n_turns,
                    o.setting,
                    o.n_flipped,
                    o.n_eval,
                    o.delta_pp.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into())
                ));
            }
        }
    }
    atomic_write(&dir.join("report.md"), md.as_bytes())?;

    let full = FullReport {
        provenance: capture.provenance.clone(),
        accuracy: capture.accuracy.clone(),
        delta: capture.delta.clone(),
        probe,
        cka,
        attn,
        patch,
        mask,
    };
    atomic_write_json(&dir.join("report.json"), &full)?;

    Ok(format!(
        "report: assembled into {} (report.json, report.md, 8 csv tables)",
        dir.display()
    ))
}
