//! Attention statistics over the final decoding row: how much the model
//! looks back at the anchor turn, how concentrated its attention is, and how
//! far back it reaches on failed versus successful trials.
//!
//! All statistics use the head-averaged post-softmax attention of the final
//! query position at one block (the last block by default).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bank::TraceBank;
use crate::cka::build_pairs;
use crate::corpus::{CorpusManifest, ProbeKind, Trial, TurnSpan};
use crate::error::{Error, Result};

/// Tolerance for the cumulative-mass threshold: post-softmax rows sum to 1
/// only up to float round-off, and nine perfect tenths sum to just under 0.9
/// in binary.
const COV_EPS: f64 = 1e-9;

/// Per-turn attention masses: the row is split by the trial's turn spans and
/// summed within each span. Spans partition the sequence, so the masses sum
/// to the row total.
pub fn turn_masses(row: &[f32], spans: &[TurnSpan]) -> Vec<f64> {
    spans
        .iter()
        .map(|s| row[s.start..s.end].iter().map(|&v| v as f64).sum())
        .collect()
}

/// Anchor gap: mean attention per token over the anchor span minus the mean
/// of the per-filler-user-turn means. Errors when the trial has no filler
/// user turns (N = 2).
pub fn anchor_gap(row: &[f32], trial: &Trial) -> Result<f64> {
    let fillers = trial.filler_user_spans();
    if fillers.is_empty() {
        return Err(Error::config(format!(
            "anchor gap undefined for N={}: no filler user turns",
            trial.n_turns
        )));
    }
    let span_mean = |start: usize, end: usize| -> f64 {
        row[start..end].iter().map(|&v| v as f64).sum::<f64>() / (end - start) as f64
    };
    let (a0, a1) = trial.anchor_span();
    let anchor = span_mean(a0, a1);
    let filler_mean = fillers
        .iter()
        .map(|s| span_mean(s.start, s.end))
        .sum::<f64>()
        / fillers.len() as f64;
    Ok(anchor - filler_mean)
}

/// Minimum number of turns that jointly hold at least 0.9 attention mass.
/// Turns are taken in decreasing mass order, ties resolved toward the
/// earlier turn. Errors if the total mass itself is below 0.9 (the row was
/// not a full post-softmax distribution).
pub fn cov90(masses: &[f64]) -> Result<usize> {
    let total: f64 = masses.iter().sum();
    if total < 0.9 - COV_EPS {
        return Err(Error::numeric(format!(
            "cov90: total turn mass {total} is below 0.9; expected a full attention row"
        )));
    }
    let mut order: Vec<usize> = (0..masses.len()).collect();
    // Decreasing by mass; equal masses keep the earlier turn first.
    order.sort_by(|&a, &b| {
        masses[b]
            .partial_cmp(&masses[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut cum = 0.0;
    for (count, &idx) in order.iter().enumerate() {
        cum += masses[idx];
        if cum >= 0.9 - COV_EPS {
            return Ok(count + 1);
        }
    }
    Err(Error::numeric(
        "cov90: cumulative mass never reached 0.9".to_string(),
    ))
}

/// Attention-weighted mean look-back distance, in turns, from the probe turn.
pub fn mean_turn_distance(masses: &[f64], total_turns: usize) -> f64 {
    let last = total_turns - 1;
    let total: f64 = masses.iter().sum();
    masses
        .iter()
        .enumerate()
        .map(|(t, &m)| m * (last - t) as f64)
        .sum::<f64>()
        / total
}

/// Rounds to two decimals (half away from zero).
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// The matched distance delta as reported: both group means are compared and
/// the difference is rounded to two decimals.
pub fn delta_d(mean_failed: f64, mean_success: f64) -> f64 {
    round2(mean_failed - mean_success)
}

/// Per-(N) attention statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnCell {
    pub n_turns: usize,
    pub trials: usize,
    pub failed: usize,
    /// Mean anchor gap over failed / successful trials (None when skipped).
    pub gap_failed: Option<f64>,
    pub gap_success: Option<f64>,
    pub gap_skipped: Option<String>,
    /// Mean cov90 over failed / successful trials.
    pub cov90_failed: Option<f64>,
    pub cov90_success: Option<f64>,
    /// Class-matched mean look-back distances and their rounded delta.
    pub dist_failed: Option<f64>,
    pub dist_success: Option<f64>,
    pub delta_d: Option<f64>,
    pub matched_pairs: usize,
    pub matched_skips: Vec<String>,
}

/// Attention statistics report over every context length of one probe kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnReport {
    pub kind: ProbeKind,
    /// Block index whose final decoding row is analyzed.
    pub layer: usize,
    pub cells: Vec<AttnCell>,
}

/// Runs the attention statistics for every bank of `kind`, using the
/// head-averaged decoding row at `layer` (block index).
pub fn attn_analysis(
    banks: &[TraceBank],
    manifest: &CorpusManifest,
    kind: ProbeKind,
    layer: usize,
    max_pairs: usize,
    seed: u64,
) -> Result<AttnReport> {
    let by_id: BTreeMap<&str, &Trial> = manifest
        .trials
        .iter()
        .map(|t| (t.trial_id.as_str(), t))
        .collect();
    let selected: Vec<&TraceBank> = banks.iter().filter(|b| b.meta.kind == kind).collect();
    if selected.is_empty() {
        return Err(Error::config(format!(
            "no banks for kind {:?}; run capture first",
            kind
        )));
    }
    let mut cells = Vec::new();
    for bank in selected {
        if layer >= bank.meta.layers {
            return Err(Error::config(format!(
                "attention layer {layer} out of range for {} blocks",
                bank.meta.layers
            )));
        }
        let trials = bank.meta.trials();
        let mut gaps = vec![None::<f64>; trials];
        let mut covs = vec![0.0f64; trials];
        let mut dists = vec![0.0f64; trials];
        let mut gap_skipped = None;
        for i in 0..trials {
            let id = bank.meta.trial_ids[i].as_str();
            let trial = *by_id.get(id).ok_or_else(|| {
                Error::config(format!("bank trial {id} not present in the manifest"))
            })?;
            let row = bank.attn_row_head_mean(i, layer);
            let masses = turn_masses(&row, &trial.turn_spans);
            covs[i] = cov90(&masses)? as f64;
            dists[i] = mean_turn_distance(&masses, trial.turn_spans.len());
            match anchor_gap(&row, trial) {
                Ok(g) => gaps[i] = Some(g),
                Err(e) => {
                    gap_skipped.get_or_insert_with(|| e.to_string());
                }
            }
        }

        let failed_idx = bank.failed_indices();
        let success_idx = bank.correct_indices();
        let mean_over = |vals: &[f64], idx: &[usize]| -> Option<f64> {
            if idx.is_empty() {
                None
            } else {
                Some(idx.iter().map(|&i| vals[i]).sum::<f64>() / idx.len() as f64)
            }
        };
        let gap_over = |idx: &[usize]| -> Option<f64> {
            let vals: Vec<f64> = idx.iter().filter_map(|&i| gaps[i]).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };

        // Class-matched distance comparison.
        let classes = bank.meta.classes.iter().copied().max().map(|m| m + 1).unwrap_or(0);
        let pair_set = build_pairs(
            &bank.meta.classes,
            &failed_idx,
            &bank.meta.classes,
            &success_idx,
            classes,
            max_pairs,
            seed,
            "attn.pairs",
        );
        let (dist_failed, dist_success, delta) = if pair_set.pairs.is_empty() {
            (None, None, None)
        } else {
            let df = pair_set.pairs.iter().map(|&(l, _)| dists[l]).sum::<f64>()
                / pair_set.pairs.len() as f64;
            let ds = pair_set.pairs.iter().map(|&(_, r)| dists[r]).sum::<f64>()
                / pair_set.pairs.len() as f64;
            (Some(df), Some(ds), Some(delta_d(df, ds)))
        };

        cells.push(AttnCell {
            n_turns: bank.meta.n_turns,
            trials,
            failed: failed_idx.len(),
            gap_failed: if gap_skipped.is_none() { gap_over(&failed_idx) } else { None },
            gap_success: if gap_skipped.is_none() { gap_over(&success_idx) } else { None },
            gap_skipped,
            cov90_failed: mean_over(&covs, &failed_idx),
            cov90_success: mean_over(&covs, &success_idx),
            dist_failed,
            dist_success,
            delta_d: delta,
            matched_pairs: pair_set.pairs.len(),
            matched_skips: pair_set.skipped,
        });
    }
    Ok(AttnReport { kind, layer, cells })
}
