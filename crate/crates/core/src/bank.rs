//! Trace banks: captured residual-stream states and attention rows for every
//! trial of a corpus, grouped per (probe kind, context length) cell.
//!
//! Each bank holds, per trial:
//!   * `layers + 1` final-position hidden states (entry 0 = embedding output),
//!   * the post-softmax attention of the final query row, per layer and head.
//!
//! On disk a bank is a raw little-endian f32 blob (`hidden` then `attention`)
//! plus a JSON sidecar with shapes, trial ids, outcomes, and provenance, so a
//! re-run can verify it is reading what it thinks it is.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, ProbeKind, Trial};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};

/// Sidecar metadata for one bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub kind: ProbeKind,
    pub n_turns: usize,
    /// Transformer depth L; `hidden` carries L+1 states per trial.
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Token count of every sequence in this cell.
    pub seq_len: usize,
    pub trial_ids: Vec<String>,
    /// Anchor class per trial.
    pub classes: Vec<usize>,
    /// Model-correctness per trial.
    pub outcomes: Vec<bool>,
    pub predicted: Vec<usize>,
    /// Free-form provenance string (config hash) from the producer.
    pub provenance: String,
}

impl BankMeta {
    pub fn trials(&self) -> usize {
        self.trial_ids.len()
    }

    fn hidden_len(&self) -> usize {
        self.trials() * (self.layers + 1) * self.width
    }

    fn attention_len(&self) -> usize {
        self.trials() * self.layers * self.heads * self.seq_len
    }
}

/// Captured activations for one (kind, N) cell, trials in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceBank {
    pub meta: BankMeta,
    /// `[trial][layer 0..=L][dim]`, row-major.
    pub hidden: Vec<f32>,
    /// `[trial][layer 0..L][head][key 0..seq_len]`, row-major.
    pub attention: Vec<f32>,
}

impl TraceBank {
    /// Hidden state of `trial` at trace index `layer` (0 = embedding).
    pub fn hidden_at(&self, trial: usize, layer: usize) -> &[f32] {
        let d = self.meta.width;
        let per = (self.meta.layers + 1) * d;
        let base = trial * per + layer * d;
        &self.hidden[base..base + d]
    }

    /// Final-row attention of `trial` at `layer` (0-based block) and `head`.
    pub fn attn_row(&self, trial: usize, layer: usize, head: usize) -> &[f32] {
        let t = self.meta.seq_len;
        let per_trial = self.meta.layers * self.meta.heads * t;
        let base = trial * per_trial + (layer * self.meta.heads + head) * t;
        &self.attention[base..base + t]
    }

    /// Head-averaged final-row attention at `layer`.
    pub fn attn_row_head_mean(&self, trial: usize, layer: usize) -> Vec<f32> {
        let t = self.meta.seq_len;
        let h = self.meta.heads;
        let mut out = vec![0.0f32; t];
        for head in 0..h {
            let row = self.attn_row(trial, layer, head);
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= h as f32;
        }
        out
    }

    /// Indices of trials the model answered incorrectly.
    pub fn failed_indices(&self) -> Vec<usize> {
        (0..self.meta.trials())
            .filter(|&i| !self.meta.outcomes[i])
            .collect()
    }

    /// Indices of trials the model answered correctly.
    pub fn correct_indices(&self) -> Vec<usize> {
        (0..self.meta.trials())
            .filter(|&i| self.meta.outcomes[i])
            .collect()
    }

    /// File stem for this cell, e.g. `bank_acoustic_n04`.
    pub fn stem(kind: ProbeKind, n_turns: usize) -> String {
        format!("bank_{}_n{:02}", kind.tag(), n_turns)
    }

    /// Writes `<dir>/<stem>.bin` and `<dir>/<stem>.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let stem = Self::stem(self.meta.kind, self.meta.n_turns);
        let bin = dir.join(format!("{stem}.bin"));
        let json = dir.join(format!("{stem}.json"));
        let mut bytes =
            Vec::with_capacity((self.hidden.len() + self.attention.len()) * 4);
        for &v in self.hidden.iter().chain(self.attention.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(&bin)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        let text = serde_json::to_string_pretty(&self.meta)?;
        fs::write(&json, text)?;
        Ok(())
    }

    /// Loads the bank for (kind, n_turns) from `dir`, validating shapes.
    pub fn load(dir: &Path, kind: ProbeKind, n_turns: usize) -> Result<TraceBank> {
        let stem = Self::stem(kind, n_turns);
        let json = dir.join(format!("{stem}.json"));
        let bin = dir.join(format!("{stem}.bin"));
        let text = fs::read_to_string(&json).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::missing(json.display().to_string(), "capture")
            } else {
                Error::Io(e)
            }
        })?;
        let meta: BankMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: json.display().to_string(),
            message: e.to_string(),
        })?;
        if meta.kind != kind || meta.n_turns != n_turns {
            return Err(Error::Format {
                path: json.display().to_string(),
                message: format!(
                    "sidecar is for ({:?}, N={}), expected ({:?}, N={})",
                    meta.kind, meta.n_turns, kind, n_turns
                ),
            });
        }
        let bytes = fs::read(&bin).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::missing(bin.display().to_string(), "capture")
            } else {
                Error::Io(e)
            }
        })?;
        let want = (meta.hidden_len() + meta.attention_len()) * 4;
        if bytes.len() != want {
            return Err(Error::Format {
                path: bin.display().to_string(),
                message: format!("expected {want} bytes, found {}", bytes.len()),
            });
        }
        let mut values = Vec::with_capacity(bytes.len() / 4);
        for chunk in bytes.chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let attention = values.split_off(meta.hidden_len());
        Ok(TraceBank {
            meta,
            hidden: values,
            attention,
        })
    }
}

/// Runs the model over every manifest trial with capture on and groups the
/// traces per (kind, N) cell. Banks come back sorted by (N, kind tag), trials
/// in manifest order within each bank.
pub fn capture_banks(
    model: &Model,
    manifest: &CorpusManifest,
    provenance: &str,
) -> Result<Vec<TraceBank>> {
    let cfg = &manifest.config;
    let l = model.cfg.layers;
    let d = model.cfg.width;
    let h = model.cfg.heads;

    let mut banks = Vec::new();
    let mut lengths = cfg.lengths.clone();
    lengths.sort_unstable();
    for &n in &lengths {
        for kind in [ProbeKind::Acoustic, ProbeKind::Semantic] {
            let trials: Vec<&Trial> = manifest
                .trials
                .iter()
                .filter(|t| t.n_turns == n && t.probe_kind == kind)
                .collect();
            if trials.is_empty() {
                continue;
            }
            let seq_len = trials[0].tokens.len();
            for t in &trials {
                if t.tokens.len() != seq_len {
                    return Err(Error::config(format!(
                        "trial {} length {} differs from cell length {seq_len}",
                        t.trial_id,
                        t.tokens.len()
                    )));
                }
            }

            // Order-preserving parallel capture.
            let traces: Result<Vec<_>> = trials
                .par_iter()
                .map(|t| model.forward(&t.tokens, &t.options, &ForwardOptions::capture()))
                .collect();
            let traces = traces?;

            let trials_n = trials.len();
            let mut hidden = Vec::with_capacity(trials_n * (l + 1) * d);
            let mut attention = Vec::with_capacity(trials_n * l * h * seq_len);
            let mut trial_ids = Vec::with_capacity(trials_n);
            let mut classes = Vec::with_capacity(trials_n);
            let mut outcomes = Vec::with_capacity(trials_n);
            let mut predicted = Vec::with_capacity(trials_n);
            for (trial, trace) in trials.iter().zip(&traces) {
                for layer in trace.hidden.iter() {
                    hidden.extend_from_slice(layer);
                }
                for layer in trace.attention.iter() {
                    for head in layer.iter() {
                        attention.extend_from_slice(head);
                    }
                }
                trial_ids.push(trial.trial_id.clone());
                classes.push(trial.anchor_class);
                outcomes.push(trace.predicted_option == trial.correct_option);
                predicted.push(trace.predicted_option);
            }

            banks.push(TraceBank {
                meta: BankMeta {
                    kind,
                    n_turns: n,
                    layers: l,
                    width: d,
                    heads: h,
                    seq_len,
                    trial_ids,
                    classes,
                    outcomes,
                    predicted,
                    provenance: provenance.to_string(),
                },
                hidden,
                attention,
            });
        }
    }
    Ok(banks)
}

/// Saves every bank into `dir` (created if needed).
pub fn save_banks(banks: &[TraceBank], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for b in banks {
        b.save(dir)?;
    }
    Ok(())
}

/// Loads the banks for all (kind, N) cells of `lengths` from `dir`.
pub fn load_banks(dir: &Path, lengths: &[usize]) -> Result<Vec<TraceBank>> {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut banks = Vec::new();
    for &n in &sorted {
        for kind in [ProbeKind::Acoustic, ProbeKind::Semantic] {
            banks.push(TraceBank::load(dir, kind, n)?);
        }
    }
    Ok(banks)
}

/// Finds the bank for (kind, n) in a loaded set.
pub fn find_bank<'a>(banks: &'a [TraceBank], kind: ProbeKind, n: usize) -> Result<&'a TraceBank> {
    banks
        .iter()
        .find(|b| b.meta.kind == kind && b.meta.n_turns == n)
        .ok_or_else(|| Error::config(format!("no bank for ({:?}, N={})", kind, n)))
}
