//! Layer-wise linear probing: can the anchor event class be read off the
//! final-position residual stream at each depth?
//!
//! The probe is multinomial logistic regression trained full-batch with an
//! AdamW-style optimizer (decoupled weight decay on the weight matrix only,
//! zeros init). Accuracies are stratified k-fold cross-validated, and every
//! probed cell has a label-shuffled control that should sit at chance.
//!
//! All probe math is f64, which keeps the finite-difference gradient check
//! tight and makes results independent of summation order at the tolerances
//! the acceptance suite uses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::TraceBank;
use crate::corpus::ProbeKind;
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;

/// Trainer settings for one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub lr: f64,
    /// Decoupled weight decay; never applied to the bias row.
    pub weight_decay: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Upper bound on folds; the effective k is `min(folds, smallest class)`.
    pub max_folds: usize,
    /// Seed for fold assignment and label shuffles.
    pub random_state: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 3e-3,
            weight_decay: 1e-4,
            epochs: 120,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_folds: 5,
            random_state: 0,
        }
    }
}

/// A trained probe: row-major `w` is `classes x dim`, plus a bias per class.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub classes: usize,
    pub dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl ProbeModel {
    fn zeros(classes: usize, dim: usize) -> ProbeModel {
        ProbeModel {
            classes,
            dim,
            w: vec![0.0; classes * dim],
            b: vec![0.0; classes],
        }
    }

    /// Class logits for one feature row.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let wrow = &self.w[c * self.dim..(c + 1) * self.dim];
                self.b[c] + wrow.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Predicted class (argmax, ties -> lowest index).
    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Mean cross-entropy and its gradient w.r.t. (w, b). Weight decay is
/// decoupled in the optimizer, so it is deliberately absent here — this is
/// the function the finite-difference check targets.
pub fn ce_loss_and_grad(
    w: &[f64],
    b: &[f64],
    features: &[f64],
    labels: &[usize],
    classes: usize,
    dim: usize,
) -> (f64, Vec<f64>, Vec<f64>) {
    let rows = labels.len();
    assert_eq!(features.len(), rows * dim);
    assert_eq!(w.len(), classes * dim);
    let mut gw = vec![0.0f64; classes * dim];
    let mut gb = vec![0.0f64; classes];
    let mut loss = 0.0f64;
    let inv = 1.0 / rows as f64;
    let mut logits = vec![0.0f64; classes];
    for r in 0..rows {
        let x = &features[r * dim..(r + 1) * dim];
        for c in 0..classes {
            let wrow = &w[c * dim..(c + 1) * dim];
            logits[c] = b[c] + wrow.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>();
        }
        let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - maxv).exp();
            denom += *l;
        }
        let label = labels[r];
        loss += -(logits[label] / denom).max(1e-300).ln() * inv;
        for c in 0..classes {
            let p = logits[c] / denom;
            let g = (p - if c == label { 1.0 } else { 0.0 }) * inv;
            gb[c] += g;
            let grow = &mut gw[c * dim..(c + 1) * dim];
            for (gv, &xv) in grow.iter_mut().zip(x) {
                *gv += g * xv;
            }
        }
    }
    (loss, gw, gb)
}

/// Trains a probe on the given rows (full batch, fixed epochs, zeros init).
pub fn train_probe(
    features: &[f64],
    labels: &[usize],
    classes: usize,
    dim: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeModel> {
    if labels.is_empty() {
        return Err(Error::config("cannot train a probe on zero rows"));
    }
    if features.len() != labels.len() * dim {
        return Err(Error::config(format!(
            "feature matrix {}x{} does not match {} labels",
            features.len() / dim.max(1),
            dim,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut model = ProbeModel::zeros(classes, dim);
    let mut mw = vec![0.0f64; classes * dim];
    let mut vw = vec![0.0f64; classes * dim];
    let mut mb = vec![0.0f64; classes];
    let mut vb = vec![0.0f64; classes];
    for epoch in 0..cfg.epochs {
        let (loss, gw, gb) =
            ce_loss_and_grad(&model.w, &model.b, features, labels, classes, dim);
        if !loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite probe loss at epoch {epoch}"
            )));
        }
        let t = (epoch + 1) as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for i in 0..model.w.len() {
            mw[i] = cfg.beta1 * mw[i] + (1.0 - cfg.beta1) * gw[i];
            vw[i] = cfg.beta2 * vw[i] + (1.0 - cfg.beta2) * gw[i] * gw[i];
            let mhat = mw[i] / bc1;
            let vhat = vw[i] / bc2;
            model.w[i] -=
                cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * model.w[i]);
        }
        for i in 0..model.b.len() {
            mb[i] = cfg.beta1 * mb[i] + (1.0 - cfg.beta1) * gb[i];
            vb[i] = cfg.beta2 * vb[i] + (1.0 - cfg.beta2) * gb[i] * gb[i];
            let mhat = mb[i] / bc1;
            let vhat = vb[i] / bc2;
            model.b[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps));
        }
    }
    Ok(model)
}

/// Per-class counts for `labels` over `classes` bins.
pub fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// Stratified fold assignment: within each class, indices are shuffled with a
/// class-keyed stream and dealt round-robin. Returns `fold_of[row]`.
pub fn stratified_folds(
    labels: &[usize],
    classes: usize,
    k: usize,
    random_state: u64,
) -> Vec<usize> {
    let mut fold_of = vec![0usize; labels.len()];
    for class in 0..classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let mut rng = rng::stream(random_state, "probe.folds", &[class as u64]);
        members.shuffle(&mut rng);
        for (pos, idx) in members.iter().enumerate() {
            fold_of[*idx] = pos % k;
        }
    }
    fold_of
}

/// Cross-validated accuracy with `k = min(max_folds, smallest present class
/// count)`. Classes with zero rows are allowed (unbalanced subsets such as
/// failed trials may miss classes entirely); a class with exactly one row
/// cannot be stratified and is an error, as is a subset with fewer than two
/// distinct classes. Errors carry the per-class counts.
pub fn cross_validated_accuracy(
    features: &[f64],
    labels: &[usize],
    classes: usize,
    dim: usize,
    cfg: &ProbeConfig,
) -> Result<(f64, usize)> {
    let counts = class_counts(labels, classes);
    if counts.iter().any(|&c| c == 1) {
        return Err(Error::TooFewPerClass(counts));
    }
    let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if present.len() < 2 {
        return Err(Error::TooFewPerClass(counts));
    }
    let k = cfg.max_folds.min(*present.iter().min().unwrap()).max(2);
    let fold_of = stratified_folds(labels, classes, k, cfg.random_state);
    let mut correct = 0usize;
    for fold in 0..k {
        let mut train_x = Vec::new();
        let mut train_y = Vec::new();
        let mut test_idx = Vec::new();
        for r in 0..labels.len() {
            if fold_of[r] == fold {
                test_idx.push(r);
            } else {
                train_x.extend_from_slice(&features[r * dim..(r + 1) * dim]);
                train_y.push(labels[r]);
            }
        }
        let model = train_probe(&train_x, &train_y, classes, dim, cfg)?;
        for &r in &test_idx {
            if model.predict(&features[r * dim..(r + 1) * dim]) == labels[r] {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / labels.len() as f64, k))
}

/// Cross-validated accuracy after a seeded label permutation (chance-level
/// control).
pub fn shuffled_control_accuracy(
    features: &[f64],
    labels: &[usize],
    classes: usize,
    dim: usize,
    cfg: &ProbeConfig,
) -> Result<(f64, usize)> {
    let mut shuffled = labels.to_vec();
    let mut rng = rng::stream(cfg.random_state, "probe.shuffle", &[]);
    shuffled.shuffle(&mut rng);
    cross_validated_accuracy(features, &shuffled, classes, dim, cfg)
}

/// Which trials of a bank a probe cell uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    Failed,
}

impl Subset {
    pub fn tag(self) -> &'static str {
        match self {
            Subset::All => "all",
            Subset::Failed => "failed",
        }
    }
}

/// One probed (N, layer, subset) cell. A skipped cell keeps its position in
/// the report with the reason spelled out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeCell {
    pub n_turns: usize,
    /// Trace index 0..=L (0 = embedding output).
    pub layer: usize,
    pub subset: Subset,
    pub rows: usize,
    /// Rows discarded because their class had only one row in the subset.
    pub dropped_rows: usize,
    pub folds: usize,
    pub accuracy: Option<f64>,
    pub control_accuracy: Option<f64>,
    pub skipped: Option<String>,
}

/// Full probing sweep for one probe kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub classes: usize,
    pub chance: f64,
    pub config: ProbeConfig,
    pub cells: Vec<ProbeCell>,
}

impl ProbeReport {
    pub fn cell(&self, n: usize, layer: usize, subset: Subset) -> Option<&ProbeCell> {
        self.cells
            .iter()
            .find(|c| c.n_turns == n && c.layer == layer && c.subset == subset)
    }
}

/// Extracts (features, labels) for one bank/layer/subset. Features are the
/// f64-cast hidden states; labels the anchor classes.
fn cell_rows(bank: &TraceBank, layer: usize, subset: Subset) -> (Vec<f64>, Vec<usize>) {
    let indices: Vec<usize> = match subset {
        Subset::All => (0..bank.meta.trials()).collect(),
        Subset::Failed => bank.failed_indices(),
    };
    let d = bank.meta.width;
    let mut features = Vec::with_capacity(indices.len() * d);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in &indices {
        features.extend(bank.hidden_at(i, layer).iter().map(|&v| v as f64));
        labels.push(bank.meta.classes[i]);
    }
    (features, labels)
}

/// Probes every (N, layer, subset) cell of the banks matching `kind`.
/// Cells whose subset cannot support stratified CV are reported as skipped.
pub fn probe_sweep(
    banks: &[TraceBank],
    kind: ProbeKind,
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let selected: Vec<&TraceBank> = banks.iter().filter(|b| b.meta.kind == kind).collect();
    if selected.is_empty() {
        return Err(Error::config(format!(
            "no banks for kind {:?}; run capture first",
            kind
        )));
    }
    // Build the work list in deterministic order, then evaluate cells in
    // parallel (each cell is internally sequential f64 math).
    let mut jobs = Vec::new();
    for bank in &selected {
        for subset in [Subset::All, Subset::Failed] {
            for layer in 0..=bank.meta.layers {
                jobs.push((*bank, layer, subset));
            }
        }
    }
    let cells: Vec<ProbeCell> = jobs
        .par_iter()
        .map(|&(bank, layer, subset)| {
            let (features, labels) = cell_rows(bank, layer, subset);
            let d = bank.meta.width;
            // A class with exactly one row cannot be stratified; drop such
            // rows (common in failed subsets) and record how many.
            let counts = class_counts(&labels, classes);
            let keep: Vec<usize> = (0..labels.len())
                .filter(|&r| counts[labels[r]] >= 2)
                .collect();
            let dropped = labels.len() - keep.len();
            let (features, labels) = if dropped > 0 {
                let mut f = Vec::with_capacity(keep.len() * d);
                let mut l = Vec::with_capacity(keep.len());
                for &r in &keep {
                    f.extend_from_slice(&features[r * d..(r + 1) * d]);
                    l.push(labels[r]);
                }
                (f, l)
            } else {
                (features, labels)
            };
            let mut cell = ProbeCell {
                n_turns: bank.meta.n_turns,
                layer,
                subset,
                rows: labels.len(),
                dropped_rows: dropped,
                folds: 0,
                accuracy: None,
                control_accuracy: None,
                skipped: None,
            };
            if labels.is_empty() {
                cell.skipped = Some("subset has no trials".to_string());
                return cell;
            }
            match cross_validated_accuracy(&features, &labels, classes, d, cfg) {
                Ok((acc, k)) => {
                    cell.accuracy = Some(acc);
                    cell.folds = k;
                    match shuffled_control_accuracy(&features, &labels, classes, d, cfg) {
                        Ok((ctl, _)) => cell.control_accuracy = Some(ctl),
                        Err(e) => cell.skipped = Some(format!("control failed: {e}")),
                    }
                }
                Err(Error::TooFewPerClass(counts)) => {
                    cell.skipped = Some(format!(
                        "class counts {counts:?} cannot support stratified CV"
                    ));
                }
                Err(e) => cell.skipped = Some(e.to_string()),
            }
            cell
        })
        .collect();
    Ok(ProbeReport {
        kind,
        classes,
        chance: 1.0 / classes as f64,
        config: cfg.clone(),
        cells,
    })
}
