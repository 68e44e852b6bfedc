//! Linear centered-kernel-alignment (CKA) comparisons between groups of
//! hidden states, and the pairing machinery that feeds them.
//!
//! The analyses compare failed long-context trials against class-matched
//! successful trials, layer by layer, to localize where representations of
//! failed trials diverge. Depth is split into three phases; the paired
//! divergence is summarized over the middle phase, and the steepest drop in
//! the layer-wise similarity curve marks the drop layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::TraceBank;
use crate::corpus::ProbeKind;
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;

// ---------------------------------------------------------------------------
// CKA kernels
// ---------------------------------------------------------------------------

/// Column-centers a row-major `n x p` matrix in place.
fn center_columns(m: &mut [f64], n: usize, p: usize) {
    for j in 0..p {
        let mut mean = 0.0;
        for i in 0..n {
            mean += m[i * p + j];
        }
        mean /= n as f64;
        for i in 0..n {
            m[i * p + j] -= mean;
        }
    }
}

/// Linear CKA in feature form: with column-centered X (n x p) and Y (n x q),
/// `||X^T Y||_F^2 / (||X^T X||_F ||Y^T Y||_F)`.
pub fn linear_cka(x: &[f64], y: &[f64], n: usize, p: usize, q: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::config(format!("CKA needs at least 2 rows, got {n}")));
    }
    if x.len() != n * p || y.len() != n * q {
        return Err(Error::config(format!(
            "CKA shape mismatch: x {} != {n}x{p} or y {} != {n}x{q}",
            x.len(),
            y.len()
        )));
    }
    let mut xc = x.to_vec();
    let mut yc = y.to_vec();
    center_columns(&mut xc, n, p);
    center_columns(&mut yc, n, q);

    // ||Xc^T Yc||_F^2
    let mut cross = 0.0f64;
    for a in 0..p {
        for b in 0..q {
            let mut s = 0.0;
            for i in 0..n {
                s += xc[i * p + a] * yc[i * q + b];
            }
            cross += s * s;
        }
    }
    let mut xx = 0.0f64;
    for a in 0..p {
        for b in a..p {
            let mut s = 0.0;
            for i in 0..n {
                s += xc[i * p + a] * xc[i * p + b];
            }
            xx += if a == b { s * s } else { 2.0 * s * s };
        }
    }
    let mut yy = 0.0f64;
    for a in 0..q {
        for b in a..q {
            let mut s = 0.0;
            for i in 0..n {
                s += yc[i * q + a] * yc[i * q + b];
            }
            yy += if a == b { s * s } else { 2.0 * s * s };
        }
    }
    let denom = xx.sqrt() * yy.sqrt();
    if !denom.is_finite() || denom < 1e-30 {
        return Err(Error::numeric(
            "CKA undefined: an input has (near-)zero centered variance",
        ));
    }
    Ok(cross / denom)
}

/// Linear CKA in Gram form: `HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))` with
/// `K = X X^T`, `L = Y Y^T`, both double-centered. Used as the independent
/// oracle for the feature form; the two agree to ~1e-10 on well-scaled data.
pub fn linear_cka_gram(x: &[f64], y: &[f64], n: usize, p: usize, q: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::config(format!("CKA needs at least 2 rows, got {n}")));
    }
    if x.len() != n * p || y.len() != n * q {
        return Err(Error::config("CKA shape mismatch".to_string()));
    }
    let gram = |m: &[f64], cols: usize| -> Vec<f64> {
        let mut k = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..cols {
                    s += m[i * cols + c] * m[j * cols + c];
                }
                k[i * n + j] = s;
            }
        }
        k
    };
    let double_center = |k: &mut Vec<f64>| {
        let mut row_mean = vec![0.0f64; n];
        let mut grand = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                row_mean[i] += k[i * n + j];
            }
            row_mean[i] /= n as f64;
            grand += row_mean[i];
        }
        grand /= n as f64;
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] += grand - row_mean[i] - row_mean[j];
            }
        }
    };
    let mut kx = gram(x, p);
    let mut ky = gram(y, q);
    double_center(&mut kx);
    double_center(&mut ky);
    let frob_dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(u, v)| u * v).sum() };
    let cross = frob_dot(&kx, &ky);
    let denom = frob_dot(&kx, &kx).sqrt() * frob_dot(&ky, &ky).sqrt();
    if !denom.is_finite() || denom < 1e-30 {
        return Err(Error::numeric(
            "CKA undefined: an input has (near-)zero centered variance",
        ));
    }
    Ok(cross / denom)
}

// ---------------------------------------------------------------------------
// Pair construction
// ---------------------------------------------------------------------------

/// Which success pool the failed trials are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Successful trials at the same context length.
    SameN,
    /// Successful trials at the shortest context length (N = 2).
    Short2,
}

impl Comparison {
    pub fn tag(self) -> &'static str {
        match self {
            Comparison::SameN => "same_n",
            Comparison::Short2 => "short2",
        }
    }
}

/// Class-matched index pairs between two trial pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    /// (left index, right index) pairs; left indexes the failed bank rows,
    /// right the success bank rows.
    pub pairs: Vec<(usize, usize)>,
    /// Classes contributing nothing, with the reason.
    pub skipped: Vec<String>,
}

/// Draws up to `max_pairs` class-matched pairs without replacement. Per
/// class, both pools are shuffled under a class-keyed stream and zipped; the
/// per-class lists are then interleaved round-robin so truncation keeps the
/// class mix balanced.
pub fn build_pairs(
    left_classes: &[usize],
    left_pool: &[usize],
    right_classes: &[usize],
    right_pool: &[usize],
    classes: usize,
    max_pairs: usize,
    seed: u64,
    stream_tag: &str,
) -> PairSet {
    let mut per_class: Vec<Vec<(usize, usize)>> = Vec::with_capacity(classes);
    let mut skipped = Vec::new();
    for class in 0..classes {
        let mut lefts: Vec<usize> = left_pool
            .iter()
            .copied()
            .filter(|&i| left_classes[i] == class)
            .collect();
        let mut rights: Vec<usize> = right_pool
            .iter()
            .copied()
            .filter(|&i| right_classes[i] == class)
            .collect();
        if lefts.is_empty() || rights.is_empty() {
            skipped.push(format!(
                "class {class}: {} left rows, {} right rows",
                lefts.len(),
                rights.len()
            ));
            per_class.push(Vec::new());
            continue;
        }
        let mut rng_l = rng::stream(seed, stream_tag, &[class as u64, 0]);
        let mut rng_r = rng::stream(seed, stream_tag, &[class as u64, 1]);
        lefts.shuffle(&mut rng_l);
        rights.shuffle(&mut rng_r);
        let k = lefts.len().min(rights.len());
        per_class.push((0..k).map(|i| (lefts[i], rights[i])).collect());
    }
    // Round-robin across classes until max_pairs or exhaustion.
    let mut pairs = Vec::new();
    let mut depth = 0;
    loop {
        let mut took = false;
        for class_pairs in &per_class {
            if pairs.len() >= max_pairs {
                break;
            }
            if let Some(&p) = class_pairs.get(depth) {
                pairs.push(p);
                took = true;
            }
        }
        if !took || pairs.len() >= max_pairs {
            break;
        }
        depth += 1;
    }
    PairSet { pairs, skipped }
}

/// Success-success control pairs: each class's success pool is split into
/// two disjoint halves and zipped.
pub fn control_pairs(
    classes_of: &[usize],
    success_pool: &[usize],
    classes: usize,
    max_pairs: usize,
    seed: u64,
) -> PairSet {
    let mut per_class: Vec<Vec<(usize, usize)>> = Vec::with_capacity(classes);
    let mut skipped = Vec::new();
    for class in 0..classes {
        let mut members: Vec<usize> = success_pool
            .iter()
            .copied()
            .filter(|&i| classes_of[i] == class)
            .collect();
        if members.len() < 2 {
            skipped.push(format!(
                "class {class}: {} success rows, need 2 for a control pair",
                members.len()
            ));
            per_class.push(Vec::new());
            continue;
        }
        let mut rng = rng::stream(seed, "cka.control", &[class as u64]);
        members.shuffle(&mut rng);
        let half = members.len() / 2;
        per_class.push((0..half).map(|i| (members[i], members[half + i])).collect());
    }
    let mut pairs = Vec::new();
    let mut depth = 0;
    loop {
        let mut took = false;
        for class_pairs in &per_class {
            if pairs.len() >= max_pairs {
                break;
            }
            if let Some(&p) = class_pairs.get(depth) {
                pairs.push(p);
                took = true;
            }
        }
        if !took || pairs.len() >= max_pairs {
            break;
        }
        depth += 1;
    }
    PairSet { pairs, skipped }
}

// ---------------------------------------------------------------------------
// Layer-wise analysis
// ---------------------------------------------------------------------------

/// Stacks the layer-`layer` hidden states of `bank` rows `indices` into an
/// f64 feature matrix.
fn stack(bank: &TraceBank, indices: &[usize], layer: usize) -> Vec<f64> {
    let d = bank.meta.width;
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        out.extend(bank.hidden_at(i, layer).iter().map(|&v| v as f64));
    }
    out
}

/// Phase boundaries over `L + 1` trace points: phase I is `[0, a)`, phase II
/// `[a, b)`, phase III `[b, L]`, with `a = round(0.2 (L+1))` and
/// `b = round(0.7 (L+1))`.
pub fn phase_bounds(trace_points: usize) -> (usize, usize) {
    let a = (0.2 * trace_points as f64).round() as usize;
    let b = (0.7 * trace_points as f64).round() as usize;
    (a.min(trace_points), b.min(trace_points))
}

/// Index of the steepest drop in a layer-wise curve: argmin over l of
/// `curve[l + 1] - curve[l]`, ties resolved to the lowest l.
pub fn drop_layer(curve: &[f64]) -> Result<usize> {
    if curve.len() < 2 {
        return Err(Error::config("drop_layer needs at least two points"));
    }
    let mut best = 0usize;
    let mut best_diff = f64::INFINITY;
    for l in 0..curve.len() - 1 {
        let diff = curve[l + 1] - curve[l];
        if diff < best_diff {
            best_diff = diff;
            best = l;
        }
    }
    Ok(best)
}

/// Layer-wise CKA analysis of one (N, comparison) setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkaReport {
    pub n_turns: usize,
    pub comparison: Comparison,
    pub n_pairs: usize,
    pub n_control_pairs: usize,
    pub pair_skips: Vec<String>,
    pub control_skips: Vec<String>,
    /// CKA(failed, matched success) per trace index 0..=L.
    pub diag_fail_success: Vec<f64>,
    /// CKA(success, success) control per trace index.
    pub diag_control: Vec<f64>,
    /// Per-layer paired divergence: control minus fail/success.
    pub delta: Vec<f64>,
    /// (a, b): phase II is `a..b` over trace indices.
    pub phase_bounds: (usize, usize),
    /// Mean delta over phases I, II, III.
    pub phase_means: [f64; 3],
    /// Trace index where `diag_fail_success` drops the most.
    pub drop_layer: usize,
    /// Full (L+1) x (L+1) CKA between failed layer i and success layer j.
    pub cross_layer: Vec<Vec<f64>>,
}

/// Runs the failed-versus-success CKA analysis for the acoustic bank at
/// `n_turns` against the comparison success pool.
pub fn cka_analysis(
    banks: &[TraceBank],
    n_turns: usize,
    comparison: Comparison,
    max_pairs: usize,
    seed: u64,
) -> Result<CkaReport> {
    let fail_bank = crate::bank::find_bank(banks, ProbeKind::Acoustic, n_turns)?;
    let succ_bank = match comparison {
        Comparison::SameN => fail_bank,
        Comparison::Short2 => crate::bank::find_bank(banks, ProbeKind::Acoustic, 2)?,
    };
    let classes = fail_bank
        .meta
        .classes
        .iter()
        .chain(succ_bank.meta.classes.iter())
        .copied()
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);

    let failed = fail_bank.failed_indices();
    let succeeded = succ_bank.correct_indices();
    let pair_set = build_pairs(
        &fail_bank.meta.classes,
        &failed,
        &succ_bank.meta.classes,
        &succeeded,
        classes,
        max_pairs,
        seed,
        "cka.pairs",
    );
    if pair_set.pairs.len() < 2 {
        return Err(Error::config(format!(
            "CKA needs at least 2 pairs; got {} for N={n_turns} {:?} (skips: {:?})",
            pair_set.pairs.len(),
            comparison,
            pair_set.skipped
        )));
    }
    let controls = control_pairs(
        &succ_bank.meta.classes,
        &succeeded,
        classes,
        max_pairs,
        seed,
    );
    if controls.pairs.len() < 2 {
        return Err(Error::config(format!(
            "CKA control needs at least 2 pairs; got {} (skips: {:?})",
            controls.pairs.len(),
            controls.skipped
        )));
    }

    let lp1 = fail_bank.meta.layers + 1;
    let d = fail_bank.meta.width;
    let left_rows: Vec<usize> = pair_set.pairs.iter().map(|p| p.0).collect();
    let right_rows: Vec<usize> = pair_set.pairs.iter().map(|p| p.1).collect();
    let ctl_left: Vec<usize> = controls.pairs.iter().map(|p| p.0).collect();
    let ctl_right: Vec<usize> = controls.pairs.iter().map(|p| p.1).collect();

    let diag_fail_success: Result<Vec<f64>> = (0..lp1)
        .into_par_iter()
        .map(|l| {
            let x = stack(fail_bank, &left_rows, l);
            let y = stack(succ_bank, &right_rows, l);
            linear_cka(&x, &y, left_rows.len(), d, d)
        })
        .collect();
    let diag_fail_success = diag_fail_success?;

    let diag_control: Result<Vec<f64>> = (0..lp1)
        .into_par_iter()
        .map(|l| {
            let x = stack(succ_bank, &ctl_left, l);
            let y = stack(succ_bank, &ctl_right, l);
            linear_cka(&x, &y, ctl_left.len(), d, d)
        })
        .collect();
    let diag_control = diag_control?;

    let cross_layer: Result<Vec<Vec<f64>>> = (0..lp1)
        .into_par_iter()
        .map(|i| {
            let x = stack(fail_bank, &left_rows, i);
            (0..lp1)
                .map(|j| {
                    let y = stack(succ_bank, &right_rows, j);
                    linear_cka(&x, &y, left_rows.len(), d, d)
                })
                .collect()
        })
        .collect();
    let cross_layer = cross_layer?;

    let delta: Vec<f64> = diag_control
        .iter()
        .zip(&diag_fail_success)
        .map(|(c, f)| c - f)
        .collect();
    let (a, b) = phase_bounds(lp1);
    let phase_mean = |range: std::ops::Range<usize>| -> f64 {
        if range.is_empty() {
            0.0
        } else {
            let len = range.len() as f64;
            delta[range].iter().sum::<f64>() / len
        }
    };
    let phase_means = [phase_mean(0..a), phase_mean(a..b), phase_mean(b..lp1)];
    let drop = drop_layer(&diag_fail_success)?;

    Ok(CkaReport {
        n_turns,
        comparison,
        n_pairs: pair_set.pairs.len(),
        n_control_pairs: controls.pairs.len(),
        pair_skips: pair_set.skipped,
        control_skips: controls.skipped,
        diag_fail_success,
        diag_control,
        delta,
        phase_bounds: (a, b),
        phase_means,
        drop_layer: drop,
        cross_layer,
    })
}
