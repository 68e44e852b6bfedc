//! Shared metrics: accuracy tables, the differential degradation index Δ(N),
//! and the paired percentile bootstrap.
//!
//! Δ(N) compares how much acoustic accuracy has fallen off at context length
//! N, relative to its N=2 baseline, against the same quantity for semantic
//! accuracy:
//!
//! ```text
//! Δ(N) = [acc_a(2) − acc_a(N)] / acc_a(2) − [acc_s(2) − acc_s(N)] / acc_s(2)
//! ```
//!
//! Positive values mean acoustic memory degrades faster than semantic memory.
//!
//! The bootstrap resamples *pairs* (per-trial baseline/intervention outcomes
//! or per-trial metric pairs) with replacement. Each resample draws from a
//! stream derived from (seed, resample index), so results do not depend on
//! evaluation order or thread count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ProbeKind;
use crate::error::{Error, Result};
use crate::rng;

/// One cell of an accuracy table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub kind: ProbeKind,
    pub n_turns: usize,
    pub accuracy: f64,
    pub count: usize,
}

/// Accuracy per (probe kind, N), sorted by kind then N.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub cells: Vec<AccuracyCell>,
}

impl AccuracyTable {
    /// Builds a table directly from per-cell accuracies (used by fixtures
    /// and report assembly).
    pub fn from_cells(cells: Vec<AccuracyCell>) -> Self {
        let mut t = AccuracyTable { cells };
        t.cells
            .sort_by_key(|c| (c.kind, c.n_turns));
        t
    }

    pub fn get(&self, kind: ProbeKind, n_turns: usize) -> Option<&AccuracyCell> {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.n_turns == n_turns)
    }

    /// All context lengths present, ascending.
    pub fn lengths(&self) -> Vec<usize> {
        let mut ns: Vec<usize> = self.cells.iter().map(|c| c.n_turns).collect();
        ns.sort_unstable();
        ns.dedup();
        ns
    }
}

/// One evaluated trial, reduced to what the table needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub kind: ProbeKind,
    pub n_turns: usize,
    pub correct: bool,
}

/// Aggregates outcomes into mean accuracy per (kind, N).
///
/// Errors on an empty input; a cell's accuracy is the exact fraction of
/// correct outcomes in that cell.
pub fn accuracy_table(rows: &[OutcomeRow]) -> Result<AccuracyTable> {
    if rows.is_empty() {
        return Err(Error::config("accuracy_table: no outcomes"));
    }
    let mut keys: Vec<(ProbeKind, usize)> = rows.iter().map(|r| (r.kind, r.n_turns)).collect();
    keys.sort_unstable();
    keys.dedup();
    let cells = keys
        .into_iter()
        .map(|(kind, n_turns)| {
            let mut total = 0usize;
            let mut hits = 0usize;
            for r in rows {
                if r.kind == kind && r.n_turns == n_turns {
                    total += 1;
                    hits += usize::from(r.correct);
                }
            }
            AccuracyCell {
                kind,
                n_turns,
                accuracy: hits as f64 / total as f64,
                count: total,
            }
        })
        .collect();
    Ok(AccuracyTable::from_cells(cells))
}

/// Differential degradation at context length `n`.
///
/// Requires all four cells (acoustic/semantic at 2 and at `n`) and nonzero
/// N=2 baselines. `delta_n(table, 2)` is exactly 0.
pub fn delta_n(table: &AccuracyTable, n: usize) -> Result<f64> {
    let cell = |kind: ProbeKind, n_turns: usize| -> Result<f64> {
        table
            .get(kind, n_turns)
            .map(|c| c.accuracy)
            .ok_or_else(|| {
                Error::config(format!("delta_n: table lacks ({kind}, N={n_turns}) cell"))
            })
    };
    let a2 = cell(ProbeKind::Acoustic, 2)?;
    let s2 = cell(ProbeKind::Semantic, 2)?;
    let an = cell(ProbeKind::Acoustic, n)?;
    let sn = cell(ProbeKind::Semantic, n)?;
    if a2 <= 0.0 || s2 <= 0.0 {
        return Err(Error::numeric(format!(
            "delta_n: zero N=2 baseline (acoustic={a2}, semantic={s2})"
        )));
    }
    Ok((a2 - an) / a2 - (s2 - sn) / s2)
}

/// Δ(N) for every length in the table (N=2 included; it is 0 by definition).
pub fn delta_profile(table: &AccuracyTable) -> Result<Vec<(usize, f64)>> {
    table
        .lengths()
        .into_iter()
        .map(|n| delta_n(table, n).map(|d| (n, d)))
        .collect()
}

/// Result of a paired percentile bootstrap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    /// Point estimate: mean(b) − mean(a) on the original pairing.
    pub point: f64,
    /// 2.5th percentile of resampled deltas.
    pub ci_lo: f64,
    /// 97.5th percentile of resampled deltas.
    pub ci_hi: f64,
    /// One-sided p: fraction of resamples with delta ≤ 0.
    pub p_one_sided: f64,
    pub resamples: usize,
    pub n: usize,
    pub seed: u64,
}

/// Linear-interpolation percentile of a sorted slice (q in [0, 1]).
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Paired percentile bootstrap of mean(b) − mean(a).
///
/// `a` and `b` must be equal-length, non-empty paired samples. Resample `r`
/// draws its indices from a stream derived from (`seed`, r), making the
/// result independent of scheduling; percentiles use linear interpolation on
/// the sorted resample deltas.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<BootstrapSummary> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "paired_bootstrap: length mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::config("paired_bootstrap: empty samples"));
    }
    if resamples == 0 {
        return Err(Error::config("paired_bootstrap: resamples must be >= 1"));
    }
    let n = a.len();
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::numeric(format!(
                "paired_bootstrap: non-finite value at index {i}"
            )));
        }
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| y - x).collect();
    let point = diffs.iter().sum::<f64>() / n as f64;

    let mut deltas: Vec<f64> = (0..resamples)
        .map(|r| {
            let mut rng_r = rng::stream(seed, "bootstrap.resample", &[r as u64]);
            let mut acc = 0.0;
            for _ in 0..n {
                acc += diffs[rng_r.gen_range(0..n)];
            }
            acc / n as f64
        })
        .collect();
    let p_one_sided = deltas.iter().filter(|&&d| d <= 0.0).count() as f64 / resamples as f64;
    deltas.sort_by(|x, y| x.partial_cmp(y).expect("finite deltas"));
    Ok(BootstrapSummary {
        point,
        ci_lo: percentile_sorted(&deltas, 0.025),
        ci_hi: percentile_sorted(&deltas, 0.975),
        p_one_sided,
        resamples,
        n,
        seed,
    })
}

/// Exact bootstrap distribution for tiny samples, by enumerating all n^n
/// equally likely resample index tuples. Used as an oracle for
/// [`paired_bootstrap`]; practical only for n ≤ 6 or so.
pub fn exhaustive_paired_bootstrap(a: &[f64], b: &[f64]) -> Result<BootstrapSummary> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::config(
            "exhaustive_paired_bootstrap: need non-empty equal-length samples",
        ));
    }
    let n = a.len();
    let tuples = (n as u64).pow(n as u32);
    if tuples > 1_000_000 {
        return Err(Error::config(format!(
            "exhaustive_paired_bootstrap: {tuples} tuples is too many"
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| y - x).collect();
    let point = diffs.iter().sum::<f64>() / n as f64;
    let mut deltas = Vec::with_capacity(tuples as usize);
    let mut idx = vec![0usize; n];
    loop {
        let d: f64 = idx.iter().map(|&i| diffs[i]).sum::<f64>() / n as f64;
        deltas.push(d);
        // Odometer increment over base-n tuples.
        let mut k = 0;
        loop {
            if k == n {
                break;
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == n {
            break;
        }
    }
    let p_one_sided = deltas.iter().filter(|&&d| d <= 0.0).count() as f64 / deltas.len() as f64;
    deltas.sort_by(|x, y| x.partial_cmp(y).expect("finite deltas"));
    // Inverse-CDF percentiles: smallest value with CDF >= q.
    let inv_cdf = |q: f64| -> f64 {
        let rank = (q * deltas.len() as f64).ceil().max(1.0) as usize;
        deltas[rank - 1]
    };
    Ok(BootstrapSummary {
        point,
        ci_lo: inv_cdf(0.025),
        ci_hi: inv_cdf(0.975),
        p_one_sided,
        resamples: deltas.len(),
        n,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture_table() -> AccuracyTable {
        AccuracyTable::from_cells(vec![
            AccuracyCell { kind: ProbeKind::Acoustic, n_turns: 2, accuracy: 0.70, count: 500 },
            AccuracyCell { kind: ProbeKind::Acoustic, n_turns: 16, accuracy: 0.56, count: 500 },
            AccuracyCell { kind: ProbeKind::Semantic, n_turns: 2, accuracy: 0.92, count: 500 },
            AccuracyCell { kind: ProbeKind::Semantic, n_turns: 16, accuracy: 0.84, count: 500 },
        ])
    }

    #[test]
    fn delta_headline_fixture() {
        // (0.70−0.56)/0.70 − (0.92−0.84)/0.92 = 0.200000 − 0.086957 = 0.113043,
        // which rounds to 0.1130 at 4 dp.
        let d = delta_n(&fixture_table(), 16).unwrap();
        assert!((d - 0.113_043_478_260_869_57).abs() < 1e-12);
        assert!((d * 1e4).round() / 1e4 == 0.1130);
    }

    #[test]
    fn delta_no_degradation_is_zero() {
        let t = AccuracyTable::from_cells(vec![
            AccuracyCell { kind: ProbeKind::Acoustic, n_turns: 2, accuracy: 0.8, count: 10 },
            AccuracyCell { kind: ProbeKind::Acoustic, n_turns: 8, accuracy: 0.8, count: 10 },
            AccuracyCell { kind: ProbeKind::Semantic, n_turns: 2, accuracy: 0.9, count: 10 },
            AccuracyCell { kind: ProbeKind::Semantic, n_turns: 8, accuracy: 0.9, count: 10 },
        ]);
        assert_eq!(delta_n(&t, 8).unwrap(), 0.0);
    }

    #[test]
    fn delta_at_baseline_is_exactly_zero() {
        assert_eq!(delta_n(&fixture_table(), 2).unwrap(), 0.0);
    }

    #[test]
    fn delta_errors() {
        // Missing cell.
        let t = AccuracyTable::from_cells(vec![AccuracyCell {
            kind: ProbeKind::Acoustic,
            n_turns: 2,
            accuracy: 0.5,
            count: 4,
        }]);
        assert!(delta_n(&t, 16).is_err());
        // Zero baseline.
        let t = AccuracyTable::from_cells(vec![
            AccuracyCell { kind: ProbeKind::Acoustic, n_turns: 2, accuracy: 0.0, count: 4 },
            AccuracyCell { kind: ProbeKind::Acoustic, n_turns: 8, accuracy: 0.0, count: 4 },
            AccuracyCell { kind: ProbeKind::Semantic, n_turns: 2, accuracy: 0.9, count: 4 },
            AccuracyCell { kind: ProbeKind::Semantic, n_turns: 8, accuracy: 0.9, count: 4 },
        ]);
        match delta_n(&t, 8) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn accuracy_table_hand_count() {
        let rows = vec![
            OutcomeRow { kind: ProbeKind::Acoustic, n_turns: 2, correct: true },
            OutcomeRow { kind: ProbeKind::Acoustic, n_turns: 2, correct: false },
            OutcomeRow { kind: ProbeKind::Acoustic, n_turns: 2, correct: true },
            OutcomeRow { kind: ProbeKind::Semantic, n_turns: 2, correct: true },
        ];
        let t = accuracy_table(&rows).unwrap();
        let a = t.get(ProbeKind::Acoustic, 2).unwrap();
        assert_eq!(a.count, 3);
        assert!((a.accuracy - 2.0 / 3.0).abs() < 1e-15);
        let s = t.get(ProbeKind::Semantic, 2).unwrap();
        assert_eq!((s.count, s.accuracy), (1, 1.0));
        assert!(accuracy_table(&[]).is_err());
    }

    #[test]
    fn accuracy_table_headline_pair() {
        // 39/100 and 90/100 at N=2 reproduce the two headline accuracies.
        let mut rows = Vec::new();
        for i in 0..100 {
            rows.push(OutcomeRow { kind: ProbeKind::Acoustic, n_turns: 2, correct: i < 39 });
            rows.push(OutcomeRow { kind: ProbeKind::Semantic, n_turns: 2, correct: i < 90 });
        }
        let t = accuracy_table(&rows).unwrap();
        assert_eq!(t.get(ProbeKind::Acoustic, 2).unwrap().accuracy, 0.39);
        assert_eq!(t.get(ProbeKind::Semantic, 2).unwrap().accuracy, 0.90);
    }

    #[test]
    fn bootstrap_identical_samples_degenerate() {
        let a = vec![0.0, 1.0, 1.0, 0.0, 1.0];
        let s = paired_bootstrap(&a, &a, 500, 9).unwrap();
        assert_eq!(s.point, 0.0);
        assert_eq!((s.ci_lo, s.ci_hi), (0.0, 0.0));
        assert_eq!(s.p_one_sided, 1.0);
    }

    #[test]
    fn bootstrap_saturated_difference() {
        let a = vec![0.0, 0.0, 0.0];
        let b = vec![1.0, 1.0, 1.0];
        let s = paired_bootstrap(&a, &b, 500, 9).unwrap();
        assert_eq!(s.point, 1.0);
        assert_eq!((s.ci_lo, s.ci_hi), (1.0, 1.0));
        assert_eq!(s.p_one_sided, 0.0);
    }

    #[test]
    fn bootstrap_errors() {
        assert!(paired_bootstrap(&[1.0], &[1.0, 2.0], 10, 0).is_err());
        assert!(paired_bootstrap(&[], &[], 10, 0).is_err());
        assert!(paired_bootstrap(&[1.0], &[1.0], 0, 0).is_err());
        assert!(paired_bootstrap(&[f64::NAN], &[1.0], 10, 0).is_err());
    }

    #[test]
    fn bootstrap_is_schedule_independent() {
        let a = vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let b = vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let s1 = paired_bootstrap(&a, &b, 2000, 42).unwrap();
        let s2 = paired_bootstrap(&a, &b, 2000, 42).unwrap();
        assert_eq!(s1, s2);
        let s3 = paired_bootstrap(&a, &b, 2000, 43).unwrap();
        assert!(s1.ci_lo != s3.ci_lo || s1.ci_hi != s3.ci_hi || s1.p_one_sided != s3.p_one_sided);
    }

    #[test]
    fn bootstrap_matches_exhaustive_enumeration_n3() {
        // Oracle: all 27 resample tuples of a 3-pair dataset, enumerated
        // exactly; the sampled bootstrap at B=20_000 must agree within 0.02.
        let a = vec![0.0, 1.0, 0.0];
        let b = vec![1.0, 1.0, 0.0];
        let exact = exhaustive_paired_bootstrap(&a, &b).unwrap();
        // Hand check of the exact distribution: diffs = [1, 0, 0];
        // delta = (#indices equal to 0) / 3 over 27 tuples:
        // P(delta=0) = 8/27, P(1/3) = 12/27, P(2/3) = 6/27, P(1) = 1/27.
        assert!((exact.p_one_sided - 8.0 / 27.0).abs() < 1e-15);
        assert_eq!(exact.ci_lo, 0.0);
        assert_eq!(exact.ci_hi, 1.0);
        let sampled = paired_bootstrap(&a, &b, 20_000, 2026).unwrap();
        assert!((sampled.p_one_sided - exact.p_one_sided).abs() <= 0.02);
        assert!((sampled.ci_lo - exact.ci_lo).abs() <= 0.02);
        assert!((sampled.ci_hi - exact.ci_hi).abs() <= 0.02);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn delta_is_scale_invariant(
            a2 in 0.05f64..1.0, an in 0.0f64..1.0,
            s2 in 0.05f64..1.0, sn in 0.0f64..1.0,
            c in 0.1f64..0.9,
        ) {
            let mk = |scale: f64| AccuracyTable::from_cells(vec![
                AccuracyCell { kind: ProbeKind::Acoustic, n_turns: 2, accuracy: a2 * scale, count: 1 },
                AccuracyCell { kind: ProbeKind::Acoustic, n_turns: 16, accuracy: an * scale, count: 1 },
                AccuracyCell { kind: ProbeKind::Semantic, n_turns: 2, accuracy: s2 * scale, count: 1 },
                AccuracyCell { kind: ProbeKind::Semantic, n_turns: 16, accuracy: sn * scale, count: 1 },
            ]);
            let d1 = delta_n(&mk(1.0), 16).unwrap();
            let dc = delta_n(&mk(c), 16).unwrap();
            prop_assert!((d1 - dc).abs() < 1e-9);
        }

        #[test]
        fn bootstrap_ci_within_resample_range(
            vals in proptest::collection::vec(0.0f64..1.0, 2..12),
            seed in 0u64..1000,
        ) {
            let n = vals.len();
            let a = vec![0.0; n];
            let s = paired_bootstrap(&a, &vals, 200, seed).unwrap();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s.ci_lo >= lo - 1e-12 && s.ci_hi <= hi + 1e-12);
            prop_assert!(s.ci_lo <= s.ci_hi);
            prop_assert!((0.0..=1.0).contains(&s.p_one_sided));
        }
    }
}
