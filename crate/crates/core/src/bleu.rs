//! Corpus-level BLEU-4 with clipped n-gram precision.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{invalid, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    /// Modified precision for n = 1..=4, after smoothing.
    pub precisions: [f64; MAX_ORDER],
    /// Clipped matches per order.
    pub matches: [usize; MAX_ORDER],
    /// Candidate n-gram totals per order.
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    /// In `[0, 1]`.
    pub score: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

impl BleuReport {
    /// The score on the conventional 0–100 scale.
    pub fn score_100(&self) -> f64 {
        self.score * 100.0
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and total candidate n-grams for one sentence.
fn clipped<S: AsRef<str>>(candidate: &[S], references: &[Vec<S>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Corpus-level modified n-gram precision: each candidate n-gram is credited
/// at most as often as it appears in any single one of its references.
/// A zero denominator yields 0.
pub fn modified_precision<S: AsRef<str>>(candidates: &[Vec<S>], reference_sets: &[Vec<Vec<S>>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(invalid("n-gram order must be >= 1"));
    }
    if candidates.len() != reference_sets.len() {
        return Err(invalid("candidate and reference counts differ"));
    }
    let (mut num, mut den) = (0, 0);
    for (c, refs) in candidates.iter().zip(reference_sets) {
        let (m, t) = clipped(c, refs, n);
        num += m;
        den += t;
    }
    Ok(if den == 0 { 0.0 } else { num as f64 / den as f64 })
}

/// Length of the reference closest to `len`; ties go to the shorter one.
fn closest_ref_len<S>(len: usize, refs: &[Vec<S>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(len), r))
        .unwrap_or(0)
}

/// BLEU-4 with uniform weights. A zero precision for n ≥ 2 is replaced by
/// `1 / (total_n + 1)`.
pub fn corpus_bleu<S: AsRef<str>>(candidates: &[Vec<S>], reference_sets: &[Vec<Vec<S>>]) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(invalid("empty candidate corpus"));
    }
    if candidates.len() != reference_sets.len() {
        return Err(invalid(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            reference_sets.len()
        )));
    }
    if reference_sets.iter().any(Vec::is_empty) {
        return Err(invalid("every candidate needs at least one reference"));
    }

    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, refs) in candidates.iter().zip(reference_sets) {
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), refs);
        for n in 1..=MAX_ORDER {
            let (m, t) = clipped(cand, refs, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }

    let mut precisions = [0.0; MAX_ORDER];
    for i in 0..MAX_ORDER {
        precisions[i] = if matches[i] > 0 {
            matches[i] as f64 / totals[i] as f64
        } else if i == 0 {
            0.0
        } else {
            1.0 / (totals[i] as f64 + 1.0)
        };
    }

    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let score = if precisions[0] == 0.0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| 0.25 * p.ln()).sum::<f64>();
        brevity_penalty * log_mean.exp()
    };

    Ok(BleuReport {
        precisions,
        matches,
        totals,
        brevity_penalty,
        score,
        candidate_length: c_len,
        reference_length: r_len,
    })
}
