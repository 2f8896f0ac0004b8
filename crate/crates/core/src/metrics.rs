//! BLEU-4: case-insensitive corpus BLEU for evaluation and model selection,
//! and an add-one smoothed sentence BLEU used as the training risk.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use crate::error::{NmtError, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// In `[0, 1]`.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
}

impl BleuReport {
    pub fn ratio(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        }
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|v| v * 100.0);
        write!(
            f,
            "BLEU = {:.2} ({:.2}/{:.2}/{:.2}/{:.2}, BP={:.3}, ratio={:.3})",
            self.bleu * 100.0,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            self.ratio()
        )
    }
}

/// Parses the score (×100) back out of a formatted report line.
pub fn parse_bleu_line(line: &str) -> Option<f64> {
    let rest = line.trim().strip_prefix("BLEU = ")?;
    let (score, tail) = rest.split_once(' ')?;
    if !tail.starts_with('(') || !tail.ends_with(')') {
        return None;
    }
    score.parse().ok()
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and totals per order for one hypothesis.
fn sentence_stats<T: Hash + Eq>(hyp: &[T], refs: &[&[T]]) -> ([usize; MAX_ORDER], [usize; MAX_ORDER]) {
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    for n in 1..=MAX_ORDER {
        let hyp_counts = ngram_counts(hyp, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, c) in hyp_counts {
            matches[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
        }
        totals[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    (matches, totals)
}

/// Reference length closest to `hyp_len`; ties go to the shorter one.
fn closest_ref_len(hyp_len: usize, refs: &[usize]) -> usize {
    let mut best = refs[0];
    for &r in &refs[1..] {
        let (d, bd) = (r.abs_diff(hyp_len), best.abs_diff(hyp_len));
        if d < bd || (d == bd && r < best) {
            best = r;
        }
    }
    best
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

fn lowercase<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| t.as_ref().to_lowercase()).collect()
}

/// Corpus BLEU over token sequences of any hashable type, with one or more
/// references per hypothesis.
pub fn corpus_bleu_generic<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<BleuReport> {
    if hyps.is_empty() {
        return Err(NmtError::Empty("BLEU corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(NmtError::invalid(format!(
            "{} hypotheses but {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = [0; MAX_ORDER];
    let mut totals = [0; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, rs) in hyps.iter().zip(refs) {
        if rs.is_empty() {
            return Err(NmtError::invalid("hypothesis without reference"));
        }
        let rs: Vec<&[T]> = rs.iter().map(Vec::as_slice).collect();
        let (m, t) = sentence_stats(h, &rs);
        for n in 0..MAX_ORDER {
            matches[n] += m[n];
            totals[n] += t[n];
        }
        hyp_len += h.len();
        let lens: Vec<usize> = rs.iter().map(|r| r.len()).collect();
        ref_len += closest_ref_len(h.len(), &lens);
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        // an order with no n-grams at all is skipped, as in multi-bleu.perl
        precisions[n] = if totals[n] == 0 {
            1.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let bp = brevity_penalty(hyp_len, ref_len);
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
    } else {
        0.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty: bp,
        hyp_len,
        ref_len,
        matches,
        totals,
    })
}

/// Case-insensitive corpus BLEU with a single reference per hypothesis.
pub fn corpus_bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<BleuReport> {
    let hyps: Vec<Vec<String>> = hyps.iter().map(|h| lowercase(h)).collect();
    let refs: Vec<Vec<Vec<String>>> = refs.iter().map(|r| vec![lowercase(r)]).collect();
    corpus_bleu_generic(&hyps, &refs)
}

/// Case-insensitive corpus BLEU with any number of references.
pub fn corpus_bleu_multi<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<Vec<S>>]) -> Result<BleuReport> {
    let hyps: Vec<Vec<String>> = hyps.iter().map(|h| lowercase(h)).collect();
    let refs: Vec<Vec<Vec<String>>> = refs.iter().map(|rs| rs.iter().map(|r| lowercase(r)).collect()).collect();
    corpus_bleu_generic(&hyps, &refs)
}

/// Sentence BLEU-4 with add-one smoothing of the n ≥ 2 precisions and a
/// sentence-level brevity penalty. An empty hypothesis scores 0.
pub fn sentence_bleu_smoothed_generic<T: Hash + Eq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, t) = sentence_stats(hyp, &[reference]);
    if m[0] == 0 {
        return 0.0;
    }
    let mut log_sum = (m[0] as f64 / t[0] as f64).ln();
    for n in 1..MAX_ORDER {
        log_sum += ((m[n] + 1) as f64 / (t[n] + 1) as f64).ln();
    }
    brevity_penalty(hyp.len(), reference.len()) * (log_sum / MAX_ORDER as f64).exp()
}

pub fn sentence_bleu_smoothed<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    sentence_bleu_smoothed_generic(&lowercase(hyp), &lowercase(reference))
}
