//! Lexical translation probabilities from IBM Model 1 EM, reduced to a
//! one-best bilingual dictionary for unknown-word replacement.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{NmtError, Result};

/// `p(tgt | src)` estimated by Model 1 EM over a parallel corpus. Alignment
/// is uniform over the source words of a sentence (no NULL word).
#[derive(Debug, Clone)]
pub struct ModelOne {
    src_words: Vec<String>,
    tgt_words: Vec<String>,
    /// Per source id, sparse `(tgt id, probability)` sorted by tgt id.
    table: Vec<Vec<(usize, f64)>>,
    /// Corpus log-likelihood before each EM iteration, then after the last.
    pub log_likelihood: Vec<f64>,
}

struct Interner {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    fn new() -> Self {
        Interner {
            words: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn id(&mut self, w: &str) -> usize {
        if let Some(&i) = self.index.get(w) {
            return i;
        }
        self.index.insert(w.to_string(), self.words.len());
        self.words.push(w.to_string());
        self.words.len() - 1
    }
}

impl ModelOne {
    pub fn train<S: AsRef<str>>(parallel: &[(Vec<S>, Vec<S>)], em_iters: usize) -> Result<Self> {
        if em_iters == 0 {
            return Err(NmtError::invalid("em_iters must be at least 1"));
        }
        let mut src_int = Interner::new();
        let mut tgt_int = Interner::new();
        let corpus: Vec<(Vec<usize>, Vec<usize>)> = parallel
            .iter()
            .map(|(s, t)| {
                (
                    s.iter().map(|w| src_int.id(w.as_ref())).collect(),
                    t.iter().map(|w| tgt_int.id(w.as_ref())).collect(),
                )
            })
            .filter(|(s, t): &(Vec<usize>, Vec<usize>)| !s.is_empty() && !t.is_empty())
            .collect();
        if corpus.is_empty() {
            return Err(NmtError::Empty("parallel corpus"));
        }

        // uniform start over the target vocabulary, restricted to co-occurring pairs
        let uniform = 1.0 / tgt_int.words.len() as f64;
        let mut cooc: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); src_int.words.len()];
        for (s, t) in &corpus {
            for &si in s {
                for &ti in t {
                    cooc[si].insert(ti, uniform);
                }
            }
        }
        let mut table: Vec<Vec<(usize, f64)>> =
            cooc.into_iter().map(|m| m.into_iter().collect()).collect();

        let prob = |table: &[Vec<(usize, f64)>], s: usize, t: usize| -> f64 {
            let row = &table[s];
            row.binary_search_by_key(&t, |e| e.0).map_or(0.0, |k| row[k].1)
        };

        let mut log_likelihood = Vec::with_capacity(em_iters + 1);
        for _ in 0..em_iters {
            let mut counts: Vec<Vec<f64>> = table.iter().map(|r| vec![0.0; r.len()]).collect();
            let mut ll = 0.0;
            for (s, t) in &corpus {
                for &ti in t {
                    let denom: f64 = s.iter().map(|&si| prob(&table, si, ti)).sum();
                    ll += (denom / s.len() as f64).ln();
                    for &si in s {
                        let k = table[si].binary_search_by_key(&ti, |e| e.0).expect("co-occurring pair");
                        counts[si][k] += table[si][k].1 / denom;
                    }
                }
            }
            log_likelihood.push(ll);
            for (row, c) in table.iter_mut().zip(&counts) {
                let total: f64 = c.iter().sum();
                for (entry, &ci) in row.iter_mut().zip(c) {
                    entry.1 = ci / total;
                }
            }
        }
        let mut ll = 0.0;
        for (s, t) in &corpus {
            for &ti in t {
                let denom: f64 = s.iter().map(|&si| prob(&table, si, ti)).sum();
                ll += (denom / s.len() as f64).ln();
            }
        }
        log_likelihood.push(ll);

        Ok(ModelOne {
            src_words: src_int.words,
            tgt_words: tgt_int.words,
            table,
            log_likelihood,
        })
    }

    pub fn prob(&self, src: &str, tgt: &str) -> f64 {
        let (Some(s), Some(t)) = (
            self.src_words.iter().position(|w| w == src),
            self.tgt_words.iter().position(|w| w == tgt),
        ) else {
            return 0.0;
        };
        let row = &self.table[s];
        row.binary_search_by_key(&t, |e| e.0).map_or(0.0, |k| row[k].1)
    }

    /// Sum of `p(t | src)` over all targets.
    pub fn row_mass(&self, src: &str) -> f64 {
        self.src_words
            .iter()
            .position(|w| w == src)
            .map_or(0.0, |s| self.table[s].iter().map(|e| e.1).sum())
    }

    pub fn source_words(&self) -> &[String] {
        &self.src_words
    }

    /// Argmax translation per source word (ties to the earlier-seen target),
    /// kept when its probability reaches `min_prob`.
    pub fn to_dictionary(&self, min_prob: f64) -> BilingualDictionary {
        let mut entries = BTreeMap::new();
        for (s, row) in self.table.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for &(t, p) in row {
                if best.map_or(true, |(_, bp)| p > bp) {
                    best = Some((t, p));
                }
            }
            if let Some((t, p)) = best {
                if p >= min_prob && p > 0.0 {
                    entries.insert(self.src_words[s].clone(), (self.tgt_words[t].clone(), p));
                }
            }
        }
        BilingualDictionary { entries, min_prob }
    }
}

/// One-best `src -> (tgt, probability)` entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BilingualDictionary {
    entries: BTreeMap<String, (String, f64)>,
    pub min_prob: f64,
}

impl BilingualDictionary {
    pub fn get(&self, src: &str) -> Option<(&str, f64)> {
        self.entries.get(src).map(|(t, p)| (t.as_str(), *p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.entries.iter().map(|(s, (t, p))| (s.as_str(), t.as_str(), *p))
    }

    pub fn insert(&mut self, src: impl Into<String>, tgt: impl Into<String>, prob: f64) {
        self.entries.insert(src.into(), (tgt.into(), prob));
    }

    /// Lines of `src<TAB>tgt<TAB>prob`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for (s, t, p) in self.iter() {
            writeln!(f, "{s}\t{t}\t{p}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut dict = BilingualDictionary::default();
        let mut min_prob = f64::INFINITY;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(NmtError::Parse(format!("{}:{}: expected 3 tab-separated fields", path.display(), n + 1)));
            }
            let p: f64 = fields[2]
                .parse()
                .map_err(|_| NmtError::Parse(format!("{}:{}: bad probability `{}`", path.display(), n + 1, fields[2])))?;
            min_prob = min_prob.min(p);
            dict.insert(fields[0], fields[1], p);
        }
        dict.min_prob = if min_prob.is_finite() { min_prob } else { 0.0 };
        Ok(dict)
    }
}

/// Model 1 EM followed by one-best extraction.
pub fn induce_dictionary<S: AsRef<str>>(
    parallel: &[(Vec<S>, Vec<S>)],
    em_iters: usize,
    min_prob: f64,
) -> Result<BilingualDictionary> {
    Ok(ModelOne::train(parallel, em_iters)?.to_dictionary(min_prob))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(raw: &[(&str, &str)]) -> Vec<(Vec<String>, Vec<String>)> {
        raw.iter()
            .map(|(s, t)| {
                (
                    s.split_whitespace().map(String::from).collect(),
                    t.split_whitespace().map(String::from).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn single_cooccurrence() {
        let d = induce_dictionary(&pairs(&[("a", "x")]), 1, 0.1).unwrap();
        assert_eq!(d.get("a"), Some(("x", 1.0)));
    }

    #[test]
    fn em_prefers_consistent_translation() {
        let corpus = pairs(&[("a b", "x y"), ("a", "x")]);
        let m = ModelOne::train(&corpus, 5).unwrap();
        assert!(m.prob("a", "x") > m.prob("a", "y"));
        assert_eq!(m.to_dictionary(0.0).get("a").unwrap().0, "x");
    }

    /// Hand-rolled EM over dense tables as an oracle for the sparse version.
    #[test]
    fn matches_dense_oracle() {
        let corpus = pairs(&[("a b", "x y"), ("a", "x"), ("b c", "y z"), ("c a", "z x")]);
        let src = ["a", "b", "c"];
        let tgt = ["x", "y", "z"];
        let idx = |v: &[&str], w: &str| v.iter().position(|x| *x == w).unwrap();
        let mut t = [[1.0 / 3.0; 3]; 3];
        for _ in 0..4 {
            let mut c = [[0.0; 3]; 3];
            for (s, tg) in &corpus {
                for tw in tg {
                    let ti = idx(&tgt, tw);
                    let d: f64 = s.iter().map(|sw| t[idx(&src, sw)][ti]).sum();
                    for sw in s {
                        c[idx(&src, sw)][ti] += t[idx(&src, sw)][ti] / d;
                    }
                }
            }
            for si in 0..3 {
                let tot: f64 = c[si].iter().sum();
                for ti in 0..3 {
                    t[si][ti] = c[si][ti] / tot;
                }
            }
        }
        let m = ModelOne::train(&corpus, 4).unwrap();
        for (si, s) in src.iter().enumerate() {
            for (ti, tw) in tgt.iter().enumerate() {
                assert!((m.prob(s, tw) - t[si][ti]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn threshold_filters() {
        let corpus = pairs(&[("a b", "x y"), ("a", "x")]);
        let d = induce_dictionary(&corpus, 5, 0.9).unwrap();
        for (_, _, p) in d.iter() {
            assert!(p >= 0.9);
        }
        assert!(d.get("b").is_none());
    }

    #[test]
    fn normalization_and_monotone_likelihood() {
        let corpus = pairs(&[("a b c", "x y z"), ("a c", "x z"), ("b", "y"), ("c a b", "z x y w")]);
        for iters in 1..6 {
            let m = ModelOne::train(&corpus, iters).unwrap();
            for s in m.source_words() {
                assert!((m.row_mass(s) - 1.0).abs() < 1e-9);
            }
        }
        let m = ModelOne::train(&corpus, 8).unwrap();
        for w in m.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{:?}", m.log_likelihood);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dict.tsv");
        let d = induce_dictionary(&pairs(&[("a b", "x y"), ("a", "x"), ("b", "y")]), 5, 0.0).unwrap();
        d.save(&p).unwrap();
        let back = BilingualDictionary::load(&p).unwrap();
        assert_eq!(back.get("a").unwrap().0, "x");
        assert_eq!(back.len(), d.len());
    }
}
