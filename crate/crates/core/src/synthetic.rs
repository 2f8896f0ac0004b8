//! Synthetic toy translation tasks: source words `s0..s{n-1}` map one to
//! one onto target words `t0..t{n-1}`, kept in order (copy) or reversed.

use rand::Rng;

pub type TextPair = (Vec<String>, Vec<String>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyTask {
    Copy,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub task: ToyTask,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            task: ToyTask::Copy,
            vocab: 20,
            min_len: 1,
            max_len: 8,
        }
    }
}

pub fn source_word(i: usize) -> String {
    format!("s{i}")
}

pub fn target_word(i: usize) -> String {
    format!("t{i}")
}

/// The reference translation of a source sentence of `s*` words.
pub fn translate_toy(task: ToyTask, src: &[String]) -> Vec<String> {
    let mut out: Vec<String> = src
        .iter()
        .map(|w| w.strip_prefix('s').map_or_else(|| w.clone(), |n| format!("t{n}")))
        .collect();
    if task == ToyTask::Reverse {
        out.reverse();
    }
    out
}

/// The inverse mapping, `t*` words back to `s*`.
pub fn back_translate_toy(task: ToyTask, tgt: &[String]) -> Vec<String> {
    let mut out: Vec<String> = tgt
        .iter()
        .map(|w| w.strip_prefix('t').map_or_else(|| w.clone(), |n| format!("s{n}")))
        .collect();
    if task == ToyTask::Reverse {
        out.reverse();
    }
    out
}

pub fn random_source<R: Rng + ?Sized>(spec: &ToySpec, rng: &mut R) -> Vec<String> {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    (0..len).map(|_| source_word(rng.gen_range(0..spec.vocab))).collect()
}

pub fn toy_pairs<R: Rng + ?Sized>(spec: &ToySpec, n: usize, rng: &mut R) -> Vec<TextPair> {
    (0..n)
        .map(|_| {
            let s = random_source(spec, rng);
            let t = translate_toy(spec.task, &s);
            (s, t)
        })
        .collect()
}

/// Replaces each target token, with probability `rate`, by a uniformly drawn
/// target word.
pub fn corrupt_targets<R: Rng + ?Sized>(pairs: &mut [TextPair], rate: f64, vocab: usize, rng: &mut R) -> usize {
    let mut changed = 0;
    for (_, t) in pairs.iter_mut() {
        for w in t.iter_mut() {
            if rng.gen_bool(rate) {
                *w = target_word(rng.gen_range(0..vocab));
                changed += 1;
            }
        }
    }
    changed
}
