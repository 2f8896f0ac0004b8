//! Corpora, vocabularies, batching and dictionary induction.

mod batch;
mod dictionary;
mod vocab;

use std::fs;
use std::path::Path;

pub use batch::{make_batches, Batch, IdPair, PaddedIds, BUCKET_WIDTH};
pub use dictionary::{induce_dictionary, BilingualDictionary, ModelOne};
pub use vocab::{Vocabulary, BOS, EOS, NUM_RESERVED, PAD, RESERVED_TOKENS, UNK};

use crate::error::{NmtError, Result};

/// Default cap on sentence length (tokens, before EOS) during training.
pub const DEFAULT_MAX_SENTENCE_LEN: usize = 50;

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

/// One sentence per line, whitespace tokenized. Empty lines are kept as
/// empty sentences so line numbers stay aligned.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(tokenize).collect())
}

pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let s = read_corpus(src)?;
    let t = read_corpus(tgt)?;
    if s.len() != t.len() {
        return Err(NmtError::Parse(format!(
            "parallel corpus misaligned: {} has {} lines, {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    Ok(s.into_iter().zip(t).collect())
}

/// Maps token pairs to ids, dropping empty pairs and pairs where either
/// side exceeds `max_len`.
pub fn encode_pairs<S: AsRef<str>>(
    pairs: &[(Vec<S>, Vec<S>)],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Vec<IdPair> {
    pairs
        .iter()
        .filter(|(s, t)| !s.is_empty() && !t.is_empty() && s.len() <= max_len && t.len() <= max_len)
        .map(|(s, t)| (src_vocab.encode_tokens(s), tgt_vocab.encode_tokens(t)))
        .collect()
}

pub fn encode_mono<S: AsRef<str>>(sentences: &[Vec<S>], vocab: &Vocabulary, max_len: usize) -> Vec<Vec<usize>> {
    sentences
        .iter()
        .filter(|s| !s.is_empty() && s.len() <= max_len)
        .map(|s| vocab.encode_tokens(s))
        .collect()
}
