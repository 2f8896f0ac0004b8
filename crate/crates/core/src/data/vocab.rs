use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{NmtError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token <-> id mapping with four reserved ids in front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps the `cap` most frequent tokens. Equal counts are ordered by
    /// first occurrence in the corpus.
    pub fn build<I, S>(corpus: I, cap: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut seen = 0usize;
        for line in corpus {
            for tok in line.as_ref().split_whitespace() {
                let entry = counts.entry(tok.to_string()).or_insert((0, seen));
                entry.0 += 1;
                seen += 1;
            }
        }
        if counts.is_empty() {
            return Err(NmtError::Empty("vocabulary corpus"));
        }
        let mut ranked: Vec<(String, usize, usize)> =
            counts.into_iter().map(|(t, (c, first))| (t, c, first)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(cap);
        Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _, _)| t)))
    }

    /// Builds from non-reserved tokens in id order (first token gets id 4).
    /// Duplicates and reserved spellings are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: RESERVED_TOKENS.iter().map(|s| s.to_string()).collect(),
            index: RESERVED_TOKENS
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect(),
        };
        for tok in tokens {
            let tok = tok.into();
            if !vocab.index.contains_key(&tok) {
                vocab.index.insert(tok.clone(), vocab.tokens.len());
                vocab.tokens.push(tok);
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.get(token).is_some_and(|&id| id >= NUM_RESERVED)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED_TOKENS[UNK])
    }

    /// Ids of the whitespace tokens, without EOS.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|t| self.lookup(t)).collect()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t.as_ref())).collect()
    }

    /// Tokens up to (not including) the first EOS; PAD and BOS are dropped.
    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        self.decode_tokens(ids).join(" ")
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for tok in self.words() {
            writeln!(f, "{tok}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(Vocabulary::from_tokens(text.lines().map(str::to_string)))
    }
}
