//! Training configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use super::optim::OptimizerKind;
use crate::error::{NmtError, Result};
use crate::model::ReadoutKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Mle,
    Mrt,
    Sst,
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Mle => "mle",
            Criterion::Mrt => "mrt",
            Criterion::Sst => "sst",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Criterion::Mle),
            "mrt" => Ok(Criterion::Mrt),
            "sst" => Ok(Criterion::Sst),
            other => Err(NmtError::Parse(format!("unknown criterion `{other}` (mle, mrt, sst)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub criterion: Criterion,
    pub optimizer: OptimizerKind,
    /// `None` picks the default for the optimizer and criterion.
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    pub mrt_sample_size: usize,
    pub mrt_alpha: f64,
    pub sst_lambda: f64,
    pub sst_sample_size: usize,
    pub clip_norm: f64,
    pub max_iterations: usize,
    pub validate_every: usize,
    pub seed: u64,
    pub vocab_size: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attention: Option<usize>,
    pub readout: Option<usize>,
    pub readout_kind: ReadoutKind,
    pub max_sentence_len: usize,
    pub beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            criterion: Criterion::Mle,
            optimizer: OptimizerKind::Adam,
            learning_rate: None,
            batch_size: 80,
            mrt_sample_size: 25,
            mrt_alpha: 0.005,
            sst_lambda: 0.1,
            sst_sample_size: 2,
            clip_norm: 1.0,
            max_iterations: 100_000,
            validate_every: 1000,
            seed: 1234,
            vocab_size: 30_000,
            embed: 620,
            hidden: 1000,
            attention: None,
            readout: None,
            readout_kind: ReadoutKind::Tanh,
            max_sentence_len: crate::data::DEFAULT_MAX_SENTENCE_LEN,
            beam: 10,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "criterion",
    "optimizer",
    "learning_rate",
    "batch_size",
    "mrt_sample_size",
    "mrt_alpha",
    "sst_lambda",
    "sst_sample_size",
    "clip_norm",
    "max_iterations",
    "validate_every",
    "seed",
    "vocab_size",
    "embed",
    "hidden",
    "attention",
    "readout",
    "readout_kind",
    "max_sentence_len",
    "beam",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| NmtError::Parse(format!("`{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    /// Learning rate actually used: the explicit value, else Adam's per
    /// criterion default, else 1.0.
    pub fn effective_lr(&self) -> f64 {
        if let Some(lr) = self.learning_rate {
            return lr;
        }
        match (self.optimizer, self.criterion) {
            (OptimizerKind::Adam, Criterion::Mle) => 0.0005,
            (OptimizerKind::Adam, Criterion::Mrt) => 0.00001,
            (OptimizerKind::Adam, Criterion::Sst) => 0.00005,
            _ => 1.0,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "criterion" => self.criterion = Criterion::parse(v)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(v)?,
            "learning_rate" => self.learning_rate = Some(num(key, v)?),
            "batch_size" => self.batch_size = num(key, v)?,
            "mrt_sample_size" => self.mrt_sample_size = num(key, v)?,
            "mrt_alpha" => self.mrt_alpha = num(key, v)?,
            "sst_lambda" => self.sst_lambda = num(key, v)?,
            "sst_sample_size" => self.sst_sample_size = num(key, v)?,
            "clip_norm" => self.clip_norm = num(key, v)?,
            "max_iterations" => self.max_iterations = num(key, v)?,
            "validate_every" => self.validate_every = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "vocab_size" => self.vocab_size = num(key, v)?,
            "embed" => self.embed = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "attention" => self.attention = Some(num(key, v)?),
            "readout" => self.readout = Some(num(key, v)?),
            "readout_kind" => self.readout_kind = ReadoutKind::parse(v)?,
            "max_sentence_len" => self.max_sentence_len = num(key, v)?,
            "beam" => self.beam = num(key, v)?,
            other => return Err(NmtError::Parse(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NmtError::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| NmtError::Parse(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("mrt_sample_size", self.mrt_sample_size),
            ("sst_sample_size", self.sst_sample_size),
            ("validate_every", self.validate_every),
            ("vocab_size", self.vocab_size),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("max_sentence_len", self.max_sentence_len),
            ("beam", self.beam),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(NmtError::invalid(format!("`{k}` must be positive")));
            }
        }
        if self.effective_lr() <= 0.0 || !self.effective_lr().is_finite() {
            return Err(NmtError::invalid("`learning_rate` must be positive"));
        }
        if self.mrt_alpha <= 0.0 || !self.mrt_alpha.is_finite() {
            return Err(NmtError::invalid("`mrt_alpha` must be positive"));
        }
        if !(0.0..=1.0).contains(&self.sst_lambda) {
            return Err(NmtError::invalid("`sst_lambda` must lie in [0, 1]"));
        }
        if self.clip_norm <= 0.0 || !self.clip_norm.is_finite() {
            return Err(NmtError::invalid("`clip_norm` must be positive"));
        }
        Ok(())
    }

    /// The configuration in file syntax, every key present.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "criterion = {}", self.criterion.as_str());
        let _ = writeln!(s, "optimizer = {}", self.optimizer.as_str());
        let _ = writeln!(s, "learning_rate = {}", self.effective_lr());
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "mrt_sample_size = {}", self.mrt_sample_size);
        let _ = writeln!(s, "mrt_alpha = {}", self.mrt_alpha);
        let _ = writeln!(s, "sst_lambda = {}", self.sst_lambda);
        let _ = writeln!(s, "sst_sample_size = {}", self.sst_sample_size);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "max_iterations = {}", self.max_iterations);
        let _ = writeln!(s, "validate_every = {}", self.validate_every);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "embed = {}", self.embed);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "attention = {}", self.attention.unwrap_or(self.hidden));
        let _ = writeln!(s, "readout = {}", self.readout.unwrap_or(self.hidden));
        let _ = writeln!(s, "readout_kind = {}", self.readout_kind.as_str());
        let _ = writeln!(s, "max_sentence_len = {}", self.max_sentence_len);
        let _ = writeln!(s, "beam = {}", self.beam);
        s
    }

    pub fn dims(&self, src_vocab: usize, tgt_vocab: usize) -> crate::model::Dims {
        let mut d = crate::model::Dims::new(src_vocab, tgt_vocab, self.embed, self.hidden);
        d.attention = self.attention.unwrap_or(self.hidden);
        d.readout = self.readout.unwrap_or(self.hidden);
        d.readout_kind = self.readout_kind;
        d
    }
}
