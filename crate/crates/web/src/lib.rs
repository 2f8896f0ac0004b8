//! In-browser demo: trains a small translator on a synthetic copy or reverse
//! task, decodes with beam search (returning the attention matrix) and
//! explains any node of a translation with layer-wise relevance.
//!
//! All results cross the JS boundary as JSON strings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use nmt_core::data::{encode_pairs, Vocabulary};
use nmt_core::decode::{BeamConfig, Decoder};
use nmt_core::interpret::{export_relevance, LrpConfig};
use nmt_core::metrics::sentence_bleu_smoothed;
use nmt_core::synthetic::{toy_pairs, translate_toy, ToySpec, ToyTask};
use nmt_core::train::{sequence_accuracy, DevSet, TrainConfig, Trainer};
use nmt_core::NmtError;

const VALIDATE_SENTENCES: usize = 100;

#[derive(Debug, Serialize, PartialEq)]
pub struct Progress {
    pub iteration: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Translation {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub log_prob: f64,
    /// One row per emitted token (EOS included), one column per source
    /// token (EOS included).
    pub attention: Vec<Vec<f64>>,
    pub reference: Vec<String>,
    pub bleu: f64,
}

pub struct Session {
    task: ToyTask,
    trainer: Trainer,
    sv: Vocabulary,
    tv: Vocabulary,
    dev: DevSet,
}

impl Session {
    pub fn new(task: &str, seed: u64) -> Result<Self, NmtError> {
        let task = match task {
            "copy" => ToyTask::Copy,
            "reverse" => ToyTask::Reverse,
            other => return Err(NmtError::InvalidArgument(format!("unknown task `{other}`"))),
        };
        let spec = ToySpec {
            task,
            ..ToySpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = toy_pairs(&spec, 2000, &mut rng);
        let dev = toy_pairs(&spec, VALIDATE_SENTENCES, &mut rng);
        let sv = Vocabulary::build(train.iter().map(|p| p.0.join(" ")), 100)?;
        let tv = Vocabulary::build(train.iter().map(|p| p.1.join(" ")), 100)?;
        let config = TrainConfig {
            embed: 16,
            hidden: 32,
            learning_rate: Some(0.003),
            seed,
            ..TrainConfig::default()
        };
        let dims = config.dims(sv.len(), tv.len());
        let trainer = Trainer::new(config, dims, None, encode_pairs(&train, &sv, &tv, 50), None)?;
        let dev = DevSet::from_pairs(&encode_pairs(&dev, &sv, &tv, 50));
        Ok(Session {
            task,
            trainer,
            sv,
            tv,
            dev,
        })
    }

    /// Runs `steps` updates and reports the mean loss and dev accuracy.
    pub fn train(&mut self, steps: usize) -> Result<Progress, NmtError> {
        let mut total = 0.0;
        for _ in 0..steps {
            total += self.trainer.step()?.loss;
        }
        Ok(Progress {
            iteration: self.trainer.iteration,
            loss: if steps == 0 { 0.0 } else { total / steps as f64 },
            accuracy: sequence_accuracy(&self.trainer.model, &self.dev)?,
        })
    }

    pub fn translate(&self, src: &str, beam: usize) -> Result<Translation, NmtError> {
        let tokens: Vec<String> = src.split_whitespace().map(String::from).collect();
        if tokens.is_empty() {
            return Err(NmtError::Empty("source sentence"));
        }
        let ids = self.sv.encode_tokens(&tokens);
        let cfg = BeamConfig {
            beam: beam.max(1),
            max_len: 2 * ids.len() + 10,
            length_norm: false,
        };
        let best = Decoder::new(&self.trainer.model).beam_search(&ids, &cfg)?.remove(0);
        let words = self.tv.decode_tokens(best.words());
        let reference = translate_toy(self.task, &tokens);
        let mut src_out = tokens;
        src_out.push(self.sv.token(nmt_core::data::EOS).to_string());
        Ok(Translation {
            src: src_out,
            tgt: best.output_tokens().iter().map(|&id| self.tv.token(id).to_string()).collect(),
            log_prob: best.log_prob,
            attention: best.attention.clone(),
            bleu: sentence_bleu_smoothed(&words, &reference),
            reference,
        })
    }

    /// Relevance document (the inspector's JSON format) for the beam
    /// translation of `src`, restricted to `nodes` when given.
    pub fn explain(&self, src: &str, nodes: Option<Vec<String>>) -> Result<String, NmtError> {
        let cfg = LrpConfig { nodes, ..LrpConfig::default() };
        let export = export_relevance(&self.trainer.model, &self.sv, &self.tv, src, None, 5, &cfg)?;
        export.document.to_json()
    }
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

/// JS handle around a [`Session`].
#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(task: &str, seed: u32) -> Result<Demo, JsValue> {
        Ok(Demo {
            inner: Session::new(task, seed as u64).map_err(js_err)?,
        })
    }

    pub fn train(&mut self, steps: u32) -> Result<String, JsValue> {
        to_json(&self.inner.train(steps as usize).map_err(js_err)?)
    }

    pub fn translate(&self, src: &str, beam: u32) -> Result<String, JsValue> {
        to_json(&self.inner.translate(src, beam as usize).map_err(js_err)?)
    }

    /// `nodes` is a comma-separated id list; empty selects every node.
    pub fn explain(&self, src: &str, nodes: &str) -> Result<String, JsValue> {
        let ids: Vec<String> = nodes.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        self.inner.explain(src, (!ids.is_empty()).then_some(ids)).map_err(js_err)
    }
}
