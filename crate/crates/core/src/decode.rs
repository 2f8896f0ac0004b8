//! Beam search, greedy and ancestral-sampling decoders, and attention-based
//! unknown-word replacement.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::Rng;

use crate::data::{BilingualDictionary, PaddedIds, Vocabulary, BOS, EOS, PAD, UNK};
use crate::error::{NmtError, Result};
use crate::graph::{Graph, Var};
use crate::model::{decode_step, decoder_init, encode, Encoded, ModelVars, RnnSearchModel};
use crate::tensor::Tensor;

/// A (partial) translation. `tokens` holds the emitted ids, BOS excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of the per-step log-probabilities of `tokens`.
    pub log_prob: f64,
    /// Attention weights over source positions (EOS included), one row per
    /// emitted token.
    pub attention: Vec<Vec<f64>>,
    /// The last token is EOS. Unfinished hypotheses were cut at `max_len`.
    pub finished: bool,
    state: Vec<f64>,
    completed_at: usize,
}

impl Hypothesis {
    /// Emitted tokens with EOS appended to unfinished hypotheses.
    pub fn output_tokens(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if !self.finished {
            t.push(EOS);
        }
        t
    }

    /// Tokens before EOS.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn truncated(&self) -> bool {
        !self.finished
    }

    pub fn score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.log_prob / self.tokens.len().max(1) as f64
        } else {
            self.log_prob
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_norm: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 10,
            max_len: 100,
            length_norm: false,
        }
    }
}

/// Tokens the decoder may emit.
fn emittable(id: usize) -> bool {
    id != PAD && id != BOS
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Inference-only wrapper: the parameters are bound once as constants and
/// per-sentence nodes are dropped after each call.
pub struct Decoder {
    graph: Graph,
    vars: ModelVars,
    base: usize,
    tgt_vocab: usize,
}

struct StepValues {
    log_probs: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    states: Vec<Vec<f64>>,
}

impl Decoder {
    pub fn new(model: &RnnSearchModel) -> Self {
        let mut graph = Graph::new();
        let vars = model.bind(&mut graph, false);
        let base = graph.len();
        Decoder {
            graph,
            vars,
            base,
            tgt_vocab: model.dims.tgt_vocab,
        }
    }

    fn reset(&mut self) {
        self.graph.truncate(self.base);
    }

    fn encode_one(&mut self, src: &[usize]) -> Result<(Encoded, Vec<f64>)> {
        if src.is_empty() {
            return Err(NmtError::Empty("source sentence"));
        }
        let padded = PaddedIds::new(&[src]);
        let enc = encode(&mut self.graph, &self.vars, &padded)?;
        let s0 = decoder_init(&mut self.graph, &self.vars, &enc)?;
        let s0 = self.graph.value(s0).data().to_vec();
        Ok((enc, s0))
    }

    /// Encoder outputs repeated `rows` times.
    fn replicate(&mut self, enc: &Encoded, rows: usize) -> Result<Encoded> {
        if rows == enc.rows {
            return Ok(enc.clone());
        }
        let g = &mut self.graph;
        let rep = |g: &mut Graph, v: &[Var]| -> Result<Vec<Var>> {
            v.iter().map(|&x| g.lookup_rows(x, vec![0; rows])).collect()
        };
        Ok(Encoded {
            rows,
            len: enc.len,
            embeds: Vec::new(),
            fwd: Vec::new(),
            bwd: rep(g, &enc.bwd[..1])?,
            annotations: rep(g, &enc.annotations)?,
            projected: rep(g, &enc.projected)?,
            mask: None,
        })
    }

    fn step(&mut self, enc: &Encoded, states: &[Vec<f64>], prev: &[usize]) -> Result<StepValues> {
        let dh = self.vars.dims.hidden;
        let s = Tensor::matrix(states.len(), dh, states.concat())?;
        let s = self.graph.constant(s);
        let out = decode_step(&mut self.graph, &self.vars, enc, s, prev)?;
        let logits = self.graph.value(out.logits);
        let weights = self.graph.value(out.weights);
        let next = self.graph.value(out.state);
        Ok(StepValues {
            log_probs: (0..states.len()).map(|i| log_softmax(logits.row_slice(i))).collect(),
            weights: (0..states.len()).map(|i| weights.row_slice(i).to_vec()).collect(),
            states: (0..states.len()).map(|i| next.row_slice(i).to_vec()).collect(),
        })
    }

    /// Beam search; results sorted best-first.
    pub fn beam_search(&mut self, src: &[usize], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
        if cfg.beam == 0 || cfg.max_len == 0 {
            return Err(NmtError::invalid("beam and max_len must be at least 1"));
        }
        let out = self.beam_search_inner(src, cfg);
        self.reset();
        out
    }

    fn beam_search_inner(&mut self, src: &[usize], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
        let (enc, s0) = self.encode_one(src)?;
        let mut replicated: HashMap<usize, Encoded> = HashMap::new();
        let mut live = vec![Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            attention: Vec::new(),
            finished: false,
            state: s0,
            completed_at: 0,
        }];
        let mut completed: Vec<Hypothesis> = Vec::new();
        let rank = |a: &Hypothesis, b: &Hypothesis| -> Ordering {
            b.score(cfg.length_norm)
                .total_cmp(&a.score(cfg.length_norm))
                .then(a.completed_at.cmp(&b.completed_at))
                .then_with(|| a.tokens.cmp(&b.tokens))
        };

        for step in 0..cfg.max_len {
            let k = live.len();
            if !replicated.contains_key(&k) {
                let r = self.replicate(&enc, k)?;
                replicated.insert(k, r);
            }
            let states: Vec<Vec<f64>> = live.iter().map(|h| h.state.clone()).collect();
            let prev: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
            let vals = self.step(&replicated[&k], &states, &prev)?;

            // (score, parent, token)
            let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(k * self.tgt_vocab);
            for (i, h) in live.iter().enumerate() {
                for (w, lp) in vals.log_probs[i].iter().enumerate() {
                    if emittable(w) {
                        cands.push((h.log_prob + lp, i, w));
                    }
                }
            }
            cands.sort_by(|a, b| {
                b.0.total_cmp(&a.0).then_with(|| {
                    let ta = live[a.1].tokens.iter().chain(std::iter::once(&a.2));
                    let tb = live[b.1].tokens.iter().chain(std::iter::once(&b.2));
                    ta.cmp(tb)
                })
            });
            cands.truncate(cfg.beam);

            let mut next_live = Vec::with_capacity(cfg.beam);
            for (score, parent, w) in cands {
                let p = &live[parent];
                let mut tokens = p.tokens.clone();
                tokens.push(w);
                let mut attention = p.attention.clone();
                attention.push(vals.weights[parent].clone());
                let hyp = Hypothesis {
                    tokens,
                    log_prob: score,
                    attention,
                    finished: w == EOS,
                    state: vals.states[parent].clone(),
                    completed_at: step,
                };
                if hyp.finished {
                    completed.push(hyp);
                } else {
                    next_live.push(hyp);
                }
            }
            completed.sort_by(rank);
            completed.truncate(cfg.beam);
            live = next_live;
            if live.is_empty() {
                break;
            }
            if completed.len() == cfg.beam {
                if cfg.length_norm {
                    break;
                }
                // log-probabilities only decrease, so nothing live can overtake
                let worst = completed.last().map_or(f64::NEG_INFINITY, |h| h.log_prob);
                let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
                if best_live <= worst {
                    break;
                }
            }
        }
        for h in &mut live {
            h.completed_at = cfg.max_len;
        }
        let mut all = completed;
        all.extend(live);
        all.sort_by(rank);
        all.truncate(cfg.beam);
        Ok(all)
    }

    /// Greedy argmax decoding of a single sentence.
    pub fn greedy(&mut self, src: &[usize], max_len: usize) -> Result<Hypothesis> {
        let cfg = BeamConfig {
            beam: 1,
            max_len,
            length_norm: false,
        };
        Ok(self.beam_search(src, &cfg)?.remove(0))
    }

    /// Greedy decoding of many sentences in one padded batch. Returns the
    /// emitted tokens of each (EOS included when produced).
    pub fn greedy_batch(&mut self, srcs: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
        let out = self.greedy_batch_inner(srcs, max_len);
        self.reset();
        out
    }

    fn greedy_batch_inner(&mut self, srcs: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
        if srcs.is_empty() {
            return Ok(Vec::new());
        }
        if srcs.iter().any(Vec::is_empty) {
            return Err(NmtError::Empty("source sentence"));
        }
        let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
        let padded = PaddedIds::new(&refs);
        let enc = encode(&mut self.graph, &self.vars, &padded)?;
        let mut s = decoder_init(&mut self.graph, &self.vars, &enc)?;
        let n = srcs.len();
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut done = vec![false; n];
        let mut prev = vec![BOS; n];
        for _ in 0..max_len {
            let step = decode_step(&mut self.graph, &self.vars, &enc, s, &prev)?;
            s = step.state;
            let logits = self.graph.value(step.logits);
            for i in 0..n {
                if done[i] {
                    continue;
                }
                let lp = log_softmax(logits.row_slice(i));
                let mut best = None;
                for (w, &v) in lp.iter().enumerate() {
                    if emittable(w) && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((w, v));
                    }
                }
                let w = best.expect("vocabulary has emittable tokens").0;
                out[i].push(w);
                prev[i] = w;
                done[i] = w == EOS;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    /// `n` ancestral samples for one source sentence. Tokens are drawn from
    /// the step distribution restricted to emittable ids; `log_prob` records
    /// the model's log-probability of each drawn token.
    pub fn sample_many<R: Rng + ?Sized>(&mut self, src: &[usize], n: usize, rng: &mut R, max_len: usize) -> Result<Vec<Hypothesis>> {
        let out = self.sample_inner(src, n, rng, max_len);
        self.reset();
        out
    }

    fn sample_inner<R: Rng + ?Sized>(&mut self, src: &[usize], n: usize, rng: &mut R, max_len: usize) -> Result<Vec<Hypothesis>> {
        if max_len == 0 {
            return Err(NmtError::invalid("max_len must be at least 1"));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let (enc, s0) = self.encode_one(src)?;
        let enc = self.replicate(&enc, n)?;
        let mut hyps: Vec<Hypothesis> = (0..n)
            .map(|_| Hypothesis {
                tokens: Vec::new(),
                log_prob: 0.0,
                attention: Vec::new(),
                finished: false,
                state: s0.clone(),
                completed_at: 0,
            })
            .collect();
        for step in 0..max_len {
            let states: Vec<Vec<f64>> = hyps.iter().map(|h| h.state.clone()).collect();
            let prev: Vec<usize> = hyps.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
            let vals = self.step(&enc, &states, &prev)?;
            for (i, h) in hyps.iter_mut().enumerate() {
                if h.finished {
                    continue;
                }
                let lp = &vals.log_probs[i];
                let mass: f64 = lp.iter().enumerate().filter(|(w, _)| emittable(*w)).map(|(_, v)| v.exp()).sum();
                let u: f64 = rng.gen::<f64>() * mass;
                let mut acc = 0.0;
                let mut pick = None;
                for (w, v) in lp.iter().enumerate() {
                    if !emittable(w) {
                        continue;
                    }
                    acc += v.exp();
                    pick = Some(w);
                    if u < acc {
                        break;
                    }
                }
                let w = pick.expect("vocabulary has emittable tokens");
                h.tokens.push(w);
                h.log_prob += lp[w];
                h.attention.push(vals.weights[i].clone());
                h.state = vals.states[i].clone();
                h.finished = w == EOS;
                h.completed_at = step;
            }
            if hyps.iter().all(|h| h.finished) {
                break;
            }
        }
        Ok(hyps)
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, src: &[usize], rng: &mut R, max_len: usize) -> Result<Hypothesis> {
        Ok(self.sample_many(src, 1, rng, max_len)?.remove(0))
    }

    /// Teacher-forced log-probability of exactly `tokens` (no implicit EOS).
    pub fn score(&mut self, src: &[usize], tokens: &[usize]) -> Result<f64> {
        let out = self.score_inner(src, tokens);
        self.reset();
        out
    }

    fn score_inner(&mut self, src: &[usize], tokens: &[usize]) -> Result<f64> {
        let (enc, s0) = self.encode_one(src)?;
        let mut state = s0;
        let mut prev = BOS;
        let mut total = 0.0;
        for &w in tokens {
            if w >= self.tgt_vocab {
                return Err(NmtError::InvalidId { id: w, size: self.tgt_vocab });
            }
            let vals = self.step(&enc, &[state], &[prev])?;
            total += vals.log_probs[0][w];
            state = vals.states.into_iter().next().expect("one row");
            prev = w;
        }
        Ok(total)
    }
}

pub fn beam_search(model: &RnnSearchModel, src: &[usize], cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    Decoder::new(model).beam_search(src, cfg)
}

pub fn sample<R: Rng + ?Sized>(model: &RnnSearchModel, src: &[usize], rng: &mut R, max_len: usize) -> Result<Hypothesis> {
    Decoder::new(model).sample(src, rng, max_len)
}

/// Replaces every UNK output with the dictionary translation of the source
/// word it attends to most (ties to the smallest index), or copies that
/// source word when the dictionary has no entry. The source EOS position is
/// never chosen. Output has one token per emitted word (EOS excluded).
pub fn replace_unk<S: AsRef<str>>(
    hyp: &Hypothesis,
    src_tokens: &[S],
    dict: &BilingualDictionary,
    tgt_vocab: &Vocabulary,
) -> Vec<String> {
    hyp.words()
        .iter()
        .enumerate()
        .map(|(t, &id)| {
            if id != UNK || src_tokens.is_empty() {
                return tgt_vocab.token(id).to_string();
            }
            let weights = &hyp.attention[t];
            let n = src_tokens.len().min(weights.len());
            let mut best = 0;
            for j in 1..n {
                if weights[j] > weights[best] {
                    best = j;
                }
            }
            let word = src_tokens[best].as_ref();
            dict.get(word).map_or_else(|| word.to_string(), |(t, _)| t.to_string())
        })
        .collect()
}
