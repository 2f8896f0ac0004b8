//! Layer-wise relevance propagation over a recorded translation.
//!
//! The forward pass of one sentence pair is recorded on a [`Graph`]; relevance
//! is then walked backwards through the tape with one rule per primitive:
//! weighted sums (affine maps, additions, sums) use the ε-rule and drop the
//! bias share, elementwise nonlinearities pass relevance through unchanged,
//! and gated products send everything to the signal operand. Word relevance
//! is collected at the embedding lookups.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{PaddedIds, Vocabulary, BOS, EOS, UNK};
use crate::decode::{BeamConfig, Decoder};
use crate::error::{NmtError, Result};
use crate::graph::{Graph, Var};
use crate::model::{decode_step, decoder_init, encode, RnnSearchModel};
use crate::tensor::{Op, Tensor};

pub const LAYERS: [&str; 8] = [
    "src_embed",
    "enc_fwd",
    "enc_bwd",
    "tgt_embed",
    "attention",
    "dec_state",
    "readout",
    "output",
];

#[derive(Debug, Clone, PartialEq)]
pub struct LrpConfig {
    pub eps: f64,
    /// Node ids to explain; `None` selects every node.
    pub nodes: Option<Vec<String>>,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig { eps: 1e-6, nodes: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceNode {
    pub id: String,
    pub layer: &'static str,
    pub pos: usize,
    pub var: Var,
    /// Number of target words preceding this node (0 on the source side).
    pub prefix: usize,
    /// For output nodes, the emitted token whose logit is explained.
    pub pick: Option<usize>,
}

/// Every activation of one forward pass, with named nodes.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub graph: Graph,
    /// Source ids, EOS included.
    pub src: Vec<usize>,
    /// Emitted target ids, one per decoder step.
    pub tgt: Vec<usize>,
    pub nodes: Vec<TraceNode>,
    /// Attention weights per decoder step.
    pub attention: Vec<Var>,
    /// Embedding lookup of each source position.
    src_words: HashMap<Var, usize>,
    /// Embedding lookup of each emitted target word fed back as input.
    tgt_words: HashMap<Var, usize>,
}

impl ActivationTrace {
    pub fn node(&self, id: &str) -> Result<&TraceNode> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| NmtError::UnknownNode(id.to_string()))
    }

    pub fn value(&self, id: &str) -> Result<&Tensor> {
        Ok(self.graph.value(self.node(id)?.var))
    }

    pub fn attention_row(&self, step: usize) -> &[f64] {
        self.graph.value(self.attention[step]).data()
    }
}

/// Number of named nodes for `src_len` source tokens (EOS excluded) and
/// `tgt_len` emitted tokens.
pub fn trace_node_count(src_len: usize, tgt_len: usize) -> usize {
    3 * (src_len + 1) + tgt_len.saturating_sub(1) + 4 * tgt_len
}

/// Runs the model on `src` (EOS appended) forcing the emitted tokens `tgt`.
pub fn capture_trace(model: &RnnSearchModel, src: &[usize], tgt: &[usize]) -> Result<ActivationTrace> {
    if src.is_empty() {
        return Err(NmtError::Empty("source sentence"));
    }
    if tgt.is_empty() {
        return Err(NmtError::Empty("target sentence"));
    }
    let mut g = Graph::new();
    let mv = model.bind(&mut g, false);
    let padded = PaddedIds::new(&[src]);
    let enc = encode(&mut g, &mv, &padded)?;
    let mut nodes = Vec::new();
    let mut push = |id: String, layer: &'static str, pos: usize, var: Var, prefix: usize, pick: Option<usize>| {
        nodes.push(TraceNode { id, layer, pos, var, prefix, pick })
    };
    let mut src_words = HashMap::new();
    for (j, &v) in enc.embeds.iter().enumerate() {
        push(format!("src_embed:{j}"), "src_embed", j, v, 0, None);
        src_words.insert(v, j);
    }
    for (j, &v) in enc.fwd.iter().enumerate() {
        push(format!("enc_fwd:{j}"), "enc_fwd", j, v, 0, None);
    }
    for (j, &v) in enc.bwd.iter().enumerate() {
        push(format!("enc_bwd:{j}"), "enc_bwd", j, v, 0, None);
    }
    let mut s = decoder_init(&mut g, &mv, &enc)?;
    let mut tgt_words = HashMap::new();
    let mut attention = Vec::with_capacity(tgt.len());
    let mut prev = BOS;
    for (t, &y) in tgt.iter().enumerate() {
        let step = decode_step(&mut g, &mv, &enc, s, &[prev])?;
        if t > 0 {
            push(format!("tgt_embed:{}", t - 1), "tgt_embed", t - 1, step.embed, t, None);
            tgt_words.insert(step.embed, t - 1);
        }
        push(format!("attention:{t}"), "attention", t, step.context, t, None);
        push(format!("dec_state:{t}"), "dec_state", t, step.state, t, None);
        push(format!("readout:{t}"), "readout", t, step.readout, t, None);
        push(format!("output:{t}"), "output", t, step.logits, t, Some(y));
        attention.push(step.weights);
        s = step.state;
        prev = y;
    }
    let mut src_ids = src.to_vec();
    src_ids.push(EOS);
    Ok(ActivationTrace {
        graph: g,
        src: src_ids,
        tgt: tgt.to_vec(),
        nodes,
        attention,
        src_words,
        tgt_words,
    })
}

fn stab(v: f64, eps: f64) -> f64 {
    if v >= 0.0 {
        v + eps
    } else {
        v - eps
    }
}

/// ε-rule for `v = Σ_m x_m W_m + b` over a batch of rows: returns the
/// relevance of each `x_m`. The bias share is dropped.
pub fn epsilon_affine(terms: &[(&Tensor, &Tensor)], v: &Tensor, r: &[f64], eps: f64) -> Vec<Vec<f64>> {
    let (rows, out) = (v.rows(), v.cols());
    let ratio: Vec<f64> = v.data().iter().zip(r).map(|(&v, &r)| r / stab(v, eps)).collect();
    terms
        .iter()
        .map(|(x, w)| {
            let inp = x.cols();
            let mut rx = vec![0.0; rows * inp];
            for row in 0..rows {
                for i in 0..inp {
                    let xi = x.data()[row * inp + i];
                    if xi == 0.0 {
                        continue;
                    }
                    let wr = &w.data()[i * out..(i + 1) * out];
                    let q = &ratio[row * out..(row + 1) * out];
                    rx[row * inp + i] = xi * wr.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            rx
        })
        .collect()
}

/// One dense layer `v = x·W + b` explained by the ε-rule.
pub fn lrp_linear(x: &[f64], w: &Tensor, b: &[f64], r_out: &[f64], eps: f64) -> Result<Vec<f64>> {
    let xt = Tensor::row(x.to_vec())?;
    let bias = Tensor::row(b.to_vec())?;
    let v = crate::tensor::forward_op(&Op::Affine { has_bias: true }, &[&xt, w, &bias])?;
    if r_out.len() != v.len() {
        return Err(NmtError::shape("lrp_linear", format!("{} relevances for {} units", r_out.len(), v.len())));
    }
    Ok(epsilon_affine(&[(&xt, w)], &v, r_out, eps).remove(0))
}

fn add_into(slot: &mut Option<Vec<f64>>, r: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(r).for_each(|(a, b)| *a += b),
        None => *slot = Some(r),
    }
}

/// Relevance of every node reachable backwards from `start`, seeded with
/// `seed` (same length as the start node's value). Leaves receive nothing.
pub fn propagate(g: &Graph, start: Var, seed: Vec<f64>, eps: f64) -> Result<Vec<Option<Vec<f64>>>> {
    if seed.len() != g.value(start).len() {
        return Err(NmtError::shape("propagate", "seed does not match the start node"));
    }
    let mut rel: Vec<Option<Vec<f64>>> = vec![None; start.index() + 1];
    rel[start.index()] = Some(seed);
    for i in (0..=start.index()).rev() {
        let node = &g.nodes()[i];
        let Some(op) = &node.op else { continue };
        let Some(r) = rel[i].take() else { continue };
        let v = &node.value;
        let inputs = &node.inputs;
        let val = |k: usize| g.value(inputs[k]);
        let want = |k: usize| !g.node(inputs[k]).is_leaf();
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        match op {
            Op::Sigmoid
            | Op::Tanh
            | Op::Log
            | Op::Exp
            | Op::Scale(_)
            | Op::AddScalar(_)
            | Op::SoftmaxRows { .. }
            | Op::LogSoftmaxRows
            | Op::Reshape { .. } => out.push((0, r.clone())),
            Op::Gate | Op::Mul | Op::ScaleRows => out.push((0, r.clone())),
            Op::Affine { .. } => {
                let n = inputs.len() / 2;
                let terms: Vec<(&Tensor, &Tensor)> = (0..n).map(|m| (val(2 * m), val(2 * m + 1))).collect();
                for (m, rx) in epsilon_affine(&terms, v, &r, eps).into_iter().enumerate() {
                    out.push((2 * m, rx));
                }
            }
            Op::Matmul => {
                if want(0) || !want(1) {
                    out.push((0, epsilon_affine(&[(val(0), val(1))], v, &r, eps).remove(0)));
                } else {
                    // weights on the left: explain the right operand
                    let (a, b) = (val(0), val(1));
                    let (rows, inner, cols) = (a.rows(), a.cols(), b.cols());
                    let mut rb = vec![0.0; inner * cols];
                    for row in 0..rows {
                        for k in 0..cols {
                            let q = r[row * cols + k] / stab(v.data()[row * cols + k], eps);
                            for i in 0..inner {
                                rb[i * cols + k] += a.data()[row * inner + i] * b.data()[i * cols + k] * q;
                            }
                        }
                    }
                    out.push((1, rb));
                }
            }
            Op::Add => {
                let (a, b) = (val(0), val(1));
                let cols = v.cols();
                let mut ra = vec![0.0; a.len()];
                let mut rb = vec![0.0; b.len()];
                let broadcast = b.len() != a.len();
                for (idx, (&vv, &rr)) in v.data().iter().zip(&r).enumerate() {
                    let q = rr / stab(vv, eps);
                    ra[idx] = a.data()[idx] * q;
                    let bi = if broadcast { idx % cols } else { idx };
                    rb[bi] += b.data()[bi] * q;
                }
                out.push((0, ra));
                out.push((1, rb));
            }
            Op::Sum | Op::Mean => {
                let x = val(0);
                let scale = if matches!(op, Op::Mean) { 1.0 / x.len() as f64 } else { 1.0 };
                let q = r[0] / stab(v.item(), eps);
                out.push((0, x.data().iter().map(|xi| xi * scale * q).collect()));
            }
            Op::Concat => {
                let rows = v.rows();
                let total = v.cols();
                let mut offset = 0;
                for (k, &inp) in inputs.iter().enumerate() {
                    let c = g.value(inp).cols();
                    let mut part = vec![0.0; rows * c];
                    for row in 0..rows {
                        part[row * c..(row + 1) * c]
                            .copy_from_slice(&r[row * total + offset..row * total + offset + c]);
                    }
                    out.push((k, part));
                    offset += c;
                }
            }
            Op::Slice { start, end } => {
                let x = val(0);
                let (rows, cols, w) = (x.rows(), x.cols(), end - start);
                let mut full = vec![0.0; x.len()];
                for row in 0..rows {
                    full[row * cols + start..row * cols + end].copy_from_slice(&r[row * w..(row + 1) * w]);
                }
                out.push((0, full));
            }
            Op::Pick { ids } => {
                let x = val(0);
                let cols = x.cols();
                let mut full = vec![0.0; x.len()];
                for (row, &id) in ids.iter().enumerate() {
                    full[row * cols + id] = r[row];
                }
                out.push((0, full));
            }
            Op::MaximumPairwise => {
                let (a, b) = (val(0), val(1));
                let mut ra = vec![0.0; a.len()];
                let mut rb = vec![0.0; b.len()];
                for (idx, &rr) in r.iter().enumerate() {
                    if a.data()[idx] >= b.data()[idx] {
                        ra[idx] = rr;
                    } else {
                        rb[idx] = rr;
                    }
                }
                out.push((0, ra));
                out.push((1, rb));
            }
            Op::LookupRows { ids } => {
                let table = val(0);
                let cols = table.cols();
                let mut full = vec![0.0; table.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        full[id * cols + c] += r[row * cols + c];
                    }
                }
                out.push((0, full));
            }
        }
        rel[i] = Some(r);
        for (k, rx) in out {
            if want(k) {
                add_into(&mut rel[inputs[k].index()], rx);
            }
        }
    }
    Ok(rel)
}

/// Relevance of one node over the contextual words.
#[derive(Debug, Clone, PartialEq)]
pub struct WordRelevance {
    pub src: Vec<f64>,
    pub tgt_prefix: Vec<f64>,
    /// Total word relevance before normalization.
    pub raw_sum: f64,
}

fn seed_for(trace: &ActivationTrace, node: &TraceNode) -> Vec<f64> {
    let n = trace.graph.value(node.var).len();
    match node.pick {
        Some(id) => {
            let mut s = vec![0.0; n];
            s[id] = 1.0;
            s
        }
        None => vec![1.0 / n as f64; n],
    }
}

/// Unnormalized word relevance for a node given an explicit seed.
pub fn word_relevance_raw(trace: &ActivationTrace, node: &TraceNode, seed: Vec<f64>, eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let rel = propagate(&trace.graph, node.var, seed, eps)?;
    let mut src = vec![0.0; trace.src.len()];
    let mut tgt = vec![0.0; node.prefix];
    for (var, &j) in &trace.src_words {
        if let Some(Some(r)) = rel.get(var.index()) {
            src[j] += r.iter().sum::<f64>();
        }
    }
    for (var, &j) in &trace.tgt_words {
        if j < node.prefix {
            if let Some(Some(r)) = rel.get(var.index()) {
                tgt[j] += r.iter().sum::<f64>();
            }
        }
    }
    Ok((src, tgt))
}

/// Relevance of node `id` over source words and the target prefix,
/// normalized to sum to one (uniform when the raw total vanishes).
pub fn lrp_propagate(trace: &ActivationTrace, id: &str, cfg: &LrpConfig) -> Result<WordRelevance> {
    if cfg.eps <= 0.0 {
        return Err(NmtError::invalid("LRP stabilizer must be positive"));
    }
    let node = trace.node(id)?;
    let (mut src, mut tgt) = word_relevance_raw(trace, node, seed_for(trace, node), cfg.eps)?;
    let raw_sum: f64 = src.iter().chain(&tgt).sum();
    let n = src.len() + tgt.len();
    if raw_sum.abs() < 1e-12 || !raw_sum.is_finite() {
        src.iter_mut().chain(tgt.iter_mut()).for_each(|v| *v = 1.0 / n as f64);
    } else {
        src.iter_mut().chain(tgt.iter_mut()).for_each(|v| *v /= raw_sum);
    }
    Ok(WordRelevance { src, tgt_prefix: tgt, raw_sum })
}

fn round9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().unwrap_or(v)
}

fn round_all(v: &[f64]) -> Vec<f64> {
    v.iter().copied().map(round9).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRelevance {
    pub src: Vec<f64>,
    pub tgt_prefix: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentNode {
    pub id: String,
    pub layer: String,
    pub pos: usize,
    pub relevance: NodeRelevance,
    pub raw_sum: f64,
}

/// The JSON document consumed by the inspector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceDocument {
    pub version: u32,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub layers: Vec<String>,
    pub nodes: Vec<DocumentNode>,
}

impl RelevanceDocument {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and checks a document: version, known layers, and vector
    /// lengths consistent with the sentence pair.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RelevanceDocument = serde_json::from_str(text)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(NmtError::Parse(format!("unsupported document version {}", self.version)));
        }
        for n in &self.nodes {
            if !self.layers.contains(&n.layer) {
                return Err(NmtError::Parse(format!("node {}: unknown layer {}", n.id, n.layer)));
            }
            if n.relevance.src.len() != self.src.len() || n.relevance.tgt_prefix.len() > self.tgt.len() {
                return Err(NmtError::Parse(format!("node {}: relevance length mismatch", n.id)));
            }
        }
        Ok(())
    }
}

/// Builds the document for an already captured trace.
pub fn relevance_document(
    trace: &ActivationTrace,
    src_tokens: Vec<String>,
    tgt_tokens: Vec<String>,
    cfg: &LrpConfig,
) -> Result<RelevanceDocument> {
    let selected: Vec<&TraceNode> = match &cfg.nodes {
        None => trace.nodes.iter().collect(),
        Some(ids) => ids.iter().map(|id| trace.node(id)).collect::<Result<_>>()?,
    };
    let mut nodes = Vec::with_capacity(selected.len());
    for n in selected {
        let r = lrp_propagate(trace, &n.id, cfg)?;
        nodes.push(DocumentNode {
            id: n.id.clone(),
            layer: n.layer.to_string(),
            pos: n.pos,
            relevance: NodeRelevance {
                src: round_all(&r.src),
                tgt_prefix: round_all(&r.tgt_prefix),
            },
            raw_sum: round9(r.raw_sum),
        });
    }
    Ok(RelevanceDocument {
        version: 1,
        src: src_tokens,
        tgt: tgt_tokens,
        layers: LAYERS.iter().map(|s| s.to_string()).collect(),
        nodes,
    })
}

/// Result of [`export_relevance`].
#[derive(Debug, Clone)]
pub struct Export {
    pub document: RelevanceDocument,
    pub warnings: Vec<String>,
}

/// Explains the translation of `src` (whitespace-tokenized). With `tgt` the
/// target is forced (EOS appended); otherwise it is decoded with `beam`.
pub fn export_relevance(
    model: &RnnSearchModel,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    src: &str,
    tgt: Option<&str>,
    beam: usize,
    cfg: &LrpConfig,
) -> Result<Export> {
    let src_tokens: Vec<String> = src.split_whitespace().map(String::from).collect();
    if src_tokens.is_empty() {
        return Err(NmtError::Empty("source sentence"));
    }
    let src_ids = src_vocab.encode_tokens(&src_tokens);
    let mut warnings = Vec::new();
    if src_ids.iter().all(|&id| id == UNK) {
        warnings.push("every source token is out of vocabulary; unknown-word embeddings used".to_string());
    }
    let tgt_ids = match tgt {
        Some(t) => {
            let mut ids = tgt_vocab.encode(t);
            ids.push(EOS);
            ids
        }
        None => {
            let cfg = BeamConfig {
                beam: beam.max(1),
                max_len: 2 * src_ids.len() + 10,
                length_norm: false,
            };
            Decoder::new(model).beam_search(&src_ids, &cfg)?.remove(0).output_tokens()
        }
    };
    let trace = capture_trace(model, &src_ids, &tgt_ids)?;
    let mut src_out = src_tokens;
    src_out.push(tgt_vocab_eos());
    let tgt_out: Vec<String> = tgt_ids.iter().map(|&id| tgt_vocab.token(id).to_string()).collect();
    let document = relevance_document(&trace, src_out, tgt_out, cfg)?;
    Ok(Export { document, warnings })
}

fn tgt_vocab_eos() -> String {
    crate::data::RESERVED_TOKENS[EOS].to_string()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;

    #[test]
    fn identity_layer_routes_to_active_input() {
        let r = lrp_linear(&[0.0, 1.0, 0.0], &Tensor::identity(3), &[0.0; 3], &[0.0, 1.0, 0.0], 1e-9).unwrap();
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 1.0).abs() < 1e-8);
        assert_eq!(r[2], 0.0);
    }

    #[test]
    fn equal_contributions_split_evenly() {
        // v = 2a + 1b, a = 1, b = 2
        let w = Tensor::matrix(2, 1, vec![2.0, 1.0]).unwrap();
        let r = lrp_linear(&[1.0, 2.0], &w, &[0.0], &[1.0], 1e-12).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-11 && (r[1] - 0.5).abs() < 1e-11);
    }

    #[test]
    fn two_layer_network_by_hand() {
        // h = tanh(x W1), g = sigmoid(x Wg), y = (h∘g) W2
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(vec![1.0, 2.0]).unwrap());
        let xin = g.scale(x, 1.0).unwrap();
        let w1 = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.5, -1.0, 1.0]).unwrap());
        let wg = g.constant(Tensor::matrix(2, 2, vec![0.3, 0.1, 0.2, -0.4]).unwrap());
        let w2 = g.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let pre = g.affine(&[(xin, w1)], None).unwrap();
        let h_var = g.tanh(pre).unwrap();
        let gp = g.affine(&[(xin, wg)], None).unwrap();
        let gate = g.sigmoid(gp).unwrap();
        let hg = g.gate(h_var, gate).unwrap();
        let y = g.affine(&[(hg, w2)], None).unwrap();
        let rel = propagate(&g, y, vec![1.0], 0.0).unwrap();

        // pre = [1 - 2, 0.5 + 2] = [-1, 2.5]
        let h = [(-1f64).tanh(), 2.5f64.tanh()];
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let gv = [s(0.3 + 0.4), s(0.1 - 0.8)];
        let hg = [h[0] * gv[0], h[1] * gv[1]];
        let yv = hg[0] + 2.0 * hg[1];
        let r_hg = [hg[0] / yv, 2.0 * hg[1] / yv];
        // gate: all to h; tanh: unchanged onto pre
        let r_pre = r_hg;
        let r_x = [
            1.0 * 1.0 / -1.0 * r_pre[0] + 1.0 * 0.5 / 2.5 * r_pre[1],
            2.0 * -1.0 / -1.0 * r_pre[0] + 2.0 * 1.0 / 2.5 * r_pre[1],
        ];
        let got = rel[xin.index()].as_ref().unwrap();
        assert!((got[0] - r_x[0]).abs() < 1e-12 && (got[1] - r_x[1]).abs() < 1e-12, "{got:?} vs {r_x:?}");
        // gate operands get nothing, nonlinearities pass through bitwise
        assert!(rel[gate.index()].is_none() && rel[gp.index()].is_none());
        assert_eq!(rel[h_var.index()], rel[pre.index()]);
    }

    fn trace() -> ActivationTrace {
        let m = RnnSearchModel::init(Dims::new(8, 8, 4, 5), 3).unwrap();
        capture_trace(&m, &[4, 5], &[6, EOS]).unwrap()
    }

    #[test]
    fn trace_nodes_and_replay() {
        let t = trace();
        assert_eq!(t.nodes.len(), trace_node_count(2, 2));
        let again = trace();
        for (a, b) in t.nodes.iter().zip(&again.nodes) {
            assert_eq!(t.graph.value(a.var), again.graph.value(b.var));
        }
        for s in 0..2 {
            assert!((t.attention_row(s).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn propagation_is_linear_in_seed() {
        let t = trace();
        let node = t.node("dec_state:1").unwrap();
        let n = t.graph.value(node.var).len();
        let seed: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.2).collect();
        let (a_src, a_tgt) = word_relevance_raw(&t, node, seed.clone(), 1e-6).unwrap();
        let (b_src, b_tgt) = word_relevance_raw(&t, node, seed.iter().map(|v| 2.0 * v).collect(), 1e-6).unwrap();
        for (a, b) in a_src.iter().chain(&a_tgt).zip(b_src.iter().chain(&b_tgt)) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn gate_operands_receive_nothing() {
        let t = trace();
        for node in &t.nodes {
            let rel = propagate(&t.graph, node.var, seed_for(&t, node), 1e-6).unwrap();
            for n in &t.graph.nodes()[..=node.var.index()] {
                if matches!(n.op, Some(Op::Gate) | Some(Op::ScaleRows)) {
                    let gate = n.inputs[1].index();
                    assert!(rel[gate].as_ref().map_or(true, |r| r.iter().all(|&v| v == 0.0)));
                }
            }
        }
    }

    #[test]
    fn document_round_trip() {
        let m = RnnSearchModel::init(Dims::new(8, 8, 4, 5), 3).unwrap();
        let sv = Vocabulary::from_tokens(["a", "b", "c", "d"]);
        let tv = Vocabulary::from_tokens(["x", "y", "z", "w"]);
        let e = export_relevance(&m, &sv, &tv, "a b", Some("x y"), 1, &LrpConfig::default()).unwrap();
        let doc = e.document;
        assert!(e.warnings.is_empty());
        assert_eq!(doc.src, vec!["a", "b", "</s>"]);
        assert_eq!(doc.tgt, vec!["x", "y", "</s>"]);
        assert_eq!(doc.nodes.len(), trace_node_count(2, 3));
        for n in &doc.nodes {
            let s: f64 = n.relevance.src.iter().chain(&n.relevance.tgt_prefix).sum();
            assert!((s - 1.0).abs() < 1e-6, "{}: {s}", n.id);
        }
        let json = doc.to_json().unwrap();
        assert_eq!(RelevanceDocument::from_json(&json).unwrap(), doc);
        assert!(RelevanceDocument::from_json("{\"version\":2}").is_err());
        let oov = export_relevance(&m, &sv, &tv, "qq rr", None, 2, &LrpConfig::default()).unwrap();
        assert_eq!(oov.warnings.len(), 1);
    }

    #[test]
    fn unknown_node_is_an_error() {
        assert!(lrp_propagate(&trace(), "dec_state:9", &LrpConfig::default()).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }
}
