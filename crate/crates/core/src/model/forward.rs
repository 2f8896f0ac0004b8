use super::{GruVars, ModelVars, ReadoutKind};
use crate::data::{Batch, PaddedIds, BOS};
use crate::error::{NmtError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `h' = (1 - z)∘h + z∘h̃` with update gate `z`, reset gate `r` and
/// candidate `h̃ = tanh(W_h x + U_h (r∘h) + b_h)`.
pub fn gru_cell(g: &mut Graph, p: &GruVars, x: Var, h: Var) -> Result<Var> {
    let z_pre = g.affine(&[(x, p.w_z), (h, p.u_z)], Some(p.b_z))?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = g.affine(&[(x, p.w_r), (h, p.u_r)], Some(p.b_r))?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.gate(h, r)?;
    let c_pre = g.affine(&[(x, p.w_h), (rh, p.u_h)], Some(p.b_h))?;
    let cand = g.tanh(c_pre)?;
    let neg_z = g.scale(z, -1.0)?;
    let keep = g.add_scalar(neg_z, 1.0)?;
    let old = g.gate(h, keep)?;
    let new = g.gate(cand, z)?;
    g.add(old, new)
}

/// Per-position encoder outputs for a batch of source sentences.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub rows: usize,
    pub len: usize,
    /// Embedding lookups, one `rows x d_e` node per position.
    pub embeds: Vec<Var>,
    pub fwd: Vec<Var>,
    pub bwd: Vec<Var>,
    /// `fwd_j ∥ bwd_j`, `rows x 2d_h`.
    pub annotations: Vec<Var>,
    /// `annotation_j · U_a`, precomputed once per sentence.
    pub projected: Vec<Var>,
    /// Row-major `rows x len` source mask; `None` when nothing is padded.
    pub mask: Option<Vec<f64>>,
}

fn masked_update(g: &mut Graph, new: Var, old: Var, mask_col: &[f64], width: usize) -> Result<Var> {
    if mask_col.iter().all(|&m| m == 1.0) {
        return Ok(new);
    }
    let rows = mask_col.len();
    let m: Vec<f64> = mask_col.iter().flat_map(|&v| std::iter::repeat(v).take(width)).collect();
    let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
    let m = g.constant(Tensor::matrix(rows, width, m)?);
    let inv = g.constant(Tensor::matrix(rows, width, inv)?);
    let a = g.gate(new, m)?;
    let b = g.gate(old, inv)?;
    g.add(a, b)
}

/// Bidirectional GRU encoder. Padded positions leave the running state
/// untouched, so the backward pass starts fresh at each row's last token.
pub fn encode(g: &mut Graph, mv: &ModelVars, src: &PaddedIds) -> Result<Encoded> {
    let (rows, len) = (src.rows(), src.width());
    if rows == 0 || len == 0 {
        return Err(NmtError::Empty("source sentence"));
    }
    let dh = mv.dims.hidden;
    let zero = g.constant(Tensor::zeros(&[rows, dh]));
    let embeds: Vec<Var> = (0..len)
        .map(|t| g.lookup_rows(mv.src_embed, src.column(t)))
        .collect::<Result<_>>()?;

    let mut fwd = Vec::with_capacity(len);
    let mut h = zero;
    for (t, &x) in embeds.iter().enumerate() {
        let new = gru_cell(g, &mv.enc_fwd, x, h)?;
        h = masked_update(g, new, h, &src.mask_column(t), dh)?;
        fwd.push(h);
    }
    let mut bwd = vec![zero; len];
    let mut h = zero;
    for t in (0..len).rev() {
        let new = gru_cell(g, &mv.enc_bwd, embeds[t], h)?;
        h = masked_update(g, new, h, &src.mask_column(t), dh)?;
        bwd[t] = h;
    }
    let mut annotations = Vec::with_capacity(len);
    let mut projected = Vec::with_capacity(len);
    for t in 0..len {
        let ann = g.concat(&[fwd[t], bwd[t]])?;
        projected.push(g.matmul(ann, mv.u_a)?);
        annotations.push(ann);
    }
    let flat = src.flat_mask();
    let mask = flat.iter().any(|&m| m == 0.0).then_some(flat);
    Ok(Encoded {
        rows,
        len,
        embeds,
        fwd,
        bwd,
        annotations,
        projected,
        mask,
    })
}

/// Additive attention: `e_j = v_aᵀ tanh(W_a s + U_a ann_j)`, softmax over
/// unmasked positions, context `Σ_j α_j ann_j`. Returns `(context, weights)`.
pub fn attention(g: &mut Graph, mv: &ModelVars, enc: &Encoded, s_prev: Var) -> Result<(Var, Var)> {
    let query = g.matmul(s_prev, mv.w_a)?;
    let mut scores = Vec::with_capacity(enc.len);
    for &proj in &enc.projected {
        let pre = g.add(query, proj)?;
        let act = g.tanh(pre)?;
        scores.push(g.matmul(act, mv.v_a)?);
    }
    let scores = if scores.len() == 1 { scores[0] } else { g.concat(&scores)? };
    let weights = g.softmax_rows(scores, enc.mask.clone())?;
    let mut context: Option<Var> = None;
    for (j, &ann) in enc.annotations.iter().enumerate() {
        let w = g.slice(weights, j, j + 1)?;
        let term = g.scale_rows(ann, w)?;
        context = Some(match context {
            None => term,
            Some(c) => g.add(c, term)?,
        });
    }
    Ok((context.expect("non-empty source"), weights))
}

/// `s_0 = tanh(W_init · bwd_1 + b_init)`, from the backward state at the
/// first source position.
pub fn decoder_init(g: &mut Graph, mv: &ModelVars, enc: &Encoded) -> Result<Var> {
    let pre = g.affine(&[(enc.bwd[0], mv.w_init)], Some(mv.b_init))?;
    g.tanh(pre)
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub embed: Var,
    pub context: Var,
    pub weights: Var,
    pub state: Var,
    pub readout: Var,
    pub logits: Var,
}

/// One decoder step: attend with `s_prev`, update the GRU on
/// `[embed(y_prev) ∥ context]`, then readout and output logits.
pub fn decode_step(g: &mut Graph, mv: &ModelVars, enc: &Encoded, s_prev: Var, y_prev: &[usize]) -> Result<StepOutput> {
    if y_prev.len() != enc.rows {
        return Err(NmtError::shape(
            "decode_step",
            format!("{} previous tokens for {} rows", y_prev.len(), enc.rows),
        ));
    }
    let embed = g.lookup_rows(mv.tgt_embed, y_prev.to_vec())?;
    let (context, weights) = attention(g, mv, enc, s_prev)?;
    let input = g.concat(&[embed, context])?;
    let state = gru_cell(g, &mv.dec, input, s_prev)?;
    let pre = g.affine(
        &[(state, mv.readout_s), (embed, mv.readout_y), (context, mv.readout_c)],
        Some(mv.readout_b),
    )?;
    let readout = match mv.dims.readout_kind {
        ReadoutKind::Tanh => g.tanh(pre)?,
        ReadoutKind::Maxout => {
            let d = mv.dims.readout;
            let a = g.slice(pre, 0, d)?;
            let b = g.slice(pre, d, 2 * d)?;
            g.maximum(a, b)?
        }
    };
    let logits = g.affine(&[(readout, mv.out_w)], Some(mv.out_b))?;
    Ok(StepOutput {
        embed,
        context,
        weights,
        state,
        readout,
        logits,
    })
}

/// Teacher-forced pass over a batch.
#[derive(Debug, Clone)]
pub struct ForcedPass {
    pub encoded: Encoded,
    pub init_state: Var,
    pub steps: Vec<StepOutput>,
    /// Masked `log p(y_t | y_<t, x)` per step, `rows x 1`.
    pub token_logprobs: Vec<Var>,
    /// Per-sentence log-probability, `rows x 1`.
    pub sequence_logprob: Var,
    /// Sum of all sentence log-probabilities (scalar).
    pub total_logprob: Var,
}

pub fn teacher_forced(g: &mut Graph, mv: &ModelVars, batch: &Batch) -> Result<ForcedPass> {
    let encoded = encode(g, mv, &batch.src)?;
    let init_state = decoder_init(g, mv, &encoded)?;
    let rows = batch.tgt.rows();
    let mut s = init_state;
    let mut steps = Vec::with_capacity(batch.tgt.width());
    let mut token_logprobs = Vec::with_capacity(batch.tgt.width());
    let mut seq: Option<Var> = None;
    for t in 0..batch.tgt.width() {
        let y_prev = if t == 0 { vec![BOS; rows] } else { batch.tgt.column(t - 1) };
        let step = decode_step(g, mv, &encoded, s, &y_prev)?;
        s = step.state;
        let lp = g.log_softmax_rows(step.logits)?;
        let mut picked = g.pick(lp, batch.tgt.column(t))?;
        let mask = batch.tgt.mask_column(t);
        if mask.iter().any(|&m| m != 1.0) {
            let m = g.constant(Tensor::matrix(rows, 1, mask)?);
            picked = g.gate(picked, m)?;
        }
        seq = Some(match seq {
            None => picked,
            Some(acc) => g.add(acc, picked)?,
        });
        token_logprobs.push(picked);
        steps.push(step);
    }
    let sequence_logprob = seq.ok_or(NmtError::Empty("target sentence"))?;
    let total_logprob = g.sum(sequence_logprob)?;
    Ok(ForcedPass {
        encoded,
        init_state,
        steps,
        token_logprobs,
        sequence_logprob,
        total_logprob,
    })
}
