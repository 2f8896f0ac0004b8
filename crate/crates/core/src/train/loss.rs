//! The three training objectives as differentiable graph expressions.

use rand::Rng;

use crate::data::{Batch, IdPair, PaddedIds};
use crate::decode::Decoder;
use crate::error::{NmtError, Result};
use crate::graph::{Graph, Var};
use crate::metrics::sentence_bleu_smoothed_generic;
use crate::model::{teacher_forced, ModelVars, RnnSearchModel};
use crate::tensor::Tensor;

/// Mean negative log-likelihood per sentence of a teacher-forced batch.
pub fn mle_loss(g: &mut Graph, mv: &ModelVars, batch: &Batch) -> Result<Var> {
    let pass = teacher_forced(g, mv, batch)?;
    g.scale(pass.total_logprob, -1.0 / batch.size() as f64)
}

/// Expected risk `Σ Q·Δ` with `Q = softmax(α·logp)` over one candidate set.
/// `logps` is a `1 x n` node.
pub fn expected_risk(g: &mut Graph, logps: Var, deltas: &[f64], alpha: f64) -> Result<Var> {
    let n = g.value(logps).len();
    if n != deltas.len() || n == 0 {
        return Err(NmtError::shape("expected_risk", format!("{n} log-probs, {} costs", deltas.len())));
    }
    let scaled = g.scale(logps, alpha)?;
    let q = g.softmax_rows(scaled, None)?;
    let d = g.constant(Tensor::matrix(1, n, deltas.to_vec())?);
    let weighted = g.mul(q, d)?;
    g.sum(weighted)
}

/// Plain-number version of [`expected_risk`].
pub fn expected_risk_value(logps: &[f64], deltas: &[f64], alpha: f64) -> f64 {
    let max = logps.iter().map(|l| alpha * l).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logps.iter().map(|l| (alpha * l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().zip(deltas).map(|(q, d)| q / z * d).sum()
}

/// Candidate translations for one training pair: the reference first, then
/// distinct samples that differ from it, each with its cost
/// `-sentence_bleu(candidate, reference)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub src: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub deltas: Vec<f64>,
}

impl CandidateSet {
    pub fn new(src: Vec<usize>, gold: Vec<usize>, samples: impl IntoIterator<Item = Vec<usize>>) -> Self {
        let mut candidates = vec![gold];
        for s in samples {
            if !candidates.contains(&s) {
                candidates.push(s);
            }
        }
        let gold = &candidates[0];
        let deltas = candidates
            .iter()
            .map(|c| -sentence_bleu_smoothed_generic(c, gold))
            .collect();
        CandidateSet { src, candidates, deltas }
    }
}

/// Draws `sample_size` samples per pair from `model` and builds the
/// candidate sets.
pub fn sample_candidates<R: Rng + ?Sized>(
    decoder: &mut Decoder,
    pairs: &[IdPair],
    sample_size: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<CandidateSet>> {
    if sample_size == 0 {
        return Err(NmtError::invalid("MRT sample size must be at least 1"));
    }
    pairs
        .iter()
        .map(|(src, tgt)| {
            let samples = decoder.sample_many(src, sample_size, rng, max_len)?;
            Ok(CandidateSet::new(
                src.clone(),
                tgt.clone(),
                samples.into_iter().map(|h| h.words().to_vec()),
            ))
        })
        .collect()
}

/// Mean expected risk over candidate sets. All candidates are scored in one
/// teacher-forced batch.
pub fn mrt_loss(g: &mut Graph, mv: &ModelVars, sets: &[CandidateSet], alpha: f64) -> Result<Var> {
    if sets.is_empty() {
        return Err(NmtError::Empty("MRT batch"));
    }
    let mut src_rows: Vec<&[usize]> = Vec::new();
    let mut tgt_rows: Vec<&[usize]> = Vec::new();
    for s in sets {
        for c in &s.candidates {
            src_rows.push(&s.src);
            tgt_rows.push(c);
        }
    }
    let batch = Batch {
        src: PaddedIds::new(&src_rows),
        tgt: PaddedIds::new(&tgt_rows),
    };
    let pass = teacher_forced(g, mv, &batch)?;
    let mut total: Option<Var> = None;
    let mut offset = 0;
    for s in sets {
        let n = s.candidates.len();
        let rows = g.lookup_rows(pass.sequence_logprob, (offset..offset + n).collect())?;
        let row = g.reshape(rows, vec![1, n])?;
        let risk = expected_risk(g, row, &s.deltas, alpha)?;
        total = Some(match total {
            None => risk,
            Some(t) => g.add(t, risk)?,
        });
        offset += n;
    }
    let total = total.expect("non-empty");
    g.scale(total, 1.0 / sets.len() as f64)
}

/// Sampled back-translations for the reconstruction term: for each
/// monolingual sentence `x`, `k` samples `y` from the forward model, paired
/// as `(y, x)` for scoring under the reverse model.
pub fn reconstruction_pairs<R: Rng + ?Sized>(
    forward: &mut Decoder,
    mono: &[Vec<usize>],
    k: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<IdPair>> {
    let mut out = Vec::with_capacity(mono.len() * k);
    for x in mono {
        for h in forward.sample_many(x, k, rng, max_len)? {
            out.push((h.words().to_vec(), x.clone()));
        }
    }
    Ok(out)
}

/// One direction of the semi-supervised objective:
/// `MLE(parallel) + λ · mean_x [-(1/k) Σ_y log p_reverse(x | y)]`.
/// `recon` comes from [`reconstruction_pairs`] with `k` samples per sentence.
pub fn sst_direction_loss(
    g: &mut Graph,
    forward: &ModelVars,
    reverse: &ModelVars,
    parallel: &Batch,
    recon: &[IdPair],
    k: usize,
    lambda: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(NmtError::invalid("SST lambda must lie in [0, 1]"));
    }
    let mle = mle_loss(g, forward, parallel)?;
    if recon.is_empty() || lambda == 0.0 {
        return Ok(mle);
    }
    let batch = Batch::from_pairs(recon);
    let pass = teacher_forced(g, reverse, &batch)?;
    let sentences = recon.len() / k.max(1);
    let r = g.scale(pass.total_logprob, -lambda / (k * sentences.max(1)) as f64)?;
    g.add(mle, r)
}

/// Both directions of the semi-supervised objective on one graph; returns
/// `(loss_src_to_tgt, loss_tgt_to_src)`.
#[allow(clippy::too_many_arguments)]
pub fn sst_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    models: (&RnnSearchModel, &RnnSearchModel),
    vars: (&ModelVars, &ModelVars),
    parallel: &[IdPair],
    mono_src: &[Vec<usize>],
    mono_tgt: &[Vec<usize>],
    lambda: f64,
    k: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<(Var, Var)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(NmtError::invalid("SST lambda must lie in [0, 1]"));
    }
    if k == 0 {
        return Err(NmtError::invalid("SST sample size must be at least 1"));
    }
    let recon_st = reconstruction_pairs(&mut Decoder::new(models.0), mono_src, k, max_len, rng)?;
    let recon_ts = reconstruction_pairs(&mut Decoder::new(models.1), mono_tgt, k, max_len, rng)?;
    let swapped: Vec<IdPair> = parallel.iter().map(|(s, t)| (t.clone(), s.clone())).collect();
    let st = sst_direction_loss(g, vars.0, vars.1, &Batch::from_pairs(parallel), &recon_st, k, lambda)?;
    let ts = sst_direction_loss(g, vars.1, vars.0, &Batch::from_pairs(&swapped), &recon_ts, k, lambda)?;
    Ok((st, ts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;

    #[test]
    fn risk_by_hand() {
        let logps = [-1.0, -2.0, -3.0];
        let deltas = [-1.0, -0.5, -0.2];
        let w: Vec<f64> = logps.iter().map(|l: &f64| (0.5 * l).exp()).collect();
        let z: f64 = w.iter().sum();
        let want: f64 = w.iter().zip(deltas).map(|(q, d)| q / z * d).sum();
        assert!((expected_risk_value(&logps, &deltas, 0.5) - want).abs() < 1e-15);

        let mut g = Graph::new();
        let lp = g.leaf(Tensor::matrix(1, 3, logps.to_vec()).unwrap());
        let r = expected_risk(&mut g, lp, &deltas, 0.5).unwrap();
        assert!((g.value(r).item() - want).abs() < 1e-15);
    }

    #[test]
    fn degenerate_risks() {
        assert_eq!(expected_risk_value(&[-4.0], &[-1.0], 0.005), -1.0);
        let r = expected_risk_value(&[-1.0, -7.0, -2.5], &[-0.3; 3], 0.7);
        assert!((r + 0.3).abs() < 1e-15);
        let base = expected_risk_value(&[-1.0, -2.0], &[-1.0, -0.4], 1.0);
        let extra = expected_risk_value(&[-1.0, -2.0, -52.0], &[-1.0, -0.4, 0.0], 1.0);
        assert!((base - extra).abs() < 1e-8);
    }

    #[test]
    fn gold_only_candidate_set_has_zero_gradient() {
        let m = RnnSearchModel::init(Dims::new(8, 8, 3, 4), 3).unwrap();
        let set = CandidateSet::new(vec![4, 5], vec![6, 7], vec![vec![6, 7]]);
        assert_eq!(set.candidates.len(), 1);
        assert_eq!(set.deltas, vec![-1.0]);
        let mut g = Graph::new();
        let mv = m.bind(&mut g, true);
        let loss = mrt_loss(&mut g, &mv, &[set], 0.005).unwrap();
        assert_eq!(g.value(loss).item(), -1.0);
        g.backward(loss).unwrap();
        for t in m.collect_grads(&g, &mv) {
            assert!(t.data().iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn mle_zero_model_is_uniform_nll() {
        let m = RnnSearchModel::zeros(Dims::new(8, 9, 3, 4)).unwrap();
        let pairs = vec![(vec![4, 5], vec![4, 5, 6]), (vec![6], vec![7])];
        let mut g = Graph::new();
        let mv = m.bind(&mut g, false);
        let l = mle_loss(&mut g, &mv, &Batch::from_pairs(&pairs)).unwrap();
        // 4 and 2 target tokens including EOS
        let want = 3.0 * (9f64).ln();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn sst_reduces_to_mle() {
        let a = RnnSearchModel::init(Dims::new(8, 9, 3, 4), 1).unwrap();
        let b = RnnSearchModel::init(Dims::new(9, 8, 3, 4), 2).unwrap();
        let pairs = vec![(vec![4, 5], vec![4, 5, 6]), (vec![6], vec![7])];
        let swapped: Vec<IdPair> = pairs.iter().map(|(s, t)| (t.clone(), s.clone())).collect();
        let mono_src = vec![vec![4, 6, 7]];
        let mono_tgt = vec![vec![5, 8]];
        let mle = |m: &RnnSearchModel, p: &[IdPair]| {
            let mut g = Graph::new();
            let mv = m.bind(&mut g, false);
            let l = mle_loss(&mut g, &mv, &Batch::from_pairs(p)).unwrap();
            g.value(l).item()
        };
        let (ma, mb) = (mle(&a, &pairs), mle(&b, &swapped));
        let run = |lambda: f64, ms: &[Vec<usize>], mt: &[Vec<usize>]| {
            let mut g = Graph::new();
            let (va, vb) = (a.bind(&mut g, true), b.bind(&mut g, true));
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
            let (x, y) = sst_loss(&mut g, (&a, &b), (&va, &vb), &pairs, ms, mt, lambda, 2, 10, &mut rng).unwrap();
            (g.value(x).item(), g.value(y).item())
        };
        assert_eq!(run(0.0, &mono_src, &mono_tgt), (ma, mb));
        assert_eq!(run(0.3, &[], &[]), (ma, mb));
        assert!(run(0.3, &mono_src, &mono_tgt).0 > ma);
    }
}
