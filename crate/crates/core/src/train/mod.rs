//! Training: objectives, optimizers and the loop with validation-based
//! model selection.

mod config;
mod loss;
mod optim;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Criterion, TrainConfig, CONFIG_KEYS};
pub use loss::{
    expected_risk, expected_risk_value, mle_loss, mrt_loss, reconstruction_pairs, sample_candidates, sst_direction_loss,
    sst_loss, CandidateSet,
};
pub use optim::{AdaDelta, Adam, Optimizer, OptimizerKind};

use crate::data::{make_batches, Batch, IdPair, EOS};
use crate::decode::Decoder;
use crate::error::{NmtError, Result};
use crate::graph::{Graph, Var};
use crate::metrics::corpus_bleu_generic;
use crate::model::{ModelVars, RnnSearchModel};
use crate::tensor::{clip_global_norm, Tensor};

/// Runs `build` on a fresh graph with tracked parameters and returns the
/// loss value and the parameter gradients.
pub fn loss_and_grads(
    model: &RnnSearchModel,
    build: impl FnOnce(&mut Graph, &ModelVars) -> Result<Var>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mv = model.bind(&mut g, true);
    let loss = build(&mut g, &mv)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    Ok((value, model.collect_grads(&g, &mv)))
}

/// Held-out sentences with one reference each, as ids without EOS.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DevSet {
    pub src: Vec<Vec<usize>>,
    pub refs: Vec<Vec<usize>>,
}

impl DevSet {
    pub fn from_pairs(pairs: &[IdPair]) -> Self {
        DevSet {
            src: pairs.iter().map(|p| p.0.clone()).collect(),
            refs: pairs.iter().map(|p| p.1.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    fn max_len(&self) -> usize {
        2 * self.src.iter().map(Vec::len).max().unwrap_or(0) + 10
    }
}

fn strip_eos(mut t: Vec<usize>) -> Vec<usize> {
    if t.last() == Some(&EOS) {
        t.pop();
    }
    t
}

/// Greedy translations of the dev sources, EOS removed.
pub fn greedy_translate(model: &RnnSearchModel, src: &[Vec<usize>], max_len: usize) -> Result<Vec<Vec<usize>>> {
    let mut dec = Decoder::new(model);
    let mut out = Vec::with_capacity(src.len());
    for chunk in src.chunks(64) {
        out.extend(dec.greedy_batch(chunk, max_len)?.into_iter().map(strip_eos));
    }
    Ok(out)
}

/// Corpus BLEU (in `[0, 1]`) of greedy translations of the dev set.
pub fn dev_bleu(model: &RnnSearchModel, dev: &DevSet) -> Result<f64> {
    let hyps = greedy_translate(model, &dev.src, dev.max_len())?;
    let refs: Vec<Vec<Vec<usize>>> = dev.refs.iter().map(|r| vec![r.clone()]).collect();
    Ok(corpus_bleu_generic(&hyps, &refs)?.bleu)
}

/// Fraction of dev sentences whose greedy translation equals the reference.
pub fn sequence_accuracy(model: &RnnSearchModel, dev: &DevSet) -> Result<f64> {
    if dev.is_empty() {
        return Err(NmtError::Empty("dev set"));
    }
    let hyps = greedy_translate(model, &dev.src, dev.max_len())?;
    let hits = hyps.iter().zip(&dev.refs).filter(|(h, r)| h == r).count();
    Ok(hits as f64 / dev.len() as f64)
}

/// One validation event.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub criterion: Criterion,
    /// Mean training loss since the previous record.
    pub loss: f64,
    /// Dev BLEU ×100, `None` without a dev set.
    pub dev_bleu: Option<f64>,
    pub seconds: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bleu = self.dev_bleu.map_or_else(|| "-".to_string(), |b| format!("{b:.2}"));
        write!(
            f,
            "{}\t{}\t{:.6}\t{}\t{:.1}",
            self.iteration,
            self.criterion.as_str(),
            self.loss,
            bleu,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// `false` when Adam skipped a non-finite gradient.
    pub applied: bool,
}

#[cfg(not(target_arch = "wasm32"))]
#[derive(Debug, Clone)]
struct Clock(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Clock {
    fn start() -> Self {
        Clock(std::time::Instant::now())
    }
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[cfg(target_arch = "wasm32")]
#[derive(Debug, Clone)]
struct Clock;

#[cfg(target_arch = "wasm32")]
impl Clock {
    fn start() -> Self {
        Clock
    }
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Endless stream of shuffled, length-bucketed batches.
#[derive(Debug, Clone)]
struct BatchStream {
    pairs: Vec<IdPair>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: Vec<Batch>,
}

impl BatchStream {
    fn new(pairs: Vec<IdPair>, batch_size: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(NmtError::Empty("training corpus"));
        }
        Ok(BatchStream {
            pairs,
            batch_size,
            seed,
            epoch: 0,
            queue: Vec::new(),
        })
    }

    fn next(&mut self) -> Batch {
        if self.queue.is_empty() {
            let seed = self.seed.wrapping_add(self.epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            self.queue = make_batches(&self.pairs, self.batch_size, seed);
            self.queue.reverse();
            self.epoch += 1;
        }
        self.queue.pop().expect("non-empty corpus gives batches")
    }
}

/// Batch back to its unpadded pairs.
fn batch_pairs(b: &Batch) -> Vec<IdPair> {
    (0..b.size())
        .map(|r| (strip_eos(b.src.row(r).to_vec()), strip_eos(b.tgt.row(r).to_vec())))
        .collect()
}

/// Steps one model under MLE or MRT.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: RnnSearchModel,
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    pub dev: Option<DevSet>,
    pub iteration: usize,
    /// Best dev BLEU (×100) so far and the parameters that reached it.
    pub best: Option<(f64, RnnSearchModel)>,
    pub log: Vec<LogRecord>,
    /// Number of steps Adam skipped.
    pub skipped: usize,
    stream: BatchStream,
    rng: ChaCha8Rng,
    clock: Clock,
    loss_sum: f64,
    loss_count: usize,
}

impl Trainer {
    /// `init` is required for MRT; MLE starts from `init` when given, else
    /// from a fresh model of `dims`.
    pub fn new(
        config: TrainConfig,
        dims: crate::model::Dims,
        init: Option<RnnSearchModel>,
        train: Vec<IdPair>,
        dev: Option<DevSet>,
    ) -> Result<Self> {
        config.validate()?;
        let model = match (config.criterion, init) {
            (Criterion::Sst, _) => {
                return Err(NmtError::invalid("SST trains two models; use SstTrainer"));
            }
            (Criterion::Mrt, None) => {
                return Err(NmtError::invalid(
                    "MRT requires an initial checkpoint: the model trained with MLE serves as the initial model of MRT",
                ));
            }
            (_, Some(m)) => m,
            (Criterion::Mle, None) => RnnSearchModel::init(dims, config.seed)?,
        };
        let optimizer = Optimizer::new(config.optimizer, model.params(), config.effective_lr());
        let stream = BatchStream::new(train, config.batch_size, config.seed)?;
        Ok(Trainer {
            model,
            optimizer,
            dev,
            iteration: 0,
            best: None,
            log: Vec::new(),
            skipped: 0,
            stream,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed),
            clock: Clock::start(),
            loss_sum: 0.0,
            loss_count: 0,
            config,
        })
    }

    pub fn step(&mut self) -> Result<StepReport> {
        self.step_with(|_| {})
    }

    /// One update; `hook` may edit the gradients before clipping.
    pub fn step_with(&mut self, hook: impl FnOnce(&mut [Tensor])) -> Result<StepReport> {
        let batch = self.stream.next();
        let (loss, mut grads) = match self.config.criterion {
            Criterion::Mle => loss_and_grads(&self.model, |g, mv| mle_loss(g, mv, &batch))?,
            Criterion::Mrt => {
                let pairs = batch_pairs(&batch);
                let max_len = 2 * pairs.iter().map(|p| p.0.len()).max().unwrap_or(0) + 10;
                let sets = sample_candidates(
                    &mut Decoder::new(&self.model),
                    &pairs,
                    self.config.mrt_sample_size,
                    max_len,
                    &mut self.rng,
                )?;
                let alpha = self.config.mrt_alpha;
                loss_and_grads(&self.model, |g, mv| mrt_loss(g, mv, &sets, alpha))?
            }
            Criterion::Sst => unreachable!("rejected in Trainer::new"),
        };
        hook(&mut grads);
        let kind = self.optimizer.kind();
        if !loss.is_finite() && kind != OptimizerKind::Adam {
            return Err(NmtError::NonFinite(format!(
                "loss {loss} at iteration {} under {}",
                self.iteration + 1,
                kind.as_str()
            )));
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm)?;
        let applied = self.optimizer.step(self.model.params_mut(), &grads).map_err(|e| {
            NmtError::NonFinite(format!("iteration {}: {e}", self.iteration + 1))
        })?;
        self.iteration += 1;
        if applied {
            self.loss_sum += loss;
            self.loss_count += 1;
        } else {
            self.skipped += 1;
        }
        Ok(StepReport { loss, grad_norm, applied })
    }

    /// Records a log line and updates the best checkpoint.
    pub fn validate(&mut self) -> Result<LogRecord> {
        let dev_bleu = match &self.dev {
            Some(dev) if !dev.is_empty() => Some(dev_bleu(&self.model, dev)? * 100.0),
            _ => None,
        };
        if let Some(b) = dev_bleu {
            if self.best.as_ref().map_or(true, |(best, _)| b > *best) {
                self.best = Some((b, self.model.clone()));
            }
        }
        let rec = LogRecord {
            iteration: self.iteration,
            criterion: self.config.criterion,
            loss: if self.loss_count == 0 { f64::NAN } else { self.loss_sum / self.loss_count as f64 },
            dev_bleu,
            seconds: self.clock.seconds(),
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Trains to `max_iterations`, validating every `validate_every` steps
    /// and at the end.
    pub fn run(&mut self, mut on_log: impl FnMut(&LogRecord)) -> Result<()> {
        while self.iteration < self.config.max_iterations {
            self.step()?;
            if self.iteration % self.config.validate_every == 0 || self.iteration == self.config.max_iterations {
                let rec = self.validate()?;
                on_log(&rec);
            }
        }
        Ok(())
    }

    /// The best validated model, or the current one without a dev set.
    pub fn best_model(&self) -> &RnnSearchModel {
        self.best.as_ref().map_or(&self.model, |(_, m)| m)
    }
}

/// Jointly trains a source-to-target and a target-to-source model on
/// parallel data plus monolingual text on each side.
#[derive(Debug, Clone)]
pub struct SstTrainer {
    pub forward: RnnSearchModel,
    pub backward: RnnSearchModel,
    pub config: TrainConfig,
    pub opt_forward: Optimizer,
    pub opt_backward: Optimizer,
    pub dev_forward: Option<DevSet>,
    pub dev_backward: Option<DevSet>,
    pub iteration: usize,
    pub best_forward: Option<(f64, RnnSearchModel)>,
    pub best_backward: Option<(f64, RnnSearchModel)>,
    pub log: Vec<LogRecord>,
    stream: BatchStream,
    mono_src: Vec<Vec<usize>>,
    mono_tgt: Vec<Vec<usize>>,
    mono_cursor: usize,
    rng: ChaCha8Rng,
    clock: Clock,
    loss_sum: f64,
    loss_count: usize,
}

impl SstTrainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: TrainConfig,
        forward: RnnSearchModel,
        backward: RnnSearchModel,
        parallel: Vec<IdPair>,
        mono_src: Vec<Vec<usize>>,
        mono_tgt: Vec<Vec<usize>>,
        dev_forward: Option<DevSet>,
        dev_backward: Option<DevSet>,
    ) -> Result<Self> {
        config.validate()?;
        if forward.dims.src_vocab != backward.dims.tgt_vocab || forward.dims.tgt_vocab != backward.dims.src_vocab {
            return Err(NmtError::invalid("SST models must translate in opposite directions"));
        }
        let lr = config.effective_lr();
        Ok(SstTrainer {
            opt_forward: Optimizer::new(config.optimizer, forward.params(), lr),
            opt_backward: Optimizer::new(config.optimizer, backward.params(), lr),
            forward,
            backward,
            dev_forward,
            dev_backward,
            iteration: 0,
            best_forward: None,
            best_backward: None,
            log: Vec::new(),
            stream: BatchStream::new(parallel, config.batch_size, config.seed)?,
            mono_src,
            mono_tgt,
            mono_cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed),
            clock: Clock::start(),
            loss_sum: 0.0,
            loss_count: 0,
            config,
        })
    }

    fn mono_slice(&mut self) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let n = self.config.batch_size;
        let take = |pool: &[Vec<usize>], start: usize| -> Vec<Vec<usize>> {
            if pool.is_empty() {
                return Vec::new();
            }
            (0..n.min(pool.len())).map(|i| pool[(start + i) % pool.len()].clone()).collect()
        };
        let out = (take(&self.mono_src, self.mono_cursor), take(&self.mono_tgt, self.mono_cursor));
        self.mono_cursor += n;
        let len = self.mono_src.len().max(self.mono_tgt.len());
        if len > 0 && self.mono_cursor >= len {
            self.mono_cursor = 0;
            self.mono_src.shuffle(&mut self.rng);
            self.mono_tgt.shuffle(&mut self.rng);
        }
        out
    }

    /// One joint update; returns the summed loss of both directions.
    pub fn step(&mut self) -> Result<StepReport> {
        let pairs = batch_pairs(&self.stream.next());
        let (mono_src, mono_tgt) = self.mono_slice();
        let max_len = 2 * self.config.max_sentence_len + 10;
        let mut g = Graph::new();
        let vf = self.forward.bind(&mut g, true);
        let vb = self.backward.bind(&mut g, true);
        let (lf, lb) = sst_loss(
            &mut g,
            (&self.forward, &self.backward),
            (&vf, &vb),
            &pairs,
            &mono_src,
            &mono_tgt,
            self.config.sst_lambda,
            self.config.sst_sample_size,
            max_len,
            &mut self.rng,
        )?;
        let total = g.add(lf, lb)?;
        let loss = g.value(total).item();
        if !loss.is_finite() && self.config.optimizer != OptimizerKind::Adam {
            return Err(NmtError::NonFinite(format!("loss {loss} at iteration {}", self.iteration + 1)));
        }
        g.backward(total)?;
        let mut gf = self.forward.collect_grads(&g, &vf);
        let mut gb = self.backward.collect_grads(&g, &vb);
        let nf = clip_global_norm(&mut gf, self.config.clip_norm)?;
        let nb = clip_global_norm(&mut gb, self.config.clip_norm)?;
        let af = self.opt_forward.step(self.forward.params_mut(), &gf)?;
        let ab = self.opt_backward.step(self.backward.params_mut(), &gb)?;
        self.iteration += 1;
        if af && ab {
            self.loss_sum += loss;
            self.loss_count += 1;
        }
        Ok(StepReport {
            loss,
            grad_norm: (nf * nf + nb * nb).sqrt(),
            applied: af && ab,
        })
    }

    /// Logs the mean dev BLEU of the two directions; keeps the best model
    /// per direction.
    pub fn validate(&mut self) -> Result<LogRecord> {
        let mut scores = Vec::new();
        if let Some(dev) = self.dev_forward.as_ref().filter(|d| !d.is_empty()) {
            let b = dev_bleu(&self.forward, dev)? * 100.0;
            if self.best_forward.as_ref().map_or(true, |(best, _)| b > *best) {
                self.best_forward = Some((b, self.forward.clone()));
            }
            scores.push(b);
        }
        if let Some(dev) = self.dev_backward.as_ref().filter(|d| !d.is_empty()) {
            let b = dev_bleu(&self.backward, dev)? * 100.0;
            if self.best_backward.as_ref().map_or(true, |(best, _)| b > *best) {
                self.best_backward = Some((b, self.backward.clone()));
            }
            scores.push(b);
        }
        let rec = LogRecord {
            iteration: self.iteration,
            criterion: Criterion::Sst,
            loss: if self.loss_count == 0 { f64::NAN } else { self.loss_sum / self.loss_count as f64 },
            dev_bleu: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
            seconds: self.clock.seconds(),
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        self.log.push(rec.clone());
        Ok(rec)
    }

    pub fn run(&mut self, mut on_log: impl FnMut(&LogRecord)) -> Result<()> {
        while self.iteration < self.config.max_iterations {
            self.step()?;
            if self.iteration % self.config.validate_every == 0 || self.iteration == self.config.max_iterations {
                let rec = self.validate()?;
                on_log(&rec);
            }
        }
        Ok(())
    }

    pub fn best_forward_model(&self) -> &RnnSearchModel {
        self.best_forward.as_ref().map_or(&self.forward, |(_, m)| m)
    }

    pub fn best_backward_model(&self) -> &RnnSearchModel {
        self.best_backward.as_ref().map_or(&self.backward, |(_, m)| m)
    }
}
