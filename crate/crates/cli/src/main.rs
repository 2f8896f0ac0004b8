//! `nmt`: the command-line entry point for the whole pipeline.

mod serve;

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use nmt_core::data::{
    encode_mono, encode_pairs, induce_dictionary, read_corpus, read_parallel, tokenize, BilingualDictionary,
    Vocabulary,
};
use nmt_core::decode::{replace_unk, BeamConfig, Decoder};
use nmt_core::interpret::{export_relevance, LrpConfig};
use nmt_core::metrics::corpus_bleu_multi;
use nmt_core::model::{load_checkpoint, save_checkpoint, RnnSearchModel};
use nmt_core::train::{Criterion, DevSet, LogRecord, SstTrainer, TrainConfig, Trainer};
use nmt_core::NmtError;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Runtime { context: String, source: NmtError },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime { .. } => 2,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

trait Context<T> {
    fn context(self, what: impl Into<String>) -> CliResult<T>;
}

impl<T, E: Into<NmtError>> Context<T> for std::result::Result<T, E> {
    fn context(self, what: impl Into<String>) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime {
            context: what.into(),
            source: e.into(),
        })
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "nmt", version, about = "Attention-based neural machine translation toolkit")]
struct Cli {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Random seed (overrides the config file) [default: 1234]
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a vocabulary file from a tokenized corpus
    BuildVocab(BuildVocabArgs),
    /// Induce a bilingual dictionary with IBM Model 1
    BuildDict(BuildDictArgs),
    /// Train a model (mle, mrt or sst)
    Train(Box<TrainArgs>),
    /// Translate one sentence per line
    Translate(TranslateArgs),
    /// Score translations with case-insensitive BLEU
    Evaluate(EvaluateArgs),
    /// Write the relevance document for one sentence pair
    ExportRelevance(ExportArgs),
    /// Serve the inspector page and a relevance document over HTTP
    ServeInspector(ServeArgs),
}

#[derive(Debug, Args)]
struct BuildVocabArgs {
    /// Tokenized corpus, one sentence per line
    #[arg(long)]
    input: PathBuf,
    /// Output vocabulary file
    #[arg(long)]
    output: PathBuf,
    /// Maximum number of words kept [default: config vocab_size, else 30000]
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Args)]
struct BuildDictArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    /// Output dictionary (TSV: source, target, probability)
    #[arg(long)]
    output: PathBuf,
    /// EM iterations
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    /// Minimum translation probability kept
    #[arg(long, default_value_t = 0.0)]
    min_prob: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    /// Where the selected checkpoint is written
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    dev_src: Option<PathBuf>,
    #[arg(long)]
    dev_tgt: Option<PathBuf>,
    /// Starting checkpoint; required for mrt and sst
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Append validation records here (also printed to stderr)
    #[arg(long)]
    log: Option<PathBuf>,
    /// mle, mrt or sst [default: mle]
    #[arg(long)]
    criterion: Option<String>,
    /// sgd, adadelta or adam [default: adam]
    #[arg(long)]
    optimizer: Option<String>,
    /// [default: adam 0.0005 (mle) / 0.00001 (mrt) / 0.00005 (sst), else 1.0]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// [default: 80]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 100000]
    #[arg(long)]
    max_iterations: Option<usize>,
    /// [default: 1000]
    #[arg(long)]
    validate_every: Option<usize>,
    /// Word embedding size [default: 620]
    #[arg(long)]
    embed: Option<usize>,
    /// Recurrent state size [default: 1000]
    #[arg(long)]
    hidden: Option<usize>,
    /// [default: 25]
    #[arg(long)]
    mrt_sample_size: Option<usize>,
    /// [default: 0.005]
    #[arg(long)]
    mrt_alpha: Option<f64>,
    /// [default: 0.1]
    #[arg(long)]
    sst_lambda: Option<f64>,
    /// [default: 2]
    #[arg(long)]
    sst_sample_size: Option<usize>,
    /// Global gradient norm limit [default: 1.0]
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Drop training pairs longer than this [default: 50]
    #[arg(long)]
    max_sentence_len: Option<usize>,
    /// sst: monolingual source-side text
    #[arg(long)]
    mono_src: Option<PathBuf>,
    /// sst: monolingual target-side text
    #[arg(long)]
    mono_tgt: Option<PathBuf>,
    /// sst: starting target-to-source checkpoint
    #[arg(long)]
    init_backward: Option<PathBuf>,
    /// sst: where the target-to-source checkpoint is written
    #[arg(long)]
    output_backward: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    /// Input file [default: stdin]
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output file [default: stdout]
    #[arg(long)]
    output: Option<PathBuf>,
    /// Beam size [default: config beam, else 10]
    #[arg(long)]
    beam: Option<usize>,
    /// Maximum output length [default: 2 x source length + 10]
    #[arg(long)]
    max_len: Option<usize>,
    /// Rank finished hypotheses by per-token log-probability
    #[arg(long)]
    length_norm: bool,
    /// Replace unknown words through attention and the dictionary
    #[arg(long)]
    replace_unk: bool,
    /// Bilingual dictionary for --replace-unk (copy only without it)
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Worker threads [default: available cores]
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Translations, one per line
    #[arg(long)]
    hyp: PathBuf,
    /// Reference file; repeat for multiple references
    #[arg(long = "ref", required = true)]
    refs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    src_vocab: PathBuf,
    #[arg(long)]
    tgt_vocab: PathBuf,
    /// Source sentence
    #[arg(long)]
    src: String,
    /// Target sentence to explain [default: decode with --beam]
    #[arg(long)]
    tgt: Option<String>,
    /// Output JSON file
    #[arg(long)]
    output: PathBuf,
    /// Beam size when decoding
    #[arg(long, default_value_t = 10)]
    beam: usize,
    /// LRP stabilizer
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Comma-separated node ids [default: all nodes]
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Relevance document to serve at /api/document
    #[arg(long)]
    document: PathBuf,
    /// Directory with the inspector bundle (index.html) [default: built-in page]
    #[arg(long)]
    assets: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn load_config(cli: &Cli) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).context(format!("reading {}", path.display()))?;
        cfg.apply_text(&text)
            .map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn set_flag(cfg: &mut TrainConfig, key: &str, value: Option<impl ToString>) -> CliResult<()> {
    if let Some(v) = value {
        cfg.set(key, &v.to_string())
            .map_err(|e| usage(format!("--{}: {e}", key.replace('_', "-"))))?;
    }
    Ok(())
}

fn load_vocab(path: &Path) -> CliResult<Vocabulary> {
    Vocabulary::load(path).context(format!("reading vocabulary {}", path.display()))
}

fn load_model(path: &Path) -> CliResult<RnnSearchModel> {
    load_checkpoint(path).context(format!("loading checkpoint {}", path.display()))
}

fn build_vocab(cfg: &TrainConfig, a: &BuildVocabArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.input).context(format!("reading {}", a.input.display()))?;
    let vocab = Vocabulary::build(text.lines(), a.size.unwrap_or(cfg.vocab_size)).context("building vocabulary")?;
    vocab.save(&a.output).context(format!("writing {}", a.output.display()))?;
    eprintln!("{} words written to {}", vocab.words().len(), a.output.display());
    Ok(())
}

fn build_dict(a: &BuildDictArgs) -> CliResult<()> {
    let pairs = read_parallel(&a.src, &a.tgt).context("reading parallel corpus")?;
    let dict = induce_dictionary(&pairs, a.iterations, a.min_prob).context("inducing dictionary")?;
    dict.save(&a.output).context(format!("writing {}", a.output.display()))?;
    eprintln!("{} entries written to {}", dict.len(), a.output.display());
    Ok(())
}

fn train_config(mut cfg: TrainConfig, a: &TrainArgs) -> CliResult<TrainConfig> {
    set_flag(&mut cfg, "criterion", a.criterion.as_ref())?;
    set_flag(&mut cfg, "optimizer", a.optimizer.as_ref())?;
    set_flag(&mut cfg, "learning_rate", a.learning_rate)?;
    set_flag(&mut cfg, "batch_size", a.batch_size)?;
    set_flag(&mut cfg, "max_iterations", a.max_iterations)?;
    set_flag(&mut cfg, "validate_every", a.validate_every)?;
    set_flag(&mut cfg, "embed", a.embed)?;
    set_flag(&mut cfg, "hidden", a.hidden)?;
    set_flag(&mut cfg, "mrt_sample_size", a.mrt_sample_size)?;
    set_flag(&mut cfg, "mrt_alpha", a.mrt_alpha)?;
    set_flag(&mut cfg, "sst_lambda", a.sst_lambda)?;
    set_flag(&mut cfg, "sst_sample_size", a.sst_sample_size)?;
    set_flag(&mut cfg, "clip_norm", a.clip_norm)?;
    set_flag(&mut cfg, "max_sentence_len", a.max_sentence_len)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

struct LogSink(Option<fs::File>);

impl LogSink {
    fn open(path: Option<&PathBuf>) -> CliResult<Self> {
        match path {
            None => Ok(LogSink(None)),
            Some(p) => Ok(LogSink(Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .context(format!("opening log {}", p.display()))?,
            ))),
        }
    }

    fn write(&mut self, rec: &LogRecord) {
        eprintln!("{rec}");
        if let Some(f) = &mut self.0 {
            let _ = writeln!(f, "{rec}");
        }
    }
}

fn check_dims(model: &RnnSearchModel, sv: &Vocabulary, tv: &Vocabulary, path: &Path) -> CliResult<()> {
    if model.dims.src_vocab != sv.len() || model.dims.tgt_vocab != tv.len() {
        return Err(usage(format!(
            "{}: checkpoint vocabularies ({} / {}) do not match the vocabulary files ({} / {})",
            path.display(),
            model.dims.src_vocab,
            model.dims.tgt_vocab,
            sv.len(),
            tv.len()
        )));
    }
    Ok(())
}

fn train(cfg: TrainConfig, a: &TrainArgs) -> CliResult<()> {
    let cfg = train_config(cfg, a)?;
    match cfg.criterion {
        Criterion::Mrt if a.init_checkpoint.is_none() => {
            return Err(usage(
                "--criterion mrt requires --init-checkpoint: MRT starts from a model trained with MLE",
            ));
        }
        Criterion::Sst if a.init_checkpoint.is_none() || a.init_backward.is_none() => {
            return Err(usage(
                "--criterion sst requires --init-checkpoint and --init-backward: both directions start from MLE models",
            ));
        }
        Criterion::Sst if a.output_backward.is_none() => {
            return Err(usage("--criterion sst requires --output-backward"));
        }
        _ => {}
    }
    if a.dev_src.is_some() != a.dev_tgt.is_some() {
        return Err(usage("--dev-src and --dev-tgt must be given together"));
    }
    let sv = load_vocab(&a.src_vocab)?;
    let tv = load_vocab(&a.tgt_vocab)?;
    let pairs = read_parallel(&a.src, &a.tgt).context("reading training corpus")?;
    let train_ids = encode_pairs(&pairs, &sv, &tv, cfg.max_sentence_len);
    let dev_pairs = match (&a.dev_src, &a.dev_tgt) {
        (Some(s), Some(t)) => Some(read_parallel(s, t).context("reading dev corpus")?),
        _ => None,
    };
    let mut log = LogSink::open(a.log.as_ref())?;

    if cfg.criterion == Criterion::Sst {
        let init_f = a.init_checkpoint.as_ref().expect("checked");
        let init_b = a.init_backward.as_ref().expect("checked");
        let forward = load_model(init_f)?;
        let backward = load_model(init_b)?;
        check_dims(&forward, &sv, &tv, init_f)?;
        check_dims(&backward, &tv, &sv, init_b)?;
        let mono = |p: &Option<PathBuf>, v: &Vocabulary| -> CliResult<Vec<Vec<usize>>> {
            match p {
                None => Ok(Vec::new()),
                Some(p) => Ok(encode_mono(
                    &read_corpus(p).context(format!("reading {}", p.display()))?,
                    v,
                    cfg.max_sentence_len,
                )),
            }
        };
        let mono_src = mono(&a.mono_src, &sv)?;
        let mono_tgt = mono(&a.mono_tgt, &tv)?;
        let (dev_f, dev_b) = match &dev_pairs {
            Some(d) => {
                let swapped: Vec<_> = d.iter().map(|(s, t)| (t.clone(), s.clone())).collect();
                (
                    Some(DevSet::from_pairs(&encode_pairs(d, &sv, &tv, usize::MAX))),
                    Some(DevSet::from_pairs(&encode_pairs(&swapped, &tv, &sv, usize::MAX))),
                )
            }
            None => (None, None),
        };
        let mut t = SstTrainer::new(cfg, forward, backward, train_ids, mono_src, mono_tgt, dev_f, dev_b)
            .context("setting up training")?;
        t.run(|r| log.write(r)).context("training")?;
        save_checkpoint(t.best_forward_model(), &a.output).context(format!("writing {}", a.output.display()))?;
        let out_b = a.output_backward.as_ref().expect("checked");
        save_checkpoint(t.best_backward_model(), out_b).context(format!("writing {}", out_b.display()))?;
        return Ok(());
    }

    let init = match &a.init_checkpoint {
        Some(p) => {
            let m = load_model(p)?;
            check_dims(&m, &sv, &tv, p)?;
            Some(m)
        }
        None => None,
    };
    let dev = dev_pairs.map(|d| DevSet::from_pairs(&encode_pairs(&d, &sv, &tv, usize::MAX)));
    let dims = cfg.dims(sv.len(), tv.len());
    let mut t = Trainer::new(cfg, dims, init, train_ids, dev).context("setting up training")?;
    t.run(|r| log.write(r)).context("training")?;
    if t.skipped > 0 {
        eprintln!("{} updates skipped on non-finite gradients", t.skipped);
    }
    save_checkpoint(t.best_model(), &a.output).context(format!("writing {}", a.output.display()))?;
    Ok(())
}

fn read_input(path: Option<&PathBuf>) -> CliResult<Vec<String>> {
    match path {
        Some(p) => Ok(fs::read_to_string(p)
            .context(format!("reading {}", p.display()))?
            .lines()
            .map(String::from)
            .collect()),
        None => {
            let mut text = String::new();
            io::stdin().read_to_string(&mut text).context("reading stdin")?;
            Ok(text.lines().map(String::from).collect())
        }
    }
}

struct TranslateJob<'a> {
    model: &'a RnnSearchModel,
    sv: &'a Vocabulary,
    tv: &'a Vocabulary,
    dict: Option<&'a BilingualDictionary>,
    beam: usize,
    max_len: Option<usize>,
    length_norm: bool,
}

impl TranslateJob<'_> {
    fn run(&self, decoder: &mut Decoder, line: &str) -> nmt_core::Result<String> {
        let tokens = tokenize(line);
        if tokens.is_empty() {
            return Ok(String::new());
        }
        let ids = self.sv.encode_tokens(&tokens);
        let cfg = BeamConfig {
            beam: self.beam,
            max_len: self.max_len.unwrap_or(2 * ids.len() + 10),
            length_norm: self.length_norm,
        };
        let best = decoder.beam_search(&ids, &cfg)?.remove(0);
        let words = match self.dict {
            Some(d) => replace_unk(&best, &tokens, d, self.tv),
            None => self.tv.decode_tokens(best.words()),
        };
        Ok(words.join(" "))
    }
}

fn translate(cfg: &TrainConfig, a: &TranslateArgs) -> CliResult<()> {
    let beam = a.beam.unwrap_or(cfg.beam);
    if beam == 0 {
        return Err(usage("--beam must be at least 1"));
    }
    if a.max_len == Some(0) {
        return Err(usage("--max-len must be at least 1"));
    }
    if a.dict.is_some() && !a.replace_unk {
        return Err(usage("--dict is only used with --replace-unk"));
    }
    let model = load_model(&a.checkpoint)?;
    let sv = load_vocab(&a.src_vocab)?;
    let tv = load_vocab(&a.tgt_vocab)?;
    check_dims(&model, &sv, &tv, &a.checkpoint)?;
    let dict = match (&a.dict, a.replace_unk) {
        (Some(p), _) => Some(BilingualDictionary::load(p).context(format!("reading {}", p.display()))?),
        (None, true) => Some(BilingualDictionary::default()),
        (None, false) => None,
    };
    let lines = read_input(a.input.as_ref())?;
    let job = TranslateJob {
        model: &model,
        sv: &sv,
        tv: &tv,
        dict: dict.as_ref(),
        beam,
        max_len: a.max_len,
        length_norm: a.length_norm,
    };
    let threads = a
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, lines.len().max(1));
    let chunk = lines.len().div_ceil(threads).max(1);
    let results: Vec<nmt_core::Result<Vec<String>>> = std::thread::scope(|s| {
        let handles: Vec<_> = lines
            .chunks(chunk)
            .map(|part| {
                let job = &job;
                s.spawn(move || {
                    let mut dec = Decoder::new(job.model);
                    part.iter().map(|l| job.run(&mut dec, l)).collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("translation worker panicked")).collect()
    });
    let mut out: Vec<String> = Vec::with_capacity(lines.len());
    for r in results {
        out.extend(r.context("translating")?);
    }
    let mut text = out.join("\n");
    if !out.is_empty() {
        text.push('\n');
    }
    match &a.output {
        Some(p) => fs::write(p, text).context(format!("writing {}", p.display()))?,
        None => io::stdout().write_all(text.as_bytes()).context("writing stdout")?,
    }
    Ok(())
}

fn read_lines(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let f = fs::File::open(path).context(format!("opening {}", path.display()))?;
    io::BufReader::new(f)
        .lines()
        .map(|l| l.map(|l| tokenize(&l)).context(format!("reading {}", path.display())))
        .collect()
}

fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let hyps = read_lines(&a.hyp)?;
    let mut refs: Vec<Vec<Vec<String>>> = vec![Vec::new(); hyps.len()];
    for p in &a.refs {
        let r = read_lines(p)?;
        if r.len() != hyps.len() {
            return Err(usage(format!(
                "--ref {} has {} lines but --hyp has {}",
                p.display(),
                r.len(),
                hyps.len()
            )));
        }
        for (slot, line) in refs.iter_mut().zip(r) {
            slot.push(line);
        }
    }
    let report = corpus_bleu_multi(&hyps, &refs).context("computing BLEU")?;
    println!("{report}");
    Ok(())
}

fn export(a: &ExportArgs) -> CliResult<()> {
    if a.eps <= 0.0 {
        return Err(usage("--eps must be positive"));
    }
    let model = load_model(&a.checkpoint)?;
    let sv = load_vocab(&a.src_vocab)?;
    let tv = load_vocab(&a.tgt_vocab)?;
    check_dims(&model, &sv, &tv, &a.checkpoint)?;
    let cfg = LrpConfig {
        eps: a.eps,
        nodes: a.nodes.clone(),
    };
    let out = export_relevance(&model, &sv, &tv, &a.src, a.tgt.as_deref(), a.beam, &cfg).context("explaining")?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let json = out.document.to_json().context("serializing")?;
    fs::write(&a.output, json).context(format!("writing {}", a.output.display()))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::BuildVocab(a) => build_vocab(&cfg, a),
        Command::BuildDict(a) => build_dict(a),
        Command::Train(a) => train(cfg, a),
        Command::Translate(a) => translate(&cfg, a),
        Command::Evaluate(a) => evaluate(a),
        Command::ExportRelevance(a) => export(a),
        Command::ServeInspector(a) => serve::serve(a).map_err(|e| CliError::Runtime {
            context: "serve-inspector".into(),
            source: NmtError::InvalidArgument(e.to_string()),
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
