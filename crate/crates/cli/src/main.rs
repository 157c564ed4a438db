use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidcap_core::decoding::{beam_decode_with, BeamOptions};
use vidcap_core::metrics::tokenize;
use vidcap_core::{
    build_vocab, evaluated_score, generate_synthetic_dataset, greedy_decode, load_checkpoint, load_dataset, normalize_scores,
    sample_decode, save_checkpoint, save_dataset, summarize, sweep_lambda, Checkpoint, DatasetRecord, DecodeResult, EpochReport,
    MetricSummary, Model, ModelConfig, SyntheticSpec, Trainer, TrainingConfig, Vocabulary,
};

#[derive(Parser)]
#[command(name = "vidcap", version, about = "Attention-based video captioning: data, training, decoding and scoring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSONL.
    GenData(GenDataArgs),
    /// Run training step 1 (cross-entropy) or step 2 (gated mixed loss).
    Train(TrainArgs),
    /// Decode captions for every record of a dataset.
    Caption(CaptionArgs),
    /// Corpus metrics of decoded captions against a dataset's references.
    Eval(EvalArgs),
    /// Score candidate captions against references, one JSON line per candidate.
    Score(ScoreArgs),
    /// Fine-tune once per mixing weight and report normalised validation scores.
    SweepLambda(SweepArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    videos: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 5)]
    refs: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Move this many trailing videos to `--val-out`.
    #[arg(long, default_value_t = 0, requires = "val_out")]
    val_count: usize,
    #[arg(long)]
    val_out: Option<PathBuf>,
    /// Move this many trailing videos (after the validation split) to `--test-out`.
    #[arg(long, default_value_t = 0, requires = "test_out")]
    test_count: usize,
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    step: u8,
    /// Flat key=value file; unset keys keep their defaults (or, in step 2,
    /// the values stored in the initial checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Validation set for early stopping.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Starting checkpoint; required for step 2.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also append epoch reports to this file.
    #[arg(long)]
    log_file: Option<PathBuf>,
}

#[derive(clap::Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Beam width; greedy decoding when omitted.
    #[arg(long, conflicts_with = "sample")]
    beam: Option<usize>,
    /// Rank finished beam hypotheses by mean per-word log-probability.
    #[arg(long, requires = "beam")]
    length_normalize: bool,
    /// Draw words from the model distribution with this seed.
    #[arg(long)]
    sample: Option<u64>,
    /// Defaults to the checkpoint's training `max_len`.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(clap::Args)]
struct CaptionArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    /// Omit per-step attention and gate traces.
    #[arg(long)]
    no_traces: bool,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(clap::Args)]
struct ScoreArgs {
    /// JSONL with `video_id` and either `tokens` (word list) or `caption` (text).
    #[arg(long)]
    candidates: PathBuf,
    /// JSONL with `video_id` and `references`; dataset files qualify.
    #[arg(long)]
    references: PathBuf,
    /// Finish with a line holding the corpus averages.
    #[arg(long)]
    summary: bool,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Step-1 checkpoint to fine-tune; trained from scratch with the config when omitted.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
    lambdas: Vec<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Caption(a) => caption(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
        Command::SweepLambda(a) => sweep(a),
    }
}

fn write_jsonl<T: Serialize>(out: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let records = load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))?;
    ensure!(!records.is_empty(), "dataset {} is empty", path.display());
    Ok(records)
}

fn read_config(path: Option<&Path>, base: TrainingConfig) -> Result<TrainingConfig> {
    let Some(path) = path else { return Ok(base) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    TrainingConfig::parse_over(base, &text).with_context(|| format!("parsing config {}", path.display()))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    ensure!(
        a.val_count + a.test_count < a.videos,
        "validation and test splits ({} + {}) leave no training videos out of {}",
        a.val_count,
        a.test_count,
        a.videos
    );
    let spec = SyntheticSpec {
        noise: a.noise,
        ..SyntheticSpec::new(a.videos, a.classes, a.frames, a.feature_dim, a.refs, a.seed)
    };
    let mut records = generate_synthetic_dataset(&spec)?;
    let test = records.split_off(records.len() - a.test_count);
    let val = records.split_off(records.len() - a.val_count);
    save_dataset(&records, &a.out)?;
    if let Some(p) = &a.val_out {
        save_dataset(&val, p)?;
    }
    if let Some(p) = &a.test_out {
        save_dataset(&test, p)?;
    }
    log::info!("wrote {} / {} / {} videos", records.len(), val.len(), test.len());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let train_set = read_dataset(&a.data)?;
    let val_set = match &a.val {
        Some(p) => read_dataset(p)?,
        None => Vec::new(),
    };
    let (model, config, vocab) = match (a.step, &a.init) {
        (1, None) => {
            let config = read_config(a.config.as_deref(), TrainingConfig::default())?;
            let mut all = train_set.clone();
            all.extend(val_set.iter().cloned());
            let vocab = build_vocab(&all)?;
            let model = new_model(&config, train_set[0].features.feature_dim(), vocab.len())?;
            (model, config, vocab)
        }
        (_, Some(init)) => {
            let ckpt = read_checkpoint(init)?;
            let base = ckpt.training.clone().unwrap_or_default();
            let config = read_config(a.config.as_deref(), base)?;
            let vocab = ckpt.vocab.context("initial checkpoint has no vocabulary")?;
            (ckpt.model, config, vocab)
        }
        (_, None) => bail!("step 2 needs --init with a step-1 checkpoint"),
    };
    let train_enc = vocab.encode_records(&train_set).context("encoding training set")?;
    let val_enc = vocab.encode_records(&val_set).context("encoding validation set")?;

    let mut log_file = match &a.log_file {
        Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut io_err: Option<anyhow::Error> = None;
    let mut emit = |r: &EpochReport| {
        let res = write_jsonl(&mut out, r).and_then(|_| match log_file.as_mut() {
            Some(f) => write_jsonl(f, r),
            None => Ok(()),
        });
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    };
    let mut trainer = Trainer::new(model, config.clone())?;
    if a.step == 1 {
        trainer.train_step1(&train_enc, &val_enc, &mut emit)?;
    } else {
        trainer.train_step2(&train_enc, &val_enc, &mut emit)?;
    }
    if let Some(e) = io_err {
        return Err(e);
    }
    let ckpt = Checkpoint {
        updates: trainer.updates(),
        model: trainer.model,
        training: Some(config),
        vocab: Some(vocab),
        stage: a.step,
    };
    save_checkpoint(&ckpt, &a.out).with_context(|| format!("writing checkpoint {}", a.out.display()))?;
    Ok(())
}

fn new_model(config: &TrainingConfig, feature_dim: usize, vocab_size: usize) -> Result<Model> {
    let mut mc = ModelConfig::new(feature_dim, config.hidden, vocab_size);
    mc.encoder_hidden = config.encoder_hidden;
    mc.link = config.link;
    mc.gate = config.gate;
    Ok(Model::new(mc, config.seed)?)
}

struct Decoder {
    model: Model,
    vocab: Vocabulary,
    max_len: usize,
    beam: Option<BeamOptions>,
    sampler: Option<ChaCha8Rng>,
}

impl Decoder {
    fn open(a: &DecodeArgs) -> Result<Self> {
        let ckpt = read_checkpoint(&a.model)?;
        let vocab = ckpt.vocab.context("checkpoint has no vocabulary")?;
        let max_len = a
            .max_len
            .unwrap_or_else(|| ckpt.training.map_or(TrainingConfig::default().max_len, |t| t.max_len));
        let beam = a.beam.map(|w| BeamOptions {
            length_normalize: a.length_normalize,
            ..BeamOptions::new(w, max_len)
        });
        Ok(Self {
            model: ckpt.model,
            vocab,
            max_len,
            beam,
            sampler: a.sample.map(ChaCha8Rng::seed_from_u64),
        })
    }

    fn decode(&mut self, record: &DatasetRecord) -> Result<DecodeResult> {
        let f = &record.features;
        let out = match (&self.beam, &mut self.sampler) {
            (Some(opts), _) => beam_decode_with(&self.model, f, *opts)?,
            (None, Some(rng)) => sample_decode(&self.model, f, self.max_len, rng)?,
            (None, None) => greedy_decode(&self.model, f, self.max_len)?,
        };
        Ok(out)
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    token: &'a str,
    gate: f64,
    alpha: &'a [f64],
    beta: &'a [f64],
}

#[derive(Serialize)]
struct CaptionLine<'a> {
    video_id: &'a str,
    tokens: &'a [String],
    caption: String,
    log_prob: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    traces: Option<Vec<TraceLine<'a>>>,
}

fn caption(a: CaptionArgs) -> Result<()> {
    let records = read_dataset(&a.decode.data)?;
    let mut dec = Decoder::open(&a.decode)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let eos = dec.model.config.eos;
    for r in &records {
        let res = dec.decode(r)?;
        let words = dec.vocab.decode(&res.tokens);
        let step_words = dec.vocab.decode(&res.steps(eos));
        let traces = (!a.no_traces).then(|| {
            res.traces
                .iter()
                .zip(&step_words)
                .map(|(t, w)| TraceLine {
                    token: w,
                    gate: t.gate,
                    alpha: &t.alpha,
                    beta: &t.beta,
                })
                .collect()
        });
        write_jsonl(
            &mut out,
            &CaptionLine {
                video_id: &r.video_id,
                tokens: &words,
                caption: words.join(" "),
                log_prob: res.log_prob,
                traces,
            },
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryLine {
    count: usize,
    bleu1: f64,
    bleu2: f64,
    bleu3: f64,
    bleu4: f64,
    rouge_l: f64,
    score: f64,
}

impl SummaryLine {
    fn new(count: usize, s: &MetricSummary) -> Self {
        Self {
            count,
            bleu1: s.bleu[0],
            bleu2: s.bleu[1],
            bleu3: s.bleu[2],
            bleu4: s.bleu[3],
            rouge_l: s.rouge_l,
            score: s.score,
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let records = read_dataset(&a.decode.data)?;
    let mut dec = Decoder::open(&a.decode)?;
    let mut pairs = Vec::with_capacity(records.len());
    for r in &records {
        let res = dec.decode(r)?;
        pairs.push((dec.vocab.decode(&res.tokens), r.references.clone()));
    }
    let summary = summarize(&pairs)?;
    write_jsonl(&mut io::stdout().lock(), &SummaryLine::new(pairs.len(), &summary))
}

#[derive(Deserialize)]
struct CandidateLine {
    video_id: String,
    #[serde(default)]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    caption: Option<String>,
}

#[derive(Deserialize)]
struct ReferenceLine {
    video_id: String,
    references: Vec<Vec<String>>,
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    video_id: &'a str,
    bleu4: f64,
    rouge: f64,
    score: f64,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn score(a: ScoreArgs) -> Result<()> {
    let candidates: Vec<CandidateLine> = read_jsonl(&a.candidates)?;
    let references: HashMap<String, Vec<Vec<String>>> = read_jsonl::<ReferenceLine>(&a.references)?
        .into_iter()
        .map(|r| (r.video_id, r.references))
        .collect();
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut pairs = Vec::with_capacity(candidates.len());
    for c in &candidates {
        let refs = references
            .get(&c.video_id)
            .with_context(|| format!("no references for video `{}`", c.video_id))?;
        let words = match (&c.tokens, &c.caption) {
            (Some(t), _) => t.clone(),
            (None, Some(text)) => tokenize(text),
            (None, None) => bail!("candidate `{}` has neither `tokens` nor `caption`", c.video_id),
        };
        let r = evaluated_score(&words, refs)?;
        write_jsonl(
            &mut out,
            &ScoreLine {
                video_id: &c.video_id,
                bleu4: r.bleu4,
                rouge: r.rouge,
                score: r.score,
            },
        )?;
        pairs.push((words, refs.clone()));
    }
    if a.summary {
        write_jsonl(&mut out, &SummaryLine::new(pairs.len(), &summarize(&pairs)?))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SweepLine {
    lambda: f64,
    epochs: usize,
    updates: u64,
    bleu4: f64,
    rouge_l: f64,
    score: f64,
    /// `(q - min q) / min q` across the sweep; absent when the minimum is zero.
    normalized_bleu4: Option<f64>,
    normalized_rouge_l: Option<f64>,
    normalized_score: Option<f64>,
}

fn sweep(a: SweepArgs) -> Result<()> {
    let train_set = read_dataset(&a.data)?;
    let val_set = read_dataset(&a.val)?;
    ensure!(!a.lambdas.is_empty(), "no lambda values given");
    let (model, config, vocab) = match &a.init {
        Some(p) => {
            let ckpt = read_checkpoint(p)?;
            let config = read_config(a.config.as_deref(), ckpt.training.clone().unwrap_or_default())?;
            (ckpt.model, config, ckpt.vocab.context("checkpoint has no vocabulary")?)
        }
        None => {
            let config = read_config(a.config.as_deref(), TrainingConfig::default())?;
            let mut all = train_set.clone();
            all.extend(val_set.iter().cloned());
            let vocab = build_vocab(&all)?;
            let model = new_model(&config, train_set[0].features.feature_dim(), vocab.len())?;
            let mut trainer = Trainer::new(model, config.clone())?;
            let (t, v) = (vocab.encode_records(&train_set)?, vocab.encode_records(&val_set)?);
            trainer.train_step1(&t, &v, |_| {})?;
            (trainer.model, config, vocab)
        }
    };
    let train_enc = vocab.encode_records(&train_set).context("encoding training set")?;
    let val_enc = vocab.encode_records(&val_set).context("encoding validation set")?;
    let results = sweep_lambda(&model, &config, &train_enc, &val_enc, &a.lambdas)?;

    let normalized = |f: fn(&MetricSummary) -> f64| -> Vec<Option<f64>> {
        let values: Vec<f64> = results.iter().map(|r| f(&r.scores)).collect();
        match normalize_scores(&values) {
            Ok(n) => n.into_iter().map(Some).collect(),
            Err(e) => {
                log::warn!("not normalising: {e}");
                vec![None; values.len()]
            }
        }
    };
    let nb = normalized(|s| s.bleu4());
    let nr = normalized(|s| s.rouge_l);
    let ns = normalized(|s| s.score);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (i, r) in results.iter().enumerate() {
        write_jsonl(
            &mut out,
            &SweepLine {
                lambda: r.lambda,
                epochs: r.epochs,
                updates: r.updates,
                bleu4: r.scores.bleu4(),
                rouge_l: r.scores.rouge_l,
                score: r.scores.score,
                normalized_bleu4: nb[i],
                normalized_rouge_l: nr[i],
                normalized_score: ns[i],
            },
        )?;
    }
    Ok(())
}
