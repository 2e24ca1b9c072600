//! Command-line entry point.
//!
//! Every flag may also come from `--config FILE`, a JSON object keyed by
//! subcommand name (`{"train": {"lr": 0.003}}`); flags given on the
//! command line win. Each command writes `<command>.manifest.json` next to
//! its outputs.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{join, read_ids, Sample};
use crate::datagen::{synthesize, SynthConfig, SynthPaths};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, TOLERANCE};
use crate::losses::Objective;
use crate::metrics::{aggregate, corpus_bleu, score, write_csv, GroupKey, Tokenization};
use crate::numerics::Matrix;
use crate::prompting::{generate_all, render, CaptionJob, CaptionLine, LLMConfig, PromptInput, PromptVariant};
use crate::refiner::{forward_batch, load_checkpoint, save_checkpoint, Checkpoint};
use crate::retrieval::{retrieval_metrics, top_k_bow, BagOfWords, RetrievalReport, DEFAULT_TOP_K};
use crate::trainer::{evaluate, evaluate_naive, fit, naive_logits_for, refined_logits, DecayPolicy, TrainConfig};
use crate::vocabulary::{
    build_vocabulary, encode_record, read_corpus, read_embeddings, CaptionRecord, Split, VocabEmbeddings, Vocabulary,
    EMBED_DIM,
};

pub const TOOL_VERSION: &str = concat!("sense ", env!("CARGO_PKG_VERSION"));

#[derive(Parser, Debug)]
#[command(name = "sense", version, arg_required_else_help = true)]
#[command(about = "Keyword retrieval from vision-aligned embeddings and prompt-based captioning")]
struct Cli {
    /// JSON file of flag defaults keyed by subcommand name.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the vocabulary from training-split captions.
    BuildVocab(BuildVocabArgs),
    /// Encode every caption as a multi-hot target over the vocabulary.
    MakeTargets(MakeTargetsArgs),
    /// Write a synthetic dataset in the ingestion formats.
    Synth(SynthArgs),
    /// Train the similarity refiner.
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients for every loss.
    Gradcheck(GradcheckArgs),
    /// Extract top-k bags of words with the refiner or the naive baseline.
    Retrieve(RetrieveArgs),
    /// Render caption prompts from retrieved bags of words.
    Prompt(PromptArgs),
    /// Send prompts to a chat-completion endpoint.
    Generate(GenerateArgs),
    /// Score retrieval and generated captions.
    Evaluate(EvaluateArgs),
    /// Collect evaluation outputs of several runs into one table.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildVocab(_) => "build-vocab",
            Command::MakeTargets(_) => "make-targets",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Gradcheck(_) => "gradcheck",
            Command::Retrieve(_) => "retrieve",
            Command::Prompt(_) => "prompt",
            Command::Generate(_) => "generate",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
        }
    }
}

/// Dataset locations; `--data-dir` supplies the conventional file names.
#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
struct DataArgs {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    vocab_emb: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    sample_emb: Option<PathBuf>,
    #[arg(long)]
    sample_ids: Option<PathBuf>,
    /// Embedding width (512 for real Stage-1 outputs).
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
struct BuildVocabArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
struct MakeTargetsArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
struct SynthArgs {
    /// Vocabulary size.
    #[arg(long)]
    v: Option<usize>,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    active: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    noise_rank: Option<usize>,
    #[arg(long)]
    distractor_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    subjects: Option<u32>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// bce, contrastive or focal.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eta_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// all or weights-only.
    #[arg(long)]
    decay: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
struct GradcheckArgs {
    /// First seed of the sweep.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
struct RetrieveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// Refiner checkpoint; omit for the naive baseline.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
struct PromptArgs {
    /// retrieval.jsonl written by `retrieve`.
    #[arg(long)]
    retrieval: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// with_obj, without_obj or both.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
struct GenerateArgs {
    /// prompts.jsonl written by `prompt`.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    /// Checkpoint whose latents are also kept out of requests.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    credential_env: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    temperature_override: Option<bool>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    timeout_secs: Option<f64>,
    /// Accepted only to be refused: requests are always privacy-checked.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    no_privacy_check: Option<bool>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// captions.jsonl written by `generate`.
    #[arg(long)]
    captions: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    /// normalized or raw.
    #[arg(long)]
    tokenization: Option<String>,
    /// Also report corpus-level BLEU.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    corpus_bleu: Option<bool>,
    /// Label for the variant column; defaults to the checkpoint's loss.
    #[arg(long)]
    variant_tag: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case")]
struct ReportArgs {
    /// Output directories of `evaluate` runs.
    #[arg(long = "run", required = false)]
    runs: Option<Vec<PathBuf>>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub summary: Value,
    pub wall_clock_seconds: f64,
}

struct Outcome {
    dir: PathBuf,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    summary: Value,
    code: i32,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let started = Instant::now();
    let file = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| Error::Usage(format!("config {}: {e}", p.display())))?
        }
        None => json!({}),
    };
    let name = cli.command.name();
    let section = file.get(name).cloned().unwrap_or(json!({}));
    let (config, outcome) = match cli.command {
        Command::BuildVocab(a) => with(a, &section, cmd_build_vocab)?,
        Command::MakeTargets(a) => with(a, &section, cmd_make_targets)?,
        Command::Synth(a) => with(a, &section, cmd_synth)?,
        Command::Train(a) => with(a, &section, cmd_train)?,
        Command::Gradcheck(a) => with(a, &section, cmd_gradcheck)?,
        Command::Retrieve(a) => with(a, &section, cmd_retrieve)?,
        Command::Prompt(a) => with(a, &section, cmd_prompt)?,
        Command::Generate(a) => with(a, &section, cmd_generate)?,
        Command::Evaluate(a) => with(a, &section, cmd_evaluate)?,
        Command::Report(a) => with(a, &section, cmd_report)?,
    };
    let Some(outcome) = outcome else { return Ok(0) };
    let manifest = RunManifest {
        command: name.into(),
        tool_version: TOOL_VERSION.into(),
        config,
        seeds: outcome.seeds,
        inputs: outcome.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
        summary: outcome.summary,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&outcome.dir.join(format!("{name}.manifest.json")), &manifest)?;
    Ok(outcome.code)
}

/// Overlays command-line values on the config-file section, then runs.
fn with<A: Serialize + DeserializeOwned + Default>(
    args: A,
    section: &Value,
    f: impl FnOnce(&A) -> Result<Option<Outcome>>,
) -> Result<(Value, Option<Outcome>)> {
    let known = serde_json::to_value(A::default())?;
    let mut merged = match section {
        Value::Object(m) => m.clone(),
        Value::Null => Default::default(),
        _ => return Err(Error::Usage("config section must be a JSON object".into())),
    };
    for k in merged.keys() {
        if known.get(k).is_none() {
            return Err(Error::Usage(format!("unknown config key {k:?}")));
        }
    }
    if let Value::Object(flags) = serde_json::to_value(&args)? {
        for (k, v) in flags {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    let merged = Value::Object(merged);
    let resolved: A = serde_json::from_value(merged.clone())
        .map_err(|e| Error::Usage(format!("config: {e}")))?;
    let outcome = f(&resolved)?;
    Ok((merged, outcome))
}

fn need<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Usage(format!("--{flag} is required")))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn write_csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(rows, BufWriter::new(f))
}

struct Loaded {
    paths: SynthPaths,
    vocab: Vocabulary,
    emb: VocabEmbeddings,
    samples: Vec<Sample>,
    records: Vec<CaptionRecord>,
    stats: Value,
}

impl DataArgs {
    fn path(&self, explicit: &Option<PathBuf>, pick: fn(&SynthPaths) -> &PathBuf, flag: &str) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p.clone());
        }
        match &self.data_dir {
            Some(d) => Ok(pick(&SynthPaths::in_dir(d)).clone()),
            None => Err(Error::Usage(format!("--{flag} or --data-dir is required"))),
        }
    }

    fn corpus_path(&self) -> Result<PathBuf> {
        self.path(&self.corpus, |p| &p.corpus, "corpus")
    }

    fn paths(&self) -> Result<SynthPaths> {
        Ok(SynthPaths {
            vocabulary: self.path(&self.vocab, |p| &p.vocabulary, "vocab")?,
            vocab_embeddings: self.path(&self.vocab_emb, |p| &p.vocab_embeddings, "vocab-emb")?,
            corpus: self.corpus_path()?,
            sample_embeddings: self.path(&self.sample_emb, |p| &p.sample_embeddings, "sample-emb")?,
            sample_ids: self.path(&self.sample_ids, |p| &p.sample_ids, "sample-ids")?,
        })
    }

    fn load(&self) -> Result<Loaded> {
        let paths = self.paths()?;
        let dim = self.dim.unwrap_or(EMBED_DIM);
        let vocab = Vocabulary::load(&paths.vocabulary)?;
        let matrix = read_embeddings(&paths.vocab_embeddings, Some(dim))?;
        let emb = VocabEmbeddings::from_matrix(matrix, vocab.size(), "vocab-emb")?;
        let records = read_corpus(&paths.corpus)?;
        let x = read_embeddings(&paths.sample_embeddings, Some(dim))?;
        let ids = read_ids(&paths.sample_ids)?;
        let (samples, stats) = join(&records, &x, &ids, &vocab)?;
        Ok(Loaded {
            paths,
            vocab,
            emb,
            samples,
            records,
            stats: serde_json::to_value(stats)?,
        })
    }

    fn inputs(paths: &SynthPaths) -> Vec<PathBuf> {
        vec![
            paths.vocabulary.clone(),
            paths.vocab_embeddings.clone(),
            paths.corpus.clone(),
            paths.sample_embeddings.clone(),
            paths.sample_ids.clone(),
        ]
    }
}

fn parse_split(s: Option<&String>) -> Result<Option<Split>> {
    match s.map(String::as_str) {
        None | Some("test") => Ok(Some(Split::Test)),
        Some("all") => Ok(None),
        Some(other) => other.parse().map(Some),
    }
}

fn select(samples: &[Sample], split: Option<Split>) -> Vec<&Sample> {
    samples.iter().filter(|s| split.is_none_or(|sp| s.split == sp)).collect()
}

fn top_k(v: Option<usize>) -> Result<usize> {
    match v.unwrap_or(DEFAULT_TOP_K) {
        0 => Err(Error::Usage("--top-k must be at least 1".into())),
        k => Ok(k),
    }
}

fn cmd_build_vocab(a: &BuildVocabArgs) -> Result<Option<Outcome>> {
    let corpus = need(&a.corpus, "corpus")?;
    let out = need(&a.out, "out")?;
    let records = read_corpus(corpus)?;
    let vocab = build_vocabulary(&records)?;
    let dir = parent_dir(out);
    ensure_dir(&dir)?;
    vocab.save(out)?;
    println!("vocabulary: {} tokens from {} records", vocab.size(), records.len());
    Ok(Some(Outcome {
        dir,
        seeds: BTreeMap::new(),
        inputs: vec![corpus.clone()],
        outputs: vec![out.clone()],
        summary: json!({"records": records.len(), "vocab_size": vocab.size()}),
        code: 0,
    }))
}

#[derive(Serialize)]
struct TargetLine<'a> {
    id: &'a str,
    subject: u32,
    split: Split,
    active: &'a [usize],
    tokens: Vec<&'a str>,
}

fn cmd_make_targets(a: &MakeTargetsArgs) -> Result<Option<Outcome>> {
    let corpus = need(&a.corpus, "corpus")?;
    let vocab_path = need(&a.vocab, "vocab")?;
    let out = need(&a.out, "out")?;
    let records = read_corpus(corpus)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let encoded: Vec<_> = records.iter().map(|r| encode_record(r, &vocab)).collect();
    let dir = parent_dir(out);
    ensure_dir(&dir)?;
    write_jsonl(
        out,
        records.iter().zip(&encoded).map(|(r, e)| TargetLine {
            id: &r.id,
            subject: r.subject,
            split: r.split,
            active: e.target.active(),
            tokens: e.target.active().iter().map(|&j| vocab.token(j)).collect(),
        }),
    )?;
    let empty = encoded.iter().filter(|e| e.target.active_count() == 0).count();
    let oov: usize = encoded.iter().map(|e| e.out_of_vocabulary).sum();
    let mean = encoded.iter().map(|e| e.target.active_count()).sum::<usize>() as f64 / records.len().max(1) as f64;
    println!("targets: {} records, {empty} empty, mean {mean:.3} active", records.len());
    Ok(Some(Outcome {
        dir,
        seeds: BTreeMap::new(),
        inputs: vec![corpus.clone(), vocab_path.clone()],
        outputs: vec![out.clone()],
        summary: json!({
            "records": records.len(),
            "empty_targets": empty,
            "out_of_vocabulary_lemmas": oov,
            "mean_active": mean,
        }),
        code: 0,
    }))
}

fn cmd_synth(a: &SynthArgs) -> Result<Option<Outcome>> {
    let out = need(&a.out_dir, "out-dir")?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        vocab_size: a.v.unwrap_or(d.vocab_size),
        dim: a.dim.unwrap_or(d.dim),
        n_samples: a.n.unwrap_or(d.n_samples),
        active_per_sample: a.active.unwrap_or(d.active_per_sample),
        noise_sigma: a.noise_sigma.unwrap_or(d.noise_sigma),
        noise_rank: a.noise_rank.unwrap_or(d.noise_rank.min(a.dim.unwrap_or(d.dim))),
        distractor_rate: a.distractor_rate.unwrap_or(d.distractor_rate),
        seed: a.seed.unwrap_or(d.seed),
        subjects: a.subjects.unwrap_or(d.subjects),
    };
    let ds = synthesize(&cfg)?;
    let paths = ds.write(out)?;
    println!("synth: {} samples, V={}, dim={}", ds.samples.len(), cfg.vocab_size, cfg.dim);
    Ok(Some(Outcome {
        dir: out.clone(),
        seeds: BTreeMap::from([("synth".into(), cfg.seed)]),
        inputs: vec![],
        outputs: DataArgs::inputs(&paths),
        summary: serde_json::to_value(&cfg)?,
        code: 0,
    }))
}

fn cmd_train(a: &TrainArgs) -> Result<Option<Outcome>> {
    let out = need(&a.out_dir, "out-dir")?;
    let loss: Objective = a.loss.as_deref().unwrap_or("focal").parse()?;
    let mut cfg = TrainConfig::new(loss, a.seed.unwrap_or(0));
    if let Some(v) = a.lr {
        cfg.lr_max = v;
    }
    if let Some(v) = a.eta_min {
        cfg.eta_min = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = &a.decay {
        cfg.decay = match v.as_str() {
            "all" => DecayPolicy::All,
            "weights-only" => DecayPolicy::WeightsOnly,
            _ => return Err(Error::Usage(format!("unknown decay policy {v:?}"))),
        };
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    cfg.top_k = top_k(a.top_k)?;
    cfg.validate()?;
    let data = a.data.load()?;
    ensure_dir(out)?;
    let (ckpt, mut report) = fit(&data.samples, &data.emb, &cfg)?;
    let ckpt_path = out.join("refiner.ckpt");
    save_checkpoint(&ckpt, &ckpt_path)?;
    report.checkpoint = Some(ckpt_path.display().to_string());
    let report_path = out.join("train_report.json");
    write_json(&report_path, &report)?;
    let last = report.epochs.last();
    println!(
        "train: {} epochs, final loss {:.6}, val recall@{} {}",
        report.epochs.len(),
        last.map_or(f64::NAN, |e| e.train_loss),
        cfg.top_k,
        last.and_then(|e| e.val_recall_at_k).map_or("n/a".into(), |r| format!("{r:.4}"))
    );
    Ok(Some(Outcome {
        dir: out.clone(),
        seeds: BTreeMap::from([("train".into(), cfg.seed)]),
        inputs: DataArgs::inputs(&data.paths),
        outputs: vec![ckpt_path, report_path],
        summary: json!({
            "join": data.stats,
            "final_train_loss": last.map(|e| e.train_loss),
            "final_val_recall": last.and_then(|e| e.val_recall_at_k),
            "final_sigmoid_scale": report.final_sigmoid_scale,
        }),
        code: 0,
    }))
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Option<Outcome>> {
    let first = a.seed.unwrap_or(0);
    let n = a.seeds.unwrap_or(20).max(1);
    let mut reports = Vec::new();
    for obj in [Objective::bce(), Objective::contrastive(), Objective::focal()] {
        let r = gradcheck(&obj, first..first + n)?;
        println!(
            "{:<12} max rel. error {:.3e}  {}",
            r.loss,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        reports.push(r);
    }
    let passed = reports.iter().all(|r| r.passed);
    if !passed {
        eprintln!("error: gradient check exceeded tolerance {TOLERANCE:e}");
    }
    let code = if passed { 0 } else { 2 };
    let Some(out) = &a.out_dir else { return Ok(if passed { None } else { Some(no_manifest(code)) }) };
    ensure_dir(out)?;
    let path = out.join("gradcheck.json");
    write_json(&path, &reports)?;
    Ok(Some(Outcome {
        dir: out.clone(),
        seeds: BTreeMap::from([("first".into(), first), ("count".into(), n)]),
        inputs: vec![],
        outputs: vec![path],
        summary: json!({"passed": passed, "tolerance": TOLERANCE}),
        code,
    }))
}

/// Exit without a manifest when a command wrote nothing.
fn no_manifest(code: i32) -> Outcome {
    Outcome {
        dir: PathBuf::new(),
        seeds: BTreeMap::new(),
        inputs: vec![],
        outputs: vec![],
        summary: Value::Null,
        code,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RetrievalLine {
    id: String,
    subject: u32,
    split: Split,
    method: String,
    bow: BagOfWords,
    clamped: bool,
    precision_at_k: Option<f64>,
    recall_at_k: Option<f64>,
}

fn cmd_retrieve(a: &RetrieveArgs) -> Result<Option<Outcome>> {
    let out = need(&a.out_dir, "out-dir")?;
    let k = top_k(a.top_k)?;
    let split = parse_split(a.split.as_ref())?;
    let data = a.data.load()?;
    let kernel = data.emb.kernel();
    let chosen = select(&data.samples, split);
    if chosen.is_empty() {
        return Err(Error::Empty("selected split".into()));
    }
    let mut inputs = DataArgs::inputs(&data.paths);
    let (method, logits, seeds) = match &a.checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            inputs.push(p.clone());
            let l = refined_logits(&ckpt.params, &chosen, &kernel)?;
            (format!("refined:{}", loss_name(&ckpt)), l, BTreeMap::from([("init".into(), ckpt.seed)]))
        }
        None => ("naive".to_string(), naive_logits_for(&chosen, &kernel)?, BTreeMap::new()),
    };
    let mut lines = Vec::with_capacity(chosen.len());
    for (i, s) in chosen.iter().enumerate() {
        let tk = top_k_bow(logits.row(i), &data.vocab, k)?;
        let pr = retrieval_metrics(&tk.indices, &s.target, k);
        lines.push(RetrievalLine {
            id: s.id.clone(),
            subject: s.subject,
            split: s.split,
            method: method.clone(),
            bow: tk.bow,
            clamped: tk.clamped,
            precision_at_k: pr.map(|p| p.0),
            recall_at_k: pr.map(|p| p.1),
        });
    }
    ensure_dir(out)?;
    let path = out.join("retrieval.jsonl");
    write_jsonl(&path, &lines)?;
    let report = retrieval_summary(&logits, &chosen, k);
    println!(
        "retrieve ({method}): {} samples, recall@{k} {:.4}",
        chosen.len(),
        report.overall.recall_at_k
    );
    Ok(Some(Outcome {
        dir: out.clone(),
        seeds,
        inputs,
        outputs: vec![path],
        summary: serde_json::to_value(&report)?,
        code: 0,
    }))
}

fn retrieval_summary(logits: &Matrix<f32>, samples: &[&Sample], k: usize) -> RetrievalReport {
    crate::retrieval::summarize(
        samples.iter().enumerate().map(|(i, s)| (logits.row(i), &s.target, s.subject)),
        k,
    )
}

fn loss_name(ckpt: &Checkpoint) -> String {
    serde_json::to_value(ckpt.loss)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn cmd_prompt(a: &PromptArgs) -> Result<Option<Outcome>> {
    let retrieval = need(&a.retrieval, "retrieval")?;
    let out = need(&a.out_dir, "out-dir")?;
    let variants = match a.variant.as_deref().unwrap_or("both") {
        "both" => vec![PromptVariant::WithObj, PromptVariant::WithoutObj],
        v => vec![v.parse()?],
    };
    let corpus_path = a.data.corpus_path()?;
    let records = read_corpus(&corpus_path)?;
    let by_id: HashMap<&str, &CaptionRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let lines: Vec<RetrievalLine> = read_jsonl(retrieval)?;
    let mut prompts = Vec::new();
    let mut empty = 0;
    for l in &lines {
        let rec = by_id
            .get(l.id.as_str())
            .ok_or_else(|| Error::Data(format!("retrieved sample {:?} not in corpus", l.id)))?;
        let input = PromptInput {
            object_label: rec.object_label.clone(),
            object_confidence: rec.object_confidence.unwrap_or(1.0),
            bow: l.bow.clone(),
        };
        for &v in &variants {
            let p = render(v, &input)?;
            empty += p.empty_bow as usize;
            prompts.push(CaptionLine {
                id: l.id.clone(),
                prompt_variant: v,
                prompt: p.text,
                caption: None,
                word_count: None,
                model: None,
            });
        }
    }
    if empty > 0 {
        eprintln!("warning: {empty} prompts have an empty bag of words");
    }
    ensure_dir(out)?;
    let path = out.join("prompts.jsonl");
    write_jsonl(&path, &prompts)?;
    println!("prompt: {} prompts", prompts.len());
    Ok(Some(Outcome {
        dir: out.clone(),
        seeds: BTreeMap::new(),
        inputs: vec![retrieval.clone(), corpus_path],
        outputs: vec![path],
        summary: json!({"prompts": prompts.len(), "empty_bow": empty}),
        code: 0,
    }))
}

fn cmd_generate(a: &GenerateArgs) -> Result<Option<Outcome>> {
    if a.no_privacy_check == Some(true) {
        return Err(Error::Usage(
            "generate refuses to run with the privacy check disabled".into(),
        ));
    }
    let prompts_path = need(&a.prompts, "prompts")?;
    let out = need(&a.out_dir, "out-dir")?;
    let d = LLMConfig::default();
    let cfg = LLMConfig {
        endpoint: a.endpoint.clone().unwrap_or(d.endpoint),
        model: a.model.clone().unwrap_or(d.model),
        temperature: a.temperature.unwrap_or(d.temperature),
        temperature_override: a.temperature_override.unwrap_or(false),
        max_retries: a.max_retries.unwrap_or(d.max_retries),
        timeout_secs: a.timeout_secs.unwrap_or(d.timeout_secs),
        credential_env: a.credential_env.clone().unwrap_or(d.credential_env),
        concurrency: a.concurrency.unwrap_or(d.concurrency),
        ..d
    };
    cfg.validate()?;
    let prompts: Vec<CaptionLine> = read_jsonl(prompts_path)?;
    let data = a.data.load()?;
    let mut inputs = vec![prompts_path.clone()];
    inputs.extend(DataArgs::inputs(&data.paths));
    let by_id: HashMap<&str, &Sample> = data.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut needed: Vec<&Sample> = Vec::new();
    let mut row_of: HashMap<&str, usize> = HashMap::new();
    for p in &prompts {
        let s = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::Data(format!("prompt for unknown sample {:?}", p.id)))?;
        row_of.entry(s.id.as_str()).or_insert_with(|| {
            needed.push(s);
            needed.len() - 1
        });
    }
    let latents: Option<Matrix<f32>> = match &a.checkpoint {
        Some(p) => {
            inputs.push(p.clone());
            let ckpt = load_checkpoint(p)?;
            Some(latents_for(&ckpt, &needed, &data.emb)?)
        }
        None => None,
    };
    let jobs: Vec<CaptionJob> = prompts
        .iter()
        .map(|p| {
            let r = row_of[p.id.as_str()];
            CaptionJob {
                prompt: &p.prompt,
                x: &needed[r].x,
                z: latents.as_ref().map(|m| m.row(r)),
            }
        })
        .collect();
    let results = generate_all(&jobs, &cfg);
    let mut lines = Vec::with_capacity(prompts.len());
    let (mut ok_len, mut attempts) = (0, 0);
    for (p, r) in prompts.iter().zip(results) {
        let c = r?;
        ok_len += c.length_ok as usize;
        attempts += c.attempts as usize;
        if !c.length_ok {
            eprintln!("warning: caption for {} has {} words", p.id, c.word_count);
        }
        lines.push(CaptionLine {
            id: p.id.clone(),
            prompt_variant: p.prompt_variant,
            prompt: p.prompt.clone(),
            caption: Some(c.text),
            word_count: Some(c.word_count),
            model: Some(c.model),
        });
    }
    ensure_dir(out)?;
    let path = out.join("captions.jsonl");
    write_jsonl(&path, &lines)?;
    println!("generate: {} captions, {ok_len} within 8-20 words", lines.len());
    Ok(Some(Outcome {
        dir: out.clone(),
        seeds: BTreeMap::new(),
        inputs,
        outputs: vec![path],
        summary: json!({
            "captions": lines.len(),
            "length_ok": ok_len,
            "attempts": attempts,
            "model": cfg.model,
            "temperature": cfg.temperature,
            "privacy_checked": true,
        }),
        code: 0,
    }))
}

fn latents_for(ckpt: &Checkpoint, samples: &[&Sample], emb: &VocabEmbeddings) -> Result<Matrix<f32>> {
    let kernel = emb.kernel();
    let dim = ckpt.params.shape().input;
    let latent = ckpt.params.shape().latent;
    let mut data = Vec::with_capacity(samples.len() * latent);
    for chunk in samples.chunks(256) {
        let mut x = Vec::with_capacity(chunk.len() * dim);
        for s in chunk {
            x.extend_from_slice(&s.x);
        }
        let f = forward_batch(&ckpt.params, &Matrix::new(chunk.len(), dim, x)?, &kernel)?;
        data.extend_from_slice(f.latent.as_slice());
    }
    Matrix::new(samples.len(), latent, data)
}

#[derive(Serialize, Deserialize)]
struct RetrievalEval {
    split: String,
    k: usize,
    loss: Option<String>,
    naive: RetrievalReport,
    refined: Option<RetrievalReport>,
    recall_lift: Option<f64>,
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<Option<Outcome>> {
    let out = need(&a.out_dir, "out-dir")?;
    let k = top_k(a.top_k)?;
    let split = parse_split(a.split.as_ref())?;
    let tok = match a.tokenization.as_deref().unwrap_or("normalized") {
        "normalized" => Tokenization::Normalized,
        "raw" => Tokenization::Raw,
        t => return Err(Error::Usage(format!("unknown tokenization {t:?}"))),
    };
    let has_data = a.data.data_dir.is_some() || a.data.sample_emb.is_some();
    if !has_data && a.captions.is_none() {
        return Err(Error::Usage("evaluate needs a dataset, --captions, or both".into()));
    }
    ensure_dir(out)?;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    let mut seeds = BTreeMap::new();
    let ckpt = a.checkpoint.as_ref().map(|p| load_checkpoint(p)).transpose()?;
    if let Some(p) = &a.checkpoint {
        inputs.push(p.clone());
    }
    let loss = ckpt.as_ref().map(loss_name);
    let records = if has_data {
        let data = a.data.load()?;
        inputs.extend(DataArgs::inputs(&data.paths));
        let kernel = data.emb.kernel();
        let chosen = select(&data.samples, split);
        let naive = evaluate_naive(&chosen, &kernel, k)?;
        let refined = match &ckpt {
            Some(c) => {
                seeds.insert("init".into(), c.seed);
                Some(evaluate(&c.params, &chosen, &kernel, k)?)
            }
            None => None,
        };
        let lift = refined
            .as_ref()
            .map(|r| r.overall.recall_at_k - naive.overall.recall_at_k);
        let ev = RetrievalEval {
            split: split.map_or("all".into(), |s| s.to_string()),
            k,
            loss: loss.clone(),
            naive,
            refined,
            recall_lift: lift,
        };
        println!(
            "evaluate: recall@{k} naive {:.4}{}",
            ev.naive.overall.recall_at_k,
            ev.refined
                .as_ref()
                .map(|r| format!(", refined {:.4}", r.overall.recall_at_k))
                .unwrap_or_default()
        );
        let path = out.join("retrieval_eval.json");
        write_json(&path, &ev)?;
        outputs.push(path);
        summary.insert("naive_recall".into(), json!(ev.naive.overall.recall_at_k));
        summary.insert(
            "refined_recall".into(),
            json!(ev.refined.as_ref().map(|r| r.overall.recall_at_k)),
        );
        data.records
    } else {
        read_corpus(&a.data.corpus_path()?)?
    };
    if let Some(cap_path) = &a.captions {
        inputs.push(cap_path.clone());
        let caps: Vec<CaptionLine> = read_jsonl(cap_path)?;
        let by_id: HashMap<&str, &CaptionRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        let tag = a.variant_tag.clone().or(loss.clone()).unwrap_or_else(|| "captions".into());
        let mut rows = Vec::with_capacity(caps.len());
        let mut pairs: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
        for c in &caps {
            let rec = by_id
                .get(c.id.as_str())
                .ok_or_else(|| Error::Data(format!("caption for unknown sample {:?}", c.id)))?;
            let text = c
                .caption
                .as_deref()
                .ok_or_else(|| Error::Data(format!("no caption for {:?}", c.id)))?;
            let variant = format!("{tag}/{}", c.prompt_variant.name());
            rows.push(score(&c.id, rec.subject, &variant, text, &rec.caption, tok));
            pairs.entry(variant).or_default().push((text.to_string(), rec.caption.clone()));
        }
        let results = out.join("results.csv");
        write_csv_file(&results, &rows)?;
        let by_subject = aggregate(&rows, &[GroupKey::Subject, GroupKey::Variant])?;
        let by_variant = aggregate(&rows, &[GroupKey::Variant])?;
        let subj_path = out.join("aggregate_subject.csv");
        write_csv_file(&subj_path, &by_subject)?;
        let var_path = out.join("aggregate.csv");
        write_csv_file(&var_path, &by_variant)?;
        let corpus = if a.corpus_bleu == Some(true) {
            let m: BTreeMap<&String, Value> = pairs
                .iter()
                .map(|(v, p)| {
                    let it = || p.iter().map(|(c, r)| (c.as_str(), r.as_str()));
                    (v, json!({"bleu1": corpus_bleu(it(), 1, tok), "bleu4": corpus_bleu(it(), 4, tok)}))
                })
                .collect();
            Some(serde_json::to_value(m)?)
        } else {
            None
        };
        let json_path = out.join("aggregate.json");
        write_json(
            &json_path,
            &json!({
                "tokenization": tok,
                "by_variant": by_variant,
                "by_subject": by_subject,
                "corpus_bleu": corpus,
            }),
        )?;
        for r in by_variant.iter().filter(|r| r.variant != "all") {
            println!(
                "evaluate {}: BLEU-1 {:.4} BLEU-4 {:.4} ROUGE-1 {:.4} ROUGE-2 {:.4} ROUGE-L {:.4}",
                r.variant, r.bleu1, r.bleu4, r.rouge1, r.rouge2, r.rouge_l
            );
        }
        summary.insert("captions".into(), json!(rows.len()));
        outputs.extend([results, subj_path, var_path, json_path]);
    }
    Ok(Some(Outcome {
        dir: out.clone(),
        seeds,
        inputs,
        outputs,
        summary: Value::Object(summary),
        code: 0,
    }))
}

#[derive(Serialize)]
struct ReportRow {
    run: String,
    loss: String,
    variant: String,
    naive_recall: Option<f64>,
    refined_recall: Option<f64>,
    bleu1: Option<f64>,
    bleu4: Option<f64>,
    rouge1: Option<f64>,
    rouge2: Option<f64>,
    #[serde(rename = "rougeL")]
    rouge_l: Option<f64>,
}

fn cmd_report(a: &ReportArgs) -> Result<Option<Outcome>> {
    let runs = need(&a.runs, "run")?;
    let out = need(&a.out_dir, "out-dir")?;
    let mut rows = Vec::new();
    let mut inputs = Vec::new();
    for dir in runs {
        let ret_path = dir.join("retrieval_eval.json");
        let agg_path = dir.join("aggregate.json");
        let ret: Option<RetrievalEval> = if ret_path.exists() {
            inputs.push(ret_path.clone());
            let t = fs::read_to_string(&ret_path).map_err(|e| Error::io(&ret_path, e))?;
            Some(serde_json::from_str(&t)?)
        } else {
            None
        };
        let agg: Option<Value> = if agg_path.exists() {
            inputs.push(agg_path.clone());
            let t = fs::read_to_string(&agg_path).map_err(|e| Error::io(&agg_path, e))?;
            Some(serde_json::from_str(&t)?)
        } else {
            None
        };
        if ret.is_none() && agg.is_none() {
            return Err(Error::Data(format!("{} holds no evaluation outputs", dir.display())));
        }
        let run = dir.display().to_string();
        let loss = ret.as_ref().and_then(|r| r.loss.clone()).unwrap_or_else(|| "naive".into());
        let naive = ret.as_ref().map(|r| r.naive.overall.recall_at_k);
        let refined = ret.as_ref().and_then(|r| Some(r.refined.as_ref()?.overall.recall_at_k));
        let variants: Vec<Value> = agg
            .as_ref()
            .and_then(|v| v.get("by_variant")?.as_array().cloned())
            .unwrap_or_default()
            .into_iter()
            .filter(|r| r["variant"] != "all")
            .collect();
        let f = |r: &Value, k: &str| r.get(k).and_then(Value::as_f64);
        if variants.is_empty() {
            rows.push(ReportRow {
                run,
                loss,
                variant: "-".into(),
                naive_recall: naive,
                refined_recall: refined,
                bleu1: None,
                bleu4: None,
                rouge1: None,
                rouge2: None,
                rouge_l: None,
            });
        } else {
            for r in variants {
                rows.push(ReportRow {
                    run: run.clone(),
                    loss: loss.clone(),
                    variant: r["variant"].as_str().unwrap_or("").into(),
                    naive_recall: naive,
                    refined_recall: refined,
                    bleu1: f(&r, "bleu1"),
                    bleu4: f(&r, "bleu4"),
                    rouge1: f(&r, "rouge1"),
                    rouge2: f(&r, "rouge2"),
                    rouge_l: f(&r, "rougeL"),
                });
            }
        }
    }
    ensure_dir(out)?;
    let csv_path = out.join("report.csv");
    write_csv_file(&csv_path, &rows)?;
    let md_path = out.join("report.md");
    fs::write(&md_path, markdown(&rows)).map_err(|e| Error::io(&md_path, e))?;
    print!("{}", markdown(&rows));
    Ok(Some(Outcome {
        dir: out.clone(),
        seeds: BTreeMap::new(),
        inputs,
        outputs: vec![csv_path, md_path],
        summary: json!({"rows": rows.len()}),
        code: 0,
    }))
}

fn markdown(rows: &[ReportRow]) -> String {
    let c = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
    let mut s = String::from(
        "| run | loss | variant | naive R@k | refined R@k | BLEU-1 | BLEU-4 | ROUGE-1 | ROUGE-2 | ROUGE-L |\n\
         |---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.run,
            r.loss,
            r.variant,
            c(r.naive_recall),
            c(r.refined_recall),
            c(r.bleu1),
            c(r.bleu4),
            c(r.rouge1),
            c(r.rouge2),
            c(r.rouge_l)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_arguments_is_a_usage_error() {
        assert_eq!(run(["sense"]), 1);
        assert_eq!(run(["sense", "--help"]), 0);
        assert_eq!(run(["sense", "train", "--bogus"]), 1);
        assert_eq!(run(["sense", "train"]), 1);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        fs::write(&cfg, r#"{"gradcheck": {"seeds": 2, "seed": 100}}"#).unwrap();
        let out = dir.path().join("g");
        let argv = [
            "sense",
            "gradcheck",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "3",
            "--out-dir",
            out.to_str().unwrap(),
        ];
        assert_eq!(run(argv), 0);
        let m: RunManifest =
            serde_json::from_str(&fs::read_to_string(out.join("gradcheck.manifest.json")).unwrap()).unwrap();
        assert_eq!(m.config["seed"], 3);
        assert_eq!(m.config["seeds"], 2);
        assert_eq!(m.seeds["first"], 3);
        fs::write(&cfg, r#"{"gradcheck": {"sedes": 2}}"#).unwrap();
        assert_eq!(run(["sense", "gradcheck", "--config", cfg.to_str().unwrap()]), 1);
    }

    #[test]
    fn generate_refuses_without_privacy_check() {
        assert_eq!(run(["sense", "generate", "--no-privacy-check"]), 1);
    }
}
