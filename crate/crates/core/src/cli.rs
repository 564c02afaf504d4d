//! Command-line interface.
//!
//! Every subcommand accepts `--config <file.json>` whose keys are the long
//! flag names (dashes or underscores); flags given on the command line win.
//! Relative output paths land under `--out-dir` (env `MTENC_OUT_DIR`,
//! default `.`); inputs resolve against the working directory. Each run
//! writes `<primary output>.manifest.json` (or `manifest.json` inside an
//! output directory) with the effective arguments and
//! sha256 of every input and output, and `rerun --manifest` replays it.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::bundle::{load_bundle, save_bundle, ModelBundle};
use crate::config::{RunConfig, TaskEntry};
use crate::data::synth::{generate_synthetic, SynthSpec};
use crate::data::{load_pair_dataset, to_jsonl_line, to_tsv_line, LoadOptions, Schema};
use crate::distill::{train_student, DistillConfig};
use crate::encoder::{encode_text, init_params, similarity, EncoderConfig, ModelParams, Side};
use crate::eval::{
    evaluate, format_grid, Bm25Scorer, DocEntry, EncoderScorer, JudgedSet, LevenshteinScorer, OracleScorer,
    RandomScorer, Scorer,
};
use crate::index::{build_index_threads, load_index, save_index, top_k};
use crate::losses::{Metric, Strategy, TripletConfig};
use crate::pooling::{
    embed_document_attention, embed_document_concat, init_attention, DocumentRecord, Entity, EntityKind,
    PoolingMode, DEFAULT_ATTENTION_HIDDEN,
};
use crate::scheduler::{tokenize_pairs, train, ScheduleStrategy, TaskData, TrainConfig};
use crate::tensor::AdamConfig;
use crate::tokenizer::{encode, train_bpe, Vocab};
use crate::train::Trainer;

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Parser, Debug)]
#[command(name = "mtenc", version, about = "Multi-task dual-encoder training, retrieval and evaluation")]
struct Cli {
    /// JSON file of flag values; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for relative output paths.
    #[arg(long, global = true, env = "MTENC_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads for embedding documents.
    #[arg(long, global = true, env = "MTENC_THREADS")]
    threads: Option<usize>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a byte-level BPE vocabulary from text files (one text per line).
    TrainTokenizer(TokenizerArgs),
    /// Train a dual encoder on one or more pair datasets.
    Train(TrainArgs),
    /// Distill a smaller query encoder from a trained model.
    Distill(DistillArgs),
    /// Embed texts, one per line.
    Encode(EncodeArgs),
    /// Build a document embedding index.
    Index(IndexArgs),
    /// Top-k search of queries against an index.
    Search(SearchArgs),
    /// Score a judged set and report ranking metrics.
    Eval(EvalArgs),
    /// Append an encoder similarity column to a TSV ranking table.
    Featurize(FeaturizeArgs),
    /// Write the synthetic datasets and judged sets.
    GenSynth(GenSynthArgs),
    /// Replay a run from its manifest and compare outputs.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TokenizerArgs {
    /// Text files, one text per line.
    #[arg(long, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Target vocabulary size [default: 1000].
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output vocabulary [default: vocab.txt].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainArgs {
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// `path=…,schema=click|nli|translation,loss=triplet|cross_entropy[,weight=…][,batch_size=…][,name=…][,format=…]`
    #[arg(long)]
    task: Vec<TaskEntry>,
    /// Output checkpoint [default: model.ckpt].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// [default: 1]
    #[arg(long)]
    epochs: Option<usize>,
    /// sequential | random | proportional [default: proportional]
    #[arg(long)]
    strategy: Option<ScheduleStrategy>,
    /// Draw proportional schedules at random instead of interleaving.
    #[arg(long)]
    stochastic: bool,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// concat | attention [default: concat]
    #[arg(long)]
    doc_pooling: Option<PoolingMode>,
    #[arg(long)]
    attention_hidden: Option<usize>,
    /// [default: 0.2]
    #[arg(long)]
    margin: Option<f64>,
    /// l1 | l2 | cosine [default: l1]
    #[arg(long)]
    metric: Option<Metric>,
    /// batch_all | hard | semi_hard | random [default: semi_hard]
    #[arg(long)]
    mining: Option<Strategy>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    output_dim: Option<usize>,
    #[arg(long)]
    max_len_query: Option<usize>,
    #[arg(long)]
    max_len_doc: Option<usize>,
    /// Separate query and document towers.
    #[arg(long)]
    separate_towers: bool,
    /// Count malformed dataset lines instead of failing.
    #[arg(long)]
    skip_malformed: bool,
    /// Write the per-iteration loss curve CSV here.
    #[arg(long)]
    emit_loss_curve: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct DistillArgs {
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// [default: half the teacher's layers]
    #[arg(long)]
    student_layers: Option<usize>,
    /// Query files, one query per line.
    #[arg(long, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    heldout_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct EncodeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Texts, one per line.
    #[arg(long)]
    input: Option<PathBuf>,
    /// query | doc [default: query]
    #[arg(long)]
    side: Option<String>,
    /// Output TSV of embedding values [default: embeddings.tsv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct IndexArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// JSONL of `{"id": …, "doc": {"entities": […], "language": …}}`.
    #[arg(long)]
    docs: Option<PathBuf>,
    /// [default: index.didx]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct SearchArgs {
    /// Query encoder.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    /// Queries as `id<TAB>text` or plain lines; `-` reads stdin.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// [default: 10]
    #[arg(long)]
    k: Option<usize>,
    /// Output TSV [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvalArgs {
    /// Judged set JSON.
    #[arg(long)]
    judged: Option<PathBuf>,
    /// encoder | bm25 | levenshtein | random | oracle [default: encoder]
    #[arg(long)]
    scorer: Option<String>,
    /// Query encoder (also supplies the vocabulary for bm25).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Document encoder when it differs from the query encoder.
    #[arg(long)]
    doc_model: Option<PathBuf>,
    #[arg(long)]
    doc_pooling: Option<PoolingMode>,
    /// Comma-separated cutoffs [default: 1,3,10].
    #[arg(long)]
    depths: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; `.csv` writes CSV, anything else JSON [default: report.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FeaturizeArgs {
    /// TSV with a header row.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    doc_pooling: Option<PoolingMode>,
    /// [default: query]
    #[arg(long)]
    query_col: Option<String>,
    /// Comma-separated document columns [default: title,description,url].
    #[arg(long)]
    doc_cols: Option<String>,
    /// [default: featurized.tsv]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct GenSynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// JSON generator spec; omitted fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory [default: synth].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct RerunArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Effective arguments after merging the config file.
    pub args: Value,
    /// Fully resolved configuration where a command has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<Value>,
    pub threads: usize,
    pub inputs: BTreeMap<String, String>,
    /// Output paths relative to the output directory.
    pub outputs: BTreeMap<String, String>,
}

struct Ctx {
    out_dir: PathBuf,
    threads: usize,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn ensure_parent(&self, p: &Path) -> Result<()> {
        if let Some(d) = p.parent() {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(())
    }
}

/// Record of files read and written by one command.
#[derive(Default)]
struct Run {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    resolved: Option<Value>,
}

pub fn file_sha256(p: &Path) -> Result<String> {
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Parses `argv` (including the program name) and runs it. Returns the
/// process exit code: 0 success, 1 runtime failure, 2 usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_default_env().filter_level(level).try_init();
    match execute(cli) {
        Ok(code) => code,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e:#}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| usage(format!("missing required option --{flag}")))
}

fn is_unset(v: &Value) -> bool {
    match v {
        Value::Null | Value::Bool(false) => true,
        Value::Array(a) => a.is_empty(),
        _ => false,
    }
}

/// Config-file values overlaid by every flag given on the command line.
fn merge<A: Serialize + DeserializeOwned>(cli: A, config: Option<&Path>) -> Result<A> {
    let Some(path) = config else { return Ok(cli) };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    let Value::Object(file) = file else {
        return Err(usage("config file must hold a JSON object"));
    };
    let mut merged: Map<String, Value> = file.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect();
    let Value::Object(flags) = serde_json::to_value(&cli)? else {
        unreachable!("argument structs serialize to objects")
    };
    for (k, v) in flags {
        if !is_unset(&v) {
            merged.insert(k, v);
        }
    }
    let known = serde_json::to_value(A::deserialize(Value::Object(Map::new()))?)?;
    for k in merged.keys() {
        if known.get(k).is_none() {
            return Err(usage(format!("unknown config key `{k}`")));
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("bad config: {e}")))
}

fn execute(cli: Cli) -> Result<i32> {
    let ctx = Ctx {
        out_dir: cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")),
        threads: cli.threads.unwrap_or(1).max(1),
    };
    let cfg = cli.config.as_deref();
    macro_rules! dispatch {
        ($name:literal, $args:expr, $f:ident) => {{
            let args = merge($args, cfg)?;
            let value = serde_json::to_value(&args)?;
            let (run, primary) = $f(&ctx, args)?;
            write_manifest(&ctx, $name, value, run, &primary)?;
            Ok(0)
        }};
    }
    match cli.command {
        Command::TrainTokenizer(a) => dispatch!("train-tokenizer", a, cmd_train_tokenizer),
        Command::Train(a) => dispatch!("train", a, cmd_train),
        Command::Distill(a) => dispatch!("distill", a, cmd_distill),
        Command::Encode(a) => dispatch!("encode", a, cmd_encode),
        Command::Index(a) => dispatch!("index", a, cmd_index),
        Command::Search(a) => dispatch!("search", a, cmd_search),
        Command::Eval(a) => dispatch!("eval", a, cmd_eval),
        Command::Featurize(a) => dispatch!("featurize", a, cmd_featurize),
        Command::GenSynth(a) => dispatch!("gen-synth", a, cmd_gen_synth),
        Command::Rerun(a) => {
            let a = merge(a, cfg)?;
            cmd_rerun(&ctx, &required(a.manifest, "manifest")?)
        }
    }
}

fn manifest_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        return primary.join("manifest.json");
    }
    let mut s = primary.as_os_str().to_owned();
    s.push(MANIFEST_SUFFIX);
    PathBuf::from(s)
}

fn rel_to(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

fn write_manifest(ctx: &Ctx, command: &str, args: Value, run: Run, primary: &Path) -> Result<()> {
    let mut inputs = BTreeMap::new();
    for p in &run.inputs {
        if p.as_os_str() != "-" {
            inputs.insert(p.to_string_lossy().into_owned(), file_sha256(p)?);
        }
    }
    let mut outputs = BTreeMap::new();
    for p in &run.outputs {
        outputs.insert(rel_to(&ctx.out_dir, p), file_sha256(p)?);
    }
    let m = Manifest {
        tool: "mtenc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        args,
        resolved: run.resolved,
        threads: ctx.threads,
        inputs,
        outputs,
    };
    let path = manifest_path(primary);
    ctx.ensure_parent(&path)?;
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn replay<A: DeserializeOwned>(
    ctx: &Ctx,
    m: &Manifest,
    f: fn(&Ctx, A) -> Result<(Run, PathBuf)>,
) -> Result<Run> {
    let args: A = serde_json::from_value(m.args.clone()).context("manifest arguments")?;
    Ok(f(ctx, args)?.0)
}

fn cmd_rerun(ctx: &Ctx, manifest: &Path) -> Result<i32> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?)
        .with_context(|| format!("parsing {}", manifest.display()))?;
    for (p, h) in &m.inputs {
        let now = file_sha256(Path::new(p))?;
        if &now != h {
            bail!("input {p} changed since the recorded run");
        }
    }
    for rel in m.outputs.keys() {
        if Path::new(rel).is_absolute() {
            bail!("cannot replay into a new directory: output {rel} is absolute");
        }
    }
    let run = match m.command.as_str() {
        "train-tokenizer" => replay(ctx, &m, cmd_train_tokenizer)?,
        "train" => replay(ctx, &m, cmd_train)?,
        "distill" => replay(ctx, &m, cmd_distill)?,
        "encode" => replay(ctx, &m, cmd_encode)?,
        "index" => replay(ctx, &m, cmd_index)?,
        "search" => replay(ctx, &m, cmd_search)?,
        "eval" => replay(ctx, &m, cmd_eval)?,
        "featurize" => replay(ctx, &m, cmd_featurize)?,
        "gen-synth" => replay(ctx, &m, cmd_gen_synth)?,
        other => bail!("unknown command `{other}` in manifest"),
    };
    let mut produced = BTreeMap::new();
    for p in &run.outputs {
        produced.insert(rel_to(&ctx.out_dir, p), file_sha256(p)?);
    }
    let mut mismatched = Vec::new();
    for (rel, h) in &m.outputs {
        match produced.get(rel) {
            Some(now) if now == h => {}
            _ => mismatched.push(rel.clone()),
        }
    }
    if mismatched.is_empty() {
        println!("reproduced {} output(s) of `{}`", m.outputs.len(), m.command);
        Ok(0)
    } else {
        for rel in &mismatched {
            eprintln!("differs: {rel}");
        }
        Ok(1)
    }
}

fn read_lines(p: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if !line.trim().is_empty() {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

fn write_file(ctx: &Ctx, run: &mut Run, path: &Path, bytes: &[u8]) -> Result<()> {
    ctx.ensure_parent(path)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    run.outputs.push(path.to_path_buf());
    Ok(())
}

fn cmd_train_tokenizer(ctx: &Ctx, a: TokenizerArgs) -> Result<(Run, PathBuf)> {
    if a.corpus.is_empty() {
        return Err(usage("missing required option --corpus"));
    }
    let mut run = Run::default();
    let mut texts = Vec::new();
    for p in &a.corpus {
        texts.extend(read_lines(p)?);
        run.inputs.push(p.clone());
    }
    let vocab = train_bpe(&texts, a.vocab_size.unwrap_or(1000), a.seed.unwrap_or(0))?;
    let out = ctx.out(a.out.as_deref().unwrap_or(Path::new("vocab.txt")));
    let mut buf = Vec::new();
    vocab.write_to(&mut buf)?;
    write_file(ctx, &mut run, &out, &buf)?;
    println!("vocabulary of {} tokens -> {}", vocab.size(), out.display());
    Ok((run, out))
}

fn read_vocab(p: &Path) -> Result<Vocab> {
    let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
    Vocab::read_from(BufReader::new(f)).with_context(|| format!("reading vocabulary {}", p.display()))
}

fn resolve_train(a: TrainArgs) -> Result<RunConfig> {
    let d = EncoderConfig::default();
    let t = TripletConfig::default();
    let cfg = RunConfig {
        encoder: EncoderConfig {
            vocab_size: 0,
            num_layers: a.layers.unwrap_or(d.num_layers),
            model_dim: a.model_dim.unwrap_or(d.model_dim),
            num_heads: a.heads.unwrap_or(d.num_heads),
            ffn_dim: a.ffn_dim.unwrap_or(d.ffn_dim),
            output_dim: a.output_dim.unwrap_or(d.output_dim),
            max_len_query: a.max_len_query.unwrap_or(d.max_len_query),
            max_len_doc: a.max_len_doc.unwrap_or(d.max_len_doc),
            shared_weights: !a.separate_towers,
        },
        triplet: TripletConfig {
            margin: a.margin.unwrap_or(t.margin),
            metric: a.metric.unwrap_or(t.metric),
            strategy: a.mining.unwrap_or(t.strategy),
        },
        strategy: a.strategy.unwrap_or(ScheduleStrategy::Proportional),
        stochastic_proportional: a.stochastic,
        epochs: a.epochs.unwrap_or(1),
        lr: a.lr.unwrap_or(AdamConfig::default().lr),
        seed: a.seed.unwrap_or(0),
        pooling: a.doc_pooling.unwrap_or_default(),
        attention_hidden: a.attention_hidden.unwrap_or(DEFAULT_ATTENTION_HIDDEN),
        max_iterations: a.max_iterations,
        tasks: a.task,
        vocab: required(a.vocab, "vocab")?,
        init: a.init,
        out: a.out.unwrap_or_else(|| PathBuf::from("model.ckpt")),
    };
    if cfg.tasks.is_empty() {
        return Err(usage("missing required option --task"));
    }
    Ok(cfg)
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> Result<(Run, PathBuf)> {
    let skip = a.skip_malformed;
    let curve_path = a.emit_loss_curve.clone();
    let mut cfg = resolve_train(a)?;
    let vocab = read_vocab(&cfg.vocab)?;
    cfg.encoder.vocab_size = vocab.size();
    cfg.validate()?;
    let mut run = Run {
        inputs: vec![cfg.vocab.clone()],
        ..Run::default()
    };
    let mut model = match &cfg.init {
        Some(p) => {
            run.inputs.push(p.clone());
            run.inputs.push(crate::bundle::sidecar_path(p));
            let b = load_bundle(p)?;
            if b.model.config != cfg.encoder {
                bail!("--init model config differs from the requested encoder config");
            }
            b.model
        }
        None => init_params(&cfg.encoder, cfg.seed)?,
    };
    if cfg.pooling == PoolingMode::Attention && !crate::pooling::has_attention(&model.params) {
        init_attention(&mut model, cfg.attention_hidden, crate::util::sub_seed(cfg.seed, 7))?;
    }
    let mut tasks = Vec::new();
    for t in &cfg.tasks {
        run.inputs.push(t.path.clone());
        let loaded = load_pair_dataset(&t.path, t.format, t.schema, &t.name, LoadOptions { skip_malformed: skip })?;
        if loaded.skipped > 0 {
            log::warn!("task `{}`: skipped {} malformed lines", t.name, loaded.skipped);
        }
        let pairs = tokenize_pairs(&loaded.examples, &vocab, &cfg.encoder)?;
        tasks.push(TaskData::new(t.spec(), pairs)?);
    }
    let mut trainer = Trainer::new(
        model,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let tc = TrainConfig {
        epochs: cfg.epochs,
        strategy: cfg.strategy,
        stochastic_proportional: cfg.stochastic_proportional,
        seed: cfg.seed,
        triplet: cfg.triplet,
        pooling: cfg.pooling,
        max_iterations: cfg.max_iterations,
    };
    let curve = train(&mut trainer, &tasks, &tc)?;
    let out = ctx.out(&cfg.out);
    ctx.ensure_parent(&out)?;
    let bundle = ModelBundle {
        model: trainer.model,
        vocab,
        teacher_hash: None,
    };
    run.outputs.extend(save_bundle(&bundle, &out)?);
    if let Some(p) = curve_path {
        let p = ctx.out(&p);
        write_file(ctx, &mut run, &p, curve.to_csv().as_bytes())?;
    }
    println!(
        "trained {} iterations, final running loss {:.6} -> {}",
        curve.points.len(),
        curve.final_running_avg().unwrap_or(f64::NAN),
        out.display()
    );
    run.resolved = Some(serde_json::to_value(&cfg)?);
    Ok((run, out))
}

fn cmd_distill(ctx: &Ctx, a: DistillArgs) -> Result<(Run, PathBuf)> {
    let teacher_path = required(a.teacher, "teacher")?;
    if a.corpus.is_empty() {
        return Err(usage("missing required option --corpus"));
    }
    let teacher = load_bundle(&teacher_path)?;
    let mut run = Run {
        inputs: vec![teacher_path.clone(), crate::bundle::sidecar_path(&teacher_path)],
        ..Run::default()
    };
    let mut queries = Vec::new();
    for p in &a.corpus {
        run.inputs.push(p.clone());
        for line in read_lines(p)? {
            queries.push(encode(&line, &teacher.vocab, teacher.model.config.max_len_query, true)?);
        }
    }
    let d = DistillConfig::for_teacher(&teacher.model.config);
    let cfg = DistillConfig {
        student_layers: a.student_layers.unwrap_or(d.student_layers),
        epochs: a.epochs.unwrap_or(d.epochs),
        lr: a.lr.unwrap_or(d.lr),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        heldout_fraction: a.heldout_fraction.unwrap_or(d.heldout_fraction),
        seed: a.seed.unwrap_or(d.seed),
    };
    let outcome = train_student(&teacher.model, &queries, &cfg)?;
    let out = ctx.out(a.out.as_deref().unwrap_or(Path::new("student.ckpt")));
    ctx.ensure_parent(&out)?;
    let bundle = ModelBundle {
        model: outcome.student.clone(),
        vocab: teacher.vocab.clone(),
        teacher_hash: Some(teacher.doc_side_hash()),
    };
    run.outputs.extend(save_bundle(&bundle, &out)?);
    let mut report = String::from("epoch,heldout_l2\n");
    report.push_str(&format!("0,{}\n", outcome.initial_heldout_l2));
    for (i, l) in outcome.epoch_heldout_l2.iter().enumerate() {
        report.push_str(&format!("{},{l}\n", i + 1));
    }
    let mut rp = out.as_os_str().to_owned();
    rp.push(".distill.csv");
    write_file(ctx, &mut run, Path::new(&rp), report.as_bytes())?;
    println!("student held-out L2 {:.6} -> {}", outcome.final_heldout_l2(), out.display());
    run.resolved = Some(serde_json::to_value(&cfg)?);
    Ok((run, out))
}

fn format_row(v: &[f32]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\t")
}

fn cmd_encode(ctx: &Ctx, a: EncodeArgs) -> Result<(Run, PathBuf)> {
    let model_path = required(a.model, "model")?;
    let input = required(a.input, "input")?;
    let b = load_bundle(&model_path)?;
    let side = match a.side.as_deref().unwrap_or("query") {
        "query" => Side::Query,
        "doc" | "document" => Side::Document,
        other => return Err(usage(format!("unknown side `{other}` (expected query or doc)"))),
    };
    let mut out_text = String::new();
    for line in read_lines(&input)? {
        let e = match side {
            Side::Query => encode_text(&b.model, Side::Query, &encode(&line, &b.vocab, b.model.config.max_len_query, true)?)?,
            Side::Document => embed_document_concat(&b.model, &b.vocab, &DocumentRecord::new(vec![Entity::new(EntityKind::Title, line)], ""))?,
        };
        out_text.push_str(&format_row(e.as_slice()));
        out_text.push('\n');
    }
    let out = ctx.out(a.out.as_deref().unwrap_or(Path::new("embeddings.tsv")));
    let mut run = Run {
        inputs: vec![model_path.clone(), crate::bundle::sidecar_path(&model_path), input],
        ..Run::default()
    };
    write_file(ctx, &mut run, &out, out_text.as_bytes())?;
    Ok((run, out))
}

fn read_docs(p: &Path) -> Result<Vec<DocEntry>> {
    read_lines(p)?
        .iter()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}: bad document record", p.display(), i + 1)))
        .collect()
}

fn cmd_index(ctx: &Ctx, a: IndexArgs) -> Result<(Run, PathBuf)> {
    let model_path = required(a.model, "model")?;
    let docs_path = required(a.docs, "docs")?;
    let b = load_bundle(&model_path)?;
    let docs = read_docs(&docs_path)?;
    let index = build_index_threads(&b.model, &b.vocab, &docs, ctx.threads)?;
    let out = ctx.out(a.out.as_deref().unwrap_or(Path::new("index.didx")));
    let mut buf = Vec::new();
    save_index(&index, &mut buf)?;
    let mut run = Run {
        inputs: vec![model_path.clone(), crate::bundle::sidecar_path(&model_path), docs_path],
        ..Run::default()
    };
    write_file(ctx, &mut run, &out, &buf)?;
    println!("indexed {} documents -> {}", index.len(), out.display());
    Ok((run, out))
}

fn cmd_search(ctx: &Ctx, a: SearchArgs) -> Result<(Run, PathBuf)> {
    let model_path = required(a.model, "model")?;
    let index_path = required(a.index, "index")?;
    let queries = required(a.queries, "queries")?;
    let k = a.k.unwrap_or(10);
    if k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    let b = load_bundle(&model_path)?;
    let index = load_index(BufReader::new(fs::File::open(&index_path).with_context(|| format!("opening {}", index_path.display()))?))?;
    if !index.check_hash(&b.doc_side_hash()) {
        eprintln!("warning: index was built by a different checkpoint than the query encoder expects");
    }
    let lines = if queries.as_os_str() == "-" {
        io::stdin().lock().lines().collect::<io::Result<Vec<_>>>()?.into_iter().filter(|l| !l.trim().is_empty()).collect()
    } else {
        read_lines(&queries)?
    };
    let mut text = String::new();
    for (n, line) in lines.iter().enumerate() {
        let (id, q) = match line.split_once('\t') {
            Some((id, q)) => (id.to_string(), q),
            None => (format!("q{}", n + 1), line.as_str()),
        };
        let e = encode_text(&b.model, Side::Query, &encode(q, &b.vocab, b.model.config.max_len_query, true)?)?;
        for (r, hit) in top_k(&index, &e, k)?.iter().enumerate() {
            text.push_str(&format!("{id}\t{}\t{}\t{}\n", hit.id, hit.score, r + 1));
        }
    }
    let mut run = Run {
        inputs: vec![model_path.clone(), crate::bundle::sidecar_path(&model_path), index_path, queries],
        ..Run::default()
    };
    let primary = match a.out {
        Some(p) => {
            let p = ctx.out(&p);
            write_file(ctx, &mut run, &p, text.as_bytes())?;
            p
        }
        None => {
            io::stdout().lock().write_all(text.as_bytes())?;
            ctx.out(Path::new("search.tsv"))
        }
    };
    Ok((run, primary))
}

fn parse_depths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|d| d.trim().parse::<usize>().map_err(|_| usage(format!("bad depth `{d}`"))))
        .collect()
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<(Run, PathBuf)> {
    let judged_path = required(a.judged, "judged")?;
    let judged: JudgedSet = serde_json::from_str(&fs::read_to_string(&judged_path).with_context(|| format!("reading {}", judged_path.display()))?)
        .with_context(|| format!("parsing {}", judged_path.display()))?;
    let depths = parse_depths(a.depths.as_deref().unwrap_or("1,3,10"))?;
    let mut run = Run {
        inputs: vec![judged_path],
        ..Run::default()
    };
    let mut load = |p: &Option<PathBuf>, flag: &str| -> Result<ModelBundle> {
        let p = required(p.clone(), flag)?;
        run.inputs.push(p.clone());
        run.inputs.push(crate::bundle::sidecar_path(&p));
        load_bundle(&p)
    };
    let pooling = a.doc_pooling.unwrap_or_default();
    let kind = a.scorer.as_deref().unwrap_or("encoder");
    let report = match kind {
        "encoder" => {
            let q = load(&a.model, "model")?;
            let d = match &a.doc_model {
                Some(_) => Some(load(&a.doc_model, "doc-model")?),
                None => None,
            };
            let mut s = EncoderScorer::asymmetric(&q.model, d.as_ref().map_or(&q.model, |d| &d.model), &q.vocab, pooling);
            evaluate(&mut s, &judged, &depths)?
        }
        "bm25" => {
            let b = load(&a.model, "model")?;
            let mut s = Bm25Scorer::new(&b.vocab, &judged)?;
            evaluate(&mut s, &judged, &depths)?
        }
        other => {
            let mut s: Box<dyn Scorer> = match other {
                "levenshtein" => Box::new(LevenshteinScorer),
                "random" => Box::new(RandomScorer::new(a.seed.unwrap_or(0))),
                "oracle" => Box::new(OracleScorer),
                _ => return Err(usage(format!("unknown scorer `{other}`"))),
            };
            evaluate(s.as_mut(), &judged, &depths)?
        }
    };
    let out = ctx.out(a.out.as_deref().unwrap_or(Path::new("report.json")));
    let body = if out.extension().is_some_and(|e| e == "csv") {
        report.to_csv()
    } else {
        report.to_json() + "\n"
    };
    write_file(ctx, &mut run, &out, body.as_bytes())?;
    print!("{}", format_grid(std::slice::from_ref(&report)));
    Ok((run, out))
}

fn entity_kind(col: &str) -> EntityKind {
    match col.to_ascii_lowercase().as_str() {
        "title" => EntityKind::Title,
        "description" => EntityKind::Description,
        "url" => EntityKind::Url,
        "caption" => EntityKind::Caption,
        _ => EntityKind::Other,
    }
}

/// Appends `semantic_sim` to every row; the original bytes of each line are
/// kept as they are.
fn featurize_table(
    model: &ModelParams<f32>,
    vocab: &Vocab,
    pooling: PoolingMode,
    table: &str,
    query_col: &str,
    doc_cols: &[&str],
) -> Result<String> {
    let mut lines = table.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| anyhow!("table is empty"))?;
    let (hbody, hend) = split_eol(header);
    let cols: Vec<&str> = hbody.split('\t').collect();
    let find = |c: &str| cols.iter().position(|h| *h == c).ok_or_else(|| anyhow!("table has no `{c}` column"));
    let qi = find(query_col)?;
    let di: Vec<(usize, EntityKind)> = doc_cols.iter().map(|c| Ok((find(c)?, entity_kind(c)))).collect::<Result<_>>()?;
    let mut out = String::with_capacity(table.len() * 2);
    out.push_str(hbody);
    out.push_str("\tsemantic_sim");
    out.push_str(if hend.is_empty() { "\n" } else { hend });
    for (n, line) in lines.enumerate() {
        let (body, end) = split_eol(line);
        if body.is_empty() {
            out.push_str(line);
            continue;
        }
        let fields: Vec<&str> = body.split('\t').collect();
        let get = |i: usize| fields.get(i).copied().ok_or_else(|| anyhow!("row {} has {} columns", n + 2, fields.len()));
        let query = get(qi)?;
        let doc = DocumentRecord::new(
            di.iter().map(|&(i, k)| Ok(Entity::new(k, get(i)?))).collect::<Result<Vec<_>>>()?,
            "",
        );
        let q = encode_text(model, Side::Query, &encode(query, vocab, model.config.max_len_query, true)?)?;
        let d = match pooling {
            PoolingMode::Concat => embed_document_concat(model, vocab, &doc)?,
            PoolingMode::Attention => embed_document_attention(model, vocab, &q, &doc)?,
        };
        out.push_str(body);
        out.push('\t');
        out.push_str(&similarity(&q, &d)?.to_string());
        out.push_str(if end.is_empty() { "\n" } else { end });
    }
    Ok(out)
}

fn split_eol(line: &str) -> (&str, &str) {
    let body = line.trim_end_matches(['\n', '\r']);
    (body, &line[body.len()..])
}

fn cmd_featurize(ctx: &Ctx, a: FeaturizeArgs) -> Result<(Run, PathBuf)> {
    let table_path = required(a.table, "table")?;
    let model_path = required(a.model, "model")?;
    let b = load_bundle(&model_path)?;
    let table = fs::read_to_string(&table_path).with_context(|| format!("reading {}", table_path.display()))?;
    let doc_cols = a.doc_cols.unwrap_or_else(|| "title,description,url".into());
    let doc_cols: Vec<&str> = doc_cols.split(',').map(str::trim).collect();
    let text = featurize_table(
        &b.model,
        &b.vocab,
        a.doc_pooling.unwrap_or_default(),
        &table,
        a.query_col.as_deref().unwrap_or("query"),
        &doc_cols,
    )?;
    let out = ctx.out(a.out.as_deref().unwrap_or(Path::new("featurized.tsv")));
    let mut run = Run {
        inputs: vec![model_path.clone(), crate::bundle::sidecar_path(&model_path), table_path],
        ..Run::default()
    };
    write_file(ctx, &mut run, &out, text.as_bytes())?;
    Ok((run, out))
}

fn cmd_gen_synth(ctx: &Ctx, a: GenSynthArgs) -> Result<(Run, PathBuf)> {
    let mut run = Run::default();
    let spec: SynthSpec = match &a.spec {
        Some(p) => {
            run.inputs.push(p.clone());
            serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthSpec::default(),
    };
    let data = generate_synthetic(&spec, a.seed.unwrap_or(0))?;
    let dir = ctx.out(a.out.as_deref().unwrap_or(Path::new("synth")));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let lines = |rows: Vec<String>| rows.into_iter().map(|r| r + "\n").collect::<String>();
    let mut put = |name: &str, body: String| write_file(ctx, &mut run, &dir.join(name), body.as_bytes());
    put("click.tsv", lines(data.click.iter().map(|e| to_tsv_line(e, Schema::Click)).collect()))?;
    put("semantic.tsv", lines(data.semantic.iter().map(|e| to_tsv_line(e, Schema::Click)).collect()))?;
    put("nli.tsv", lines(data.nli.iter().map(|e| to_tsv_line(e, Schema::Nli)).collect()))?;
    put("noisy_train.jsonl", lines(data.noisy.train.iter().map(to_jsonl_line).collect()))?;
    let docs = |d: &[DocEntry]| -> Result<String> {
        Ok(lines(d.iter().map(serde_json::to_string).collect::<serde_json::Result<_>>()?))
    };
    put("corpus.jsonl", docs(&data.corpus)?)?;
    put("noisy_corpus.jsonl", docs(&data.noisy.docs)?)?;
    put("semantic_judged.json", serde_json::to_string_pretty(&data.semantic_judged)? + "\n")?;
    put("click_judged.json", serde_json::to_string_pretty(&data.click_judged)? + "\n")?;
    put("noisy_judged.json", serde_json::to_string_pretty(&data.noisy.judged)? + "\n")?;
    put("texts.txt", lines(data.texts().into_iter().map(|t| t.replace('\n', " ")).collect()))?;
    let queries: Vec<String> = data
        .click
        .iter()
        .chain(&data.semantic)
        .chain(&data.nli)
        .chain(&data.noisy.train)
        .map(|e| e.query.clone())
        .collect();
    put("queries.txt", lines(queries))?;
    let held: Vec<String> = data.semantic_judged.queries.iter().map(|q| format!("{}\t{}", q.id, q.text)).collect();
    put("heldout_queries.tsv", lines(held))?;
    put("spec.json", serde_json::to_string_pretty(&spec)? + "\n")?;
    println!("synthetic data (seed {}) -> {}", data.seed, dir.display());
    Ok((run, dir))
}
