//! Command-line entry point: checkpoint/task generation helpers plus the
//! memorize / query / train / eval / bench commands.
//!
//! Exit codes: 0 success, 2 input error, 3 compatibility error, 4 numeric
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use memorag::evalbench;
use memorag::memory;
use memorag::model::{validate_beta, ModelConfig, ModelError, Parameters, Vocab};
use memorag::pipeline::{Pipeline, PipelineConfig, PipelineError};
use memorag::retrieval::{build_index, chunk_context};
use memorag::training::{
    self, build_rlgf_pairs, PairOutcome, PretrainBatch, RlgfTrainSample, SftSample, Stage,
    StageData, TrainConfig, TrainError,
};

const EXIT_INPUT: u8 = 2;
const EXIT_COMPAT: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "memorag", version, about = "Memory-augmented retrieval pipeline")]
struct Cli {
    /// Optional TOML config file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create a fresh random checkpoint.
    Init(InitArgs),
    /// Generate a synthetic indirection-task corpus.
    GenTasks(GenTasksArgs),
    /// Form compact memory over a context file and save it.
    Memorize(MemorizeArgs),
    /// Answer one query against a context, optionally reusing saved memory.
    Query(QueryArgs),
    /// Run one training stage over a data file.
    Train(TrainArgs),
    /// Score modes over a corpus and print a metrics table.
    Eval(EvalArgs),
    /// Measure indexing/retrieval latency and cache bytes per mode.
    Bench(BenchArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, default_value_t = 64)]
    window: usize,
    #[arg(long, default_value_t = 2048)]
    max_seq: usize,
}

#[derive(Args)]
struct GenTasksArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    n_docs: usize,
    #[arg(long, default_value_t = 1024)]
    doc_len: usize,
    #[arg(long, default_value_t = 128)]
    chunk_max: usize,
}

#[derive(Args)]
struct MemorizeArgs {
    /// UTF-8 context file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beta: Option<usize>,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Saved memory file; memory is formed fresh when omitted.
    #[arg(long)]
    mem: Option<PathBuf>,
    #[arg(long)]
    context: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long)]
    hits: Option<usize>,
    #[arg(long, default_value = "memorag")]
    mode: String,
    /// Separate generator checkpoint; defaults to the memory model's base.
    #[arg(long)]
    generator: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// pretrain | sft | rlgf
    #[arg(long)]
    stage: String,
    /// Line-delimited JSON records.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Comma-separated list of modes.
    #[arg(long, default_value = "memorag,standard_rag,full_context")]
    modes: String,
    /// Optional line-delimited JSON output of per-task results.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated context lengths; accepts a k suffix (1k = 1024).
    #[arg(long, default_value = "1k,2k,4k")]
    lengths: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    beta: Option<usize>,
}

/// File-level defaults for pipeline knobs; flags win over these.
#[derive(Clone, Debug, Default, Deserialize)]
struct FileConfig {
    hits: Option<usize>,
    chunk_max: Option<usize>,
    beta: Option<usize>,
    clue_max_tokens: Option<usize>,
    answer_max_tokens: Option<usize>,
    clue_prompt: Option<String>,
    answer_prompt: Option<String>,
    include_original_query: Option<bool>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    fn pipeline(&self) -> PipelineConfig {
        let mut p = PipelineConfig::default();
        if let Some(v) = self.hits {
            p.hits = v;
        }
        if let Some(v) = self.chunk_max {
            p.chunk_max = v;
        }
        if let Some(v) = self.beta {
            p.beta = v;
        }
        if let Some(v) = self.clue_max_tokens {
            p.clue_max_tokens = v;
        }
        if let Some(v) = self.answer_max_tokens {
            p.answer_max_tokens = v;
        }
        if let Some(v) = &self.clue_prompt {
            p.clue_prompt = v.clone();
        }
        if let Some(v) = &self.answer_prompt {
            p.answer_prompt = v.clone();
        }
        if let Some(v) = self.include_original_query {
            p.include_original_query = v;
        }
        p
    }
}

/// One corpus line: a context with its queries and optional supervision.
#[derive(Clone, Debug, Deserialize, Serialize)]
struct CorpusRecord {
    context: String,
    #[serde(default)]
    queries: Vec<String>,
    #[serde(default)]
    gold_answers: Option<Vec<String>>,
    #[serde(default)]
    clues: Option<Vec<String>>,
    #[serde(default)]
    output: Option<String>,
    #[serde(default)]
    gold_answer: Option<String>,
}

fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad record", path.display(), i + 1))?;
        if let Some(g) = &rec.gold_answers {
            if g.len() != rec.queries.len() {
                bail!("{}:{}: queries and gold_answers differ in length", path.display(), i + 1);
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reproducibility record; written before any heavy work starts.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    version: &'static str,
    unix_time: u64,
}

fn write_manifest(
    command: &str,
    config: &PipelineConfig,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let primary = outputs.first().map(|p| p.to_path_buf());
    let manifest_path = match primary {
        Some(p) => PathBuf::from(format!("{}.manifest.json", p.display())),
        None => PathBuf::from(format!("{command}.manifest.json")),
    };
    let m = RunManifest {
        command: command.into(),
        args: std::env::args().collect(),
        config: serde_json::to_value(config)?,
        seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        version: env!("CARGO_PKG_VERSION"),
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs(),
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&m)?)
        .with_context(|| format!("writing manifest {}", manifest_path.display()))?;
    Ok(())
}

fn load_params(path: &Path) -> Result<Parameters> {
    Parameters::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Maps error causes to the documented exit codes.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(m) = cause.downcast_ref::<ModelError>() {
            return match m {
                ModelError::FingerprintMismatch { .. } => EXIT_COMPAT,
                ModelError::Format(_) => EXIT_COMPAT,
                _ => EXIT_INPUT,
            };
        }
        if let Some(m) = cause.downcast_ref::<memory::MemoryError>() {
            return match m {
                memory::MemoryError::ParamsMismatch { .. } => EXIT_COMPAT,
                memory::MemoryError::Format(_) => EXIT_COMPAT,
                memory::MemoryError::Model(ModelError::FingerprintMismatch { .. }) => EXIT_COMPAT,
                _ => EXIT_INPUT,
            };
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return match p {
                PipelineError::ContextMismatch { .. } => EXIT_COMPAT,
                PipelineError::Model(ModelError::FingerprintMismatch { .. }) => EXIT_COMPAT,
                _ => EXIT_INPUT,
            };
        }
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return match t {
                TrainError::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_INPUT,
            };
        }
    }
    EXIT_INPUT
}

fn run(cli: Cli) -> Result<()> {
    let file_cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Init(a) => cmd_init(a),
        Cmd::GenTasks(a) => cmd_gen_tasks(a),
        Cmd::Memorize(a) => cmd_memorize(a, &file_cfg),
        Cmd::Query(a) => cmd_query(a, &file_cfg),
        Cmd::Train(a) => cmd_train(a, &file_cfg),
        Cmd::Eval(a) => cmd_eval(a, &file_cfg),
        Cmd::Bench(a) => cmd_bench(a, &file_cfg),
    }
}

fn cmd_init(a: InitArgs) -> Result<()> {
    let vocab = Vocab::builtin();
    let config = ModelConfig {
        vocab_size: vocab.size(),
        d_model: a.d_model,
        n_layers: a.n_layers,
        n_heads: a.n_heads,
        ffn_mult: 4,
        window_l: a.window,
        mem_k: a.window / 4,
        max_seq: a.max_seq,
        mem_enabled: true,
    };
    write_manifest("init", &PipelineConfig::default(), Some(a.seed), &[], &[&a.out])?;
    let params = Parameters::init(config, a.seed)?;
    params.save(&a.out)?;
    println!("wrote checkpoint {} (fingerprint {:016x})", a.out.display(), params.fingerprint());
    Ok(())
}

fn cmd_gen_tasks(a: GenTasksArgs) -> Result<()> {
    write_manifest("gen-tasks", &PipelineConfig::default(), Some(a.seed), &[], &[&a.out])?;
    let tasks = evalbench::gen_indirection_tasks(a.seed, a.n_docs, a.doc_len, a.chunk_max);
    let mut lines = String::new();
    for t in &tasks {
        let rec = CorpusRecord {
            context: t.context.clone(),
            queries: t.qa.iter().map(|q| q.query.clone()).collect(),
            gold_answers: Some(t.qa.iter().map(|q| q.gold_answer.clone()).collect()),
            clues: None,
            output: None,
            gold_answer: None,
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    fs::write(&a.out, lines)?;
    println!("wrote {} tasks to {}", tasks.len(), a.out.display());
    Ok(())
}

fn cmd_memorize(a: MemorizeArgs, file_cfg: &FileConfig) -> Result<()> {
    let mut pcfg = file_cfg.pipeline();
    if let Some(b) = a.beta {
        pcfg.beta = b;
    }
    validate_beta(pcfg.beta)?;
    let context = fs::read_to_string(&a.input)
        .with_context(|| format!("reading input {}", a.input.display()))?;
    write_manifest("memorize", &pcfg, None, &[&a.input, &a.checkpoint], &[&a.out])?;
    let params = load_params(&a.checkpoint)?;
    let tokens = Vocab::builtin().encode(&context);
    let mem = memory::memorize(&tokens, &params, pcfg.beta)?;
    memory::offload(&mem, &a.out)?;
    println!("{}", serde_json::to_string(&memory::memory_stats(&mem))?);
    Ok(())
}

fn cmd_query(a: QueryArgs, file_cfg: &FileConfig) -> Result<()> {
    let mut pcfg = file_cfg.pipeline();
    if let Some(h) = a.hits {
        pcfg.hits = h;
    }
    let context = fs::read_to_string(&a.context)
        .with_context(|| format!("reading context {}", a.context.display()))?;
    write_manifest("query", &pcfg, None, &[&a.context, &a.checkpoint], &[])?;
    let params = load_params(&a.checkpoint)?;
    let generator = match &a.generator {
        Some(p) => Some(load_params(p)?),
        None => None,
    };
    let mut pipe = Pipeline::new(&params, pcfg);
    if let Some(g) = &generator {
        pipe = pipe.with_generator(g);
    }
    let queries = vec![a.query.clone()];
    let results = match &a.mem {
        Some(mem_path) if a.mode == "memorag" => {
            let mem = memory::load(mem_path, &params)?;
            pipe.run_with_memory(&queries, &context, mem)?
        }
        _ => pipe.run(&queries, &context, &a.mode)?,
    };
    for r in &results {
        if let Some(clues) = &r.clues {
            for (i, c) in clues.clue_strings.iter().enumerate() {
                println!("clue[{i}]: {c}");
            }
        }
        if let Some(e) = &r.evidence {
            let ids: Vec<String> = e.hits.iter().map(|(id, _)| id.to_string()).collect();
            println!("evidence: [{}]", ids.join(", "));
        }
        println!("answer: {}{}", r.answer, if r.low_confidence { "  (low confidence)" } else { "" });
    }
    Ok(())
}

fn encode_clue_prompt(query: &str) -> Vec<usize> {
    let vocab = Vocab::builtin();
    let mut p = vec![vocab.clue_marker()];
    p.extend(vocab.encode(query));
    p.push(vocab.sep());
    p
}

fn cmd_train(a: TrainArgs, file_cfg: &FileConfig) -> Result<()> {
    let Some(stage) = Stage::parse(&a.stage) else {
        bail!("unknown stage '{}' (expected pretrain, sft, or rlgf)", a.stage);
    };
    let pcfg = file_cfg.pipeline();
    write_manifest("train", &pcfg, Some(a.seed), &[&a.data, &a.checkpoint], &[&a.out])?;
    let mut params = load_params(&a.checkpoint)?;
    let mut tcfg = match stage {
        Stage::Pretrain => TrainConfig::pretrain(a.seed),
        Stage::Sft => TrainConfig::sft(a.seed),
        Stage::Rlgf => TrainConfig::rlgf(a.seed),
    };
    if let Some(v) = a.lr.or(file_cfg.lr) {
        tcfg.lr = v;
    }
    if let Some(v) = a.batch_size.or(file_cfg.batch_size) {
        tcfg.batch_size = v;
    }
    if let Some(v) = a.epochs.or(file_cfg.epochs) {
        tcfg.epochs = v;
    }
    let records = read_corpus(&a.data)?;
    let vocab = Vocab::builtin();
    let data = match stage {
        Stage::Pretrain => StageData::Pretrain(PretrainBatch {
            seqs: records.iter().map(|r| vocab.encode(&r.context)).collect(),
        }),
        Stage::Sft => {
            let mut samples = Vec::new();
            for r in &records {
                let query = r.queries.first().cloned().unwrap_or_default();
                let Some(output) = &r.output else {
                    bail!("sft record missing 'output' field");
                };
                let mut gold = vocab.encode(output);
                gold.push(vocab.eos());
                samples.push(SftSample {
                    context: vocab.encode(&r.context),
                    prompt: encode_clue_prompt(&query),
                    gold,
                });
            }
            StageData::Sft(samples)
        }
        Stage::Rlgf => {
            let mut samples = Vec::new();
            for (i, r) in records.iter().enumerate() {
                let query = r.queries.first().cloned().unwrap_or_default();
                let (Some(clues), Some(gold_answer)) = (&r.clues, &r.gold_answer) else {
                    bail!("rlgf record missing 'clues' or 'gold_answer'");
                };
                let tokens = vocab.encode(&r.context);
                let index = build_index(chunk_context(&r.context, pcfg.chunk_max, vocab));
                match build_rlgf_pairs(
                    clues,
                    &query,
                    gold_answer,
                    &index,
                    &params,
                    &pcfg,
                    a.seed.wrapping_add(i as u64),
                )?
                .outcome
                {
                    PairOutcome::Pair(pair) => samples.push(RlgfTrainSample {
                        context: tokens,
                        prompt: encode_clue_prompt(&query),
                        pos: vocab.encode(&pair.pos.join("\n")),
                        neg: vocab.encode(&pair.neg.join("\n")),
                    }),
                    PairOutcome::Skipped(reason) => {
                        eprintln!("record {}: skipped ({reason})", i + 1);
                    }
                }
            }
            StageData::Rlgf(samples)
        }
    };
    let report = training::train(&data, &mut params, &tcfg)?;
    params.save(&a.out)?;
    let first = report.loss_trace.first().copied().unwrap_or(f64::NAN);
    let last = report.loss_trace.last().copied().unwrap_or(f64::NAN);
    println!(
        "stage {}: {} steps, loss {:.4} -> {:.4}; wrote {}",
        report.stage.name(),
        report.steps,
        first,
        last,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs, file_cfg: &FileConfig) -> Result<()> {
    let pcfg = file_cfg.pipeline();
    write_manifest("eval", &pcfg, None, &[&a.dataset, &a.checkpoint], &[])?;
    let params = load_params(&a.checkpoint)?;
    let generator = match &a.generator {
        Some(p) => Some(load_params(p)?),
        None => None,
    };
    let mut pipe = Pipeline::new(&params, pcfg);
    if let Some(g) = &generator {
        pipe = pipe.with_generator(g);
    }
    let records = read_corpus(&a.dataset)?;
    let modes: Vec<&str> = a.modes.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
    let mut out_lines = String::new();
    println!("mode           n      f1  rouge_l");
    for mode in modes {
        let mut f1s = Vec::new();
        let mut rouges = Vec::new();
        for r in &records {
            let results = pipe.run(&r.queries, &r.context, mode)?;
            let golds = r.gold_answers.as_deref().unwrap_or(&[]);
            for (res, gold) in results.iter().zip(golds) {
                f1s.push(evalbench::token_f1(&res.answer, gold));
                rouges.push(evalbench::rouge_l(&res.answer, gold));
                out_lines.push_str(&serde_json::to_string(res)?);
                out_lines.push('\n');
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        println!("{:<13} {:>3}  {:.4}   {:.4}", mode, f1s.len(), mean(&f1s), mean(&rouges));
    }
    if let Some(out) = &a.out {
        fs::write(out, out_lines)?;
    }
    Ok(())
}

fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let n = if let Some(stem) = part.strip_suffix(['k', 'K']) {
            stem.parse::<usize>().map(|v| v * 1024)
        } else {
            part.parse::<usize>()
        }
        .with_context(|| format!("bad length '{part}'"))?;
        out.push(n);
    }
    out.sort_unstable();
    Ok(out)
}

fn cmd_bench(a: BenchArgs, file_cfg: &FileConfig) -> Result<()> {
    let mut pcfg = file_cfg.pipeline();
    if let Some(b) = a.beta {
        pcfg.beta = b;
    }
    validate_beta(pcfg.beta)?;
    write_manifest("bench", &pcfg, None, &[&a.checkpoint], &[])?;
    let params = load_params(&a.checkpoint)?;
    let lengths = parse_lengths(&a.lengths)?;
    let report = evalbench::bench_efficiency(&lengths, &params, &pcfg)?;
    print!("{}", report.table());
    for row in &report.rows {
        println!("{}", serde_json::to_string(row)?);
    }
    Ok(())
}
