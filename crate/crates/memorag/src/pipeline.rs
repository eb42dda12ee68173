//! Orchestration: memory formation, clue generation, clue-guided retrieval,
//! and final answer generation, plus the standard-RAG and full-context
//! baseline modes. Each mode is a strategy behind a common trait, selected
//! by name at runtime.

use serde::Serialize;
use thiserror::Error;

use crate::memory::{self, MemoryError, MemoryState};
use crate::model::{
    forward_decode, generate, DecodeState, ModelError, Parameters, Vocab,
};
use crate::retrieval::{build_index, chunk_tokens, retrieve, EvidenceSet, Index};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("memory/context fingerprint mismatch: memory {memory:016x}, context {context:016x}")]
    ContextMismatch { memory: u64, context: u64 },
    #[error("unknown mode '{0}' (expected memorag, standard_rag, or full_context)")]
    UnknownMode(String),
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineConfig {
    pub hits: usize,
    pub chunk_max: usize,
    pub beta: usize,
    pub clue_max_tokens: usize,
    pub answer_max_tokens: usize,
    /// The "auxiliary text" prepended to the clue prompt.
    pub clue_prompt: String,
    /// The "auxiliary text" prepended to the answer prompt.
    pub answer_prompt: String,
    pub include_original_query: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            hits: crate::retrieval::DEFAULT_HITS,
            chunk_max: crate::retrieval::DEFAULT_CHUNK_MAX,
            beta: 4,
            clue_max_tokens: 16,
            answer_max_tokens: 16,
            clue_prompt: String::new(),
            answer_prompt: String::new(),
            include_original_query: true,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Clues {
    pub query: String,
    pub clue_strings: Vec<String>,
    pub raw: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Timing {
    pub memorize_ms: f64,
    pub clue_ms: f64,
    pub retrieve_ms: f64,
    pub answer_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskResult {
    pub query: String,
    pub mode: String,
    pub clues: Option<Clues>,
    pub evidence: Option<EvidenceSet>,
    pub answer: String,
    /// Set when the answer was produced without any evidence.
    pub low_confidence: bool,
    /// Set when full-context mode had to truncate the raw context.
    pub truncated: bool,
    pub timing: Timing,
}

/// Generates draft answer clues from the global memory, conditioned only on
/// the memory KV, the clue prompt, and the query.
pub fn generate_clues(
    q: &str,
    mem: &MemoryState,
    params: &Parameters,
    config: &PipelineConfig,
) -> Result<Clues, PipelineError> {
    let fp = params.fingerprint();
    if fp != mem.params_fingerprint {
        return Err(PipelineError::Model(ModelError::FingerprintMismatch {
            expected: mem.params_fingerprint,
            got: fp,
        }));
    }
    let vocab = Vocab::builtin();
    let mut prompt = vec![vocab.clue_marker()];
    prompt.extend(vocab.encode(&config.clue_prompt));
    prompt.extend(vocab.encode(q));
    prompt.push(vocab.sep());
    let mut state = DecodeState::from_compact(&mem.cache, params);
    let logits = forward_decode(&prompt, &mut state, params)?;
    let out = generate(
        &mut state,
        params,
        logits.last().expect("non-empty prompt"),
        config.clue_max_tokens,
        vocab.eos(),
    )?;
    let raw = vocab.decode(&out);
    let clue_strings: Vec<String> =
        raw.split('\n').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    let clue_strings =
        if clue_strings.is_empty() { vec![q.to_string()] } else { clue_strings };
    Ok(Clues { query: q.to_string(), clue_strings, raw })
}

/// Generates the final answer from the evidence text, greedy and
/// deterministic. Empty evidence still answers, flagged low-confidence.
pub fn answer(
    q: &str,
    evidence: &EvidenceSet,
    generator: &Parameters,
    config: &PipelineConfig,
) -> Result<(String, bool), PipelineError> {
    let vocab = Vocab::builtin();
    let mut prompt = vec![vocab.ans_marker()];
    prompt.extend(vocab.encode(&config.answer_prompt));
    prompt.extend(vocab.encode(&evidence.text));
    prompt.push(vocab.sep());
    prompt.extend(vocab.encode(q));
    prompt.push(vocab.sep());
    let mut state = DecodeState::fresh(generator);
    let logits = forward_decode(&prompt, &mut state, generator)?;
    let out = generate(
        &mut state,
        generator,
        logits.last().expect("non-empty prompt"),
        config.answer_max_tokens,
        vocab.eos(),
    )?;
    let text = vocab.decode(&out).trim().to_string();
    Ok((text, evidence.hits.is_empty()))
}

/// Context artifacts prepared once per (context, mode) and shared across
/// queries.
pub struct PreparedContext {
    pub tokens: Vec<usize>,
    pub index: Option<Index>,
    pub memory: Option<MemoryState>,
    pub truncated: bool,
    pub memorize_ms: f64,
}

/// One retrieval-and-generation mode. Strategies are stateless; all
/// per-context state lives in `PreparedContext`.
pub trait ModeStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn prepare(
        &self,
        tokens: Vec<usize>,
        params: &Parameters,
        config: &PipelineConfig,
    ) -> Result<PreparedContext, PipelineError>;
    fn run_query(
        &self,
        q: &str,
        ctx: &PreparedContext,
        params: &Parameters,
        generator: &Parameters,
        config: &PipelineConfig,
    ) -> Result<TaskResult, PipelineError>;
}

struct MemoRagMode;
struct StandardRagMode;
struct FullContextMode;

fn build_ctx_index(tokens: &[usize], config: &PipelineConfig) -> Index {
    build_index(chunk_tokens(tokens, config.chunk_max, Vocab::builtin()))
}

impl ModeStrategy for MemoRagMode {
    fn name(&self) -> &'static str {
        "memorag"
    }

    fn prepare(
        &self,
        tokens: Vec<usize>,
        params: &Parameters,
        config: &PipelineConfig,
    ) -> Result<PreparedContext, PipelineError> {
        let index = build_ctx_index(&tokens, config);
        let (mem, memorize_ms) =
            crate::evalbench::time_ms(|| memory::memorize(&tokens, params, config.beta));
        Ok(PreparedContext {
            tokens,
            index: Some(index),
            memory: Some(mem?),
            truncated: false,
            memorize_ms,
        })
    }

    fn run_query(
        &self,
        q: &str,
        ctx: &PreparedContext,
        params: &Parameters,
        generator: &Parameters,
        config: &PipelineConfig,
    ) -> Result<TaskResult, PipelineError> {
        let mem = ctx.memory.as_ref().expect("memorag prepared without memory");
        let index = ctx.index.as_ref().expect("memorag prepared without index");
        let (clues, clue_ms) =
            crate::evalbench::time_ms(|| generate_clues(q, mem, params, config));
        let clues = clues?;
        let mut queries = clues.clue_strings.clone();
        if config.include_original_query {
            queries.push(q.to_string());
        }
        let (evidence, retrieve_ms) =
            crate::evalbench::time_ms(|| retrieve(&queries, index, config.hits));
        let (ans, answer_ms) =
            crate::evalbench::time_ms(|| answer(q, &evidence, generator, config));
        let (text, low_confidence) = ans?;
        Ok(TaskResult {
            query: q.to_string(),
            mode: self.name().into(),
            clues: Some(clues),
            evidence: Some(evidence),
            answer: text,
            low_confidence,
            truncated: false,
            timing: Timing { memorize_ms: ctx.memorize_ms, clue_ms, retrieve_ms, answer_ms },
        })
    }
}

impl ModeStrategy for StandardRagMode {
    fn name(&self) -> &'static str {
        "standard_rag"
    }

    fn prepare(
        &self,
        tokens: Vec<usize>,
        _params: &Parameters,
        config: &PipelineConfig,
    ) -> Result<PreparedContext, PipelineError> {
        let (index, memorize_ms) = crate::evalbench::time_ms(|| build_ctx_index(&tokens, config));
        Ok(PreparedContext {
            tokens,
            index: Some(index),
            memory: None,
            truncated: false,
            memorize_ms,
        })
    }

    fn run_query(
        &self,
        q: &str,
        ctx: &PreparedContext,
        _params: &Parameters,
        generator: &Parameters,
        config: &PipelineConfig,
    ) -> Result<TaskResult, PipelineError> {
        let index = ctx.index.as_ref().expect("standard_rag prepared without index");
        let (evidence, retrieve_ms) =
            crate::evalbench::time_ms(|| retrieve(&[q.to_string()], index, config.hits));
        let (ans, answer_ms) =
            crate::evalbench::time_ms(|| answer(q, &evidence, generator, config));
        let (text, low_confidence) = ans?;
        Ok(TaskResult {
            query: q.to_string(),
            mode: self.name().into(),
            clues: None,
            evidence: Some(evidence),
            answer: text,
            low_confidence,
            truncated: false,
            timing: Timing {
                memorize_ms: ctx.memorize_ms,
                clue_ms: 0.0,
                retrieve_ms,
                answer_ms,
            },
        })
    }
}

impl ModeStrategy for FullContextMode {
    fn name(&self) -> &'static str {
        "full_context"
    }

    fn prepare(
        &self,
        tokens: Vec<usize>,
        generator: &Parameters,
        config: &PipelineConfig,
    ) -> Result<PreparedContext, PipelineError> {
        // Reserve room for the prompt scaffolding and the query.
        let budget = generator
            .config
            .max_seq
            .saturating_sub(config.answer_max_tokens + 32);
        let truncated = tokens.len() > budget;
        let tokens = if truncated { tokens[..budget].to_vec() } else { tokens };
        Ok(PreparedContext { tokens, index: None, memory: None, truncated, memorize_ms: 0.0 })
    }

    fn run_query(
        &self,
        q: &str,
        ctx: &PreparedContext,
        _params: &Parameters,
        generator: &Parameters,
        config: &PipelineConfig,
    ) -> Result<TaskResult, PipelineError> {
        let vocab = Vocab::builtin();
        let evidence = EvidenceSet { hits: Vec::new(), text: vocab.decode(&ctx.tokens) };
        let (ans, answer_ms) =
            crate::evalbench::time_ms(|| answer(q, &evidence, generator, config));
        let (text, _) = ans?;
        Ok(TaskResult {
            query: q.to_string(),
            mode: self.name().into(),
            clues: None,
            evidence: None,
            answer: text,
            low_confidence: false,
            truncated: ctx.truncated,
            timing: Timing {
                memorize_ms: 0.0,
                clue_ms: 0.0,
                retrieve_ms: 0.0,
                answer_ms,
            },
        })
    }
}

/// Mode registry: strategies selected by name.
pub fn strategy(name: &str) -> Result<&'static dyn ModeStrategy, PipelineError> {
    static MEMORAG: MemoRagMode = MemoRagMode;
    static STANDARD: StandardRagMode = StandardRagMode;
    static FULL: FullContextMode = FullContextMode;
    match name {
        "memorag" => Ok(&MEMORAG),
        "standard_rag" => Ok(&STANDARD),
        "full_context" | "full" => Ok(&FULL),
        other => Err(PipelineError::UnknownMode(other.into())),
    }
}

pub fn mode_names() -> [&'static str; 3] {
    ["memorag", "standard_rag", "full_context"]
}

pub struct Pipeline<'a> {
    pub params: &'a Parameters,
    /// Final-answer generator; by default the memory model's own base.
    pub generator: &'a Parameters,
    pub config: PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(params: &'a Parameters, config: PipelineConfig) -> Self {
        Pipeline { params, generator: params, config }
    }

    pub fn with_generator(mut self, generator: &'a Parameters) -> Self {
        self.generator = generator;
        self
    }

    /// Prepares the context once (memory formed once per context in memorag
    /// mode) and runs every query against the shared prepared state.
    pub fn run(
        &self,
        queries: &[String],
        context: &str,
        mode: &str,
    ) -> Result<Vec<TaskResult>, PipelineError> {
        let strat = strategy(mode)?;
        let tokens = Vocab::builtin().encode(context);
        let prep_params =
            if mode == "full_context" || mode == "full" { self.generator } else { self.params };
        let ctx = strat.prepare(tokens, prep_params, &self.config)?;
        self.run_prepared(queries, strat, &ctx)
    }

    /// Runs memorag mode against a previously formed (possibly reloaded)
    /// memory. The memory's fingerprints must match the params and context.
    pub fn run_with_memory(
        &self,
        queries: &[String],
        context: &str,
        mem: MemoryState,
    ) -> Result<Vec<TaskResult>, PipelineError> {
        let tokens = Vocab::builtin().encode(context);
        let ctx_fp = memory::context_fingerprint(&tokens);
        if ctx_fp != mem.context_fingerprint {
            return Err(PipelineError::ContextMismatch {
                memory: mem.context_fingerprint,
                context: ctx_fp,
            });
        }
        let index = build_ctx_index(&tokens, &self.config);
        let ctx = PreparedContext {
            tokens,
            index: Some(index),
            memory: Some(mem),
            truncated: false,
            memorize_ms: 0.0,
        };
        self.run_prepared(queries, strategy("memorag")?, &ctx)
    }

    fn run_prepared(
        &self,
        queries: &[String],
        strat: &dyn ModeStrategy,
        ctx: &PreparedContext,
    ) -> Result<Vec<TaskResult>, PipelineError> {
        queries
            .iter()
            .map(|q| strat.run_query(q, ctx, self.params, self.generator, &self.config))
            .collect()
    }
}
