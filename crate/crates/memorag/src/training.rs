//! Three-stage memory-model optimization: next-token pretraining over
//! compact memory, supervised fine-tuning on gold clues, and preference
//! alignment over clue sets, plus preference-pair construction.
//!
//! Only memory-side parameters (memory projections and memory-token
//! embeddings) train by default; the base transformer stays frozen.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{Tape, Var};
use crate::model::{
    BindMode, LayerCacheVars, ModelConfig, ModelError, ParamVars, Parameters, BETA_SET,
};
use crate::pipeline::{answer, PipelineConfig, PipelineError};
use crate::retrieval::{retrieve, Index};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("bad training data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Sft,
    Rlgf,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "pretrain" => Some(Stage::Pretrain),
            "sft" => Some(Stage::Sft),
            "rlgf" => Some(Stage::Rlgf),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Rlgf => "rlgf",
        }
    }
}

pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Which weights receive updates; memory-side only unless preparing
    /// fixtures.
    pub bind: BindMode,
    /// Pretraining samples a compression ratio per window from this set,
    /// filtered to ratios the model config supports.
    pub beta_set: Vec<usize>,
}

impl TrainConfig {
    pub fn pretrain(seed: u64) -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            lr: 5e-5,
            batch_size: 8,
            epochs: 1,
            seed,
            bind: BindMode::MemoryTrainable,
            beta_set: BETA_SET.to_vec(),
        }
    }

    pub fn sft(seed: u64) -> Self {
        TrainConfig {
            stage: Stage::Sft,
            lr: 1e-5,
            batch_size: 8,
            epochs: 2,
            seed,
            bind: BindMode::MemoryTrainable,
            beta_set: BETA_SET.to_vec(),
        }
    }

    pub fn rlgf(seed: u64) -> Self {
        TrainConfig { stage: Stage::Rlgf, epochs: 1, ..TrainConfig::sft(seed) }
    }
}

/// One pretraining sequence; must span at least two memory windows so the
/// loss exercises memory conditioning.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub seqs: Vec<Vec<usize>>,
}

/// Supervised sample: memory is formed over `context`, then the model is
/// scored on `gold` after the (marker-wrapped) `prompt`.
#[derive(Clone, Debug)]
pub struct SftSample {
    pub context: Vec<usize>,
    pub prompt: Vec<usize>,
    pub gold: Vec<usize>,
}

/// Preference sample for margin training: preferred and rejected clue token
/// sequences under a shared context and prompt.
#[derive(Clone, Debug)]
pub struct RlgfTrainSample {
    pub context: Vec<usize>,
    pub prompt: Vec<usize>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
}

/// A constructed preference pair with its end-to-end rewards.
#[derive(Clone, Debug)]
pub struct RlgfPair {
    pub query: String,
    pub pos: Vec<String>,
    pub neg: Vec<String>,
    pub r_pos: f64,
    pub r_neg: f64,
}

pub enum PairOutcome {
    Pair(RlgfPair),
    /// Sample unusable; the reason is recorded for the run log.
    Skipped(String),
}

/// Pair-construction result plus how many clue subsets were scored.
pub struct PairReport {
    pub outcome: PairOutcome,
    pub n_evaluated: usize,
}

/// Every bound weight with its checkpoint name and memory-side flag, in
/// checkpoint declaration order.
pub fn named_vars(pv: &ParamVars) -> Vec<(String, Var, bool)> {
    let mut out: Vec<(String, Var, bool)> = Vec::new();
    out.push(("token_embeddings".into(), pv.token_emb, false));
    if let Some(m) = pv.mem_emb {
        out.push(("mem_token_embeddings".into(), m, true));
    }
    for (i, l) in pv.layers.iter().enumerate() {
        out.push((format!("layer{i}.w_q"), l.w_q, false));
        out.push((format!("layer{i}.w_k"), l.w_k, false));
        out.push((format!("layer{i}.w_v"), l.w_v, false));
        out.push((format!("layer{i}.w_o"), l.w_o, false));
        out.push((format!("layer{i}.w_ff1"), l.w_ff1, false));
        out.push((format!("layer{i}.w_ff2"), l.w_ff2, false));
        if let Some(t) = l.w_qm {
            out.push((format!("layer{i}.w_qm"), t, true));
        }
        if let Some(t) = l.w_km {
            out.push((format!("layer{i}.w_km"), t, true));
        }
        if let Some(t) = l.w_vm {
            out.push((format!("layer{i}.w_vm"), t, true));
        }
    }
    out
}

fn updatable(mode: BindMode, memory_side: bool) -> bool {
    match mode {
        BindMode::AllFrozen => false,
        BindMode::MemoryTrainable => memory_side,
        BindMode::AllTrainable => true,
    }
}

fn check_ids(tokens: &[usize], config: &ModelConfig) -> Result<(), TrainError> {
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(TrainError::Model(ModelError::UnknownToken(t)));
    }
    Ok(())
}

/// Compression ratios usable with this model config: they must divide the
/// window and fit within the memory-token embedding table.
pub fn supported_betas(config: &ModelConfig, set: &[usize]) -> Vec<usize> {
    set.iter()
        .copied()
        .filter(|&b| config.window_l % b == 0 && config.window_l / b <= config.mem_k)
        .collect()
}

/// Forms compact memory over full windows on the live tape so gradients
/// flow through formation; returns per-layer cache vars, the next position
/// id, and any trailing partial-window tokens.
fn form_memory_vars<'a>(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    tokens: &'a [usize],
    mem_k: usize,
) -> (Vec<LayerCacheVars>, usize, &'a [usize]) {
    let n_full = tokens.len() / config.window_l * config.window_l;
    let mut cache: Vec<LayerCacheVars> = vec![None; config.n_layers];
    let mut pos_next = 0;
    for window in tokens[..n_full].chunks(config.window_l) {
        let out = crate::model::segment_forward(tape, pv, config, window, mem_k, pos_next, &cache);
        for (li, &(km, vm)) in out.mem_kv.iter().enumerate() {
            cache[li] = Some(match cache[li] {
                Some((ck, cv)) => (tape.concat_rows(&[ck, km]), tape.concat_rows(&[cv, vm])),
                None => (km, vm),
            });
        }
        pos_next += window.len() + mem_k;
    }
    (cache, pos_next, &tokens[n_full..])
}

/// Mean next-token negative log-likelihood over the whole sequence; each
/// token conditions on the accumulated memory cache plus its window prefix.
/// `window_betas` gives the compression ratio per window.
pub fn loss_pretrain(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    tokens: &[usize],
    window_betas: &[usize],
) -> Result<Var, TrainError> {
    if !config.mem_enabled {
        return Err(TrainError::Data("pretraining requires memory mode".into()));
    }
    if tokens.len() < 2 {
        return Err(TrainError::Data("pretraining sequence shorter than 2 tokens".into()));
    }
    check_ids(tokens, config)?;
    let n_windows = tokens.len().div_ceil(config.window_l);
    if window_betas.len() != n_windows {
        return Err(TrainError::Data(format!(
            "expected {n_windows} window ratios, got {}",
            window_betas.len()
        )));
    }
    let mut cache: Vec<LayerCacheVars> = vec![None; config.n_layers];
    let mut pos_next = 0;
    let mut terms: Vec<(Var, usize)> = Vec::new();
    for (w, window) in tokens.chunks(config.window_l).enumerate() {
        let beta = window_betas[w];
        if config.window_l % beta != 0 || config.window_l / beta > config.mem_k {
            return Err(TrainError::Data(format!("unsupported ratio {beta} for this model")));
        }
        let mem_k = config.window_l / beta;
        let start = w * config.window_l;
        let out = crate::model::segment_forward(tape, pv, config, window, mem_k, pos_next, &cache);
        // Row i predicts the token at global position start+i+1.
        let n_targets = window.len().min(tokens.len() - start - 1);
        if n_targets > 0 {
            let targets: Vec<usize> = tokens[start + 1..start + 1 + n_targets].to_vec();
            let rows = if n_targets == window.len() {
                out.logits
            } else {
                tape.slice_rows(out.logits, 0, n_targets)
            };
            terms.push((tape.cross_entropy_rows(rows, &targets), n_targets));
        }
        for (li, &(km, vm)) in out.mem_kv.iter().enumerate() {
            cache[li] = Some(match cache[li] {
                Some((ck, cv)) => (tape.concat_rows(&[ck, km]), tape.concat_rows(&[cv, vm])),
                None => (km, vm),
            });
        }
        pos_next += window.len() + mem_k;
    }
    let total: usize = terms.iter().map(|&(_, n)| n).sum();
    let mut acc: Option<Var> = None;
    for (ce, n) in terms {
        let scaled = tape.scale(ce, n as f64 / total as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled),
            None => scaled,
        });
    }
    Ok(acc.expect("at least one loss term"))
}

/// Cross-entropy over the gold clue tokens only, conditioned on the memory
/// formed over the sample context plus the prompt.
pub fn loss_sft(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    sample: &SftSample,
) -> Result<Var, TrainError> {
    if sample.gold.is_empty() {
        return Err(TrainError::Data("empty gold output".into()));
    }
    if !config.mem_enabled {
        return Err(TrainError::Data("fine-tuning requires memory mode".into()));
    }
    check_ids(&sample.context, config)?;
    check_ids(&sample.prompt, config)?;
    check_ids(&sample.gold, config)?;
    let (cache, pos_next, leftover) =
        form_memory_vars(tape, pv, config, &sample.context, config.mem_k);
    let mut seg: Vec<usize> = leftover.to_vec();
    seg.extend_from_slice(&sample.prompt);
    let prefix = seg.len();
    if prefix == 0 {
        return Err(TrainError::Data("empty prompt".into()));
    }
    seg.extend_from_slice(&sample.gold);
    let out = crate::model::segment_forward(tape, pv, config, &seg, 0, pos_next, &cache);
    // Rows prefix-1 .. prefix-1+|gold| predict the gold tokens.
    let rows = tape.slice_rows(out.logits, prefix - 1, prefix - 1 + sample.gold.len());
    Ok(tape.cross_entropy_rows(rows, &sample.gold))
}

/// Exact hinge loss on a pair of scalar rewards.
pub fn rlgf_hinge(r_pos: f64, r_neg: f64) -> f64 {
    (1.0 - r_pos + r_neg).max(0.0)
}

/// Batched hinge over reward pairs. Rewards must be finite.
pub fn loss_rlgf(pairs: &[(f64, f64)]) -> Result<f64, TrainError> {
    if let Some(&(a, b)) = pairs.iter().find(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(TrainError::Numeric(format!("non-finite reward pair ({a}, {b})")));
    }
    Ok(pairs.iter().map(|&(a, b)| rlgf_hinge(a, b)).sum())
}

/// Differentiable preference objective: hinge on the gap between the
/// length-normalized log-likelihoods of the preferred and rejected clue
/// sequences. Rewards steer pair construction only; they do not enter this
/// loss.
pub fn loss_rlgf_margin(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    sample: &RlgfTrainSample,
) -> Result<Var, TrainError> {
    if sample.pos.is_empty() || sample.neg.is_empty() {
        return Err(TrainError::Data("empty preference sequence".into()));
    }
    if !config.mem_enabled {
        return Err(TrainError::Data("preference training requires memory mode".into()));
    }
    check_ids(&sample.context, config)?;
    check_ids(&sample.prompt, config)?;
    check_ids(&sample.pos, config)?;
    check_ids(&sample.neg, config)?;
    let (cache, pos_next, leftover) =
        form_memory_vars(tape, pv, config, &sample.context, config.mem_k);
    let ce = |tape: &mut Tape, y: &[usize]| -> Result<Var, TrainError> {
        let mut seg: Vec<usize> = leftover.to_vec();
        seg.extend_from_slice(&sample.prompt);
        let prefix = seg.len();
        if prefix == 0 {
            return Err(TrainError::Data("empty prompt".into()));
        }
        seg.extend_from_slice(y);
        let out = crate::model::segment_forward(tape, pv, config, &seg, 0, pos_next, &cache);
        let rows = tape.slice_rows(out.logits, prefix - 1, prefix - 1 + y.len());
        Ok(tape.cross_entropy_rows(rows, y))
    };
    let ce_pos = ce(tape, &sample.pos)?;
    let ce_neg = ce(tape, &sample.neg)?;
    // 1 - ll(pos) + ll(neg) = 1 + ce_pos - ce_neg, clamped at zero.
    let gap = tape.sub(ce_pos, ce_neg);
    let shifted = tape.add_scalar(gap, 1.0);
    Ok(tape.relu(shifted))
}

/// Enumeration cap: above this many clues, subsets blow up and we
/// down-sample clues first.
pub const MAX_PAIR_CLUES: usize = 10;

/// Builds one preference pair by exhaustively scoring every clue subset of
/// size >= 3 through retrieve-then-answer, rewarding with token F1 against
/// the gold answer. Deterministic; ties between subsets break toward the
/// lexicographically smallest index tuple.
#[allow(clippy::too_many_arguments)]
pub fn build_rlgf_pairs(
    clues: &[String],
    query: &str,
    gold_answer: &str,
    index: &Index,
    generator: &Parameters,
    pcfg: &PipelineConfig,
    seed: u64,
) -> Result<PairReport, TrainError> {
    if clues.len() < 5 {
        return Ok(PairReport {
            outcome: PairOutcome::Skipped(format!(
                "needs at least 5 candidate clues, got {}",
                clues.len()
            )),
            n_evaluated: 0,
        });
    }
    let clues: Vec<String> = if clues.len() > MAX_PAIR_CLUES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..clues.len()).collect();
        idx.shuffle(&mut rng);
        let mut keep: Vec<usize> = idx.into_iter().take(MAX_PAIR_CLUES).collect();
        keep.sort_unstable();
        keep.into_iter().map(|i| clues[i].clone()).collect()
    } else {
        clues.to_vec()
    };
    let n = clues.len();
    let mut scored: Vec<(Vec<usize>, f64)> = Vec::new();
    for mask in 1u32..(1 << n) {
        if mask.count_ones() < 3 {
            continue;
        }
        let subset: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let mut queries: Vec<String> = subset.iter().map(|&i| clues[i].clone()).collect();
        if pcfg.include_original_query {
            queries.push(query.to_string());
        }
        let evidence = retrieve(&queries, index, pcfg.hits);
        let (text, _) = answer(query, &evidence, generator, pcfg)?;
        let reward = crate::evalbench::token_f1(&text, gold_answer);
        scored.push((subset, reward));
    }
    let best = scored
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| b.0.cmp(&a.0)))
        .expect("non-empty subset list");
    let worst = scored
        .iter()
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| b.0.cmp(&a.0)))
        .expect("non-empty subset list");
    let n_evaluated = scored.len();
    if best.1 == worst.1 {
        return Ok(PairReport {
            outcome: PairOutcome::Skipped("all subsets score equally".into()),
            n_evaluated,
        });
    }
    Ok(PairReport {
        outcome: PairOutcome::Pair(RlgfPair {
            query: query.to_string(),
            pos: best.0.iter().map(|&i| clues[i].clone()).collect(),
            neg: worst.0.iter().map(|&i| clues[i].clone()).collect(),
            r_pos: best.1,
            r_neg: worst.1,
        }),
        n_evaluated,
    })
}

/// Data for one training stage.
pub enum StageData {
    Pretrain(PretrainBatch),
    Sft(Vec<SftSample>),
    Rlgf(Vec<RlgfTrainSample>),
}

impl StageData {
    fn len(&self) -> usize {
        match self {
            StageData::Pretrain(b) => b.seqs.len(),
            StageData::Sft(s) => s.len(),
            StageData::Rlgf(s) => s.len(),
        }
    }

    fn stage(&self) -> Stage {
        match self {
            StageData::Pretrain(_) => Stage::Pretrain,
            StageData::Sft(_) => Stage::Sft,
            StageData::Rlgf(_) => Stage::Rlgf,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub stage: Stage,
    pub steps: usize,
    /// Mean batch loss per optimization step.
    pub loss_trace: Vec<f64>,
}

/// Gradient descent with momentum over the unfrozen weights. Deterministic
/// given the seed; aborts on non-finite loss.
pub fn train(
    data: &StageData,
    params: &mut Parameters,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if data.stage() != config.stage {
        return Err(TrainError::Data(format!(
            "stage mismatch: data is {}, config is {}",
            data.stage().name(),
            config.stage.name()
        )));
    }
    if data.len() == 0 {
        return Err(TrainError::Data("empty training data".into()));
    }
    let betas = supported_betas(&params.config, &config.beta_set);
    if matches!(data, StageData::Pretrain(_)) && betas.is_empty() {
        return Err(TrainError::Data("no supported compression ratio for this model".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity: HashMap<String, Vec<f64>> = HashMap::new();
    let mut trace = Vec::new();
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
            let mut batch_loss = 0.0;
            for &si in batch {
                let mut tape = Tape::new();
                let pv = ParamVars::bind(&mut tape, params, config.bind);
                let loss = match data {
                    StageData::Pretrain(b) => {
                        let seq = &b.seqs[si];
                        let n_windows = seq.len().div_ceil(params.config.window_l).max(1);
                        let wb: Vec<usize> =
                            (0..n_windows).map(|_| betas[rng.gen_range(0..betas.len())]).collect();
                        loss_pretrain(&mut tape, &pv, &params.config, seq, &wb)?
                    }
                    StageData::Sft(s) => loss_sft(&mut tape, &pv, &params.config, &s[si])?,
                    StageData::Rlgf(s) => {
                        loss_rlgf_margin(&mut tape, &pv, &params.config, &s[si])?
                    }
                };
                let val = tape.value(loss).values[0];
                if !val.is_finite() {
                    return Err(TrainError::Numeric(format!(
                        "loss {val} at step {} of stage {} (sample {si})",
                        trace.len(),
                        config.stage.name()
                    )));
                }
                batch_loss += val;
                tape.backward(loss);
                for (name, var, memory_side) in named_vars(&pv) {
                    if !updatable(config.bind, memory_side) {
                        continue;
                    }
                    let g = tape.grad(var);
                    let slot =
                        grads.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                    for (s, &gi) in slot.iter_mut().zip(g) {
                        *s += gi;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (name, tensor, _) in params.tensors_mut() {
                let Some(g) = grads.get(&name) else { continue };
                let vel = velocity.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for ((w, v), &gi) in tensor.values.iter_mut().zip(vel.iter_mut()).zip(g) {
                    *v = MOMENTUM * *v + gi * scale;
                    *w -= config.lr * *v;
                }
            }
            trace.push(batch_loss * scale);
        }
    }
    Ok(TrainReport { stage: config.stage, steps: trace.len(), loss_trace: trace })
}
