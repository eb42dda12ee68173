//! Inference wrappers: light/compact prefill, cached decode, greedy decoding.

use crate::diffcore::{Tape, Tensor};

use super::config::ModelConfig;
use super::forward::{quantize_f32, segment_forward, BindMode, ParamVars};
use super::params::Parameters;
use super::ModelError;

/// Per-layer keys/values, row-major `len x d_model` (heads concatenated).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

/// Full regular-token KV cache (light mode).
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerKv>,
    pub len: usize,
}

impl KvCache {
    fn empty(n_layers: usize) -> Self {
        KvCache { layers: vec![LayerKv { k: Vec::new(), v: Vec::new() }; n_layers], len: 0 }
    }
}

/// Compact memory cache: per-layer memory-token KV only, regular KV discarded.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactCache {
    pub mem: Vec<LayerKv>,
    /// Memory entries per layer.
    pub mem_len: usize,
    /// Raw context tokens processed so far.
    pub n_raw: usize,
    /// Next position id in the interleaved stream.
    pub pos_next: usize,
    /// Memory tokens appended per window for this formation.
    pub mem_k: usize,
}

impl CompactCache {
    pub fn empty(config: &ModelConfig, mem_k: usize) -> Self {
        CompactCache {
            mem: vec![LayerKv { k: Vec::new(), v: Vec::new() }; config.n_layers],
            mem_len: 0,
            n_raw: 0,
            pos_next: 0,
            mem_k,
        }
    }
}

fn check_tokens(tokens: &[usize], config: &ModelConfig) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::UnknownToken(t));
    }
    Ok(())
}

fn extract_matrix(tape: &Tape, v: crate::diffcore::Var) -> Vec<f64> {
    tape.value(v).values.clone()
}

fn cache_vars(
    tape: &mut Tape,
    layers: &[LayerKv],
    len: usize,
    d: usize,
) -> Vec<super::forward::LayerCacheVars> {
    layers
        .iter()
        .map(|l| {
            if len == 0 {
                None
            } else {
                let k = tape.constant(Tensor::new(vec![len, d], l.k.clone()));
                let v = tape.constant(Tensor::new(vec![len, d], l.v.clone()));
                Some((k, v))
            }
        })
        .collect()
}

/// Light-mode prefill: one causal pass, full KV retained.
pub fn forward_prefill_light(
    tokens: &[usize],
    params: &Parameters,
) -> Result<(Vec<Vec<f64>>, KvCache), ModelError> {
    let config = &params.config;
    check_tokens(tokens, config)?;
    if tokens.len() > config.max_seq {
        return Err(ModelError::Capacity { len: tokens.len(), max: config.max_seq });
    }
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, BindMode::AllFrozen);
    let empty: Vec<super::forward::LayerCacheVars> = vec![None; config.n_layers];
    let out = segment_forward(&mut tape, &pv, config, tokens, 0, 0, &empty);
    let logits = split_rows(tape.value(out.logits));
    let mut cache = KvCache::empty(config.n_layers);
    for (li, (k, v)) in out.reg_kv.iter().enumerate() {
        cache.layers[li].k = extract_matrix(&tape, *k);
        cache.layers[li].v = extract_matrix(&tape, *v);
    }
    cache.len = tokens.len();
    Ok((logits, cache))
}

/// Compact-mode prefill: window-by-window; after each window the k memory
/// tokens' KV are kept (quantized to on-disk precision) and regular KV is
/// discarded. A partial final window still appends all k memory tokens.
pub fn forward_prefill_compact(
    tokens: &[usize],
    params: &Parameters,
    mem_k: usize,
) -> Result<(Vec<Vec<f64>>, CompactCache), ModelError> {
    let mut cache = CompactCache::empty(&params.config, mem_k);
    let logits = compact_extend(&mut cache, tokens, params)?;
    Ok((logits, cache))
}

/// Continues compact formation; prior content must end on a window boundary.
pub fn compact_extend(
    cache: &mut CompactCache,
    tokens: &[usize],
    params: &Parameters,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let config = &params.config;
    check_tokens(tokens, config)?;
    if !config.mem_enabled {
        return Err(ModelError::Config("compact prefill requires memory mode".into()));
    }
    let mem_k = cache.mem_k;
    if mem_k == 0 || mem_k > config.mem_k || config.window_l % mem_k != 0 {
        return Err(ModelError::Config(format!(
            "mem_k {mem_k} invalid for window_l {} (model supports up to {})",
            config.window_l, config.mem_k
        )));
    }
    if cache.n_raw % config.window_l != 0 {
        return Err(ModelError::Config(
            "compact continuation requires a window-aligned prefix".into(),
        ));
    }
    let d = config.d_model;
    let mut all_logits = Vec::with_capacity(tokens.len());
    for window in tokens.chunks(config.window_l) {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, params, BindMode::AllFrozen);
        let cvars = cache_vars(&mut tape, &cache.mem, cache.mem_len, d);
        let out = segment_forward(&mut tape, &pv, config, window, mem_k, cache.pos_next, &cvars);
        all_logits.extend(split_rows(tape.value(out.logits)));
        for (li, (km, vm)) in out.mem_kv.iter().enumerate() {
            let kvals: Vec<f64> =
                extract_matrix(&tape, *km).into_iter().map(quantize_f32).collect();
            let vvals: Vec<f64> =
                extract_matrix(&tape, *vm).into_iter().map(quantize_f32).collect();
            cache.mem[li].k.extend_from_slice(&kvals);
            cache.mem[li].v.extend_from_slice(&vvals);
        }
        cache.mem_len += mem_k;
        cache.n_raw += window.len();
        cache.pos_next += window.len() + mem_k;
    }
    Ok(all_logits)
}

/// A decode session: a fixed front block (compact memory, if any) plus an
/// append-only working cache of regular-token KV.
#[derive(Clone, Debug)]
pub struct DecodeState {
    mem: Option<Vec<LayerKv>>,
    mem_len: usize,
    work: Vec<LayerKv>,
    work_len: usize,
    pos_next: usize,
    params_fingerprint: u64,
}

impl DecodeState {
    pub fn from_light(cache: KvCache, params: &Parameters) -> Self {
        let len = cache.len;
        DecodeState {
            mem: None,
            mem_len: 0,
            work: cache.layers,
            work_len: len,
            pos_next: len,
            params_fingerprint: params.fingerprint(),
        }
    }

    pub fn from_compact(cache: &CompactCache, params: &Parameters) -> Self {
        DecodeState {
            mem: Some(cache.mem.clone()),
            mem_len: cache.mem_len,
            work: vec![
                LayerKv { k: Vec::new(), v: Vec::new() };
                params.config.n_layers
            ],
            work_len: 0,
            pos_next: cache.pos_next,
            params_fingerprint: params.fingerprint(),
        }
    }

    pub fn fresh(params: &Parameters) -> Self {
        DecodeState {
            mem: None,
            mem_len: 0,
            work: vec![LayerKv { k: Vec::new(), v: Vec::new() }; params.config.n_layers],
            work_len: 0,
            pos_next: 0,
            params_fingerprint: params.fingerprint(),
        }
    }

    pub fn working_len(&self) -> usize {
        self.work_len
    }

    fn check(&self, params: &Parameters) -> Result<(), ModelError> {
        let fp = params.fingerprint();
        if fp != self.params_fingerprint {
            return Err(ModelError::FingerprintMismatch {
                expected: self.params_fingerprint,
                got: fp,
            });
        }
        Ok(())
    }
}

/// Processes one or more tokens against the session cache, appending their
/// regular KV; returns logits per fed position.
pub fn forward_decode(
    tokens: &[usize],
    state: &mut DecodeState,
    params: &Parameters,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let config = &params.config;
    check_tokens(tokens, config)?;
    state.check(params)?;
    if state.work_len + tokens.len() > config.max_seq {
        return Err(ModelError::Capacity {
            len: state.work_len + tokens.len(),
            max: config.max_seq,
        });
    }
    let d = config.d_model;
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, BindMode::AllFrozen);
    // Front block (memory) and working cache are one contiguous cache.
    let merged: Vec<LayerKv> = (0..config.n_layers)
        .map(|li| {
            let mut k = Vec::new();
            let mut v = Vec::new();
            if let Some(mem) = &state.mem {
                k.extend_from_slice(&mem[li].k);
                v.extend_from_slice(&mem[li].v);
            }
            k.extend_from_slice(&state.work[li].k);
            v.extend_from_slice(&state.work[li].v);
            LayerKv { k, v }
        })
        .collect();
    let cache_len = state.mem_len + state.work_len;
    let cvars = cache_vars(&mut tape, &merged, cache_len, d);
    let out = segment_forward(&mut tape, &pv, config, tokens, 0, state.pos_next, &cvars);
    for (li, (k, v)) in out.reg_kv.iter().enumerate() {
        state.work[li].k.extend_from_slice(&extract_matrix(&tape, *k));
        state.work[li].v.extend_from_slice(&extract_matrix(&tape, *v));
    }
    state.work_len += tokens.len();
    state.pos_next += tokens.len();
    Ok(split_rows(tape.value(out.logits)))
}

/// Greedy decoding: argmax with ties broken by lowest token id; stops at
/// `stop_token` or after `max_new` tokens.
pub fn generate(
    state: &mut DecodeState,
    params: &Parameters,
    first_logits: &[f64],
    max_new: usize,
    stop_token: usize,
) -> Result<Vec<usize>, ModelError> {
    assert!(max_new >= 1, "max_new must be at least 1");
    let mut out = Vec::new();
    let mut logits = first_logits.to_vec();
    for _ in 0..max_new {
        let next = argmax(&logits);
        out.push(next);
        if next == stop_token {
            break;
        }
        if out.len() == max_new {
            break;
        }
        logits = forward_decode(&[next], state, params)?.pop().expect("one logit row");
    }
    Ok(out)
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn split_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.cols();
    t.values.chunks(cols).map(|r| r.to_vec()).collect()
}
