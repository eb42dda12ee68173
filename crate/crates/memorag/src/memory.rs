//! Global memory lifecycle: formation over arbitrarily long contexts,
//! compression accounting, offload/reload, and the light-memory baseline.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::params::{fnv1a_init, fnv1a_u64};
use crate::model::{
    compact_extend, forward_prefill_compact, forward_prefill_light, validate_beta, CompactCache,
    KvCache, LayerKv, ModelError, Parameters,
};

pub const MEMORY_MAGIC: &[u8; 4] = b"MRAG";
pub const MEMORY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("memory format error: {0}")]
    Format(String),
    #[error("params fingerprint mismatch: memory formed with {expected:016x}, loading with {got:016x}")]
    ParamsMismatch { expected: u64, got: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The compact global memory: per-layer memory-token KV plus compression
/// config and reuse-safety fingerprints. Immutable after formation.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub cache: CompactCache,
    pub window_l: usize,
    pub beta: usize,
    pub context_fingerprint: u64,
    pub params_fingerprint: u64,
}

/// Uncompressed baseline: the full KV cache over the entire context.
#[derive(Clone, Debug)]
pub struct LightMemory {
    pub cache: KvCache,
    pub n_raw_tokens: usize,
    pub context_fingerprint: u64,
    pub params_fingerprint: u64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MemoryStats {
    pub n_raw_tokens: usize,
    pub n_mem_entries: usize,
    pub bytes: usize,
    pub beta: usize,
}

/// Count of memory formations in this process; lets callers verify memory
/// is formed once per context rather than per query.
static FORMATION_COUNT: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);

pub fn formation_count() -> usize {
    FORMATION_COUNT.load(std::sync::atomic::Ordering::SeqCst)
}

pub fn context_fingerprint(tokens: &[usize]) -> u64 {
    let mut h = fnv1a_init();
    for &t in tokens {
        h = fnv1a_u64(h, t as u64);
    }
    h
}

/// Forms compact global memory over the context, window by window.
pub fn memorize(
    tokens: &[usize],
    params: &Parameters,
    beta: usize,
) -> Result<MemoryState, MemoryError> {
    validate_beta(beta)?;
    let window_l = params.config.window_l;
    if window_l % beta != 0 {
        return Err(MemoryError::Model(ModelError::Config(format!(
            "window_l {window_l} not divisible by beta {beta}"
        ))));
    }
    let mem_k = window_l / beta;
    FORMATION_COUNT.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
    let (_, cache) = forward_prefill_compact(tokens, params, mem_k)?;
    Ok(MemoryState {
        cache,
        window_l,
        beta,
        context_fingerprint: context_fingerprint(tokens),
        params_fingerprint: params.fingerprint(),
    })
}

/// Continues formation over additional tokens; the existing memory must end
/// on a window boundary.
pub fn memorize_extend(
    memory: &mut MemoryState,
    tokens: &[usize],
    params: &Parameters,
) -> Result<(), MemoryError> {
    let fp = params.fingerprint();
    if fp != memory.params_fingerprint {
        return Err(MemoryError::ParamsMismatch { expected: memory.params_fingerprint, got: fp });
    }
    compact_extend(&mut memory.cache, tokens, params)?;
    let mut h = memory.context_fingerprint;
    for &t in tokens {
        h = fnv1a_u64(h, t as u64);
    }
    memory.context_fingerprint = h;
    Ok(())
}

/// Exact full-KV prefill over the whole context.
pub fn light_memorize(tokens: &[usize], params: &Parameters) -> Result<LightMemory, MemoryError> {
    let (_, cache) = forward_prefill_light(tokens, params)?;
    Ok(LightMemory {
        cache,
        n_raw_tokens: tokens.len(),
        context_fingerprint: context_fingerprint(tokens),
        params_fingerprint: params.fingerprint(),
    })
}

/// Payload bytes of the cache arrays at on-disk (f32) precision.
fn payload_bytes(layers: &[LayerKv]) -> usize {
    layers.iter().map(|l| (l.k.len() + l.v.len()) * 4).sum()
}

pub fn memory_stats(memory: &MemoryState) -> MemoryStats {
    MemoryStats {
        n_raw_tokens: memory.cache.n_raw,
        n_mem_entries: memory.cache.mem_len,
        bytes: payload_bytes(&memory.cache.mem),
        beta: memory.beta,
    }
}

pub fn light_memory_bytes(memory: &LightMemory) -> usize {
    payload_bytes(&memory.cache.layers)
}

/// Writes the memory file: magic "MRAG", version, config block,
/// fingerprints, then per-layer K and V arrays as little-endian f32.
pub fn offload(memory: &MemoryState, path: &Path) -> Result<(), MemoryError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MEMORY_MAGIC)?;
    w.write_all(&MEMORY_VERSION.to_le_bytes())?;
    for x in [
        memory.window_l,
        memory.beta,
        memory.cache.mem_k,
        memory.cache.mem_len,
        memory.cache.n_raw,
        memory.cache.pos_next,
        memory.cache.mem.len(),
        memory.cache.mem.first().map_or(0, |l| l.k.len()),
    ] {
        w.write_all(&(x as u64).to_le_bytes())?;
    }
    w.write_all(&memory.context_fingerprint.to_le_bytes())?;
    w.write_all(&memory.params_fingerprint.to_le_bytes())?;
    for layer in &memory.cache.mem {
        for &x in layer.k.iter().chain(&layer.v) {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a memory file, verifying format and params compatibility. A
/// truncated or corrupt file yields an error and no partial state.
pub fn load(path: &Path, params: &Parameters) -> Result<MemoryState, MemoryError> {
    match load_inner(path, params) {
        Err(MemoryError::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Err(MemoryError::Format("truncated memory file".into()))
        }
        other => other,
    }
}

fn load_inner(path: &Path, params: &Parameters) -> Result<MemoryState, MemoryError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MEMORY_MAGIC {
        return Err(MemoryError::Format("bad memory-file magic".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != MEMORY_VERSION {
        return Err(MemoryError::Format(format!("unsupported memory version {version}")));
    }
    let next_u64 = |r: &mut BufReader<File>| -> Result<u64, MemoryError> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    };
    let window_l = next_u64(&mut r)? as usize;
    let beta = next_u64(&mut r)? as usize;
    let mem_k = next_u64(&mut r)? as usize;
    let mem_len = next_u64(&mut r)? as usize;
    let n_raw = next_u64(&mut r)? as usize;
    let pos_next = next_u64(&mut r)? as usize;
    let n_layers = next_u64(&mut r)? as usize;
    let arr_len = next_u64(&mut r)? as usize;
    let context_fingerprint = next_u64(&mut r)?;
    let expected_params = next_u64(&mut r)?;
    let got = params.fingerprint();
    if got != expected_params {
        return Err(MemoryError::ParamsMismatch { expected: expected_params, got });
    }
    if n_layers != params.config.n_layers || arr_len != mem_len * params.config.d_model {
        return Err(MemoryError::Format("memory layout inconsistent with params".into()));
    }
    let mut mem = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let read_arr = |r: &mut BufReader<File>| -> Result<Vec<f64>, MemoryError> {
            let mut out = Vec::with_capacity(arr_len);
            for _ in 0..arr_len {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                out.push(f32::from_le_bytes(b) as f64);
            }
            Ok(out)
        };
        let k = read_arr(&mut r)?;
        let v = read_arr(&mut r)?;
        mem.push(LayerKv { k, v });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(MemoryError::Format("trailing bytes in memory file".into()));
    }
    Ok(MemoryState {
        cache: CompactCache { mem, mem_len, n_raw, pos_next, mem_k },
        window_l,
        beta,
        context_fingerprint,
        params_fingerprint: expected_params,
    })
}
