//! Prefill and decode over light (full-KV) and compact (memory-token) caches.
//!
//! The same segment routine drives both inference paths and the training
//! losses: it records every op on a tape, so a persistent tape yields
//! gradients while per-segment throwaway tapes give plain inference.

use crate::diffcore::{Tape, Tensor, Var, NEG_INF};

use super::config::ModelConfig;
use super::params::Parameters;

/// Rounds through f32, the on-disk precision of memory caches. Compact
/// memory is quantized at formation time so fresh and reloaded memory
/// behave bit-identically downstream.
pub fn quantize_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Inference: nothing accumulates gradient.
    AllFrozen,
    /// Memory training: only memory projections and memory-token embeddings.
    MemoryTrainable,
    /// Fixture preparation: every weight trains.
    AllTrainable,
}

pub struct LayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_ff1: Var,
    pub w_ff2: Var,
    pub w_qm: Option<Var>,
    pub w_km: Option<Var>,
    pub w_vm: Option<Var>,
}

pub struct ParamVars {
    pub token_emb: Var,
    pub mem_emb: Option<Var>,
    pub layers: Vec<LayerVars>,
}

impl ParamVars {
    pub fn bind(tape: &mut Tape, params: &Parameters, mode: BindMode) -> Self {
        let base = |tape: &mut Tape, t: &Tensor| match mode {
            BindMode::AllTrainable => tape.leaf(t.clone()),
            _ => tape.constant(t.clone()),
        };
        let memw = |tape: &mut Tape, t: &Tensor| match mode {
            BindMode::AllFrozen => tape.constant(t.clone()),
            _ => tape.leaf(t.clone()),
        };
        let token_emb = base(tape, &params.token_embeddings);
        let mem_emb = params.mem_token_embeddings.as_ref().map(|t| memw(tape, t));
        let layers = params
            .layers
            .iter()
            .map(|l| LayerVars {
                w_q: base(tape, &l.w_q),
                w_k: base(tape, &l.w_k),
                w_v: base(tape, &l.w_v),
                w_o: base(tape, &l.w_o),
                w_ff1: base(tape, &l.w_ff1),
                w_ff2: base(tape, &l.w_ff2),
                w_qm: l.w_qm.as_ref().map(|t| memw(tape, t)),
                w_km: l.w_km.as_ref().map(|t| memw(tape, t)),
                w_vm: l.w_vm.as_ref().map(|t| memw(tape, t)),
            })
            .collect();
        ParamVars { token_emb, mem_emb, layers }
    }
}

/// Sinusoidal absolute positions over the interleaved token stream.
pub fn positional_rows(start: usize, rows: usize, d: usize) -> Tensor {
    let mut values = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let pos = (start + r) as f64;
        for i in 0..d {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            values.push(if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() });
        }
    }
    Tensor::new(vec![rows, d], values)
}

/// Additive visibility mask for one segment of `n_reg` regular tokens
/// followed by `n_mem` memory tokens, attending over `n_cache` cached
/// entries then the segment's own keys.
///
/// Regular token i sees: every cache entry, regular j <= i, no current
/// memory keys. Memory token a sees: every cache entry, the full window's
/// regular keys, and memory keys b <= a.
pub fn build_mask(n_cache: usize, n_reg: usize, n_mem: usize) -> Tensor {
    let rows = n_reg + n_mem;
    let cols = n_cache + n_reg + n_mem;
    let mut values = vec![NEG_INF; rows * cols];
    for i in 0..rows {
        for j in 0..n_cache {
            values[i * cols + j] = 0.0;
        }
    }
    for i in 0..n_reg {
        for j in 0..=i {
            values[i * cols + n_cache + j] = 0.0;
        }
    }
    for a in 0..n_mem {
        let row = n_reg + a;
        for j in 0..n_reg {
            values[row * cols + n_cache + j] = 0.0;
        }
        for b in 0..=a {
            values[row * cols + n_cache + n_reg + b] = 0.0;
        }
    }
    Tensor::new(vec![rows, cols], values)
}

/// Per-layer cached memory (or regular) keys/values as tape vars.
pub type LayerCacheVars = Option<(Var, Var)>;

pub struct SegmentOut {
    /// Logits over the vocabulary, one row per regular token.
    pub logits: Var,
    /// This segment's regular keys/values per layer.
    pub reg_kv: Vec<(Var, Var)>,
    /// This segment's memory-token keys/values per layer (empty if n_mem = 0).
    pub mem_kv: Vec<(Var, Var)>,
}

/// Scaled dot-product attention for one head batch with explicit mask.
/// Exposed for the attention-contract tests.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &Tensor) -> Var {
    let head_dim = tape.value(q).cols();
    assert_eq!(tape.value(k).cols(), head_dim, "attention head dim mismatch");
    assert_eq!(tape.value(k).rows(), tape.value(v).rows(), "attention kv length mismatch");
    assert_eq!(mask.rows(), tape.value(q).rows(), "mask rows mismatch");
    assert_eq!(mask.cols(), tape.value(k).rows(), "mask cols mismatch");
    let scores = tape.matmul_nt(q, k);
    let scaled = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let m = tape.constant(mask.clone());
    let masked = tape.add(scaled, m);
    let probs = tape.softmax_rows(masked);
    tape.matmul(probs, v)
}

/// One transformer pass over a segment of regular tokens plus optional
/// trailing memory tokens, attending over per-layer cached KV.
#[allow(clippy::too_many_arguments)]
pub fn segment_forward(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    token_ids: &[usize],
    n_mem: usize,
    pos_offset: usize,
    cache: &[LayerCacheVars],
) -> SegmentOut {
    let d = config.d_model;
    let n_reg = token_ids.len();
    let rows = n_reg + n_mem;
    assert!(n_reg > 0, "segment requires at least one regular token");
    assert_eq!(cache.len(), config.n_layers);

    let x_reg = tape.gather_rows(pv.token_emb, token_ids);
    let mut h = if n_mem > 0 {
        let mem_ids: Vec<usize> = (0..n_mem).collect();
        let x_mem = tape.gather_rows(pv.mem_emb.expect("memory disabled"), &mem_ids);
        tape.concat_rows(&[x_reg, x_mem])
    } else {
        x_reg
    };
    let pos = tape.constant(positional_rows(pos_offset, rows, d));
    h = tape.add(h, pos);

    let mut reg_kv = Vec::with_capacity(config.n_layers);
    let mut mem_kv = Vec::with_capacity(config.n_layers);
    let head_dim = config.head_dim();

    for (li, lv) in pv.layers.iter().enumerate() {
        let hn = tape.layer_norm_rows(h);
        let hr = if n_mem > 0 { tape.slice_rows(hn, 0, n_reg) } else { hn };
        let q = tape.matmul(hr, lv.w_q);
        let k = tape.matmul(hr, lv.w_k);
        let v = tape.matmul(hr, lv.w_v);
        let (q_full, k_seg, v_seg, km, vm) = if n_mem > 0 {
            let hm = tape.slice_rows(hn, n_reg, rows);
            let qm = tape.matmul(hm, lv.w_qm.expect("memory disabled"));
            let km = tape.matmul(hm, lv.w_km.expect("memory disabled"));
            let vm = tape.matmul(hm, lv.w_vm.expect("memory disabled"));
            let q_full = tape.concat_rows(&[q, qm]);
            let k_seg = tape.concat_rows(&[k, km]);
            let v_seg = tape.concat_rows(&[v, vm]);
            (q_full, k_seg, v_seg, Some(km), Some(vm))
        } else {
            (q, k, v, None, None)
        };
        let (k_full, v_full, n_cache) = match cache[li] {
            Some((ck, cv)) => {
                let n_cache = tape.value(ck).rows();
                (tape.concat_rows(&[ck, k_seg]), tape.concat_rows(&[cv, v_seg]), n_cache)
            }
            None => (k_seg, v_seg, 0),
        };
        let mask = build_mask(n_cache, n_reg, n_mem);
        let mut head_outs = Vec::with_capacity(config.n_heads);
        for hd in 0..config.n_heads {
            let (a, b) = (hd * head_dim, (hd + 1) * head_dim);
            let qh = tape.slice_cols(q_full, a, b);
            let kh = tape.slice_cols(k_full, a, b);
            let vh = tape.slice_cols(v_full, a, b);
            head_outs.push(attention(tape, qh, kh, vh, &mask));
        }
        let ctx = tape.concat_cols(&head_outs);
        let attn_out = tape.matmul(ctx, lv.w_o);
        h = tape.add(h, attn_out);

        let hn2 = tape.layer_norm_rows(h);
        let f1 = tape.matmul(hn2, lv.w_ff1);
        let g = tape.gelu(f1);
        let f2 = tape.matmul(g, lv.w_ff2);
        h = tape.add(h, f2);

        reg_kv.push((k, v));
        if let (Some(km), Some(vm)) = (km, vm) {
            mem_kv.push((km, vm));
        }
    }

    let hn = tape.layer_norm_rows(h);
    let h_reg = if n_mem > 0 { tape.slice_rows(hn, 0, n_reg) } else { hn };
    let logits = tape.matmul_nt(h_reg, pv.token_emb);
    SegmentOut { logits, reg_kv, mem_kv }
}
