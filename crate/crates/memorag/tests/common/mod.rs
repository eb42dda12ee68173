//! Shared fixtures: toy configs and an independently coded dense reference
//! forward pass (plain nested loops, no tape, no cache) used as the oracle
//! for cache-equivalence and visibility tests.

#![allow(dead_code)]

use memorag::model::{quantize_f32, ModelConfig, Parameters};

pub fn toy_config(d: usize, n_layers: usize, window_l: usize, mem_k: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 23,
        d_model: d,
        n_layers,
        n_heads: 2,
        ffn_mult: 4,
        window_l,
        mem_k,
        max_seq: 512,
        mem_enabled: true,
    }
}

pub fn toy_params(seed: u64, config: ModelConfig) -> Parameters {
    Parameters::init(config, seed).expect("toy init")
}

type Mat = Vec<Vec<f64>>;

fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

fn from_tensor(t: &memorag::diffcore::Tensor) -> Mat {
    (0..t.rows()).map(|r| (0..t.cols()).map(|c| t.at(r, c)).collect()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut out = zeros(n, p);
    for i in 0..n {
        assert_eq!(a[i].len(), m);
        for k in 0..m {
            for j in 0..p {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn layer_norm(x: &Mat) -> Mat {
    let d = x[0].len();
    x.iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter().map(|v| (v - mean) * inv).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn positions(start: usize, rows: usize, d: usize) -> Mat {
    (0..rows)
        .map(|r| {
            let pos = (start + r) as f64;
            (0..d)
                .map(|i| {
                    let pair = (i / 2) as f64;
                    let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
                    if i % 2 == 0 {
                        (pos * freq).sin()
                    } else {
                        (pos * freq).cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// Reference output for one window: logits per regular token plus the
/// memory-token K/V per layer and the post-norm memory hidden states that
/// feed the memory projections.
pub struct NaiveSegment {
    pub logits: Mat,
    /// Per layer: memory keys and values (mem_k x d).
    pub mem_kv: Vec<(Mat, Mat)>,
    /// Per layer: the normalized memory-token rows entering the projections.
    pub mem_hidden: Vec<Mat>,
}

/// Dense no-cache forward over one segment of regular tokens followed by
/// `n_mem` memory tokens, attending over an optional per-layer memory cache.
/// Mirrors the declared visibility rules with explicit O(n^2) loops.
pub fn naive_segment(
    params: &Parameters,
    tokens: &[usize],
    n_mem: usize,
    pos_offset: usize,
    cache: &[(Mat, Mat)],
) -> NaiveSegment {
    let cfg = &params.config;
    let (d, n_reg) = (cfg.d_model, tokens.len());
    let rows = n_reg + n_mem;
    let emb = from_tensor(&params.token_embeddings);

    let mut h: Mat = tokens.iter().map(|&t| emb[t].clone()).collect();
    if n_mem > 0 {
        let mem_emb = from_tensor(params.mem_token_embeddings.as_ref().unwrap());
        for m in mem_emb.iter().take(n_mem) {
            h.push(m.clone());
        }
    }
    let pos = positions(pos_offset, rows, d);
    for (hr, pr) in h.iter_mut().zip(&pos) {
        for (a, b) in hr.iter_mut().zip(pr) {
            *a += b;
        }
    }

    let head_dim = cfg.head_dim();
    let mut mem_kv = Vec::new();
    let mut mem_hidden = Vec::new();
    for (li, l) in params.layers.iter().enumerate() {
        let hn = layer_norm(&h);
        let hr: Mat = hn[..n_reg].to_vec();
        let mut q = matmul(&hr, &from_tensor(&l.w_q));
        let mut k = matmul(&hr, &from_tensor(&l.w_k));
        let mut v = matmul(&hr, &from_tensor(&l.w_v));
        if n_mem > 0 {
            let hm: Mat = hn[n_reg..].to_vec();
            mem_hidden.push(hm.clone());
            let qm = matmul(&hm, &from_tensor(l.w_qm.as_ref().unwrap()));
            let km = matmul(&hm, &from_tensor(l.w_km.as_ref().unwrap()));
            let vm = matmul(&hm, &from_tensor(l.w_vm.as_ref().unwrap()));
            mem_kv.push((km.clone(), vm.clone()));
            q.extend(qm);
            k.extend(km);
            v.extend(vm);
        }
        let n_cache = if cache.is_empty() { 0 } else { cache[li].0.len() };
        let mut k_full: Mat = if n_cache > 0 { cache[li].0.clone() } else { Vec::new() };
        let mut v_full: Mat = if n_cache > 0 { cache[li].1.clone() } else { Vec::new() };
        k_full.extend(k);
        v_full.extend(v);

        // visible(i, j): query row i may attend key column j.
        let visible = |i: usize, j: usize| -> bool {
            if j < n_cache {
                return true;
            }
            let js = j - n_cache;
            if i < n_reg {
                js <= i && js < n_reg
            } else {
                js < n_reg || js <= i
            }
        };
        let mut ctx = zeros(rows, d);
        for hd in 0..cfg.n_heads {
            let (a, b) = (hd * head_dim, (hd + 1) * head_dim);
            for i in 0..rows {
                let mut scores = Vec::new();
                for (j, krow) in k_full.iter().enumerate() {
                    if visible(i, j) {
                        let dot: f64 = (a..b).map(|c| q[i][c] * krow[c]).sum();
                        scores.push((j, dot / (head_dim as f64).sqrt()));
                    }
                }
                let m = scores.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                let e: Vec<(usize, f64)> =
                    scores.iter().map(|&(j, s)| (j, (s - m).exp())).collect();
                for &(_, ei) in &e {
                    denom += ei;
                }
                for (j, ei) in e {
                    let w = ei / denom;
                    for c in a..b {
                        ctx[i][c] += w * v_full[j][c];
                    }
                }
            }
        }
        let attn = matmul(&ctx, &from_tensor(&l.w_o));
        for (hr, ar) in h.iter_mut().zip(&attn) {
            for (x, y) in hr.iter_mut().zip(ar) {
                *x += y;
            }
        }
        let hn2 = layer_norm(&h);
        let f1 = matmul(&hn2, &from_tensor(&l.w_ff1));
        let g: Mat = f1.iter().map(|r| r.iter().map(|&x| gelu(x)).collect()).collect();
        let f2 = matmul(&g, &from_tensor(&l.w_ff2));
        for (hr, fr) in h.iter_mut().zip(&f2) {
            for (x, y) in hr.iter_mut().zip(fr) {
                *x += y;
            }
        }
    }
    let hn = layer_norm(&h);
    let h_reg: Mat = hn[..n_reg].to_vec();
    // Tied output head: logits = h . E^T.
    let logits: Mat = h_reg
        .iter()
        .map(|row| emb.iter().map(|er| row.iter().zip(er).map(|(a, b)| a * b).sum()).collect())
        .collect();
    NaiveSegment { logits, mem_kv, mem_hidden }
}

/// Reference light-mode forward: logits for every position, no cache reuse.
pub fn naive_light_logits(params: &Parameters, tokens: &[usize]) -> Mat {
    naive_segment(params, tokens, 0, 0, &[]).logits
}

/// Reference compact formation: window loop with f32-quantized memory KV
/// carried between windows, exactly as the production path declares.
pub fn naive_compact(params: &Parameters, tokens: &[usize], mem_k: usize) -> (Mat, Vec<(Mat, Mat)>) {
    let cfg = &params.config;
    let mut cache: Vec<(Mat, Mat)> = vec![(Vec::new(), Vec::new()); cfg.n_layers];
    let mut logits = Vec::new();
    let mut pos_next = 0;
    for window in tokens.chunks(cfg.window_l) {
        let seg = naive_segment(params, window, mem_k, pos_next, &cache);
        logits.extend(seg.logits);
        for (li, (km, vm)) in seg.mem_kv.iter().enumerate() {
            for row in km {
                cache[li].0.push(row.iter().map(|&x| quantize_f32(x)).collect());
            }
            for row in vm {
                cache[li].1.push(row.iter().map(|&x| quantize_f32(x)).collect());
            }
        }
        pos_next += window.len() + mem_k;
    }
    (logits, cache)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
