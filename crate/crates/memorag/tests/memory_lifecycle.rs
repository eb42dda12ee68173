//! Memory formation accounting, streaming composability, offload/reload
//! identity, and compatibility checks.

mod common;

use common::{toy_config, toy_params};
use memorag::memory::{
    self, light_memorize, light_memory_bytes, load, memorize, memorize_extend, memory_stats,
    offload, MemoryError,
};

fn tokens(n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 7 + 3) % vocab).collect()
}

#[test]
fn memorize_counts_and_stats() {
    let params = toy_params(1, toy_config(8, 2, 8, 2));
    let toks = tokens(3 * 8, params.config.vocab_size);
    let mem = memorize(&toks, &params, 4).unwrap();
    let stats = memory_stats(&mem);
    assert_eq!(stats.n_raw_tokens, 24);
    assert_eq!(stats.n_mem_entries, 3 * 2);
    assert_eq!(stats.beta, 4);
    // Halving beta doubles the entry count.
    let params8 = toy_params(1, toy_config(8, 2, 8, 1));
    let mem8 = memorize(&toks, &params8, 8).unwrap();
    assert_eq!(memory_stats(&mem8).n_mem_entries, 3);
}

#[test]
fn invalid_beta_is_rejected_with_allowed_set() {
    let params = toy_params(1, toy_config(8, 2, 8, 2));
    let err = memorize(&tokens(8, params.config.vocab_size), &params, 5).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains('5') && msg.contains("[4, 8, 16, 32, 64]"), "got: {msg}");
}

#[test]
fn byte_ratio_tracks_compression_for_aligned_contexts() {
    let params = toy_params(2, toy_config(8, 2, 8, 2));
    let n = 8 * params.config.window_l;
    let toks = tokens(n, params.config.vocab_size);
    let mem = memorize(&toks, &params, 4).unwrap();
    let light = light_memorize(&toks, &params).unwrap();
    let ratio = memory_stats(&mem).bytes as f64 / light_memory_bytes(&light) as f64;
    assert!((ratio - 0.25).abs() < 0.25 * 0.01, "payload ratio {ratio} != 1/4 within 1%");
}

#[test]
fn bytes_increase_with_context_length() {
    let params = toy_params(2, toy_config(8, 2, 8, 2));
    let mut prev = 0;
    for windows in 1..=4 {
        let toks = tokens(windows * 8, params.config.vocab_size);
        let bytes = memory_stats(&memorize(&toks, &params, 4).unwrap()).bytes;
        assert!(bytes > prev);
        prev = bytes;
    }
}

#[test]
fn streaming_formation_composes() {
    let params = toy_params(3, toy_config(8, 2, 8, 2));
    let l = params.config.window_l;
    let toks = tokens(3 * l + 5, params.config.vocab_size);
    let whole = memorize(&toks, &params, 4).unwrap();
    let mut streamed = memorize(&toks[..2 * l], &params, 4).unwrap();
    memorize_extend(&mut streamed, &toks[2 * l..], &params).unwrap();
    assert_eq!(whole.cache, streamed.cache);
    assert_eq!(whole.context_fingerprint, streamed.context_fingerprint);
    // Continuation off a window boundary is refused.
    let mut odd = memorize(&toks[..l + 3], &params, 4).unwrap();
    assert!(memorize_extend(&mut odd, &toks[l + 3..], &params).is_err());
}

#[test]
fn offload_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ctx.mem");
    let params = toy_params(4, toy_config(8, 2, 8, 2));
    let mem = memorize(&tokens(20, params.config.vocab_size), &params, 4).unwrap();
    offload(&mem, &path).unwrap();
    let back = load(&path, &params).unwrap();
    assert_eq!(mem.cache, back.cache);
    assert_eq!(mem.window_l, back.window_l);
    assert_eq!(mem.beta, back.beta);
    assert_eq!(mem.context_fingerprint, back.context_fingerprint);
    assert_eq!(mem.params_fingerprint, back.params_fingerprint);
}

#[test]
fn truncated_memory_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ctx.mem");
    let params = toy_params(4, toy_config(8, 2, 8, 2));
    let mem = memorize(&tokens(16, params.config.vocab_size), &params, 4).unwrap();
    offload(&mem, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load(&path, &params), Err(MemoryError::Format(_))));
}

#[test]
fn load_with_wrong_params_names_both_fingerprints() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ctx.mem");
    let params = toy_params(4, toy_config(8, 2, 8, 2));
    let other = toy_params(5, toy_config(8, 2, 8, 2));
    let mem = memorize(&tokens(16, params.config.vocab_size), &params, 4).unwrap();
    offload(&mem, &path).unwrap();
    let err = load(&path, &other).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains(&format!("{:016x}", params.fingerprint()))
            && msg.contains(&format!("{:016x}", other.fingerprint())),
        "got: {msg}"
    );
}

#[test]
fn light_memory_is_deterministic_and_checks_capacity() {
    let params = toy_params(6, toy_config(8, 1, 8, 2));
    let toks = tokens(10, params.config.vocab_size);
    let a = light_memorize(&toks, &params).unwrap();
    let b = light_memorize(&toks, &params).unwrap();
    assert_eq!(a.cache, b.cache);
    assert_eq!(a.cache.len, toks.len());
    let long = tokens(params.config.max_seq + 1, params.config.vocab_size);
    assert!(light_memorize(&long, &params).is_err());
}

#[test]
fn formation_counter_increments_once_per_memorize() {
    let params = toy_params(7, toy_config(8, 1, 8, 2));
    let before = memory::formation_count();
    memorize(&tokens(8, params.config.vocab_size), &params, 4).unwrap();
    assert_eq!(memory::formation_count(), before + 1);
}
