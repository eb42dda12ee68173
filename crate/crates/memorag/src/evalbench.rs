//! Answer metrics, synthetic indirection-task generation, and efficiency
//! benchmarking.

use std::collections::HashMap;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{Parameters, Vocab};
use crate::retrieval::{build_index, chunk_context, retrieve, terms};

/// Token-overlap F1 over the shared lowercase alphanumeric tokenization.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = terms(prediction);
    let g = terms(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for t in &g {
        *counts.entry(t.as_str()).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// LCS-based F-measure with equal precision/recall weighting.
pub fn rouge_l(prediction: &str, gold: &str) -> f64 {
    let p = terms(prediction);
    let g = terms(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &g) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / p.len() as f64;
    let recall = lcs / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for ai in a {
        let mut prev = 0;
        for (j, bj) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if ai == bj { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// One synthetic indirection QA pair: the query names the alias, the gold
/// chunk names only the canonical entity.
#[derive(Clone, Debug, Serialize)]
pub struct QaPair {
    pub query: String,
    pub gold_answer: String,
    pub gold_clue: String,
    pub alias: String,
    pub canonical: String,
    pub fact: String,
    pub gold_chunk_id: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SyntheticTask {
    pub context: String,
    pub alias_map: HashMap<String, String>,
    pub qa: Vec<QaPair>,
    pub gold_chunk_ids: Vec<usize>,
    pub seed: u64,
    pub chunk_max: usize,
}

const STOPWORDS: [&str; 16] = [
    "the", "a", "of", "in", "and", "to", "is", "was", "for", "on", "with", "that", "who", "what",
    "about", "tell",
];

fn content_terms(text: &str) -> Vec<String> {
    terms(text).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).collect()
}

/// A filler sentence of exactly `len` tokens, the last being '.'.
fn filler_sentence(rng: &mut ChaCha8Rng, len: usize) -> Vec<&'static str> {
    const SAFE: [&str; 40] = [
        "the", "old", "city", "near", "river", "mountain", "people", "found", "ancient", "large",
        "small", "known", "region", "village", "temple", "market", "road", "stone", "water",
        "light", "dark", "early", "late", "during", "after", "before", "many", "few", "first",
        "last", "great", "quiet", "hidden", "records", "archive", "notes", "page", "chapter",
        "journal", "entry",
    ];
    let mut out = Vec::with_capacity(len);
    for _ in 0..len.saturating_sub(1) {
        out.push(SAFE[rng.gen_range(0..SAFE.len())]);
    }
    out.push(".");
    out
}

/// Pads chunk words to exactly `chunk_max` tokens ending in '.', so the
/// retrieval chunker reproduces the generated boundaries.
fn pad_chunk(words: &mut Vec<String>, chunk_max: usize, rng: &mut ChaCha8Rng) {
    assert!(words.len() + 1 <= chunk_max, "chunk body too long");
    while words.len() < chunk_max {
        let left = chunk_max - words.len();
        if left == 1 {
            words.push(".".into());
            break;
        }
        let len = left.min(rng.gen_range(5..=9)).max(2);
        words.extend(filler_sentence(rng, len).into_iter().map(String::from));
    }
    debug_assert_eq!(words.len(), chunk_max);
    debug_assert_eq!(words.last().map(String::as_str), Some("."));
}

/// Deterministic indirection-task generator. Distractor chunks repeat the
/// alias so query-only retrieval is misled; gold chunks carry only the
/// canonical name and the planted fact.
pub fn gen_indirection_tasks(
    seed: u64,
    n_docs: usize,
    doc_len: usize,
    chunk_max: usize,
) -> Vec<SyntheticTask> {
    use crate::model::vocab::{ALIASES, CANONICALS, FACTS};
    assert!(doc_len >= 4 * chunk_max, "doc_len must be at least 4 * chunk_max");
    for salt in 0..10u64 {
        let tasks: Vec<SyntheticTask> = (0..n_docs)
            .map(|i| {
                let task_seed = seed
                    .wrapping_mul(0x9e3779b97f4a7c15)
                    .wrapping_add(i as u64)
                    .wrapping_add(salt.wrapping_mul(0xabcd_1234));
                let mut rng = ChaCha8Rng::seed_from_u64(task_seed);
                let e = rng.gen_range(0..CANONICALS.len());
                let canonical = CANONICALS[e];
                let alias = ALIASES[e];
                let fact = FACTS[rng.gen_range(0..FACTS.len())];

                let n_chunks = doc_len / chunk_max;
                let gold_pos = rng.gen_range(0..n_chunks);
                let mut distractor_pos: Vec<usize> = (0..n_chunks).filter(|&p| p != gold_pos).collect();
                distractor_pos.shuffle(&mut rng);
                distractor_pos.truncate(3.min(n_chunks - 1));

                let mut chunk_texts: Vec<String> = Vec::with_capacity(n_chunks);
                for pos in 0..n_chunks {
                    let mut words: Vec<String> = Vec::new();
                    if pos == gold_pos {
                        for w in [canonical, "was", "found", "near", "old", "river", "."] {
                            words.push(w.into());
                        }
                        for w in [canonical, "is", fact, "."] {
                            words.push(w.into());
                        }
                        for w in ["records", "mentions", canonical, "during", "early", "entry", "."] {
                            words.push(w.into());
                        }
                    } else if distractor_pos.contains(&pos) {
                        for w in ["the", alias, "was", "known", "in", "the", "village", "."] {
                            words.push(w.into());
                        }
                        for w in ["people", "called", "the", alias, "near", "the", "market", "."] {
                            words.push(w.into());
                        }
                    }
                    pad_chunk(&mut words, chunk_max, &mut rng);
                    chunk_texts.push(words.join(" "));
                }
                let context = chunk_texts.join(" ");

                let query = format!("what about the {alias} ?");
                let gold_clue = format!("{canonical} is");
                let gold_answer = format!("{canonical} {fact}");
                let mut alias_map = HashMap::new();
                alias_map.insert(alias.to_string(), canonical.to_string());
                SyntheticTask {
                    context,
                    alias_map,
                    qa: vec![QaPair {
                        query,
                        gold_answer,
                        gold_clue,
                        alias: alias.into(),
                        canonical: canonical.into(),
                        fact: fact.into(),
                        gold_chunk_id: gold_pos,
                    }],
                    gold_chunk_ids: vec![gold_pos],
                    seed: task_seed,
                    chunk_max,
                }
            })
            .collect();

        // Generation constraints, enforced exhaustively.
        for t in &tasks {
            let qa = &t.qa[0];
            let vocab = crate::model::Vocab::builtin();
            let chunks = chunk_context(&t.context, t.chunk_max, vocab);
            let gold_text = &chunks[qa.gold_chunk_id].text;
            assert!(!terms(gold_text).contains(&qa.alias), "alias leaked into gold chunk");
            assert!(!terms(&qa.query).contains(&qa.canonical), "canonical leaked into query");
            let q_content = content_terms(&qa.query);
            let gold_terms = content_terms(gold_text);
            assert!(
                q_content.iter().all(|qt| !gold_terms.contains(qt)),
                "gold chunk shares content terms with query"
            );
        }
        let missed = tasks
            .iter()
            .filter(|t| {
                let vocab = crate::model::Vocab::builtin();
                let idx = build_index(chunk_context(&t.context, t.chunk_max, vocab));
                let ev = retrieve(&[t.qa[0].query.clone()], &idx, 3);
                !ev.hits.iter().any(|&(c, _)| c == t.qa[0].gold_chunk_id)
            })
            .count();
        if missed as f64 >= 0.7 * n_docs as f64 {
            return tasks;
        }
    }
    panic!("indirection-task generation could not satisfy the miss-rate constraint");
}

#[derive(Clone, Debug, Serialize)]
pub struct EfficiencyRow {
    pub context_len: usize,
    pub mode: String,
    pub indexing_ms: f64,
    pub retrieval_ms: f64,
    pub cache_bytes: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
}

impl EfficiencyReport {
    pub fn row(&self, len: usize, mode: &str) -> &EfficiencyRow {
        self.rows
            .iter()
            .find(|r| r.context_len == len && r.mode == mode)
            .expect("missing efficiency row")
    }

    pub fn table(&self) -> String {
        let mut out = String::from(
            "context_len  mode          indexing_ms  retrieval_ms  cache_bytes\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<13} {:>11.3} {:>13.3} {:>12}\n",
                r.context_len, r.mode, r.indexing_ms, r.retrieval_ms, r.cache_bytes
            ));
        }
        out
    }
}

pub fn median_ms(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[samples.len() / 2]
}

pub fn time_ms<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed().as_secs_f64() * 1e3)
}

const BENCH_REPEATS: usize = 3;
const BENCH_QUERY: &str = "what about the records ?";

/// Deterministic filler context of exactly `n` tokens.
pub fn bench_context(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words: Vec<&'static str> = Vec::with_capacity(n);
    while words.len() < n {
        let left = n - words.len();
        if left == 1 {
            words.push(".");
            break;
        }
        let wanted = left.min(rng.gen_range(5..=9));
        words.extend(filler_sentence(&mut rng, wanted));
    }
    words.join(" ")
}

/// Measures indexing latency, per-query retrieval latency, and exact cache
/// payload bytes for each mode at each context length. Timings are medians
/// over repeated runs; byte counts are exact accounting.
pub fn bench_efficiency(
    context_lengths: &[usize],
    params: &Parameters,
    config: &crate::pipeline::PipelineConfig,
) -> Result<EfficiencyReport, crate::pipeline::PipelineError> {
    assert!(
        context_lengths.windows(2).all(|w| w[0] <= w[1]),
        "context lengths must be ascending"
    );
    let vocab = Vocab::builtin();
    let mut report = EfficiencyReport::default();
    for &n in context_lengths {
        let text = bench_context(n, 17);
        let tokens = vocab.encode(&text);

        // standard_rag: chunk + inverted index, query-only lookup, no cache.
        let mut idx_ms = Vec::new();
        let mut ret_ms = Vec::new();
        let mut index = None;
        for _ in 0..BENCH_REPEATS {
            let (ix, ms) = time_ms(|| {
                crate::retrieval::build_index(crate::retrieval::chunk_tokens(
                    &tokens,
                    config.chunk_max,
                    vocab,
                ))
            });
            idx_ms.push(ms);
            let (_, ms) = time_ms(|| {
                crate::retrieval::retrieve(&[BENCH_QUERY.to_string()], &ix, config.hits)
            });
            ret_ms.push(ms);
            index = Some(ix);
        }
        let index = index.expect("at least one repeat");
        report.rows.push(EfficiencyRow {
            context_len: n,
            mode: "standard_rag".into(),
            indexing_ms: median_ms(&mut idx_ms),
            retrieval_ms: median_ms(&mut ret_ms),
            cache_bytes: 0,
        });

        // memorag: compact memory formation; retrieval includes clue decode.
        let mut idx_ms = Vec::new();
        let mut ret_ms = Vec::new();
        let mut bytes = 0;
        for _ in 0..BENCH_REPEATS {
            let (mem, ms) =
                time_ms(|| crate::memory::memorize(&tokens, params, config.beta));
            let mem = mem?;
            idx_ms.push(ms);
            let (clues, ms) = time_ms(|| -> Result<_, crate::pipeline::PipelineError> {
                let clues = crate::pipeline::generate_clues(BENCH_QUERY, &mem, params, config)?;
                let mut queries = clues.clue_strings.clone();
                queries.push(BENCH_QUERY.to_string());
                Ok(crate::retrieval::retrieve(&queries, &index, config.hits))
            });
            clues?;
            ret_ms.push(ms);
            bytes = crate::memory::memory_stats(&mem).bytes;
        }
        report.rows.push(EfficiencyRow {
            context_len: n,
            mode: "memorag".into(),
            indexing_ms: median_ms(&mut idx_ms),
            retrieval_ms: median_ms(&mut ret_ms),
            cache_bytes: bytes,
        });

        // light: full-KV prefill; no retrieval stage.
        let mut idx_ms = Vec::new();
        let mut bytes = 0;
        for _ in 0..BENCH_REPEATS {
            let (light, ms) = time_ms(|| crate::memory::light_memorize(&tokens, params));
            idx_ms.push(ms);
            bytes = crate::memory::light_memory_bytes(&light?);
        }
        report.rows.push(EfficiencyRow {
            context_len: n,
            mode: "light".into(),
            indexing_ms: median_ms(&mut idx_ms),
            retrieval_ms: 0.0,
            cache_bytes: bytes,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_identity_and_disjoint() {
        assert_eq!(token_f1("a b c", "a b c"), 1.0);
        assert_eq!(token_f1("a b", "c d"), 0.0);
    }

    #[test]
    fn f1_half_overlap() {
        // overlap 1, P = R = 1/2 -> F1 = 1/2.
        assert!((token_f1("a b", "b c") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn f1_empty_rules() {
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("a", ""), 0.0);
        assert_eq!(token_f1("", "a"), 0.0);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        assert_eq!(rouge_l("x y z", "x y z"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
    }

    #[test]
    fn rouge_lcs_example() {
        // LCS 3, P = 3/4, R = 1, F = 6/7.
        assert!((rouge_l("a b c d", "a c d") - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_indirection_tasks(11, 5, 256, 64);
        let b = gen_indirection_tasks(11, 5, 256, 64);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn generator_enforces_indirection() {
        let tasks = gen_indirection_tasks(3, 20, 256, 64);
        // Constraints are asserted inside the generator; spot-check one here.
        let t = &tasks[0];
        assert!(!t.context.is_empty());
        assert!(t.qa[0].query.contains(&t.qa[0].alias));
        assert!(!t.qa[0].query.contains(&t.qa[0].canonical));
    }
}
