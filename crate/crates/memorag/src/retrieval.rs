//! Context chunking and lexical clue-guided retrieval.
//!
//! The paper's dense retriever is out of scope; BM25 fills the same
//! architectural role behind the `ChunkScorer` trait so a dense scorer can
//! be slotted in later.

use std::collections::HashMap;

use serde::Serialize;

use crate::model::Vocab;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const DEFAULT_CHUNK_MAX: usize = 512;
pub const DEFAULT_HITS: usize = 3;

#[derive(Clone, Debug, Serialize)]
pub struct Chunk {
    pub chunk_id: usize,
    /// Start/end (exclusive) in context model-token positions.
    pub token_span: (usize, usize),
    pub text: String,
}

/// Lowercase alphanumeric terms; the shared tokenization for retrieval
/// scoring and answer metrics.
pub fn terms(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Splits a model-token context into chunks of at most `chunk_max` tokens,
/// preferring the last sentence boundary ('.'/'?') inside the window.
pub fn chunk_tokens(tokens: &[usize], chunk_max: usize, vocab: &Vocab) -> Vec<Chunk> {
    assert!(chunk_max >= 16, "chunk_max below 16");
    let dot = vocab.id(".");
    let qmark = vocab.id("?");
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < tokens.len() {
        let window_end = (start + chunk_max).min(tokens.len());
        let end = if window_end - start < chunk_max {
            window_end
        } else {
            // Last terminal punctuation inside the window, if any.
            match (start..window_end).rev().find(|&i| tokens[i] == dot || tokens[i] == qmark) {
                Some(i) => i + 1,
                None => window_end,
            }
        };
        chunks.push(Chunk {
            chunk_id: chunks.len(),
            token_span: (start, end),
            text: vocab.decode(&tokens[start..end]),
        });
        start = end;
    }
    chunks
}

/// Tokenizes raw text, then chunks it.
pub fn chunk_context(text: &str, chunk_max: usize, vocab: &Vocab) -> Vec<Chunk> {
    if text.trim().is_empty() {
        return Vec::new();
    }
    chunk_tokens(&vocab.encode(text), chunk_max, vocab)
}

#[derive(Clone, Debug, Default)]
pub struct Index {
    pub chunks: Vec<Chunk>,
    /// term -> number of chunks containing it.
    pub df: HashMap<String, usize>,
    /// Per-chunk term frequencies.
    pub tf: Vec<HashMap<String, usize>>,
    pub lengths: Vec<usize>,
    pub avg_len: f64,
}

pub fn build_index(chunks: Vec<Chunk>) -> Index {
    let mut df: HashMap<String, usize> = HashMap::new();
    let mut tf = Vec::with_capacity(chunks.len());
    let mut lengths = Vec::with_capacity(chunks.len());
    for c in &chunks {
        let toks = terms(&c.text);
        lengths.push(toks.len());
        let mut freqs: HashMap<String, usize> = HashMap::new();
        for t in toks {
            *freqs.entry(t).or_insert(0) += 1;
        }
        for t in freqs.keys() {
            *df.entry(t.clone()).or_insert(0) += 1;
        }
        tf.push(freqs);
    }
    let avg_len = if lengths.is_empty() {
        0.0
    } else {
        lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
    };
    Index { chunks, df, tf, lengths, avg_len }
}

/// Scores every chunk against one query string.
pub trait ChunkScorer {
    fn score_all(&self, index: &Index, query: &str) -> Vec<f64>;
}

pub struct Bm25Scorer;

impl ChunkScorer for Bm25Scorer {
    fn score_all(&self, index: &Index, query: &str) -> Vec<f64> {
        let n = index.chunks.len();
        let mut scores = vec![0.0; n];
        if n == 0 {
            return scores;
        }
        let mut qterms = terms(query);
        qterms.sort();
        qterms.dedup();
        for t in &qterms {
            let df = match index.df.get(t) {
                Some(&d) => d as f64,
                None => continue,
            };
            let idf = (((n as f64 - df + 0.5) / (df + 0.5)) + 1.0).ln();
            for (ci, freqs) in index.tf.iter().enumerate() {
                let tf = *freqs.get(t).unwrap_or(&0) as f64;
                if tf == 0.0 {
                    continue;
                }
                let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * index.lengths[ci] as f64 / index.avg_len);
                scores[ci] += idf * tf * (BM25_K1 + 1.0) / (tf + norm);
            }
        }
        scores
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvidenceSet {
    /// Top chunks, scores non-increasing, no duplicates.
    pub hits: Vec<(usize, f64)>,
    /// Selected chunk texts concatenated in context order.
    pub text: String,
}

/// BM25 per query, max-score fusion across queries, top `hits` chunks with
/// ties broken by lower chunk_id. Evidence text preserves context order.
pub fn retrieve(queries: &[String], index: &Index, hits: usize) -> EvidenceSet {
    retrieve_with(&Bm25Scorer, queries, index, hits)
}

pub fn retrieve_with(
    scorer: &dyn ChunkScorer,
    queries: &[String],
    index: &Index,
    hits: usize,
) -> EvidenceSet {
    assert!(hits >= 1, "hits must be at least 1");
    let n = index.chunks.len();
    let mut fused = vec![f64::NEG_INFINITY; n];
    for q in queries {
        for (ci, s) in scorer.score_all(index, q).into_iter().enumerate() {
            if s > fused[ci] {
                fused[ci] = s;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| fused[b].partial_cmp(&fused[a]).unwrap().then(a.cmp(&b)));
    let top: Vec<(usize, f64)> = order.into_iter().take(hits).map(|i| (i, fused[i])).collect();
    let mut in_context: Vec<usize> = top.iter().map(|&(i, _)| i).collect();
    in_context.sort_unstable();
    let text = in_context
        .iter()
        .map(|&i| index.chunks[i].text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    EvidenceSet { hits: top, text }
}
