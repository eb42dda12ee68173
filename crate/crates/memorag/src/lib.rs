//! MemoRAG at desk scale: a tiny decoder-only transformer with compressive
//! memory tokens in its KV cache, clue-guided lexical retrieval, the
//! three-stage memory training recipe, and an evaluation harness.

pub mod diffcore;
pub mod evalbench;
pub mod memory;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod training;
