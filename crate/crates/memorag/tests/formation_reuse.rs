//! Memory formation happens once per context and is reused across queries.
//! Kept in its own test binary because the formation counter is process-wide.

use memorag::memory::formation_count;
use memorag::model::{ModelConfig, Parameters, Vocab};
use memorag::pipeline::{Pipeline, PipelineConfig};

#[test]
fn one_formation_serves_every_query_on_a_context() {
    let config = ModelConfig {
        vocab_size: Vocab::builtin().size(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_mult: 2,
        window_l: 32,
        mem_k: 8,
        max_seq: 512,
        mem_enabled: true,
    };
    let params = Parameters::init(config, 1).unwrap();
    let context = "the old archive mentions amber stone found near the river . \
                   a quiet village keeper studied the copper records during early light . \
                   veldrin was known for the jade temple built near the mountain road ."
        .repeat(4);
    let queries: Vec<String> = [
        "what about the amber stone ?",
        "what about the copper records ?",
        "what about the jade temple ?",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();

    let pipe = Pipeline::new(&params, PipelineConfig::default());
    let before = formation_count();
    let results = pipe.run(&queries, &context, "memorag").unwrap();
    assert_eq!(results.len(), 3);
    assert_eq!(
        formation_count() - before,
        1,
        "three queries on one context must form memory exactly once"
    );

    // A second context forms exactly one more memory.
    let r2 = pipe.run(&queries[..2], &context[..context.len() / 2], "memorag").unwrap();
    assert_eq!(r2.len(), 2);
    assert_eq!(formation_count() - before, 2);
}
