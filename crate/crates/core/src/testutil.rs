//! Shared helpers for unit tests.

use crate::model::{Genome, GenomeId};

/// Genome with a basis-vector embedding of dimension `d_g` and all scores
/// zero except toxicity.
pub(crate) fn unit_genome(id: &str, d_g: usize, tox: f64) -> Genome {
    let mut embedding = vec![0.0; d_g];
    embedding[0] = 1.0;
    let mut scores = vec![0.0; 8];
    scores[0] = tox;
    Genome {
        id: GenomeId(id.to_string()),
        text: format!("text {id}"),
        embedding,
        scores,
        raw_fitness: tox,
        fitness: tox,
        is_refusal: false,
        generation_created: 0,
        parent_ids: vec![],
        operator_tag: "seed".to_string(),
    }
}

/// Genome with an explicit embedding; scores all zero except toxicity.
pub(crate) fn genome_with_embedding(id: &str, embedding: Vec<f64>, tox: f64) -> Genome {
    let mut scores = vec![0.0; 8];
    scores[0] = tox;
    Genome {
        id: GenomeId(id.to_string()),
        text: format!("text {id}"),
        embedding,
        scores,
        raw_fitness: tox,
        fitness: tox,
        is_refusal: false,
        generation_created: 0,
        parent_ids: vec![],
        operator_tag: "seed".to_string(),
    }
}
