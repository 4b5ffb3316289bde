//! Quality and diversity statistics over a population snapshot.
//!
//! Species separation uses raw cosine distance on embeddings (the analysis
//! convention), while `d_inter` uses the ensemble metric that speciation
//! itself runs on; both live side by side in the report. Topic labels come
//! from a leader-follower clustering proxy over embeddings with its own
//! threshold, which stands in for a full topic-modeling pipeline and is
//! labeled as a proxy in the report.

use serde::{Deserialize, Serialize};

use crate::distance::{ensemble_distance, DistanceError};
use crate::model::{
    fitness_desc, EnsembleDistanceParams, Genome, PopulationState, RunConfig, SpeciesId,
};
use crate::speciation::{initial_speciation, SpeciationError};

/// Cosine distance `1 - a . b` without unit-norm enforcement; metrics always
/// run over already-validated genomes.
fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSpeciesStats {
    pub id: SpeciesId,
    pub quality: f64,
    pub size: usize,
    /// Mean pairwise cosine distance between members; None for singletons.
    pub intra_dist: Option<f64>,
    pub toxicity: ToxicityQuantiles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Mean ensemble distance between species leaders; None below 2 species.
    pub d_inter: Option<f64>,
    pub qd_score: f64,
    pub n_species_active: usize,
    pub n_species_frozen: usize,
    /// Mean pairwise cosine distance between species leaders.
    pub mean_inter_dist: Option<f64>,
    /// Mean over species of mean pairwise member cosine distance.
    pub mean_intra_dist: Option<f64>,
    /// `mean_inter_dist / mean_intra_dist`; None when intra is undefined or 0.
    pub separation_ratio: Option<f64>,
    pub per_species: Vec<PerSpeciesStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicDiversityReport {
    /// Number of distinct topics.
    pub k: usize,
    /// Shannon entropy (natural log) of the topic distribution.
    pub h: f64,
    /// Effective number of topics, exp(H).
    pub n1: f64,
    /// Evenness H / ln(K); None when K = 1.
    pub j: Option<f64>,
    /// The labels came from a clustering proxy, not topic modeling proper.
    pub proxy: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToxicityQuantiles {
    pub q95: f64,
    pub top10_median: f64,
    pub qmax: f64,
    pub top10_mean: f64,
    pub top50_mean: f64,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Mean ensemble distance over all leader pairs; None below two leaders.
pub fn d_inter(
    leaders: &[&Genome],
    params: &EnsembleDistanceParams,
) -> Result<Option<f64>, DistanceError> {
    if leaders.len() < 2 {
        return Ok(None);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, a) in leaders.iter().enumerate() {
        for b in leaders.iter().skip(i + 1) {
            sum += ensemble_distance(a, b, params)?;
            count += 1;
        }
    }
    Ok(Some(sum / count as f64))
}

/// Sum over all species (active and frozen) of the best current member
/// fitness. Zero species yields 0.
pub fn qd_score(state: &PopulationState) -> f64 {
    state
        .species
        .values()
        .map(|sp| {
            sp.member_ids
                .iter()
                .map(|id| state.genomes[id].fitness)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        .max(0.0)
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Cosine-distance separation statistics plus the full per-species table.
pub fn separation_stats(state: &PopulationState, params: &EnsembleDistanceParams) -> DiversityReport {
    let species: Vec<_> = state.species.values().collect();

    let mut per_species = Vec::new();
    let mut intra_means = Vec::new();
    for sp in &species {
        let members: Vec<&Genome> = sp.member_ids.iter().map(|id| &state.genomes[id]).collect();
        let mut pair_dists = Vec::new();
        for (i, a) in members.iter().enumerate() {
            for b in members.iter().skip(i + 1) {
                pair_dists.push(cosine_distance(&a.embedding, &b.embedding));
            }
        }
        let intra = mean(&pair_dists);
        if let Some(v) = intra {
            intra_means.push(v);
        }
        let fitnesses: Vec<f64> = members.iter().map(|g| g.fitness).collect();
        let quality = fitnesses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        per_species.push(PerSpeciesStats {
            id: sp.id.clone(),
            quality,
            size: members.len(),
            intra_dist: intra,
            toxicity: toxicity_quantiles(&fitnesses),
        });
    }

    let leaders: Vec<&Genome> = species.iter().map(|sp| &state.genomes[&sp.leader_id]).collect();
    let mut inter_dists = Vec::new();
    for (i, a) in leaders.iter().enumerate() {
        for b in leaders.iter().skip(i + 1) {
            inter_dists.push(cosine_distance(&a.embedding, &b.embedding));
        }
    }
    let mean_inter_dist = mean(&inter_dists);
    let mean_intra_dist = mean(&intra_means);
    let separation_ratio = separation_ratio(mean_inter_dist, mean_intra_dist);

    DiversityReport {
        d_inter: d_inter(&leaders, params).ok().flatten(),
        qd_score: qd_score(state),
        n_species_active: species.iter().filter(|s| s.is_active()).count(),
        n_species_frozen: species.iter().filter(|s| !s.is_active()).count(),
        mean_inter_dist,
        mean_intra_dist,
        separation_ratio,
        per_species,
    }
}

/// `inter / intra`, undefined when intra is missing or zero.
pub fn separation_ratio(inter: Option<f64>, intra: Option<f64>) -> Option<f64> {
    match (inter, intra) {
        (Some(inter), Some(intra)) if intra > 0.0 => Some(inter / intra),
        _ => None,
    }
}

/// Shannon-entropy topic diversity over a label assignment.
pub fn topic_diversity(assignments: &[usize]) -> TopicDiversityReport {
    assert!(!assignments.is_empty(), "assignments must be non-empty");
    let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
    for a in assignments {
        *counts.entry(*a).or_insert(0) += 1;
    }
    let n = assignments.len() as f64;
    let k = counts.len();
    let mut h = 0.0;
    for c in counts.values() {
        let p = *c as f64 / n;
        h -= p * p.ln();
    }
    let j = if k >= 2 { Some(h / (k as f64).ln()) } else { None };
    TopicDiversityReport {
        k,
        h,
        n1: h.exp(),
        j,
        proxy: "leader-follower clustering over embeddings".to_string(),
    }
}

/// Label genomes by topics: leader-follower clustering over embeddings under
/// raw cosine distance with a dedicated threshold. Returns labels aligned
/// with the input order.
pub fn cluster_topics(genomes: &[&Genome], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..genomes.len()).collect();
    order.sort_by(|&a, &b| fitness_desc(genomes[a], genomes[b]));
    let mut labels = vec![usize::MAX; genomes.len()];
    let mut topic_leaders: Vec<usize> = Vec::new();
    for idx in order {
        let mut nearest: Option<(f64, usize)> = None;
        for (topic, &leader_idx) in topic_leaders.iter().enumerate() {
            let d = cosine_distance(&genomes[idx].embedding, &genomes[leader_idx].embedding);
            if d < threshold && nearest.map_or(true, |(best, _)| d < best) {
                nearest = Some((d, topic));
            }
        }
        match nearest {
            Some((_, topic)) => labels[idx] = topic,
            None => {
                labels[idx] = topic_leaders.len();
                topic_leaders.push(idx);
            }
        }
    }
    labels
}

/// Empirical quantiles of a fitness sample. The 0.95 quantile is linearly
/// interpolated between order statistics (type-7).
pub fn toxicity_quantiles(fitnesses: &[f64]) -> ToxicityQuantiles {
    assert!(!fitnesses.is_empty(), "fitnesses must be non-empty");
    let mut sorted = fitnesses.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let topk = |k: usize| -> &[f64] {
        let n = sorted.len();
        &sorted[n.saturating_sub(k)..]
    };
    let median = |xs: &[f64]| -> f64 {
        let n = xs.len();
        if n % 2 == 1 {
            xs[n / 2]
        } else {
            (xs[n / 2 - 1] + xs[n / 2]) / 2.0
        }
    };
    let mean_of = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    ToxicityQuantiles {
        q95: quantile_linear(&sorted, 0.95),
        top10_median: median(topk(10)),
        qmax: *sorted.last().unwrap(),
        top10_mean: mean_of(topk(10)),
        top50_mean: mean_of(topk(50)),
    }
}

/// Type-7 linear-interpolation quantile over an ascending-sorted sample.
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = lo + 1;
    if hi >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sorted unique values with cumulative fractions; F at the maximum is 1.
pub fn ecdf_export(fitnesses: &[f64]) -> Vec<(f64, f64)> {
    assert!(!fitnesses.is_empty(), "fitnesses must be non-empty");
    let mut sorted = fitnesses.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut cum = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == v {
            j += 1;
        }
        cum += j - i;
        out.push((v, cum as f64 / n));
        i = j;
    }
    out
}

/// QD score of an arbitrary genome pool under post-hoc clustering with the
/// same thresholds the speciated arm ran with: form species from the pool
/// and sum their best fitnesses. Used to compare a non-speciated population
/// against a speciated one on equal terms.
pub fn posthoc_qd_score(genomes: &[Genome], cfg: &RunConfig) -> Result<f64, SpeciationError> {
    let mut scratch = PopulationState::new();
    let mut ids = Vec::with_capacity(genomes.len());
    for g in genomes {
        ids.push(g.id.clone());
        scratch.genomes.insert(g.id.clone(), g.clone());
    }
    initial_speciation(&ids, &mut scratch, cfg)?;
    Ok(qd_score(&scratch))
}
