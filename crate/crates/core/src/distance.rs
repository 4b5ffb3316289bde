//! Ensemble distance metric and the metric-property verification protocol.
//!
//! The metric combines a normalized cosine distance over prompt embeddings
//! (genotype) with a normalized Euclidean distance over moderation score
//! vectors (phenotype):
//!
//! `d(u, v) = w_genotype * (1 - e_u . e_v) / 2 + w_phenotype * ||s_u - s_v|| / sqrt(d_p)`
//!
//! The genotype term divides by exactly 2.0 rather than an observed maximum,
//! so the metric is population-independent. All arithmetic is 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EnsembleDistanceParams, Genome, NORM_TOLERANCE};

/// Symmetry tolerance asserted by the verification protocol.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
/// Triangle-inequality tolerance asserted by the verification protocol.
pub const TRIANGLE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding norm {0} deviates from 1 by more than {NORM_TOLERANCE}")]
    NonUnitNorm(f64),
    #[error("score component {index} = {value} outside [0,1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("pool of {0} genomes is too small; need at least 3")]
    PoolTooSmall(usize),
}

fn check_unit(v: &[f64]) -> Result<(), DistanceError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(DistanceError::NonUnitNorm(norm));
    }
    Ok(())
}

/// Cosine distance `1 - e_u . e_v` between unit embeddings; range [0, 2].
/// The true cosine of unit vectors never leaves [-1, 1]; a rounded dot
/// product can overshoot by a few ulps, so the result is clamped.
pub fn genotype_distance(e_u: &[f64], e_v: &[f64]) -> Result<f64, DistanceError> {
    if e_u.len() != e_v.len() {
        return Err(DistanceError::DimensionMismatch(e_u.len(), e_v.len()));
    }
    check_unit(e_u)?;
    check_unit(e_v)?;
    if e_u == e_v {
        return Ok(0.0);
    }
    let dot: f64 = e_u.iter().zip(e_v).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot).clamp(0.0, 2.0))
}

/// Normalized Euclidean distance `||s_u - s_v|| / sqrt(d_p)`; range [0, 1].
pub fn phenotype_distance(s_u: &[f64], s_v: &[f64]) -> Result<f64, DistanceError> {
    if s_u.len() != s_v.len() {
        return Err(DistanceError::DimensionMismatch(s_u.len(), s_v.len()));
    }
    for (index, value) in s_u.iter().chain(s_v.iter()).enumerate() {
        if !(*value >= 0.0 && *value <= 1.0) {
            return Err(DistanceError::ScoreOutOfRange {
                index: index % s_u.len(),
                value: *value,
            });
        }
    }
    let sq: f64 = s_u.iter().zip(s_v).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq.sqrt() / (s_u.len() as f64).sqrt())
}

/// Weighted ensemble distance between two genomes; range [0, 1] under
/// weights summing to 1.
pub fn ensemble_distance(
    u: &Genome,
    v: &Genome,
    p: &EnsembleDistanceParams,
) -> Result<f64, DistanceError> {
    if u.embedding.len() != p.d_g {
        return Err(DistanceError::DimensionMismatch(u.embedding.len(), p.d_g));
    }
    if u.scores.len() != p.d_p {
        return Err(DistanceError::DimensionMismatch(u.scores.len(), p.d_p));
    }
    let dg = genotype_distance(&u.embedding, &v.embedding)?;
    let dp = phenotype_distance(&u.scores, &v.scores)?;
    Ok(p.w_genotype * (dg / 2.0) + p.w_phenotype * dp)
}

// ---------------------------------------------------------------------------
// Metric-property verification
// ---------------------------------------------------------------------------

/// Outcome of the sampled metric-property checks over a genome pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_genomes: usize,
    pub n_pairs_tested: usize,
    pub n_triples_tested: usize,
    pub min_distance: f64,
    pub max_distance: f64,
    pub mean_distance: f64,
    pub non_negativity_violations: usize,
    pub symmetry_max_diff: f64,
    pub symmetry_tolerance: f64,
    pub triangle_violations: usize,
    pub triangle_tolerance: f64,
    pub seed: u64,
    pub passed: bool,
}

/// Sample `n_pairs` distinct pairs and `n_triples` triples from `pool`
/// (seeded, reproducible) and report non-negativity, symmetry and
/// triangle-inequality results at the standard tolerances.
pub fn verify_metric_properties(
    pool: &[Genome],
    n_pairs: usize,
    n_triples: usize,
    seed: u64,
    params: &EnsembleDistanceParams,
) -> Result<MetricReport, DistanceError> {
    verify_metric_properties_with(pool, n_pairs, n_triples, seed, |u, v| {
        ensemble_distance(u, v, params)
    })
}

/// Same protocol against an arbitrary distance function. Keeping the
/// function injectable gives the negative-control path a way to confirm the
/// checks actually detect a broken metric.
pub fn verify_metric_properties_with<F>(
    pool: &[Genome],
    n_pairs: usize,
    n_triples: usize,
    seed: u64,
    dist: F,
) -> Result<MetricReport, DistanceError>
where
    F: Fn(&Genome, &Genome) -> Result<f64, DistanceError>,
{
    let n = pool.len();
    if n < 3 {
        return Err(DistanceError::PoolTooSmall(n));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Distinct pairs: exhaustive when the request covers all C(n,2) pairs,
    // otherwise seeded sampling without replacement.
    let all_pairs = n * (n - 1) / 2;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    if n_pairs >= all_pairs {
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((i, j));
            }
        }
    } else {
        let mut seen = std::collections::BTreeSet::new();
        while pairs.len() < n_pairs {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if i == j {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                pairs.push(key);
            }
        }
    }

    let mut min_distance = f64::INFINITY;
    let mut max_distance = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut non_negativity_violations = 0;
    let mut symmetry_max_diff: f64 = 0.0;
    for &(i, j) in &pairs {
        let d_uv = dist(&pool[i], &pool[j])?;
        let d_vu = dist(&pool[j], &pool[i])?;
        if d_uv < 0.0 || d_vu < 0.0 {
            non_negativity_violations += 1;
        }
        symmetry_max_diff = symmetry_max_diff.max((d_uv - d_vu).abs());
        min_distance = min_distance.min(d_uv);
        max_distance = max_distance.max(d_uv);
        sum += d_uv;
    }
    let mean_distance = sum / pairs.len() as f64;

    let mut triangle_violations = 0;
    for _ in 0..n_triples {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n);
        while k == i || k == j {
            k = rng.random_range(0..n);
        }
        let d_uw = dist(&pool[i], &pool[k])?;
        let d_uv = dist(&pool[i], &pool[j])?;
        let d_vw = dist(&pool[j], &pool[k])?;
        if d_uw > d_uv + d_vw + TRIANGLE_TOLERANCE {
            triangle_violations += 1;
        }
    }

    let passed = non_negativity_violations == 0
        && symmetry_max_diff <= SYMMETRY_TOLERANCE
        && triangle_violations == 0;
    Ok(MetricReport {
        n_genomes: n,
        n_pairs_tested: pairs.len(),
        n_triples_tested: n_triples,
        min_distance,
        max_distance,
        mean_distance,
        non_negativity_violations,
        symmetry_max_diff,
        symmetry_tolerance: SYMMETRY_TOLERANCE,
        triangle_violations,
        triangle_tolerance: TRIANGLE_TOLERANCE,
        seed,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{genome_with_embedding, unit_genome};

    #[test]
    fn genotype_distance_anchors() {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0];
        let e3 = vec![-1.0, 0.0, 0.0];
        assert_eq!(genotype_distance(&e1, &e1).unwrap(), 0.0);
        assert_eq!(genotype_distance(&e1, &e2).unwrap(), 1.0);
        assert_eq!(genotype_distance(&e1, &e3).unwrap(), 2.0);
    }

    #[test]
    fn genotype_distance_rejects_bad_inputs() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![1.0, 0.0, 0.0];
        assert!(matches!(
            genotype_distance(&e1, &e2),
            Err(DistanceError::DimensionMismatch(2, 3))
        ));
        let not_unit = vec![0.5, 0.0];
        assert!(matches!(
            genotype_distance(&not_unit, &not_unit),
            Err(DistanceError::NonUnitNorm(_))
        ));
    }

    #[test]
    fn phenotype_distance_anchors() {
        let zeros = vec![0.0; 8];
        let ones = vec![1.0; 8];
        assert_eq!(phenotype_distance(&zeros, &zeros).unwrap(), 0.0);
        assert!((phenotype_distance(&zeros, &ones).unwrap() - 1.0).abs() < 1e-15);
        // Vectors differing only in toxicity by 0.4: 0.4 / sqrt(8).
        let mut v = zeros.clone();
        v[0] = 0.4;
        let expected = 0.4 / 8.0_f64.sqrt();
        assert!((phenotype_distance(&zeros, &v).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn phenotype_distance_rejects_out_of_range() {
        let a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        b[3] = 1.5;
        assert!(matches!(
            phenotype_distance(&a, &b),
            Err(DistanceError::ScoreOutOfRange { .. })
        ));
    }

    #[test]
    fn ensemble_distance_anchors() {
        let p = EnsembleDistanceParams {
            d_g: 3,
            ..Default::default()
        };
        let u = genome_with_embedding("g000000", vec![1.0, 0.0, 0.0], 0.5);
        assert_eq!(ensemble_distance(&u, &u, &p).unwrap(), 0.0);

        // Orthogonal embeddings, identical scores: 0.7 * (1/2) = 0.35.
        let v = genome_with_embedding("g000001", vec![0.0, 1.0, 0.0], 0.5);
        assert!((ensemble_distance(&u, &v, &p).unwrap() - 0.35).abs() < 1e-15);

        // Antipodal embeddings, maximally distant scores: 0.7 + 0.3 = 1.0.
        let mut w = genome_with_embedding("g000002", vec![-1.0, 0.0, 0.0], 0.0);
        w.scores = vec![1.0; 8];
        w.raw_fitness = 1.0;
        w.fitness = 1.0;
        let mut u0 = u.clone();
        u0.scores = vec![0.0; 8];
        u0.raw_fitness = 0.0;
        u0.fitness = 0.0;
        assert!((ensemble_distance(&u0, &w, &p).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weight_degeneracy_reduces_to_genotype_term() {
        let p = EnsembleDistanceParams {
            w_genotype: 1.0,
            w_phenotype: 0.0,
            d_g: 3,
            d_p: 8,
        };
        let u = genome_with_embedding("g000000", vec![1.0, 0.0, 0.0], 0.2);
        let v = genome_with_embedding("g000001", vec![0.0, 1.0, 0.0], 0.9);
        let d = ensemble_distance(&u, &v, &p).unwrap();
        let dg = genotype_distance(&u.embedding, &v.embedding).unwrap();
        assert_eq!(d, dg / 2.0);
    }

    #[test]
    fn verify_rejects_tiny_pool() {
        let p = EnsembleDistanceParams {
            d_g: 4,
            ..Default::default()
        };
        let pool = vec![unit_genome("g000000", 4, 0.1), unit_genome("g000001", 4, 0.2)];
        assert!(matches!(
            verify_metric_properties(&pool, 10, 10, 1, &p),
            Err(DistanceError::PoolTooSmall(2))
        ));
    }

    #[test]
    fn verify_reports_zero_distance_for_duplicates() {
        let p = EnsembleDistanceParams {
            d_g: 4,
            ..Default::default()
        };
        let pool = vec![
            unit_genome("g000000", 4, 0.5),
            unit_genome("g000001", 4, 0.5),
            genome_with_embedding("g000002", vec![0.0, 1.0, 0.0, 0.0], 0.9),
        ];
        let report = verify_metric_properties(&pool, 100, 100, 7, &p).unwrap();
        assert_eq!(report.n_pairs_tested, 3);
        assert_eq!(report.min_distance, 0.0);
        assert_eq!(report.non_negativity_violations, 0);
        assert!(report.passed);
    }

    #[test]
    fn verify_is_reproducible_for_a_seed() {
        let p = EnsembleDistanceParams {
            d_g: 8,
            ..Default::default()
        };
        let pool: Vec<Genome> = (0..20)
            .map(|i| {
                let mut e = vec![0.0; 8];
                e[i % 8] = 1.0;
                genome_with_embedding(&format!("g{i:06}"), e, (i as f64) / 20.0)
            })
            .collect();
        let a = verify_metric_properties(&pool, 50, 50, 99, &p).unwrap();
        let b = verify_metric_properties(&pool, 50, 50, 99, &p).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn corrupted_distance_fails_verification() {
        let p = EnsembleDistanceParams {
            d_g: 4,
            ..Default::default()
        };
        let pool: Vec<Genome> = (0..10)
            .map(|i| {
                let mut e = vec![0.0; 4];
                e[i % 4] = 1.0;
                genome_with_embedding(&format!("g{i:06}"), e, (i as f64) / 10.0)
            })
            .collect();
        // Asymmetric perturbation keyed on id order breaks symmetry.
        let report = verify_metric_properties_with(&pool, 45, 45, 3, |u, v| {
            let base = ensemble_distance(u, v, &p)?;
            Ok(if u.id < v.id { base + 0.01 } else { base })
        })
        .unwrap();
        assert!(report.symmetry_max_diff > SYMMETRY_TOLERANCE);
        assert!(!report.passed);
    }
}
