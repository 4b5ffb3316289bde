//! Deterministic synthetic oracles.
//!
//! All of these are pure functions of their inputs and seeds: repeated calls
//! agree exactly, which is what makes whole runs bit-reproducible.

use rand::{Rng, RngCore};

use super::{
    CrossoverTemplate, EmbeddingOracle, ModerationOracle, MutationOp, MutationTemplate,
    OracleError, RefusalRegion, ResponseOracle, SyntheticLandscapeSpec, VariationOracle,
};

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over raw bytes. Stable across platforms and releases, unlike the
/// std hasher.
pub fn fnv1a(data: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn fnv1a_u64(mut h: u64, v: u64) -> u64 {
    for b in v.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash-derived uniform value in [0, 1).
pub fn hash_unit(text: &str, seed: u64) -> f64 {
    let h = fnv1a_u64(fnv1a(text.as_bytes()), seed);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic pseudo-random unit vector, used as a probe direction for the
/// non-toxicity moderation components.
pub fn probe_vector(seed: u64, index: u64, d_g: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(d_g);
    let base = fnv1a_u64(fnv1a_u64(FNV_OFFSET, seed), index);
    for i in 0..d_g {
        let h = fnv1a_u64(base, i as u64);
        v.push((h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Deterministic embedding: token unigrams and bigrams hashed into `d_g`
/// signed buckets, then L2-normalized.
pub fn synthetic_embed(text: &str, d_g: usize) -> Result<Vec<f64>, OracleError> {
    let tokens: Vec<String> = text.split_whitespace().map(|t| t.to_lowercase()).collect();
    if tokens.is_empty() {
        return Err(OracleError::EmptyText);
    }
    let mut acc = vec![0.0_f64; d_g];
    let mut bump = |key: &str| {
        let h = fnv1a(key.as_bytes());
        let bucket = (h % d_g as u64) as usize;
        let sign = if (h >> 63) & 1 == 1 { 1.0 } else { -1.0 };
        acc[bucket] += sign;
    };
    for t in &tokens {
        bump(t);
    }
    for pair in tokens.windows(2) {
        bump(&format!("{}\u{1f}{}", pair[0], pair[1]));
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(OracleError::Other(format!(
            "text hashes to a zero embedding: {text:?}"
        )));
    }
    for x in &mut acc {
        *x /= norm;
    }
    Ok(acc)
}

pub struct HashEmbedding {
    pub d_g: usize,
}

impl EmbeddingOracle for HashEmbedding {
    fn embed(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        synthetic_embed(text, self.d_g)
    }
}

// ---------------------------------------------------------------------------
// Landscape moderation
// ---------------------------------------------------------------------------

/// Moderation over the synthetic landscape. The toxicity component is a sum
/// of Gaussian peaks over the text's embedding plus optional seeded noise;
/// the remaining components are distinct smooth functions of the embedding so
/// that phenotype distance separates behaviorally different genomes.
pub struct SyntheticModeration {
    spec: SyntheticLandscapeSpec,
    d_g: usize,
    d_p: usize,
    probes: Vec<Vec<f64>>,
}

impl SyntheticModeration {
    pub fn new(spec: SyntheticLandscapeSpec, d_g: usize, d_p: usize) -> Self {
        let probes = (1..d_p as u64)
            .map(|j| probe_vector(spec.seed, j, d_g))
            .collect();
        SyntheticModeration {
            spec,
            d_g,
            d_p,
            probes,
        }
    }

    /// Toxicity of an embedding under the peak mixture, before noise.
    pub fn peak_value(&self, e: &[f64]) -> f64 {
        let mut v = 0.0;
        for k in 0..self.spec.n_peaks {
            let c = &self.spec.peak_centers[k];
            let w = self.spec.peak_widths[k];
            let h = self.spec.peak_heights[k];
            let d2: f64 = e.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            v += h * (-d2 / (w * w)).exp();
        }
        v
    }
}

impl ModerationOracle for SyntheticModeration {
    fn moderate(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        let e = synthetic_embed(text, self.d_g)?;
        let noise = if self.spec.noise_amplitude > 0.0 {
            self.spec.noise_amplitude * (hash_unit(text, self.spec.seed) * 2.0 - 1.0)
        } else {
            0.0
        };
        let toxicity = (self.peak_value(&e) + noise).clamp(0.0, 1.0);
        let mut scores = Vec::with_capacity(self.d_p);
        scores.push(toxicity);
        for probe in &self.probes {
            let dot: f64 = e.iter().zip(probe).map(|(a, b)| a * b).sum();
            scores.push((0.5 + 0.5 * dot).clamp(0.0, 1.0));
        }
        Ok(scores)
    }
}

// ---------------------------------------------------------------------------
// Response generators
// ---------------------------------------------------------------------------

/// Echoes the prompt back unchanged.
pub struct EchoResponse;

impl ResponseOracle for EchoResponse {
    fn respond(&self, prompt: &str) -> Result<String, OracleError> {
        if prompt.is_empty() {
            return Err(OracleError::EmptyText);
        }
        Ok(prompt.to_string())
    }
}

/// Text returned for prompts landing in the refusal region.
pub const REFUSAL_RESPONSE: &str = "I can't help with that.";

/// Echo generator with a refusal region: prompts whose embeddings fall inside
/// the region produce a short refusal instead of the echo.
pub struct SyntheticResponse {
    refusal_region: Option<RefusalRegion>,
    d_g: usize,
}

impl SyntheticResponse {
    pub fn new(refusal_region: Option<RefusalRegion>, d_g: usize) -> Self {
        SyntheticResponse { refusal_region, d_g }
    }
}

impl ResponseOracle for SyntheticResponse {
    fn respond(&self, prompt: &str) -> Result<String, OracleError> {
        if prompt.is_empty() {
            return Err(OracleError::EmptyText);
        }
        if let Some(region) = &self.refusal_region {
            let e = synthetic_embed(prompt, self.d_g)?;
            let d2: f64 = e
                .iter()
                .zip(&region.center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2.sqrt() < region.radius {
                return Ok(REFUSAL_RESPONSE.to_string());
            }
        }
        Ok(prompt.to_string())
    }
}

// ---------------------------------------------------------------------------
// Variation operators
// ---------------------------------------------------------------------------

/// Token-level mutation and crossover over a seeded vocabulary. Stands in for
/// a prompt-generator model; edits are small so offspring stay near their
/// parents in embedding space.
pub struct SyntheticVariation {
    vocab: Vec<String>,
}

impl SyntheticVariation {
    /// Vocabulary = all distinct lowercased tokens of `texts`, sorted.
    pub fn from_texts(texts: &[String]) -> Self {
        let mut vocab: Vec<String> = texts
            .iter()
            .flat_map(|t| t.split_whitespace())
            .map(|t| t.to_lowercase())
            .collect();
        vocab.sort();
        vocab.dedup();
        if vocab.is_empty() {
            vocab.push("token".to_string());
        }
        SyntheticVariation { vocab }
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }
}

impl VariationOracle for SyntheticVariation {
    fn mutate(
        &self,
        template: &MutationTemplate,
        parent: &str,
        rng: &mut dyn RngCore,
    ) -> Result<String, OracleError> {
        let mut tokens: Vec<String> = parent
            .split_whitespace()
            .map(|t| t.to_lowercase())
            .collect();
        if tokens.is_empty() {
            return Err(OracleError::EmptyText);
        }
        for _ in 0..template.edits {
            match template.op {
                MutationOp::Substitute => {
                    let pos = rng.random_range(0..tokens.len());
                    let word = self.vocab[rng.random_range(0..self.vocab.len())].clone();
                    tokens[pos] = word;
                }
                MutationOp::Insert => {
                    let pos = rng.random_range(0..=tokens.len());
                    let word = self.vocab[rng.random_range(0..self.vocab.len())].clone();
                    tokens.insert(pos, word);
                }
                MutationOp::Delete => {
                    if tokens.len() > 1 {
                        let pos = rng.random_range(0..tokens.len());
                        tokens.remove(pos);
                    }
                }
            }
        }
        Ok(tokens.join(" "))
    }

    fn crossover(
        &self,
        _template: &CrossoverTemplate,
        a: &str,
        b: &str,
        rng: &mut dyn RngCore,
    ) -> Result<String, OracleError> {
        let ta: Vec<&str> = a.split_whitespace().collect();
        let tb: Vec<&str> = b.split_whitespace().collect();
        if ta.is_empty() || tb.is_empty() {
            return Err(OracleError::EmptyText);
        }
        // Position-wise interleave; identical parents reproduce themselves.
        let len = ta.len().max(tb.len());
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let from_a: bool = rng.random();
            let tok = if from_a {
                ta.get(i).or_else(|| tb.get(i))
            } else {
                tb.get(i).or_else(|| ta.get(i))
            };
            if let Some(t) = tok {
                out.push(t.to_lowercase());
            }
        }
        Ok(out.join(" "))
    }
}
