//! Oracle interfaces and bindings.
//!
//! The engine talks to four oracles: an embedding oracle for prompt text, a
//! response generator, a moderation scorer, and a variation oracle that
//! materializes mutation/crossover templates. Each can be bound to a
//! deterministic synthetic implementation or to an external service adapter.

mod service;
mod synthetic;

pub use service::{ServiceEmbedding, ServiceModeration, ServiceResponse};
pub use synthetic::{
    fnv1a, hash_unit, probe_vector, synthetic_embed, EchoResponse, SyntheticModeration,
    SyntheticResponse, SyntheticVariation,
};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Failures surfaced by oracle calls. Evaluation treats these as skips, not
/// fatal errors.
#[derive(Debug, Error)]
pub enum OracleError {
    #[error("empty text")]
    EmptyText,
    #[error("timeout after {attempts} attempt(s): {detail}")]
    Timeout { attempts: u32, detail: String },
    #[error("service returned status {status}: {detail}")]
    Status { status: u16, detail: String },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("missing attribute: {0}")]
    MissingAttribute(String),
    #[error("{0}")]
    Other(String),
}

// ---------------------------------------------------------------------------
// Oracle traits
// ---------------------------------------------------------------------------

pub trait EmbeddingOracle: Send + Sync {
    /// Unit-L2-norm embedding of `text`.
    fn embed(&self, text: &str) -> Result<Vec<f64>, OracleError>;
}

pub trait ModerationOracle: Send + Sync {
    /// Moderation score vector in canonical component order, each in [0,1].
    fn moderate(&self, text: &str) -> Result<Vec<f64>, OracleError>;
}

pub trait ResponseOracle: Send + Sync {
    /// Response of the target model to `prompt`.
    fn respond(&self, prompt: &str) -> Result<String, OracleError>;
}

pub trait VariationOracle: Send + Sync {
    fn mutate(
        &self,
        template: &MutationTemplate,
        parent: &str,
        rng: &mut dyn RngCore,
    ) -> Result<String, OracleError>;

    fn crossover(
        &self,
        template: &CrossoverTemplate,
        a: &str,
        b: &str,
        rng: &mut dyn RngCore,
    ) -> Result<String, OracleError>;
}

// ---------------------------------------------------------------------------
// Bindings
// ---------------------------------------------------------------------------

/// How one oracle role is implemented.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleBinding {
    /// Deterministic hash embedding / seeded token-edit variation.
    Synthetic,
    /// Response generator that echoes the prompt.
    Echo,
    /// Landscape-backed moderation, or landscape-aware echo response with a
    /// refusal region. Requires `OracleConfig.landscape`.
    SyntheticLandscape,
    /// HTTP client adapter.
    ServiceAdapter(ServiceBinding),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceBinding {
    pub endpoint: String,
    pub timeout_ms: u64,
    /// Retries after the first attempt.
    pub retries: u32,
    /// Maximum in-flight requests.
    pub concurrency: usize,
    /// Name of the environment variable holding the credential, if any.
    /// Credentials never appear in config files or logs.
    pub credential_env: Option<String>,
}

impl ServiceBinding {
    fn validate(&self, role: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if self.endpoint.is_empty() {
            errs.push(format!("oracles.{role}: service adapter requires an endpoint URL"));
        }
        if self.timeout_ms == 0 {
            errs.push(format!("oracles.{role}: service adapter requires timeout > 0"));
        }
        if self.concurrency == 0 {
            errs.push(format!("oracles.{role}: concurrency limit must be >= 1"));
        }
        errs
    }
}

/// Multi-peak toxicity landscape standing in for a live generation +
/// moderation pipeline. Peaks are Gaussian bumps in embedding space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticLandscapeSpec {
    pub n_peaks: usize,
    /// Unit vectors in embedding space, one per peak.
    pub peak_centers: Vec<Vec<f64>>,
    pub peak_widths: Vec<f64>,
    /// Peak heights in (0, 1].
    pub peak_heights: Vec<f64>,
    pub noise_amplitude: f64,
    pub refusal_region: Option<RefusalRegion>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefusalRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Human-editable form of a landscape peak: an explicit center vector or an
/// anchor text resolved through the synthetic hash embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandscapePeakInput {
    #[serde(default)]
    pub anchor_text: Option<String>,
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefusalRegionInput {
    #[serde(default)]
    pub anchor_text: Option<String>,
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandscapeInput {
    pub peaks: Vec<LandscapePeakInput>,
    #[serde(default)]
    pub noise_amplitude: f64,
    #[serde(default)]
    pub refusal_region: Option<RefusalRegionInput>,
    #[serde(default)]
    pub seed: u64,
}

fn resolve_center(
    anchor_text: &Option<String>,
    center: &Option<Vec<f64>>,
    d_g: usize,
    what: &str,
) -> Result<Vec<f64>, OracleError> {
    match (center, anchor_text) {
        (Some(c), _) => Ok(c.clone()),
        (None, Some(text)) => synthetic::synthetic_embed(text, d_g),
        (None, None) => Err(OracleError::Other(format!(
            "{what}: either center or anchor_text is required"
        ))),
    }
}

/// Resolve anchor texts into unit centers, producing a runnable spec.
pub fn resolve_landscape(
    input: &LandscapeInput,
    d_g: usize,
) -> Result<SyntheticLandscapeSpec, OracleError> {
    let mut peak_centers = Vec::new();
    let mut peak_widths = Vec::new();
    let mut peak_heights = Vec::new();
    for (i, peak) in input.peaks.iter().enumerate() {
        peak_centers.push(resolve_center(
            &peak.anchor_text,
            &peak.center,
            d_g,
            &format!("landscape.peaks[{i}]"),
        )?);
        peak_widths.push(peak.width);
        peak_heights.push(peak.height);
    }
    let refusal_region = match &input.refusal_region {
        None => None,
        Some(r) => Some(RefusalRegion {
            center: resolve_center(&r.anchor_text, &r.center, d_g, "landscape.refusal_region")?,
            radius: r.radius,
        }),
    };
    Ok(SyntheticLandscapeSpec {
        n_peaks: input.peaks.len(),
        peak_centers,
        peak_widths,
        peak_heights,
        noise_amplitude: input.noise_amplitude,
        refusal_region,
        seed: input.seed,
    })
}

impl SyntheticLandscapeSpec {
    pub fn validate(&self, d_g: usize) -> Vec<String> {
        let mut errs = Vec::new();
        if self.peak_centers.len() != self.n_peaks {
            errs.push(format!(
                "landscape: {} peak_centers for n_peaks={}",
                self.peak_centers.len(),
                self.n_peaks
            ));
        }
        if self.peak_widths.len() != self.n_peaks || self.peak_heights.len() != self.n_peaks {
            errs.push("landscape: peak_widths and peak_heights must match n_peaks".into());
        }
        for (i, c) in self.peak_centers.iter().enumerate() {
            if c.len() != d_g {
                errs.push(format!("landscape: peak_centers[{i}] has {} dims, expected {d_g}", c.len()));
                continue;
            }
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                errs.push(format!("landscape: peak_centers[{i}] norm {norm} not unit"));
            }
        }
        for (i, w) in self.peak_widths.iter().enumerate() {
            if !(*w > 0.0) {
                errs.push(format!("landscape: peak_widths[{i}] = {w} must be > 0"));
            }
        }
        for (i, h) in self.peak_heights.iter().enumerate() {
            if !(*h > 0.0 && *h <= 1.0) {
                errs.push(format!("landscape: peak_heights[{i}] = {h} must be in (0,1]"));
            }
        }
        if self.noise_amplitude < 0.0 {
            errs.push("landscape: noise_amplitude must be >= 0".into());
        }
        if let Some(r) = &self.refusal_region {
            if !(r.radius > 0.0) {
                errs.push("landscape: refusal_region.radius must be > 0".into());
            }
            if r.center.len() != d_g {
                errs.push(format!(
                    "landscape: refusal_region.center has {} dims, expected {d_g}",
                    r.center.len()
                ));
            }
        }
        errs
    }
}

// ---------------------------------------------------------------------------
// Variation operator templates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationOp {
    Substitute,
    Insert,
    Delete,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MutationTemplate {
    pub name: String,
    pub op: MutationOp,
    /// Number of token edits per application; 0 leaves the parent unchanged.
    pub edits: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossoverTemplate {
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorSuite {
    pub mutations: Vec<MutationTemplate>,
    pub crossovers: Vec<CrossoverTemplate>,
}

impl Default for OperatorSuite {
    fn default() -> Self {
        OperatorSuite {
            mutations: vec![
                MutationTemplate {
                    name: "substitute".into(),
                    op: MutationOp::Substitute,
                    edits: 1,
                },
                MutationTemplate {
                    name: "substitute_pair".into(),
                    op: MutationOp::Substitute,
                    edits: 2,
                },
                MutationTemplate {
                    name: "insert".into(),
                    op: MutationOp::Insert,
                    edits: 1,
                },
                MutationTemplate {
                    name: "delete".into(),
                    op: MutationOp::Delete,
                    edits: 1,
                },
            ],
            crossovers: vec![CrossoverTemplate {
                name: "interleave".into(),
            }],
        }
    }
}

// ---------------------------------------------------------------------------
// Per-role configuration
// ---------------------------------------------------------------------------

/// Oracle bindings for the four roles plus the shared landscape and the
/// variation operator suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub embedding: OracleBinding,
    pub moderation: OracleBinding,
    pub response: OracleBinding,
    pub variation: OracleBinding,
    pub landscape: Option<SyntheticLandscapeSpec>,
    pub operator_suite: OperatorSuite,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            embedding: OracleBinding::Synthetic,
            moderation: OracleBinding::SyntheticLandscape,
            response: OracleBinding::SyntheticLandscape,
            variation: OracleBinding::Synthetic,
            landscape: None,
            operator_suite: OperatorSuite::default(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let needs_landscape = [&self.moderation, &self.response]
            .iter()
            .any(|b| matches!(b, OracleBinding::SyntheticLandscape));
        match (&self.landscape, needs_landscape) {
            (None, true) => {
                errs.push("oracles: synthetic_landscape binding requires a landscape spec".into())
            }
            _ => {}
        }
        for (role, b) in [
            ("embedding", &self.embedding),
            ("moderation", &self.moderation),
            ("response", &self.response),
            ("variation", &self.variation),
        ] {
            match b {
                OracleBinding::ServiceAdapter(sb) => errs.extend(sb.validate(role)),
                OracleBinding::Echo if role != "response" => {
                    errs.push(format!("oracles.{role}: echo binding only applies to response"));
                }
                _ => {}
            }
        }
        if self.operator_suite.mutations.is_empty() {
            errs.push("oracles: operator suite needs at least one mutation template".into());
        }
        errs
    }

    /// Landscape spec, validated, for bindings that need it.
    fn landscape_for(&self, role: &str) -> Result<&SyntheticLandscapeSpec, OracleError> {
        self.landscape
            .as_ref()
            .ok_or_else(|| OracleError::Other(format!("{role}: no landscape spec configured")))
    }
}

/// A full set of bound oracles.
pub struct OracleSet {
    pub embedding: Box<dyn EmbeddingOracle>,
    pub moderation: Box<dyn ModerationOracle>,
    pub response: Box<dyn ResponseOracle>,
    pub variation: Box<dyn VariationOracle>,
}

/// Instantiate oracles from their bindings. `vocab_texts` feeds the synthetic
/// variation vocabulary (typically the seed prompts).
pub fn build_oracles(
    cfg: &OracleConfig,
    d_g: usize,
    d_p: usize,
    vocab_texts: &[String],
) -> Result<OracleSet, OracleError> {
    let embedding: Box<dyn EmbeddingOracle> = match &cfg.embedding {
        OracleBinding::Synthetic => Box::new(synthetic::HashEmbedding { d_g }),
        OracleBinding::ServiceAdapter(sb) => Box::new(ServiceEmbedding::new(sb.clone(), d_g)?),
        other => {
            return Err(OracleError::Other(format!(
                "embedding role cannot be bound to {other:?}"
            )))
        }
    };
    let moderation: Box<dyn ModerationOracle> = match &cfg.moderation {
        OracleBinding::SyntheticLandscape => Box::new(SyntheticModeration::new(
            cfg.landscape_for("moderation")?.clone(),
            d_g,
            d_p,
        )),
        OracleBinding::ServiceAdapter(sb) => Box::new(ServiceModeration::new(sb.clone(), d_p)?),
        other => {
            return Err(OracleError::Other(format!(
                "moderation role cannot be bound to {other:?}"
            )))
        }
    };
    let response: Box<dyn ResponseOracle> = match &cfg.response {
        OracleBinding::Echo => Box::new(EchoResponse),
        OracleBinding::SyntheticLandscape => Box::new(SyntheticResponse::new(
            cfg.landscape_for("response")?.refusal_region.clone(),
            d_g,
        )),
        OracleBinding::ServiceAdapter(sb) => Box::new(ServiceResponse::new(sb.clone())?),
        other => {
            return Err(OracleError::Other(format!(
                "response role cannot be bound to {other:?}"
            )))
        }
    };
    let variation: Box<dyn VariationOracle> = match &cfg.variation {
        OracleBinding::Synthetic => Box::new(SyntheticVariation::from_texts(vocab_texts)),
        other => {
            return Err(OracleError::Other(format!(
                "variation role cannot be bound to {other:?}"
            )))
        }
    };
    Ok(OracleSet {
        embedding,
        moderation,
        response,
        variation,
    })
}
