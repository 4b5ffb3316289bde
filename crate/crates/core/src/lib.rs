//! Speciated quality-diversity evolutionary search.
//!
//! The engine maintains a population of candidate prompts partitioned into
//! capacity-limited species via online leader-follower clustering under an
//! ensemble (semantic + behavioral) distance. Species-aware parent selection
//! trades off within-niche exploitation against cross-niche exploration, a
//! reserve pool buffers outliers and emerging niches, and an append-only
//! archive collects evicted genomes. Everything is deterministic given a
//! seed when bound to the bundled synthetic oracles.
//!
//! Module map:
//! - [`model`]: domain types (genomes, species, population state, config)
//! - [`distance`]: the ensemble distance metric and its verification protocol
//! - [`speciation`]: initial species formation and per-generation clustering
//! - [`evolution`]: the generation loop, mode controller, selection, evaluation
//! - [`oracles`]: synthetic and service-backed generation/moderation/embedding
//! - [`metrics`]: quality/diversity statistics and exports
//! - [`audit`]: whole-state invariant checks used by tests and snapshot loads
//! - [`persistence`]: canonical JSON snapshots, run logs, resume

pub mod audit;
pub mod distance;
pub mod evolution;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod persistence;
pub mod speciation;

#[cfg(test)]
pub(crate) mod testutil;
