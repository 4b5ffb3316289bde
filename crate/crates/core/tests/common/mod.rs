//! Shared helpers for integration tests: bundled assets, golden fixture
//! execution, and fully audited end-to-end runs.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde_json::Value;

use speqd::audit::audit_state;
use speqd::evolution::{select_mode, Engine, GenerationReport, ModeControllerState};
use speqd::model::{
    Genome, GenomeId, PopulationState, RunConfig, SpeciesId, SpeciesState,
};
use speqd::persistence::{self, to_canonical_json};
use speqd::speciation::{initial_speciation, speciate};

pub fn asset_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets").join(name)
}

pub fn shipped_config() -> RunConfig {
    persistence::load_config(&asset_path("config.json")).expect("shipped config parses")
}

pub fn shipped_corpus() -> Vec<String> {
    persistence::load_prompts(&asset_path("corpus.txt")).expect("shipped corpus loads")
}

// ---------------------------------------------------------------------------
// Golden algorithm-trace fixtures
// ---------------------------------------------------------------------------

pub fn load_fixture(name: &str) -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    let raw = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {path:?}: {e}"));
    serde_json::from_str(&raw).expect("fixture parses")
}

/// Execute one golden fixture and compare against its frozen expectations.
/// Returns an error description instead of panicking so callers can
/// aggregate results.
pub fn check_fixture(name: &str) -> Result<(), String> {
    let fx = load_fixture(name);
    let cfg: RunConfig =
        serde_json::from_value(fx["cfg"].clone()).map_err(|e| format!("{name}: cfg: {e}"))?;
    let op = fx["op"].as_str().unwrap_or_default().to_string();

    let expect = |label: &str, got: String, want: String| -> Result<(), String> {
        if got == want {
            Ok(())
        } else {
            Err(format!("{name}: {label} mismatch\n  got:  {got}\n  want: {want}"))
        }
    };

    if op == "initial" {
        let pool: Vec<Genome> =
            serde_json::from_value(fx["pool"].clone()).map_err(|e| format!("{name}: {e}"))?;
        let mut state = PopulationState::new();
        let ids: Vec<GenomeId> = pool
            .iter()
            .map(|g| {
                state.genomes.insert(g.id.clone(), g.clone());
                g.id.clone()
            })
            .collect();
        let (minted, reserves, archived) =
            initial_speciation(&ids, &mut state, &cfg).map_err(|e| format!("{name}: {e}"))?;
        let minted_species: Vec<Value> = minted
            .iter()
            .map(|sid| serde_json::to_value(&state.species[sid]).unwrap())
            .collect();
        expect(
            "species",
            to_canonical_json(&minted_species),
            to_canonical_json(&fx["expected"]["species"]),
        )?;
        expect(
            "reserves",
            to_canonical_json(&reserves),
            to_canonical_json(&fx["expected"]["reserves"]),
        )?;
        expect(
            "archive",
            to_canonical_json(&archived),
            to_canonical_json(&fx["expected"]["archive"]),
        )
    } else {
        let mut state: PopulationState =
            serde_json::from_value(fx["state"].clone()).map_err(|e| format!("{name}: {e}"))?;
        let children: Vec<Genome> =
            serde_json::from_value(fx["children"].clone()).map_err(|e| format!("{name}: {e}"))?;
        let outcome =
            speciate(children, &mut state, &cfg).map_err(|e| format!("{name}: {e}"))?;
        expect(
            "outcome",
            to_canonical_json(&outcome),
            to_canonical_json(&fx["expected"]["outcome"]),
        )?;
        let post: Vec<Value> = state
            .species
            .values()
            .map(|sp| serde_json::to_value(sp).unwrap())
            .collect();
        expect(
            "post species",
            to_canonical_json(&post),
            to_canonical_json(&fx["expected"]["post_species"]),
        )?;
        let reserves: Vec<&GenomeId> = state.reserves.iter().collect();
        expect(
            "post reserves",
            to_canonical_json(&reserves),
            to_canonical_json(&fx["expected"]["post_reserves"]),
        )?;
        expect(
            "post archive",
            to_canonical_json(&state.archive),
            to_canonical_json(&fx["expected"]["post_archive"]),
        )
    }
}

pub const ALL_FIXTURES: [&str; 7] = [
    "initial_identical.json",
    "initial_distant.json",
    "initial_two_clusters.json",
    "speciate_noop.json",
    "speciate_promotion.json",
    "speciate_merge.json",
    "speciate_capacity.json",
];

// ---------------------------------------------------------------------------
// Audited end-to-end runs
// ---------------------------------------------------------------------------

pub struct ArmOutcome {
    pub seed: u64,
    pub speciated: bool,
    pub state: PopulationState,
    pub cfg: RunConfig,
    pub reports: Vec<GenerationReport>,
    pub audit_violations: Vec<String>,
    pub runtime: Duration,
}

/// Run one arm for the full shipped budget, auditing every generation:
/// state invariants, archive monotonicity, frozen-parent exclusion, mode
/// soundness, request accounting, and the refusal-penalty relation.
pub fn run_arm_audited(seed: u64, speciated: bool) -> ArmOutcome {
    let mut cfg = shipped_config();
    cfg.seed = seed;
    cfg.mode_enabled = speciated;
    let corpus = shipped_corpus();

    let start = Instant::now();
    let mut engine = Engine::new(cfg.clone(), &corpus).expect("engine builds");
    let mut violations: Vec<String> = audit_state(&engine.state, &cfg)
        .iter()
        .map(|v| format!("seed {seed} init: {v}"))
        .collect();
    let mut reports = Vec::new();

    for _ in 0..cfg.generations {
        let prev_archive = engine.state.archive.clone();
        let prev_species: BTreeMap<SpeciesId, (SpeciesState, BTreeSet<GenomeId>)> = engine
            .state
            .species
            .values()
            .map(|sp| (sp.id.clone(), (sp.state, sp.member_ids.clone())))
            .collect();
        let any_active_before = prev_species
            .values()
            .any(|(st, _)| *st == SpeciesState::Active);

        let report = engine.step().expect("step");
        let g = report.generation;

        for v in audit_state(&engine.state, &cfg) {
            violations.push(format!("seed {seed} gen {g}: {v}"));
        }

        // Archive is append-only: the previous archive must be a prefix.
        if engine.state.archive.len() < prev_archive.len()
            || engine.state.archive[..prev_archive.len()] != prev_archive[..]
        {
            violations.push(format!("seed {seed} gen {g}: archive not append-only"));
        }

        // Frozen species never source parents while an active species exists
        // (unless reactivated during this step).
        if speciated {
            for pid in &report.parents {
                let Some((sid, (st, _))) = prev_species
                    .iter()
                    .find(|(_, (_, members))| members.contains(pid))
                else {
                    continue;
                };
                if *st == SpeciesState::Frozen
                    && any_active_before
                    && !report.reactivated_species.contains(sid)
                {
                    violations.push(format!(
                        "seed {seed} gen {g}: parent {pid} drawn from frozen species {sid}"
                    ));
                }
            }
        }

        // Mode soundness: recomputing the mode from the logged histories
        // reproduces the logged mode.
        if speciated {
            let truncated_mean: Vec<(u32, f64)> = engine
                .state
                .mean_fitness_history
                .iter()
                .filter(|(gen, _)| *gen < g)
                .cloned()
                .collect();
            let truncated_best: Vec<(u32, f64)> = engine
                .state
                .global_best_history
                .iter()
                .filter(|(gen, _)| *gen < g)
                .cloned()
                .collect();
            let ctl = ModeControllerState {
                window: cfg.window,
                tau_slope: cfg.tau_slope,
                t_global: cfg.t_global,
                mean_fitness_history: &truncated_mean,
                global_best_history: &truncated_best,
            };
            let recomputed = select_mode(&ctl, g - 1);
            if recomputed != report.mode {
                violations.push(format!(
                    "seed {seed} gen {g}: logged mode {:?} != recomputed {recomputed:?}",
                    report.mode
                ));
            }
        }

        // Request accounting reconciles exactly.
        if report.n_children_requested
            != report.n_children_valid + report.n_dropped_invalid + report.n_oracle_failures
        {
            violations.push(format!(
                "seed {seed} gen {g}: requested {} != valid {} + dropped {} + failures {}",
                report.n_children_requested,
                report.n_children_valid,
                report.n_dropped_invalid,
                report.n_oracle_failures
            ));
        }

        reports.push(report);
    }

    // Refusal-penalty relation over every discovered genome.
    for gnm in engine.state.genomes.values() {
        let expected = if gnm.is_refusal {
            cfg.refusal_penalty * gnm.raw_fitness
        } else {
            gnm.raw_fitness
        };
        if gnm.fitness != expected {
            violations.push(format!(
                "seed {seed}: genome {} fitness {} inconsistent with refusal flag",
                gnm.id, gnm.fitness
            ));
        }
    }

    ArmOutcome {
        seed,
        speciated,
        state: engine.state,
        cfg,
        reports,
        audit_violations: violations,
        runtime: start.elapsed(),
    }
}
