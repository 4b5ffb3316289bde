//! Whole-state invariant checks.
//!
//! [`structural_violations`] covers referential integrity and location
//! exclusivity; [`audit_state`] adds every distance- and threshold-dependent
//! invariant. Test builds run these after every generation; snapshot loading
//! runs them before returning a state.

use std::collections::BTreeMap;

use crate::distance::ensemble_distance;
use crate::model::{
    fitness_desc, validate_genome_with_penalty, GenomeId, PopulationState, RunConfig,
    SpeciesState, Violation,
};

/// Referential integrity and location exclusivity. Every genome id known to
/// the state must occupy exactly one location: some species member set, the
/// reserves, or the archive.
pub fn structural_violations(state: &PopulationState) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen: BTreeMap<GenomeId, String> = BTreeMap::new();
    let mut record = |id: &GenomeId, location: String, out: &mut Vec<Violation>| {
        if let Some(prev) = seen.get(id) {
            out.push(Violation::new(
                "location_exclusivity",
                format!("{id} is in {prev} and {location}"),
            ));
        } else {
            seen.insert(id.clone(), location);
        }
    };

    for (sid, sp) in &state.species {
        if &sp.id != sid {
            out.push(Violation::new(
                "species_key",
                format!("species map key {sid} != species id {}", sp.id),
            ));
        }
        if !sp.member_ids.contains(&sp.leader_id) {
            out.push(Violation::new(
                "leader_membership",
                format!("{sid}: leader {} not in member set", sp.leader_id),
            ));
        }
        for m in &sp.member_ids {
            record(m, format!("species {sid}"), &mut out);
        }
    }
    for r in &state.reserves {
        record(r, "reserves".to_string(), &mut out);
    }
    let mut archived_seen = std::collections::BTreeSet::new();
    for a in &state.archive {
        if !archived_seen.insert(a) {
            out.push(Violation::new(
                "archive_duplicate",
                format!("{a} appears twice in the archive"),
            ));
            continue;
        }
        record(a, "archive".to_string(), &mut out);
    }

    // Both directions: every located id resolves to a genome, and every
    // genome has a location.
    for id in seen.keys() {
        if !state.genomes.contains_key(id) {
            out.push(Violation::new(
                "unknown_genome",
                format!("{id} referenced but absent from the genome map"),
            ));
        }
    }
    for id in state.genomes.keys() {
        if !seen.contains_key(id) {
            out.push(Violation::new(
                "unlocated_genome",
                format!("{id} has no current location"),
            ));
        }
    }
    out
}

/// Full invariant audit of a population snapshot under its configuration.
pub fn audit_state(state: &PopulationState, cfg: &RunConfig) -> Vec<Violation> {
    let mut out = structural_violations(state);
    if !out.is_empty() {
        return out;
    }

    for g in state.genomes.values() {
        out.extend(validate_genome_with_penalty(
            g,
            &cfg.distance,
            cfg.refusal_penalty,
        ));
    }

    for (sid, sp) in &state.species {
        let leader = &state.genomes[&sp.leader_id];
        for m in &sp.member_ids {
            let g = &state.genomes[m];
            // Leader-maximality with the deterministic tie-break.
            if sp.is_active() && fitness_desc(g, leader) == std::cmp::Ordering::Less {
                out.push(Violation::new(
                    "leader_maximality",
                    format!("{sid}: member {m} outranks leader {}", sp.leader_id),
                ));
            }
            match ensemble_distance(g, leader, &cfg.distance) {
                Ok(d) if d >= cfg.theta_sim => out.push(Violation::new(
                    "radius_soundness",
                    format!("{sid}: d({m}, leader) = {d} >= theta_sim {}", cfg.theta_sim),
                )),
                Ok(_) => {}
                Err(e) => out.push(Violation::new(
                    "radius_soundness",
                    format!("{sid}: distance to leader failed for {m}: {e}"),
                )),
            }
            if g.fitness > sp.max_fitness + 1e-12 {
                out.push(Violation::new(
                    "max_fitness_monotone",
                    format!(
                        "{sid}: member {m} fitness {} above recorded max {}",
                        g.fitness, sp.max_fitness
                    ),
                ));
            }
        }
        if sp.size() > cfg.c_species {
            out.push(Violation::new(
                "species_capacity",
                format!("{sid}: {} members > c_species {}", sp.size(), cfg.c_species),
            ));
        }
        if sp.size() < cfg.c_min {
            out.push(Violation::new(
                "species_min_viability",
                format!("{sid}: {} members < c_min {}", sp.size(), cfg.c_min),
            ));
        }
        if sp.is_active() && sp.stagnation >= cfg.t_species {
            out.push(Violation::new(
                "freeze_threshold",
                format!(
                    "{sid}: active with stagnation {} >= t_species {}",
                    sp.stagnation, cfg.t_species
                ),
            ));
        }
    }

    // Merge fixpoint over species leaders, once merging is permitted.
    if state.generation >= cfg.t_merge {
        let species: Vec<_> = state.species.values().collect();
        for (i, a) in species.iter().enumerate() {
            for b in species.iter().skip(i + 1) {
                let la = &state.genomes[&a.leader_id];
                let lb = &state.genomes[&b.leader_id];
                if let Ok(d) = ensemble_distance(la, lb, &cfg.distance) {
                    if d < cfg.theta_merge {
                        out.push(Violation::new(
                            "merge_fixpoint",
                            format!(
                                "leaders of {} and {} at d = {d} < theta_merge {}",
                                a.id, b.id, cfg.theta_merge
                            ),
                        ));
                    }
                }
            }
        }
    }

    if state.reserves.len() > cfg.c_reserves {
        out.push(Violation::new(
            "reserves_capacity",
            format!(
                "{} reserves > c_reserves {}",
                state.reserves.len(),
                cfg.c_reserves
            ),
        ));
    }

    // Histories: cumulative best is non-decreasing and matches global_best.
    let mut prev = f64::NEG_INFINITY;
    for (g, v) in &state.global_best_history {
        if *v < prev {
            out.push(Violation::new(
                "global_best_monotone",
                format!("global best history decreases at generation {g}: {v} < {prev}"),
            ));
        }
        prev = *v;
    }
    if let Some((_, last)) = state.global_best_history.last() {
        if (last - state.global_best).abs() > 0.0 {
            out.push(Violation::new(
                "global_best_consistency",
                format!(
                    "global_best {} != last history entry {}",
                    state.global_best, last
                ),
            ));
        }
    }

    out
}

/// True when any frozen species exists.
pub fn any_frozen(state: &PopulationState) -> bool {
    state
        .species
        .values()
        .any(|s| s.state == SpeciesState::Frozen)
}
