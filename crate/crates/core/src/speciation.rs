//! Species formation and per-generation leader-follower clustering.
//!
//! [`initial_speciation`] builds the first species set from an evaluated
//! pool: repeatedly take the fittest unassigned genome as a tentative leader,
//! gather everything within `theta_sim`, and either accept the species or
//! push the lone leader to reserves when fewer than `c_min` genomes gather.
//!
//! [`speciate`] is the per-generation pass: children join their nearest
//! leader inside the radius (or fall into reserves), reserves mint new
//! species, members drifted out of radius are evicted, leaders closer than
//! `theta_merge` trigger species merges, capacities are enforced by
//! archiving, stagnation freezes species, and undersized species dissolve
//! back into reserves.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::structural_violations;
use crate::distance::{ensemble_distance, DistanceError};
use crate::model::{
    fitness_desc, Genome, GenomeId, PopulationState, RunConfig, Species, SpeciesId, SpeciesState,
};

#[derive(Debug, Error)]
pub enum SpeciationError {
    #[error("inconsistent population state: {0}")]
    InconsistentState(String),
    #[error("unknown genome id {0}")]
    UnknownGenome(GenomeId),
    #[error(transparent)]
    Distance(#[from] DistanceError),
}

/// Audit record of one speciation pass. Every input genome id ends up in
/// exactly one of `assigned`, `reserve_ids`, or `archived_ids`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SpeciationOutcome {
    /// Final species assignment for each input genome that ended in a species.
    pub assigned: BTreeMap<GenomeId, SpeciesId>,
    /// Species minted from reserves during this pass.
    pub new_species_ids: Vec<SpeciesId>,
    /// (absorbed, surviving) species pairs merged this pass.
    pub merged_pairs: Vec<(SpeciesId, SpeciesId)>,
    /// Species frozen by the stagnation rule this pass.
    pub frozen_ids: Vec<SpeciesId>,
    /// Species dissolved into reserves for falling below `c_min`.
    pub dissolved_ids: Vec<SpeciesId>,
    /// Every genome archived during this pass, in archive order.
    pub archived_ids: Vec<GenomeId>,
    /// Every genome that newly entered (and stayed in) the reserves.
    pub reserve_ids: Vec<GenomeId>,
}

fn genome<'a>(state: &'a PopulationState, id: &GenomeId) -> Result<&'a Genome, SpeciationError> {
    state
        .genomes
        .get(id)
        .ok_or_else(|| SpeciationError::UnknownGenome(id.clone()))
}

fn dist(
    state: &PopulationState,
    a: &GenomeId,
    b: &GenomeId,
    cfg: &RunConfig,
) -> Result<f64, SpeciationError> {
    let ga = genome(state, a)?;
    let gb = genome(state, b)?;
    Ok(ensemble_distance(ga, gb, &cfg.distance)?)
}

/// Ids sorted by descending fitness with the deterministic tie-break.
fn sort_by_fitness_desc(ids: &mut [GenomeId], state: &PopulationState) {
    ids.sort_by(|a, b| fitness_desc(&state.genomes[a], &state.genomes[b]));
}

/// The member that leader-maximality elects: best fitness, ties broken by
/// earlier creation then smaller id.
fn elect_leader(members: &BTreeSet<GenomeId>, state: &PopulationState) -> GenomeId {
    members
        .iter()
        .min_by(|a, b| fitness_desc(&state.genomes[a], &state.genomes[b]))
        .expect("species cannot be empty")
        .clone()
}

// ---------------------------------------------------------------------------
// Initial species and reserve formation
// ---------------------------------------------------------------------------

/// Form species from an evaluated pool of genome ids already present in
/// `state.genomes`. Mints species into `state.species`, adds leftovers to
/// `state.reserves`, and archives per-species capacity overflow. Returns
/// (new species ids, ids moved to reserves, ids archived).
pub fn initial_speciation(
    pool: &[GenomeId],
    state: &mut PopulationState,
    cfg: &RunConfig,
) -> Result<(Vec<SpeciesId>, Vec<GenomeId>, Vec<GenomeId>), SpeciationError> {
    let mut remaining: Vec<GenomeId> = pool.to_vec();
    for id in &remaining {
        genome(state, id)?;
    }
    sort_by_fitness_desc(&mut remaining, state);

    let mut new_species = Vec::new();
    let mut to_reserves = Vec::new();
    let mut archived = Vec::new();

    while !remaining.is_empty() {
        let leader = remaining[0].clone();
        let mut members: BTreeSet<GenomeId> = BTreeSet::new();
        members.insert(leader.clone());
        for other in remaining.iter().skip(1) {
            if dist(state, other, &leader, cfg)? < cfg.theta_sim {
                members.insert(other.clone());
            }
        }
        if members.len() < cfg.c_min {
            // Discard the tentative species; only the leader leaves the pool.
            to_reserves.push(leader.clone());
            remaining.remove(0);
        } else {
            let leader_fitness = state.genomes[&leader].fitness;
            let sid = state.next_species_id();
            state.species.insert(
                sid.clone(),
                Species {
                    id: sid.clone(),
                    leader_id: leader.clone(),
                    member_ids: members.clone(),
                    max_fitness: leader_fitness,
                    stagnation: 0,
                    state: SpeciesState::Active,
                    created_generation: state.generation,
                },
            );
            new_species.push(sid);
            remaining.retain(|id| !members.contains(id));
        }
    }

    // Per-species capacity: archive the least fit overflow.
    for sid in &new_species {
        archived.extend(enforce_capacity(state, sid, cfg));
    }

    for id in &to_reserves {
        state.reserves.insert(id.clone());
    }

    // Reserve capacity: keep the fittest, archive the rest.
    archived.extend(enforce_reserve_capacity(state, cfg));

    Ok((new_species, to_reserves, archived))
}

/// Truncate one species to `c_species` members, archiving from the least fit
/// upward. Returns the archived ids in archive order.
fn enforce_capacity(state: &mut PopulationState, sid: &SpeciesId, cfg: &RunConfig) -> Vec<GenomeId> {
    let sp = &state.species[sid];
    if sp.size() <= cfg.c_species {
        return Vec::new();
    }
    let mut ordered: Vec<GenomeId> = sp.member_ids.iter().cloned().collect();
    sort_by_fitness_desc(&mut ordered, state);
    let mut archived = Vec::new();
    while ordered.len() > cfg.c_species {
        let evicted = ordered.pop().expect("non-empty");
        archived.push(evicted);
    }
    let keep: BTreeSet<GenomeId> = ordered.into_iter().collect();
    let sp = state.species.get_mut(sid).expect("species exists");
    sp.member_ids = keep;
    for id in &archived {
        state.archive.push(id.clone());
    }
    archived
}

/// Trim reserves to `c_reserves`, keeping the highest-fitness genomes and
/// archiving the rest from the least fit upward.
fn enforce_reserve_capacity(state: &mut PopulationState, cfg: &RunConfig) -> Vec<GenomeId> {
    if state.reserves.len() <= cfg.c_reserves {
        return Vec::new();
    }
    let mut ordered: Vec<GenomeId> = state.reserves.iter().cloned().collect();
    sort_by_fitness_desc(&mut ordered, state);
    let mut archived = Vec::new();
    while ordered.len() > cfg.c_reserves {
        let evicted = ordered.pop().expect("non-empty");
        state.reserves.remove(&evicted);
        state.archive.push(evicted.clone());
        archived.push(evicted);
    }
    archived
}

// ---------------------------------------------------------------------------
// Per-generation leader-follower pass
// ---------------------------------------------------------------------------

/// Run one leader-follower speciation pass over freshly evaluated children.
/// The children are registered into the state and placed; all maintenance
/// phases run in algorithm order.
pub fn speciate(
    children: Vec<Genome>,
    state: &mut PopulationState,
    cfg: &RunConfig,
) -> Result<SpeciationOutcome, SpeciationError> {
    let structural = structural_violations(state);
    if let Some(v) = structural.first() {
        return Err(SpeciationError::InconsistentState(v.to_string()));
    }

    let mut outcome = SpeciationOutcome::default();
    let reserves_before: BTreeSet<GenomeId> = state.reserves.clone();
    let child_ids: BTreeSet<GenomeId> = children.iter().map(|c| c.id.clone()).collect();

    // Phase 1: reset per-species new-best flags.
    let mut new_best: BTreeMap<SpeciesId, bool> =
        state.species.keys().map(|id| (id.clone(), false)).collect();

    // Register children.
    let mut ordered_children: Vec<GenomeId> = Vec::with_capacity(children.len());
    for child in children {
        ordered_children.push(child.id.clone());
        if state.genomes.insert(child.id.clone(), child).is_some() {
            return Err(SpeciationError::InconsistentState(
                "duplicate child genome id".to_string(),
            ));
        }
    }
    sort_by_fitness_desc(&mut ordered_children, state);

    // Phase 2: assign each child to the nearest leader inside the radius,
    // or push it to the reserves.
    for cid in &ordered_children {
        let mut nearest: Option<(f64, SpeciesId)> = None;
        for sp in state.species.values() {
            let d = dist(state, cid, &sp.leader_id, cfg)?;
            if d >= cfg.theta_sim {
                continue;
            }
            let better = match &nearest {
                None => true,
                Some((best_d, best_sid)) => {
                    let best_leader = &state.genomes[&state.species[best_sid].leader_id];
                    let this_leader = &state.genomes[&sp.leader_id];
                    d.total_cmp(best_d)
                        .then_with(|| {
                            (this_leader.generation_created, &this_leader.id)
                                .cmp(&(best_leader.generation_created, &best_leader.id))
                        })
                        .is_lt()
                }
            };
            if better {
                nearest = Some((d, sp.id.clone()));
            }
        }
        match nearest {
            Some((_, sid)) => {
                let child_fitness = state.genomes[cid].fitness;
                let sp = state.species.get_mut(&sid).expect("species exists");
                if child_fitness > sp.max_fitness {
                    sp.max_fitness = child_fitness;
                    new_best.insert(sid.clone(), true);
                }
                sp.member_ids.insert(cid.clone());
                let leader_fitness = state.genomes[&sp.leader_id].fitness;
                if child_fitness > leader_fitness {
                    state.species.get_mut(&sid).unwrap().leader_id = cid.clone();
                }
            }
            None => {
                state.reserves.insert(cid.clone());
            }
        }
    }

    // Phase 3: mint new species from the reserves.
    let reserve_pool: Vec<GenomeId> = {
        let mut ids: Vec<GenomeId> = state.reserves.iter().cloned().collect();
        sort_by_fitness_desc(&mut ids, state);
        ids
    };
    if !reserve_pool.is_empty() {
        for id in &reserve_pool {
            state.reserves.remove(id);
        }
        let (minted, _leftover, archived) = initial_speciation(&reserve_pool, state, cfg)?;
        for sid in &minted {
            new_best.insert(sid.clone(), true);
        }
        outcome.new_species_ids = minted;
        outcome.archived_ids.extend(archived);
    }

    // Phase 4: radius cleanup.
    evict_out_of_radius(state, cfg)?;

    // Phase 5: merge species whose leaders are within theta_merge.
    if state.generation >= cfg.t_merge {
        let merged = merge_close_species(state, cfg, &mut new_best)?;
        outcome.merged_pairs = merged;
        // Absorbed members may sit outside the surviving leader's radius;
        // sweep again so radius soundness holds after the pass.
        if !outcome.merged_pairs.is_empty() {
            evict_out_of_radius(state, cfg)?;
        }
    }

    // Phase 6: per-species capacity.
    let sids: Vec<SpeciesId> = state.species.keys().cloned().collect();
    for sid in &sids {
        outcome.archived_ids.extend(enforce_capacity(state, sid, cfg));
    }

    // Phase 7: stagnation bookkeeping and freezing.
    for sid in &sids {
        if !state.species.contains_key(sid) {
            continue;
        }
        let improved = new_best.get(sid).copied().unwrap_or(false);
        let sp = state.species.get_mut(sid).expect("species exists");
        if improved {
            sp.stagnation = 0;
        } else {
            sp.stagnation += 1;
            if sp.stagnation >= cfg.t_species && sp.state == SpeciesState::Active {
                sp.state = SpeciesState::Frozen;
                outcome.frozen_ids.push(sid.clone());
            }
        }
    }

    // Phase 8: dissolve species that fell below the viability minimum.
    let undersized: Vec<SpeciesId> = state
        .species
        .values()
        .filter(|sp| sp.size() < cfg.c_min)
        .map(|sp| sp.id.clone())
        .collect();
    for sid in undersized {
        let sp = state.species.remove(&sid).expect("species exists");
        for m in sp.member_ids {
            state.reserves.insert(m);
        }
        outcome.dissolved_ids.push(sid);
    }

    // Phase 9: reserve overflow to archive.
    outcome
        .archived_ids
        .extend(enforce_reserve_capacity(state, cfg));

    // Final bookkeeping: where did the inputs and movers end up?
    let archived_set: BTreeSet<&GenomeId> = outcome.archived_ids.iter().collect();
    for sp in state.species.values() {
        for m in &sp.member_ids {
            if child_ids.contains(m) {
                outcome.assigned.insert(m.clone(), sp.id.clone());
            }
        }
    }
    for r in &state.reserves {
        if !reserves_before.contains(r) {
            outcome.reserve_ids.push(r.clone());
        }
    }
    debug_assert!(child_ids.iter().all(|c| {
        (outcome.assigned.contains_key(c) as u8)
            + (outcome.reserve_ids.contains(c) as u8)
            + (archived_set.contains(c) as u8)
            == 1
    }));

    Ok(outcome)
}

/// Evict members whose distance to their leader exceeds the radius.
fn evict_out_of_radius(state: &mut PopulationState, cfg: &RunConfig) -> Result<(), SpeciationError> {
    let sids: Vec<SpeciesId> = state.species.keys().cloned().collect();
    for sid in sids {
        let (leader_id, members): (GenomeId, Vec<GenomeId>) = {
            let sp = &state.species[&sid];
            (sp.leader_id.clone(), sp.member_ids.iter().cloned().collect())
        };
        let mut evicted = Vec::new();
        for m in members {
            if m == leader_id {
                continue;
            }
            if dist(state, &m, &leader_id, cfg)? >= cfg.theta_sim {
                evicted.push(m);
            }
        }
        if evicted.is_empty() {
            continue;
        }
        let sp = state.species.get_mut(&sid).expect("species exists");
        for m in &evicted {
            sp.member_ids.remove(m);
        }
        // Leadership is unaffected: the leader is never evicted.
        for m in evicted {
            state.reserves.insert(m);
        }
    }
    Ok(())
}

/// One merge sweep in descending leader-fitness order: each species absorbs
/// every remaining species whose leader lies within `theta_merge` of its
/// own. Leaders never change during a sweep, so a single sweep reaches the
/// pairwise fixpoint.
fn merge_close_species(
    state: &mut PopulationState,
    cfg: &RunConfig,
    new_best: &mut BTreeMap<SpeciesId, bool>,
) -> Result<Vec<(SpeciesId, SpeciesId)>, SpeciationError> {
    let mut merged_pairs = Vec::new();
    let mut pending: Vec<SpeciesId> = state.species.keys().cloned().collect();
    pending.sort_by(|a, b| {
        let la = &state.genomes[&state.species[a].leader_id];
        let lb = &state.genomes[&state.species[b].leader_id];
        fitness_desc(la, lb).then_with(|| a.cmp(b))
    });

    let mut idx = 0;
    while idx < pending.len() {
        let top = pending[idx].clone();
        let top_leader = state.species[&top].leader_id.clone();
        let mut absorbed = Vec::new();
        for other in pending.iter().skip(idx + 1) {
            let other_leader = state.species[other].leader_id.clone();
            if dist(state, &top_leader, &other_leader, cfg)? < cfg.theta_merge {
                absorbed.push(other.clone());
            }
        }
        for other in &absorbed {
            let victim = state.species.remove(other).expect("species exists");
            let survivor = state.species.get_mut(&top).expect("species exists");
            survivor.member_ids.extend(victim.member_ids);
            survivor.max_fitness = survivor.max_fitness.max(victim.max_fitness);
            new_best.remove(other);
            merged_pairs.push((other.clone(), top.clone()));
        }
        if !absorbed.is_empty() {
            // Recompute the leader canonically; with the sweep order this is
            // the surviving species' existing leader.
            let members = state.species[&top].member_ids.clone();
            let leader = elect_leader(&members, state);
            state.species.get_mut(&top).unwrap().leader_id = leader;
            pending.retain(|sid| !absorbed.contains(sid));
        }
        idx += 1;
    }

    if cfg!(debug_assertions) {
        let leaders: Vec<GenomeId> = state
            .species
            .values()
            .map(|s| s.leader_id.clone())
            .collect();
        for (i, a) in leaders.iter().enumerate() {
            for b in leaders.iter().skip(i + 1) {
                debug_assert!(dist(state, a, b, cfg)? >= cfg.theta_merge);
            }
        }
    }
    Ok(merged_pairs)
}

/// When every species is frozen and no outliers wait in the reserves,
/// reactivate all species so search can resume on them. Returns the
/// reactivated ids (empty when the condition is unmet).
pub fn reactivate_if_stalled(state: &mut PopulationState) -> Vec<SpeciesId> {
    if state.species.is_empty() || !state.reserves.is_empty() {
        return Vec::new();
    }
    if state.species.values().any(|s| s.is_active()) {
        return Vec::new();
    }
    let ids: Vec<SpeciesId> = state.species.keys().cloned().collect();
    for sp in state.species.values_mut() {
        sp.state = SpeciesState::Active;
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::genome_with_embedding;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig {
            c_min: 2,
            c_species: 4,
            c_reserves: 10,
            t_species: 3,
            ..RunConfig::default()
        };
        cfg.distance.d_g = 4;
        cfg
    }

    fn register(state: &mut PopulationState, g: Genome) -> GenomeId {
        let id = g.id.clone();
        state.genomes.insert(id.clone(), g);
        id
    }

    /// Two tight clusters on orthogonal axes plus one far outlier.
    fn two_cluster_state(_cfg: &RunConfig) -> (PopulationState, Vec<GenomeId>) {
        let mut state = PopulationState::new();
        let mut ids = Vec::new();
        let e1 = vec![1.0, 0.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0, 0.0];
        let e3 = vec![0.0, 0.0, 1.0, 0.0];
        for (i, tox) in [(0, 0.9), (1, 0.8), (2, 0.7)] {
            ids.push(register(
                &mut state,
                genome_with_embedding(&format!("g{i:06}"), e1.clone(), tox),
            ));
        }
        for (i, tox) in [(3, 0.6), (4, 0.5)] {
            ids.push(register(
                &mut state,
                genome_with_embedding(&format!("g{i:06}"), e2.clone(), tox),
            ));
        }
        ids.push(register(
            &mut state,
            genome_with_embedding("g000005", e3, 0.4),
        ));
        (state, ids)
    }

    #[test]
    fn initial_speciation_forms_clusters_and_reserves() {
        let cfg = small_cfg();
        let (mut state, ids) = two_cluster_state(&cfg);
        let (species, reserves, archived) = initial_speciation(&ids, &mut state, &cfg).unwrap();
        assert_eq!(species.len(), 2);
        assert_eq!(reserves.len(), 1); // the singleton outlier
        assert!(archived.is_empty());
        // Leader of the first species is the fittest genome overall.
        let s0 = &state.species[&species[0]];
        assert_eq!(s0.leader_id, GenomeId("g000000".into()));
        assert_eq!(s0.size(), 3);
    }

    #[test]
    fn initial_speciation_of_empty_pool_is_empty() {
        let cfg = small_cfg();
        let mut state = PopulationState::new();
        let (species, reserves, archived) = initial_speciation(&[], &mut state, &cfg).unwrap();
        assert!(species.is_empty() && reserves.is_empty() && archived.is_empty());
    }

    #[test]
    fn speciate_assigns_child_and_promotes_leader() {
        let cfg = small_cfg();
        let (mut state, ids) = two_cluster_state(&cfg);
        initial_speciation(&ids, &mut state, &cfg).unwrap();
        // A child on the first cluster's axis, fitter than its leader.
        let child = genome_with_embedding("g000010", vec![1.0, 0.0, 0.0, 0.0], 0.95);
        let outcome = speciate(vec![child], &mut state, &cfg).unwrap();
        let sid = outcome.assigned[&GenomeId("g000010".into())].clone();
        let sp = &state.species[&sid];
        assert_eq!(sp.leader_id, GenomeId("g000010".into()));
        assert_eq!(sp.stagnation, 0);
        assert_eq!(sp.max_fitness, 0.95);
    }

    #[test]
    fn speciate_routes_outlier_to_reserves() {
        let cfg = small_cfg();
        let (mut state, ids) = two_cluster_state(&cfg);
        initial_speciation(&ids, &mut state, &cfg).unwrap();
        let child = genome_with_embedding("g000010", vec![0.0, 0.0, 0.0, 1.0], 0.3);
        let outcome = speciate(vec![child], &mut state, &cfg).unwrap();
        assert!(outcome.reserve_ids.contains(&GenomeId("g000010".into())));
        assert!(outcome.assigned.is_empty());
    }

    #[test]
    fn empty_children_pass_increments_stagnation_and_freezes() {
        let cfg = small_cfg();
        let (mut state, ids) = two_cluster_state(&cfg);
        initial_speciation(&ids, &mut state, &cfg).unwrap();
        for round in 1..=cfg.t_species {
            let outcome = speciate(vec![], &mut state, &cfg).unwrap();
            if round == cfg.t_species {
                assert_eq!(outcome.frozen_ids.len(), state.species.len());
            } else {
                assert!(outcome.frozen_ids.is_empty());
            }
        }
        assert!(state.species.values().all(|s| !s.is_active()));
    }

    #[test]
    fn reserves_mint_new_species_when_enough_gather() {
        let cfg = small_cfg();
        let mut state = PopulationState::new();
        // No species yet; two close children arrive in one generation.
        let e = vec![0.0, 0.0, 0.0, 1.0];
        let a = genome_with_embedding("g000000", e.clone(), 0.5);
        let b = genome_with_embedding("g000001", e, 0.4);
        let outcome = speciate(vec![a, b], &mut state, &cfg).unwrap();
        assert_eq!(outcome.new_species_ids.len(), 1);
        assert_eq!(state.species.len(), 1);
        let sp = state.species.values().next().unwrap();
        assert_eq!(sp.stagnation, 0);
        assert!(outcome.assigned.len() == 2);
    }

    #[test]
    fn merge_absorbs_lower_fitness_species() {
        let mut cfg = small_cfg();
        cfg.theta_sim = 0.4;
        cfg.theta_merge = 0.25;
        // Hand-built state: leaders this close only arise dynamically (after
        // a promotion moved a leader), never from initial formation.
        // Leader distance: 0.7 * (1 - 0.3) / 2 + 0.3 * 0.02 / sqrt(8)
        //                = 0.245 + 0.00212 = 0.2471 < theta_merge.
        let mut state = PopulationState::new();
        let ex = vec![1.0, 0.0, 0.0, 0.0];
        let ey = vec![0.3, (1.0f64 - 0.09).sqrt(), 0.0, 0.0];
        for (i, e, tox) in [
            (0, &ex, 0.90),
            (1, &ex, 0.85),
            (2, &ey, 0.88),
            (3, &ey, 0.84),
        ] {
            register(
                &mut state,
                genome_with_embedding(&format!("g{i:06}"), e.clone(), tox),
            );
        }
        for (seq, leader, members, max) in [
            (0u64, "g000000", vec!["g000000", "g000001"], 0.90),
            (1u64, "g000002", vec!["g000002", "g000003"], 0.88),
        ] {
            let sid = crate::model::SpeciesId::from_seq(seq);
            state.species.insert(
                sid.clone(),
                Species {
                    id: sid,
                    leader_id: GenomeId(leader.into()),
                    member_ids: members.iter().map(|m| GenomeId((*m).into())).collect(),
                    max_fitness: max,
                    stagnation: 0,
                    state: SpeciesState::Active,
                    created_generation: 0,
                },
            );
        }
        state.next_species_seq = 2;

        let outcome = speciate(vec![], &mut state, &cfg).unwrap();
        assert_eq!(outcome.merged_pairs.len(), 1);
        let (absorbed, survivor) = &outcome.merged_pairs[0];
        assert_eq!(absorbed, &crate::model::SpeciesId::from_seq(1));
        assert_eq!(state.species.len(), 1);
        assert!(!state.species.contains_key(absorbed));
        let sp = &state.species[survivor];
        assert_eq!(sp.leader_id, GenomeId("g000000".into()));
        assert_eq!(sp.size(), 4);
        assert_eq!(sp.max_fitness, 0.90);
    }

    #[test]
    fn capacity_archives_least_fit_members() {
        let mut cfg = small_cfg();
        cfg.c_species = 3;
        let mut state = PopulationState::new();
        let e = vec![1.0, 0.0, 0.0, 0.0];
        let mut ids = Vec::new();
        for i in 0..3 {
            ids.push(register(
                &mut state,
                genome_with_embedding(&format!("g{i:06}"), e.clone(), 0.5 + 0.1 * i as f64),
            ));
        }
        initial_speciation(&ids, &mut state, &cfg).unwrap();
        let c1 = genome_with_embedding("g000010", e.clone(), 0.6);
        let c2 = genome_with_embedding("g000011", e, 0.65);
        let outcome = speciate(vec![c1, c2], &mut state, &cfg).unwrap();
        // Species had members at 0.5 / 0.6 / 0.7; children at 0.6 / 0.65 join
        // and capacity 3 keeps the three best.
        assert_eq!(outcome.archived_ids.len(), 2);
        assert_eq!(state.archive.len(), 2);
        let sp = state.species.values().next().unwrap();
        assert_eq!(sp.size(), 3);
        assert_eq!(state.archive[0], GenomeId("g000000".into())); // 0.5 first
    }

    #[test]
    fn dissolution_returns_members_to_reserves() {
        let mut cfg = small_cfg();
        cfg.c_min = 3;
        cfg.theta_sim = 0.25;
        let mut state = PopulationState::new();
        let e1 = vec![1.0, 0.0, 0.0, 0.0];
        let mut ids = Vec::new();
        for i in 0..3 {
            ids.push(register(
                &mut state,
                genome_with_embedding(&format!("g{i:06}"), e1.clone(), 0.9 - 0.1 * i as f64),
            ));
        }
        let (species, _, _) = initial_speciation(&ids, &mut state, &cfg).unwrap();
        assert_eq!(species.len(), 1);
        // Move one member far away so radius cleanup evicts it, dropping the
        // species below c_min.
        let moved = GenomeId("g000002".into());
        state.genomes.get_mut(&moved).unwrap().embedding = vec![0.0, 0.0, 0.0, 1.0];
        let outcome = speciate(vec![], &mut state, &cfg).unwrap();
        assert_eq!(outcome.dissolved_ids.len(), 1);
        assert!(state.species.is_empty());
        assert_eq!(state.reserves.len(), 3);
    }

    #[test]
    fn reactivation_requires_all_frozen_and_empty_reserves() {
        let cfg = small_cfg();
        let (mut state, ids) = two_cluster_state(&cfg);
        initial_speciation(&ids, &mut state, &cfg).unwrap();
        // One genome sits in reserves: no reactivation even when all freeze.
        for sp in state.species.values_mut() {
            sp.state = SpeciesState::Frozen;
        }
        assert!(reactivate_if_stalled(&mut state).is_empty());
        let lonely: Vec<GenomeId> = state.reserves.iter().cloned().collect();
        for id in lonely {
            state.reserves.remove(&id);
            state.archive.push(id);
        }
        let reactivated = reactivate_if_stalled(&mut state);
        assert_eq!(reactivated.len(), 2);
        assert!(state.species.values().all(|s| s.is_active()));
        // Mixed states: no reactivation.
        if let Some(s) = state.species.values_mut().next() {
            s.state = SpeciesState::Frozen;
        }
        assert!(reactivate_if_stalled(&mut state).is_empty());
    }

    #[test]
    fn speciate_rejects_inconsistent_state() {
        let cfg = small_cfg();
        let (mut state, ids) = two_cluster_state(&cfg);
        initial_speciation(&ids, &mut state, &cfg).unwrap();
        // Same id in a species and in the reserves.
        state.reserves.insert(GenomeId("g000000".into()));
        let err = speciate(vec![], &mut state, &cfg).unwrap_err();
        assert!(matches!(err, SpeciationError::InconsistentState(_)));
        assert!(err.to_string().contains("location_exclusivity"));
    }

    #[test]
    fn determinism_same_inputs_same_outcome() {
        let cfg = small_cfg();
        let build = || {
            let (mut state, ids) = two_cluster_state(&cfg);
            initial_speciation(&ids, &mut state, &cfg).unwrap();
            let child = genome_with_embedding("g000010", vec![1.0, 0.0, 0.0, 0.0], 0.95);
            let outcome = speciate(vec![child], &mut state, &cfg).unwrap();
            (
                serde_json::to_string(&outcome).unwrap(),
                serde_json::to_string(&state).unwrap(),
            )
        };
        assert_eq!(build(), build());
    }
}
