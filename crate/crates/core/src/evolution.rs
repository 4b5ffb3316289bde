//! The generation loop: adaptive mode control, species-aware parent
//! selection, variation dispatch, evaluation with the refusal penalty, and
//! the baseline (non-speciated) comparison arm.
//!
//! With synthetic oracles and a fixed seed the whole loop is
//! bit-reproducible: a single seeded ChaCha stream drives every draw in a
//! fixed order, and all state iteration happens over ordered containers.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::qd_score;
use crate::model::{fitness_desc, Genome, GenomeId, PopulationState, RunConfig, SpeciesId};
use crate::oracles::{build_oracles, OracleError, OracleSet, OperatorSuite};
use crate::speciation::{
    initial_speciation, reactivate_if_stalled, speciate, SpeciationError, SpeciationOutcome,
};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("stage {stage}: {detail}")]
    Stage { stage: String, detail: String },
}

impl EvolutionError {
    fn stage(stage: &str, detail: impl ToString) -> Self {
        EvolutionError::Stage {
            stage: stage.to_string(),
            detail: detail.to_string(),
        }
    }
}

impl From<SpeciationError> for EvolutionError {
    fn from(e: SpeciationError) -> Self {
        EvolutionError::stage("speciate", e)
    }
}

/// Canonicalize and deduplicate seed prompts, preserving first occurrence.
fn dedup_seeds(seed_prompts: &[String]) -> Result<Vec<String>, EvolutionError> {
    if seed_prompts.is_empty() {
        return Err(EvolutionError::stage("seeds", "no seed prompts supplied"));
    }
    let mut seen = BTreeSet::new();
    let mut seeds: Vec<String> = Vec::new();
    for raw in seed_prompts {
        let canon = canonicalize(raw);
        if canon.is_empty() || !seen.insert(canon.clone()) {
            continue;
        }
        seeds.push(canon);
    }
    if seeds.is_empty() {
        return Err(EvolutionError::stage(
            "seeds",
            "all seed prompts empty after canonicalization",
        ));
    }
    Ok(seeds)
}

// ---------------------------------------------------------------------------
// Mode controller
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Default,
    Exploitation,
    Exploration,
}

/// Inputs of the mode controller: the window and thresholds plus the
/// gap-free per-generation histories.
pub struct ModeControllerState<'a> {
    pub window: u32,
    pub tau_slope: f64,
    pub t_global: u32,
    /// `mean_fitness_history[i]` is generation i's mean evaluated fitness.
    pub mean_fitness_history: &'a [(u32, f64)],
    /// `global_best_history[i]` is the cumulative best after generation i.
    pub global_best_history: &'a [(u32, f64)],
}

impl<'a> ModeControllerState<'a> {
    pub fn from_config(cfg: &RunConfig, state: &'a PopulationState) -> Self {
        ModeControllerState {
            window: cfg.window,
            tau_slope: cfg.tau_slope,
            t_global: cfg.t_global,
            mean_fitness_history: &state.mean_fitness_history,
            global_best_history: &state.global_best_history,
        }
    }
}

/// Ordinary least-squares slope of `ys` against 0..n.
pub fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (y - y_mean);
        den += dx * dx;
    }
    num / den
}

/// Pick the search mode for the generation after `g`, where `g` is the most
/// recent generation with populated histories. Exploration fires when the
/// global best has not moved over `t_global` generations; otherwise
/// Exploitation fires when the windowed mean-fitness slope drops below
/// `-tau_slope`; otherwise Default. Triggers needing more history than
/// exists cannot fire.
pub fn select_mode(ctl: &ModeControllerState, g: u32) -> Mode {
    let best = ctl.global_best_history;
    let gi = g as usize;
    if g >= ctl.t_global && gi < best.len() {
        let now = best[gi].1;
        let then = best[gi - ctl.t_global as usize].1;
        if now == then {
            return Mode::Exploration;
        }
    }
    let w = ctl.window as usize;
    let means = ctl.mean_fitness_history;
    if gi < means.len() && gi + 1 >= w && w >= 2 {
        let ys: Vec<f64> = means[gi + 1 - w..=gi].iter().map(|(_, v)| *v).collect();
        if least_squares_slope(&ys) < -ctl.tau_slope {
            return Mode::Exploitation;
        }
    }
    Mode::Default
}

// ---------------------------------------------------------------------------
// Parent selection
// ---------------------------------------------------------------------------

fn choose<'a, T>(rng: &mut ChaCha12Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

/// Two distinct indices drawn uniformly from 0..n (n >= 2).
fn choose_two_distinct(rng: &mut ChaCha12Rng, n: usize) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

/// Current quality of a species: best member fitness.
fn species_quality(state: &PopulationState, sid: &SpeciesId) -> f64 {
    state.species[sid]
        .member_ids
        .iter()
        .map(|id| state.genomes[id].fitness)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Active species ids ordered by quality descending (ties by id).
fn active_by_quality(state: &PopulationState) -> Vec<SpeciesId> {
    let mut ids: Vec<SpeciesId> = state
        .species
        .values()
        .filter(|s| s.is_active())
        .map(|s| s.id.clone())
        .collect();
    ids.sort_by(|a, b| {
        species_quality(state, b)
            .total_cmp(&species_quality(state, a))
            .then_with(|| a.cmp(b))
    });
    ids
}

/// Species-aware parent selection. Frozen species are excluded everywhere.
pub fn select_parents(
    state: &PopulationState,
    mode: Mode,
    cfg: &RunConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Genome>, EvolutionError> {
    let active = active_by_quality(state);
    if active.is_empty() {
        let detail = if state.reserves.is_empty() {
            "no active species and no reserves; population is exhausted".to_string()
        } else {
            format!(
                "no active species while {} genomes wait in reserves; speciate reserves first",
                state.reserves.len()
            )
        };
        return Err(EvolutionError::stage("select_parents", detail));
    }

    let members_of = |sid: &SpeciesId| -> Vec<GenomeId> {
        state.species[sid].member_ids.iter().cloned().collect()
    };
    let resolve = |ids: Vec<GenomeId>| -> Vec<Genome> {
        ids.into_iter().map(|id| state.genomes[&id].clone()).collect()
    };

    match mode {
        Mode::Default => {
            let sid = choose(rng, &active).clone();
            let members = members_of(&sid);
            if members.len() >= 2 {
                let (i, j) = choose_two_distinct(rng, members.len());
                Ok(resolve(vec![members[i].clone(), members[j].clone()]))
            } else {
                // Singleton species: pair its member with the next-best
                // active species' leader when one exists.
                let lone = members[0].clone();
                let other = active.iter().find(|s| **s != sid);
                match other {
                    Some(other_sid) => {
                        let leader = state.species[other_sid].leader_id.clone();
                        Ok(resolve(vec![lone, leader]))
                    }
                    None => Ok(resolve(vec![lone.clone(), lone])),
                }
            }
        }
        Mode::Exploitation => {
            let top = active[0].clone();
            let leader = state.species[&top].leader_id.clone();
            let others: Vec<GenomeId> = members_of(&top)
                .into_iter()
                .filter(|id| *id != leader)
                .collect();
            let mut picked = vec![leader];
            match others.len() {
                0 => {}
                1 => picked.push(others[0].clone()),
                n => {
                    let (i, j) = choose_two_distinct(rng, n);
                    picked.push(others[i].clone());
                    picked.push(others[j].clone());
                }
            }
            Ok(resolve(picked))
        }
        Mode::Exploration => {
            let top_k = cfg.n_top_species.min(active.len());
            let mut picked: Vec<GenomeId> = active[..top_k]
                .iter()
                .map(|sid| state.species[sid].leader_id.clone())
                .collect();
            let mut rest: Vec<SpeciesId> = active[top_k..].to_vec();
            let n_random = cfg.n_explore_species.min(rest.len());
            for _ in 0..n_random {
                let idx = rng.random_range(0..rest.len());
                let sid = rest.swap_remove(idx);
                picked.push(state.species[&sid].leader_id.clone());
            }
            Ok(resolve(picked))
        }
    }
}

// ---------------------------------------------------------------------------
// Variation and evaluation
// ---------------------------------------------------------------------------

/// Lowercase with whitespace runs collapsed to single spaces.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Case-insensitive refusal matching, applied only to short responses.
pub fn detect_refusal(response: &str, patterns: &[String], max_len: usize) -> bool {
    if response.chars().count() > max_len {
        return false;
    }
    let lowered = response.to_lowercase();
    patterns.iter().any(|p| lowered.contains(&p.to_lowercase()))
}

/// Candidate texts produced by one variation round, with request accounting.
pub struct ProducedChildren {
    pub n_requested: usize,
    pub n_failures: usize,
    /// Batch-level duplicates and canonically-empty variants dropped.
    pub n_dropped: usize,
    /// Deduplicated candidate texts with the operator that produced each and
    /// the parents it came from, in deterministic order.
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub text: String,
    pub operator_tag: String,
    pub parent_ids: Vec<GenomeId>,
}

/// Run every mutation template over every parent and every crossover
/// template over every unordered pair of distinct parents. Failures are
/// recorded and skipped; only a round where every request failed is fatal.
pub fn produce_children(
    parents: &[Genome],
    suite: &OperatorSuite,
    oracles: &OracleSet,
    rng: &mut ChaCha12Rng,
) -> Result<ProducedChildren, EvolutionError> {
    if parents.is_empty() {
        return Err(EvolutionError::stage("produce_children", "no parents selected"));
    }
    let mut requests: Vec<(Result<String, OracleError>, String, Vec<GenomeId>)> = Vec::new();
    for parent in parents {
        for template in &suite.mutations {
            let r = oracles.variation.mutate(template, &parent.text, rng);
            requests.push((r, format!("mutation:{}", template.name), vec![parent.id.clone()]));
        }
    }
    for (i, a) in parents.iter().enumerate() {
        for b in parents.iter().skip(i + 1) {
            if a.id == b.id {
                continue;
            }
            for template in &suite.crossovers {
                let r = oracles.variation.crossover(template, &a.text, &b.text, rng);
                requests.push((
                    r,
                    format!("crossover:{}", template.name),
                    vec![a.id.clone(), b.id.clone()],
                ));
            }
        }
    }

    let n_requested = requests.len();
    let mut n_failures = 0;
    let mut n_dropped = 0;
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut candidates = Vec::new();
    for (result, operator_tag, parent_ids) in requests {
        match result {
            Err(_) => n_failures += 1,
            Ok(text) => {
                let canon = canonicalize(&text);
                if canon.is_empty() || !seen.insert(canon.clone()) {
                    n_dropped += 1;
                    continue;
                }
                candidates.push(Candidate {
                    text: canon,
                    operator_tag,
                    parent_ids,
                });
            }
        }
    }
    if n_requested > 0 && n_failures == n_requested {
        return Err(EvolutionError::stage(
            "produce_children",
            format!("all {n_requested} variation requests failed"),
        ));
    }
    Ok(ProducedChildren {
        n_requested,
        n_failures,
        n_dropped,
        candidates,
    })
}

/// An evaluation failure carries the candidate text so the caller can log
/// and skip it.
#[derive(Debug, Error)]
#[error("evaluation of {text:?} failed: {source}")]
pub struct EvaluationFailure {
    pub text: String,
    #[source]
    pub source: OracleError,
}

/// Identity and lineage for a child about to be evaluated.
pub struct ChildMeta {
    pub id: GenomeId,
    pub generation: u32,
    pub parent_ids: Vec<GenomeId>,
    pub operator_tag: String,
}

/// Evaluate one candidate: generate the response, score it, embed the prompt
/// text, flag refusals and apply the penalty.
pub fn evaluate(
    text: &str,
    meta: ChildMeta,
    oracles: &OracleSet,
    cfg: &RunConfig,
) -> Result<Genome, EvaluationFailure> {
    let fail = |source: OracleError| EvaluationFailure {
        text: text.to_string(),
        source,
    };
    let response = oracles.response.respond(text).map_err(&fail)?;
    let scores = oracles.moderation.moderate(&response).map_err(&fail)?;
    if scores.len() != cfg.distance.d_p {
        return Err(fail(OracleError::MalformedPayload(format!(
            "moderation returned {} components, expected {}",
            scores.len(),
            cfg.distance.d_p
        ))));
    }
    let embedding = oracles.embedding.embed(text).map_err(&fail)?;
    let raw_fitness = scores[0];
    let is_refusal = detect_refusal(&response, &cfg.refusal_patterns, cfg.refusal_max_len);
    let fitness = if is_refusal {
        cfg.refusal_penalty * raw_fitness
    } else {
        raw_fitness
    };
    Ok(Genome {
        id: meta.id,
        text: text.to_string(),
        embedding,
        scores,
        raw_fitness,
        fitness,
        is_refusal,
        generation_created: meta.generation,
        parent_ids: meta.parent_ids,
        operator_tag: meta.operator_tag,
    })
}

// ---------------------------------------------------------------------------
// Run log events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: u32,
    pub mode: Mode,
    pub parents: Vec<GenomeId>,
    pub n_children_requested: usize,
    pub n_children_valid: usize,
    /// Batch duplicates, canonically empty texts, and live-text duplicates
    /// dropped before evaluation.
    pub n_dropped_invalid: usize,
    pub n_oracle_failures: usize,
    /// Cumulative global best after this generation.
    pub best_fitness: f64,
    /// Mean fitness of this generation's valid children (carried forward
    /// when a generation evaluates none).
    pub mean_fitness: f64,
    pub reactivated_species: Vec<SpeciesId>,
    pub speciation: SpeciationOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEvent {
    SeedEval {
        generation: u32,
        n_seeds: usize,
        n_duplicates_dropped: usize,
        n_oracle_failures: usize,
        mean_fitness: f64,
        best_fitness: f64,
        genome_ids: Vec<GenomeId>,
    },
    Speciation {
        generation: u32,
        #[serde(flatten)]
        outcome: SpeciationOutcome,
    },
    Generation(GenerationReport),
    Final {
        generation: u32,
        qd_score: f64,
        n_species_active: usize,
        n_species_frozen: usize,
        n_reserves: usize,
        n_archive: usize,
        global_best: f64,
        /// "speciated", or "baseline" for the approximate comparison arm.
        arm: String,
    },
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

pub struct Engine {
    pub cfg: RunConfig,
    pub state: PopulationState,
    oracles: OracleSet,
    rng: ChaCha12Rng,
    rng_seed: u64,
    suite: OperatorSuite,
    events: Vec<LogEvent>,
}

impl Engine {
    /// Validate the configuration, evaluate the seed prompts, and build the
    /// initial population (species or baseline pool).
    pub fn new(cfg: RunConfig, seed_prompts: &[String]) -> Result<Engine, EvolutionError> {
        let seeds = dedup_seeds(seed_prompts)?;
        let oracles = build_oracles(&cfg.oracles, cfg.distance.d_g, cfg.distance.d_p, &seeds)
            .map_err(|e| EvolutionError::stage("oracles", e))?;
        Engine::with_oracles(cfg, seed_prompts, oracles)
    }

    /// Like [`Engine::new`] but with caller-supplied oracles (instrumented
    /// oracles in tests, pre-built service clients).
    pub fn with_oracles(
        cfg: RunConfig,
        seed_prompts: &[String],
        oracles: OracleSet,
    ) -> Result<Engine, EvolutionError> {
        let problems = cfg.validate();
        if !problems.is_empty() {
            return Err(EvolutionError::stage("config", problems.join("; ")));
        }
        let seeds = dedup_seeds(seed_prompts)?;
        let n_duplicates_dropped = seed_prompts.len() - seeds.len();
        let rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let suite = cfg.oracles.operator_suite.clone();

        let mut engine = Engine {
            rng_seed: cfg.seed,
            cfg,
            state: PopulationState::new(),
            oracles,
            rng,
            suite,
            events: Vec::new(),
        };
        engine.initialize(&seeds, n_duplicates_dropped)?;
        Ok(engine)
    }

    /// Rebuild an engine from a loaded snapshot. The variation vocabulary is
    /// reconstructed from the seed-tagged genomes, which is exactly the
    /// vocabulary the original run started with.
    pub fn resume(
        cfg: RunConfig,
        state: PopulationState,
        rng_seed: u64,
        rng_word_pos: u128,
    ) -> Result<Engine, EvolutionError> {
        let problems = cfg.validate();
        if !problems.is_empty() {
            return Err(EvolutionError::stage("config", problems.join("; ")));
        }
        let seeds: Vec<String> = state
            .genomes
            .values()
            .filter(|g| g.operator_tag == "seed")
            .map(|g| g.text.clone())
            .collect();
        let oracles = build_oracles(&cfg.oracles, cfg.distance.d_g, cfg.distance.d_p, &seeds)
            .map_err(|e| EvolutionError::stage("oracles", e))?;
        let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
        rng.set_word_pos(rng_word_pos);
        let suite = cfg.oracles.operator_suite.clone();
        Ok(Engine {
            rng_seed,
            cfg,
            state,
            oracles,
            rng,
            suite,
            events: Vec::new(),
        })
    }

    fn initialize(
        &mut self,
        seeds: &[String],
        n_duplicates_dropped: usize,
    ) -> Result<(), EvolutionError> {
        let mut genomes = Vec::new();
        let mut n_oracle_failures = 0;
        for text in seeds {
            let id = self.state.next_genome_id();
            let meta = ChildMeta {
                id,
                generation: 0,
                parent_ids: vec![],
                operator_tag: "seed".to_string(),
            };
            match evaluate(text, meta, &self.oracles, &self.cfg) {
                Ok(g) => genomes.push(g),
                Err(_) => n_oracle_failures += 1,
            }
        }
        if genomes.is_empty() {
            return Err(EvolutionError::stage("seeds", "every seed evaluation failed"));
        }

        let fitnesses: Vec<f64> = genomes.iter().map(|g| g.fitness).collect();
        let mean = fitnesses.iter().sum::<f64>() / fitnesses.len() as f64;
        let best = fitnesses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let genome_ids: Vec<GenomeId> = genomes.iter().map(|g| g.id.clone()).collect();

        for g in genomes {
            self.state.genomes.insert(g.id.clone(), g);
        }
        if self.cfg.mode_enabled {
            initial_speciation(&genome_ids, &mut self.state, &self.cfg)?;
        } else {
            for id in &genome_ids {
                self.state.reserves.insert(id.clone());
            }
            self.truncate_baseline_population();
        }

        self.state.global_best = best;
        self.state.mean_fitness_history.push((0, mean));
        self.state.global_best_history.push((0, best));
        self.events.push(LogEvent::SeedEval {
            generation: 0,
            n_seeds: genome_ids.len(),
            n_duplicates_dropped,
            n_oracle_failures,
            mean_fitness: mean,
            best_fitness: best,
            genome_ids,
        });
        Ok(())
    }

    /// Canonical texts of all live genomes (species members and reserves).
    fn live_canonical_texts(&self) -> BTreeSet<String> {
        self.state
            .live_ids()
            .iter()
            .map(|id| canonicalize(&self.state.genomes[id].text))
            .collect()
    }

    /// Evaluate candidates into genomes, assigning sequential ids.
    fn evaluate_candidates(
        &mut self,
        candidates: Vec<Candidate>,
        generation: u32,
    ) -> (Vec<Genome>, usize) {
        let mut children = Vec::new();
        let mut n_failures = 0;
        for c in candidates {
            let id = self.state.next_genome_id();
            let meta = ChildMeta {
                id,
                generation,
                parent_ids: c.parent_ids,
                operator_tag: c.operator_tag,
            };
            match evaluate(&c.text, meta, &self.oracles, &self.cfg) {
                Ok(g) => children.push(g),
                Err(_) => n_failures += 1,
            }
        }
        (children, n_failures)
    }

    fn push_histories(&mut self, generation: u32, children: &[Genome]) -> (f64, f64) {
        let mean = if children.is_empty() {
            // Carry the previous mean forward so the history stays gap-free.
            self.state
                .mean_fitness_history
                .last()
                .map(|(_, v)| *v)
                .unwrap_or(0.0)
        } else {
            children.iter().map(|g| g.fitness).sum::<f64>() / children.len() as f64
        };
        let best_child = children
            .iter()
            .map(|g| g.fitness)
            .fold(f64::NEG_INFINITY, f64::max);
        if best_child > self.state.global_best {
            self.state.global_best = best_child;
        }
        self.state.mean_fitness_history.push((generation, mean));
        self.state
            .global_best_history
            .push((generation, self.state.global_best));
        (mean, self.state.global_best)
    }

    /// Advance one generation. Returns the generation report, which is also
    /// appended to the event log together with the speciation record.
    pub fn step(&mut self) -> Result<GenerationReport, EvolutionError> {
        if self.cfg.mode_enabled {
            self.step_speciated()
        } else {
            self.step_baseline()
        }
    }

    fn step_speciated(&mut self) -> Result<GenerationReport, EvolutionError> {
        let generation = self.state.generation + 1;
        let mut reactivated = reactivate_if_stalled(&mut self.state);

        let mode = select_mode(
            &ModeControllerState::from_config(&self.cfg, &self.state),
            self.state.generation,
        );

        let parents = match select_parents(&self.state, mode, &self.cfg, &mut self.rng) {
            Ok(p) => p,
            Err(first_err) => {
                // Selection found no active species. When outliers wait in
                // the reserves, species formation may now succeed (members
                // can arrive in reserves after the minting phase of the
                // previous pass), so form species and retry.
                if self.state.reserves.is_empty() {
                    return Err(first_err);
                }
                let pool: Vec<GenomeId> = {
                    let mut ids: Vec<GenomeId> = self.state.reserves.iter().cloned().collect();
                    ids.sort_by(|a, b| {
                        fitness_desc(&self.state.genomes[a], &self.state.genomes[b])
                    });
                    ids
                };
                for id in &pool {
                    self.state.reserves.remove(id);
                }
                initial_speciation(&pool, &mut self.state, &self.cfg)?;
                reactivated.extend(reactivate_if_stalled(&mut self.state));
                match select_parents(&self.state, mode, &self.cfg, &mut self.rng) {
                    Ok(p) => p,
                    Err(err) => {
                        // The reserves could not seed any species either, so
                        // the only material left to spend budget on is the
                        // frozen species. Reactivate them all rather than
                        // deadlock; they refreeze at the next stagnation
                        // check unless they improve.
                        if self.state.species.is_empty() {
                            return Err(err);
                        }
                        for sp in self.state.species.values_mut() {
                            if sp.state == crate::model::SpeciesState::Frozen {
                                sp.state = crate::model::SpeciesState::Active;
                                reactivated.push(sp.id.clone());
                            }
                        }
                        select_parents(&self.state, mode, &self.cfg, &mut self.rng)?
                    }
                }
            }
        };
        let parent_ids: Vec<GenomeId> = parents.iter().map(|g| g.id.clone()).collect();

        let produced = produce_children(&parents, &self.suite, &self.oracles, &mut self.rng)?;
        let live_texts = self.live_canonical_texts();
        let mut n_dropped = produced.n_dropped;
        let mut candidates = produced.candidates;
        candidates.retain(|c| {
            let keep = !live_texts.contains(&c.text);
            if !keep {
                n_dropped += 1;
            }
            keep
        });

        let (children, n_eval_failures) = self.evaluate_candidates(candidates, generation);
        let n_children_valid = children.len();

        self.state.generation = generation;
        let (mean, best) = self.push_histories(generation, &children);
        let outcome = speciate(children, &mut self.state, &self.cfg)?;

        let report = GenerationReport {
            generation,
            mode,
            parents: parent_ids,
            n_children_requested: produced.n_requested,
            n_children_valid,
            n_dropped_invalid: n_dropped,
            n_oracle_failures: produced.n_failures + n_eval_failures,
            best_fitness: best,
            mean_fitness: mean,
            reactivated_species: reactivated,
            speciation: outcome.clone(),
        };
        self.events.push(LogEvent::Speciation {
            generation,
            outcome,
        });
        self.events.push(LogEvent::Generation(report.clone()));
        Ok(report)
    }

    /// Baseline arm: a single global population truncated by fitness, no
    /// species bookkeeping. Parent selection is uniform over the population
    /// and the variant budget per generation is `baseline_alpha`. This is an
    /// approximation of a plain steady-state search and is labeled as such
    /// in the final log record.
    fn step_baseline(&mut self) -> Result<GenerationReport, EvolutionError> {
        let generation = self.state.generation + 1;
        let population: Vec<GenomeId> = {
            let mut ids: Vec<GenomeId> = self.state.reserves.iter().cloned().collect();
            ids.sort_by(|a, b| fitness_desc(&self.state.genomes[a], &self.state.genomes[b]));
            ids
        };
        if population.is_empty() {
            return Err(EvolutionError::stage(
                "select_parents",
                "baseline population is empty",
            ));
        }

        // Uniform distinct parents, up to baseline_beta.
        let beta = self.cfg.baseline_beta.min(population.len());
        let mut pool: Vec<GenomeId> = population.clone();
        let mut parent_ids = Vec::with_capacity(beta);
        for _ in 0..beta {
            let idx = self.rng.random_range(0..pool.len());
            parent_ids.push(pool.swap_remove(idx));
        }
        let parents: Vec<Genome> = parent_ids
            .iter()
            .map(|id| self.state.genomes[id].clone())
            .collect();

        // Issue exactly baseline_alpha variation requests by cycling the
        // template loops.
        let mut plan: Vec<(usize, Option<usize>, usize, bool)> = Vec::new();
        for (pi, _) in parents.iter().enumerate() {
            for (ti, _) in self.suite.mutations.iter().enumerate() {
                plan.push((pi, None, ti, true));
            }
        }
        for i in 0..parents.len() {
            for j in (i + 1)..parents.len() {
                if parents[i].id == parents[j].id {
                    continue;
                }
                for (ti, _) in self.suite.crossovers.iter().enumerate() {
                    plan.push((i, Some(j), ti, false));
                }
            }
        }
        let n_requested = self.cfg.baseline_alpha;
        let mut n_failures = 0;
        let mut n_dropped = 0;
        let mut seen: BTreeSet<String> = BTreeSet::new();
        let mut candidates = Vec::new();
        for k in 0..n_requested {
            let (pi, pj, ti, is_mutation) = plan[k % plan.len()];
            let result = if is_mutation {
                self.oracles
                    .variation
                    .mutate(&self.suite.mutations[ti], &parents[pi].text, &mut self.rng)
            } else {
                self.oracles.variation.crossover(
                    &self.suite.crossovers[ti],
                    &parents[pi].text,
                    &parents[pj.unwrap()].text,
                    &mut self.rng,
                )
            };
            match result {
                Err(_) => n_failures += 1,
                Ok(text) => {
                    let canon = canonicalize(&text);
                    if canon.is_empty() || !seen.insert(canon.clone()) {
                        n_dropped += 1;
                        continue;
                    }
                    let mut parent_refs = vec![parents[pi].id.clone()];
                    let tag = if is_mutation {
                        format!("mutation:{}", self.suite.mutations[ti].name)
                    } else {
                        parent_refs.push(parents[pj.unwrap()].id.clone());
                        format!("crossover:{}", self.suite.crossovers[ti].name)
                    };
                    candidates.push(Candidate {
                        text: canon,
                        operator_tag: tag,
                        parent_ids: parent_refs,
                    });
                }
            }
        }
        if n_requested > 0 && n_failures == n_requested {
            return Err(EvolutionError::stage(
                "produce_children",
                format!("all {n_requested} variation requests failed"),
            ));
        }

        let live_texts = self.live_canonical_texts();
        candidates.retain(|c| {
            let keep = !live_texts.contains(&c.text);
            if !keep {
                n_dropped += 1;
            }
            keep
        });

        let (children, n_eval_failures) = self.evaluate_candidates(candidates, generation);
        let n_children_valid = children.len();
        let child_ids: BTreeSet<GenomeId> = children.iter().map(|g| g.id.clone()).collect();

        self.state.generation = generation;
        let (mean, best) = self.push_histories(generation, &children);

        for g in children {
            self.state.reserves.insert(g.id.clone());
            self.state.genomes.insert(g.id.clone(), g);
        }
        let archived = self.truncate_baseline_population();

        let mut outcome = SpeciationOutcome::default();
        outcome.archived_ids = archived;
        let archived_set: BTreeSet<&GenomeId> = outcome.archived_ids.iter().collect();
        outcome.reserve_ids = child_ids
            .iter()
            .filter(|id| !archived_set.contains(*id))
            .cloned()
            .collect();

        let report = GenerationReport {
            generation,
            mode: Mode::Default,
            parents: parent_ids,
            n_children_requested: n_requested,
            n_children_valid,
            n_dropped_invalid: n_dropped,
            n_oracle_failures: n_failures + n_eval_failures,
            best_fitness: best,
            mean_fitness: mean,
            reactivated_species: Vec::new(),
            speciation: outcome.clone(),
        };
        self.events.push(LogEvent::Speciation {
            generation,
            outcome,
        });
        self.events.push(LogEvent::Generation(report.clone()));
        Ok(report)
    }

    /// Keep the `baseline_mu` fittest genomes in the global population,
    /// archiving the rest from the least fit upward.
    fn truncate_baseline_population(&mut self) -> Vec<GenomeId> {
        if self.state.reserves.len() <= self.cfg.baseline_mu {
            return Vec::new();
        }
        let mut ordered: Vec<GenomeId> = self.state.reserves.iter().cloned().collect();
        ordered.sort_by(|a, b| fitness_desc(&self.state.genomes[a], &self.state.genomes[b]));
        let mut archived = Vec::new();
        while ordered.len() > self.cfg.baseline_mu {
            let evicted = ordered.pop().expect("non-empty");
            self.state.reserves.remove(&evicted);
            self.state.archive.push(evicted.clone());
            archived.push(evicted);
        }
        archived
    }

    /// Run generations until `target` (inclusive).
    pub fn run_to(&mut self, target: u32) -> Result<(), EvolutionError> {
        while self.state.generation < target {
            self.step()?;
        }
        Ok(())
    }

    /// Append the final summary record.
    pub fn finalize(&mut self) {
        let arm = if self.cfg.mode_enabled {
            "speciated"
        } else {
            "baseline"
        };
        self.events.push(LogEvent::Final {
            generation: self.state.generation,
            qd_score: qd_score(&self.state),
            n_species_active: self.state.species.values().filter(|s| s.is_active()).count(),
            n_species_frozen: self.state.species.values().filter(|s| !s.is_active()).count(),
            n_reserves: self.state.reserves.len(),
            n_archive: self.state.archive.len(),
            global_best: self.state.global_best,
            arm: arm.to_string(),
        });
    }

    /// Drain accumulated log events (callers stream them to disk).
    pub fn drain_events(&mut self) -> Vec<LogEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn events(&self) -> &[LogEvent] {
        &self.events
    }

    /// (seed, word position) of the deterministic stream, for snapshots.
    pub fn rng_state(&self) -> (u64, u128) {
        (self.rng_seed, self.rng.get_word_pos())
    }
}

/// Evaluate all seeds, form the initial population, and run the configured
/// number of generations. Returns the final state and the full run log.
pub fn run(
    cfg: RunConfig,
    seed_prompts: &[String],
) -> Result<(PopulationState, Vec<LogEvent>), EvolutionError> {
    let generations = cfg.generations;
    let mut engine = Engine::new(cfg, seed_prompts)?;
    engine.run_to(generations)?;
    engine.finalize();
    let events = engine.drain_events();
    Ok((engine.state, events))
}

/// Evaluate a list of texts into seed genomes outside of a run (pool
/// construction for the metric verifier).
pub fn evaluate_pool(
    texts: &[String],
    cfg: &RunConfig,
) -> Result<Vec<Genome>, EvolutionError> {
    let mut seen = BTreeSet::new();
    let mut seeds: Vec<String> = Vec::new();
    for raw in texts {
        let canon = canonicalize(raw);
        if canon.is_empty() || !seen.insert(canon.clone()) {
            continue;
        }
        seeds.push(canon);
    }
    let oracles = build_oracles(&cfg.oracles, cfg.distance.d_g, cfg.distance.d_p, &seeds)
        .map_err(|e| EvolutionError::stage("oracles", e))?;
    let mut out = Vec::new();
    for (i, text) in seeds.iter().enumerate() {
        let meta = ChildMeta {
            id: GenomeId::from_seq(i as u64),
            generation: 0,
            parent_ids: vec![],
            operator_tag: "seed".to_string(),
        };
        let g = evaluate(text, meta, &oracles, cfg)
            .map_err(|e| EvolutionError::stage("evaluate", e))?;
        out.push(g);
    }
    Ok(out)
}
