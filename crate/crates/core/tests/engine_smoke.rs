//! End-to-end engine runs on the bundled landscape: both arms complete,
//! every generation passes the invariant audit, and key dynamics hold.

mod common;

use speqd::audit::audit_state;
use speqd::evolution::Engine;
use speqd::metrics::qd_score;

#[test]
fn speciated_run_completes_with_clean_audits() {
    let mut cfg = common::shipped_config();
    cfg.seed = 1;
    cfg.generations = 50;
    let corpus = common::shipped_corpus();
    let mut engine = Engine::new(cfg.clone(), &corpus).expect("engine builds");

    let qd_start = qd_score(&engine.state);
    let mut total_violations = 0;
    for _ in 0..cfg.generations {
        engine.step().expect("step");
        let v = audit_state(&engine.state, &cfg);
        if !v.is_empty() {
            eprintln!("gen {}: {:?}", engine.state.generation, v);
        }
        total_violations += v.len();
    }
    assert_eq!(total_violations, 0);

    let qd_end = qd_score(&engine.state);
    println!(
        "speciated: qd {qd_start:.3} -> {qd_end:.3}, species={}, reserves={}, archive={}, best={:.3}",
        engine.state.species.len(),
        engine.state.reserves.len(),
        engine.state.archive.len(),
        engine.state.global_best
    );
    assert!(engine.state.species.len() >= 2);
    assert!(qd_end > qd_start, "qd did not improve: {qd_start} -> {qd_end}");
}

#[test]
fn baseline_run_completes_with_clean_audits() {
    let mut cfg = common::shipped_config();
    cfg.seed = 1;
    cfg.generations = 50;
    cfg.mode_enabled = false;
    let corpus = common::shipped_corpus();
    let mut engine = Engine::new(cfg.clone(), &corpus).expect("engine builds");
    for _ in 0..cfg.generations {
        engine.step().expect("step");
        let v = audit_state(&engine.state, &cfg);
        assert!(v.is_empty(), "gen {}: {v:?}", engine.state.generation);
    }
    assert!(engine.state.species.is_empty());
    assert_eq!(engine.state.reserves.len(), cfg.baseline_mu);
    println!(
        "baseline: population={}, archive={}, best={:.3}",
        engine.state.reserves.len(),
        engine.state.archive.len(),
        engine.state.global_best
    );
}

#[test]
fn evaluation_budget_reconciles_with_logged_counts() {
    use speqd::oracles::{build_oracles, ModerationOracle, OracleError};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    struct Counting {
        inner: Box<dyn ModerationOracle>,
        calls: Arc<AtomicUsize>,
    }
    impl ModerationOracle for Counting {
        fn moderate(&self, text: &str) -> Result<Vec<f64>, OracleError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.moderate(text)
        }
    }

    let mut cfg = common::shipped_config();
    cfg.seed = 9;
    cfg.generations = 15;
    let corpus = common::shipped_corpus();
    let calls = Arc::new(AtomicUsize::new(0));
    let mut oracles =
        build_oracles(&cfg.oracles, cfg.distance.d_g, cfg.distance.d_p, &corpus).unwrap();
    oracles.moderation = Box::new(Counting {
        inner: oracles.moderation,
        calls: calls.clone(),
    });

    let mut engine = Engine::with_oracles(cfg.clone(), &corpus, oracles).expect("engine builds");
    let n_seeds = engine
        .state
        .genomes
        .values()
        .filter(|g| g.operator_tag == "seed")
        .count();
    let mut total_valid = 0;
    for _ in 0..cfg.generations {
        let report = engine.step().expect("step");
        assert_eq!(
            report.n_children_requested,
            report.n_children_valid + report.n_dropped_invalid + report.n_oracle_failures,
            "per-generation accounting must reconcile exactly"
        );
        total_valid += report.n_children_valid;
    }
    // With synthetic oracles no evaluation fails, so moderation calls equal
    // seed evaluations plus every valid child evaluation.
    assert_eq!(calls.load(Ordering::SeqCst), n_seeds + total_valid);
}

#[test]
fn zero_generations_returns_initial_speciation_of_seeds() {
    let mut cfg = common::shipped_config();
    cfg.generations = 0;
    let corpus = common::shipped_corpus();
    let engine = Engine::new(cfg, &corpus).expect("engine builds");
    assert_eq!(engine.state.generation, 0);
    assert!(!engine.state.species.is_empty());
    assert_eq!(engine.state.mean_fitness_history.len(), 1);
}
