//! Command-line front end: run searches, compute metrics over run artifacts,
//! verify the distance metric's properties, and build genome pools.
//!
//! Exit codes: 0 success, 1 runtime failure (the offending stage is named),
//! 2 invalid configuration or input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use speqd::evolution::{Engine, LogEvent};
use speqd::metrics;
use speqd::model::{Genome, RunConfig};
use speqd::persistence::{
    self, load_snapshot, save_snapshot, to_canonical_json, RngState, RunDir, Snapshot,
};

#[derive(Parser)]
#[command(name = "speqd", version, about = "Speciated quality-diversity prompt search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an evolutionary search and write the run directory.
    Run(RunArgs),
    /// Compute diversity/quality metrics from a run directory or snapshot.
    Metrics(MetricsArgs),
    /// Verify metric properties (non-negativity, symmetry, triangle
    /// inequality) over a genome pool.
    VerifyMetric(VerifyArgs),
    /// Evaluate a prompt list into a genome pool file.
    MakePool(MakePoolArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed prompts, one per line.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Output run directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// Resume from a snapshot instead of starting from seed prompts.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write a snapshot every N generations (the final snapshot is always
    /// written).
    #[arg(long)]
    snapshot_every: Option<u32>,
    /// Run the non-speciated baseline arm (sets mode_enabled=false).
    #[arg(long)]
    baseline: bool,
    /// Oracle preset: "synthetic" (default bindings) or "echo"
    /// (echo response generator).
    #[arg(long)]
    oracle: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Per-field overrides; flag names match the configuration field names.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    generations: Option<u32>,
    #[arg(long)]
    theta_sim: Option<f64>,
    #[arg(long)]
    theta_merge: Option<f64>,
    #[arg(long)]
    c_min: Option<usize>,
    #[arg(long)]
    c_species: Option<usize>,
    #[arg(long)]
    c_reserves: Option<usize>,
    #[arg(long)]
    t_species: Option<u32>,
    #[arg(long)]
    t_merge: Option<u32>,
    #[arg(long)]
    t_global: Option<u32>,
    #[arg(long)]
    window: Option<u32>,
    #[arg(long)]
    tau_slope: Option<f64>,
    #[arg(long)]
    refusal_penalty: Option<f64>,
    #[arg(long)]
    refusal_max_len: Option<usize>,
    #[arg(long)]
    mode_enabled: Option<bool>,
    #[arg(long)]
    n_top_species: Option<usize>,
    #[arg(long)]
    n_explore_species: Option<usize>,
    #[arg(long)]
    baseline_mu: Option<usize>,
    #[arg(long)]
    baseline_alpha: Option<usize>,
    #[arg(long)]
    baseline_beta: Option<usize>,
    #[arg(long)]
    topic_threshold: Option<f64>,
    #[arg(long)]
    w_genotype: Option<f64>,
    #[arg(long)]
    w_phenotype: Option<f64>,
    #[arg(long)]
    d_g: Option<usize>,
    #[arg(long)]
    d_p: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set! {
            seed => cfg.seed,
            generations => cfg.generations,
            theta_sim => cfg.theta_sim,
            theta_merge => cfg.theta_merge,
            c_min => cfg.c_min,
            c_species => cfg.c_species,
            c_reserves => cfg.c_reserves,
            t_species => cfg.t_species,
            t_merge => cfg.t_merge,
            t_global => cfg.t_global,
            window => cfg.window,
            tau_slope => cfg.tau_slope,
            refusal_penalty => cfg.refusal_penalty,
            refusal_max_len => cfg.refusal_max_len,
            mode_enabled => cfg.mode_enabled,
            n_top_species => cfg.n_top_species,
            n_explore_species => cfg.n_explore_species,
            baseline_mu => cfg.baseline_mu,
            baseline_alpha => cfg.baseline_alpha,
            baseline_beta => cfg.baseline_beta,
            topic_threshold => cfg.topic_threshold,
            w_genotype => cfg.distance.w_genotype,
            w_phenotype => cfg.distance.w_phenotype,
            d_g => cfg.distance.d_g,
            d_p => cfg.distance.d_p,
        }
    }
}

#[derive(Args)]
struct MetricsArgs {
    /// Run directory (latest snapshot is used) or a snapshot file.
    #[arg(long)]
    input: PathBuf,
    /// Where to write metric files; defaults to <run dir>/metrics.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Genome pool: one JSON genome per line.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = 4950)]
    n_pairs: usize,
    #[arg(long, default_value_t = 4950)]
    n_triples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct MakePoolArgs {
    /// Prompt list, one per line.
    #[arg(long)]
    prompts: PathBuf,
    /// Config supplying oracle bindings and dimensions.
    #[arg(long)]
    config: PathBuf,
    /// Output pool file (JSONL).
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(message: impl ToString) -> Self {
        Failure {
            code: 2,
            message: message.to_string(),
        }
    }

    fn runtime(message: impl ToString) -> Self {
        Failure {
            code: 1,
            message: message.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::VerifyMetric(args) => cmd_verify_metric(args),
        Command::MakePool(args) => cmd_make_pool(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = persistence::load_config(&args.config).map_err(Failure::invalid)?;
    args.overrides.apply(&mut cfg);
    if args.baseline {
        cfg.mode_enabled = false;
    }
    match args.oracle.as_deref() {
        None | Some("synthetic") => {}
        Some("echo") => cfg.oracles.response = speqd::oracles::OracleBinding::Echo,
        Some(other) => {
            return Err(Failure::invalid(format!(
                "unknown oracle preset {other:?} (expected synthetic or echo)"
            )))
        }
    }
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Failure::invalid(format!(
            "invalid configuration:\n  {}",
            problems.join("\n  ")
        )));
    }

    let mut engine = match &args.resume {
        Some(snapshot_path) => {
            let snapshot = load_snapshot(snapshot_path).map_err(Failure::runtime)?;
            let mut cfg = snapshot.cfg;
            // Only the generation target moves on resume; the rest of the
            // configuration is part of the run's identity.
            if let Some(g) = args.overrides.generations {
                cfg.generations = g;
            }
            let word_pos = snapshot.rng_state.word_pos_u128().map_err(Failure::runtime)?;
            Engine::resume(cfg, snapshot.state, snapshot.rng_state.seed, word_pos)
                .map_err(Failure::runtime)?
        }
        None => {
            let prompts_path = args
                .prompts
                .as_ref()
                .ok_or_else(|| Failure::invalid("--prompts is required unless --resume is given"))?;
            let prompts = persistence::load_prompts(prompts_path).map_err(Failure::invalid)?;
            if prompts.is_empty() {
                return Err(Failure::invalid(format!(
                    "no prompts in {}",
                    prompts_path.display()
                )));
            }
            Engine::new(cfg.clone(), &prompts).map_err(Failure::invalid)?
        }
    };

    let dir = RunDir::create(&args.out_dir).map_err(Failure::runtime)?;
    dir.write_config(&engine.cfg).map_err(Failure::runtime)?;

    let mut archived_written = 0;
    flush(&dir, &mut engine, &mut archived_written)?;

    let target = engine.cfg.generations;
    while engine.state.generation < target {
        engine.step().map_err(Failure::runtime)?;
        flush(&dir, &mut engine, &mut archived_written)?;
        if let Some(every) = args.snapshot_every {
            if every > 0 && engine.state.generation % every == 0 {
                write_snapshot(&dir, &engine)?;
            }
        }
    }
    engine.finalize();
    flush(&dir, &mut engine, &mut archived_written)?;
    write_snapshot(&dir, &engine)?;

    let qd = metrics::qd_score(&engine.state);
    let active = engine.state.species.values().filter(|s| s.is_active()).count();
    let frozen = engine.state.species.len() - active;
    println!(
        "generations={} qd_score={:.6} species_active={active} species_frozen={frozen} global_best={:.6}",
        engine.state.generation, qd, engine.state.global_best
    );
    Ok(())
}

fn flush(dir: &RunDir, engine: &mut Engine, archived_written: &mut usize) -> Result<(), Failure> {
    let events: Vec<LogEvent> = engine.drain_events();
    dir.append_log(&events).map_err(Failure::runtime)?;
    let archive = &engine.state.archive;
    if *archived_written < archive.len() {
        let new: Vec<&Genome> = archive[*archived_written..]
            .iter()
            .map(|id| &engine.state.genomes[id])
            .collect();
        dir.append_archive(&new).map_err(Failure::runtime)?;
        *archived_written = archive.len();
    }
    Ok(())
}

fn write_snapshot(dir: &RunDir, engine: &Engine) -> Result<(), Failure> {
    let (seed, word_pos) = engine.rng_state();
    let snapshot = Snapshot::new(
        engine.cfg.clone(),
        engine.state.clone(),
        RngState::new(seed, word_pos),
    );
    save_snapshot(&snapshot, &dir.snapshot_path(engine.state.generation))
        .map_err(Failure::runtime)
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

fn cmd_metrics(args: MetricsArgs) -> Result<(), Failure> {
    let (snapshot_path, default_out) = if args.input.is_dir() {
        let dir = RunDir::open(&args.input);
        let (_, path) = dir
            .latest_snapshot_path()
            .ok_or_else(|| Failure::runtime(format!("no snapshot in {}", args.input.display())))?;
        (path, dir.metrics_dir())
    } else {
        let parent = args
            .input
            .parent()
            .map(|p| p.join("metrics"))
            .unwrap_or_else(|| PathBuf::from("metrics"));
        (args.input.clone(), parent)
    };
    let out_dir = args.out_dir.unwrap_or(default_out);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Failure::runtime(format!("create {}: {e}", out_dir.display())))?;

    let snapshot = load_snapshot(&snapshot_path).map_err(Failure::runtime)?;
    let state = &snapshot.state;
    let cfg = &snapshot.cfg;

    if state.species.is_empty() {
        eprintln!("warning: no species in snapshot; species metrics are degenerate");
    }
    let diversity = metrics::separation_stats(state, &cfg.distance);
    write_file(&out_dir.join("diversity.json"), &format!("{}\n", to_canonical_json(&diversity)))?;

    // Topic proxy over the live population.
    let live = state.live_ids();
    let live_genomes: Vec<&Genome> = live.iter().map(|id| &state.genomes[id]).collect();
    if !live_genomes.is_empty() {
        let labels = metrics::cluster_topics(&live_genomes, cfg.topic_threshold);
        let topics = metrics::topic_diversity(&labels);
        write_file(&out_dir.join("topics.json"), &format!("{}\n", to_canonical_json(&topics)))?;
    }

    // Distribution over every discovered prompt, deduplicated by canonical
    // text keeping the highest fitness per text.
    let mut best_by_text: std::collections::BTreeMap<String, f64> = Default::default();
    for g in state.genomes.values() {
        let key = speqd::evolution::canonicalize(&g.text);
        let entry = best_by_text.entry(key).or_insert(f64::NEG_INFINITY);
        if g.fitness > *entry {
            *entry = g.fitness;
        }
    }
    let fitnesses: Vec<f64> = best_by_text.values().cloned().collect();
    if !fitnesses.is_empty() {
        let q = metrics::toxicity_quantiles(&fitnesses);
        let mut csv = String::from("statistic,value\n");
        for (name, value) in [
            ("q95", q.q95),
            ("top10_median", q.top10_median),
            ("qmax", q.qmax),
            ("top10_mean", q.top10_mean),
            ("top50_mean", q.top50_mean),
        ] {
            csv.push_str(&format!("{name},{value:.16e}\n"));
        }
        write_file(&out_dir.join("quantiles.csv"), &csv)?;

        let mut csv = String::from("x,cdf\n");
        for (x, f) in metrics::ecdf_export(&fitnesses) {
            csv.push_str(&format!("{x:.16e},{f:.16e}\n"));
        }
        write_file(&out_dir.join("ecdf.csv"), &csv)?;
    }

    println!(
        "qd_score={:.6} species={} separation_ratio={} wrote {}",
        diversity.qd_score,
        state.species.len(),
        diversity
            .separation_ratio
            .map(|r| format!("{r:.6}"))
            .unwrap_or_else(|| "undefined".to_string()),
        out_dir.display()
    );
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    persistence::atomic_write(path, contents.as_bytes()).map_err(Failure::runtime)
}

// ---------------------------------------------------------------------------
// verify-metric
// ---------------------------------------------------------------------------

fn cmd_verify_metric(args: VerifyArgs) -> Result<(), Failure> {
    let raw = std::fs::read_to_string(&args.pool)
        .map_err(|e| Failure::invalid(format!("read {}: {e}", args.pool.display())))?;
    let mut pool: Vec<Genome> = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let g: Genome = serde_json::from_str(line)
            .map_err(|e| Failure::invalid(format!("{}:{}: {e}", args.pool.display(), i + 1)))?;
        pool.push(g);
    }
    if pool.len() < 3 {
        return Err(Failure::invalid(format!(
            "pool holds {} genomes; at least 3 are required",
            pool.len()
        )));
    }
    let params = speqd::model::EnsembleDistanceParams {
        d_g: pool[0].embedding.len(),
        d_p: pool[0].scores.len(),
        ..Default::default()
    };

    // Negative-control hook for debug builds: corrupt the metric so the
    // verifier can be shown to fail.
    let corrupt = cfg!(debug_assertions)
        && std::env::var("SPEQD_TEST_CORRUPT_DISTANCE").map_or(false, |v| v == "1");
    let report = if corrupt {
        speqd::distance::verify_metric_properties_with(
            &pool,
            args.n_pairs,
            args.n_triples,
            args.seed,
            |u, v| {
                let base = speqd::distance::ensemble_distance(u, v, &params)?;
                Ok(if u.id < v.id { base + 0.01 } else { base })
            },
        )
    } else {
        speqd::distance::verify_metric_properties(
            &pool,
            args.n_pairs,
            args.n_triples,
            args.seed,
            &params,
        )
    }
    .map_err(Failure::runtime)?;

    println!("{}", to_canonical_json(&report));
    if report.passed {
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "metric verification failed: {} non-negativity violation(s), symmetry max diff {}, {} triangle violation(s)",
            report.non_negativity_violations, report.symmetry_max_diff, report.triangle_violations
        )))
    }
}

// ---------------------------------------------------------------------------
// make-pool
// ---------------------------------------------------------------------------

fn cmd_make_pool(args: MakePoolArgs) -> Result<(), Failure> {
    let cfg = persistence::load_config(&args.config).map_err(Failure::invalid)?;
    let prompts = persistence::load_prompts(&args.prompts).map_err(Failure::invalid)?;
    if prompts.is_empty() {
        return Err(Failure::invalid(format!(
            "no prompts in {}",
            args.prompts.display()
        )));
    }
    let genomes = speqd::evolution::evaluate_pool(&prompts, &cfg).map_err(Failure::runtime)?;
    let mut out = String::new();
    for g in &genomes {
        out.push_str(&to_canonical_json(g));
        out.push('\n');
    }
    write_file(&args.out, &out)?;
    println!("wrote {} genomes to {}", genomes.len(), args.out.display());
    Ok(())
}
