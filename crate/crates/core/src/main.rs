use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, CommandFactory, Parser, Subcommand};

use hgrl::artifact::{self, RunArtifacts, RunManifest};
use hgrl::env::{ground_truth_values, EnvKind, EnvSpec, Environment};
use hgrl::error::{Error, Result};
use hgrl::policy::PolicySnapshot;
use hgrl::reparam::{self, ApproxConfig};
use hgrl::trainer::{self, eval_start_seeds, evaluate, TrainConfig, TrainOutcome};
use hgrl::transition_model::DEFAULT_DELTA;
use hgrl::value_iteration::{
    completeness_over_truth, default_max_iter, interior_values, ops_per_second_benchmark,
    time_highway_solve, time_vanilla_solve, vanilla_ops_per_second, work_comparison,
};

const DEFAULT_ROOT: &str = "runs";

#[derive(Parser)]
#[command(name = "hgrl", version, about = "Highway-graph reinforcement learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on an environment, or build a graph from a replay file.
    Train(TrainArgs),
    /// Greedy evaluation of a trained run.
    Eval(EvalArgs),
    /// Value-iteration throughput of the highway graph against its expansion.
    Bench(BenchArgs),
    /// Compare learned values with exhaustive value iteration.
    Completeness(CompletenessArgs),
    /// Write DOT drawings of the highway graph and its expansion.
    Export(ExportArgs),
    /// Fit the Q approximator to a run's graph values.
    Distill(DistillArgs),
    /// Evaluate the distilled approximator against the graph policy.
    EvalHgq(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// maze, maze5x5, cliffwalking or taxi.
    #[arg(long, value_parser = parse_env_arg)]
    env: Option<EnvArg>,
    /// Maze size as WxH, used with `--env maze`.
    #[arg(long)]
    size: Option<String>,
    /// Checked between updates, so the last update may overshoot it.
    #[arg(long)]
    frames: Option<u64>,
    /// Environment seed; also the run seed unless --run-seed is given.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_seed: Option<u64>,
    #[arg(long)]
    actors: Option<usize>,
    #[arg(long)]
    episodes_per_update: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// key = value file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV of recorded transitions (episode,from,action,next,reward,terminal).
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Output directory; defaults to a name derived from the env under the run root.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Clone)]
enum EnvArg {
    Kind(EnvKind),
    BareMaze,
}

fn parse_env_arg(s: &str) -> std::result::Result<EnvArg, String> {
    if s.eq_ignore_ascii_case("maze") {
        return Ok(EnvArg::BareMaze);
    }
    s.parse::<EnvKind>()
        .map(EnvArg::Kind)
        .map_err(|e| e.to_string())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Defaults to 100 for Taxi and 1 for fixed-start environments.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    run: PathBuf,
    /// Fixed sweeps for the throughput measurement.
    #[arg(long, default_value_t = 200)]
    sweeps: usize,
    /// Repeats of the converged-solve timing; the best is kept.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompletenessArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Also write the expanded empirical graph.
    #[arg(long)]
    expanded: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn run_root() -> PathBuf {
    std::env::var_os("HG_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT))
}

fn resolve_run(p: &Path) -> PathBuf {
    if p.exists() || p.is_absolute() {
        p.to_path_buf()
    } else {
        run_root().join(p)
    }
}

fn env_slug(spec: &EnvSpec) -> String {
    match spec.kind {
        EnvKind::Maze { width, height } => format!("maze{width}x{height}-s{}", spec.seed),
        EnvKind::CliffWalking => "cliffwalking".into(),
        EnvKind::Taxi => format!("taxi-s{}", spec.seed),
    }
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut settings = match &args.config {
        Some(p) => artifact::parse_config_text(
            &fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        )?,
        None => Default::default(),
    };
    let kind = match (&args.env, &args.size) {
        (Some(EnvArg::Kind(k)), _) => Some(*k),
        (Some(EnvArg::BareMaze), size) => {
            Some(format!("maze{}", size.as_deref().unwrap_or("5x5")).parse()?)
        }
        (None, Some(size)) => Some(format!("maze{size}").parse()?),
        (None, None) => None,
    };
    let env_kind = match (kind, settings.remove("env")) {
        (Some(k), _) => k,
        (None, Some(v)) => v.parse()?,
        (None, None) => return Err(Error::Config("--env is required".into())),
    };
    let mut cfg = TrainConfig::new(EnvSpec {
        kind: env_kind,
        seed: 0,
    });
    artifact::apply_config(&mut cfg, &settings)?;
    if let Some(s) = args.seed {
        cfg.env.seed = s;
        cfg.run_seed = args.run_seed.unwrap_or(s);
    }
    if let Some(s) = args.run_seed {
        cfg.run_seed = s;
    }
    if let Some(f) = args.frames {
        cfg.frame_budget = f;
    }
    if let Some(a) = args.actors {
        cfg.actors = a;
    }
    if let Some(e) = args.episodes_per_update {
        cfg.episodes_per_update = e;
    }
    if let Some(g) = args.gamma {
        cfg.gamma = g;
    }
    if let Some(d) = args.delta {
        cfg.delta = d;
    }
    if let Some(m) = args.max_iter {
        cfg.max_iter = Some(m);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_run(
    dir: &Path,
    manifest: &mut RunManifest,
    graph: &hgrl::highway_graph::HighwayGraph,
    tables: &hgrl::value_iteration::ValueTables,
    outcome: Option<&TrainOutcome>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(artifact::GRAPH_FILE),
        artifact::encode_graph(graph),
    )?;
    fs::write(
        dir.join(artifact::TABLES_FILE),
        artifact::encode_tables(tables),
    )?;
    artifact::write_values_csv(&dir.join(artifact::VALUES_FILE), tables)?;
    artifact::write_q_csv(&dir.join(artifact::Q_FILE), tables)?;
    let mut files = vec![
        artifact::GRAPH_FILE,
        artifact::TABLES_FILE,
        artifact::VALUES_FILE,
        artifact::Q_FILE,
    ];
    if let Some(out) = outcome {
        artifact::write_metrics_csv(&dir.join(artifact::METRICS_FILE), &out.metrics.rows)?;
        artifact::write_observations(&dir.join(artifact::OBSERVATIONS_FILE), &out.observations)?;
        fs::write(
            dir.join(artifact::CONFIG_FILE),
            artifact::config_to_text(&out.config),
        )?;
        files.extend([
            artifact::METRICS_FILE,
            artifact::OBSERVATIONS_FILE,
            artifact::CONFIG_FILE,
        ]);
    }
    artifact::write_manifest(dir, manifest, &files)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    if let Some(replay) = &args.replay {
        let gamma = args.gamma.unwrap_or(trainer::DEFAULT_GAMMA);
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} is outside [0, 1)")));
        }
        let trajectories = artifact::read_replay_csv(replay)?;
        let (graph, tables) =
            trainer::replay(&trajectories, gamma, args.delta.unwrap_or(DEFAULT_DELTA))?;
        let dir = args
            .run_dir
            .clone()
            .unwrap_or_else(|| run_root().join("replay"));
        let mut manifest = RunManifest::new(None, gamma, None);
        write_run(&dir, &mut manifest, &graph, &tables, None)?;
        let stats = graph.graph_stats();
        println!(
            "replayed {} trajectories: {} intersections, {} highways -> {}",
            trajectories.len(),
            stats.intersections,
            stats.highways,
            dir.display()
        );
        return Ok(());
    }
    let cfg = train_config(args)?;
    let out = trainer::train(&cfg)?;
    let dir = args
        .run_dir
        .clone()
        .unwrap_or_else(|| run_root().join(env_slug(&cfg.env)));
    let mut manifest = RunManifest::new(Some(cfg.clone()), cfg.gamma, Some(&out.metrics));
    write_run(&dir, &mut manifest, &out.graph, &out.tables, Some(&out))?;
    let stats = out.graph.graph_stats();
    let last = out.metrics.rows.last();
    println!("run directory: {}", dir.display());
    println!(
        "updates {}  frames {}  intersections {}  highways {}  z {:.4}",
        out.metrics.rows.len(),
        out.frames(),
        stats.intersections,
        stats.highways,
        stats.z
    );
    match (
        out.metrics.converged_at_update,
        out.metrics.learning_iterations,
    ) {
        (Some(c), Some(l)) => println!(
            "converged at update {c}  learning iterations {l}  frames {}",
            out.metrics.frames_at_convergence.unwrap_or(0)
        ),
        _ => println!("no convergence within the frame budget"),
    }
    if let Some(r) = last {
        println!(
            "greedy total reward {:.4}  discounted return {:.6}",
            r.total_reward, r.expected_discounted_return
        );
    }
    Ok(())
}

fn run_env(run: &RunArtifacts) -> Result<(EnvSpec, Environment)> {
    let spec = run.manifest.env.ok_or_else(|| {
        Error::Config("this run was built from a replay and has no environment".into())
    })?;
    Ok((spec, spec.build()?))
}

fn run_snapshot(run: &RunArtifacts, env: &Environment) -> Result<PolicySnapshot> {
    let seed = run.manifest.config.as_ref().map_or(0, |c| c.run_seed);
    PolicySnapshot::new(
        Arc::new(run.graph.clone()),
        Arc::new(run.tables.clone()),
        env.action_count(),
        seed,
    )
}

fn eval_seeds(env: &Environment, episodes: Option<usize>) -> Vec<u64> {
    let default = if env.has_random_starts() { 100 } else { 1 };
    eval_start_seeds(env, episodes.unwrap_or(default))
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let run = RunArtifacts::load(&resolve_run(&args.run))?;
    let (_, env) = run_env(&run)?;
    let snap = run_snapshot(&run, &env)?;
    let seeds = eval_seeds(&env, args.episodes);
    let r = evaluate(
        &snap,
        &env,
        &seeds,
        run.manifest.gamma,
        env.default_max_steps(),
    )?;
    println!(
        "episodes {}  mean total reward {:.4}  mean discounted return {:.6}",
        r.episodes.len(),
        r.mean_total_reward,
        r.mean_discounted_return
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let dir = resolve_run(&args.run);
    let graph = artifact::load_graph(&dir.join(artifact::GRAPH_FILE))?;
    let expanded = graph.expand_to_empirical();
    let hw = ops_per_second_benchmark(&graph, args.sweeps);
    let van = vanilla_ops_per_second(&expanded, args.sweeps);
    let work = work_comparison(&graph);
    let max_iter = default_max_iter(&graph).max(10_000);
    let hw_solve = time_highway_solve(&graph, max_iter, DEFAULT_DELTA, args.repeats);
    let van_solve = time_vanilla_solve(&expanded.compile(), max_iter, DEFAULT_DELTA, args.repeats);
    let out = args.out.clone().unwrap_or_else(|| dir.join("bench.csv"));
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record([
        "method",
        "sweeps",
        "updates_per_sweep",
        "ops",
        "seconds",
        "ops_per_sec",
        "z",
        "z_squared",
        "work_ratio",
        "solve_sweeps",
        "solve_seconds",
    ])?;
    let rows = [
        ("highway", &hw, work.highway_updates_per_sweep, &hw_solve),
        ("vanilla", &van, work.expanded_updates_per_sweep, &van_solve),
    ];
    for (name, b, updates, solve) in rows {
        w.write_record([
            name.to_string(),
            b.sweeps.to_string(),
            updates.to_string(),
            b.ops.to_string(),
            format!("{:.9}", b.seconds),
            format!("{:.1}", b.ops_per_sec),
            format!("{:.6}", work.z),
            format!("{:.6}", work.z * work.z),
            format!("{:.6}", work.work_ratio),
            solve.sweeps.to_string(),
            format!("{:.9}", solve.seconds),
        ])?;
    }
    w.flush()?;
    println!(
        "z {:.4}  z^2 {:.4}  work ratio {:.4}  updates/sweep highway {} vanilla {}",
        work.z,
        work.z * work.z,
        work.work_ratio,
        work.highway_updates_per_sweep,
        work.expanded_updates_per_sweep
    );
    println!(
        "converged solve: highway {:.6}s ({} sweeps)  vanilla {:.6}s ({} sweeps)",
        hw_solve.seconds, hw_solve.sweeps, van_solve.seconds, van_solve.sweeps
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_completeness(args: &CompletenessArgs) -> Result<()> {
    let run = RunArtifacts::load(&resolve_run(&args.run))?;
    let (spec, _) = run_env(&run)?;
    let truth = ground_truth_values(&spec, run.manifest.gamma)?;
    let values = interior_values(&run.graph, &run.tables);
    let (r, missing) = completeness_over_truth(&values, &truth, args.tol)?;
    println!(
        "min {:.2}  max {:.2}  avg {:.2}  completeness {:.2}%",
        r.min_dist, r.max_dist, r.avg_dist, r.completeness_pct
    );
    println!(
        "states {}  unvisited {}  tolerance {:e}",
        truth.len(),
        missing,
        args.tol
    );
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let dir = resolve_run(&args.run);
    let graph = artifact::load_graph(&dir.join(artifact::GRAPH_FILE))?;
    let tables = artifact::load_tables(&dir.join(artifact::TABLES_FILE))?;
    let out = args.out.clone().unwrap_or_else(|| dir.join("export"));
    fs::create_dir_all(&out)?;
    fs::write(
        out.join("highway.dot"),
        artifact::graph_to_dot(&graph, Some(&tables)),
    )?;
    println!(
        "highway.dot: {} nodes, {} edges",
        graph.intersections().len(),
        graph.highways().len()
    );
    if args.expanded {
        let e = graph.expand_to_empirical();
        let values = interior_values(&graph, &tables);
        fs::write(
            out.join("expanded.dot"),
            artifact::empirical_to_dot(&e, Some(&values)),
        )?;
        println!(
            "expanded.dot: {} nodes, {} edges",
            e.node_count(),
            e.edge_count()
        );
    }
    Ok(())
}

fn cmd_distill(args: &DistillArgs) -> Result<()> {
    let dir = resolve_run(&args.run);
    let run = RunArtifacts::load(&dir)?;
    let (_, env) = run_env(&run)?;
    let observations = run.observations()?;
    let dataset = reparam::extract_dataset(
        &run.graph,
        &run.tables,
        env.action_count(),
        env.feature_dim(),
        |s| observations.get(&s).map(|o| env.features(o)),
    )?;
    let defaults = ApproxConfig::default();
    let config = ApproxConfig {
        hidden_units: args.hidden.unwrap_or(defaults.hidden_units),
        learning_rate: args.lr.unwrap_or(defaults.learning_rate),
        epochs: args.epochs.unwrap_or(defaults.epochs),
        batch_size: args.batch.unwrap_or(defaults.batch_size),
        init_seed: args.seed.unwrap_or(defaults.init_seed),
        ..defaults
    };
    let (model, report) = reparam::fit(&dataset, &config)?;
    let agreement = reparam::policy_agreement(&model, &run_snapshot(&run, &env)?, &dataset)?;
    let bytes = artifact::encode_approximator(&model);
    fs::write(dir.join(artifact::APPROX_FILE), &bytes)?;
    let mut manifest = run.manifest.clone();
    let mut names: Vec<String> = manifest.files.iter().map(|f| f.name.clone()).collect();
    if !names.iter().any(|n| n == artifact::APPROX_FILE) {
        names.push(artifact::APPROX_FILE.into());
    }
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    artifact::write_manifest(&dir, &mut manifest, &names)?;
    let graph_bytes = fs::metadata(dir.join(artifact::GRAPH_FILE))?.len();
    println!(
        "rows {}  final loss {:.3e}  loss moving average non-increasing {}",
        dataset.len(),
        report.loss_history.last().copied().unwrap_or(0.0),
        report.loss_non_increasing
    );
    println!(
        "greedy agreement with graph policy {:.2}%",
        100.0 * agreement
    );
    println!(
        "approximator {} bytes, graph {} bytes",
        bytes.len(),
        graph_bytes
    );
    Ok(())
}

fn cmd_eval_hgq(args: &EvalArgs) -> Result<()> {
    let dir = resolve_run(&args.run);
    let run = RunArtifacts::load(&dir)?;
    let model = artifact::load_approximator(&dir.join(artifact::APPROX_FILE))?;
    let (_, env) = run_env(&run)?;
    let seeds = eval_seeds(&env, args.episodes);
    let steps = env.default_max_steps();
    let hgq = reparam::evaluate_approximator(&model, &env, &seeds, run.manifest.gamma, steps)?;
    let graph = evaluate(
        &run_snapshot(&run, &env)?,
        &env,
        &seeds,
        run.manifest.gamma,
        steps,
    )?;
    println!(
        "episodes {}  HG-Q mean total reward {:.4}  graph policy mean total reward {:.4}",
        seeds.len(),
        hgq.mean_total_reward,
        graph.mean_total_reward
    );
    let ratio = if graph.mean_total_reward == 0.0 {
        f64::NAN
    } else {
        hgq.mean_total_reward / graph.mean_total_reward
    };
    println!("aggregate mean-return ratio (HG-Q / graph policy): {ratio:.4}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DeterminismViolation { .. } => 3,
        Error::MissingArtifact(_) => 4,
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Completeness(a) => cmd_completeness(a),
        Command::Export(a) => cmd_export(a),
        Command::Distill(a) => cmd_distill(a),
        Command::EvalHgq(a) => cmd_eval_hgq(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
