use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use skyguard::analysis::{self, Alternative, Heatmap, LearningCurve, DEFAULT_CELL_SIZE};
use skyguard::config::{ConfigFile, ResolvedConfig};
use skyguard::demos::{self, DemoSource, DemoStore, SourceFilter};
use skyguard::env::{Policy, RandomPolicy};
use skyguard::geom::Vec2;
use skyguard::learner::{self, HeuristicPolicy};
use skyguard::nn::{Checkpoint, GreedyPolicy};
use skyguard::seed;
use skyguard::server::{self, ServerOptions};
use skyguard::sim::ScenarioKind;

#[derive(Debug, Parser)]
#[command(name = "skyguard", version, about = "Airspace-defense simulator, trainer and trial server")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML experiment manifest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Emit results and errors as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Use the small fast-learning world.
    #[arg(long, global = true)]
    mini: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a dueling double-DQN agent, optionally from demonstrations.
    Train(TrainArgs),
    /// Greedy success rate of a checkpoint or a built-in policy.
    Eval(EvalArgs),
    /// Record winning episodes of an agent as demonstrations.
    Collect(CollectArgs),
    /// Statistics over learning curves and stored demonstrations.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Re-simulate stored demonstrations and report divergence.
    Replay(ReplayArgs),
    /// Run the websocket trial server.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct ScenarioArg {
    #[arg(long)]
    scenario: Option<ScenarioKind>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    #[arg(long)]
    episodes: Option<u64>,
    /// Demonstration store (JSON lines).
    #[arg(long)]
    demos: Option<PathBuf>,
    #[arg(long)]
    demo_source: Option<SourceFilter>,
    #[arg(long)]
    demo_fraction: Option<f64>,
    /// Also load losing demonstrations.
    #[arg(long)]
    all_outcomes: bool,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Output directory for checkpoint.json, curve.csv and report.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum BuiltinPolicy {
    Heuristic,
    Random,
}

#[derive(Debug, Args)]
struct AgentArgs {
    #[arg(long, conflicts_with = "policy")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<BuiltinPolicy>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    #[command(flatten)]
    agent: AgentArgs,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
}

#[derive(Debug, Args)]
struct CollectArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    #[command(flatten)]
    agent: AgentArgs,
    #[arg(long, default_value_t = 500)]
    count: usize,
    /// Keep losses and timeouts too.
    #[arg(long)]
    all_outcomes: bool,
    #[arg(long)]
    max_attempts: Option<usize>,
    /// Store to append to.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Mann-Whitney U test between two groups of learning curves.
    Mwu {
        #[arg(long, num_args = 1.., required = true)]
        a: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        b: Vec<PathBuf>,
        /// two-sided, less (group a smaller) or greater.
        #[arg(long, default_value = "two-sided")]
        alternative: Alternative,
    },
    /// State-visitation entropy and heatmap of stored demonstrations.
    Diversity {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, default_value = "mixed")]
        source: SourceFilter,
        #[arg(long)]
        wins_only: bool,
        #[arg(long, default_value_t = DEFAULT_CELL_SIZE)]
        cell_size: f64,
        /// Write the visitation grid as CSV.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Episode counts per source and outcome.
    Index {
        #[arg(long)]
        demos: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    demos: PathBuf,
    /// Replay only this line of the store.
    #[arg(long)]
    index: Option<usize>,
    /// Largest acceptable position error in meters.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Defaults to SKYGUARD_PORT, then 8080.
    #[arg(long)]
    port: Option<u16>,
    /// Operator console bundle to serve.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Store for recorded sessions.
    #[arg(long)]
    demo_out: Option<PathBuf>,
    /// Wall seconds per tick at speed 1.
    #[arg(long)]
    tick_wall_seconds: Option<f64>,
}

fn main() -> ExitCode {
    let json_requested = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if json_requested
                && !matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion)
            {
                println!("{}", serde_json::json!({ "error": { "kind": "usage", "message": e.to_string().trim() } }));
                return ExitCode::from(2);
            }
            e.exit();
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
                println!(
                    "{}",
                    serde_json::json!({ "error": { "kind": "runtime", "message": e.to_string(), "causes": chain } })
                );
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    file: ConfigFile,
    resolved: ResolvedConfig,
    json: bool,
}

impl Ctx {
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce()) {
        if self.json {
            println!("{}", serde_json::to_string(value).expect("result serializes"));
        } else {
            human();
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let scenario = match &cli.command {
        Command::Train(a) => a.scenario.scenario,
        Command::Eval(a) => a.scenario.scenario,
        Command::Collect(a) => a.scenario.scenario,
        _ => None,
    };
    let mut resolved = ResolvedConfig::resolve(&file, cli.seed, cli.mini, scenario)?;
    if let Command::Train(a) = &cli.command {
        if let Some(n) = a.episodes {
            resolved.train.episodes = n;
        }
        if let Some(f) = a.demo_fraction {
            resolved.train.demo_fraction = f;
        }
        if let Some(n) = a.eval_every {
            resolved.train.eval_every = n;
        }
        resolved.train.validate()?;
    }
    if !matches!(cli.command, Command::Analyze(_)) {
        eprintln!("# resolved config\n{}", resolved.to_toml());
    }
    let ctx = Ctx { file, resolved, json: cli.json };
    match cli.command {
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Collect(a) => collect(&ctx, a),
        Command::Analyze(a) => analyze(&ctx, a),
        Command::Replay(a) => replay(&ctx, a),
        Command::Serve(a) => serve(&ctx, a),
    }
}

fn agent(args: &AgentArgs, seed: u64) -> Result<(Box<dyn Policy>, DemoSource)> {
    Ok(match (&args.checkpoint, args.policy) {
        (Some(path), _) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            (Box::new(GreedyPolicy { network: ckpt.network()? }), DemoSource::AgentDemo)
        }
        (None, Some(BuiltinPolicy::Random)) => {
            (Box::new(RandomPolicy::new(seed::derive(seed, seed::stream::POLICY))), DemoSource::AgentDemo)
        }
        (None, Some(BuiltinPolicy::Heuristic)) | (None, None) => (Box::new(HeuristicPolicy), DemoSource::AgentDemo),
    })
}

#[derive(Serialize)]
struct TrainSummary {
    out: PathBuf,
    episodes: u64,
    env_steps: u64,
    updates: u64,
    final_success: Option<f64>,
    episodes_to_60: Option<u64>,
    demo_transitions: usize,
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let r = &ctx.resolved;
    let out = a.out.or_else(|| ctx.file.out.clone()).unwrap_or_else(|| PathBuf::from("runs/latest"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let demo_path = a.demos.or_else(|| ctx.file.demos.clone());
    let filter = a.demo_source.or(ctx.file.demo_source).unwrap_or(SourceFilter::Mixed);
    let buffer = match &demo_path {
        Some(path) => {
            let stored = DemoStore::open(path).read_all()?;
            let buf =
                demos::load_transitions(&stored, filter, !a.all_outcomes, r.train.loss.n, r.train.gamma, &r.world)?;
            log::info!("loaded {} demonstration transitions from {} episodes", buf.len(), stored.len());
            Some(buf)
        }
        None => None,
    };
    let mut progress = |p: &analysis::CurvePoint| {
        log::info!("episode {:>6}  success {:.3}  epsilon {:.4}", p.episode, p.success_rate, p.epsilon);
    };
    let mut report = learner::train(&r.train, &r.world, r.scenario, buffer.as_ref(), Some(&mut progress))?;
    report.checkpoint.metadata.demo_source = buffer.as_ref().map(|_| filter_name(filter).to_string());
    report.checkpoint.save(&out.join("checkpoint.json"))?;
    report.curve.save(&out.join("curve.csv"))?;
    let summary = TrainSummary {
        out: out.clone(),
        episodes: r.train.episodes,
        env_steps: report.env_steps,
        updates: report.updates,
        final_success: report.final_success,
        episodes_to_60: report.curve.episodes_to_reach(0.6),
        demo_transitions: buffer.as_ref().map_or(0, |b| b.len()),
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
    ctx.emit(&summary, || {
        println!(
            "trained {} episodes ({} env steps, {} updates) -> {}",
            summary.episodes,
            summary.env_steps,
            summary.updates,
            out.display()
        );
        if let Some(s) = summary.final_success {
            println!("final success rate: {s:.3}");
        }
        match summary.episodes_to_60 {
            Some(e) => println!("first reached 60% at episode {e}"),
            None => println!("never reached 60%"),
        }
    });
    Ok(())
}

fn filter_name(f: SourceFilter) -> &'static str {
    match f {
        SourceFilter::Agent => "agent",
        SourceFilter::Human => "human",
        SourceFilter::Pc => "pc",
        SourceFilter::Mixed => "mixed",
    }
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let r = &ctx.resolved;
    let (mut policy, _) = agent(&a.agent, r.seed)?;
    let summary = analysis::evaluate(&mut policy, r.scenario, &r.world, a.episodes, r.seed)?;
    ctx.emit(&summary, || {
        println!(
            "{} episodes: {} wins, {} losses, {} timeouts; success rate {:.3}; mean ticks {:.1}",
            summary.episodes,
            summary.wins,
            summary.losses,
            summary.timeouts,
            summary.success_rate(),
            summary.mean_ticks
        );
    });
    Ok(())
}

#[derive(Serialize)]
struct CollectSummary {
    stored: usize,
    store: PathBuf,
}

fn collect(ctx: &Ctx, a: CollectArgs) -> Result<()> {
    let r = &ctx.resolved;
    let (mut policy, source) = agent(&a.agent, r.seed)?;
    let max_attempts = a.max_attempts.unwrap_or(a.count.saturating_mul(20).max(100));
    let found = demos::collect_agent_demos(
        &mut policy,
        r.scenario,
        &r.world,
        a.count,
        !a.all_outcomes,
        r.seed,
        max_attempts,
        source,
    )?;
    let store = a.out.or_else(|| ctx.file.demos.clone()).unwrap_or_else(|| PathBuf::from("demos.jsonl"));
    DemoStore::open(&store).append_all(&found)?;
    let summary = CollectSummary { stored: found.len(), store };
    ctx.emit(&summary, || println!("stored {} demonstrations in {}", summary.stored, summary.store.display()));
    Ok(())
}

fn load_curves(paths: &[PathBuf]) -> Result<Vec<LearningCurve>> {
    paths.iter().map(|p| LearningCurve::load(p).with_context(|| format!("reading {}", p.display()))).collect()
}

fn analyze(ctx: &Ctx, a: AnalyzeCommand) -> Result<()> {
    match a {
        AnalyzeCommand::Mwu { a, b, alternative } => {
            let result = analysis::compare_curves(&load_curves(&a)?, &load_curves(&b)?)?;
            ctx.emit(&result, || {
                println!(
                    "U = {:.1}  p = {:.4} ({alternative:?}, {:?})  rank-biserial = {:.3}",
                    result.u,
                    result.p(alternative),
                    result.method,
                    result.effect_rank_biserial
                );
            });
        }
        AnalyzeCommand::Diversity { demos: path, source, wins_only, cell_size, heatmap } => {
            if !(cell_size.is_finite() && cell_size > 0.0) {
                bail!("cell size must be positive, got {cell_size}");
            }
            let stored = DemoStore::open(&path).read_all()?;
            let trajectories: Vec<Vec<Vec2>> = stored
                .iter()
                .filter(|d| source.accepts(d.source) && (!wins_only || d.outcome == skyguard::env::Outcome::Win))
                .map(|d| d.blue_positions().collect())
                .collect();
            let report = analysis::state_entropy(trajectories.iter().map(Vec::as_slice), cell_size);
            if let Some(out) = &heatmap {
                let map =
                    Heatmap::build(trajectories.iter().map(Vec::as_slice), ctx.resolved.world.map_side, cell_size);
                map.write_csv(fs::File::create(out).with_context(|| format!("creating {}", out.display()))?)?;
            }
            ctx.emit(&report, || {
                println!(
                    "entropy {:.4} nats over {} cells ({} points, cell {} m) from {} episodes",
                    report.entropy,
                    report.unique_cells,
                    report.n_points,
                    report.grid_cell_size,
                    trajectories.len()
                );
            });
        }
        AnalyzeCommand::Index { demos: path } => {
            let stored = DemoStore::open(&path).read_all()?;
            let counts: Vec<_> = demos::index(&stored)
                .into_iter()
                .map(|((source, outcome), n)| serde_json::json!({ "source": source.to_string(), "outcome": outcome, "count": n }))
                .collect();
            ctx.emit(&counts, || {
                for c in &counts {
                    println!(
                        "{:<6} {:<8} {}",
                        c["source"].as_str().unwrap_or(""),
                        c["outcome"].as_str().unwrap_or(""),
                        c["count"]
                    );
                }
            });
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct ReplaySummary {
    replayed: usize,
    max_divergence: f64,
    mismatched_outcomes: usize,
}

fn replay(ctx: &Ctx, a: ReplayArgs) -> Result<()> {
    let stored = DemoStore::open(&a.demos).read_all()?;
    let selected: Vec<_> = match a.index {
        Some(i) => vec![stored.get(i).with_context(|| format!("store has {} episodes", stored.len()))?],
        None => stored.iter().collect(),
    };
    let mut summary = ReplaySummary { replayed: 0, max_divergence: 0.0, mismatched_outcomes: 0 };
    for demo in selected {
        let r = demos::replay(demo, &ctx.resolved.world)?;
        summary.replayed += 1;
        summary.max_divergence = summary.max_divergence.max(r.max_divergence);
        summary.mismatched_outcomes += usize::from(!r.outcome_matches);
    }
    ctx.emit(&summary, || {
        println!(
            "replayed {} episodes: max divergence {:.3e} m, {} outcome mismatches",
            summary.replayed, summary.max_divergence, summary.mismatched_outcomes
        );
    });
    if summary.max_divergence > a.tolerance || summary.mismatched_outcomes > 0 {
        bail!("replay diverged beyond {} m", a.tolerance);
    }
    Ok(())
}

fn serve(ctx: &Ctx, a: ServeArgs) -> Result<()> {
    let section = &ctx.file.server;
    let mut options = ServerOptions::new(ctx.resolved.world.clone());
    options.static_dir = a.static_dir.or_else(|| section.static_dir.clone());
    options.demo_store = a.demo_out.or_else(|| section.demo_out.clone());
    options.tick_wall_seconds = a.tick_wall_seconds.or(section.tick_wall_seconds);
    if let Some(dir) = &options.static_dir {
        if !Path::new(dir).is_dir() {
            bail!("static directory {} does not exist", dir.display());
        }
    }
    let port = a.port.or(section.port).unwrap_or_else(server::port_from_env);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = server::bind(port).await.with_context(|| format!("binding port {port}"))?;
        log::info!("listening on {}", listener.local_addr()?);
        server::serve(listener, options).await?;
        Ok(())
    })
}
