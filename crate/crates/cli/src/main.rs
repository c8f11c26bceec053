use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use condbo::bench::report::{aggregate, aggregate_csv, curve, curves_csv, median, CurvePoint};
use condbo::bench::{self, Jenatton, JENATTON_OPTIMUM};
use condbo::driver::{
    initial_model, meta_train, Clock, CommandObjective, DriverError, MetaOptions, MetaTask, MetaTaskSet, Method, Objective,
    ObservationSet, Optimizer, RunConfig, RunDir,
};
use condbo::gp::FitOptions;
use condbo::nn::{EncoderConfig, Pooling};
use condbo::space::{fixtures, serialize_config, SearchSpace};

/// Writes to stdout; a closed pipe (`condbo ... | head`) ends the process quietly.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        if let Err(e) = write!(std::io::stdout(), $($t)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
        }
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        out!($($t)*);
        out!("\n");
    }};
}

/// Environment variable naming the default output root.
const OUT_ENV: &str = "CONDBO_OUT";

#[derive(Parser, Debug)]
#[command(name = "condbo", version, about = "Bayesian optimization over conditional search spaces")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a search space and print its subspace table.
    Validate {
        /// Space file, or a built-in name (sim, simulation, svm, xgboost, cash, nas).
        space: String,
    },
    /// Draw random configurations as canonical JSON, one per line.
    Sample {
        #[arg(long)]
        space: String,
        #[arg(short, long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict draws to one subspace (1-based); all subspaces in turn otherwise.
        #[arg(long)]
        subspace: Option<usize>,
    },
    /// Run one optimization.
    Run(RunArgs),
    /// Run every method on a benchmark suite over several seeds.
    Benchmark(BenchArgs),
    /// Pre-train surrogate weights on offline observation logs.
    MetaTrain(MetaArgs),
    /// Aggregate benchmark runs into plot data.
    Report {
        /// Directory holding `<method>/seed_<k>` run directories.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Emit::Summary)]
        emit: Emit,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Emit {
    /// Per-iteration medians and quartiles.
    Csv,
    /// Per-run best-so-far curves.
    Curves,
    /// Final medians per method.
    Summary,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PoolingArg {
    Avg,
    Token,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// 2 blocks, d_model 32.
    Compact,
    /// 6 blocks, d_model 256.
    Full,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Suite {
    Jenatton,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Compact)]
    encoder: Preset,
    #[arg(long, value_enum, default_value_t = PoolingArg::Avg)]
    pooling: PoolingArg,
    /// Embed only hyperparameter values (no identity, index or father parts).
    #[arg(long)]
    no_structure_emb: bool,
    /// Adam epochs per fit.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
}

impl ModelArgs {
    fn encoder(&self) -> EncoderConfig {
        let base = match self.encoder {
            Preset::Compact => EncoderConfig::compact(),
            Preset::Full => EncoderConfig::default(),
        };
        EncoderConfig {
            pooling: match self.pooling {
                PoolingArg::Avg => Pooling::Average,
                PoolingArg::Token => Pooling::TokenMixer,
            },
            use_structure_embeddings: !self.no_structure_emb,
            ..base
        }
    }

    fn fit(&self) -> FitOptions {
        FitOptions {
            epochs: self.epochs,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Space file or built-in name; read from the run directory on --resume.
    #[arg(long, required_unless_present = "resume")]
    space: Option<String>,
    /// `builtin:jenatton` or `cmd:<program> [args...]`.
    #[arg(long, default_value = "builtin:jenatton")]
    objective: String,
    #[arg(long, value_parser = parse_method, default_value = "attnbo")]
    method: Method,
    /// BO iterations after the initial design [default: 50, or the stored count on --resume].
    #[arg(long)]
    iters: Option<usize>,
    /// Configurations evaluated per iteration.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Initial design points per subspace.
    #[arg(long, default_value_t = 2)]
    init: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory (default: `$CONDBO_OUT/<method>-seed<seed>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weights container from `meta-train`.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// Re-initialize the surrogate before every fit.
    #[arg(long)]
    fresh_fit: bool,
    /// Continue the run in --out from its last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Record zero timings and sequence timestamps so logs are reproducible byte for byte.
    #[arg(long)]
    logical_clock: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = Suite::Jenatton)]
    suite: Suite,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "attnbo,random,indepgp")]
    methods: Vec<Method>,
    /// Seeds per method, starting at --seed.
    #[arg(long, default_value_t = 10)]
    repeats: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 80)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Output directory (default: `$CONDBO_OUT/benchmark`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    logical_clock: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct MetaArgs {
    /// Space shared by all task logs.
    #[arg(long)]
    space: String,
    /// Observation logs, one per task.
    #[arg(long, num_args = 1.., required = true)]
    tasks: Vec<PathBuf>,
    /// Weights container to write.
    #[arg(long)]
    out: PathBuf,
    /// Tasks per Adam step.
    #[arg(long, default_value_t = 4)]
    tasks_per_batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::from_label(s).ok_or_else(|| format!("unknown method `{s}` (expected attnbo, random or indepgp)"))
}

#[derive(Debug)]
enum CliError {
    /// Bad flags or invalid input files: exit 1.
    Invalid(String),
    /// Failure while running: exit 2.
    Runtime(String),
}

impl From<DriverError> for CliError {
    fn from(e: DriverError) -> Self {
        match e {
            DriverError::Config(_)
            | DriverError::Space(_)
            | DriverError::SpaceMismatch { .. }
            | DriverError::WarmStart(_)
            | DriverError::Log { .. }
            | DriverError::Corrupt(_) => CliError::Invalid(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("condbo-runs"))
}

fn load_space(arg: &str) -> Result<SearchSpace, CliError> {
    let path = Path::new(arg);
    let text = if path.is_file() {
        std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{arg}: {e}")))?
    } else if let Some(doc) = fixtures::by_name(arg) {
        doc.to_string()
    } else {
        return Err(CliError::Invalid(format!("{arg}: no such file or built-in space")));
    };
    SearchSpace::parse(&text).map_err(|e| CliError::Invalid(format!("{arg}: {e}")))
}

fn make_objective(spec: &str) -> Result<Box<dyn Objective>, CliError> {
    if spec == "builtin:jenatton" {
        return Ok(Box::new(Jenatton));
    }
    if let Some(cmd) = spec.strip_prefix("cmd:") {
        let argv = cmd.split_whitespace().map(String::from).collect();
        return Ok(Box::new(CommandObjective::new(argv).map_err(CliError::Invalid)?));
    }
    Err(CliError::Invalid(format!("unknown objective `{spec}` (expected builtin:jenatton or cmd:<argv>)")))
}

fn optimum_of(objective: &str) -> Option<f64> {
    (objective == "builtin:jenatton").then_some(JENATTON_OPTIMUM)
}

fn print_json(v: &condbo::driver::RunSummary) {
    outln!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn cmd_validate(space: &str) -> Result<(), CliError> {
    let s = load_space(space)?;
    outln!("{} subspaces, {} hyperparameter identities", s.subspaces.len(), s.n_identities());
    outln!("{:>4}  {:>3}  decisions", "id", "dim");
    for sub in &s.subspaces {
        let decisions: Vec<String> = sub.decisions.iter().map(|(k, v)| format!("{k}={}", v.to_json())).collect();
        outln!("{:>4}  {:>3}  {}", sub.id, sub.dimension(), decisions.join(", "));
    }
    Ok(())
}

fn cmd_sample(space: &str, n: usize, seed: u64, subspace: Option<usize>) -> Result<(), CliError> {
    let s = load_space(space)?;
    if let Some(id) = subspace {
        s.subspace(id).map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    for k in 0..n {
        let id = subspace.unwrap_or(k % s.subspaces.len() + 1);
        let draw_seed = condbo::driver::derive_seed(seed, k as u64, id as u64, condbo::driver::purpose::RANDOM);
        let config = s.sample(id, draw_seed).map_err(|e| CliError::Runtime(e.to_string()))?;
        outln!("{}", serialize_config(&config));
    }
    Ok(())
}

fn run_loop(opt: &mut Optimizer, objective: &dyn Objective) -> Result<(), CliError> {
    opt.initialize(objective)?;
    let total = opt.config().iterations;
    while opt.iteration() < total {
        opt.step(objective)?;
        let best = opt.observations().best().and_then(|r| r.y);
        info!("iteration {}/{total}: best {best:?}", opt.iteration());
    }
    let summary = opt.run(objective)?;
    print_json(&summary);
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    let dir = a
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("{}-seed{}", a.method.label(), a.seed)));
    if a.resume {
        if !dir.join("manifest.json").is_file() {
            return Err(CliError::Invalid(format!("no run to resume in {}", dir.display())));
        }
        let manifest = RunDir::read_manifest(&dir)?;
        let space = match &a.space {
            Some(s) => load_space(s)?,
            None => SearchSpace::parse(&manifest.space).map_err(|e| CliError::Invalid(format!("stored space: {e}")))?,
        };
        let objective = make_objective(&manifest.objective)?;
        let iters = a.iters.filter(|&t| t != manifest.run.iterations);
        let mut opt = Optimizer::resume(space, &dir, iters)?;
        info!("resumed {} at iteration {}", dir.display(), opt.iteration());
        return run_loop(&mut opt, objective.as_ref());
    }
    let space = load_space(a.space.as_deref().expect("required without --resume"))?;
    let objective = make_objective(&a.objective)?;
    let run = RunConfig {
        iterations: a.iters.unwrap_or(50),
        batch: a.batch,
        init_per_subspace: a.init,
        seed: a.seed,
        method: a.method,
        encoder: a.model.encoder(),
        fit: a.model.fit(),
        fresh_fit: a.fresh_fit,
        warm_start: a.warm_start.clone(),
        clock: if a.logical_clock { Clock::Logical } else { Clock::System },
        ..Default::default()
    };
    run.validate(&space)?;
    let mut opt = Optimizer::create(space, run, &dir, &objective.name())?;
    info!("writing {}", dir.display());
    run_loop(&mut opt, objective.as_ref())
}

fn cmd_benchmark(a: BenchArgs) -> Result<(), CliError> {
    let Suite::Jenatton = a.suite;
    let space = bench::jenatton_space();
    let out = a.out.clone().unwrap_or_else(|| out_root().join("benchmark"));
    let base = RunConfig {
        iterations: a.iters,
        batch: a.batch,
        encoder: a.model.encoder(),
        fit: a.model.fit(),
        clock: if a.logical_clock { Clock::Logical } else { Clock::System },
        ..Default::default()
    };
    base.validate(&space)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.repeats).collect();
    let runs = bench::run_matrix(&space, &Jenatton, &a.methods, &seeds, &base, Some(&out), a.jobs)?;
    let points: Vec<CurvePoint> = runs
        .iter()
        .flat_map(|r| curve(r.method.label(), r.seed, &r.observations, Some(JENATTON_OPTIMUM)))
        .collect();
    write_file(&out.join("curves.csv"), &curves_csv(&points))?;
    write_file(&out.join("aggregate.csv"), &aggregate_csv(&aggregate(&points)))?;
    outln!("{} runs written to {}", runs.len(), out.display());
    print_summary(&points);
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_meta_train(a: MetaArgs) -> Result<(), CliError> {
    let space = load_space(&a.space)?;
    if a.tasks.len() < 2 {
        return Err(CliError::Invalid("meta-training needs at least two task logs".into()));
    }
    let mut tasks = Vec::new();
    for (task_id, path) in a.tasks.iter().enumerate() {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        let observations =
            ObservationSet::from_jsonl(&text, &space).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        tasks.push(MetaTask { task_id, observations });
    }
    let run = RunConfig {
        seed: a.seed,
        encoder: a.model.encoder(),
        ..Default::default()
    };
    let model = initial_model(&space, &run)?;
    let set = MetaTaskSet { space, tasks };
    let opts = MetaOptions {
        fit: a.model.fit(),
        tasks_per_batch: a.tasks_per_batch.max(1),
        seed: a.seed,
    };
    let result = meta_train(&set, model, &opts)?;
    result
        .model
        .to_container()
        .save(&a.out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    outln!(
        "trained on {} tasks ({} skipped), final loss {:.4}; weights in {}",
        set.tasks.len() - result.skipped.len(),
        result.skipped.len(),
        result.history.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

/// Reads every `<method>/seed_<k>` run under `root`, sorted by path.
fn collect_curves(root: &Path) -> Result<Vec<CurvePoint>, CliError> {
    let list = |p: &Path| -> Result<Vec<PathBuf>, CliError> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    let mut points = Vec::new();
    for method_dir in list(root)? {
        for run_dir in list(&method_dir)? {
            if !run_dir.join("manifest.json").exists() {
                continue;
            }
            let manifest = RunDir::read_manifest(&run_dir)?;
            let space = SearchSpace::parse(&manifest.space).map_err(|e| CliError::Invalid(format!("{}: {e}", run_dir.display())))?;
            let log = run_dir.join("observations.jsonl");
            let text = std::fs::read_to_string(&log).map_err(|e| CliError::Invalid(format!("{}: {e}", log.display())))?;
            let obs = ObservationSet::from_jsonl(&text, &space).map_err(|e| CliError::Invalid(format!("{}: {e}", log.display())))?;
            points.extend(curve(manifest.run.method.label(), manifest.run.seed, &obs, optimum_of(&manifest.objective)));
        }
    }
    if points.is_empty() {
        return Err(CliError::Invalid(format!("no runs found under {}", root.display())));
    }
    Ok(points)
}

fn print_summary(points: &[CurvePoint]) {
    let rows = aggregate(points);
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.dedup();
    outln!("{:<10} {:>5} {:>6} {:>12} {:>14}", "method", "runs", "evals", "median_best", "median_log10r");
    for m in methods {
        let last = rows.iter().filter(|r| r.method == m).last().expect("method has rows");
        let regret = last.median_log10_regret.map_or("-".to_string(), |r| format!("{r:.3}"));
        outln!("{:<10} {:>5} {:>6.0} {:>12.6} {:>14}", m, last.n, last.evals, last.median_best_y, regret);
    }
    // best-so-far at fixed evaluation budgets, when every run got that far
    for budget in [100, 200] {
        for m in points.iter().map(|p| p.method.as_str()).collect::<std::collections::BTreeSet<_>>() {
            let per_run: Vec<f64> = points
                .iter()
                .filter(|p| p.method == m && p.evals <= budget)
                .fold(std::collections::BTreeMap::new(), |mut acc, p| {
                    acc.insert(p.seed, (p.evals, p.log10_regret));
                    acc
                })
                .values()
                .filter(|(e, _)| *e == budget)
                .filter_map(|(_, r)| *r)
                .collect();
            if let Some(med) = median(&per_run) {
                outln!("{m} at {budget} evals: median log10 regret {med:.3} over {} runs", per_run.len());
            }
        }
    }
}

fn cmd_report(input: &Path, emit: Emit) -> Result<(), CliError> {
    let points = collect_curves(input)?;
    match emit {
        Emit::Csv => out!("{}", aggregate_csv(&aggregate(&points))),
        Emit::Curves => out!("{}", curves_csv(&points)),
        Emit::Summary => print_summary(&points),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Validate { space } => cmd_validate(&space),
        Command::Sample { space, n, seed, subspace } => cmd_sample(&space, n, seed, subspace),
        Command::Run(a) => cmd_run(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::MetaTrain(a) => cmd_meta_train(a),
        Command::Report { input, emit } => cmd_report(&input, emit),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
