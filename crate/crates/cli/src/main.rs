use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use pengcde::checks::{run_check, CHECK_NAMES};
use pengcde::dynamics::{Task, TaskConfig};
use pengcde::experiment::{evaluate, generate_bundle, normalization_for, run, Bundle, Evaluation, Role, RunError, RunSpec};
use pengcde::graphgen::{DynamicGraphSeries, GraphFamily, GraphKind, SeriesConfig};
use pengcde::io::{read_series, write_series};
use pengcde::neuralcde::{SolverConfig, Variant};
use pengcde::scaling::{scaling, write_scaling_csv, ScalingSetup};
use pengcde::solver::AdaptiveConfig;
use pengcde::trainer::{
    ablate_fusion, identity_dominates, write_ablation_csv, write_history_csv, write_metrics_csv, write_snapshot_csv,
    Checkpoint, MetricRow, TrainConfig,
};
use pengcde::{par, Error};

#[derive(Parser)]
#[command(name = "pengcde", version, about = "Equivariant neural graph CDEs on dynamic graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, val and test batches of dynamic graph series.
    Gen {
        #[command(flatten)]
        settings: Settings,
        /// Series per batch role.
        #[arg(long, default_value_t = 4)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with the same keys as the long flags.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model per seed and evaluate it on the test batch.
    Train {
        #[command(flatten)]
        settings: Settings,
        /// Number of runs, seeded `seed`, `seed + 1`, ...
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset written by `gen`; without it every run generates its own from its seed.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = RoleArg::Test)]
        role: RoleArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run self-checks; `all` or no names runs every one.
    Check {
        names: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the fusion weights of a trained equivariant model.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-epoch wall time against node count for PENG and pre-multiplication.
    ///
    /// Each point is the fastest of `--epochs` timed single-epoch runs.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [128, 256, 512])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [Variant::Peng, Variant::PreMult])]
        variants: Vec<Variant>,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 12)]
        times: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RoleArg {
    Train,
    Val,
    Test,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Train => Role::Train,
            RoleArg::Val => Role::Val,
            RoleArg::Test => Role::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum Scale {
    #[default]
    Desk,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum SolverKind {
    Tsit5,
    Rk4,
    Rk4Knots,
}

/// Overridable settings. Flags win over the config file, which wins over the preset.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct Settings {
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    graph: Option<GraphFamily>,
    #[arg(long, value_enum)]
    scale: Option<Scale>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    times: Option<usize>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    changes: Option<usize>,
    #[arg(long)]
    flip_rate: Option<f64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    min_epochs: Option<usize>,
    #[arg(long, value_enum)]
    solver: Option<SolverKind>,
    /// RK4 steps per gap between observations.
    #[arg(long)]
    substeps: Option<usize>,
    /// Uniform RK4 steps over the whole interval.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    per_layer_fusion: Option<bool>,
}

macro_rules! prefer {
    ($a:ident, $b:ident; $($f:ident),*) => {
        Settings { $($f: $a.$f.or($b.$f)),* }
    };
}

impl Settings {
    fn over(self, base: Settings) -> Settings {
        let (a, b) = (self, base);
        prefer!(a, b; task, graph, scale, nodes, times, t_end, changes, flip_rate, variant, epochs, lr,
            weight_decay, patience, min_epochs, solver, substeps, steps, rtol, atol, latent, hidden, layers,
            per_layer_fusion)
    }

    fn load(cli: Settings, file: Option<&Path>) -> Result<Settings, Fail> {
        let Some(path) = file else { return Ok(cli) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Fail::Usage)?;
        let from_file: Settings = toml::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .map_err(Fail::Usage)?;
        Ok(cli.over(from_file))
    }

    fn scale(&self) -> Scale {
        self.scale.unwrap_or_default()
    }

    fn task_config(&self) -> TaskConfig {
        let family = self.graph.unwrap_or(GraphFamily::Community);
        let mut series = match self.scale() {
            Scale::Desk => SeriesConfig::desk(family),
            Scale::Paper => SeriesConfig::paper(family),
        };
        if let Some(n) = self.nodes {
            series.num_nodes = n;
            series.graph = family.defaults(n);
        }
        set(&mut series.num_times, self.times);
        set(&mut series.t_end, self.t_end);
        set(&mut series.num_changes, self.changes);
        set(&mut series.flip_rate, self.flip_rate);
        TaskConfig {
            task: self.task.unwrap_or(Task::Heat),
            series,
            regime: None,
        }
    }

    fn train_config(&self) -> TrainConfig {
        let mut cfg = match self.scale() {
            Scale::Desk => TrainConfig::desk(),
            Scale::Paper => TrainConfig::paper(),
        };
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.optimizer.lr, self.lr);
        set(&mut cfg.optimizer.weight_decay, self.weight_decay);
        set(&mut cfg.min_epochs, self.min_epochs);
        cfg.patience = self.patience.unwrap_or(cfg.patience.min(cfg.epochs));
        let kind = self.solver.unwrap_or(match cfg.solver {
            SolverConfig::Tsit5(_) => SolverKind::Tsit5,
            SolverConfig::Rk4 { .. } => SolverKind::Rk4,
            _ => SolverKind::Rk4Knots,
        });
        cfg.solver = match kind {
            SolverKind::Tsit5 => {
                let mut a = match cfg.solver {
                    SolverConfig::Tsit5(a) => a,
                    _ => AdaptiveConfig::default(),
                };
                set(&mut a.rtol, self.rtol);
                set(&mut a.atol, self.atol);
                SolverConfig::Tsit5(a)
            }
            SolverKind::Rk4 => SolverConfig::Rk4 {
                steps: self.steps.unwrap_or(100),
            },
            SolverKind::Rk4Knots => SolverConfig::Rk4Knots {
                substeps: self.substeps.unwrap_or(1),
            },
        };
        cfg
    }

    fn run_spec(&self, task: &TaskConfig) -> RunSpec {
        let mut spec = RunSpec::for_task(task, self.variant.unwrap_or(Variant::Peng), self.train_config());
        set(&mut spec.model.latent, self.latent);
        set(&mut spec.model.hidden, self.hidden);
        set(&mut spec.model.layers, self.layers);
        set(&mut spec.model.per_layer_fusion, self.per_layer_fusion);
        spec
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug)]
enum Fail {
    Usage(anyhow::Error),
    Check,
    Numeric(anyhow::Error),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Check => 1,
            Fail::Usage(_) => 2,
            Fail::Numeric(_) => 3,
        }
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::StepUnderflow { .. } | Error::BlowUp { .. } => Fail::Numeric(e.into()),
            other => Fail::Usage(other.into()),
        }
    }
}

impl From<anyhow::Error> for Fail {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Fail::Usage(e),
        }
    }
}

fn print_config<T: Serialize>(what: &str, value: &T) -> Result<(), Fail> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Fail::Usage(e.into()))?;
    println!("{what} config:\n{text}");
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), Fail> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Fail::Usage)
}

fn series_file(role: Role, i: usize) -> String {
    format!("{}_{i}.json", role.name())
}

fn write_bundle(dir: &Path, bundle: &Bundle) -> Result<usize, Fail> {
    create_dir(dir)?;
    let mut written = 0;
    for role in Role::ALL {
        for (i, s) in bundle.role(role).iter().enumerate() {
            write_series(&dir.join(series_file(role, i)), s)?;
            written += 1;
        }
    }
    Ok(written)
}

/// Reads `{role}_{i}.json` for consecutive `i` starting at 0.
fn read_role(dir: &Path, role: Role) -> Result<Vec<DynamicGraphSeries>, Fail> {
    let mut out = Vec::new();
    loop {
        let path = dir.join(series_file(role, out.len()));
        if !path.exists() {
            break;
        }
        out.push(read_series(&path).map_err(|e| Fail::from(anyhow!(e).context(format!("reading {}", path.display()))))?);
    }
    Ok(out)
}

fn read_bundle(dir: &Path) -> Result<Bundle, Fail> {
    if !dir.is_dir() {
        return Err(Fail::Usage(anyhow!("dataset directory {} does not exist", dir.display())));
    }
    let bundle = Bundle {
        train: read_role(dir, Role::Train)?,
        val: read_role(dir, Role::Val)?,
        test: read_role(dir, Role::Test)?,
    };
    if bundle.train.is_empty() || bundle.val.is_empty() || bundle.test.is_empty() {
        return Err(Fail::Usage(anyhow!("{} needs train_0.json, val_0.json and test_0.json", dir.display())));
    }
    Ok(bundle)
}

fn graph_name(kind: &GraphKind) -> &'static str {
    match kind {
        GraphKind::Grid { .. } => "grid",
        GraphKind::SmallWorld { .. } => "small-world",
        GraphKind::PowerLaw { .. } => "power-law",
        GraphKind::Community { .. } => "community",
    }
}

/// Task recorded in the series, if every series agrees on one.
fn bundle_task(bundle: &Bundle) -> Result<Option<Task>, Fail> {
    let first = bundle.train[0].meta.task.clone();
    let all = Role::ALL.iter().flat_map(|&r| bundle.role(r));
    if all.into_iter().any(|s| s.meta.task != first) {
        return Err(Fail::Usage(anyhow!("dataset mixes series of different tasks")));
    }
    first.map(|t| t.parse::<Task>()).transpose().map_err(Fail::from)
}

fn metric_rows(eval: &Evaluation, base: &MetricRow) -> Vec<MetricRow> {
    let row = |split: &str, value: f64| MetricRow {
        split: split.to_string(),
        value,
        ..base.clone()
    };
    match eval {
        Evaluation::Regression { metrics, .. } => vec![
            row("test", metrics.all),
            row("test-interp", metrics.interp),
            row("test-extrap", metrics.extrap),
        ],
        Evaluation::Classification(c) => vec![row("test", c.accuracy)],
    }
}

fn write_snapshots(path: &Path, eval: &Evaluation) -> Result<(), Fail> {
    if let Evaluation::Regression { snapshots, .. } = eval {
        write_snapshot_csv(path, snapshots)?;
    }
    Ok(())
}

fn cmd_gen(settings: Settings, config: Option<&Path>, seeds: usize, seed: u64, out: &Path) -> Result<(), Fail> {
    let settings = Settings::load(settings, config)?;
    let task = settings.task_config();
    print_config("gen", &serde_json::json!({ "scale": settings.scale(), "dataset": task, "batch": seeds, "seed": seed }))?;
    if seeds == 0 {
        return Err(Fail::Usage(anyhow!("--seeds must be at least 1")));
    }
    let bundle = generate_bundle(&task, seed, seeds)?;
    let written = write_bundle(out, &bundle)?;
    println!("wrote {written} series to {}", out.display());
    Ok(())
}

struct TrainArgs<'a> {
    seeds: usize,
    seed: u64,
    data: Option<&'a Path>,
    out: &'a Path,
}

fn cmd_train(settings: Settings, config: Option<&Path>, args: TrainArgs<'_>) -> Result<(), Fail> {
    let settings = Settings::load(settings, config)?;
    if args.seeds == 0 {
        return Err(Fail::Usage(anyhow!("--seeds must be at least 1")));
    }
    let shared = args.data.map(read_bundle).transpose()?;
    let mut task = settings.task_config();
    if let Some(bundle) = &shared {
        if let Some(t) = bundle_task(bundle)? {
            task.task = t;
        }
        task.series.num_nodes = bundle.train[0].num_nodes();
        task.series.graph = bundle.train[0].meta.graph.clone();
    }
    let spec = settings.run_spec(&task);
    spec.train.validate()?;
    print_config(
        "train",
        &serde_json::json!({
            "scale": settings.scale(),
            "dataset": if shared.is_some() { serde_json::json!(args.data) } else { serde_json::to_value(&task).unwrap_or_default() },
            "model": spec.model,
            "train": spec.train,
            "seeds": (0..args.seeds as u64).map(|i| args.seed + i).collect::<Vec<_>>(),
        }),
    )?;
    create_dir(args.out)?;

    let seeds: Vec<u64> = (0..args.seeds as u64).map(|i| args.seed + i).collect();
    let outcomes = par::map(&seeds, |&seed| {
        let bundle = match &shared {
            Some(b) => b.clone(),
            None => generate_bundle(&task, seed, 4).map_err(RunError::Setup)?,
        };
        log::info!("seed {seed}: training {}", spec.model.variant);
        let norm = normalization_for(&bundle, &spec).ok().flatten();
        Ok((norm, run(&spec, &bundle, seed, Some(task.task.name()))))
    });

    let graph = graph_name(&task.series.graph);
    let mut rows = Vec::new();
    let mut failure = None;
    for (seed, outcome) in seeds.iter().zip(outcomes) {
        let (norm, outcome) = match outcome {
            Ok(pair) => pair,
            Err(e) => (None, Err(e)),
        };
        match outcome {
            Ok(o) => {
                o.checkpoint.save(&args.out.join(format!("checkpoint_seed{seed}.json")))?;
                write_history_csv(&args.out.join(format!("history_seed{seed}.csv")), &o.trained.history)?;
                write_snapshots(&args.out.join(format!("snapshots_seed{seed}.csv")), &o.test)?;
                let base = MetricRow {
                    seed: *seed,
                    variant: spec.model.variant.name().to_string(),
                    task: task.task.name().to_string(),
                    graph_kind: graph.to_string(),
                    split: String::new(),
                    value: 0.0,
                    epochs_run: o.trained.epochs_run,
                    wall_seconds: o.trained.wall_seconds,
                };
                let new = metric_rows(&o.test, &base);
                println!("seed {seed}: test {:.6} after {} epochs ({:.1}s)", new[0].value, o.trained.epochs_run, o.trained.wall_seconds);
                rows.extend(new);
            }
            Err(RunError::Aborted(a)) => {
                let checkpoint = Checkpoint {
                    model: a.last_good.clone(),
                    solver: spec.train.solver.clone(),
                    seed: *seed,
                    normalization: norm,
                    task: Some(task.task.name().to_string()),
                    epochs_run: a.history.len(),
                };
                checkpoint.save(&args.out.join(format!("checkpoint_seed{seed}.aborted.json")))?;
                write_history_csv(&args.out.join(format!("history_seed{seed}.csv")), &a.history)?;
                eprintln!("seed {seed}: {a}");
                failure.get_or_insert(Fail::Numeric(anyhow!("seed {seed}: {a}")));
            }
            Err(RunError::Setup(e)) => {
                eprintln!("seed {seed}: {e}");
                failure.get_or_insert(Fail::from(e));
            }
        }
    }
    write_metrics_csv(&args.out.join("metrics.csv"), &rows)?;
    failure.map_or(Ok(()), Err)
}

fn cmd_eval(checkpoint: &Path, data: &Path, role: Role, out: &Path) -> Result<(), Fail> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let bundle = read_bundle(data)?;
    print_config(
        "eval",
        &serde_json::json!({ "checkpoint": checkpoint, "data": data, "role": role, "solver": ck.solver, "variant": ck.model.config.variant }),
    )?;
    let series = bundle.role(role);
    let eval = evaluate(&ck, series)?;
    create_dir(out)?;
    let task = bundle_task(&bundle)?.map_or_else(|| ck.task.clone().unwrap_or_default(), |t| t.name().to_string());
    let base = MetricRow {
        seed: ck.seed,
        variant: ck.model.config.variant.name().to_string(),
        task,
        graph_kind: graph_name(&series[0].meta.graph).to_string(),
        split: String::new(),
        value: 0.0,
        epochs_run: ck.epochs_run,
        wall_seconds: 0.0,
    };
    let rows = metric_rows(&eval, &base);
    for r in &rows {
        println!("{} {:.6}", r.split, r.value);
    }
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    write_snapshots(&out.join(format!("snapshots_seed{}.csv", ck.seed)), &eval)?;
    Ok(())
}

fn cmd_check(names: &[String], seed: u64) -> Result<(), Fail> {
    let names: Vec<&str> = if names.is_empty() || names.iter().any(|n| n == "all") {
        CHECK_NAMES.to_vec()
    } else {
        names.iter().map(String::as_str).collect()
    };
    if let Some(bad) = names.iter().find(|n| !CHECK_NAMES.contains(n)) {
        return Err(Fail::Usage(anyhow!("unknown check '{bad}'; expected one of {} or all", CHECK_NAMES.join(", "))));
    }
    print_config("check", &serde_json::json!({ "checks": names, "seed": seed }))?;
    let mut failed = false;
    for name in names {
        let report = run_check(name, seed)?;
        print!("{report}");
        if !report.passed() {
            failed = true;
            let bad: Vec<_> = report.findings.iter().filter(|f| !f.passed).collect();
            println!("failing case: {}", serde_json::to_string(&bad).unwrap_or_default());
        }
    }
    if failed {
        Err(Fail::Check)
    } else {
        Ok(())
    }
}

fn cmd_ablate(checkpoint: &Path, out: &Path) -> Result<(), Fail> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    print_config("ablate", &serde_json::json!({ "checkpoint": checkpoint, "out": out }))?;
    let rows = ablate_fusion(&ck.model)?;
    write_ablation_csv(out, &rows)?;
    for block in rows.chunks(15) {
        let top = block.iter().max_by(|a, b| a.weight.abs().total_cmp(&b.weight.abs())).expect("15 rows");
        println!("layer {} channel {}: largest |w| = {:.4} ({} {})", block[0].layer, block[0].channel, top.weight, top.operation, top.placement);
    }
    println!("identity dominates: {}", identity_dominates(&rows));
    Ok(())
}

fn cmd_bench(sizes: &[usize], variants: &[Variant], setup: ScalingSetup, seed: u64, out: &Path) -> Result<(), Fail> {
    print_config(
        "bench",
        &serde_json::json!({
            "sizes": sizes, "variants": variants, "epochs": setup.epochs,
            "times": setup.num_times, "substeps": setup.substeps, "seed": seed, "parallel": par::enabled(),
        }),
    )?;
    if sizes.is_empty() || variants.is_empty() {
        return Err(Fail::Usage(anyhow!("need at least one size and one variant")));
    }
    let rows = scaling(variants, sizes, &setup, seed)?;
    for r in &rows {
        println!("{:<10} n={:<4} {:.4}s/epoch  x{:.2}  fusion params {}", r.variant, r.n, r.seconds_per_epoch, r.ratio, r.fusion_params);
    }
    write_scaling_csv(out, &rows)?;
    Ok(())
}

fn dispatch(command: Command) -> Result<(), Fail> {
    match command {
        Command::Gen {
            settings,
            seeds,
            seed,
            out,
            config,
        } => cmd_gen(settings, config.as_deref(), seeds, seed, &out),
        Command::Train {
            settings,
            seeds,
            seed,
            data,
            out,
            config,
        } => cmd_train(
            settings,
            config.as_deref(),
            TrainArgs {
                seeds,
                seed,
                data: data.as_deref(),
                out: &out,
            },
        ),
        Command::Eval { checkpoint, data, role, out } => cmd_eval(&checkpoint, &data, role.into(), &out),
        Command::Check { names, seed } => cmd_check(&names, seed),
        Command::Ablate { checkpoint, out } => cmd_ablate(&checkpoint, &out),
        Command::Bench {
            sizes,
            variants,
            epochs,
            times,
            seed,
            out,
        } => cmd_bench(
            &sizes,
            &variants,
            ScalingSetup {
                num_times: times,
                substeps: 1,
                epochs,
            },
            seed,
            &out,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(fail) => {
            match &fail {
                Fail::Check => eprintln!("error: one or more checks failed"),
                Fail::Usage(e) | Fail::Numeric(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(fail.code())
        }
    }
}
