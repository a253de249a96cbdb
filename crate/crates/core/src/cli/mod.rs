//! Command-line driver: dataset generation, training, optimization, evaluation and sweeps.
//!
//! Every command writes a `provenance.json` block next to its outputs with the
//! flags, seed and version that produced them.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design_space::DesignFile;
use crate::error::{Error, Result};
use crate::learned_sim::{
    read_weights, train, write_loss_csv, write_weights, Ensemble, ModelHyper, TrainConfig,
};
use crate::optimizers::{
    evaluate_model, evaluate_oracle, optimize_task, CemConfig, GdConfig, OptimizerKind,
    SimulatorKind, TaskRun,
};
use crate::oracle_sim::{generate_dataset, load_dataset, DatasetConfig};
use crate::rewards::RewardReport;
use crate::tasks::{generate_task_with, TaskOverrides, TaskSpec};

pub const THREADS_ENV: &str = "INVDES_THREADS";
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Version string recorded in provenance blocks.
pub fn version() -> String {
    match option_env!("INVDES_GIT_DESCRIBE") {
        Some(d) => format!("invdes {} ({d})", env!("CARGO_PKG_VERSION")),
        None => format!("invdes {}", env!("CARGO_PKG_VERSION")),
    }
}

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "invdes",
    version,
    about = "Inverse design with learned particle simulators"
)]
pub struct Cli {
    /// Worker threads (default: logical cores). INVDES_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate ground-truth training trajectories.
    GenData(GenDataArgs),
    /// Train a learned simulator (or an ensemble on disjoint splits).
    Train(TrainArgs),
    /// Optimize a task design.
    Optimize(OptimizeArgs),
    /// Score a design with the learned and ground-truth simulators.
    Evaluate(EvaluateArgs),
    /// Run an ablation grid and aggregate normalized ground-truth rewards.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub trajectories: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Weights file; with several splits, `.k` is inserted before the extension.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,
    /// Number of disjoint dataset splits, one model each.
    #[arg(long, default_value_t = 1)]
    pub splits: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    Gd,
    Cem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulatorArg {
    Model,
    Oracle,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Gd => OptimizerKind::Gd,
            OptimizerArg::Cem => OptimizerKind::Cem,
        }
    }
}

impl From<SimulatorArg> for SimulatorKind {
    fn from(s: SimulatorArg) -> Self {
        match s {
            SimulatorArg::Model => SimulatorKind::Model,
            SimulatorArg::Oracle => SimulatorKind::Oracle,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Gd)]
    pub optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = SimulatorArg::Model)]
    pub simulator: SimulatorArg,
    /// Comma-separated weight files; several files form an ensemble.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<PathBuf>,
    /// JSON file with `task` overrides and `gd` / `cem` settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Optimizer iterations; overrides the task default and the config.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Ground-truth evaluation period during the run (0: never).
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Write zeros in the wall-clock column so reruns are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub design: PathBuf,
    #[arg(long)]
    pub task: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<PathBuf>,
    /// JSON file with `task` overrides, as for `optimize`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report JSON; a CSV with the same stem is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// rollout-length, num-joints, num-tools or cem-population.
    #[arg(long)]
    pub ablation: String,
    /// Comma-separated grid values.
    #[arg(long)]
    pub grid: String,
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Gd)]
    pub optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = SimulatorArg::Model)]
    pub simulator: SimulatorArg,
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub bootstrap_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_timing: bool,
}

/// Optional settings file for `optimize` and `evaluate`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub task: TaskOverrides,
    pub gd: Option<GdConfig>,
    pub cem: Option<CemConfig>,
}

impl OptimizeConfig {
    pub fn read(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))
            }
        }
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    flags: &'a Cli,
    seed: Option<u64>,
    threads: usize,
    version: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Resolved worker count: `INVDES_THREADS`, then `--threads`, then logical cores.
pub fn thread_count(flag: Option<usize>) -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        };
    }
    match flag {
        Some(0) => Err(Error::config("--threads must be positive")),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::config(e.render().to_string().trim_end().to_string())),
    };
    run(&cli)
}

pub fn run(cli: &Cli) -> Result<()> {
    let threads = thread_count(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::GenData(a) => gen_data(cli, a, threads),
        Command::Train(a) => train_cmd(cli, a, threads),
        Command::Optimize(a) => optimize_cmd(cli, a, threads),
        Command::Evaluate(a) => evaluate_cmd(cli, a, threads),
        Command::Sweep(a) => sweep_cmd(cli, a, threads),
    })
}

fn provenance<'a>(
    cli: &'a Cli,
    command: &'a str,
    seed: Option<u64>,
    threads: usize,
) -> Provenance<'a> {
    Provenance {
        command,
        flags: cli,
        seed,
        threads,
        version: version(),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs, threads: usize) -> Result<()> {
    let cfg = DatasetConfig {
        trajectories: a.trajectories,
        steps: a.steps,
        ..DatasetConfig::default()
    };
    cfg.validate()?;
    let manifest = generate_dataset(a.seed, &cfg, &a.out)?;
    write_json(
        &a.out.join("provenance.json"),
        &provenance(cli, "gen-data", Some(a.seed), threads),
    )?;
    println!(
        "wrote {} trajectories to {}",
        manifest.count,
        a.out.display()
    );
    Ok(())
}

/// Output path of split `k` out of `n`: `model.idw` becomes `model.2.idw`.
pub fn split_path(out: &Path, k: usize, n: usize) -> PathBuf {
    if n == 1 {
        return out.to_path_buf();
    }
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{k}"),
    };
    out.with_file_name(name)
}

/// Contiguous, disjoint index ranges covering `0..len` in `n` nearly equal blocks.
pub fn split_ranges(len: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n).map(|k| k * len / n..(k + 1) * len / n).collect()
}

fn train_cmd(cli: &Cli, a: &TrainArgs, threads: usize) -> Result<()> {
    if a.splits == 0 {
        return Err(Error::config("--splits must be positive"));
    }
    let (_, trajs) = load_dataset(&a.data)?;
    if trajs.len() < a.splits {
        return Err(Error::config(format!(
            "{} trajectories cannot form {} splits",
            trajs.len(),
            a.splits
        )));
    }
    let hyper = ModelHyper {
        width: a.width,
        blocks: a.blocks,
        ..ModelHyper::default()
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let ranges = split_ranges(trajs.len(), a.splits);
    ranges
        .into_par_iter()
        .enumerate()
        .map(|(k, range)| {
            let cfg = TrainConfig {
                steps: a.steps,
                learning_rate: a.learning_rate,
                seed: a.seed + k as u64,
                ..TrainConfig::default()
            };
            let out = train(&trajs[range], hyper.clone(), &cfg)?;
            let path = split_path(&a.out, k, a.splits);
            write_weights(&path, &out.params)?;
            write_loss_csv(&path.with_extension("loss.csv"), &out.losses)?;
            println!("wrote {}", path.display());
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    write_json(
        &a.out.with_extension("provenance.json"),
        &provenance(cli, "train", Some(a.seed), threads),
    )
}

fn load_ensemble(paths: &[PathBuf]) -> Result<Option<Ensemble>> {
    if paths.is_empty() {
        return Ok(None);
    }
    let members = paths
        .iter()
        .map(|p| read_weights(p))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members).map(Some)
}

#[derive(Serialize)]
struct OptimizeSummary {
    task: String,
    seed: u64,
    optimizer: OptimizerKind,
    simulator: SimulatorKind,
    iterations: usize,
    evals: usize,
    best_objective: Option<f64>,
    initial_oracle: f64,
    best_oracle: f64,
    best_oracle_normalized: f64,
}

fn optimize_cmd(cli: &Cli, a: &OptimizeArgs, threads: usize) -> Result<()> {
    let config = OptimizeConfig::read(a.config.as_deref())?;
    let task = generate_task_with(&a.task, a.seed, &config.task)?;
    let mut run = TaskRun::from_task(&task, a.optimizer.into(), a.simulator.into(), a.seed);
    if let Some(gd) = config.gd {
        run.gd = gd;
    }
    if let Some(cem) = config.cem {
        run.cem = cem;
    }
    if let Some(s) = a.steps {
        run = run.with_steps(s);
    }
    run.gd.eval_every = a.eval_every;
    run.cem.eval_every = a.eval_every;
    run.cem.seed = a.seed;
    run.validate()?;
    let ensemble = load_ensemble(&a.weights)?;
    if run.simulator == SimulatorKind::Model && ensemble.is_none() {
        return Err(Error::config("--simulator model needs --weights"));
    }

    create_dir(&a.out)?;
    write_json(
        &a.out.join("provenance.json"),
        &provenance(cli, "optimize", Some(a.seed), threads),
    )?;
    task.write(&a.out.join("task.json"))?;
    let outcome = optimize_task(&task, &run, ensemble.as_ref())?;
    let record = &outcome.record;
    record.write_csv(&a.out.join("record.csv"), !a.no_timing)?;
    DesignFile::new(&task.design, record.best_phi.clone())?.write(&a.out.join("design.json"))?;
    if let Some(e) = outcome.error {
        return Err(e);
    }
    let initial = evaluate_oracle(&task, &task.design.initial_phi(), 0.0)?.raw;
    let best = evaluate_oracle(&task, &record.best_phi, initial)?;
    let summary = OptimizeSummary {
        task: task.name.clone(),
        seed: a.seed,
        optimizer: run.optimizer,
        simulator: run.simulator,
        iterations: record.iterations.len(),
        evals: record.total_evals(),
        best_objective: record.best_value,
        initial_oracle: initial,
        best_oracle: best.raw,
        best_oracle_normalized: best.normalized,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!(
        "{} {:?}/{:?}: normalized ground-truth reward {:.6}",
        task.name, run.optimizer, run.simulator, best.normalized
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: String,
    pub seed: u64,
    pub model: Option<RewardReport>,
    pub oracle: RewardReport,
}

/// Scores `phi` with both simulators, normalized against the task's initial design.
pub fn evaluate_design(
    task: &TaskSpec,
    phi: &[f64],
    ensemble: Option<&Ensemble>,
) -> Result<EvaluationReport> {
    let start = task.design.initial_phi();
    let oracle_base = evaluate_oracle(task, &start, 0.0)?.raw;
    let oracle = evaluate_oracle(task, phi, oracle_base)?;
    let model = match ensemble {
        Some(e) => {
            let base = evaluate_model(task, e, &start, 0.0)?.raw;
            Some(evaluate_model(task, e, phi, base)?)
        }
        None => None,
    };
    Ok(EvaluationReport {
        task: task.name.clone(),
        seed: task.seed,
        model,
        oracle,
    })
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs, threads: usize) -> Result<()> {
    let config = OptimizeConfig::read(a.config.as_deref())?;
    let task = generate_task_with(&a.task, a.seed, &config.task)?;
    let design = DesignFile::read(&a.design)?;
    let space = design.space()?;
    if space != task.design {
        return Err(Error::config(format!(
            "design of kind {} does not match the design space of task {}",
            space.kind.name(),
            task.name
        )));
    }
    let ensemble = load_ensemble(&a.weights)?;
    let report = evaluate_design(&task, &design.phi, ensemble.as_ref())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&a.out, &report)?;
    let mut csv = String::from("simulator,raw,normalized,main,spread,regularizer,empty\n");
    let row = |name: &str, r: &RewardReport| {
        format!(
            "{name},{},{},{},{},{},{}\n",
            r.raw, r.normalized, r.main, r.spread, r.regularizer, r.empty
        )
    };
    if let Some(m) = &report.model {
        csv.push_str(&row("model", m));
    }
    csv.push_str(&row("oracle", &report.oracle));
    let csv_path = a.out.with_extension("csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    write_json(
        &a.out.with_extension("provenance.json"),
        &provenance(cli, "evaluate", Some(a.seed), threads),
    )?;
    println!(
        "{}: normalized ground-truth reward {:.6}",
        task.name, report.oracle.normalized
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    RolloutLength,
    NumJoints,
    NumTools,
    CemPopulation,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "rollout-length" => Ok(Ablation::RolloutLength),
            "num-joints" => Ok(Ablation::NumJoints),
            "num-tools" => Ok(Ablation::NumTools),
            "cem-population" => Ok(Ablation::CemPopulation),
            _ => Err(Error::config(format!(
                "unknown ablation `{name}` (expected rollout-length, num-joints, num-tools or cem-population)"
            ))),
        }
    }

    /// Task name and overrides for one grid value.
    pub fn task(self, value: usize) -> (String, TaskOverrides) {
        let mut ov = TaskOverrides::default();
        let name = match self {
            Ablation::RolloutLength => {
                ov.rollout_steps = Some(value);
                "contain".to_string()
            }
            Ablation::NumJoints => {
                ov.joints = Some(value);
                "contain".to_string()
            }
            Ablation::NumTools => format!("maze-{value}"),
            Ablation::CemPopulation => "contain".to_string(),
        };
        (name, ov)
    }
}

/// Mean and percentile bootstrap 95% interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    (mean, at(0.025), at(0.975))
}

fn parse_grid(grid: &str) -> Result<Vec<usize>> {
    let values: Vec<usize> = grid
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad grid value `{s}`")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::config("empty grid"));
    }
    Ok(values)
}

fn sweep_cmd(cli: &Cli, a: &SweepArgs, threads: usize) -> Result<()> {
    let ablation = Ablation::parse(&a.ablation)?;
    let grid = parse_grid(&a.grid)?;
    if a.seeds == 0 {
        return Err(Error::config("--seeds must be positive"));
    }
    let optimizer: OptimizerKind = if ablation == Ablation::CemPopulation {
        OptimizerKind::Cem
    } else {
        a.optimizer.into()
    };
    let ensemble = load_ensemble(&a.weights)?;
    let runs_dir = a.out.join("runs");
    create_dir(&runs_dir)?;
    write_json(
        &a.out.join("provenance.json"),
        &provenance(cli, "sweep", None, threads),
    )?;

    let jobs: Vec<(usize, u64)> = grid
        .iter()
        .flat_map(|&v| (0..a.seeds).map(move |s| (v, s)))
        .collect();
    let results: Vec<f64> = jobs
        .par_iter()
        .map(|&(value, seed)| {
            let (name, ov) = ablation.task(value);
            let task = generate_task_with(&name, seed, &ov)?;
            let mut run =
                TaskRun::from_task(&task, optimizer, a.simulator.into(), seed).with_steps(a.steps);
            if ablation == Ablation::CemPopulation {
                run.cem.population = value;
            }
            let outcome = optimize_task(&task, &run, ensemble.as_ref())?;
            let stem = format!("{}_{value}_s{seed}", a.ablation);
            outcome
                .record
                .write_csv(&runs_dir.join(format!("{stem}.csv")), !a.no_timing)?;
            let record = outcome.into_result()?;
            let initial = evaluate_oracle(&task, &task.design.initial_phi(), 0.0)?.raw;
            Ok(evaluate_oracle(&task, &record.best_phi, initial)?.normalized)
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("ablation,value,runs,mean,ci_low,ci_high\n");
    for (i, &value) in grid.iter().enumerate() {
        let cell = &results[i * a.seeds as usize..(i + 1) * a.seeds as usize];
        let (mean, lo, hi) = bootstrap_ci(cell, BOOTSTRAP_RESAMPLES, a.bootstrap_seed);
        csv.push_str(&format!(
            "{},{value},{},{mean},{lo},{hi}\n",
            a.ablation,
            cell.len()
        ));
    }
    let path = a.out.join("sweep.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}
