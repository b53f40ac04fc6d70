//! `lava`: meta-train, evaluate and run diagnostic experiments.
//!
//! Exit status: 0 on success, 2 for usage or configuration problems, 3 when a
//! computation fails numerically.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lava_core::checkpoint::{self, CheckpointError};
use lava_core::config::{ConfigError, RunConfig, RunManifest};
use lava_core::harness::{self, TimingCase};
use lava_core::model::{AdaptMode, MetaParams};
use lava_core::seed::SeedTree;
use lava_core::tasks::TaskSource;
use lava_core::training::{self, EpochLog, HyperConfig, Method, TrainError};
use lava_core::LinalgError;

const OUTPUT_ENV: &str = "LAVA_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "lava", version, about = "Meta-learning with per-point Laplace posterior fusion")]
struct Cli {
    /// Directory for every artifact of this run (overrides $LAVA_OUTPUT_DIR and run.output_dir).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Meta-train and write checkpoints and a per-epoch log.
    Train(CommonArgs),
    /// Evaluate a checkpoint on freshly sampled tasks.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation tasks per seed.
        #[arg(long)]
        tasks: Option<usize>,
        /// Comma-separated evaluation seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Run a diagnostic experiment.
    Experiment {
        name: Experiment,
        #[command(flatten)]
        common: CommonArgs,
        /// Parameters to probe; defaults to a fresh initialisation.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Support resamples for the variance experiment.
        #[arg(long)]
        resamples: Option<usize>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Experiment {
    Variance,
    Landscape,
    Condition,
    Noise,
    Timing,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    /// Task family, or `csv`.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    support: Option<usize>,
    #[arg(long)]
    query: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Any `section.key=value` override.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl CommonArgs {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let quoted = |s: &str| format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""));
        if let Some(m) = &self.mode {
            out.push(format!("training.mode={}", quoted(m)));
        }
        if let Some(t) = &self.task {
            out.push(format!("task.family={}", quoted(t)));
        }
        for (key, v) in [
            ("training.support", self.support.map(|v| v as u64)),
            ("training.query", self.query.map(|v| v as u64)),
            ("training.epochs", self.epochs.map(|v| v as u64)),
            ("run.seed", self.seed),
            ("run.workers", self.workers.map(|v| v as u64)),
        ] {
            if let Some(v) = v {
                out.push(format!("{key}={v}"));
            }
        }
        out.extend(self.set.iter().cloned());
        out
    }

    fn resolve(&self) -> Result<RunConfig, CliError> {
        let overrides = self.overrides();
        Ok(match &self.config {
            Some(path) => RunConfig::load(path, &overrides)?,
            None => RunConfig::with_overrides("", &overrides)?,
        })
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("i/o: {e}"))
    }
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<training::EvalError> for CliError {
    fn from(e: training::EvalError) -> Self {
        match e {
            training::EvalError::Task(t) => CliError::Usage(t.to_string()),
            training::EvalError::Numeric(n) => CliError::Numeric(n.to_string()),
        }
    }
}

/// Output directory and the manifest written into it.
struct Run {
    dir: PathBuf,
}

impl Run {
    fn start(flag: Option<&Path>, cfg: &RunConfig, command: &str) -> Result<Self, CliError> {
        let dir = flag
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .or_else(|| cfg.run.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(command));
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
        let args: Vec<String> = std::env::args().skip(1).collect();
        let manifest = RunManifest::new(command, args, &dir, cfg);
        fs::write(dir.join("manifest.toml"), manifest.to_toml())?;
        Ok(Self { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn csv(&self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        harness::write_csv(BufWriter::new(File::create(&path)?), header, rows)?;
        Ok(path)
    }
}

fn load_params(path: &Path, cfg: &HyperConfig, source: &TaskSource) -> Result<MetaParams, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let arch = cfg.architecture(source.input_dim(), source.output_dim());
    Ok(checkpoint::decode_expecting(&bytes, &arch, cfg.mode.adapt_mode())?)
}

fn params_or_init(path: Option<&Path>, cfg: &HyperConfig, source: &TaskSource) -> Result<MetaParams, CliError> {
    match path {
        Some(p) => load_params(p, cfg, source),
        None => training::init_params(cfg, source).map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn cmd_train(cli_dir: Option<&Path>, args: &CommonArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let source = cfg.task_source()?;
    let run = Run::start(cli_dir, &cfg, "train")?;
    let hyper = cfg.hyper();
    let init = training::init_params(&hyper, &source).map_err(|e| CliError::Usage(e.to_string()))?;
    checkpoint::save(&run.path("init.ckpt"), &init)?;
    if hyper.epochs == 0 {
        println!("wrote {}", run.dir.display());
        return Ok(());
    }

    let mut log = BufWriter::new(File::create(run.path("train_log.csv"))?);
    writeln!(log, "{}", EpochLog::HEADER)?;
    let mut io_error = None;
    let ckpt_path = run.path("checkpoint.ckpt");
    let outcome = training::meta_train_from(&hyper, &source, init, |row, params| {
        if let Err(e) = writeln!(log, "{}", row.csv_row()).and_then(|_| log.flush()) {
            io_error.get_or_insert(CliError::from(e));
        }
        if let Err(e) = checkpoint::save(&ckpt_path, params) {
            io_error.get_or_insert(CliError::from(e));
        }
        println!(
            "epoch {:>4}  query mse {:.6}  log var {:.3}  kappa {:.3}  {:.1}s",
            row.epoch, row.mean_query_mse, row.mean_log_var_adapted, row.mean_condition_number, row.wall_time_s
        );
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    match outcome {
        Ok(out) => {
            checkpoint::save(&run.path("final.ckpt"), &out.params)?;
            println!("wrote {}", run.dir.display());
            Ok(())
        }
        Err(TrainError::Numeric {
            epoch,
            iteration,
            source,
            last_good,
        }) => {
            let path = run.path("last_good.ckpt");
            checkpoint::save(&path, &last_good)?;
            Err(CliError::Numeric(format!(
                "epoch {epoch}, meta-iteration {iteration}: {source}; last good parameters saved to {}",
                path.display()
            )))
        }
        Err(TrainError::Probe(e)) => Err(CliError::Numeric(e.to_string())),
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

fn cmd_eval(
    cli_dir: Option<&Path>,
    args: &CommonArgs,
    ckpt: &Path,
    tasks: Option<usize>,
    seeds: Option<Vec<u64>>,
) -> Result<(), CliError> {
    let mut cfg = args.resolve()?;
    if let Some(t) = tasks {
        cfg.eval.tasks = t;
    }
    if let Some(s) = seeds {
        cfg.eval.seeds = s;
    }
    cfg.validate()?;
    let source = cfg.task_source()?;
    let run = Run::start(cli_dir, &cfg, "eval")?;
    let hyper = cfg.hyper();
    let params = load_params(ckpt, &hyper, &source)?;
    let summary = training::evaluate_seeds(&params, &source, cfg.eval.tasks, &cfg.eval.seeds, &hyper)?;
    let rows = summary
        .seeds
        .iter()
        .zip(&summary.per_seed)
        .map(|(s, e)| vec![s.to_string(), e.mean.to_string(), e.std.to_string()])
        .chain(std::iter::once(vec![
            "all".into(),
            summary.mean.to_string(),
            summary.std.to_string(),
        ]));
    run.csv("eval.csv", &["seed", "mean_query_mse", "std_query_mse"], rows)?;
    println!(
        "query mse {:.6} ± {:.6} over {} seeds × {} tasks",
        summary.mean,
        summary.std,
        summary.seeds.len(),
        cfg.eval.tasks
    );
    Ok(())
}

fn cmd_experiment(
    cli_dir: Option<&Path>,
    name: Experiment,
    args: &CommonArgs,
    ckpt: Option<&Path>,
    resamples: Option<usize>,
) -> Result<(), CliError> {
    let mut cfg = args.resolve()?;
    if let Some(r) = resamples {
        cfg.experiment.resamples = r;
    }
    cfg.validate()?;
    let source = cfg.task_source()?;
    let hyper = cfg.hyper();
    let label = format!("experiment-{}", name.to_possible_value().expect("named").get_name());
    let run = Run::start(cli_dir, &cfg, &label)?;
    let exp = &cfg.experiment;
    match name {
        Experiment::Variance => {
            let mut rows = Vec::new();
            let probe_cfg = HyperConfig {
                variance_resamples: exp.resamples,
                ..hyper.clone()
            };
            let mut rng = SeedTree::new(hyper.seed).child("probe").rng();
            let task = source
                .sample_task(hyper.support + hyper.query, &mut rng)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let probe = |p: &MetaParams| -> Result<f64, CliError> {
                let mut rng = SeedTree::new(hyper.seed).child("probe-supports").rng();
                Ok(harness::estimate_adaptation_variance(p, &task, exp.resamples, hyper.support, &hyper, &mut rng)?.log_variance)
            };
            let mode = hyper.mode.to_string();
            if let Some(path) = ckpt {
                let p = load_params(path, &hyper, &source)?;
                rows.push(vec!["0".into(), mode.clone(), probe(&p)?.to_string()]);
            } else {
                let init = training::init_params(&hyper, &source).map_err(|e| CliError::Usage(e.to_string()))?;
                rows.push(vec!["0".into(), mode.clone(), probe(&init)?.to_string()]);
                let out = training::meta_train_from(&probe_cfg, &source, init, |_, _| {}).map_err(train_error)?;
                for row in &out.log {
                    rows.push(vec![row.epoch.to_string(), mode.clone(), row.mean_log_var_adapted.to_string()]);
                }
            }
            let path = run.csv("variance.csv", &harness::VARIANCE_HEADER, rows)?;
            println!("wrote {}", path.display());
        }
        Experiment::Landscape => {
            let params = params_or_init(ckpt, &hyper, &source)?;
            if params.mode != AdaptMode::Context || params.arch.context_dim != 2 {
                return Err(CliError::Usage(format!(
                    "landscape needs a context model with context_dim = 2 (got {:?}, context_dim {})",
                    params.mode, params.arch.context_dim
                )));
            }
            let batch = source
                .batch(SeedTree::new(hyper.seed).child("landscape"), 0, hyper.support, hyper.query)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let l = harness::loss_landscape_grid(&params, &batch.support_x, &batch.support_y, &cfg.grid(), &hyper)?;
            run.csv("landscape.csv", &harness::LANDSCAPE_HEADER, l.cells.iter().map(|c| c.record()))?;
            run.csv("ellipses.csv", &harness::ELLIPSE_HEADER, l.ellipses.iter().map(|e| e.record()))?;
            let markers = std::iter::once(vec!["prior".into(), "".into(), l.prior[0].to_string(), l.prior[1].to_string()])
                .chain(
                    l.ellipses
                        .iter()
                        .map(|e| vec!["point".into(), e.point_idx.to_string(), e.mean_x.to_string(), e.mean_y.to_string()]),
                )
                .chain(std::iter::once(vec!["fused".into(), "".into(), l.fused[0].to_string(), l.fused[1].to_string()]));
            run.csv("markers.csv", &["kind", "point_idx", "x", "y"], markers)?;
            println!("wrote landscape for {} support points to {}", l.ellipses.len(), run.dir.display());
        }
        Experiment::Condition => {
            let params = params_or_init(ckpt, &hyper, &source)?;
            let rows = harness::condition_survey(&params, &source, cfg.eval.tasks, hyper.seed, &hyper)?;
            let raw: Vec<f64> = rows.iter().map(|r| r.raw).collect();
            let reg: Vec<f64> = rows.iter().map(|r| r.regularized).collect();
            run.csv("condition.csv", &harness::CONDITION_HEADER, rows.iter().map(|r| r.record()))?;
            println!(
                "support {}: kappa(raw) mean {:.4e}, kappa(regularized) mean {:.4}",
                hyper.support,
                training::mean_std(&raw).0,
                training::mean_std(&reg).0
            );
        }
        Experiment::Noise => {
            let params = params_or_init(ckpt, &hyper, &source)?;
            let rows =
                harness::noise_robustness(&params, &source, &exp.sigmas, &exp.supports, cfg.eval.tasks, hyper.seed, &hyper)?;
            let path = run.csv("noise.csv", &harness::NOISE_HEADER, rows.iter().map(|r| r.record()))?;
            println!("wrote {}", path.display());
        }
        Experiment::Timing => {
            let (lava, baseline) = match hyper.mode.adapt_mode() {
                AdaptMode::LastLayer => (Method::LavaLastLayer, Method::AnilBaseline),
                AdaptMode::Context => (Method::LavaContext, Method::CaviaBaseline),
            };
            let mut cases = vec![TimingCase {
                mode: lava,
                steps: 1,
                support: hyper.support,
            }];
            cases.extend(exp.timing_steps.iter().map(|&steps| TimingCase {
                mode: baseline,
                steps,
                support: hyper.support,
            }));
            let rows = harness::timing_benchmark(&cases, &source, &hyper, exp.timing_warmup, exp.timing_iterations, cfg.eval.tasks)
                .map_err(train_error)?;
            for r in &rows {
                println!("{:<16} steps {}  {:.3} ms/iter  mse {:.5}", r.mode, r.steps, r.s_per_iter * 1e3, r.mse);
            }
            run.csv("timing.csv", &harness::TIMING_HEADER, rows.iter().map(|r| r.record()))?;
        }
    }
    Ok(())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Numeric { .. } | TrainError::Probe(_) => CliError::Numeric(e.to_string()),
        other => CliError::Usage(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let dir = cli.output_dir.as_deref();
    let result = match &cli.command {
        Command::Train(args) => cmd_train(dir, args),
        Command::Eval {
            common,
            checkpoint,
            tasks,
            seeds,
        } => cmd_eval(dir, common, checkpoint, *tasks, seeds.clone()),
        Command::Experiment {
            name,
            common,
            checkpoint,
            resamples,
        } => cmd_experiment(dir, *name, common, checkpoint.as_deref(), *resamples),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                CliError::Usage(m) => m.clone(),
                CliError::Numeric(m) => format!("numeric failure: {m}"),
            };
            eprintln!("error: {msg}");
            ExitCode::from(e.code())
        }
    }
}
