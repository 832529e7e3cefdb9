use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mixsep_core::config::RunConfig;
use mixsep_core::evalsuite::{
    eval_disentangle, eval_grounding, eval_retrieval, eval_simultaneous, head_heatmaps, HeadMode, MetricsReport,
};
use mixsep_core::model::{load_checkpoint, Model, PARAMS_FILE};
use mixsep_core::simvol::write_pgm;
use mixsep_core::synthworld::{make_datasets, Dataset, Split, WorldConfig};
use mixsep_core::trainer::{loss_grad_check, Trainer, CHECKPOINT_DIR, FINAL_CHECKPOINT, GRAD_CHECK_TOLERANCE};
use mixsep_core::Error;

/// Dual-head audio-visual alignment on a synthetic world.
#[derive(Parser, Debug)]
#[command(name = "mixsep", version)]
struct Cli {
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and save the sound, speech and extended splits.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up and train a model, writing a log and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.warmup_steps.
        #[arg(long)]
        warmup_steps: Option<u64>,
        /// Overrides train.total_steps (main-phase steps).
        #[arg(long)]
        total_steps: Option<u64>,
        /// Overrides train.batch_size.
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Run one evaluation protocol and print its report as JSON.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint directory, or a run directory holding checkpoints/final.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long, value_enum, default_value = "total-max")]
        head: HeadArg,
        /// Add an off-screen distractor of the opposite kind to the audio.
        #[arg(long)]
        mixed: bool,
        /// Report file; defaults to eval-<task>-<split>-<head>[-mixed].json
        /// next to the checkpoint.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write one PGM heatmap per head for one sample.
    Inspect {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint directory, or a run directory holding checkpoints/final.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Output directory for the heatmaps.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference loss gradients on a two-sample batch.
    GradCheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Check this checkpoint instead of a freshly initialised model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the default configuration.
    PrintDefaultConfig,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory written by gen-data; generated in memory from the
    /// configuration when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Sound,
    Speech,
    Extended,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Sound => Split::Sound,
            SplitArg::Speech => Split::Speech,
            SplitArg::Extended => Split::Extended,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Grounding,
    Simul,
    Retrieval,
    Disentangle,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    TotalMax,
    TotalSum,
    Sound,
    Speech,
}

impl From<HeadArg> for HeadMode {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::TotalMax => HeadMode::TotalMax,
            HeadArg::TotalSum => HeadMode::TotalSum,
            HeadArg::Sound => HeadMode::Sound,
            HeadArg::Speech => HeadMode::Speech,
        }
    }
}

/// Failure with its exit code: 1 check or runtime failure, 2 configuration,
/// 3 I/O.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            ref e if e.is_io() => 3,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_error(message: String) -> Failure {
    Failure { code: 2, message }
}

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Config file, then `MIXSEP_SEED`, then flags.
fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn load_data(args: &DataArgs, world: &WorldConfig) -> CliResult<Dataset> {
    Ok(match &args.data {
        Some(dir) => Dataset::load(dir)?,
        None => Dataset::generate(world)?,
    })
}

fn load_model(path: &Path) -> CliResult<Model> {
    let nested = path.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT);
    let dir = if !path.join(PARAMS_FILE).exists() && nested.join(PARAMS_FILE).exists() {
        nested
    } else {
        path.to_path_buf()
    };
    Ok(load_checkpoint(&dir)?.model)
}

fn print_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    println!("{text}");
    text
}

#[derive(Serialize)]
struct SplitSummary {
    split: &'static str,
    samples: usize,
}

fn gen_data(config: &ConfigArgs, out: &Path) -> CliResult<()> {
    let cfg = load_config(config)?;
    let ds = make_datasets(&cfg.world, out)?;
    let summary: Vec<SplitSummary> = Split::ALL
        .iter()
        .map(|&s| SplitSummary {
            split: s.name(),
            samples: ds.len(s),
        })
        .collect();
    print_json(&summary);
    Ok(())
}

fn train(
    config: &ConfigArgs,
    data: &DataArgs,
    out: &Path,
    warmup_steps: Option<u64>,
    total_steps: Option<u64>,
    batch_size: Option<usize>,
) -> CliResult<()> {
    let mut cfg = load_config(config)?;
    if let Some(n) = warmup_steps {
        cfg.train.warmup_steps = n;
    }
    if let Some(n) = total_steps {
        cfg.train.total_steps = n;
    }
    if let Some(n) = batch_size {
        cfg.train.batch_size = n;
    }
    cfg.validate()?;
    let ds = load_data(data, &cfg.world)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, cfg.to_json()).map_err(|e| io_error(&cfg_path, e))?;
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(&ds, model, cfg.train.clone(), cfg.loss.clone())?.with_output(out)?;
    trainer.run()?;
    if let Some(last) = trainer.records().last() {
        log::info!("finished at step {} with loss {:.4}", last.step, last.loss.total);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    config: &ConfigArgs,
    data: &DataArgs,
    checkpoint: &Path,
    split: Split,
    task: Task,
    head: HeadMode,
    mixed: bool,
    report: Option<PathBuf>,
) -> CliResult<()> {
    let cfg = load_config(config)?;
    let model = load_model(checkpoint)?;
    let ds = load_data(data, &cfg.world)?;
    let text = match task {
        Task::Grounding => print_json(&eval_grounding(&model, &ds, split, head, mixed, &cfg.eval)?),
        Task::Retrieval => print_json(&eval_retrieval(&model, &ds, split, head, mixed, &cfg.eval)?),
        Task::Disentangle => print_json(&eval_disentangle(&model, &ds, &cfg.eval)?),
        Task::Simul => {
            if split != Split::Extended {
                return Err(config_error("task simul requires --split extended".into()));
            }
            let reports: [MetricsReport; 2] = eval_simultaneous(&model, &ds)?;
            print_json(&reports)
        }
    };
    let path = report.unwrap_or_else(|| {
        let task = format!("{task:?}").to_lowercase();
        let suffix = if mixed { "-mixed" } else { "" };
        let dir = if checkpoint.is_dir() { checkpoint } else { Path::new(".") };
        dir.join(format!("eval-{task}-{}-{}{suffix}.json", split.name(), head.name()))
    });
    fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))
}

fn inspect(config: &ConfigArgs, data: &DataArgs, checkpoint: &Path, split: Split, index: usize, out: &Path) -> CliResult<()> {
    let cfg = load_config(config)?;
    let model = load_model(checkpoint)?;
    let ds = load_data(data, &cfg.world)?;
    let maps = head_heatmaps(&model, &ds, split, index)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let names = ["sound", "speech"];
    for (k, map) in maps.iter().enumerate() {
        let path = out.join(format!("{}-{index}-head{k}-{}.pgm", split.name(), names.get(k).unwrap_or(&"head")));
        write_pgm(&path, map)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn grad_check(config: &ConfigArgs, checkpoint: Option<&Path>) -> CliResult<bool> {
    let cfg = load_config(config)?;
    let model = match checkpoint {
        Some(p) => load_model(p)?,
        None => Model::new(cfg.model.clone(), cfg.train.seed)?,
    };
    // two samples per split are all the check draws from
    let world = WorldConfig {
        sound_pairs: 2,
        speech_pairs: 2,
        extended_triplets: 2,
        ..cfg.world.clone()
    };
    let ds = Dataset::generate(&world)?;
    let checks = loss_grad_check(&model, &ds, &cfg.loss, cfg.train.seed)?;
    print_json(&checks);
    let ok = checks.iter().all(|c| c.passed());
    if !ok {
        eprintln!("gradient check failed: relative error at or above {GRAD_CHECK_TOLERANCE}");
    }
    Ok(ok)
}

fn run(cli: Cli) -> CliResult<bool> {
    if cli.threads == 0 {
        return Err(config_error("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure {
            code: 1,
            message: e.to_string(),
        })?;
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out)?,
        Command::Train {
            config,
            data,
            out,
            warmup_steps,
            total_steps,
            batch_size,
        } => train(&config, &data, &out, warmup_steps, total_steps, batch_size)?,
        Command::Eval {
            config,
            data,
            checkpoint,
            split,
            task,
            head,
            mixed,
            report,
        } => eval(&config, &data, &checkpoint, split.into(), task, head.into(), mixed, report)?,
        Command::Inspect {
            config,
            data,
            checkpoint,
            split,
            index,
            out,
        } => inspect(&config, &data, &checkpoint, split.into(), index, &out)?,
        Command::GradCheck { config, checkpoint } => return grad_check(&config, checkpoint.as_deref()),
        Command::PrintDefaultConfig => println!("{}", RunConfig::default().to_json()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
