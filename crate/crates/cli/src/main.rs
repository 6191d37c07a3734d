use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lifeseq::error::{Error, Result};
use lifeseq::finetune::Task;
use lifeseq::persistence::RunConfig;
use lifeseq::pipeline::{self, finetuned_file, PRETRAINED_FILE};

/// Synthetic life-event sequences: data generation, pretraining, finetuning,
/// evaluation and analysis.
#[derive(Parser, Debug)]
#[command(name = "lifeseq", version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the `seed` of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "LIFESEQ_OUT", default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Inputs {
    /// Directory written by gen-data; defaults to the output directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to load; each command has a default inside the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Mortality,
    Personality,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Mortality => Task::Mortality,
            TaskArg::Personality => Task::Personality,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort, its split, vocabulary and encoded sequences.
    GenData,
    /// Pretrain a model with masked-token and order prediction.
    Pretrain {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Finetune a pretrained checkpoint on a downstream task.
    Finetune {
        #[arg(long, value_enum, default_value = "mortality")]
        task: TaskArg,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Score the test split and write an evaluation report.
    Evaluate {
        #[arg(long, value_enum, default_value = "mortality")]
        task: TaskArg,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Token saliency and concept sensitivity of a finetuned mortality model.
    Interpret {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Compare the concept spaces of one or more checkpoints.
    AnalyzeSpace {
        /// Directory written by gen-data; defaults to the output directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoints to compare (repeatable); defaults to the pretrained one.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Write the concept embedding table as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        inputs: Inputs,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    let data = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| out.to_path_buf());
    let ckpt = |inputs: &Inputs, default: &str| inputs.checkpoint.clone().unwrap_or_else(|| out.join(default));
    match &cli.command {
        Command::GenData => {
            pipeline::gen_data(&cfg, out)?;
            println!("wrote cohort of {} persons to {}", cfg.generator.population_size, out.display());
        }
        Command::Pretrain { inputs } => {
            pipeline::run_pretrain(&cfg, &data(&inputs.data), out)?;
            println!("wrote {}", out.join(PRETRAINED_FILE).display());
        }
        Command::Finetune { task, inputs } => {
            let task = Task::from(*task);
            pipeline::run_finetune(&cfg, task, &data(&inputs.data), &ckpt(inputs, PRETRAINED_FILE), out)?;
            println!("wrote {}", out.join(finetuned_file(task)).display());
        }
        Command::Evaluate { task, inputs } => {
            let task = Task::from(*task);
            let reports = pipeline::run_evaluate(&cfg, task, &data(&inputs.data), &ckpt(inputs, &finetuned_file(task)), out)?;
            for r in &reports {
                for m in &r.metrics {
                    println!("{} {}: {:.4} [{:.4}, {:.4}]", r.model, m.metric, m.point, m.ci_low, m.ci_high);
                }
            }
        }
        Command::Interpret { inputs } => {
            let results =
                pipeline::run_interpret(&cfg, &data(&inputs.data), &ckpt(inputs, &finetuned_file(Task::Mortality)), out)?;
            for t in &results {
                println!("{}: sensitivity {:.4} p {:.4}", t.concept, t.result.sensitivity, t.result.p_value);
            }
        }
        Command::AnalyzeSpace { data: d, checkpoints } => {
            let checkpoints = if checkpoints.is_empty() { vec![out.join(PRETRAINED_FILE)] } else { checkpoints.clone() };
            let report = pipeline::run_analyze_space(&cfg, &data(d), &checkpoints, out)?;
            for t in &report.tests {
                println!("{} vs {}: r {:.4} p {:.4} rejected {}", t.first, t.second, t.statistic, t.p_value, t.rejected);
            }
        }
        Command::ExportEmbeddings { inputs } => {
            pipeline::export_embeddings(&cfg, &data(&inputs.data), &ckpt(inputs, PRETRAINED_FILE), out)?;
            println!("wrote {}", out.join(pipeline::EMBEDDINGS_FILE).display());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_validation() || is_missing_input(err) {
        1
    } else {
        2
    }
}

/// A missing input file is a usage problem rather than a runtime failure.
fn is_missing_input(err: &Error) -> bool {
    matches!(err, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
