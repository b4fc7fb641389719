use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpmn::ablation::{ablate, ablation_csv, ablation_markdown, sweep, sweep_csv, TABLE_VARIANTS};
use dpmn::checkpoint::Checkpoint;
use dpmn::config::TrainConfig;
use dpmn::data::{parse_tsv, Example, SyntheticCorpus, Task};
use dpmn::error::{DpmnError, Result};
use dpmn::gradcheck;
use dpmn::prompt::{sweep_configs, InitKind, PromptForm};
use dpmn::trainer::{evaluate, Trainer};

#[derive(Parser)]
#[command(name = "dpmn", about = "Deep prompt multi-task network for abusive-language detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the checkpoint and run logs.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-task macro F1 and confusion matrices of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the six component-ablation variants.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training TSV; a synthetic corpus is generated when omitted.
        #[arg(long, requires = "dev")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        dev: Option<PathBuf>,
        /// Directory for ablation.csv and ablation.md.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run variants one after another instead of in parallel.
        #[arg(long)]
        serial: bool,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train once per prompt length, form and initialisation.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "deep,light")]
        forms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "random,token")]
        inits: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, requires = "dev")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        dev: Option<PathBuf>,
        /// Where to write sweep.csv; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        serial: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, train, dev, out } => {
            let config = load_config(config.as_deref())?;
            let (train_set, dev_set) = (parse_tsv(&train)?, parse_tsv(&dev)?);
            let outcome = Trainer::new(config)
                .on_epoch(|r| {
                    eprintln!(
                        "epoch {:>3}  loss {:.4}  dev F1 a={:.4} b={:.4} c={:.4}{}",
                        r.epoch,
                        r.train_total,
                        r.dev_f1[0],
                        r.dev_f1[1],
                        r.dev_f1[2],
                        if r.best { "  *" } else { "" }
                    )
                })
                .run(&train_set, &dev_set)?;
            create_dir(&out)?;
            outcome.checkpoint.save(out.join("model.dpmn"))?;
            write(&out.join("run_log.csv"), &outcome.log.epochs_csv())?;
            write(&out.join("steps.csv"), &outcome.log.steps_csv())?;
            write(&out.join("config.txt"), &outcome.checkpoint.config.to_text())?;
            let best = outcome.log.best_epoch().expect("at least one epoch");
            println!(
                "best epoch {} dev macro F1 (A) {:.4}; wrote {}",
                best.epoch,
                best.dev_f1[0],
                out.display()
            );
        }
        Command::Eval { checkpoint, data } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let examples = parse_tsv(&data)?;
            let report = evaluate(&ckpt, &examples)?;
            for task in Task::ALL {
                let i = task.index();
                println!(
                    "task {task}: macro F1 {:.4} over {} examples",
                    report.f1[i],
                    report.examples(task)
                );
                println!("  gold\\pred {}", task.class_names().join(" "));
                for (g, row) in report.confusion[i].to_string().lines().enumerate() {
                    println!("  {:<9} {}", task.class_names()[g], row.replace('\t', " "));
                }
            }
        }
        Command::Ablate {
            config,
            train,
            dev,
            out,
            serial,
        } => {
            let config = load_config(config.as_deref())?;
            let (train_set, dev_set) = load_or_synthesize(train, dev, config.seed)?;
            let rows = ablate(&config, &TABLE_VARIANTS, &train_set, &dev_set, !serial)?;
            let md = ablation_markdown(&rows);
            print!("{md}");
            if let Some(out) = out {
                create_dir(&out)?;
                write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
                write(&out.join("ablation.md"), &md)?;
            }
        }
        Command::Gradcheck { probes, seed } => {
            let report = gradcheck::run(probes, seed)?;
            print!("{report}");
            println!(
                "ops max rel err {:.3e} (< {:.0e}); model max rel err {:.3e} over {} probes (< {:.0e})",
                report.max_op_error(),
                gradcheck::OP_TOLERANCE,
                report.max_model_error(),
                report.model_probes(),
                gradcheck::MODEL_TOLERANCE
            );
            report.into_result()?;
        }
        Command::Sweep {
            lengths,
            forms,
            inits,
            config,
            train,
            dev,
            out,
            serial,
        } => {
            let config = load_config(config.as_deref())?;
            let forms = forms.iter().map(|s| s.parse()).collect::<Result<Vec<PromptForm>>>()?;
            let inits = inits.iter().map(|s| s.parse()).collect::<Result<Vec<InitKind>>>()?;
            let prompts = sweep_configs(&lengths, &forms, &inits, config.model.prompt.tuning);
            if prompts.is_empty() {
                return Err(DpmnError::Config("no valid prompt settings in the sweep".into()));
            }
            let (train_set, dev_set) = load_or_synthesize(train, dev, config.seed)?;
            let rows = sweep(&config, &prompts, &train_set, &dev_set, !serial)?;
            let csv = sweep_csv(&rows);
            match out {
                Some(path) => write(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), TrainConfig::load)
}

fn load_or_synthesize(
    train: Option<PathBuf>,
    dev: Option<PathBuf>,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    match (train, dev) {
        (Some(t), Some(d)) => Ok((parse_tsv(t)?, parse_tsv(d)?)),
        _ => {
            let corpus = |size, seed| SyntheticCorpus {
                size,
                seed,
                ..SyntheticCorpus::default()
            };
            Ok((corpus(64, seed).generate(), corpus(32, seed.wrapping_add(1)).generate()))
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| DpmnError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| DpmnError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
