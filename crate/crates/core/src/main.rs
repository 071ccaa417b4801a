use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cot_probe::interventions::InterventionKind;
use cot_probe::runner::config::{BackendSpec, Overrides, RunConfig};
use cot_probe::runner::report::emit_report;
use cot_probe::runner::scan::run_scan;
use cot_probe::runner::{prepare, run_baseline, run_interventions, verify_run, ExecOptions, KindStatus, RunError, RunHooks};

#[derive(Parser)]
#[command(name = "cot-probe", version, about = "Chain-of-thought faithfulness experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample chains of thought and no-CoT answers.
    Baseline(Common),
    /// Apply interventions to a collected baseline.
    Intervene {
        /// An intervention kind, or `all`.
        kind: String,
        #[command(flatten)]
        common: Common,
    },
    /// Measure the answer-change rate across the configured backend ladder.
    Scan(Common),
    /// Write report tables for a run.
    Report(Common),
    /// Check the configuration and any existing run records.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// CoT backend shorthand, e.g. `scripted:cot-ignoring`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    samples_per_question: Option<u32>,
    #[arg(long)]
    max_questions: Option<usize>,
    /// Normalized task file (JSONL); requires `--task-name`.
    #[arg(long)]
    task_file: Option<PathBuf>,
    #[arg(long)]
    task_name: Option<String>,
    /// Addition task spec, e.g. `operands=8,digits=2,count=100,seed=1`.
    #[arg(long)]
    addition: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            run_id: self.run_id.clone(),
            out_dir: self.out_dir.clone(),
            cache_dir: self.cache_dir.clone(),
            backend: self.backend.clone(),
            parallelism: self.parallelism,
            samples_per_question: self.samples_per_question,
            max_questions: self.max_questions,
            task_file: self.task_file.clone(),
            task_name: self.task_name.clone(),
            addition: self.addition.clone(),
        }
    }

    fn config(&self) -> Result<RunConfig, RunError> {
        let mut cfg = match (&self.config, &self.backend) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(b)) => RunConfig::minimal(BackendSpec::Flag(b.clone())),
            (None, None) => return Err(RunError::Config("pass --config or --backend".into())),
        };
        cfg.apply(&self.overrides())?;
        Ok(cfg)
    }

    /// The run directory: from `--run-id` alone when no config is given.
    fn run_dir(&self) -> Result<PathBuf, RunError> {
        if self.config.is_none() && self.backend.is_none() {
            let id = self.run_id.as_ref().ok_or_else(|| RunError::Config("pass --config or --run-id".into()))?;
            let out = self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
            return Ok(out.join(id));
        }
        Ok(prepare(&self.config()?)?.dir)
    }

    fn exec(&self) -> Result<ExecOptions, RunError> {
        if self.config.is_none() && self.backend.is_none() {
            return Ok(ExecOptions { cache_dir: self.cache_dir.clone(), parallelism: self.parallelism });
        }
        let cfg = self.config()?;
        Ok(ExecOptions { cache_dir: cfg.cache_dir, parallelism: cfg.parallelism })
    }
}

fn parse_kinds(arg: &str) -> Result<Vec<InterventionKind>, RunError> {
    if arg == "all" {
        return Ok(InterventionKind::ALL.to_vec());
    }
    arg.split(',').map(|k| k.trim().parse::<InterventionKind>().map_err(RunError::Config)).collect()
}

fn execute(cli: Cli) -> Result<(), RunError> {
    let hooks = RunHooks::default();
    match cli.command {
        Command::Baseline(c) => {
            let cfg = c.config()?;
            let id = run_baseline(&cfg, &hooks)?;
            println!("baseline complete: {}", cfg.out_dir.join(&id).display());
        }
        Command::Intervene { kind, common } => {
            let kinds = parse_kinds(&kind)?;
            let dir = common.run_dir()?;
            for (kind, status) in run_interventions(&dir, &kinds, &common.exec()?, &hooks)? {
                match status {
                    KindStatus::Completed { records } => println!("{kind}: {records} records"),
                    KindStatus::AlreadyComplete => println!("{kind}: already complete"),
                }
            }
        }
        Command::Scan(c) => {
            let out = run_scan(&c.config()?, &hooks)?;
            println!("scan written: {}", out.path.display());
        }
        Command::Report(c) => {
            let out = emit_report(&c.run_dir()?)?;
            for n in &out.notices {
                eprintln!("note: {n}");
            }
            println!("report written: {}", out.dir.display());
        }
        Command::Validate(c) => {
            let dir = if c.config.is_some() || c.backend.is_some() {
                let p = prepare(&c.config()?)?;
                println!("configuration ok: run {} with {} questions", p.manifest.run_id, p.questions.len());
                p.dir
            } else {
                c.run_dir()?
            };
            if dir.exists() {
                for (file, records, sealed) in verify_run(&dir)? {
                    println!("{file}: {records} records{}", if sealed { "" } else { " (unsealed)" });
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
