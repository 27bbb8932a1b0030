// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end for the latent bridge pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_bridge::pipeline::{
    cmd_eval_bridge, cmd_extract, cmd_inject_generate, cmd_train_lm, cmd_train_translator,
    ExperimentConfig, ModelRole,
};
use latent_bridge::BridgeError;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "latent-bridge",
    version,
    about = "Translate and inject hidden states between two toy language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON). Defaults to the stock experiment.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory. Defaults to the configuration's output_dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    A,
    B,
}

#[derive(Subcommand)]
enum Command {
    /// Train model A or model B and write its checkpoint.
    TrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        model: Role,
    },
    /// Extract one vector per prompt from a model checkpoint.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Output file stem.
        #[arg(long, default_value = "vectors")]
        name: String,
    },
    /// Train forward and reverse translators from two vector stores.
    TrainTranslator {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        source: PathBuf,
        #[arg(long, value_name = "PATH")]
        target: PathBuf,
    },
    /// Generate baseline, injected and reference continuations and score them.
    InjectGenerate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        source_model: PathBuf,
        #[arg(long, value_name = "PATH")]
        target_model: PathBuf,
        #[arg(long, value_name = "PATH")]
        translator: PathBuf,
        /// Index into the prompt corpus; alternative to --full and --part.
        #[arg(long, conflicts_with_all = ["full", "part"], required_unless_present_all = ["full", "part"])]
        prompt_index: Option<usize>,
        #[arg(long, requires = "part")]
        full: Option<String>,
        #[arg(long, requires = "full")]
        part: Option<String>,
    },
    /// Run the whole experiment and write every artefact plus eval_report.json.
    EvalBridge {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, BridgeError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), BridgeError> {
    match cli.command {
        Command::TrainLm { common, model } => {
            let cfg = load_config(&common)?;
            let role = match model {
                Role::A => ModelRole::A,
                Role::B => ModelRole::B,
            };
            report(&cmd_train_lm(&cfg, role, &cfg.output_dir)?);
        }
        Command::Extract {
            common,
            model,
            name,
        } => {
            let cfg = load_config(&common)?;
            report(&[cmd_extract(&cfg, &model, &cfg.output_dir, &name)?]);
        }
        Command::TrainTranslator {
            common,
            source,
            target,
        } => {
            let cfg = load_config(&common)?;
            report(&cmd_train_translator(
                &cfg,
                &source,
                &target,
                &cfg.output_dir,
            )?);
        }
        Command::InjectGenerate {
            common,
            source_model,
            target_model,
            translator,
            prompt_index,
            full,
            part,
        } => {
            let cfg = load_config(&common)?;
            let (full, part) = match prompt_index {
                Some(i) => {
                    let prompts = cfg.prompt_records()?;
                    let p = prompts.get(i).ok_or_else(|| {
                        BridgeError::Input(format!(
                            "prompt index {i} out of range (corpus has {})",
                            prompts.len()
                        ))
                    })?;
                    (p.full.clone(), p.part.clone())
                }
                None => (full.unwrap_or_default(), part.unwrap_or_default()),
            };
            let path = cmd_inject_generate(
                &cfg,
                &source_model,
                &target_model,
                &translator,
                &full,
                &part,
                &cfg.output_dir,
            )?;
            report(&[path]);
        }
        Command::EvalBridge { common } => {
            let cfg = load_config(&common)?;
            let run = cmd_eval_bridge(&cfg)?;
            report(&run.files);
            summarise(&run.report, &cfg.output_dir);
        }
    }
    Ok(())
}

fn summarise(report: &latent_bridge::pipeline::BridgeReport, out: &Path) {
    for r in [&report.forward, &report.reverse] {
        let ratio = r
            .effect_size
            .map_or_else(|| "undefined".to_string(), |e| format!("{e:.2}x"));
        eprintln!(
            "{}: held-out mean cosine {:.3} (95% CI [{:.3}, {:.3}]), random baseline {:.3}, effect size {ratio}",
            r.direction, r.mean, r.ci95[0], r.ci95[1], r.baseline.value
        );
    }
    eprintln!("report: {}", out.join("eval_report.json").display());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() {
                EXIT_NUMERIC
            } else if matches!(e, BridgeError::Config(_)) {
                EXIT_USAGE
            } else {
                EXIT_DATA
            })
        }
    }
}
