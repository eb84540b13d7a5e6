//! `mmfinger`: extract transferable fingerprints from image–caption corpora
//! and verify whether suspicious retrieval models were trained on them.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmfinger::config::RunConfig;
use mmfinger::error::{CliError, CliResult};
use mmfinger::manifest::{self, ManifestFormat};
use mmfinger::pipeline::{self, Sweep};
use mmfinger::{checkpoint, inspect, query, report};

#[derive(Parser)]
#[command(
    name = "mmfinger",
    version,
    about = "Multimodal dataset fingerprinting toolkit"
)]
struct Cli {
    /// Path to the run configuration (TOML).
    #[arg(long, global = true, default_value = "mmfinger.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a configuration file populated with the toy defaults.
    Init {
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Synthesize the configured corpus to a directory (manifest + PNGs).
    Synth {
        /// Target directory (defaults to <output.dir>/corpus).
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Also train and save the toy suspect models.
        #[arg(long)]
        suspects: bool,
    },
    /// Run the extraction pipeline and write the fingerprint bundle.
    Extract {
        /// Load the corpus from a directory instead of synthesizing it.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Verify one suspicious model against an extracted bundle.
    Verify {
        /// Bundle directory (defaults to output.dir).
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Checkpoint path or http://host:port/path endpoint.
        #[arg(long)]
        model: String,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Benign baseline report for ΔR.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Where to write the JSON report (defaults to <bundle>/report-<model-stem>.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation sweep and emit CSV + table.
    Ablate {
        /// One of: budget, prompt-length, prompt-init, modules, pruning, hybrid.
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Aggregate verification reports into a ΔR table.
    Report {
        /// Report JSON files.
        paths: Vec<PathBuf>,
        /// Optional CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Perturbation artifact utilities.
    Gop {
        #[command(subcommand)]
        command: GopCommand,
    },
}

#[derive(Subcommand)]
enum GopCommand {
    /// Print budget-compliance statistics of a perturbation artifact.
    Inspect {
        /// Path to gop.bin (defaults to <output.dir>/gop.bin).
        #[arg(long)]
        artifact: Option<PathBuf>,
        /// Check the budget against this corpus directory (or the configured
        /// synthetic corpus when omitted).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Write a perturbation heat-map PNG.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version are not errors
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::from(0);
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(0),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Init { force } => {
            if cli.config.exists() && !force {
                return Err(CliError::validation(format!(
                    "{} already exists (use --force to overwrite)",
                    cli.config.display()
                )));
            }
            RunConfig::default().save(&cli.config)?;
            println!("wrote {}", cli.config.display());
            Ok(())
        }
        Command::Synth { dir, suspects } => {
            let config = RunConfig::load(&cli.config)?;
            let corpus = pipeline::resolve_corpus(&config, None)?;
            let dir = dir.unwrap_or_else(|| config.out_dir().join("corpus"));
            manifest::save_corpus(&corpus, &dir)?;
            println!(
                "wrote {} samples over {} classes to {}",
                corpus.len(),
                corpus.class_names().len(),
                dir.display()
            );
            if suspects {
                let paths = pipeline::cmd_suspects(&config, None)?;
                println!("wrote {}", paths.malicious.display());
                println!("wrote {}", paths.benign.display());
                println!("wrote {}", paths.untrained.display());
            }
            Ok(())
        }
        Command::Extract { corpus } => {
            let config = RunConfig::load(&cli.config)?;
            let bundle = pipeline::cmd_extract(&config, corpus.as_deref())?;
            println!("bundle written to {}", bundle.dir.display());
            println!(
                "  fingerprint: ({} -> {})",
                bundle.gop.k_o, bundle.gop.k_adv
            );
            Ok(())
        }
        Command::Verify {
            bundle,
            model,
            corpus,
            baseline,
            out,
        } => {
            let config = RunConfig::load(&cli.config)?;
            let bundle_dir = bundle.unwrap_or_else(|| config.out_dir());
            let model_ref = query::ModelRef::open(&model)?;
            let report = pipeline::cmd_verify(
                &config,
                &bundle_dir,
                model_ref.scorer(),
                corpus.as_deref(),
                baseline.as_deref(),
            )?;
            let table = report::report_table(&report);
            print!("{}", table.to_text());
            let out_path = out.unwrap_or_else(|| {
                let stem = std::path::Path::new(&model)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("model")
                    .to_string();
                bundle_dir.join(format!("report-{stem}.json"))
            });
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| CliError::runtime(format!("encode report: {e}")))?;
            std::fs::write(&out_path, text).map_err(|e| CliError::io(&out_path, e))?;
            println!("report written to {}", out_path.display());
            Ok(())
        }
        Command::Ablate { sweep, corpus } => {
            let config = RunConfig::load(&cli.config)?;
            let sweep = Sweep::parse(&sweep)?;
            let table = pipeline::cmd_ablate(&config, sweep, corpus.as_deref())?;
            print!("{}", table.to_text());
            let csv_path = config
                .out_dir()
                .join(format!("ablate-{}.csv", sweep_slug(sweep)));
            if let Some(parent) = csv_path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
            table.write_csv(&csv_path)?;
            println!("csv written to {}", csv_path.display());
            Ok(())
        }
        Command::Report { paths, csv } => {
            let table = report::cmd_report(&paths)?;
            print!("{}", table.to_text());
            if let Some(csv_path) = csv {
                table.write_csv(&csv_path)?;
                println!("csv written to {}", csv_path.display());
            }
            Ok(())
        }
        Command::Gop { command } => match command {
            GopCommand::Inspect {
                artifact,
                corpus,
                heatmap,
            } => {
                let config = RunConfig::load(&cli.config)?;
                let artifact_path =
                    artifact.unwrap_or_else(|| config.out_dir().join(pipeline::GOP_FILE));
                let gop = checkpoint::load_gop(&artifact_path)?;
                let corpus = match corpus {
                    Some(dir) => Some(manifest::load_corpus(&dir, ManifestFormat::JsonLines)?),
                    None => Some(pipeline::resolve_corpus(&config, None)?),
                };
                let table = inspect::inspect_table(&gop, corpus.as_ref())?;
                print!("{}", table.to_text());
                if let Some(path) = heatmap {
                    inspect::write_heatmap(&gop, corpus.as_ref(), &path)?;
                    println!("heat-map written to {}", path.display());
                }
                Ok(())
            }
        },
    }
}

fn sweep_slug(sweep: Sweep) -> &'static str {
    match sweep {
        Sweep::Budget => "budget",
        Sweep::PromptLength => "prompt-length",
        Sweep::PromptInit => "prompt-init",
        Sweep::Modules => "modules",
        Sweep::Pruning => "pruning",
        Sweep::Hybrid => "hybrid",
    }
}
