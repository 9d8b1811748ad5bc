//! Administration CLI for the validation server.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use validation_server::ids::DatasetId;
use validation_server::ledger::{scan_totals, verify_file, Ledger, LEDGER_FILE};
use validation_server::service::{self, store, Config};

#[derive(Parser)]
#[command(name = "vsadmin", version, about = "Administer a validation server data directory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataDir {
    /// Data directory (datasets, ledger, workflow records)
    #[arg(long)]
    data_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Load a confidential CSV against a schema manifest (JSON or TOML)
    Ingest {
        #[command(flatten)]
        dir: DataDir,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Register the public synthetic twin of a dataset
    RegisterSynthetic {
        #[command(flatten)]
        dir: DataDir,
        #[arg(long)]
        dataset: String,
        /// Curator-supplied CSV
        #[arg(long, conflicts_with = "placeholder", required_unless_present = "placeholder")]
        file: Option<PathBuf>,
        /// Generate a uniform placeholder: N SEED
        #[arg(long, num_args = 2, value_names = ["N", "SEED"])]
        placeholder: Option<Vec<u64>>,
        #[arg(long)]
        note: Option<String>,
    },
    /// Verify or dump the privacy ledger
    Ledger {
        #[command(subcommand)]
        action: LedgerAction,
    },
    /// Run the HTTP service
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Global privacy-loss report
    Report {
        #[command(flatten)]
        dir: DataDir,
    },
}

#[derive(Subcommand)]
enum LedgerAction {
    Verify {
        #[command(flatten)]
        dir: DataDir,
    },
    Dump {
        #[command(flatten)]
        dir: DataDir,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Ingest { dir, manifest, csv } => {
            let schema = store::read_manifest(&manifest).map_err(|e| e.to_string())?;
            let bytes = std::fs::read(&csv).map_err(|e| format!("{}: {e}", csv.display()))?;
            let stats = store::ingest(&dir.data_dir, &schema, &bytes).map_err(|e| e.to_string())?;
            println!(
                "ingested dataset {}: {} value(s) clamped to bounds, {} row(s) rejected",
                schema.dataset_id, stats.clamped, stats.rejected
            );
        }
        Command::RegisterSynthetic { dir, dataset, file, placeholder, note } => {
            let id = DatasetId::new(dataset);
            let record = match (file, placeholder) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                    store::register_synthetic_file(&dir.data_dir, &id, &text, note)
                }
                (None, Some(args)) => store::register_placeholder(&dir.data_dir, &id, args[0] as usize, args[1]),
                (None, None) => unreachable!("clap requires one source"),
            }
            .map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&record).expect("serializes"));
        }
        Command::Ledger { action: LedgerAction::Verify { dir } } => {
            let path = dir.data_dir.join("ledger").join(LEDGER_FILE);
            let report = verify_file(&path).map_err(|e| e.to_string())?;
            println!("ok: {} entries, head {}", report.entries, report.head_digest);
            if report.torn_tail {
                println!("note: unterminated final line (interrupted append); it is dropped on next open");
            }
            for (project, total) in scan_totals(&path).map_err(|e| e.to_string())? {
                println!("{project}\t{total}");
            }
        }
        Command::Ledger { action: LedgerAction::Dump { dir } } => {
            let path = dir.data_dir.join("ledger").join(LEDGER_FILE);
            verify_file(&path).map_err(|e| e.to_string())?;
            let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
            print!("{text}");
        }
        Command::Serve { config } => {
            let config = Config::load(&config).map_err(|e| e.to_string())?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(service::serve(config)).map_err(|e| e.to_string())?;
        }
        Command::Report { dir } => {
            let ledger = Ledger::open(&dir.data_dir.join("ledger")).map_err(|e| e.to_string())?;
            let report = ledger.global_report();
            println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
        }
    }
    Ok(())
}
