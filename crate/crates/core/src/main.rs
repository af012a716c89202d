use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use schemacoder::cli::{cmd_evaluate, cmd_extract, cmd_report, report_error, EXIT_OK};

#[derive(Parser)]
#[command(name = "schemacoder", version, about = "LLM-synthesized log parser programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a parser program for the log named in a TOML config.
    Extract {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a prediction CSV against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Report path; defaults to `<pred>.report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write pca.csv and loss_curve.csv for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Extract { config, out } => cmd_extract(&config, out.as_deref()).map(|s| {
            println!("{}", s.report.summary_line());
            println!("wrote {}", s.output_dir.display());
        }),
        Command::Evaluate { pred, truth, out } => {
            let out = out.unwrap_or_else(|| {
                let mut p = pred.clone().into_os_string();
                p.push(".report.json");
                PathBuf::from(p)
            });
            cmd_evaluate(&pred, &truth, &out).map(|r| println!("{}", r.summary_line()))
        }
        Command::Report { run } => cmd_report(&run).map(|paths| {
            for p in paths {
                println!("wrote {}", p.display());
            }
        }),
    };
    let code = match result {
        Ok(()) => EXIT_OK,
        Err(e) => report_error(&e),
    };
    ExitCode::from(code as u8)
}
