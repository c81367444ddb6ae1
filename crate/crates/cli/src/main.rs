use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cotri::discordance::{Pairing, Selection};
use cotri_cli::{cmd_clean, cmd_da, cmd_eval, cmd_fit, cmd_synth, exit_code, DaOptions, FitOptions};

/// Neural collective matrix tri-factorization and discordance analysis.
#[derive(Parser)]
#[command(name = "cotri", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted collection with true labels.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the networks and write factors, clusters and losses.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Total number of iterations, overriding `hyper.t`.
        #[arg(long)]
        t: Option<usize>,
        /// Continue from a checkpoint written by an earlier `fit`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score chain pairs between knowledge and data paths.
    Da {
        #[arg(long)]
        config: PathBuf,
        /// Factor archive written by `fit`.
        #[arg(long)]
        factors: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_selection)]
        selection: Option<Selection>,
        #[arg(long, value_parser = parse_pairing)]
        pairing: Option<Pairing>,
    },
    /// Remove listed edges from a collection.
    Clean {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted cluster labels against true labels.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_selection(s: &str) -> Result<Selection, String> {
    parse_enum(s)
}

fn parse_pairing(s: &str) -> Result<Pairing, String> {
    parse_enum(s)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out, seed } => cmd_synth(&config, &out, seed).map(|_| ()),
        Command::Fit {
            config,
            out,
            seed,
            t,
            resume,
        } => cmd_fit(&config, &out, &FitOptions { seed, t, resume }).map(|_| ()),
        Command::Da {
            config,
            factors,
            out,
            selection,
            pairing,
        } => cmd_da(
            &config,
            &out,
            &DaOptions {
                factors,
                selection,
                pairing,
            },
        )
        .map(|_| ()),
        Command::Clean {
            graph,
            data_dir,
            edges,
            out,
        } => cmd_clean(&graph, data_dir.as_deref(), &edges, &out).map(|(_, s)| {
            println!("removed {} edges, skipped {}", s.removed, s.skipped.len());
        }),
        Command::Eval { truth, pred, out } => {
            cmd_eval(&truth, &pred, out.as_deref()).map(|text| print!("{}", text))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
