use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use irs_sensing::collab::Scheme;
use irs_sensing::config::{parse_config, ExperimentConfig};
use irs_sensing::experiment::{emit_plot_data, run_experiment};
use irs_sensing::{Error, Result};

/// Output root used when neither `--out` nor the config names one.
const OUT_ENV: &str = "IRS_SENSE_OUT";

#[derive(Parser)]
#[command(name = "irs-sense", version, about = "IRS-assisted collaborative spectrum sensing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config and write result CSVs.
    Run {
        config: PathBuf,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Output directory (default: config `out_dir`, then $IRS_SENSE_OUT, then ./results).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated subset of standalone, decoupled, fedavg.
        #[arg(long, value_delimiter = ',')]
        schemes: Option<Vec<String>>,
        /// Apply the reduced 8-band, 4-node profile.
        #[arg(long)]
        desk_scale: bool,
    },
    /// Reshape result CSVs into one x/y file per curve under <csv_dir>/plot.
    Plot { csv_dir: PathBuf },
}

fn load(
    path: &Path,
    seed_override: Option<u64>,
    schemes: Option<Vec<String>>,
    desk_scale: bool,
) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(path)?;
    if desk_scale {
        cfg.apply_desk_scale();
    }
    if let Some(seed) = seed_override {
        cfg.seeds = vec![seed];
    }
    if let Some(names) = schemes {
        cfg.schemes = names
            .iter()
            .map(|s| s.parse::<Scheme>().map_err(|e| Error::ConfigInvalid(e.to_string())))
            .collect::<Result<_>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed_override,
            out,
            schemes,
            desk_scale,
        } => {
            let cfg = load(&config, seed_override, schemes, desk_scale)?;
            let out = out
                .or_else(|| cfg.out_dir.clone())
                .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("results"));
            let result = run_experiment(&cfg, &out)?;
            for f in &result.files {
                if !f.starts_with("history") {
                    println!("{}", out.join(f).display());
                }
            }
        }
        Command::Plot { csv_dir } => {
            for s in emit_plot_data(&csv_dir)? {
                println!("{}", csv_dir.join("plot").join(format!("{}.csv", s.name)).display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
