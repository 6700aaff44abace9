use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mac_core::data::CheckinSchema;
use mac_core::eval::{ingest, run_experiment, ExperimentConfig, IngestOptions};
use mac_core::synth::{generate, SynthConfig};
use mac_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mac-sim", version, about = "Decentralized collaborative next-POI recommendation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter and split raw check-ins into a dataset directory.
    Ingest {
        #[arg(long)]
        checkins: PathBuf,
        #[arg(long)]
        friends: PathBuf,
        #[arg(long, default_value = "default")]
        schema: String,
        #[arg(long, default_value_t = 10)]
        min_interactions: usize,
        #[arg(long, default_value_t = 200)]
        max_seq_len: usize,
        #[arg(long, default_value_t = 0.10)]
        reference_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment and write report.json, rounds.ndjson and neighbors.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// transformative | probabilistic | original
        #[arg(long)]
        refgen: Option<String>,
        /// performance | similarity | full
        #[arg(long)]
        sampling: Option<String>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` overrides, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic city with planted transitions as a dataset directory.
    Synth {
        #[arg(long, default_value_t = 100)]
        users: usize,
        #[arg(long, default_value_t = 2)]
        regions: usize,
        #[arg(long, default_value_t = 0.0)]
        noise_fraction: f64,
        /// Probability of staying in the current POI group at each step.
        #[arg(long)]
        stay_prob: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            checkins,
            friends,
            schema,
            min_interactions,
            max_seq_len,
            reference_fraction,
            seed,
            out,
        } => {
            let opts = IngestOptions {
                schema: CheckinSchema::named(&schema).map_err(|e| e.in_stage("ingest"))?,
                min_interactions,
                max_seq_len,
                reference_fraction,
                seed,
            };
            let data = ingest(&checkins, &friends, &opts).map_err(|e| e.in_stage("ingest"))?;
            data.save(&out).map_err(|e| e.in_stage("output"))?;
            println!(
                "ingested {} users ({} evaluated, {} withheld), {} POIs into {}",
                data.users.len(),
                data.split.users.len(),
                data.split.reference_pool.len(),
                data.pois.len(),
                out.display()
            );
        }
        Command::Run {
            config,
            refgen,
            sampling,
            gamma,
            seed,
            overrides,
            out,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config).map_err(|e| e.in_stage("config"))?;
            let mut apply = |k: &str, v: String| cfg.set_key(k, &v).map_err(|e| e.in_stage("config"));
            if let Some(v) = refgen {
                apply("refgen", v)?;
            }
            if let Some(v) = sampling {
                apply("sampling", v)?;
            }
            if let Some(v) = gamma {
                apply("gamma", v.to_string())?;
            }
            if let Some(v) = seed {
                apply("seed", v.to_string())?;
            }
            for kv in overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")).in_stage("config"))?;
                apply(k.trim(), v.trim().to_string())?;
            }
            let output = run_experiment(&cfg)?;
            output.write(&out).map_err(|e| e.in_stage("output"))?;
            print!("{}", output.report.to_table());
        }
        Command::Synth {
            users,
            regions,
            noise_fraction,
            stay_prob,
            seed,
            out,
        } => {
            let defaults = SynthConfig::default();
            let cfg = SynthConfig {
                users,
                regions,
                noise_fraction,
                stay_prob: stay_prob.unwrap_or(defaults.stay_prob),
                seed,
                ..defaults
            };
            let city = generate(&cfg).map_err(|e| e.in_stage("synth"))?;
            city.dataset.save(&out).map_err(|e| e.in_stage("output"))?;
            println!("wrote {} synthetic users to {}", users, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
