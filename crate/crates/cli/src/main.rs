use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use gdkl::harness::{run_experiment, toy_curves, ExperimentConfig, Method};
use gdkl::Error;

#[derive(Parser)]
#[command(name = "gdkl", version, about = "Guided deep kernel learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config and write the JSON report.
    Run {
        config: PathBuf,
        /// Field overrides as `--field value` or `--train.field value`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Check closed forms and gradients against independent numerical routes.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the toy dataset and a GP-RBF fit as CSV.
    Toy {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        grid: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --field, got {arg:?}")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("missing value for --{key}")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Parse { .. }
            | Error::NonFinite { .. }
            | Error::InvalidLabel { .. }
            | Error::Io(_)
            | Error::Json(_),
        ) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Run { config, overrides } => {
            let overrides = parse_overrides(&overrides)?;
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
            let config = ExperimentConfig::from_toml_str(&text, &overrides)?;
            let report = run_experiment(&config)?;
            if config.output.is_none() {
                println!("{}", report.to_json()?);
            }
            for (name, agg) in &report.aggregate {
                eprintln!("{name}: {:.4} ± {:.4} (n = {})", agg.mean, agg.std, agg.count);
            }
            if report.failed_folds > 0 {
                eprintln!("{} fold(s) failed", report.failed_folds);
                return Ok(2);
            }
            Ok(0)
        }
        Command::Verify { seed } => {
            let checks = gdkl::verify::run_all(seed);
            let mut failed = 0;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            Ok(if failed == 0 { 0 } else { 2 })
        }
        Command::Toy {
            out_dir,
            seed,
            grid,
            steps,
        } => {
            let mut train = Method::GpRbf.default_train_config();
            train.total_steps = steps;
            let curves = toy_curves(&train, seed, grid)?;
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let data_path = out_dir.join("toy_data.csv");
            let fit_path = out_dir.join("toy_fit.csv");
            curves.write_data_csv(BufWriter::new(File::create(&data_path)?))?;
            curves.write_fit_csv(BufWriter::new(File::create(&fit_path)?))?;
            println!("wrote {} and {}", data_path.display(), fit_path.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
