use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sola_core::backbone::BackboneConfig;
use sola_core::harness::{cmd_bench, cmd_check, cmd_forward, cmd_range, cmd_train_toy, CheckOptions, RunReport, TrainOptions};

/// Hybrid linear/softmax vision backbone: forward traces, checks, FLOP curves, range analysis.
#[derive(Parser)]
#[command(name = "sola", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a seeded model and run one forward pass on a random image.
    Forward {
        /// Preset name (sola_t, sola_s, sola_b, micro) or JSON path.
        #[arg(long, default_value = "sola_t")]
        config: String,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle, invariant and gradient suites.
    Check {
        #[arg(long, default_value = "micro")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replace the stabilized scan with an unstabilized one.
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOP scaling over resolutions for the config and its all-softmax variant.
    Bench {
        #[arg(long, default_value = "sola_t")]
        config: String,
        #[arg(long, value_delimiter = ',', default_value = "224,448,896")]
        resolutions: Vec<usize>,
        /// Write the CSV curve here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Effective radius of stacked exponential decay kernels.
    Range {
        #[arg(long, default_value_t = 1.0)]
        w: f64,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 64)]
        max_depth: usize,
        /// Write the CSV table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a small config on the two-class blob task.
    TrainToy {
        #[arg(long, default_value = "micro")]
        config: String,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_json(report: &RunReport, out: Option<&PathBuf>) -> sola_core::Result<()> {
    if let Some(path) = out {
        std::fs::write(path, report.to_json()?)?;
    }
    Ok(())
}

fn print_forward(report: &RunReport) {
    if let Some(layers) = report.data["layers"].as_array() {
        for l in layers {
            println!(
                "stage {} layer {} {} {}x{}x{} flops {}",
                l["stage"], l["layer"], l["kind"].as_str().unwrap_or("?"), l["height"], l["width"], l["dim"], l["flops"]
            );
        }
    }
    if let Some(bridges) = report.data["bridges"].as_array() {
        for b in bridges {
            println!("bridge {} -> {}: {} -> {}", b["src"], b["dst"], b["src_shape"], b["bridge_shape"]);
        }
    }
    if let Some(shapes) = report.data["stage_shapes"].as_array() {
        if let Some(last) = shapes.last() {
            println!("final {last}, pooled {}", report.data["pooled"].as_array().map_or(0, |p| p.len()));
        }
    }
}

fn run(cli: Cli) -> sola_core::Result<RunReport> {
    match cli.command {
        Command::Forward {
            config,
            resolution,
            seed,
            out,
        } => {
            let report = cmd_forward(&BackboneConfig::load(&config)?, resolution, seed)?;
            print_forward(&report);
            write_json(&report, out.as_ref())?;
            Ok(report)
        }
        Command::Check {
            config,
            seed,
            inject_fault,
            out,
        } => {
            let report = cmd_check(&BackboneConfig::load(&config)?, &CheckOptions { seed, inject_fault })?;
            write_json(&report, out.as_ref())?;
            Ok(report)
        }
        Command::Bench {
            config,
            resolutions,
            out,
        } => cmd_bench(&BackboneConfig::load(&config)?, &resolutions, out.as_deref()),
        Command::Range {
            w,
            epsilon,
            max_depth,
            out,
        } => {
            let report = cmd_range(w, epsilon, max_depth, out.as_deref())?;
            println!("M,sigma,xi,xi_predicted");
            if let Some(rows) = report.data["rows"].as_array() {
                for r in rows {
                    println!("{},{},{},{}", r["m"], r["sigma"], r["xi"], r["xi_predicted"]);
                }
            }
            Ok(report)
        }
        Command::TrainToy {
            config,
            steps,
            lr,
            seed,
            samples,
            out,
        } => {
            let opts = TrainOptions {
                steps,
                lr,
                seed,
                samples,
            };
            let report = cmd_train_toy(&BackboneConfig::load(&config)?, &opts)?;
            write_json(&report, out.as_ref())?;
            Ok(report)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            print!("{}", report.summary());
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                for c in report.failures() {
                    eprintln!("check failed: {}", c.name);
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
