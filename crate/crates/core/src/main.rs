use std::path::PathBuf;
use std::process::ExitCode;

use cauchy_kmf::experiments::{run_experiment, ExperimentConfig, ExperimentId, HatCenter};
use cauchy_kmf::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cauchy-kmf", version, about = "Alternating iteration for elliptic Cauchy problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV files and report.json.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    experiment: ExperimentId,
    /// JSON configuration; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: out/<experiment>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Cell counts as AxB, e.g. 128x96 or 32x128.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<[usize; 2]>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dump_mesh: bool,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_enum)]
    hat_center: Option<HatCenter>,
}

fn parse_resolution(s: &str) -> std::result::Result<[usize; 2], String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected AxB, got '{s}'"))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad cell count '{t}': {e}"));
    Ok([parse(a)?, parse(b)?])
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let c = ExperimentConfig::from_json_file(path)?;
            if c.experiment != args.experiment {
                return Err(Error::Config(format!(
                    "config file is for '{}', command line asks for '{}'",
                    c.experiment, args.experiment
                )));
            }
            c
        }
        None => ExperimentConfig {
            out_dir: PathBuf::from("out").join(args.experiment.as_str()),
            ..ExperimentConfig::new(args.experiment)
        },
    };
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    config.tol = args.tol.or(config.tol);
    config.max_iter = args.max_iter.or(config.max_iter);
    config.resolution = args.resolution.or(config.resolution);
    config.seed = args.seed.unwrap_or(config.seed);
    config.dump_mesh |= args.dump_mesh;
    config.epsilon = args.epsilon.unwrap_or(config.epsilon);
    config.hat_center = args.hat_center.unwrap_or(config.hat_center);
    Ok(config)
}

fn main() -> ExitCode {
    // exit code 2 is reserved for runs that did not converge
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let Command::Run(args) = cli.command;
    let report = build_config(&args).and_then(|c| run_experiment(&c));
    match report {
        Ok(report) => {
            println!(
                "{}: converged={} iterations={} wall_time={:.2}s",
                report.experiment,
                report.converged,
                report.iterations.map_or("-".to_string(), |k| k.to_string()),
                report.wall_time_s
            );
            if let Some(e) = report.errors {
                println!(
                    "  relative L2 error {:.4e}, Linf error {:.4e}, relative Linf error {:.4e}",
                    e.relative_l2, e.linf, e.relative_linf
                );
            }
            println!("  report: {}", report.config.out_dir.join("report.json").display());
            if report.converged {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
