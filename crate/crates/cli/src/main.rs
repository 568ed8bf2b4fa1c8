use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nka_core::analysis::{
    approx_error_experiment, rpe_expressiveness_demo, sample_complexity_experiment,
    variance_validation,
};
use nka_core::bench::{run_bench, BenchConfig, Variant};
use nka_core::rng::RngState;
use nka_core::selftest::{run_selftest, SelftestOptions};
use nka_core::Error;

#[derive(Parser, Debug)]
#[command(name = "nka", version, about = "Kernelized attention with relative positional encoding")]
struct Cli {
    /// Seed for every random draw
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the report here instead of standard output
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Emit JSON where CSV would be the default
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time forward passes over a grid of lengths and feature widths
    Bench(BenchArgs),
    /// Run the fixed-seed equivalence and gradient checks
    Selftest(SelftestArgs),
    /// Run one of the analysis experiments
    #[command(subcommand)]
    Experiment(Experiment),
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [Variant::Softmax, Variant::RpeNka])]
    variant: Vec<Variant>,
    #[arg(long, value_delimiter = ',', default_values_t = [1024, 2048, 4096, 8192, 16384])]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 64, 256])]
    m: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Only one head is supported
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=1))]
    heads: u32,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(3..))]
    repeats: u32,
    /// Skip softmax and rpe_naive above this length
    #[arg(long, default_value_t = 16384)]
    max_quadratic_n: usize,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Flip one FFT twiddle sign; the FFT checks must then fail
    #[arg(long)]
    perturb_fft: bool,
}

#[derive(Subcommand, Debug)]
enum Experiment {
    /// Mean L1 error of PRF attention rows against exact softmax
    ApproxError {
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 1024)]
        keys: usize,
        #[arg(long = "R", value_delimiter = ',', default_values_t = [1.0, 2.0, 4.0, 8.0, 16.0])]
        r: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [4, 16, 64, 256, 1024])]
        m: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Monte Carlo variance of the PRF kernel estimate against its closed form
    Variance {
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        /// Dimension of the random unit inputs
        #[arg(long, default_value_t = 8)]
        d: usize,
        /// Explicit first input (overrides the random draw)
        #[arg(long, value_delimiter = ',', requires = "y")]
        x: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', requires = "x")]
        y: Option<Vec<f64>>,
    },
    /// Feature-count bound and empirical tail of the attention L1 error
    Complexity {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long = "R", default_value_t = 1.0)]
        r: f64,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, value_delimiter = ',', default_values_t = [4, 16, 64, 256, 1024])]
        m: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
    },
    /// Rank of a random-offset Toeplitz bias matrix
    Rank {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
    },
}

enum Failure {
    Checks(Vec<String>),
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Range(_) | Error::Shape { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks(names)) => {
            eprintln!("failed checks: {}", names.join(", "));
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Opens `--out` (or stdout) before any work so a bad path fails fast.
fn open_output(out: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    match out {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            Ok(Box::new(BufWriter::new(file)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout().lock()))),
    }
}

fn finish(mut w: Box<dyn Write>, out: Option<&Path>) -> Result<(), Failure> {
    w.flush().map_err(|e| {
        Failure::Runtime(format!(
            "writing {}: {e}",
            out.map_or("<stdout>".into(), |p| p.display().to_string())
        ))
    })
}

fn write_json<T: serde::Serialize>(w: &mut dyn Write, value: &T) -> Result<(), Failure> {
    serde_json::to_writer_pretty(&mut *w, value).map_err(Error::from)?;
    writeln!(w).map_err(|e| Failure::Runtime(e.to_string()))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Bench(args) => {
            if args.n.contains(&0) || args.m.contains(&0) || args.d == 0 {
                return Err(Failure::Usage("lengths and widths must be positive".into()));
            }
            let mut w = open_output(out)?;
            let cfg = BenchConfig {
                variants: args.variant.clone(),
                ns: args.n.clone(),
                ms: args.m.clone(),
                d: args.d,
                warmup: args.warmup,
                repeats: args.repeats as usize,
                seed: cli.seed,
                max_quadratic_n: args.max_quadratic_n,
            };
            let report = run_bench(&cfg, |r| {
                eprintln!(
                    "{} n={} m={} median={:.6}s mad={:.6}s",
                    r.variant, r.n, r.m, r.median_seconds, r.mad_seconds
                )
            })?;
            for s in &report.skipped {
                eprintln!("skipped {} n={} m={}: {}", s.variant, s.n, s.m, s.reason);
            }
            if cli.json {
                write_json(&mut w, &report)?;
            } else {
                report.write_csv(&mut w)?;
            }
            finish(w, out)
        }
        Command::Selftest(args) => {
            let mut w = open_output(out)?;
            let report = run_selftest(&SelftestOptions {
                seed: cli.seed,
                perturb_fft: args.perturb_fft,
            })?;
            for c in &report.checks {
                eprintln!(
                    "{} {} error={:.3e} tolerance={:.0e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.error,
                    c.tolerance
                );
            }
            write_json(&mut w, &report)?;
            finish(w, out)?;
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Checks(
                    report.failing().into_iter().map(String::from).collect(),
                ))
            }
        }
        Command::Experiment(exp) => run_experiment(cli, exp),
    }
}

fn run_experiment(cli: &Cli, exp: &Experiment) -> Result<(), Failure> {
    let out = cli.out.as_deref();
    let mut w = open_output(out)?;
    match exp {
        Experiment::ApproxError {
            d,
            keys,
            r,
            m,
            trials,
        } => {
            let report = approx_error_experiment(*d, *keys, r, m, *trials, cli.seed)?;
            if cli.json {
                write_json(&mut w, &report)?;
            } else {
                report.write_csv(&mut w)?;
            }
        }
        Experiment::Variance {
            m,
            samples,
            d,
            x,
            y,
        } => {
            let (x, y) = match (x, y) {
                (Some(x), Some(y)) => (x.clone(), y.clone()),
                _ => {
                    if *d == 0 {
                        return Err(Failure::Usage("d must be positive".into()));
                    }
                    let mut rng = RngState::derive(cli.seed, 1);
                    (rng.unit_sphere(*d), rng.unit_sphere(*d))
                }
            };
            if x.len() != y.len() {
                return Err(Failure::Usage("x and y differ in length".into()));
            }
            let report = variance_validation(&x, &y, *m, *samples, cli.seed)?;
            write_json(&mut w, &report)?;
        }
        Experiment::Complexity {
            n,
            r,
            epsilon,
            delta,
            m,
            trials,
            d,
        } => {
            let report =
                sample_complexity_experiment(*n, *r, *epsilon, *delta, m, *trials, *d, cli.seed)?;
            write_json(&mut w, &report)?;
        }
        Experiment::Rank { n, d } => {
            let report = rpe_expressiveness_demo(*n, *d, cli.seed)?;
            write_json(&mut w, &report)?;
        }
    }
    finish(w, out)
}
