use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trackersift::attribution::Granularity;
use trackersift::pipeline::{self, InputPaths, Options};
use trackersift::report::DEFAULT_BIN_WIDTH;
use trackersift::sifter::{parse_grid, DEFAULT_THRESHOLD};
use trackersift::synth;

#[derive(Parser)]
#[command(
    name = "trackersift",
    version,
    about = "Hierarchical separation of tracking and functional web requests"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Inputs {
    /// JSON-lines trace files
    #[arg(long, num_args = 1.., required = true)]
    traces: Vec<PathBuf>,
    /// Filter lists, unioned
    #[arg(long, num_args = 1.., required = true)]
    filters: Vec<PathBuf>,
    /// Public suffix list (public_suffix_list.dat format)
    #[arg(long)]
    psl: PathBuf,
    /// Worker threads (0 = all cores)
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

impl Inputs {
    fn paths(&self) -> InputPaths {
        InputPaths {
            traces: self.traces.clone(),
            filters: self.filters.clone(),
            psl: self.psl.clone(),
        }
    }
}

#[derive(Args)]
struct SiftArgs {
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Distinguish anonymous functions by line and column
    #[arg(long)]
    positional_identity: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sift requests through all four levels and write reports
    Classify {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        sift: SiftArgs,
        /// Histogram bin width
        #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
        bin_width: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Percentage of mixed entities at one level over a threshold grid
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "1.0:3.0:0.1")]
        grid: String,
        #[arg(long, default_value = "script")]
        level: String,
        /// Threshold used to route requests between levels
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        base_threshold: f64,
        #[arg(long)]
        positional_identity: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Call-stack divergence points of every mixed method
    Diverge {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        sift: SiftArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print each request's filter label as a JSON line
    Label {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Generate a synthetic trace, filter list and PSL from a scenario
    Synth {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn report_diagnostics(diagnostics: &[String]) {
    if diagnostics.is_empty() {
        return;
    }
    eprintln!("{} diagnostics", diagnostics.len());
    for d in diagnostics.iter().take(10) {
        eprintln!("  {d}");
    }
    if diagnostics.len() > 10 {
        eprintln!("  ...");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Classify {
            inputs,
            sift,
            bin_width,
            out,
        } => {
            if !(bin_width.is_finite() && bin_width > 0.0) {
                bail!("--bin-width must be positive");
            }
            let loaded = pipeline::load(&inputs.paths())?;
            let options = Options {
                threshold: sift.threshold,
                positional_identity: sift.positional_identity,
                jobs: inputs.jobs,
            };
            let c = pipeline::classify(&loaded, &options)?;
            pipeline::write_classification(&out, &c, bin_width)?;
            report_diagnostics(&c.diagnostics);
        }
        Command::Sweep {
            inputs,
            grid,
            level,
            base_threshold,
            positional_identity,
            out,
        } => {
            let level = Granularity::from_name(&level).with_context(|| {
                format!("unknown level {level:?}; use domain, hostname, script or method")
            })?;
            let grid = parse_grid(&grid)?;
            let loaded = pipeline::load(&inputs.paths())?;
            let options = Options {
                threshold: base_threshold,
                positional_identity,
                jobs: inputs.jobs,
            };
            let c = pipeline::classify(&loaded, &options)?;
            let points = pipeline::sweep(&c, level, &grid)?;
            pipeline::write_sweep(&out, level, &points)?;
            pipeline::write_diagnostics(&out, &c.diagnostics)?;
            report_diagnostics(&c.diagnostics);
        }
        Command::Diverge { inputs, sift, out } => {
            let loaded = pipeline::load(&inputs.paths())?;
            let options = Options {
                threshold: sift.threshold,
                positional_identity: sift.positional_identity,
                jobs: inputs.jobs,
            };
            let c = pipeline::classify(&loaded, &options)?;
            let findings = pipeline::diverge(&c, inputs.jobs)?;
            pipeline::write_divergence(&out, sift.threshold, &findings)?;
            pipeline::write_diagnostics(&out, &c.diagnostics)?;
            report_diagnostics(&c.diagnostics);
        }
        Command::Label { inputs } => {
            let loaded = pipeline::load(&inputs.paths())?;
            let stdout = io::stdout();
            let mut out = stdout.lock();
            for line in pipeline::label_lines(&loaded, inputs.jobs)? {
                writeln!(out, "{line}")?;
            }
            report_diagnostics(&loaded.diagnostics);
        }
        Command::Synth {
            scenario,
            seed,
            out,
        } => {
            let text = fs::read_to_string(&scenario)
                .with_context(|| format!("cannot read {}", scenario.display()))?;
            let parsed = synth::parse_scenario(&text)?;
            let generated = synth::generate(&parsed, seed)?;
            generated
                .write_to(&out)
                .with_context(|| format!("cannot write {}", out.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
