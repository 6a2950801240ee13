use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use geoprobe::config::{LabelsSource, RunConfig};
use geoprobe::synthetic::SyntheticSpec;
use geoprobe_cli as cmd;

#[derive(Parser)]
#[command(name = "geoprobe", version, about = "Slice-probing landscape features and tail-aware solver selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config value, e.g. `--set probing.slices=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Proceed even when stored hashes disagree with the config.
    #[arg(long)]
    force: bool,
}

impl ConfigArgs {
    fn load(&self) -> geoprobe::Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample slice sets for every datapoint of the suite.
    Generate(ConfigArgs),
    /// Build the capped label table from the configured source.
    Ingest(ConfigArgs),
    /// Train and score the selector under the configured protocol.
    Evaluate(ConfigArgs),
    /// Re-run the protocol over a grid of slice counts and resolutions.
    Sweep(ConfigArgs),
    /// Write the constructed two-solver benchmark as an ERT CSV.
    SyntheticLabels {
        /// Take the synthetic spec from this config instead of the defaults.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Probability that an entry is replaced by a never-successful run.
        #[arg(long)]
        cap_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> geoprobe::Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let cfg = a.load()?;
            let m = cmd::generate(&cfg, a.force)?;
            eprintln!(
                "wrote {} slice sets ({} evaluations) to {}",
                m.count,
                m.total_evaluations,
                cmd::dataset_dir(&cfg).display()
            );
        }
        Command::Ingest(a) => {
            let cfg = a.load()?;
            let labels = cmd::ingest(&cfg)?;
            for w in &labels.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "{} problems x {} algorithms, cap {}",
                labels.table.rows.len(),
                labels.table.algorithms.len(),
                labels.table.cap
            );
        }
        Command::Evaluate(a) => {
            let cfg = a.load()?;
            for r in cmd::evaluate(&cfg, a.force)? {
                let o = &r.overall;
                eprintln!(
                    "{} {}: selector mean {:.3} median {:.3} p90 {:.3} | SBS mean {:.3} median {:.3} p90 {:.3} | accuracy {:.3}",
                    r.protocol,
                    r.mode.name(),
                    o.selector.mean,
                    o.selector.median,
                    o.selector.p90,
                    o.sbs.mean,
                    o.sbs.median,
                    o.sbs.p90,
                    o.accuracy
                );
            }
        }
        Command::Sweep(a) => {
            let cfg = a.load()?;
            for c in cmd::sweep(&cfg, a.force)? {
                eprintln!(
                    "k={} r={} ({} evals): median {:.3} accuracy {:.3}",
                    c.slices, c.resolution, c.evaluations_per_datapoint, c.summary.median, c.accuracy
                );
            }
        }
        Command::SyntheticLabels {
            config,
            out,
            cap_rate,
            seed,
        } => {
            let mut spec = match config {
                Some(path) => match RunConfig::load(&path, &[])?.labels {
                    LabelsSource::Synthetic(spec) => spec,
                    _ => return Err(geoprobe::Error::Config("config labels source is not synthetic".into())),
                },
                None => SyntheticSpec::default(),
            };
            if let Some(r) = cap_rate {
                spec.cap_injection_rate = r;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let n = cmd::synthetic_labels(&spec, &out)?;
            eprintln!("wrote {n} ERT rows to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
