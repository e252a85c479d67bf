use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dejavu::error::{Error, Result};
use dejavu::harness::experiments::{experiment_seeds, scaling_csv};
use dejavu::harness::{
    ablate_redaction, band_sweep, evaluate_checkpoint, sa_scaling, train_paired, train_with, RunOptions, Split,
    TrainConfig,
};
use dejavu::io::{load_image, save_image};
use dejavu::redaction::{redact, RedactionDomain, RedactionSpec, RedactionVariant};
use dejavu::rng::make_rng;

#[derive(Parser)]
#[command(name = "dejavu", version, about = "Conditional regenerative learning for dense prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Also train the matching baseline; runs go to OUT/baseline and OUT/dejavu.
        #[arg(long)]
        paired: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Redact a single PNG image.
    Redact {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long)]
        domain: RedactionDomain,
        #[arg(long)]
        variant: RedactionVariant,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        b: Option<usize>,
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        band: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Spatial vs spectral redaction over the three tasks.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Depth error as a function of the redacted frequency band.
    SweepBands {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        centers: String,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Cost and accuracy of the attention module across widths.
    SaScale {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "16,32,64")]
        dims: String,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad list item `{p}` in `{s}`"))))
        .collect()
}

fn load(config: &PathBuf, out: Option<PathBuf>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out, resume, paired, quiet } => {
            let mut cfg = load(&config, out)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let opts = RunOptions { resume, verbose: !quiet, ..Default::default() };
            let records = if paired {
                let (b, d) = train_paired(&cfg, opts)?;
                vec![("baseline", b), ("dejavu", d)]
            } else {
                vec![("run", train_with(cfg, opts)?)]
            };
            for (name, r) in records {
                println!("{name}: experiment {} in {:.1}s", r.experiment_id, r.wall_clock_secs);
                if let Some(m) = r.final_metrics() {
                    for (task, metric, value) in m.entries() {
                        println!("  {task}/{metric} = {value:.6}");
                    }
                }
            }
        }
        Command::Eval { ckpt, split } => {
            let m = evaluate_checkpoint(&ckpt, split)?;
            for (task, metric, value) in m.entries() {
                println!("{task},{metric},{value}");
            }
        }
        Command::Redact { input, output, domain, variant, t, b, band, seed } => {
            let mut spec = RedactionSpec::bare(variant).with_seed(seed);
            if spec.domain != domain {
                return Err(Error::InvalidSpec(format!("variant `{variant}` is not in domain `{domain}`")));
            }
            if let Some(t) = t {
                spec = spec.with_drop_prob(t);
            }
            if let Some(b) = b {
                spec = spec.with_block(b);
            }
            if let Some(band) = band {
                spec = spec.with_band(band[0], band[1]);
            }
            let img = load_image(&input)?;
            let red = redact(&img, &spec, &mut make_rng(seed))?;
            save_image(&red.clamped(), &output)?;
        }
        Command::Ablate { config, seeds, out, quiet } => {
            let cfg = load(&config, out)?;
            let seeds = experiment_seeds(&cfg, seeds.unwrap_or(cfg.experiment.seeds));
            let report = ablate_redaction(&cfg, &seeds, &cfg.out_dir, None, !quiet)?;
            print!("{}", report.to_markdown());
        }
        Command::SweepBands { config, centers, seeds, out, quiet } => {
            let cfg = load(&config, out)?;
            let seeds = experiment_seeds(&cfg, seeds.unwrap_or(cfg.experiment.seeds));
            let sweep = band_sweep(&cfg, &parse_list(&centers)?, &seeds, &cfg.out_dir, None, !quiet)?;
            print!("{}", sweep.report);
            println!("plot: {}", sweep.plot.display());
        }
        Command::SaScale { config, dims, seeds, out, quiet } => {
            let cfg = load(&config, out)?;
            let seeds = experiment_seeds(&cfg, seeds.unwrap_or(cfg.experiment.seeds));
            let rows = sa_scaling(&cfg, &parse_list(&dims)?, &seeds, &cfg.out_dir, None, !quiet)?;
            print!("{}", scaling_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
