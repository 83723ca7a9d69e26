//! Argument handling for the `modeldiff` binary.
//!
//! [`run`] takes the full argv and returns the process exit code:
//! 0 on success, 1 when an input fails validation or a command fails,
//! 2 on a usage error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use modeldiff::metrics::{compare, read_metrics_csv, write_metrics_csv};
use modeldiff::noiselab::{
    flip_balance_experiment, perplexity_invariance_experiment, write_flips_csv, write_noise_csv,
};
use modeldiff::report::{
    render_csv, render_markdown, ExperimentTable, CORRELATIONS_CSV, METRICS_CSV,
};
use modeldiff::stats::{correlate_flips_kl, write_correlations_csv, GroupField};
use modeldiff::{
    pair_runs, parse_run, validate, CompareOptions, NoiseLabConfig, Normalization, ReportBundle,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Caps the worker pool when set to a positive integer.
pub const THREADS_ENV: &str = "MODELDIFF_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "modeldiff",
    version,
    about = "Behavioral distance between a baseline model and a compressed variant"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a run file and print a summary.
    Validate { run: PathBuf },
    /// Pair two runs and write metrics.csv.
    Compare(CompareArgs),
    /// Spearman correlation of flips and KL per group; writes correlations.csv.
    Correlate(CorrelateArgs),
    /// Noise simulations.
    Simulate {
        #[command(subcommand)]
        experiment: Experiment,
    },
    /// Render the CSVs in a directory as markdown.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub candidate: PathBuf,
    /// Option score normalization: none or byte_length.
    #[arg(long, default_value = "none")]
    pub norm: Normalization,
    /// Fail on any structural mismatch instead of dropping the sample.
    #[arg(long)]
    pub strict: bool,
    /// Also compute KL divergence (needs stored distributions).
    #[arg(long)]
    pub kl: bool,
    /// Truncate distributions to K entries before computing KL.
    #[arg(long, value_name = "K", requires = "kl")]
    pub kl_top_k: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// One or more metrics.csv files.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub metrics: Vec<PathBuf>,
    /// Comma-separated grouping fields, or `all` for a single group.
    #[arg(long, default_value = "task_id")]
    pub group_by: String,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Noise standard deviations, comma-separated.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',', allow_negative_numbers = true)]
    pub sweep: Vec<f64>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Experiment {
    /// Answer flips under Gaussian option-logit noise; writes noiselab_flips.csv.
    Flips {
        #[command(flatten)]
        sim: SimArgs,
        /// Repeat with this many consecutive seeds starting at the config seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Perplexity, greedy agreement and KL under log-likelihood noise; writes noiselab_noise.csv.
    Noise {
        #[command(flatten)]
        sim: SimArgs,
    },
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding metrics.csv, correlations.csv and/or noiselab_*.csv.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Write markdown here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the CSV view (including scatter_flips_kl.csv) into this directory.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
    /// Timestamp recorded in the bundle; not part of the rendered output.
    #[arg(long, default_value = "unspecified")]
    pub generated_at: String,
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    // A pool may already exist when run() is called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Validate { run } => {
            let report = validate(&run);
            print!("{}: {report}", run.display());
            Ok(if report.is_valid() {
                EXIT_OK
            } else {
                EXIT_FAILURE
            })
        }
        Command::Compare(args) => cmd_compare(args),
        Command::Correlate(args) => cmd_correlate(args),
        Command::Simulate { experiment } => cmd_simulate(experiment),
        Command::Report(args) => cmd_report(args),
    }
}

fn create_out(dir: &Path, name: &str) -> Result<fs::File> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::File::create(&path).with_context(|| format!("creating {}", path.display()))
}

fn print_markdown(bundle: &ReportBundle) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(render_markdown(bundle).as_bytes())?;
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<i32> {
    let base = parse_run(&args.baseline)?;
    let cand = parse_run(&args.candidate)?;
    let paired = pair_runs(base, cand, args.strict)?;
    if !paired.drops.is_empty() {
        eprintln!(
            "dropped {} samples:\n{}",
            paired.drops.total(),
            paired.drops
        );
    }
    let options = CompareOptions {
        normalization: args.norm,
        kl: args.kl,
        kl_top_k: args.kl_top_k,
    };
    let report = compare(&paired, &options)?;
    write_metrics_csv(
        std::slice::from_ref(&report),
        create_out(&args.out, METRICS_CSV)?,
    )?;
    print_markdown(&ReportBundle::new(vec![report], None, None, "unspecified")?)?;
    Ok(EXIT_OK)
}

fn parse_group_by(fields: &str) -> Result<Vec<GroupField>> {
    if fields == "all" {
        return Ok(Vec::new());
    }
    fields.split(',')
        .map(|s| s.trim().parse::<GroupField>().map_err(anyhow::Error::msg))
        .collect()
}

fn cmd_correlate(args: CorrelateArgs) -> Result<i32> {
    let group_by = parse_group_by(&args.group_by)?;
    let mut reports = Vec::new();
    for path in &args.metrics {
        let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        reports
            .extend(read_metrics_csv(file).with_context(|| format!("reading {}", path.display()))?);
    }
    if reports.is_empty() {
        bail!("no metric rows in input");
    }
    let rows = correlate_flips_kl(&reports, &group_by)?;
    write_correlations_csv(&rows, create_out(&args.out, CORRELATIONS_CSV)?)?;
    print_markdown(&ReportBundle::new(vec![], Some(rows), None, "unspecified")?)?;
    Ok(EXIT_OK)
}

fn load_config(sim: &SimArgs) -> Result<NoiseLabConfig> {
    let mut config = match &sim.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            NoiseLabConfig::from_json(&text).with_context(|| path.display().to_string())?
        }
        None => NoiseLabConfig::default(),
    };
    if let Some(seed) = sim.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn cmd_simulate(experiment: Experiment) -> Result<i32> {
    let table = match experiment {
        Experiment::Flips { sim, seeds } => {
            let config = load_config(&sim)?;
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let mut rows = Vec::new();
            for offset in 0..seeds {
                let cfg = NoiseLabConfig {
                    seed: config.seed.wrapping_add(offset),
                    ..config.clone()
                };
                rows.extend(flip_balance_experiment(&cfg, &sim.sweep)?);
            }
            write_flips_csv(&rows, create_out(&sim.out, "noiselab_flips.csv")?)?;
            ExperimentTable::Flips(rows)
        }
        Experiment::Noise { sim } => {
            let config = load_config(&sim)?;
            let rows = perplexity_invariance_experiment(&config, &sim.sweep)?;
            write_noise_csv(&rows, create_out(&sim.out, "noiselab_noise.csv")?)?;
            ExperimentTable::Noise(rows)
        }
    };
    print_markdown(&ReportBundle::new(
        vec![],
        None,
        Some(vec![table]),
        "unspecified",
    )?)?;
    Ok(EXIT_OK)
}

fn cmd_report(args: ReportArgs) -> Result<i32> {
    let bundle = ReportBundle::load_dir(&args.bundle, args.generated_at)?;
    if let Some(dir) = &args.csv_dir {
        render_csv(&bundle, dir)?;
    }
    match &args.out {
        Some(path) => fs::write(path, render_markdown(&bundle))
            .with_context(|| format!("writing {}", path.display()))?,
        None => print_markdown(&bundle)?,
    }
    Ok(EXIT_OK)
}
