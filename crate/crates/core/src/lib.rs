//! Behavioral distance between a baseline language model and a compressed variant.
//!
//! The crate works on per-sample scoring records (one JSON object per line) and
//! provides:
//!
//! * [`ingest`]: parsing, validation and sample-by-sample pairing of run files.
//! * [`metrics`]: accuracy, perplexity, flips, all-flips, KL divergence, top margin.
//! * [`stats`]: Spearman rank correlation and grouped report aggregation.
//! * [`noiselab`]: seeded simulations of noise-induced answer flips and of
//!   perplexity under symmetric log-likelihood noise.
//! * [`report`]: markdown and CSV rendering.
//!
//! ```no_run
//! use modeldiff::{ingest, metrics};
//!
//! let base = ingest::parse_run("base.jsonl")?;
//! let cand = ingest::parse_run("w4a4.jsonl")?;
//! let paired = ingest::pair_runs(base, cand, true)?;
//! let report = metrics::compare(&paired, &metrics::CompareOptions::default())?;
//! println!("flips: {:.2}%", report.flips_pct);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod ingest;
pub mod metrics;
pub mod noiselab;
pub mod report;
pub mod stats;
pub mod sum;

pub use ingest::{
    pair_runs, parse_run, validate, IngestError, ModelRun, OptionScoring, PairedRun, RecordKind,
    RunHeader, SampleRecord, SparseDist, TokenScore, ValidationReport,
};
pub use metrics::{
    CompareOptions, MarginBins, MetricReport, MetricsError, Normalization, TransitionMatrix,
};
pub use noiselab::{NoiseLabConfig, NoiseLabError, NoiseTarget, SimulationOutcome};
pub use report::ReportBundle;
pub use stats::{spearman, PairedSeries, StatsError};

/// Version string embedded in generated reports.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
