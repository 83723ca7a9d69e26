//! Markdown and CSV rendering of metric reports, correlations and experiment tables.
//!
//! Rendering ignores `generated_at`, so a bundle renders to the same bytes
//! wherever and whenever it is rendered.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::{read_metrics_csv, write_metrics_csv, MetricReport};
use crate::noiselab::{
    read_flips_csv, read_noise_csv, write_flips_csv, write_noise_csv, NoiseRow, SimulationOutcome,
};
use crate::stats::{read_correlations_csv, write_correlations_csv, CorrelationRow};

pub const METRICS_CSV: &str = "metrics.csv";
pub const CORRELATIONS_CSV: &str = "correlations.csv";
pub const SCATTER_CSV: &str = "scatter_flips_kl.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("bundle has no sections")]
    EmptyBundle,
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

/// A noiselab result table.
#[derive(Debug, Clone, PartialEq)]
pub enum ExperimentTable {
    Flips(Vec<SimulationOutcome>),
    Noise(Vec<NoiseRow>),
}

impl ExperimentTable {
    /// Suffix of the `noiselab_<name>.csv` file.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Flips(_) => "flips",
            Self::Noise(_) => "noise",
        }
    }

    pub fn file_name(&self) -> String {
        format!("noiselab_{}.csv", self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub metric_reports: Vec<MetricReport>,
    pub correlation_rows: Option<Vec<CorrelationRow>>,
    pub experiment_tables: Option<Vec<ExperimentTable>>,
    pub generated_at: String,
    pub tool_version: String,
}

fn finite(label: &str, values: impl IntoIterator<Item = f64>) -> Result<(), ReportError> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(ReportError::NonFinite(label.to_string()))
    }
}

impl ReportBundle {
    pub fn new(
        metric_reports: Vec<MetricReport>,
        correlation_rows: Option<Vec<CorrelationRow>>,
        experiment_tables: Option<Vec<ExperimentTable>>,
        generated_at: impl Into<String>,
    ) -> Result<Self, ReportError> {
        let bundle = Self {
            metric_reports,
            correlation_rows,
            experiment_tables,
            generated_at: generated_at.into(),
            tool_version: crate::TOOL_VERSION.to_string(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let has_corr = self
            .correlation_rows
            .as_ref()
            .is_some_and(|r| !r.is_empty());
        let has_exp = self
            .experiment_tables
            .as_ref()
            .is_some_and(|t| !t.is_empty());
        if self.metric_reports.is_empty() && !has_corr && !has_exp {
            return Err(ReportError::EmptyBundle);
        }
        for r in &self.metric_reports {
            finite(
                "metric report",
                [
                    r.accuracy_baseline,
                    r.accuracy_candidate,
                    r.delta_acc,
                    r.flips_pct,
                    r.allflips_pct,
                ]
                .into_iter()
                .chain(r.kl_div)
                .chain(r.changed_given_correct_pct)
                .chain(r.changed_given_incorrect_pct),
            )?;
        }
        for r in self.correlation_rows.iter().flatten() {
            finite("correlation row", r.spearman_flips_kl)?;
        }
        for t in self.experiment_tables.iter().flatten() {
            match t {
                ExperimentTable::Flips(rows) => {
                    for o in rows {
                        finite(
                            "flips table",
                            [o.sigma, o.flips_pct, o.kl_div, o.delta_accuracy],
                        )?;
                    }
                }
                ExperimentTable::Noise(rows) => {
                    for o in rows {
                        finite(
                            "noise table",
                            [o.sigma, o.perplexity, o.pct_greedy_match, o.kl_div],
                        )?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Loads whatever section files exist in `dir`.
    pub fn load_dir(
        dir: impl AsRef<Path>,
        generated_at: impl Into<String>,
    ) -> Result<Self, ReportError> {
        let dir = dir.as_ref();
        fn open(path: &Path) -> Result<Option<File>, ReportError> {
            match File::open(path) {
                Ok(f) => Ok(Some(f)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
                Err(source) => Err(ReportError::Io {
                    path: path.display().to_string(),
                    source,
                }),
            }
        }
        fn load<T>(
            path: &Path,
            read: impl FnOnce(File) -> csv::Result<T>,
        ) -> Result<Option<T>, ReportError> {
            open(path)?
                .map(read)
                .transpose()
                .map_err(|source| ReportError::Csv {
                    path: path.display().to_string(),
                    source,
                })
        }

        let metric_reports = load(&dir.join(METRICS_CSV), read_metrics_csv)?.unwrap_or_default();
        let correlation_rows = load(&dir.join(CORRELATIONS_CSV), read_correlations_csv)?;
        let mut tables = Vec::new();
        if let Some(rows) = load(&dir.join("noiselab_flips.csv"), read_flips_csv)? {
            tables.push(ExperimentTable::Flips(rows));
        }
        if let Some(rows) = load(&dir.join("noiselab_noise.csv"), read_noise_csv)? {
            tables.push(ExperimentTable::Noise(rows));
        }
        Self::new(
            metric_reports,
            correlation_rows,
            (!tables.is_empty()).then_some(tables),
            generated_at,
        )
    }
}

/// Two decimals, ties to even, without a negative zero.
pub fn fmt2(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn fmt2_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), fmt2)
}

/// The `Δacc / flips` cell used throughout the tables.
pub fn delta_flips_cell(delta_acc: f64, flips_pct: f64) -> String {
    format!("{} / {}", fmt2(delta_acc), fmt2(flips_pct))
}

fn table(out: &mut String, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out.push('\n');
}

pub fn render_markdown(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# modeldiff report\n\ntool version {}\n",
        bundle.tool_version
    );

    if !bundle.metric_reports.is_empty() {
        out.push_str("## Baseline vs candidate\n\n");
        out.push_str(
            "Accuracies in %. Δacc / flips in percentage points / % of samples. \
             Change rates are % of baseline-correct / baseline-incorrect answers that changed.\n\n",
        );
        table(
            &mut out,
            &[
                "task",
                "baseline",
                "candidate",
                "config",
                "n",
                "acc base",
                "acc cand",
                "Δacc / flips",
                "all-flips",
                "KL",
                "K",
                "chg correct / incorrect",
            ],
            bundle.metric_reports.iter().map(|r| {
                vec![
                    r.task_id.clone(),
                    r.model_baseline.clone(),
                    r.model_candidate.clone(),
                    r.config_label.clone(),
                    r.n_pairs.to_string(),
                    fmt2(100.0 * r.accuracy_baseline),
                    fmt2(100.0 * r.accuracy_candidate),
                    delta_flips_cell(r.delta_acc, r.flips_pct),
                    fmt2(r.allflips_pct),
                    fmt2_opt(r.kl_div),
                    r.kl_top_k.map_or_else(|| "n/a".into(), |k| k.to_string()),
                    format!(
                        "{} / {}",
                        fmt2_opt(r.changed_given_correct_pct),
                        fmt2_opt(r.changed_given_incorrect_pct)
                    ),
                ]
            }),
        );
    }

    if let Some(rows) = bundle.correlation_rows.as_ref().filter(|r| !r.is_empty()) {
        out.push_str("## Flips vs KL rank correlation\n\n");
        table(
            &mut out,
            &["group", "points", "spearman"],
            rows.iter().map(|r| {
                vec![
                    r.group.clone(),
                    r.n_points.to_string(),
                    fmt2_opt(r.spearman_flips_kl),
                ]
            }),
        );
    }

    for t in bundle.experiment_tables.iter().flatten() {
        match t {
            ExperimentTable::Flips(rows) => {
                out.push_str("## Noiselab: flip balance\n\n");
                table(
                    &mut out,
                    &[
                        "σ",
                        "seed",
                        "Δacc / flips",
                        "all-flips",
                        "ci",
                        "ic",
                        "chg correct / incorrect",
                        "landed correct",
                        "KL",
                    ],
                    rows.iter().map(|o| {
                        vec![
                            fmt2(o.sigma),
                            o.seed.to_string(),
                            delta_flips_cell(o.delta_accuracy, o.flips_pct),
                            fmt2(o.allflips_pct),
                            o.transitions.ci.to_string(),
                            o.transitions.ic.to_string(),
                            format!(
                                "{} / {}",
                                fmt2_opt(o.changed_given_correct_pct),
                                fmt2_opt(o.changed_given_incorrect_pct)
                            ),
                            fmt2_opt(o.landed_correct_pct),
                            fmt2(o.kl_div),
                        ]
                    }),
                );
            }
            ExperimentTable::Noise(rows) => {
                out.push_str("## Noiselab: perplexity under noise\n\n");
                table(
                    &mut out,
                    &["σ", "perplexity", "% greedy match", "KL"],
                    rows.iter().map(|r| {
                        vec![
                            fmt2(r.sigma),
                            fmt2(r.perplexity),
                            fmt2(r.pct_greedy_match),
                            fmt2(r.kl_div),
                        ]
                    }),
                );
            }
        }
    }
    out
}

fn create(path: &Path) -> Result<BufWriter<File>, ReportError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// Writes one CSV per non-empty section into `dir` and returns the paths written.
pub fn render_csv(
    bundle: &ReportBundle,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, ReportError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();

    if !bundle.metric_reports.is_empty() {
        let path = dir.join(METRICS_CSV);
        write_metrics_csv(&bundle.metric_reports, create(&path)?).map_err(csv_err(&path))?;
        written.push(path);

        let points: Vec<&MetricReport> = bundle
            .metric_reports
            .iter()
            .filter(|r| r.kl_div.is_some())
            .collect();
        if !points.is_empty() {
            let path = dir.join(SCATTER_CSV);
            let mut w = csv::Writer::from_writer(create(&path)?);
            let rows = std::iter::once(["flips_pct".to_string(), "kl_div".to_string()]).chain(
                points.iter().map(|r| {
                    [
                        r.flips_pct.to_string(),
                        r.kl_div.unwrap_or_default().to_string(),
                    ]
                }),
            );
            for row in rows {
                w.write_record(row).map_err(csv_err(&path))?;
            }
            w.flush().map_err(|source| ReportError::Io {
                path: path.display().to_string(),
                source,
            })?;
            written.push(path);
        }
    }
    if let Some(rows) = &bundle.correlation_rows {
        let path = dir.join(CORRELATIONS_CSV);
        write_correlations_csv(rows, create(&path)?).map_err(csv_err(&path))?;
        written.push(path);
    }
    for t in bundle.experiment_tables.iter().flatten() {
        let path = dir.join(t.file_name());
        match t {
            ExperimentTable::Flips(rows) => write_flips_csv(rows, create(&path)?),
            ExperimentTable::Noise(rows) => write_noise_csv(rows, create(&path)?),
        }
        .map_err(csv_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
