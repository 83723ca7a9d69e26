use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{
    kl_divergence_at, observed_top_k, transitions, MetricsError, Normalization, TransitionMatrix,
};
use crate::ingest::{PairedRun, RecordKind};

/// Column order of `metrics.csv`.
pub const METRICS_CSV_COLUMNS: [&str; 14] = [
    "task_id",
    "model_baseline",
    "model_candidate",
    "config_label",
    "n_pairs",
    "acc_base",
    "acc_cand",
    "delta_acc",
    "flips_pct",
    "allflips_pct",
    "kl_div",
    "kl_top_k",
    "chg_correct_pct",
    "chg_incorrect_pct",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompareOptions {
    pub normalization: Normalization,
    /// Compute KL divergence (needs stored distributions).
    pub kl: bool,
    /// Truncate distributions to this many entries before computing KL.
    pub kl_top_k: Option<usize>,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            normalization: Normalization::None,
            kl: false,
            kl_top_k: None,
        }
    }
}

/// Capability and distance metrics for one baseline/candidate pair.
///
/// Accuracies are fractions; `delta_acc` and every `*_pct` field are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_id: String,
    pub model_baseline: String,
    pub model_candidate: String,
    pub config_label: String,
    pub n_pairs: usize,
    pub accuracy_baseline: f64,
    pub accuracy_candidate: f64,
    /// Candidate minus baseline accuracy, in percentage points.
    pub delta_acc: f64,
    pub flips_pct: f64,
    pub allflips_pct: f64,
    pub kl_div: Option<f64>,
    pub kl_top_k: Option<usize>,
    pub changed_given_correct_pct: Option<f64>,
    pub changed_given_incorrect_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transitions: Option<TransitionMatrix>,
}

impl MetricReport {
    /// Builds the transition-derived fields from a matrix.
    pub fn from_transitions(
        paired: &PairedRun,
        m: TransitionMatrix,
        normalization: Normalization,
    ) -> Self {
        let all_mcq = paired
            .pairs()
            .all(|(b, _)| b.kind() == RecordKind::MultipleChoice);
        Self {
            task_id: paired.task_id().to_string(),
            model_baseline: paired.baseline.model_id().to_string(),
            model_candidate: paired.candidate.model_id().to_string(),
            config_label: paired.candidate.config_label().to_string(),
            n_pairs: m.n_pairs,
            accuracy_baseline: m.accuracy_baseline(),
            accuracy_candidate: m.accuracy_candidate(),
            delta_acc: m.delta_accuracy_pp(),
            flips_pct: m.flips_pct(),
            allflips_pct: m.allflips_pct(),
            kl_div: None,
            kl_top_k: None,
            changed_given_correct_pct: all_mcq.then(|| m.changed_given_correct_pct()).flatten(),
            changed_given_incorrect_pct: all_mcq.then(|| m.changed_given_incorrect_pct()).flatten(),
            normalization: Some(normalization),
            transitions: Some(m),
        }
    }

    fn csv_record(&self) -> [String; 14] {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        [
            self.task_id.clone(),
            self.model_baseline.clone(),
            self.model_candidate.clone(),
            self.config_label.clone(),
            self.n_pairs.to_string(),
            self.accuracy_baseline.to_string(),
            self.accuracy_candidate.to_string(),
            self.delta_acc.to_string(),
            self.flips_pct.to_string(),
            self.allflips_pct.to_string(),
            opt(self.kl_div),
            opt(self.kl_top_k),
            opt(self.changed_given_correct_pct),
            opt(self.changed_given_incorrect_pct),
        ]
    }
}

/// Computes every metric for a paired run.
pub fn compare(paired: &PairedRun, options: &CompareOptions) -> Result<MetricReport, MetricsError> {
    let m = transitions(paired, options.normalization)?;
    let mut report = MetricReport::from_transitions(paired, m, options.normalization);
    if options.kl {
        report.kl_div = Some(kl_divergence_at(paired, options.kl_top_k)?);
        let observed = observed_top_k(paired);
        report.kl_top_k = match (options.kl_top_k, observed) {
            (Some(k), Some(o)) => Some(k.min(o)),
            (k, o) => k.or(o),
        };
    }
    Ok(report)
}

pub fn write_metrics_csv<'a>(
    reports: impl IntoIterator<Item = &'a MetricReport>,
    out: impl Write,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_CSV_COLUMNS)?;
    for r in reports {
        w.write_record(r.csv_record())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct CsvRow {
    task_id: String,
    model_baseline: String,
    model_candidate: String,
    config_label: String,
    n_pairs: usize,
    acc_base: f64,
    acc_cand: f64,
    delta_acc: f64,
    flips_pct: f64,
    allflips_pct: f64,
    kl_div: Option<f64>,
    kl_top_k: Option<usize>,
    chg_correct_pct: Option<f64>,
    chg_incorrect_pct: Option<f64>,
}

/// Reads `metrics.csv` rows back into reports (transition counts are not stored in CSV).
pub fn read_metrics_csv(input: impl Read) -> csv::Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(MetricReport {
                task_id: row.task_id,
                model_baseline: row.model_baseline,
                model_candidate: row.model_candidate,
                config_label: row.config_label,
                n_pairs: row.n_pairs,
                accuracy_baseline: row.acc_base,
                accuracy_candidate: row.acc_cand,
                delta_acc: row.delta_acc,
                flips_pct: row.flips_pct,
                allflips_pct: row.allflips_pct,
                kl_div: row.kl_div,
                kl_top_k: row.kl_top_k,
                changed_given_correct_pct: row.chg_correct_pct,
                changed_given_incorrect_pct: row.chg_incorrect_pct,
                normalization: None,
                transitions: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::fixtures::*;

    #[test]
    fn compare_four_pairs() {
        let r = compare(&four_pairs(), &CompareOptions::default()).unwrap();
        assert_eq!(r.n_pairs, 4);
        assert_eq!(r.flips_pct, 50.0);
        assert_eq!(r.allflips_pct, 75.0);
        assert_eq!(r.accuracy_baseline, 0.5);
        assert_eq!(r.accuracy_candidate, 0.5);
        assert_eq!(r.delta_acc, 0.0);
        assert_eq!(r.changed_given_correct_pct, Some(50.0));
        assert_eq!(r.changed_given_incorrect_pct, Some(100.0));
        assert_eq!(r.kl_div, None);
    }

    #[test]
    fn compare_with_kl_reports_k() {
        let base = vec![mcq_with_dist("a", 0, &[0.5, 0.5])];
        let cand = vec![mcq_with_dist("a", 0, &[0.25, 0.75])];
        let p = paired(base, cand);
        let opts = CompareOptions {
            kl: true,
            ..Default::default()
        };
        let r = compare(&p, &opts).unwrap();
        assert!((r.kl_div.unwrap() - 0.143841).abs() < 1e-6);
        assert_eq!(r.kl_top_k, Some(2));

        let opts = CompareOptions {
            kl: true,
            kl_top_k: Some(1),
            ..Default::default()
        };
        let r1 = compare(&p, &opts).unwrap();
        assert_eq!(r1.kl_top_k, Some(1));
        assert!(r1.kl_div.unwrap() <= r.kl_div.unwrap());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let r = compare(&four_pairs(), &CompareOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv([&r], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_CSV_COLUMNS.join(","));
        assert_eq!(lines.count(), 1);
        let back = read_metrics_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].flips_pct, r.flips_pct);
        assert_eq!(back[0].kl_div, None);
        assert_eq!(back[0].changed_given_incorrect_pct, Some(100.0));
    }
}
