//! Rank correlation and grouped aggregation of metric reports.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricReport;
use crate::sum::{mean, CompensatedSum};

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("series needs at least 2 points with equal-length labels, xs and ys (got {labels}/{xs}/{ys})")]
    BadLength { labels: usize, xs: usize, ys: usize },
    #[error("series contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("one side of the series is constant; rank correlation is undefined")]
    DegenerateSeries,
    #[error("no reports to aggregate")]
    Empty,
    #[error("group {group:?} mixes KL values computed at different top-K ({a:?} vs {b:?})")]
    MixedTopK {
        group: String,
        a: Option<usize>,
        b: Option<usize>,
    },
}

/// Labeled `(x, y)` points, e.g. one per compressed model.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSeries {
    labels: Vec<String>,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PairedSeries {
    pub fn new(labels: Vec<String>, xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, StatsError> {
        if labels.len() != xs.len() || xs.len() != ys.len() || xs.len() < 2 {
            return Err(StatsError::BadLength {
                labels: labels.len(),
                xs: xs.len(),
                ys: ys.len(),
            });
        }
        if let Some(i) = xs
            .iter()
            .zip(&ys)
            .position(|(x, y)| !x.is_finite() || !y.is_finite())
        {
            return Err(StatsError::NonFinite(i));
        }
        Ok(Self { labels, xs, ys })
    }

    /// Series with generated labels `0..n`.
    pub fn unlabeled(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, StatsError> {
        let labels = (0..xs.len()).map(|i| i.to_string()).collect();
        Self::new(labels, xs, ys)
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }
}

/// 1-based fractional ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let mx = mean(xs.iter().copied())?;
    let my = mean(ys.iter().copied())?;
    let (mut sxy, mut sxx, mut syy) = (
        CompensatedSum::new(),
        CompensatedSum::new(),
        CompensatedSum::new(),
    );
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy.add(dx * dy);
        sxx.add(dx * dx);
        syy.add(dy * dy);
    }
    let denom = (sxx.value() * syy.value()).sqrt();
    (denom > 0.0).then(|| (sxy.value() / denom).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(series: &PairedSeries) -> Result<f64, StatsError> {
    let rx = average_ranks(&series.xs);
    let ry = average_ranks(&series.ys);
    pearson(&rx, &ry).ok_or(StatsError::DegenerateSeries)
}

/// Report fields usable as grouping keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupField {
    TaskId,
    ModelBaseline,
    ModelCandidate,
    ConfigLabel,
}

impl GroupField {
    pub fn name(self) -> &'static str {
        match self {
            Self::TaskId => "task_id",
            Self::ModelBaseline => "model_baseline",
            Self::ModelCandidate => "model_candidate",
            Self::ConfigLabel => "config_label",
        }
    }

    fn value(self, r: &MetricReport) -> &str {
        match self {
            Self::TaskId => &r.task_id,
            Self::ModelBaseline => &r.model_baseline,
            Self::ModelCandidate => &r.model_candidate,
            Self::ConfigLabel => &r.config_label,
        }
    }
}

impl std::str::FromStr for GroupField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Self::TaskId,
            Self::ModelBaseline,
            Self::ModelCandidate,
            Self::ConfigLabel,
        ]
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| format!("unknown group field {s:?}"))
    }
}

/// Key for a report under `group_by`: field values joined with `/`, or `all`.
pub fn group_key(report: &MetricReport, group_by: &[GroupField]) -> String {
    if group_by.is_empty() {
        return "all".into();
    }
    group_by
        .iter()
        .map(|f| f.value(report))
        .collect::<Vec<_>>()
        .join("/")
}

/// Grouped arithmetic means of every numeric report column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub group: String,
    pub n_reports: usize,
    pub n_pairs: f64,
    pub acc_base: f64,
    pub acc_cand: f64,
    pub delta_acc: f64,
    pub flips_pct: f64,
    pub allflips_pct: f64,
    pub kl_div: Option<f64>,
    pub kl_top_k: Option<usize>,
    pub chg_correct_pct: Option<f64>,
    pub chg_incorrect_pct: Option<f64>,
}

/// Means per group, groups in lexicographic key order. Optional columns
/// average the reports that have a value and stay absent if none do.
pub fn aggregate_reports(
    reports: &[MetricReport],
    group_by: &[GroupField],
) -> Result<Vec<AggregateRow>, StatsError> {
    if reports.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut groups: BTreeMap<String, Vec<&MetricReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(group_key(r, group_by)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(group, rs)| {
            let with_kl: Vec<&&MetricReport> = rs.iter().filter(|r| r.kl_div.is_some()).collect();
            let kl_top_k = with_kl.first().and_then(|r| r.kl_top_k);
            if let Some(other) = with_kl.iter().find(|r| r.kl_top_k != kl_top_k) {
                return Err(StatsError::MixedTopK {
                    group,
                    a: kl_top_k,
                    b: other.kl_top_k,
                });
            }
            let col = |f: fn(&MetricReport) -> f64| mean(rs.iter().map(|r| f(r))).unwrap_or(0.0);
            let opt_col =
                |f: fn(&MetricReport) -> Option<f64>| mean(rs.iter().filter_map(|r| f(r)));
            Ok(AggregateRow {
                n_reports: rs.len(),
                n_pairs: col(|r| r.n_pairs as f64),
                acc_base: col(|r| r.accuracy_baseline),
                acc_cand: col(|r| r.accuracy_candidate),
                delta_acc: col(|r| r.delta_acc),
                flips_pct: col(|r| r.flips_pct),
                allflips_pct: col(|r| r.allflips_pct),
                kl_div: opt_col(|r| r.kl_div),
                kl_top_k,
                chg_correct_pct: opt_col(|r| r.changed_given_correct_pct),
                chg_incorrect_pct: opt_col(|r| r.changed_given_incorrect_pct),
                group,
            })
        })
        .collect()
}

/// One line of `correlations.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub group: String,
    pub n_points: usize,
    pub spearman_flips_kl: Option<f64>,
}

/// Spearman correlation between flips and KL within each group. Reports
/// without KL are skipped; groups with fewer than two usable points or a
/// constant side get an absent coefficient.
pub fn correlate_flips_kl(
    reports: &[MetricReport],
    group_by: &[GroupField],
) -> Result<Vec<CorrelationRow>, StatsError> {
    let mut groups: BTreeMap<String, Vec<&MetricReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(group_key(r, group_by)).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for (group, rs) in groups {
        let usable: Vec<&MetricReport> = rs.into_iter().filter(|r| r.kl_div.is_some()).collect();
        if let Some(k) = usable.first().map(|r| r.kl_top_k) {
            if let Some(other) = usable.iter().find(|r| r.kl_top_k != k) {
                return Err(StatsError::MixedTopK {
                    group,
                    a: k,
                    b: other.kl_top_k,
                });
            }
        }
        let labels = usable
            .iter()
            .map(|r| format!("{}:{}", r.model_candidate, r.config_label))
            .collect();
        let xs = usable.iter().map(|r| r.flips_pct).collect();
        let ys = usable
            .iter()
            .map(|r| r.kl_div.unwrap_or_default())
            .collect();
        let rho = PairedSeries::new(labels, xs, ys)
            .ok()
            .and_then(|s| spearman(&s).ok());
        rows.push(CorrelationRow {
            group,
            n_points: usable.len(),
            spearman_flips_kl: rho,
        });
    }
    Ok(rows)
}

pub fn write_correlations_csv(rows: &[CorrelationRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["group", "n_points", "spearman_flips_kl"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_correlations_csv(input: impl Read) -> csv::Result<Vec<CorrelationRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(xs: &[f64], ys: &[f64]) -> PairedSeries {
        PairedSeries::unlabeled(xs.to_vec(), ys.to_vec()).unwrap()
    }

    /// Independent oracle: rank by counting smaller and equal values.
    fn brute_rank(values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .map(|&v| {
                let less = values.iter().filter(|&&w| w < v).count() as f64;
                let equal = values.iter().filter(|&&w| w == v).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    }

    fn brute_spearman(xs: &[f64], ys: &[f64]) -> f64 {
        let (rx, ry) = (brute_rank(xs), brute_rank(ys));
        let n = xs.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn perfect_and_reversed() {
        assert!(
            (spearman(&series(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0])).unwrap() - 1.0).abs() < 1e-15
        );
        assert!(
            (spearman(&series(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0])).unwrap() + 1.0).abs() < 1e-15
        );
    }

    #[test]
    fn ties_match_brute_force() {
        let (xs, ys) = ([1.0, 2.0, 2.0, 4.0], [10.0, 20.0, 30.0, 40.0]);
        assert_eq!(average_ranks(&xs), vec![1.0, 2.5, 2.5, 4.0]);
        let expected = brute_spearman(&xs, &ys);
        // ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4): cov 4.5, var 4.5 and 5.
        assert!((expected - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-15);
        assert!((spearman(&series(&xs, &ys)).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn degenerate_and_invalid_series() {
        assert_eq!(
            spearman(&series(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0])),
            Err(StatsError::DegenerateSeries)
        );
        assert!(matches!(
            PairedSeries::unlabeled(vec![1.0], vec![1.0]),
            Err(StatsError::BadLength { .. })
        ));
        assert_eq!(
            PairedSeries::unlabeled(vec![1.0, f64::NAN], vec![1.0, 2.0]),
            Err(StatsError::NonFinite(1))
        );
    }

    fn report(
        task: &str,
        cand: &str,
        flips: f64,
        kl: Option<f64>,
        k: Option<usize>,
    ) -> MetricReport {
        MetricReport {
            task_id: task.into(),
            model_baseline: "base".into(),
            model_candidate: cand.into(),
            config_label: "cfg".into(),
            n_pairs: 100,
            accuracy_baseline: 0.6,
            accuracy_candidate: 0.59,
            delta_acc: -1.0,
            flips_pct: flips,
            allflips_pct: flips + 1.0,
            kl_div: kl,
            kl_top_k: k,
            changed_given_correct_pct: Some(3.0),
            changed_given_incorrect_pct: None,
            normalization: None,
            transitions: None,
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = [report("mmlu", "a", 4.0, None, None)];
        let rows = aggregate_reports(&one, &[GroupField::TaskId]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].flips_pct, 4.0);
        assert_eq!(rows[0].group, "mmlu");

        let two_tasks = [
            report("piqa", "a", 4.0, None, None),
            report("mmlu", "a", 6.0, None, None),
        ];
        let rows = aggregate_reports(&two_tasks, &[GroupField::TaskId]).unwrap();
        assert_eq!(
            rows.iter().map(|r| r.group.as_str()).collect::<Vec<_>>(),
            ["mmlu", "piqa"]
        );

        let same = [
            report("mmlu", "a", 4.0, Some(0.1), Some(4)),
            report("mmlu", "b", 6.0, None, None),
        ];
        let rows = aggregate_reports(&same, &[GroupField::TaskId]).unwrap();
        assert_eq!(rows[0].flips_pct, 5.0);
        assert_eq!(rows[0].kl_div, Some(0.1));
        assert_eq!(rows[0].chg_incorrect_pct, None);

        assert_eq!(aggregate_reports(&[], &[]), Err(StatsError::Empty));
    }

    #[test]
    fn aggregate_refuses_mixed_k() {
        let rs = [
            report("mmlu", "a", 4.0, Some(0.1), Some(4)),
            report("mmlu", "b", 6.0, Some(0.2), Some(8)),
        ];
        assert!(matches!(
            aggregate_reports(&rs, &[GroupField::TaskId]),
            Err(StatsError::MixedTopK { .. })
        ));
        // Separate groups may use different K.
        assert!(aggregate_reports(&rs, &[GroupField::ModelCandidate]).is_ok());
    }

    #[test]
    fn correlation_rows() {
        let rs = [
            report("mmlu", "a", 4.0, Some(0.1), Some(4)),
            report("mmlu", "b", 6.0, Some(0.3), Some(4)),
            report("mmlu", "c", 9.0, Some(0.2), Some(4)),
            report("piqa", "a", 2.0, Some(0.1), Some(4)),
            report("piqa", "b", 3.0, None, None),
        ];
        let rows = correlate_flips_kl(&rs, &[GroupField::TaskId]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].n_points, 3);
        assert!((rows[0].spearman_flips_kl.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(rows[1].n_points, 1);
        assert_eq!(rows[1].spearman_flips_kl, None);

        let mut buf = Vec::new();
        write_correlations_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("group,n_points,spearman_flips_kl\n"));
        assert_eq!(read_correlations_csv(buf.as_slice()).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(pts in prop::collection::vec((-50i32..50, -50i32..50), 3..40)) {
            let xs: Vec<f64> = pts.iter().map(|p| p.0 as f64 / 4.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1 as f64 / 4.0).collect();
            let Ok(base) = spearman(&series(&xs, &ys)) else { return Ok(()); };
            let cubed: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
            prop_assert!((spearman(&series(&cubed, &ys)).unwrap() - base).abs() < 1e-12);
            prop_assert!((spearman(&series(&ys, &xs)).unwrap() - base).abs() < 1e-12);
            prop_assert!((brute_spearman(&xs, &ys) - base).abs() < 1e-12);
        }

        #[test]
        fn tie_free_closed_form(perm in Just((0..30).collect::<Vec<u32>>()).prop_shuffle()) {
            let n = perm.len() as f64;
            let xs: Vec<f64> = (0..perm.len()).map(|i| i as f64).collect();
            let ys: Vec<f64> = perm.iter().map(|&v| v as f64).collect();
            let d2: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - b).powi(2)).sum();
            let closed = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
            prop_assert!((spearman(&series(&xs, &ys)).unwrap() - closed).abs() < 1e-12);
        }
    }
}
