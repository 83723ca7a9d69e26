//! Top margin: gap between the most and second-most probable answer option.

use serde::{Deserialize, Serialize};

use super::{argmax_first, is_correct, option_scores, MetricsError, Normalization};
use crate::ingest::{ModelRun, PairedRun, RecordKind, SampleRecord};
use crate::sum::mean;

/// Softmax over the (optionally length-normalized) option log-scores.
pub fn option_probabilities(
    record: &SampleRecord,
    normalization: Normalization,
) -> Result<Vec<f64>, MetricsError> {
    let scores = option_scores(record, normalization)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total = crate::sum::sum(weights.iter().copied());
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// `p(best) - p(second best)` over answer options, in `[0, 1]`.
pub fn top_margin(
    record: &SampleRecord,
    normalization: Normalization,
) -> Result<f64, MetricsError> {
    let probs = option_probabilities(record, normalization)?;
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    Ok((first - second).clamp(0.0, 1.0))
}

/// Mean top margin over MCQ records the model got right, and over those it got wrong.
pub fn mean_margin_by_verdict(
    run: &ModelRun,
    normalization: Normalization,
) -> Result<(Option<f64>, Option<f64>), MetricsError> {
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for rec in run
        .iter()
        .filter(|r| r.kind() == RecordKind::MultipleChoice)
    {
        let m = top_margin(rec, normalization)?;
        if is_correct(rec, normalization)? {
            correct.push(m);
        } else {
            incorrect.push(m);
        }
    }
    Ok((mean(correct), mean(incorrect)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarginBin {
    /// Candidate picked a different option than the baseline.
    pub count_changed: usize,
    pub count_unchanged: usize,
    /// Baseline verdict.
    pub count_correct: usize,
    pub count_incorrect: usize,
}

impl MarginBin {
    pub fn total(&self) -> usize {
        self.count_changed + self.count_unchanged
    }

    pub fn change_rate(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.count_changed as f64 / n as f64)
    }

    pub fn incorrect_rate(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| self.count_incorrect as f64 / n as f64)
    }
}

/// Paired samples binned by baseline top margin.
///
/// Bin `i` covers `[edges[i], edges[i+1])`; the last bin also includes its
/// upper edge. Margins outside `[edges[0], edges[last]]` are counted in
/// `uncovered`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginBins {
    pub bin_edges: Vec<f64>,
    pub bins: Vec<MarginBin>,
    pub uncovered: usize,
}

impl MarginBins {
    pub fn new(bin_edges: Vec<f64>) -> Result<Self, MetricsError> {
        let ok = bin_edges.len() >= 2
            && bin_edges.iter().all(|e| (0.0..=1.0).contains(e))
            && bin_edges.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(MetricsError::BadBins);
        }
        let bins = vec![MarginBin::default(); bin_edges.len() - 1];
        Ok(Self {
            bin_edges,
            bins,
            uncovered: 0,
        })
    }

    pub fn bin_of(&self, margin: f64) -> Option<usize> {
        let edges = &self.bin_edges;
        let last = edges.len() - 1;
        if margin < edges[0] || margin > edges[last] || margin.is_nan() {
            return None;
        }
        // First edge strictly greater than the margin closes the bin.
        let idx = edges.partition_point(|&e| e <= margin);
        Some(idx.saturating_sub(1).min(last - 1))
    }

    pub fn totals(&self) -> MarginBin {
        self.bins
            .iter()
            .fold(MarginBin::default(), |acc, b| MarginBin {
                count_changed: acc.count_changed + b.count_changed,
                count_unchanged: acc.count_unchanged + b.count_unchanged,
                count_correct: acc.count_correct + b.count_correct,
                count_incorrect: acc.count_incorrect + b.count_incorrect,
            })
    }
}

/// Bins every paired MCQ sample by its baseline top margin and tallies answer
/// changes and baseline correctness per bin.
pub fn margin_conditioned_change(
    paired: &PairedRun,
    bin_edges: &[f64],
    normalization: Normalization,
) -> Result<MarginBins, MetricsError> {
    let mut out = MarginBins::new(bin_edges.to_vec())?;
    for (b, c) in paired.pairs() {
        let margin = top_margin(b, normalization)?;
        let Some(i) = out.bin_of(margin) else {
            out.uncovered += 1;
            continue;
        };
        let base_choice = argmax_first(&option_scores(b, normalization)?);
        let cand_choice = argmax_first(&option_scores(c, normalization)?);
        let bin = &mut out.bins[i];
        if base_choice == cand_choice {
            bin.count_unchanged += 1;
        } else {
            bin.count_changed += 1;
        }
        if Some(base_choice) == b.gold_index {
            bin.count_correct += 1;
        } else {
            bin.count_incorrect += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::fixtures::*;
    use crate::metrics::transitions;

    #[test]
    fn margin_of_direct_probabilities() {
        let probs = [0.7f64, 0.2, 0.07, 0.03];
        let logs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let r = mcq("q", 0, &logs);
        assert!((top_margin(&r, Normalization::None).unwrap() - 0.5).abs() < 1e-12);
        let tie = mcq("q", 0, &[-1.0, -1.0]);
        assert_eq!(top_margin(&tie, Normalization::None).unwrap(), 0.0);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let r = mcq("q", 0, &[-800.0, -801.0, -805.0]);
        let p = option_probabilities(&r, Normalization::None).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn bad_bins() {
        assert_eq!(MarginBins::new(vec![0.5]), Err(MetricsError::BadBins));
        assert_eq!(
            MarginBins::new(vec![0.0, 0.5, 0.5]),
            Err(MetricsError::BadBins)
        );
        assert_eq!(MarginBins::new(vec![0.0, 1.5]), Err(MetricsError::BadBins));
        assert_eq!(MarginBins::new(vec![0.6, 0.2]), Err(MetricsError::BadBins));
    }

    #[test]
    fn bin_lookup_boundaries() {
        let b = MarginBins::new(vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(b.bin_of(0.0), Some(0));
        assert_eq!(b.bin_of(0.4999), Some(0));
        assert_eq!(b.bin_of(0.5), Some(1));
        assert_eq!(b.bin_of(1.0), Some(1));
        let partial = MarginBins::new(vec![0.2, 0.4]).unwrap();
        assert_eq!(partial.bin_of(0.1), None);
        assert_eq!(partial.bin_of(0.4), Some(0));
    }

    #[test]
    fn single_bin_matches_transitions() {
        let p = four_pairs();
        let bins = margin_conditioned_change(&p, &[0.0, 1.0], Normalization::None).unwrap();
        let t = transitions(&p, Normalization::None).unwrap();
        let tot = bins.totals();
        assert_eq!(tot.count_changed, t.ci + t.ic + t.ii_diff);
        assert_eq!(tot.count_unchanged, t.cc + t.ii_same);
        assert_eq!(tot.count_correct, t.cc + t.ci);
        assert_eq!(tot.count_incorrect, t.ic + t.ii_same + t.ii_diff);
        assert_eq!(bins.uncovered, 0);
    }

    #[test]
    fn high_margins_leave_lower_bin_empty() {
        // p = (0.95, 0.05) => margin 0.9
        let recs: Vec<_> = (0..5)
            .map(|i| mcq(&format!("s{i}"), 0, &[0.95f64.ln(), 0.05f64.ln()]))
            .collect();
        let p = paired(recs.clone(), recs);
        let bins = margin_conditioned_change(&p, &[0.0, 0.5, 1.0], Normalization::None).unwrap();
        assert_eq!(bins.bins[0].total(), 0);
        assert_eq!(bins.bins[1].total(), 5);
        assert_eq!(bins.bins[0].change_rate(), None);
    }

    #[test]
    fn margins_by_verdict() {
        let r = run(
            "b",
            vec![
                mcq("a", 0, &[0.9f64.ln(), 0.1f64.ln()]),
                mcq("b", 1, &[0.6f64.ln(), 0.4f64.ln()]),
            ],
        );
        let (c, i) = mean_margin_by_verdict(&r, Normalization::None).unwrap();
        assert!((c.unwrap() - 0.8).abs() < 1e-12);
        assert!((i.unwrap() - 0.2).abs() < 1e-12);
    }
}
