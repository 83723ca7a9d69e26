//! Capability metrics (accuracy, perplexity) and distance metrics (flips,
//! all-flips, KL divergence, top margin) over runs and paired runs.

mod kl;
mod margin;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ModelRun, PairedRun, RecordKind, SampleRecord, LOGPROB_SLACK};
use crate::sum::{self, CompensatedSum};

pub use kl::{kl_divergence, kl_divergence_at, observed_top_k, token_kl};
pub use margin::{
    margin_conditioned_change, mean_margin_by_verdict, option_probabilities, top_margin, MarginBin,
    MarginBins,
};
pub use report::{
    compare, read_metrics_csv, write_metrics_csv, CompareOptions, MetricReport, METRICS_CSV_COLUMNS,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("sample {sample_id:?} is generative; operation needs a multiple-choice record")]
    GenerativeRecord { sample_id: String },
    #[error("run mixes multiple-choice and generative records")]
    MixedRecordKinds,
    #[error("run contains no records")]
    EmptyRun,
    #[error("empty log-likelihood sequence")]
    EmptySequence,
    #[error("log-likelihood {value} at position {position} is not a log-probability")]
    InvalidLogprob { position: usize, value: f64 },
    #[error(
        "sample {sample_id:?}: token distributions missing (run with dist payloads or drop --kl)"
    )]
    MissingDistributions { sample_id: String },
    #[error(
        "sample {sample_id:?} option {option} token {position}: baseline has mass outside the \
         candidate's support and the candidate tail is empty"
    )]
    DegenerateSupport {
        sample_id: String,
        option: usize,
        position: usize,
    },
    #[error("margin bin edges must be strictly ascending within [0, 1] with at least two edges")]
    BadBins,
}

/// How option log-scores are compared when picking an answer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Sum of token log-probabilities.
    #[default]
    None,
    /// Sum of token log-probabilities divided by the option's byte length.
    ByteLength,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::ByteLength => "byte_length",
        }
    }
}

impl std::str::FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "byte_length" => Ok(Self::ByteLength),
            other => Err(format!(
                "unknown normalization {other:?} (expected none|byte_length)"
            )),
        }
    }
}

fn require_mcq(record: &SampleRecord) -> Result<&[crate::ingest::OptionScoring], MetricsError> {
    match record.kind() {
        RecordKind::MultipleChoice => Ok(record.options()),
        RecordKind::Generative => Err(MetricsError::GenerativeRecord {
            sample_id: record.sample_id.clone(),
        }),
    }
}

/// Per-option scores indexed by `option_index`.
pub fn option_scores(
    record: &SampleRecord,
    normalization: Normalization,
) -> Result<Vec<f64>, MetricsError> {
    let options = require_mcq(record)?;
    let mut scores = vec![f64::NEG_INFINITY; options.len()];
    for opt in options {
        let total = sum::sum(opt.tokens.iter().map(|t| t.logprob));
        scores[opt.option_index] = match normalization {
            Normalization::None => total,
            // Empty option text cannot be length-normalized; treat it as one byte.
            Normalization::ByteLength => total / opt.byte_length.max(1) as f64,
        };
    }
    Ok(scores)
}

/// Index of the highest score, ties resolved toward the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// The option a model picks for an MCQ record.
pub fn select_answer(
    record: &SampleRecord,
    normalization: Normalization,
) -> Result<usize, MetricsError> {
    Ok(argmax_first(&option_scores(record, normalization)?))
}

/// Correctness verdict for one record.
pub fn is_correct(
    record: &SampleRecord,
    normalization: Normalization,
) -> Result<bool, MetricsError> {
    match record.kind() {
        RecordKind::MultipleChoice => {
            Ok(Some(select_answer(record, normalization)?) == record.gold_index)
        }
        RecordKind::Generative => Ok(record.answer_correct.unwrap_or(false)),
    }
}

/// Fraction of records answered correctly.
pub fn accuracy(run: &ModelRun, normalization: Normalization) -> Result<f64, MetricsError> {
    let mut kinds = run.iter().map(SampleRecord::kind);
    let Some(first) = kinds.next() else {
        return Err(MetricsError::EmptyRun);
    };
    if kinds.any(|k| k != first) {
        return Err(MetricsError::MixedRecordKinds);
    }
    let mut correct = 0usize;
    for rec in run.iter() {
        correct += usize::from(is_correct(rec, normalization)?);
    }
    Ok(correct as f64 / run.len() as f64)
}

/// `exp(-mean(logprobs))`.
pub fn perplexity(logprobs: &[f64]) -> Result<f64, MetricsError> {
    let mut acc = PerplexityAccumulator::default();
    for &lp in logprobs {
        acc.push(lp)?;
    }
    acc.perplexity()
}

/// Streaming perplexity over a token sequence of unknown length.
#[derive(Debug, Clone, Default)]
pub struct PerplexityAccumulator {
    total: CompensatedSum,
    count: usize,
}

impl PerplexityAccumulator {
    pub fn push(&mut self, logprob: f64) -> Result<(), MetricsError> {
        if logprob.is_nan() || logprob > LOGPROB_SLACK {
            return Err(MetricsError::InvalidLogprob {
                position: self.count,
                value: logprob,
            });
        }
        self.total.add(logprob);
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean_nll(&self) -> Option<f64> {
        (self.count > 0).then(|| -self.total.value() / self.count as f64)
    }

    pub fn perplexity(&self) -> Result<f64, MetricsError> {
        self.mean_nll()
            .map(f64::exp)
            .ok_or(MetricsError::EmptySequence)
    }
}

/// Correct/incorrect transition counts between baseline and candidate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub n_pairs: usize,
    pub cc: usize,
    pub ci: usize,
    pub ic: usize,
    pub ii_same: usize,
    pub ii_diff: usize,
}

/// Verdict transition for a single paired sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    CorrectCorrect,
    CorrectIncorrect,
    IncorrectCorrect,
    IncorrectIncorrectSame,
    IncorrectIncorrectChanged,
}

impl TransitionMatrix {
    pub fn record(&mut self, t: Transition) {
        self.n_pairs += 1;
        match t {
            Transition::CorrectCorrect => self.cc += 1,
            Transition::CorrectIncorrect => self.ci += 1,
            Transition::IncorrectCorrect => self.ic += 1,
            Transition::IncorrectIncorrectSame => self.ii_same += 1,
            Transition::IncorrectIncorrectChanged => self.ii_diff += 1,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.cc + self.ci + self.ic + self.ii_same + self.ii_diff == self.n_pairs
    }

    fn pct(&self, count: usize) -> f64 {
        if self.n_pairs == 0 {
            0.0
        } else {
            100.0 * count as f64 / self.n_pairs as f64
        }
    }

    pub fn flips_pct(&self) -> f64 {
        self.pct(self.ci + self.ic)
    }

    pub fn allflips_pct(&self) -> f64 {
        self.pct(self.ci + self.ic + self.ii_diff)
    }

    pub fn accuracy_baseline(&self) -> f64 {
        self.pct(self.cc + self.ci) / 100.0
    }

    pub fn accuracy_candidate(&self) -> f64 {
        self.pct(self.cc + self.ic) / 100.0
    }

    /// Candidate minus baseline accuracy, in percentage points.
    pub fn delta_accuracy_pp(&self) -> f64 {
        self.pct(self.cc + self.ic) - self.pct(self.cc + self.ci)
    }

    /// Percent of baseline-correct answers that changed.
    pub fn changed_given_correct_pct(&self) -> Option<f64> {
        let denom = self.cc + self.ci;
        (denom > 0).then(|| 100.0 * self.ci as f64 / denom as f64)
    }

    /// Percent of baseline-incorrect answers whose chosen option changed.
    pub fn changed_given_incorrect_pct(&self) -> Option<f64> {
        let denom = self.ic + self.ii_same + self.ii_diff;
        (denom > 0).then(|| 100.0 * (self.ic + self.ii_diff) as f64 / denom as f64)
    }
}

/// Classifies one paired sample.
pub fn classify_pair(
    baseline: &SampleRecord,
    candidate: &SampleRecord,
    normalization: Normalization,
) -> Result<Transition, MetricsError> {
    let (base_ok, cand_ok, changed) = match baseline.kind() {
        RecordKind::MultipleChoice => {
            let a = select_answer(baseline, normalization)?;
            let b = select_answer(candidate, normalization)?;
            (
                Some(a) == baseline.gold_index,
                Some(b) == candidate.gold_index,
                a != b,
            )
        }
        // Only the verdict is stored for generative answers, so an
        // incorrect->incorrect pair never counts as changed.
        RecordKind::Generative => (
            baseline.answer_correct.unwrap_or(false),
            candidate.answer_correct.unwrap_or(false),
            false,
        ),
    };
    Ok(match (base_ok, cand_ok) {
        (true, true) => Transition::CorrectCorrect,
        (true, false) => Transition::CorrectIncorrect,
        (false, true) => Transition::IncorrectCorrect,
        (false, false) if changed => Transition::IncorrectIncorrectChanged,
        (false, false) => Transition::IncorrectIncorrectSame,
    })
}

pub fn transitions(
    paired: &PairedRun,
    normalization: Normalization,
) -> Result<TransitionMatrix, MetricsError> {
    let mut m = TransitionMatrix::default();
    for (b, c) in paired.pairs() {
        m.record(classify_pair(b, c, normalization)?);
    }
    Ok(m)
}

pub fn flips_pct(paired: &PairedRun, normalization: Normalization) -> Result<f64, MetricsError> {
    Ok(transitions(paired, normalization)?.flips_pct())
}

pub fn allflips_pct(paired: &PairedRun, normalization: Normalization) -> Result<f64, MetricsError> {
    Ok(transitions(paired, normalization)?.allflips_pct())
}

/// `(pct of correct answers that changed, pct of incorrect answers that changed)`;
/// either side is `None` when its denominator is empty.
pub fn conditional_change_rates(
    paired: &PairedRun,
    normalization: Normalization,
) -> Result<(Option<f64>, Option<f64>), MetricsError> {
    if let Some((b, _)) = paired
        .pairs()
        .find(|(b, _)| b.kind() == RecordKind::Generative)
    {
        return Err(MetricsError::GenerativeRecord {
            sample_id: b.sample_id.clone(),
        });
    }
    let m = transitions(paired, normalization)?;
    Ok((
        m.changed_given_correct_pct(),
        m.changed_given_incorrect_pct(),
    ))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::ingest::{
        pair_runs, ModelRun, OptionScoring, PairedRun, RunHeader, SampleRecord, SparseDist,
        TokenScore,
    };

    /// Single-token MCQ record whose option log-scores are `scores`.
    pub fn mcq(id: &str, gold: usize, scores: &[f64]) -> SampleRecord {
        let options = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                OptionScoring::new(i, format!("opt{i}"), vec![TokenScore::new(i as u32, s)])
            })
            .collect();
        SampleRecord::multiple_choice(id, "task", gold, options)
    }

    /// Single-token MCQ record with a dense distribution over options at every token.
    pub fn mcq_with_dist(id: &str, gold: usize, probs: &[f64]) -> SampleRecord {
        let logp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let dist = SparseDist::dense(&logp);
        let options = logp
            .iter()
            .enumerate()
            .map(|(i, &lp)| {
                OptionScoring::new(
                    i,
                    format!("opt{i}"),
                    vec![TokenScore::new(i as u32, lp).with_dist(dist.clone())],
                )
            })
            .collect();
        SampleRecord::multiple_choice(id, "task", gold, options)
    }

    pub fn run(label: &str, records: Vec<SampleRecord>) -> ModelRun {
        ModelRun::new(RunHeader::new("model", label, "task"), records).unwrap()
    }

    pub fn paired(base: Vec<SampleRecord>, cand: Vec<SampleRecord>) -> PairedRun {
        pair_runs(run("base", base), run("cand", cand), true).unwrap()
    }

    /// Four pairs: C->C, C->I, I->C, I->I with the chosen option changed.
    pub fn four_pairs() -> PairedRun {
        let base = vec![
            mcq("a", 0, &[-0.1, -2.0, -3.0]),
            mcq("b", 0, &[-0.1, -2.0, -3.0]),
            mcq("c", 0, &[-2.0, -0.1, -3.0]),
            mcq("d", 0, &[-2.0, -0.1, -3.0]),
        ];
        let cand = vec![
            mcq("a", 0, &[-0.1, -2.0, -3.0]),
            mcq("b", 0, &[-2.0, -0.1, -3.0]),
            mcq("c", 0, &[-0.1, -2.0, -3.0]),
            mcq("d", 0, &[-2.0, -3.0, -0.1]),
        ];
        paired(base, cand)
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::ingest::{OptionScoring, TokenScore};

    #[test]
    fn select_answer_argmax_and_ties() {
        let r = mcq("q", 0, &[-1.2, -0.7, -3.0, -2.2]);
        assert_eq!(select_answer(&r, Normalization::None).unwrap(), 1);
        let tie = mcq("q", 0, &[-2.0, -2.0]);
        assert_eq!(select_answer(&tie, Normalization::None).unwrap(), 0);
    }

    #[test]
    fn byte_length_normalization_changes_choice() {
        // -10/20 = -0.5, -12/30 = -0.4.
        let options = vec![
            OptionScoring {
                byte_length: 20,
                ..OptionScoring::new(
                    0,
                    "a",
                    vec![TokenScore::new(1, -4.0), TokenScore::new(2, -6.0)],
                )
            },
            OptionScoring {
                byte_length: 30,
                ..OptionScoring::new(1, "b", vec![TokenScore::new(3, -12.0)])
            },
        ];
        let r = SampleRecord::multiple_choice("q", "task", 0, options);
        assert_eq!(select_answer(&r, Normalization::None).unwrap(), 0);
        assert_eq!(select_answer(&r, Normalization::ByteLength).unwrap(), 1);
    }

    #[test]
    fn options_listed_out_of_order() {
        let mut r = mcq("q", 2, &[-3.0, -2.0, -0.5]);
        r.options.as_mut().unwrap().reverse();
        assert_eq!(select_answer(&r, Normalization::None).unwrap(), 2);
    }

    #[test]
    fn generative_record_rejected_by_select() {
        let g = SampleRecord::generative("g", "task", "x", true);
        assert!(matches!(
            select_answer(&g, Normalization::None),
            Err(MetricsError::GenerativeRecord { .. })
        ));
    }

    #[test]
    fn accuracy_examples() {
        let r = run(
            "b",
            vec![
                mcq("1", 0, &[-0.1, -1.0]),
                mcq("2", 0, &[-1.0, -0.1]),
                mcq("3", 1, &[-1.0, -0.1]),
            ],
        );
        assert!((accuracy(&r, Normalization::None).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        let g = run(
            "b",
            [true, false, false, true]
                .iter()
                .enumerate()
                .map(|(i, &c)| SampleRecord::generative(i.to_string(), "task", "x", c))
                .collect(),
        );
        assert_eq!(accuracy(&g, Normalization::None).unwrap(), 0.5);

        let mut mixed = r.clone();
        mixed
            .records
            .insert("g".into(), SampleRecord::generative("g", "task", "x", true));
        assert_eq!(
            accuracy(&mixed, Normalization::None),
            Err(MetricsError::MixedRecordKinds)
        );

        let mut empty = r;
        empty.records.clear();
        assert_eq!(
            accuracy(&empty, Normalization::None),
            Err(MetricsError::EmptyRun)
        );
    }

    #[test]
    fn perplexity_examples() {
        let e = std::f64::consts::E;
        assert!((perplexity(&[-1.0, -1.0, -1.0]).unwrap() - e).abs() < 1e-12);
        assert!((perplexity(&[-(50f64.ln()); 7]).unwrap() - 50.0).abs() < 1e-10);
        assert!((perplexity(&[-0.5, -1.5]).unwrap() - std::f64::consts::E).abs() < 1e-12);
        assert_eq!(perplexity(&[]), Err(MetricsError::EmptySequence));
        assert!(matches!(
            perplexity(&[-1.0, 0.5]),
            Err(MetricsError::InvalidLogprob { position: 1, .. })
        ));
    }

    #[test]
    fn four_pair_fixture() {
        let p = four_pairs();
        let m = transitions(&p, Normalization::None).unwrap();
        assert_eq!((m.cc, m.ci, m.ic, m.ii_same, m.ii_diff), (1, 1, 1, 0, 1));
        assert!(m.is_consistent());
        assert_eq!(m.flips_pct(), 50.0);
        assert_eq!(m.allflips_pct(), 75.0);
        assert_eq!(
            conditional_change_rates(&p, Normalization::None).unwrap(),
            (Some(50.0), Some(100.0))
        );
    }

    #[test]
    fn identical_runs_have_no_flips() {
        let recs = vec![mcq("a", 0, &[-0.1, -2.0]), mcq("b", 1, &[-0.1, -2.0])];
        let p = paired(recs.clone(), recs);
        let m = transitions(&p, Normalization::None).unwrap();
        assert_eq!((m.ci, m.ic, m.ii_diff), (0, 0, 0));
        assert_eq!(flips_pct(&p, Normalization::None).unwrap(), 0.0);
        assert_eq!(allflips_pct(&p, Normalization::None).unwrap(), 0.0);
    }

    #[test]
    fn all_correct_baseline_has_no_incorrect_rate() {
        let recs = vec![mcq("a", 0, &[-0.1, -2.0]), mcq("b", 0, &[-0.1, -2.0])];
        let p = paired(recs.clone(), recs);
        assert_eq!(
            conditional_change_rates(&p, Normalization::None).unwrap(),
            (Some(0.0), None)
        );
    }

    #[test]
    fn generative_transitions() {
        let base = vec![
            SampleRecord::generative("1", "task", "a", true),
            SampleRecord::generative("2", "task", "a", false),
            SampleRecord::generative("3", "task", "a", false),
        ];
        let cand = vec![
            SampleRecord::generative("1", "task", "b", false),
            SampleRecord::generative("2", "task", "b", true),
            SampleRecord::generative("3", "task", "c", false),
        ];
        let p = paired(base, cand);
        let m = transitions(&p, Normalization::None).unwrap();
        assert_eq!((m.ci, m.ic, m.ii_same, m.ii_diff), (1, 1, 1, 0));
        assert!(conditional_change_rates(&p, Normalization::None).is_err());
    }

    #[test]
    fn normalization_parses() {
        assert_eq!(
            "byte_length".parse::<Normalization>().unwrap(),
            Normalization::ByteLength
        );
        assert!("chars".parse::<Normalization>().is_err());
    }
}
