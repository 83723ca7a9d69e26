//! Run files: record types, parsing, validation and pairing.
//!
//! A run file is UTF-8 JSON Lines. The first line is a [`RunHeader`]; every
//! following line is one [`SampleRecord`]. Fields the schema does not know are
//! kept in `extra` maps and written back out unchanged.

mod io;
mod pair;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use io::{
    parse_run, parse_run_reader, parse_run_str, serialize_run, validate, validate_reader,
    write_run, write_run_file, ValidationReport,
};
pub use pair::{pair_runs, DropReason, DropReport, PairedRun};

use crate::sum::logsumexp;

/// Only format version understood by this crate.
pub const FORMAT_VERSION: &str = "1";

/// Slack allowed above zero for stored log-probabilities.
pub const LOGPROB_SLACK: f64 = 1e-9;

/// Tolerance on `logsumexp(entries, tail) = 0` for sparse distributions.
pub const DIST_MASS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run contains no records")]
    EmptyRun,
    #[error("line {line}: bad header: {message}")]
    BadHeader { line: usize, message: String },
    #[error("line {line}: unsupported format_version {version:?} (expected {FORMAT_VERSION:?})")]
    UnsupportedVersion { line: usize, version: String },
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: duplicate sample_id {id:?}")]
    DuplicateSampleId { line: usize, id: String },
    #[error("line {line}: sample {id:?}: {description}")]
    InvariantViolation {
        line: usize,
        id: String,
        description: String,
    },
    #[error("task mismatch: baseline task {baseline:?}, candidate task {candidate:?}")]
    TaskMismatch { baseline: String, candidate: String },
    #[error("no samples could be paired")]
    EmptyPairing,
    #[error("sample {id:?}: {reason}")]
    StructuralMismatch { id: String, reason: DropReason },
}

impl IngestError {
    /// 1-based line number the error refers to, when it has one.
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::BadHeader { line, .. }
            | Self::UnsupportedVersion { line, .. }
            | Self::MalformedLine { line, .. }
            | Self::DuplicateSampleId { line, .. }
            | Self::InvariantViolation { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Top-K next-token distribution at one position, plus the log of the
/// probability mass outside the listed entries.
///
/// A tail of exactly zero mass is stored as `-inf` in memory and `null` on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseDist {
    pub entries: Vec<(u32, f64)>,
    #[serde(with = "log_mass")]
    pub tail_logmass: f64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SparseDist {
    /// Builds a sparse distribution from explicit entries, sorting them by
    /// descending log-probability.
    pub fn new(mut entries: Vec<(u32, f64)>, tail_logmass: f64) -> Self {
        sort_entries(&mut entries);
        Self {
            entries,
            tail_logmass,
            extra: Map::new(),
        }
    }

    /// Full distribution over `0..logprobs.len()` with an empty tail.
    pub fn dense(logprobs: &[f64]) -> Self {
        let entries = logprobs
            .iter()
            .enumerate()
            .map(|(t, &lp)| (t as u32, lp))
            .collect();
        Self::new(entries, f64::NEG_INFINITY)
    }

    /// Keeps the `k` most probable entries and folds the rest into the tail.
    pub fn truncated(&self, k: usize) -> Self {
        if self.entries.len() <= k {
            return self.clone();
        }
        let (kept, folded) = self.entries.split_at(k);
        let tail = logsumexp(
            folded
                .iter()
                .map(|&(_, lp)| lp)
                .chain(std::iter::once(self.tail_logmass))
                .collect::<Vec<_>>(),
        );
        Self {
            entries: kept.to_vec(),
            tail_logmass: tail,
            extra: self.extra.clone(),
        }
    }

    /// Log of the total mass described (entries plus tail); 0 when normalized.
    pub fn log_total(&self) -> f64 {
        logsumexp(
            self.entries
                .iter()
                .map(|&(_, lp)| lp)
                .chain(std::iter::once(self.tail_logmass))
                .collect::<Vec<_>>(),
        )
    }

    fn check(&self) -> Result<(), String> {
        let mut seen = std::collections::HashSet::with_capacity(self.entries.len());
        for (i, &(t, lp)) in self.entries.iter().enumerate() {
            if !seen.insert(t) {
                return Err(format!("dist lists token {t} twice"));
            }
            if lp.is_nan() || lp > LOGPROB_SLACK {
                return Err(format!("dist entry for token {t} has logprob {lp}"));
            }
            if i > 0 && self.entries[i - 1].1 < lp {
                return Err("dist entries are not sorted by descending logprob".into());
            }
        }
        if self.tail_logmass.is_nan() || self.tail_logmass > LOGPROB_SLACK {
            return Err(format!(
                "tail_logmass {} is not a log-mass",
                self.tail_logmass
            ));
        }
        let total = self.log_total();
        if total.is_nan() || total.abs() > DIST_MASS_TOLERANCE {
            return Err(format!("dist mass does not sum to 1 (log total {total:e})"));
        }
        Ok(())
    }
}

fn sort_entries(entries: &mut [(u32, f64)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

mod log_mass {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::NEG_INFINITY {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token_id: u32,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist: Option<SparseDist>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TokenScore {
    pub fn new(token_id: u32, logprob: f64) -> Self {
        Self {
            token_id,
            logprob,
            dist: None,
            extra: Map::new(),
        }
    }

    pub fn with_dist(mut self, dist: SparseDist) -> Self {
        self.dist = Some(dist);
        self
    }
}

/// One answer option and the model's per-token scores for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionScoring {
    pub option_index: usize,
    pub text: String,
    pub byte_length: usize,
    pub tokens: Vec<TokenScore>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl OptionScoring {
    pub fn new(option_index: usize, text: impl Into<String>, tokens: Vec<TokenScore>) -> Self {
        let text = text.into();
        Self {
            option_index,
            byte_length: text.len(),
            text,
            tokens,
            extra: Map::new(),
        }
    }

    pub fn token_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.tokens.iter().map(|t| t.token_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RecordKind {
    MultipleChoice,
    Generative,
}

/// One benchmark question scored by one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<OptionScoring>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SampleRecord {
    pub fn multiple_choice(
        sample_id: impl Into<String>,
        task_id: impl Into<String>,
        gold_index: usize,
        options: Vec<OptionScoring>,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            task_id: task_id.into(),
            gold_index: Some(gold_index),
            options: Some(options),
            generated_answer: None,
            answer_correct: None,
            metadata: BTreeMap::new(),
            extra: Map::new(),
        }
    }

    pub fn generative(
        sample_id: impl Into<String>,
        task_id: impl Into<String>,
        answer: impl Into<String>,
        correct: bool,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            task_id: task_id.into(),
            gold_index: None,
            options: None,
            generated_answer: Some(answer.into()),
            answer_correct: Some(correct),
            metadata: BTreeMap::new(),
            extra: Map::new(),
        }
    }

    /// Record kind. Only meaningful on records that passed [`SampleRecord::check`].
    pub fn kind(&self) -> RecordKind {
        if self.options.is_some() {
            RecordKind::MultipleChoice
        } else {
            RecordKind::Generative
        }
    }

    pub fn options(&self) -> &[OptionScoring] {
        self.options.as_deref().unwrap_or(&[])
    }

    /// Checks every record-level invariant, returning a description of the first violation.
    pub fn check(&self) -> Result<(), String> {
        match (&self.options, &self.generated_answer) {
            (Some(_), Some(_)) => {
                return Err("record has both options and generated_answer".into());
            }
            (None, None) => return Err("record has neither options nor generated_answer".into()),
            (None, Some(_)) => {
                if self.answer_correct.is_none() {
                    return Err("generative record is missing answer_correct".into());
                }
                return Ok(());
            }
            (Some(_), None) => {}
        }
        let options = self.options();
        if options.len() < 2 {
            return Err(format!(
                "record has {} option(s), need at least 2",
                options.len()
            ));
        }
        match self.gold_index {
            None => return Err("multiple-choice record is missing gold_index".into()),
            Some(g) if g >= options.len() => {
                return Err(format!(
                    "gold_index {g} out of range for {} options",
                    options.len()
                ));
            }
            Some(_) => {}
        }
        let mut seen = std::collections::HashSet::with_capacity(options.len());
        for opt in options {
            if opt.option_index >= options.len() {
                return Err(format!(
                    "option_index {} out of range for {} options",
                    opt.option_index,
                    options.len()
                ));
            }
            if !seen.insert(opt.option_index) {
                return Err(format!("option_index {} repeated", opt.option_index));
            }
            if opt.tokens.is_empty() {
                return Err(format!("option {} has no tokens", opt.option_index));
            }
            for (pos, tok) in opt.tokens.iter().enumerate() {
                if tok.logprob.is_nan() || tok.logprob > LOGPROB_SLACK {
                    return Err(format!(
                        "option {} token {pos}: logprob {} is not a log-probability",
                        opt.option_index, tok.logprob
                    ));
                }
                if let Some(dist) = &tok.dist {
                    dist.check()
                        .map_err(|e| format!("option {} token {pos}: {e}", opt.option_index))?;
                }
            }
        }
        Ok(())
    }
}

/// First line of a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub model_id: String,
    pub config_label: String,
    pub task_id: String,
    pub format_version: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl RunHeader {
    pub fn new(
        model_id: impl Into<String>,
        config_label: impl Into<String>,
        task_id: impl Into<String>,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            config_label: config_label.into(),
            task_id: task_id.into(),
            format_version: FORMAT_VERSION.to_string(),
            extra: Map::new(),
        }
    }
}

/// All records for one (model, compression config, task), keyed by sample id.
///
/// Iteration over `records` is in ascending `sample_id` order, which is the
/// aggregation order used by every metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRun {
    pub header: RunHeader,
    pub records: BTreeMap<String, SampleRecord>,
}

impl ModelRun {
    /// Builds a run from records, enforcing the same invariants as the parser.
    pub fn new(header: RunHeader, records: Vec<SampleRecord>) -> Result<Self, IngestError> {
        let mut map = BTreeMap::new();
        for (i, rec) in records.into_iter().enumerate() {
            let line = i + 2;
            check_record(&header, &rec, line)?;
            if map.contains_key(&rec.sample_id) {
                return Err(IngestError::DuplicateSampleId {
                    line,
                    id: rec.sample_id,
                });
            }
            map.insert(rec.sample_id.clone(), rec);
        }
        if map.is_empty() {
            return Err(IngestError::EmptyRun);
        }
        Ok(Self {
            header,
            records: map,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.header.model_id
    }

    pub fn config_label(&self) -> &str {
        &self.header.config_label
    }

    pub fn task_id(&self) -> &str {
        &self.header.task_id
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.records.get(sample_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.values()
    }
}

pub(crate) fn check_record(
    header: &RunHeader,
    rec: &SampleRecord,
    line: usize,
) -> Result<(), IngestError> {
    let violation = |description: String| IngestError::InvariantViolation {
        line,
        id: rec.sample_id.clone(),
        description,
    };
    if rec.task_id != header.task_id {
        return Err(violation(format!(
            "task_id {:?} differs from run task {:?}",
            rec.task_id, header.task_id
        )));
    }
    rec.check().map_err(violation)
}
