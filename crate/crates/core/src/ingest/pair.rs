use std::collections::BTreeMap;
use std::fmt;

use super::{IngestError, ModelRun, RecordKind, SampleRecord};

/// Why a sample could not be paired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    MissingFromCandidate,
    MissingFromBaseline,
    KindMismatch,
    OptionCountMismatch,
    GoldMismatch,
    TokenizationMismatch,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MissingFromCandidate => "missing from candidate run",
            Self::MissingFromBaseline => "missing from baseline run",
            Self::KindMismatch => "record kind differs (MCQ vs generative)",
            Self::OptionCountMismatch => "option count differs",
            Self::GoldMismatch => "gold_index differs",
            Self::TokenizationMismatch => "option token ids differ",
        })
    }
}

/// Samples left out of a non-strict pairing, grouped by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DropReport {
    pub dropped: BTreeMap<DropReason, Vec<String>>,
}

impl DropReport {
    pub fn total(&self) -> usize {
        self.dropped.values().map(Vec::len).sum()
    }

    pub fn count(&self, reason: DropReason) -> usize {
        self.dropped.get(&reason).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

impl fmt::Display for DropReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("no samples dropped");
        }
        let parts: Vec<String> = self
            .dropped
            .iter()
            .map(|(reason, ids)| format!("{}: {reason}", ids.len()))
            .collect();
        write!(f, "{} samples dropped ({})", self.total(), parts.join(", "))
    }
}

/// Baseline and candidate runs aligned sample by sample.
#[derive(Debug, Clone)]
pub struct PairedRun {
    pub baseline: ModelRun,
    pub candidate: ModelRun,
    /// Paired sample ids, ascending.
    pub pairing: Vec<String>,
    pub drops: DropReport,
}

impl PairedRun {
    pub fn len(&self) -> usize {
        self.pairing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairing.is_empty()
    }

    pub fn task_id(&self) -> &str {
        self.baseline.task_id()
    }

    /// `(baseline, candidate)` record pairs in ascending sample id order.
    pub fn pairs(&self) -> impl ExactSizeIterator<Item = (&SampleRecord, &SampleRecord)> + '_ {
        self.pairing
            .iter()
            .map(move |id| (&self.baseline.records[id], &self.candidate.records[id]))
    }

    pub fn pair_at(&self, i: usize) -> (&SampleRecord, &SampleRecord) {
        let id = &self.pairing[i];
        (&self.baseline.records[id], &self.candidate.records[id])
    }
}

fn structural_mismatch(a: &SampleRecord, b: &SampleRecord) -> Option<DropReason> {
    if a.kind() != b.kind() {
        return Some(DropReason::KindMismatch);
    }
    if a.kind() == RecordKind::Generative {
        return None;
    }
    let (oa, ob) = (a.options(), b.options());
    if oa.len() != ob.len() {
        return Some(DropReason::OptionCountMismatch);
    }
    if a.gold_index != b.gold_index {
        return Some(DropReason::GoldMismatch);
    }
    let same_tokens = oa.iter().zip(ob).all(|(x, y)| {
        x.option_index == y.option_index
            && x.tokens.len() == y.tokens.len()
            && x.token_ids().eq(y.token_ids())
    });
    (!same_tokens).then_some(DropReason::TokenizationMismatch)
}

/// Aligns two runs of the same task.
///
/// In strict mode any sample present in only one run, or any structural
/// mismatch, is an error. Otherwise such samples are dropped and listed in
/// [`PairedRun::drops`].
pub fn pair_runs(
    baseline: ModelRun,
    candidate: ModelRun,
    strict: bool,
) -> Result<PairedRun, IngestError> {
    if baseline.task_id() != candidate.task_id() {
        return Err(IngestError::TaskMismatch {
            baseline: baseline.task_id().to_string(),
            candidate: candidate.task_id().to_string(),
        });
    }
    let mut drops = DropReport::default();
    let mut pairing = Vec::new();
    let mut drop = |id: &str, reason: DropReason| -> Result<(), IngestError> {
        if strict {
            return Err(IngestError::StructuralMismatch {
                id: id.to_string(),
                reason,
            });
        }
        drops
            .dropped
            .entry(reason)
            .or_default()
            .push(id.to_string());
        Ok(())
    };

    for (id, rec) in &baseline.records {
        match candidate.records.get(id) {
            None => drop(id, DropReason::MissingFromCandidate)?,
            Some(other) => match structural_mismatch(rec, other) {
                Some(reason) => drop(id, reason)?,
                None => pairing.push(id.clone()),
            },
        }
    }
    for id in candidate.records.keys() {
        if !baseline.records.contains_key(id) {
            drop(id, DropReason::MissingFromBaseline)?;
        }
    }
    if pairing.is_empty() {
        return Err(IngestError::EmptyPairing);
    }
    Ok(PairedRun {
        baseline,
        candidate,
        pairing,
        drops,
    })
}
