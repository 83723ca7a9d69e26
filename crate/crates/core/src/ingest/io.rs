use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{
    check_record, IngestError, ModelRun, RecordKind, RunHeader, SampleRecord, FORMAT_VERSION,
};

/// Parses and validates a run file, stopping at the first error.
pub fn parse_run(path: impl AsRef<Path>) -> Result<ModelRun, IngestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| io_error(path, source))?;
    parse_run_reader(BufReader::new(file)).map_err(|e| match e {
        IngestError::Io { source, .. } => io_error(path, source),
        other => other,
    })
}

pub fn parse_run_str(text: &str) -> Result<ModelRun, IngestError> {
    parse_run_reader(text.as_bytes())
}

pub fn parse_run_reader(reader: impl BufRead) -> Result<ModelRun, IngestError> {
    let mut scan = Scan::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: "<input>".into(),
            source,
        })?;
        scan.feed(idx + 1, &line)?;
    }
    scan.finish()
}

fn io_error(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Line-by-line state shared by the aborting parser and the collecting validator.
#[derive(Default)]
struct Scan {
    header: Option<RunHeader>,
    saw_header_line: bool,
    records: BTreeMap<String, SampleRecord>,
    seen_ids: HashSet<String>,
    stats: KindStats,
}

#[derive(Default, Debug, Clone, Copy, PartialEq, Eq)]
struct KindStats {
    mcq: usize,
    generative: usize,
    token_positions: usize,
    positions_with_dist: usize,
}

impl Scan {
    fn feed(&mut self, line_no: usize, line: &str) -> Result<(), IngestError> {
        if line.trim().is_empty() {
            return Ok(());
        }
        if !self.saw_header_line {
            self.saw_header_line = true;
            let header: RunHeader =
                serde_json::from_str(line).map_err(|e| IngestError::BadHeader {
                    line: line_no,
                    message: e.to_string(),
                })?;
            if header.format_version != FORMAT_VERSION {
                return Err(IngestError::UnsupportedVersion {
                    line: line_no,
                    version: header.format_version,
                });
            }
            self.header = Some(header);
            return Ok(());
        }
        let rec: SampleRecord =
            serde_json::from_str(line).map_err(|e| IngestError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        if !self.seen_ids.insert(rec.sample_id.clone()) {
            return Err(IngestError::DuplicateSampleId {
                line: line_no,
                id: rec.sample_id,
            });
        }
        match &self.header {
            Some(h) => check_record(h, &rec, line_no)?,
            None => rec
                .check()
                .map_err(|description| IngestError::InvariantViolation {
                    line: line_no,
                    id: rec.sample_id.clone(),
                    description,
                })?,
        }
        self.stats.count(&rec);
        self.records.insert(rec.sample_id.clone(), rec);
        Ok(())
    }

    fn finish(self) -> Result<ModelRun, IngestError> {
        let Some(header) = self.header else {
            return Err(IngestError::EmptyRun);
        };
        if self.records.is_empty() {
            return Err(IngestError::EmptyRun);
        }
        Ok(ModelRun {
            header,
            records: self.records,
        })
    }
}

impl KindStats {
    fn count(&mut self, rec: &SampleRecord) {
        match rec.kind() {
            RecordKind::MultipleChoice => {
                self.mcq += 1;
                for tok in rec.options().iter().flat_map(|o| &o.tokens) {
                    self.token_positions += 1;
                    self.positions_with_dist += usize::from(tok.dist.is_some());
                }
            }
            RecordKind::Generative => self.generative += 1,
        }
    }
}

/// Outcome of [`validate`]: counts over the records that parsed, plus every error found.
#[derive(Debug)]
pub struct ValidationReport {
    pub n_records: usize,
    pub n_mcq: usize,
    pub n_generative: usize,
    /// MCQ token positions seen, and how many of them carry a `dist`.
    pub token_positions: usize,
    pub positions_with_dist: usize,
    pub errors: Vec<IngestError>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    /// Share of MCQ token positions with a stored distribution, in percent.
    pub fn dist_pct(&self) -> Option<f64> {
        (self.token_positions > 0)
            .then(|| 100.0 * self.positions_with_dist as f64 / self.token_positions as f64)
    }

    pub fn mcq_pct(&self) -> Option<f64> {
        (self.n_records > 0).then(|| 100.0 * self.n_mcq as f64 / self.n_records as f64)
    }
}

fn pct(v: Option<f64>) -> String {
    match v {
        None => "n/a".into(),
        Some(p) if p.fract() == 0.0 => format!("{p:.0}%"),
        Some(p) => format!("{p:.1}%"),
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} records, {} MCQ, dist present: {}",
            self.n_records,
            pct(self.mcq_pct()),
            pct(self.dist_pct())
        )?;
        if self.is_valid() {
            writeln!(f, "valid")
        } else {
            writeln!(f, "{} error(s):", self.errors.len())?;
            for e in &self.errors {
                writeln!(f, "  {e}")?;
            }
            Ok(())
        }
    }
}

/// Validates a run file, collecting every error instead of stopping at the first.
pub fn validate(path: impl AsRef<Path>) -> ValidationReport {
    let path = path.as_ref();
    match File::open(path) {
        Ok(file) => validate_reader(BufReader::new(file)),
        Err(source) => ValidationReport {
            n_records: 0,
            n_mcq: 0,
            n_generative: 0,
            token_positions: 0,
            positions_with_dist: 0,
            errors: vec![io_error(path, source)],
        },
    }
}

pub fn validate_reader(reader: impl BufRead) -> ValidationReport {
    let mut scan = Scan::default();
    let mut errors = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        match line {
            Ok(line) => {
                if let Err(e) = scan.feed(idx + 1, &line) {
                    errors.push(e);
                }
            }
            Err(source) => {
                errors.push(IngestError::Io {
                    path: "<input>".into(),
                    source,
                });
                break;
            }
        }
    }
    if scan.records.is_empty() && errors.is_empty() {
        errors.push(IngestError::EmptyRun);
    }
    ValidationReport {
        n_records: scan.records.len(),
        n_mcq: scan.stats.mcq,
        n_generative: scan.stats.generative,
        token_positions: scan.stats.token_positions,
        positions_with_dist: scan.stats.positions_with_dist,
        errors,
    }
}

/// Writes a run: header line, then records in ascending `sample_id` order.
pub fn write_run(run: &ModelRun, mut out: impl Write) -> std::io::Result<()> {
    serde_json::to_writer(&mut out, &run.header)?;
    out.write_all(b"\n")?;
    for rec in run.records.values() {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_run_file(run: &ModelRun, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| io_error(path, source))?;
    write_run(run, BufWriter::new(file)).map_err(|source| io_error(path, source))
}

pub fn serialize_run(run: &ModelRun) -> String {
    let mut buf = Vec::new();
    write_run(run, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}
