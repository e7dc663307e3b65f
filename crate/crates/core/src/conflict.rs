//! Sign-conflict accounting between two trimmed task vectors, and the checkpoint
//! series analysis that tracks how many protected parameters sign election removes
//! as the other model drifts further from the base.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::select::CHUNK;
use crate::taskvec::compute_task_vector;
use crate::tensorio::Checkpoint;
use crate::tiescore::{self, sign, trim, TrimGranularity, TrimmedDelta};

/// Conflict counts for one tensor or a whole model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConflictCounts {
    pub retained_protected: u64,
    pub retained_other: u64,
    /// Positions where both trimmed values are non-zero.
    pub overlap: u64,
    /// Overlap positions with opposite signs.
    pub conflicts: u64,
    /// Conflicts the protected value loses (strictly smaller magnitude).
    pub discarded_protected: u64,
    pub discarded_other: u64,
    /// Conflicts between equal magnitudes: the sum is exactly zero.
    pub zero_sum_ties: u64,
    pub discard_proportion: f64,
}

impl ConflictCounts {
    fn add(&mut self, o: &ConflictCounts) {
        self.retained_protected += o.retained_protected;
        self.retained_other += o.retained_other;
        self.overlap += o.overlap;
        self.conflicts += o.conflicts;
        self.discarded_protected += o.discarded_protected;
        self.discarded_other += o.discarded_other;
        self.zero_sum_ties += o.zero_sum_ties;
    }

    fn with_proportion(mut self) -> Self {
        self.discard_proportion = if self.retained_protected == 0 {
            0.0
        } else {
            self.discarded_protected as f64 / self.retained_protected as f64
        };
        self
    }
}

/// Whole-model conflict counts plus the per-tensor breakdown.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConflictReport {
    pub retained_protected: u64,
    pub retained_other: u64,
    pub overlap: u64,
    pub conflicts: u64,
    pub discarded_protected: u64,
    pub discarded_other: u64,
    pub zero_sum_ties: u64,
    pub discard_proportion: f64,
    pub per_tensor: BTreeMap<String, ConflictCounts>,
}

impl ConflictReport {
    pub(crate) fn from_tensors(parts: Vec<(String, ConflictCounts)>) -> Self {
        let mut total = ConflictCounts::default();
        for (_, c) in &parts {
            total.add(c);
        }
        let t = total.with_proportion();
        ConflictReport {
            retained_protected: t.retained_protected,
            retained_other: t.retained_other,
            overlap: t.overlap,
            conflicts: t.conflicts,
            discarded_protected: t.discarded_protected,
            discarded_other: t.discarded_other,
            zero_sum_ties: t.zero_sum_ties,
            discard_proportion: t.discard_proportion,
            per_tensor: parts.into_iter().collect(),
        }
    }

    pub fn totals(&self) -> ConflictCounts {
        ConflictCounts {
            retained_protected: self.retained_protected,
            retained_other: self.retained_other,
            overlap: self.overlap,
            conflicts: self.conflicts,
            discarded_protected: self.discarded_protected,
            discarded_other: self.discarded_other,
            zero_sum_ties: self.zero_sum_ties,
            discard_proportion: self.discard_proportion,
        }
    }
}

/// Counts conflicts between two trimmed tensors.
pub(crate) fn pair_counts(protected: &[f32], other: &[f32], retained_protected: u64, retained_other: u64) -> ConflictCounts {
    let mut c = protected
        .par_chunks(CHUNK)
        .zip(other.par_chunks(CHUNK))
        .map(|(ps, os)| {
            let mut c = ConflictCounts::default();
            for (&p, &o) in ps.iter().zip(os) {
                if p == 0.0 || o == 0.0 {
                    continue;
                }
                c.overlap += 1;
                if sign(p) == sign(o) {
                    continue;
                }
                c.conflicts += 1;
                if p.abs() < o.abs() {
                    c.discarded_protected += 1;
                } else if o.abs() < p.abs() {
                    c.discarded_other += 1;
                } else {
                    c.zero_sum_ties += 1;
                }
            }
            c
        })
        .reduce(ConflictCounts::default, |mut a, b| {
            a.add(&b);
            a
        });
    c.retained_protected = retained_protected;
    c.retained_other = retained_other;
    c.with_proportion()
}

/// Partitions the sign conflicts between `protected` and `other`.
pub fn conflict_report(protected: &TrimmedDelta, other: &TrimmedDelta) -> Result<ConflictReport> {
    let same = protected.deltas.len() == other.deltas.len()
        && protected
            .deltas
            .iter()
            .zip(&other.deltas)
            .all(|((na, a), (nb, b))| na == nb && a.shape == b.shape);
    if !same {
        return Err(Error::structure("trimmed deltas differ in tensor layout"));
    }
    let parts = protected
        .deltas
        .iter()
        .map(|(name, p)| {
            let counts = pair_counts(
                &p.values,
                &other.deltas[name].values,
                protected.retained_per_tensor[name],
                other.retained_per_tensor[name],
            );
            (name.clone(), counts)
        })
        .collect();
    Ok(ConflictReport::from_tensors(parts))
}

/// Densities and trim granularity for the conflict analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub k_protected: f64,
    pub k_other: f64,
    pub granularity: TrimGranularity,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            k_protected: 0.2,
            k_other: 1.0,
            granularity: TrimGranularity::Global,
        }
    }
}

/// One conflict report per checkpoint, in input order, each against the same
/// protected model.
pub fn series_analysis(
    base: &Checkpoint,
    protected_model: &Checkpoint,
    checkpoints: &[Checkpoint],
    opts: AnalysisOptions,
) -> Result<Vec<ConflictReport>> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("series analysis needs at least one checkpoint"));
    }
    let protected = trim(&compute_task_vector(protected_model, base)?, opts.k_protected, opts.granularity)?;
    checkpoints
        .iter()
        .map(|c| {
            let other = trim(&compute_task_vector(c, base)?, opts.k_other, opts.granularity)?;
            conflict_report(&protected, &other)
        })
        .collect()
}

/// A series record: the caller's tag plus the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub tag: String,
    #[serde(flatten)]
    pub report: ConflictReport,
}

/// Conflict report between two checkpoint files, streaming one tensor at a time.
pub fn analyze_files(
    base: &Path,
    protected: &Path,
    other: &Path,
    opts: AnalysisOptions,
) -> Result<ConflictReport> {
    tiescore::analyze_files(base, protected, other, opts)
}

/// [`series_analysis`] over files; each checkpoint carries a free-form tag.
pub fn series_files(
    base: &Path,
    protected: &Path,
    checkpoints: &[(String, PathBuf)],
    opts: AnalysisOptions,
) -> Result<Vec<SeriesRecord>> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("series analysis needs at least one checkpoint"));
    }
    checkpoints
        .iter()
        .map(|(tag, path)| {
            Ok(SeriesRecord {
                tag: tag.clone(),
                report: analyze_files(base, protected, path, opts)?,
            })
        })
        .collect()
}

/// In-memory counterpart of [`analyze_files`] that runs the streaming engine.
pub fn analyze_checkpoints(
    base: &Checkpoint,
    protected: &Checkpoint,
    other: &Checkpoint,
    opts: AnalysisOptions,
) -> Result<ConflictReport> {
    tiescore::analyze_checkpoints(base, protected, other, opts)
}

pub const COLUMNS: [&str; 8] = [
    "retained_protected",
    "retained_other",
    "overlap",
    "conflicts",
    "discarded_protected",
    "discarded_other",
    "zero_sum_ties",
    "discard_proportion",
];

fn push_counts(out: &mut String, c: &ConflictCounts) {
    let _ = write!(
        out,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        c.retained_protected,
        c.retained_other,
        c.overlap,
        c.conflicts,
        c.discarded_protected,
        c.discarded_other,
        c.zero_sum_ties,
        c.discard_proportion
    );
}

/// Tab-separated table of a series, one row per record, with a header row.
pub fn series_table(records: &[SeriesRecord]) -> String {
    let mut out = format!("tag\t{}\n", COLUMNS.join("\t"));
    for r in records {
        out.push_str(&r.tag);
        out.push('\t');
        push_counts(&mut out, &r.report.totals());
        out.push('\n');
    }
    out
}

/// Tab-separated table of one report: a row per tensor and a `total` row.
pub fn report_table(report: &ConflictReport) -> String {
    let mut out = format!("tensor\t{}\n", COLUMNS.join("\t"));
    for (name, c) in &report.per_tensor {
        out.push_str(name);
        out.push('\t');
        push_counts(&mut out, c);
        out.push('\n');
    }
    out.push_str("# total\t");
    push_counts(&mut out, &report.totals());
    out.push('\n');
    out
}
