use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::io::Vocabulary;
use super::{demographics, EnrolleeTimeMatrix, Label, MonthEvents, PatientRecord};
use crate::error::{Error, Result};

/// Patients with fewer non-empty months than this are excluded.
pub const MIN_ACTIVE_MONTHS: usize = 3;

/// Calendar window covered by the time axis, one step per month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start_year: i32,
    /// 1-based calendar month.
    pub start_month: u32,
    pub months: u32,
}

impl Default for StudyWindow {
    /// January 2009 through December 2018.
    fn default() -> Self {
        Self {
            start_year: 2009,
            start_month: 1,
            months: 120,
        }
    }
}

impl StudyWindow {
    pub fn with_months(months: u32) -> Self {
        Self {
            months,
            ..Self::default()
        }
    }

    /// Offset of `YYYY-MM` from the window start.
    pub fn offset_of(&self, year: i32, month: u32) -> i64 {
        (year as i64 - self.start_year as i64) * 12 + month as i64 - self.start_month as i64
    }

    pub fn contains(&self, offset: i64) -> bool {
        offset >= 0 && offset < self.months as i64
    }

    /// Parses either a plain month offset or a `YYYY-MM` date.
    pub fn parse_month(&self, raw: &str) -> Option<i64> {
        let raw = raw.trim();
        if let Some((y, m)) = raw.split_once('-') {
            let year: i32 = y.parse().ok()?;
            let month: u32 = m.parse().ok()?;
            if !(1..=12).contains(&month) {
                return None;
            }
            Some(self.offset_of(year, month))
        } else {
            raw.parse().ok()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClaimKind {
    Medication,
    Diagnosis,
}

/// One visit-level claim line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimRow {
    pub enrollee_id: String,
    /// Month offset from the window start; may fall outside the window.
    pub month: i64,
    pub kind: ClaimKind,
    pub code: String,
}

/// Per-enrollee attributes that do not appear on claim lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Enrollee {
    pub id: String,
    pub label: Label,
    pub age_years: f64,
    pub female: bool,
}

const CLAIMS_HEADER: [&str; 4] = ["enrollee_id", "month", "kind", "code"];
const ENROLLEE_HEADER: [&str; 4] = ["enrollee_id", "label", "age", "sex"];

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = reader.headers()?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Ingestion {
            line: 1,
            message: format!("expected header {}, found {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn line_of(record: &csv::StringRecord) -> usize {
    record.position().map_or(0, |p| p.line() as usize)
}

/// Reads a claims CSV with header `enrollee_id,month,kind,code`.
/// `month` is an offset into `window` or a `YYYY-MM` date.
pub fn read_claims(source: impl Read, window: &StudyWindow) -> Result<Vec<ClaimRow>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    check_header(&mut reader, &CLAIMS_HEADER)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = line_of(&record);
        let bad = |message: String| Error::Ingestion { line, message };
        if record.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", record.len())));
        }
        let id = record[0].trim();
        if id.is_empty() {
            return Err(bad("empty enrollee_id".into()));
        }
        let month = window
            .parse_month(&record[1])
            .ok_or_else(|| bad(format!("unparseable month {:?}", &record[1])))?;
        let kind = match record[2].trim().to_ascii_lowercase().as_str() {
            "medication" | "med" => ClaimKind::Medication,
            "diagnosis" | "diag" => ClaimKind::Diagnosis,
            other => return Err(bad(format!("unknown kind {other:?}"))),
        };
        let code = record[3].trim();
        if code.is_empty() {
            return Err(bad("empty code".into()));
        }
        rows.push(ClaimRow {
            enrollee_id: id.to_string(),
            month,
            kind,
            code: code.to_string(),
        });
    }
    Ok(rows)
}

/// Reads an enrollee table with header `enrollee_id,label,age,sex`
/// (`label` 0/1, `sex` F/M).
pub fn read_enrollees(source: impl Read) -> Result<BTreeMap<String, Enrollee>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    check_header(&mut reader, &ENROLLEE_HEADER)?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = line_of(&record);
        let bad = |message: String| Error::Ingestion { line, message };
        if record.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", record.len())));
        }
        let id = record[0].trim().to_string();
        let label = match record[1].trim() {
            "0" => Label::Negative,
            "1" => Label::Positive,
            other => return Err(bad(format!("label must be 0 or 1, found {other:?}"))),
        };
        let age_years: f64 = record[2]
            .trim()
            .parse()
            .ok()
            .filter(|a: &f64| a.is_finite() && *a >= 0.0)
            .ok_or_else(|| bad(format!("invalid age {:?}", &record[2])))?;
        let female = match record[3].trim().to_ascii_uppercase().as_str() {
            "F" => true,
            "M" => false,
            other => return Err(bad(format!("sex must be F or M, found {other:?}"))),
        };
        if out.contains_key(&id) {
            return Err(bad(format!("duplicate enrollee {id}")));
        }
        out.insert(
            id.clone(),
            Enrollee {
                id,
                label,
                age_years,
                female,
            },
        );
    }
    Ok(out)
}

/// Counts of rows that did not make it into the matrix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub unknown_codes: BTreeMap<String, usize>,
    pub unknown_enrollees: usize,
    pub out_of_window: usize,
    pub patients: usize,
}

impl IngestReport {
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let unknown: usize = self.unknown_codes.values().sum();
        if unknown > 0 {
            let mut names: Vec<&str> = self.unknown_codes.keys().take(5).map(String::as_str).collect();
            if self.unknown_codes.len() > 5 {
                names.push("...");
            }
            out.push(format!(
                "skipped {unknown} rows with {} unknown codes ({})",
                self.unknown_codes.len(),
                names.join(", ")
            ));
        }
        if self.unknown_enrollees > 0 {
            out.push(format!(
                "skipped {} rows for enrollees missing from the enrollee table",
                self.unknown_enrollees
            ));
        }
        if self.out_of_window > 0 {
            out.push(format!("skipped {} rows outside the study window", self.out_of_window));
        }
        out
    }
}

#[derive(Default)]
struct MonthSets {
    meds: BTreeSet<u32>,
    diags: BTreeSet<u32>,
}

/// Converts visit rows into per-patient monthly multi-hot streams.
///
/// Codes within a month are set-unioned, so row order and duplicates do
/// not affect the result. Each patient's time axis runs from their first
/// to last month with events; months in between without events are kept
/// as empty entries. Patients come out sorted by id.
pub fn build_matrix(
    claims: &[ClaimRow],
    enrollees: &BTreeMap<String, Enrollee>,
    vocab: &Vocabulary,
    window: StudyWindow,
) -> (EnrolleeTimeMatrix, IngestReport) {
    let mut report = IngestReport {
        rows_read: claims.len(),
        ..Default::default()
    };
    let mut by_patient: BTreeMap<&str, BTreeMap<u32, MonthSets>> = BTreeMap::new();

    for row in claims {
        if !window.contains(row.month) {
            report.out_of_window += 1;
            continue;
        }
        if !enrollees.contains_key(&row.enrollee_id) {
            report.unknown_enrollees += 1;
            continue;
        }
        let index = match row.kind {
            ClaimKind::Medication => vocab.medication(&row.code),
            ClaimKind::Diagnosis => vocab.diagnosis(&row.code),
        };
        let Some(index) = index else {
            *report.unknown_codes.entry(row.code.clone()).or_default() += 1;
            continue;
        };
        let month = by_patient
            .entry(row.enrollee_id.as_str())
            .or_default()
            .entry(row.month as u32)
            .or_default();
        match row.kind {
            ClaimKind::Medication => month.meds.insert(index),
            ClaimKind::Diagnosis => month.diags.insert(index),
        };
    }

    let patients: Vec<PatientRecord> = by_patient
        .into_iter()
        .map(|(id, months)| {
            let enrollee = &enrollees[id];
            let first = *months.keys().next().expect("patient has at least one month");
            let last = *months.keys().next_back().expect("patient has at least one month");
            let mut months = months;
            let timeline = (first..=last)
                .map(|t| {
                    let sets = months.remove(&t).unwrap_or_default();
                    MonthEvents {
                        t,
                        meds: sets.meds.into_iter().collect(),
                        diags: sets.diags.into_iter().collect(),
                    }
                })
                .collect();
            PatientRecord {
                id: id.to_string(),
                label: enrollee.label,
                demo: demographics(enrollee.age_years, enrollee.female),
                months: timeline,
            }
        })
        .collect();
    report.patients = patients.len();

    let matrix = EnrolleeTimeMatrix {
        patients,
        med_vocab_size: vocab.med_size(),
        diag_vocab_size: vocab.diag_size(),
        window,
    };
    (matrix, report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: Vec<String>,
}

/// Keeps patients with at least `min_entries` non-empty months.
pub fn filter_min_entries(
    matrix: EnrolleeTimeMatrix,
    min_entries: usize,
) -> (EnrolleeTimeMatrix, FilterReport) {
    let mut report = FilterReport::default();
    let EnrolleeTimeMatrix {
        patients,
        med_vocab_size,
        diag_vocab_size,
        window,
    } = matrix;
    let patients: Vec<PatientRecord> = patients
        .into_iter()
        .filter(|p| {
            let keep = p.active_months() >= min_entries;
            if !keep {
                report.dropped.push(p.id.clone());
            }
            keep
        })
        .collect();
    report.kept = patients.len();
    (
        EnrolleeTimeMatrix {
            patients,
            med_vocab_size,
            diag_vocab_size,
            window,
        },
        report,
    )
}
