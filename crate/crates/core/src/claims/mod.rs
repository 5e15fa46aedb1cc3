//! Claims data model: visit rows, per-patient monthly streams, cohorts,
//! and the on-disk formats that carry them.

mod cohort;
mod ingest;
pub mod io;
mod split;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use cohort::{
    hypergeometric_pvalue, match_controls, opioid_use_ratio, Cohort, MatchReport,
    AGE_BAND_YEARS, MAX_RATIO_GAP,
};
pub use ingest::{
    build_matrix, filter_min_entries, read_claims, read_enrollees, ClaimKind, ClaimRow,
    Enrollee, FilterReport, IngestReport, StudyWindow, MIN_ACTIVE_MONTHS,
};
pub use split::{split_dataset, Splits};

/// Version tag written into every file this crate produces.
pub const FORMAT_VERSION: &str = "mupod-v1";

/// Demographic vector layout: `[age / AGE_SCALE, female, male]`.
pub const DEMO_DIM: usize = 3;
pub const AGE_SCALE: f64 = 100.0;

pub fn demographics(age_years: f64, female: bool) -> Vec<f64> {
    let age = (age_years / AGE_SCALE).clamp(0.0, 1.0);
    if female {
        vec![age, 1.0, 0.0]
    } else {
        vec![age, 0.0, 1.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.index() as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

/// Events recorded for one patient in one calendar month.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonthEvents {
    pub t: u32,
    pub meds: Vec<u32>,
    pub diags: Vec<u32>,
}

impl MonthEvents {
    pub fn is_empty(&self) -> bool {
        self.meds.is_empty() && self.diags.is_empty()
    }
}

/// One enrollee: aligned monthly medication and diagnosis streams, a
/// static demographic vector, and the outcome label.
///
/// The month list is the patient's time axis; entries may be empty
/// (all-zero rows) and `t` is strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub label: Label,
    pub demo: Vec<f64>,
    pub months: Vec<MonthEvents>,
}

impl PatientRecord {
    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.months.len()
    }

    pub fn is_empty(&self) -> bool {
        self.months.is_empty()
    }

    pub fn active_months(&self) -> usize {
        self.months.iter().filter(|m| !m.is_empty()).count()
    }

    /// `T × med_vocab` multi-hot medication stream.
    pub fn med_stream(&self, med_vocab: usize) -> Tensor {
        multi_hot(self.months.iter().map(|m| &m.meds), self.len(), med_vocab)
    }

    /// `T × diag_vocab` multi-hot diagnosis stream.
    pub fn diag_stream(&self, diag_vocab: usize) -> Tensor {
        multi_hot(self.months.iter().map(|m| &m.diags), self.len(), diag_vocab)
    }

    /// Demographics repeated at every time step.
    pub fn demo_stream(&self) -> Tensor {
        let mut t = Tensor::zeros(self.len(), self.demo.len());
        for r in 0..self.len() {
            for (c, &v) in self.demo.iter().enumerate() {
                t.set(r, c, v);
            }
        }
        t
    }

    pub fn demo_row(&self) -> Tensor {
        Tensor::row_vector(&self.demo)
    }

    pub fn validate(&self, med_vocab: usize, diag_vocab: usize) -> Result<()> {
        let bad = |msg: String| Error::invalid(format!("patient {}: {msg}", self.id));
        if self.demo.len() != DEMO_DIM {
            return Err(bad(format!("demo has {} values, expected {DEMO_DIM}", self.demo.len())));
        }
        if self.demo.iter().any(|v| !v.is_finite()) {
            return Err(bad("demo contains non-finite values".into()));
        }
        for w in self.months.windows(2) {
            if w[1].t <= w[0].t {
                return Err(bad(format!("month {} follows month {}", w[1].t, w[0].t)));
            }
        }
        for m in &self.months {
            if let Some(&i) = m.meds.iter().find(|&&i| i as usize >= med_vocab) {
                return Err(bad(format!("medication index {i} outside vocabulary of {med_vocab}")));
            }
            if let Some(&i) = m.diags.iter().find(|&&i| i as usize >= diag_vocab) {
                return Err(bad(format!("diagnosis index {i} outside vocabulary of {diag_vocab}")));
            }
        }
        Ok(())
    }
}

fn multi_hot<'a>(rows: impl Iterator<Item = &'a Vec<u32>>, n: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(n, width);
    for (r, codes) in rows.enumerate() {
        for &c in codes {
            t.set(r, c as usize, 1.0);
        }
    }
    t
}

/// Patients × months × features, stored sparsely per patient.
#[derive(Debug, Clone, PartialEq)]
pub struct EnrolleeTimeMatrix {
    pub patients: Vec<PatientRecord>,
    pub med_vocab_size: usize,
    pub diag_vocab_size: usize,
    pub window: StudyWindow,
}

impl EnrolleeTimeMatrix {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for p in &self.patients {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::invalid(format!("duplicate patient id {}", p.id)));
            }
            p.validate(self.med_vocab_size, self.diag_vocab_size)?;
            if let Some(last) = p.months.last() {
                if last.t >= self.window.months {
                    return Err(Error::invalid(format!(
                        "patient {}: month {} outside window of {}",
                        p.id, last.t, self.window.months
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.id == id)
    }

    /// Patients in the order of `ids`; unknown ids are an error.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&PatientRecord>> {
        let index: std::collections::HashMap<&str, &PatientRecord> =
            self.patients.iter().map(|p| (p.id.as_str(), p)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("unknown patient id {id}")))
            })
            .collect()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.patients.is_empty() {
            return 0.0;
        }
        let pos = self.patients.iter().filter(|p| p.label.is_positive()).count();
        pos as f64 / self.patients.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patient() -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            label: Label::Positive,
            demo: demographics(45.0, true),
            months: vec![
                MonthEvents { t: 0, meds: vec![1], diags: vec![] },
                MonthEvents { t: 1, meds: vec![], diags: vec![] },
                MonthEvents { t: 3, meds: vec![0, 2], diags: vec![1] },
            ],
        }
    }

    #[test]
    fn dense_streams_share_time_axis() {
        let p = patient();
        let m = p.med_stream(3);
        let d = p.diag_stream(2);
        assert_eq!((m.rows(), d.rows(), p.demo_stream().rows()), (3, 3, 3));
        assert_eq!(m.row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(m.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(m.row(2), &[1.0, 0.0, 1.0]);
        assert_eq!(d.row(2), &[0.0, 1.0]);
        assert_eq!(p.active_months(), 2);
    }

    #[test]
    fn validate_rejects_out_of_vocab_and_unsorted() {
        let p = patient();
        assert!(p.validate(3, 2).is_ok());
        assert!(p.validate(2, 2).is_err());
        let mut q = p.clone();
        q.months.swap(0, 1);
        assert!(q.validate(3, 2).is_err());
    }

    #[test]
    fn label_serialises_as_integer() {
        assert_eq!(serde_json::to_string(&Label::Positive).unwrap(), "1");
        assert_eq!(serde_json::from_str::<Label>("0").unwrap(), Label::Negative);
        assert!(serde_json::from_str::<Label>("2").is_err());
    }
}
