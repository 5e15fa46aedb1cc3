//! On-disk formats: JSON-lines datasets, vocabularies, and splits.
//!
//! A dataset directory holds `dataset.jsonl`, `vocab.json`, and
//! optionally `splits.json` and `truth.json`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{EnrolleeTimeMatrix, PatientRecord, Splits, StudyWindow, FORMAT_VERSION};
use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const TRUTH_FILE: &str = "truth.json";

/// Token → column maps for both event streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub format: String,
    pub medications: BTreeMap<String, u32>,
    pub diagnoses: BTreeMap<String, u32>,
    #[serde(default)]
    pub window: StudyWindow,
}

impl Vocabulary {
    /// Assigns indices in the order given.
    pub fn from_tokens<S: AsRef<str>>(meds: &[S], diags: &[S]) -> Self {
        let index = |tokens: &[S]| {
            tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.as_ref().to_string(), i as u32))
                .collect()
        };
        Self {
            format: FORMAT_VERSION.into(),
            medications: index(meds),
            diagnoses: index(diags),
            window: StudyWindow::default(),
        }
    }

    pub fn medication(&self, token: &str) -> Option<u32> {
        self.medications.get(token).copied()
    }

    pub fn diagnosis(&self, token: &str) -> Option<u32> {
        self.diagnoses.get(token).copied()
    }

    pub fn med_size(&self) -> usize {
        self.medications.len()
    }

    pub fn diag_size(&self) -> usize {
        self.diagnoses.len()
    }

    /// Token for a medication column, for labelling exports.
    pub fn medication_token(&self, index: u32) -> Option<&str> {
        self.medications
            .iter()
            .find(|(_, &i)| i == index)
            .map(|(t, _)| t.as_str())
    }

    pub fn diagnosis_token(&self, index: u32) -> Option<&str> {
        self.diagnoses
            .iter()
            .find(|(_, &i)| i == index)
            .map(|(t, _)| t.as_str())
    }

    /// Indices must be exactly `0..n` for each stream.
    pub fn validate(&self) -> Result<()> {
        check_format(&self.format)?;
        for (name, map) in [("medications", &self.medications), ("diagnoses", &self.diagnoses)] {
            let mut idx: Vec<u32> = map.values().copied().collect();
            idx.sort_unstable();
            if idx.iter().enumerate().any(|(i, &v)| v as usize != i) {
                return Err(Error::invalid(format!(
                    "{name} vocabulary indices must be contiguous from 0"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_format(found: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported format {found:?}, expected {FORMAT_VERSION:?}"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct RecordLineOut<'a> {
    format: &'static str,
    #[serde(flatten)]
    record: &'a PatientRecord,
}

#[derive(Deserialize)]
struct RecordLineIn {
    format: String,
    #[serde(flatten)]
    record: PatientRecord,
}

pub fn write_records<'a>(
    out: impl Write,
    records: impl IntoIterator<Item = &'a PatientRecord>,
) -> std::io::Result<()> {
    let mut out = BufWriter::new(out);
    for record in records {
        let line = RecordLineOut {
            format: FORMAT_VERSION,
            record,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_records(source: impl Read) -> Result<Vec<PatientRecord>> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Ingestion {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLineIn = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            line: line_no,
            message: e.to_string(),
        })?;
        check_format(&parsed.format).map_err(|e| Error::Ingestion {
            line: line_no,
            message: e.to_string(),
        })?;
        records.push(parsed.record);
    }
    Ok(records)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Paths inside a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    root: PathBuf,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join(DATASET_FILE)
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join(VOCAB_FILE)
    }

    pub fn splits(&self) -> PathBuf {
        self.root.join(SPLITS_FILE)
    }

    pub fn truth(&self) -> PathBuf {
        self.root.join(TRUTH_FILE)
    }

    pub fn write(&self, matrix: &EnrolleeTimeMatrix, vocab: &Vocabulary) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.dataset();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_records(file, &matrix.patients).map_err(|e| Error::io(&path, e))?;
        write_json(&self.vocab(), vocab)
    }

    pub fn load(&self) -> Result<(EnrolleeTimeMatrix, Vocabulary)> {
        let vocab: Vocabulary = read_json(&self.vocab())?;
        vocab.validate()?;
        let path = self.dataset();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let patients = read_records(file)?;
        let matrix = EnrolleeTimeMatrix {
            patients,
            med_vocab_size: vocab.med_size(),
            diag_vocab_size: vocab.diag_size(),
            window: vocab.window,
        };
        matrix.validate()?;
        Ok((matrix, vocab))
    }

    pub fn write_splits(&self, splits: &Splits) -> Result<()> {
        write_json(&self.splits(), splits)
    }

    pub fn load_splits(&self) -> Result<Splits> {
        let s: Splits = read_json(&self.splits())?;
        check_format(&s.format)?;
        Ok(s)
    }
}
