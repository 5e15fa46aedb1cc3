//! Synthetic cohorts with a planted, lag-windowed event pair.
//!
//! Every month each vocabulary token fires independently with the base
//! rate. A patient without a planted pair is resampled until the trigger
//! tokens never co-occur inside the lag window, so the co-occurrence
//! count separates planted from unplanted patients exactly. Positives get
//! the pair planted with probability `signal`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::claims::io::Vocabulary;
use crate::claims::{
    demographics, EnrolleeTimeMatrix, Label, MonthEvents, PatientRecord, StudyWindow, FORMAT_VERSION,
};
use crate::error::{Error, Result};

/// Which streams carry the planted pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// Two medication tokens.
    SingleStream,
    /// A medication followed by a diagnosis.
    #[default]
    CrossStream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_months: usize,
    pub med_vocab_size: usize,
    pub diag_vocab_size: usize,
    /// Per-month firing probability of every token.
    pub base_rate: f64,
    /// Probability that a positive patient carries the planted pair.
    pub signal: f64,
    pub rule: LabelRule,
    /// The second event follows the first by 0..=k months.
    pub lag_window: usize,
    pub positive_rate: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            n_months: 24,
            med_vocab_size: 20,
            diag_vocab_size: 20,
            base_rate: 0.05,
            signal: 0.8,
            rule: LabelRule::CrossStream,
            lag_window: 2,
            positive_rate: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.med_vocab_size < 4 || self.diag_vocab_size < 4 {
            return Err(Error::invalid("vocabulary sizes must be at least 4"));
        }
        if self.n_months < 3 {
            return Err(Error::invalid("n_months must be at least 3"));
        }
        if self.lag_window >= self.n_months {
            return Err(Error::invalid("lag window must be shorter than the history"));
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return Err(Error::invalid(format!("base rate {} must lie in (0, 1)", self.base_rate)));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return Err(Error::invalid(format!("signal {} must lie in [0, 1]", self.signal)));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(Error::invalid("positive rate must lie in [0, 1]"));
        }
        if self.n_patients == 0 {
            return Err(Error::invalid("n_patients must be at least 1"));
        }
        Ok(())
    }

    pub fn truth(&self) -> Truth {
        let (second_stream, second_index) = match self.rule {
            LabelRule::CrossStream => (TokenStream::Diag, 0),
            LabelRule::SingleStream => (TokenStream::Med, 1),
        };
        let vocab = self.vocabulary();
        let token = |s: TokenStream, i: u32| match s {
            TokenStream::Med => vocab.medication_token(i).unwrap_or_default().to_string(),
            TokenStream::Diag => vocab.diagnosis_token(i).unwrap_or_default().to_string(),
        };
        Truth {
            format: FORMAT_VERSION.into(),
            rule: self.rule,
            first: TriggerToken {
                stream: TokenStream::Med,
                index: 0,
                token: token(TokenStream::Med, 0),
            },
            second: TriggerToken {
                stream: second_stream,
                index: second_index,
                token: token(second_stream, second_index),
            },
            lag_window: self.lag_window,
            signal: self.signal,
            base_rate: self.base_rate,
            seed: self.seed,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let meds: Vec<String> = (0..self.med_vocab_size).map(|i| format!("M{i:03}")).collect();
        let diags: Vec<String> = (0..self.diag_vocab_size).map(|i| format!("D{i:03}")).collect();
        let meds: Vec<&str> = meds.iter().map(String::as_str).collect();
        let diags: Vec<&str> = diags.iter().map(String::as_str).collect();
        let mut v = Vocabulary::from_tokens(&meds, &diags);
        v.window = self.window();
        v
    }

    fn window(&self) -> StudyWindow {
        StudyWindow::with_months(self.n_months as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenStream {
    Med,
    Diag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerToken {
    pub stream: TokenStream,
    pub index: u32,
    pub token: String,
}

/// Ground truth of a generated cohort, written next to the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub format: String,
    pub rule: LabelRule,
    pub first: TriggerToken,
    pub second: TriggerToken,
    pub lag_window: usize,
    pub signal: f64,
    pub base_rate: f64,
    pub seed: u64,
}

fn months_with(p: &PatientRecord, token: &TriggerToken) -> Vec<i64> {
    p.months
        .iter()
        .filter(|m| match token.stream {
            TokenStream::Med => m.meds.contains(&token.index),
            TokenStream::Diag => m.diags.contains(&token.index),
        })
        .map(|m| m.t as i64)
        .collect()
}

/// Number of (first, second) event pairs where the second event falls
/// 0..=k months after the first.
pub fn oracle_score(p: &PatientRecord, truth: &Truth) -> f64 {
    let a = months_with(p, &truth.first);
    let b = months_with(p, &truth.second);
    let k = truth.lag_window as i64;
    let mut count = 0usize;
    for &ta in &a {
        count += b.iter().filter(|&&tb| (0..=k).contains(&(tb - ta))).count();
    }
    count as f64
}

type Grid = Vec<Vec<bool>>;

fn sample_grid(rng: &mut ChaCha8Rng, months: usize, vocab: usize, rate: f64) -> Grid {
    (0..months).map(|_| (0..vocab).map(|_| rng.random_bool(rate)).collect()).collect()
}

struct Streams {
    meds: Grid,
    diags: Grid,
}

impl Streams {
    fn cell(&mut self, token: &TriggerToken, t: usize) -> &mut bool {
        let idx = token.index as usize;
        match token.stream {
            TokenStream::Med => &mut self.meds[t][idx],
            TokenStream::Diag => &mut self.diags[t][idx],
        }
    }

    fn has(&self, token: &TriggerToken, t: usize) -> bool {
        let idx = token.index as usize;
        match token.stream {
            TokenStream::Med => self.meds[t][idx],
            TokenStream::Diag => self.diags[t][idx],
        }
    }

    fn co_occurs(&self, truth: &Truth) -> bool {
        let n = self.meds.len();
        (0..n).any(|ta| {
            self.has(&truth.first, ta)
                && (ta..=(ta + truth.lag_window).min(n - 1)).any(|tb| self.has(&truth.second, tb))
        })
    }

    fn into_months(self) -> Vec<MonthEvents> {
        self.meds
            .into_iter()
            .zip(self.diags)
            .enumerate()
            .map(|(t, (m, d))| MonthEvents {
                t: t as u32,
                meds: (0..m.len() as u32).filter(|&i| m[i as usize]).collect(),
                diags: (0..d.len() as u32).filter(|&i| d[i as usize]).collect(),
            })
            .collect()
    }
}

/// Attempts before falling back to deleting offending second events.
const MAX_RESAMPLES: usize = 1000;

/// Exactly `round(positive_rate × n)` positives, placed by a seeded shuffle.
fn labels(config: &GeneratorConfig) -> Vec<bool> {
    let n_pos = (config.positive_rate * config.n_patients as f64).round() as usize;
    let mut labels: Vec<bool> = (0..config.n_patients).map(|i| i < n_pos).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    labels.shuffle(&mut rng);
    labels
}

fn generate_patient(config: &GeneratorConfig, truth: &Truth, index: usize, positive: bool) -> PatientRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let age = rng.random_range(18.0..80.0);
    let female = rng.random_bool(0.5);
    let planted = positive && rng.random_bool(config.signal);

    let n = config.n_months;
    let draw = |rng: &mut ChaCha8Rng| Streams {
        meds: sample_grid(rng, n, config.med_vocab_size, config.base_rate),
        diags: sample_grid(rng, n, config.diag_vocab_size, config.base_rate),
    };
    let mut streams = draw(&mut rng);
    if planted {
        let lag = rng.random_range(0..=config.lag_window);
        let ta = rng.random_range(0..n - lag);
        *streams.cell(&truth.first, ta) = true;
        *streams.cell(&truth.second, ta + lag) = true;
    } else {
        let mut attempts = 0;
        while streams.co_occurs(truth) && attempts < MAX_RESAMPLES {
            streams = draw(&mut rng);
            attempts += 1;
        }
        if streams.co_occurs(truth) {
            for ta in 0..n {
                if streams.has(&truth.first, ta) {
                    for tb in ta..=(ta + truth.lag_window).min(n - 1) {
                        *streams.cell(&truth.second, tb) = false;
                    }
                }
            }
        }
    }
    PatientRecord {
        id: format!("S{index:06}"),
        label: Label::from_bool(positive),
        demo: demographics(age, female),
        months: streams.into_months(),
    }
}

/// Generates a cohort. Labels are an exact split shuffled by `seed`; given
/// its label, patient `i` depends only on `(seed, i)`.
pub fn generate(config: &GeneratorConfig) -> Result<(EnrolleeTimeMatrix, Vocabulary, Truth)> {
    config.validate()?;
    let truth = config.truth();
    let patients: Vec<PatientRecord> = labels(config)
        .into_par_iter()
        .enumerate()
        .map(|(i, positive)| generate_patient(config, &truth, i, positive))
        .collect();
    let matrix = EnrolleeTimeMatrix {
        patients,
        med_vocab_size: config.med_vocab_size,
        diag_vocab_size: config.diag_vocab_size,
        window: config.window(),
    };
    Ok((matrix, config.vocabulary(), truth))
}
