use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use super::{PatientRecord, AGE_SCALE};
use crate::error::{Error, Result};

/// Width of the age strata used for matching.
pub const AGE_BAND_YEARS: f64 = 5.0;

/// Largest tolerated gap between case and control mean opioid-use ratios.
pub const MAX_RATIO_GAP: f64 = 0.05;

/// Upper tail `P(X ≥ k)` of a hypergeometric variable: `n` draws without
/// replacement from `population` items of which `successes` are marked.
pub fn hypergeometric_pvalue(population: u64, successes: u64, draws: u64, k: u64) -> Result<f64> {
    if successes > population || draws > population || k > successes.min(draws) {
        return Err(Error::invalid(format!(
            "inconsistent hypergeometric counts N={population} K={successes} n={draws} k={k}"
        )));
    }
    let lowest = draws.saturating_sub(population - successes);
    if k <= lowest {
        return Ok(1.0);
    }
    let highest = successes.min(draws);
    let ln_total = ln_binomial(population, draws);
    // Descending accumulation keeps the result monotone in k.
    let tail = (k..=highest).rev().fold(0.0, |acc, i| {
        let ln_term = ln_binomial(successes, i) + ln_binomial(population - successes, draws - i)
            - ln_total;
        acc + ln_term.exp()
    });
    Ok(tail.min(1.0))
}

/// Fraction of a patient's non-empty months that include an opioid.
pub fn opioid_use_ratio(p: &PatientRecord, opioid_tokens: &BTreeSet<u32>) -> f64 {
    let active = p.active_months();
    if active == 0 {
        return 0.0;
    }
    let with_opioid = p
        .months
        .iter()
        .filter(|m| m.meds.iter().any(|c| opioid_tokens.contains(c)))
        .count();
    with_opioid as f64 / active as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub case_age_mean: f64,
    pub case_age_sd: f64,
    pub control_age_mean: f64,
    pub control_age_sd: f64,
    pub case_female: f64,
    pub control_female: f64,
    pub case_opioid_ratio: f64,
    pub control_opioid_ratio: f64,
}

impl MatchReport {
    pub fn ratio_gap(&self) -> f64 {
        (self.case_opioid_ratio - self.control_opioid_ratio).abs()
    }
}

/// 1:1 matched case-control cohort; `case_ids[i]` is paired with
/// `control_ids[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub case_ids: Vec<String>,
    pub control_ids: Vec<String>,
    pub report: MatchReport,
}

struct Subject<'a> {
    id: &'a str,
    age: f64,
    female: bool,
    ratio: f64,
}

impl<'a> Subject<'a> {
    fn of(p: &'a PatientRecord, opioids: &BTreeSet<u32>) -> Self {
        Subject {
            id: &p.id,
            age: p.demo[0] * AGE_SCALE,
            female: p.demo[1] > 0.5,
            ratio: opioid_use_ratio(p, opioids),
        }
    }

    fn stratum(&self) -> (bool, i64) {
        (self.female, (self.age / AGE_BAND_YEARS).floor() as i64)
    }
}

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Matches every case to one unused control of the same sex and 5-year
/// age band, choosing the candidate with the closest opioid-use ratio
/// (then closest age, then smallest id). Cases are visited in a
/// seed-shuffled order.
pub fn match_controls(
    cases: &[PatientRecord],
    pool: &[PatientRecord],
    opioid_tokens: &BTreeSet<u32>,
    seed: u64,
) -> Result<Cohort> {
    let case_ids: BTreeSet<&str> = cases.iter().map(|p| p.id.as_str()).collect();
    let cases: Vec<Subject> = cases.iter().map(|p| Subject::of(p, opioid_tokens)).collect();
    let pool: Vec<Subject> = pool
        .iter()
        .filter(|p| !case_ids.contains(p.id.as_str()))
        .map(|p| Subject::of(p, opioid_tokens))
        .collect();

    let mut strata: BTreeMap<(bool, i64), Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        strata.entry(s.stratum()).or_default().push(i);
    }

    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut used = vec![false; pool.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(cases.len());
    let mut unmatched = Vec::new();
    for ci in order {
        let case = &cases[ci];
        let best = strata.get(&case.stratum()).and_then(|cands| {
            cands.iter().copied().filter(|&j| !used[j]).min_by(|&a, &b| {
                let (pa, pb) = (&pool[a], &pool[b]);
                let key = |p: &Subject| ((p.ratio - case.ratio).abs(), (p.age - case.age).abs());
                key(pa)
                    .partial_cmp(&key(pb))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| pa.id.cmp(pb.id))
            })
        });
        match best {
            Some(j) => {
                used[j] = true;
                pairs.push((ci, j));
            }
            None => unmatched.push(case.id.to_string()),
        }
    }
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::PartialMatch { unmatched });
    }
    pairs.sort_by(|a, b| cases[a.0].id.cmp(cases[b.0].id));

    let case_of = |&(c, _): &(usize, usize)| &cases[c];
    let ctrl_of = |&(_, j): &(usize, usize)| &pool[j];
    let (case_age_mean, case_age_sd) = mean_sd(pairs.iter().map(|p| case_of(p).age));
    let (control_age_mean, control_age_sd) = mean_sd(pairs.iter().map(|p| ctrl_of(p).age));
    let female = |s: &Subject| if s.female { 1.0 } else { 0.0 };
    let report = MatchReport {
        case_age_mean,
        case_age_sd,
        control_age_mean,
        control_age_sd,
        case_female: mean_sd(pairs.iter().map(|p| female(case_of(p)))).0,
        control_female: mean_sd(pairs.iter().map(|p| female(ctrl_of(p)))).0,
        case_opioid_ratio: mean_sd(pairs.iter().map(|p| case_of(p).ratio)).0,
        control_opioid_ratio: mean_sd(pairs.iter().map(|p| ctrl_of(p).ratio)).0,
    };
    if report.ratio_gap() > MAX_RATIO_GAP {
        return Err(Error::invalid(format!(
            "mean opioid-use ratio differs by {:.4} between cases and controls (limit {MAX_RATIO_GAP})",
            report.ratio_gap()
        )));
    }
    Ok(Cohort {
        case_ids: pairs.iter().map(|p| case_of(p).id.to_string()).collect(),
        control_ids: pairs.iter().map(|p| ctrl_of(p).id.to_string()).collect(),
        report,
    })
}
