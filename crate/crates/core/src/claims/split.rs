use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnrolleeTimeMatrix, FORMAT_VERSION};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub format: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    /// Fails if any id appears in more than one split.
    pub fn assert_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(Error::Contract(format!("patient {id} appears in two splits")));
            }
        }
        Ok(())
    }
}

/// Label-stratified train/validation/test partition.
///
/// Within each label the ids are sorted, shuffled with `seed`, and cut at
/// `round(fraction × n)`; the test split takes the remainder.
pub fn split_dataset(
    matrix: &EnrolleeTimeMatrix,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Splits> {
    let (f_train, f_val, f_test) = fractions;
    if [f_train, f_val, f_test].iter().any(|f| !(0.0..=1.0).contains(f))
        || (f_train + f_val + f_test - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(format!(
            "split fractions must be in [0,1] and sum to 1, got ({f_train}, {f_val}, {f_test})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Splits {
        format: FORMAT_VERSION.into(),
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for positive in [false, true] {
        let mut ids: Vec<&str> = matrix
            .patients
            .iter()
            .filter(|p| p.label.is_positive() == positive)
            .map(|p| p.id.as_str())
            .collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = ((f_train * n as f64).round() as usize).min(n);
        let n_val = ((f_val * n as f64).round() as usize).min(n - n_train);
        out.train.extend(ids[..n_train].iter().map(|s| s.to_string()));
        out.val.extend(ids[n_train..n_train + n_val].iter().map(|s| s.to_string()));
        out.test.extend(ids[n_train + n_val..].iter().map(|s| s.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{demographics, Label, MonthEvents, PatientRecord, StudyWindow};

    fn matrix(n: usize) -> EnrolleeTimeMatrix {
        let patients = (0..n)
            .map(|i| PatientRecord {
                id: format!("p{i:04}"),
                label: Label::from_bool(i % 2 == 0),
                demo: demographics(40.0, false),
                months: vec![MonthEvents { t: 0, meds: vec![0], diags: vec![] }],
            })
            .collect();
        EnrolleeTimeMatrix {
            patients,
            med_vocab_size: 1,
            diag_vocab_size: 1,
            window: StudyWindow::default(),
        }
    }

    #[test]
    fn degenerate_all_train() {
        let s = split_dataset(&matrix(10), (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (10, 0, 0));
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(split_dataset(&matrix(10), (0.5, 0.2, 0.2), 1).is_err());
        assert!(split_dataset(&matrix(10), (1.2, -0.2, 0.0), 1).is_err());
    }

    #[test]
    fn same_seed_same_split() {
        let m = matrix(100);
        assert_eq!(
            split_dataset(&m, (0.8, 0.1, 0.1), 9).unwrap(),
            split_dataset(&m, (0.8, 0.1, 0.1), 9).unwrap()
        );
        assert_ne!(
            split_dataset(&m, (0.8, 0.1, 0.1), 9).unwrap(),
            split_dataset(&m, (0.8, 0.1, 0.1), 10).unwrap()
        );
    }
}
