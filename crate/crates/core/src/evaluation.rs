//! Threshold metrics, rank AUC and evaluation under subsampled positives.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default positive-to-negative ratios for imbalanced evaluation.
pub const DEFAULT_RATIOS: [f64; 3] = [0.5, 0.2, 0.1];
pub const DEFAULT_REPEATS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// Counts predictions with `score ≥ threshold` as positive.
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion { tp: 0, fp: 0, tn: 0, fn_: 0 };
        for (&s, &y) in scores.iter().zip(labels) {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }
}

/// Threshold metrics. `undefined` lists the ones whose denominator was
/// zero; those are reported as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub undefined: Vec<String>,
}

fn ratio(num: usize, den: usize, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.into());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_metrics(c: &Confusion) -> Metrics {
    let mut undefined = Vec::new();
    let total = c.tp + c.fp + c.tn + c.fn_;
    let accuracy = ratio(c.tp + c.tn, total, "accuracy", &mut undefined);
    let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut undefined);
    let recall = ratio(c.tp, c.tp + c.fn_, "recall", &mut undefined);
    let f1 = if precision + recall == 0.0 {
        undefined.push("f1".into());
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        accuracy,
        precision,
        recall,
        f1,
        undefined,
    }
}

/// Area under the ROC curve via the rank-sum statistic, ties counted as
/// one half. Errors when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tied groups, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Metrics of one scored set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n_pos: usize,
    pub n_neg: usize,
    pub metrics: Metrics,
    pub auc: f64,
}

pub fn evaluate_scores(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Evaluation> {
    let auc = auc(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    Ok(Evaluation {
        n_pos,
        n_neg: labels.len() - n_pos,
        metrics: confusion_metrics(&Confusion::at(scores, labels, threshold)),
        auc,
    })
}

/// Averages over repeated subsamples at one positive-to-negative ratio.
/// Accuracy is not reported at reduced ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalancedRow {
    pub ratio: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

/// Keeps every negative and, per repeat, `round(ratio × |neg|)` positives
/// drawn without replacement; metrics are averaged across repeats.
pub fn imbalanced_eval(
    scores: &[f64],
    labels: &[bool],
    ratios: &[f64],
    repeats: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<ImbalancedRow>> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(ratios.len());
    for &r in ratios {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!("ratio {r} must be positive")));
        }
        let n_pos = (r * neg.len() as f64).round() as usize;
        if n_pos > pos.len() {
            return Err(Error::invalid(format!(
                "ratio {r} needs {n_pos} positives but only {} are available",
                pos.len()
            )));
        }
        if n_pos == 0 {
            return Err(Error::invalid(format!("ratio {r} leaves no positives")));
        }
        let (mut p, mut rc, mut f, mut a) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..repeats {
            let mut idx: Vec<usize> = sample(&mut rng, pos.len(), n_pos).into_iter().map(|i| pos[i]).collect();
            idx.extend(&neg);
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            let e = evaluate_scores(&s, &y, threshold)?;
            p += e.metrics.precision;
            rc += e.metrics.recall;
            f += e.metrics.f1;
            a += e.auc;
        }
        let k = repeats as f64;
        rows.push(ImbalancedRow {
            ratio: r,
            n_pos,
            n_neg: neg.len(),
            precision: p / k,
            recall: rc / k,
            f1: f / k,
            auc: a / k,
        });
    }
    Ok(rows)
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    /// `None` for the full test set.
    pub ratio: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub accuracy: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

impl MetricsRow {
    pub fn full(model: &str, e: &Evaluation) -> Self {
        Self {
            model: model.into(),
            ratio: None,
            n_pos: e.n_pos,
            n_neg: e.n_neg,
            accuracy: Some(e.metrics.accuracy),
            precision: e.metrics.precision,
            recall: e.metrics.recall,
            f1: e.metrics.f1,
            auc: e.auc,
        }
    }

    pub fn imbalanced(model: &str, r: &ImbalancedRow) -> Self {
        Self {
            model: model.into(),
            ratio: Some(r.ratio),
            n_pos: r.n_pos,
            n_neg: r.n_neg,
            accuracy: None,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            auc: r.auc,
        }
    }
}

pub fn write_metrics_csv<W: std::io::Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "ratio", "n_pos", "n_neg", "accuracy", "precision", "recall", "f1", "auc"])?;
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        w.write_record([
            r.model.clone(),
            r.ratio.map(|x| x.to_string()).unwrap_or_else(|| "all".into()),
            r.n_pos.to_string(),
            r.n_neg.to_string(),
            opt(r.accuracy),
            format!("{:.6}", r.precision),
            format!("{:.6}", r.recall),
            format!("{:.6}", r.f1),
            format!("{:.6}", r.auc),
        ])?;
    }
    w.flush().map_err(|e| Error::io("metrics csv", e))?;
    Ok(())
}

/// Fixed-width text rendering of the metrics table.
pub fn format_table(rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "model", "ratio", "pos", "neg", "accuracy", "precision", "recall", "f1", "auc"
    );
    for r in rows {
        let ratio = r.ratio.map(|x| format!("{x}")).unwrap_or_else(|| "all".into());
        let acc = r.accuracy.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<14} {:>6} {:>6} {:>6} {:>9} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            r.model, ratio, r.n_pos, r.n_neg, acc, r.precision, r.recall, r.f1, r.auc
        );
    }
    s
}
