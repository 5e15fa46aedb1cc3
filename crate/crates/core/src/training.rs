//! Minibatch training, optimisers, random hyperparameter search and
//! checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::{accumulate_grads, Bound, Graph, ParamStore, Tensor, Var};
use crate::claims::PatientRecord;
use crate::error::{Error, Result};
use crate::evaluation::auc;

/// Patients per gradient chunk. Chunks are reduced in a fixed order so
/// results do not depend on the thread count.
pub const CHUNK: usize = 16;

/// A model that maps a batch of prepared inputs to `B × 2` class
/// probabilities.
pub trait Classifier: Sync {
    type Input: Send + Sync;

    fn prepare(&self, p: &PatientRecord) -> Result<Self::Input>;

    fn store(&self) -> &ParamStore;

    fn store_mut(&mut self) -> &mut ParamStore;

    fn forward(&self, g: &mut Graph, bound: &Bound, batch: &[&Self::Input]) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example<I> {
    pub input: I,
    pub label: usize,
}

/// Prepares every patient for `model`, in order.
pub fn examples<C: Classifier>(model: &C, patients: &[&PatientRecord]) -> Result<Vec<Example<C::Input>>> {
    patients
        .par_iter()
        .map(|p| {
            Ok(Example {
                input: model.prepare(p)?,
                label: p.label.index(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Number of minibatch updates.
    pub iterations: usize,
    /// Weight of the `λ‖θ‖²` penalty.
    pub l2: f64,
    pub optimizer: Optimizer,
    /// Updates between validation passes; 0 picks `iterations / 10`.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 64,
            iterations: 500,
            l2: 1e-5,
            optimizer: Optimizer::Adam,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid(format!("l2 weight {} must be non-negative", self.l2)));
        }
        Ok(())
    }

    fn eval_interval(&self) -> usize {
        if self.eval_every > 0 {
            self.eval_every
        } else {
            (self.iterations / 10).max(1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    /// Iteration whose weights were kept.
    pub best_iteration: usize,
    pub best_val_loss: f64,
}

impl TrainingLog {
    pub fn best(&self) -> Option<&LogEntry> {
        self.entries.iter().find(|e| e.iteration == self.best_iteration)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "train_loss", "val_loss", "val_auc"])?;
        for e in &self.entries {
            w.write_record([
                e.iteration.to_string(),
                format!("{:.8}", e.train_loss),
                format!("{:.8}", e.val_loss),
                format!("{:.6}", e.val_auc),
            ])?;
        }
        w.flush().map_err(|e| Error::io("training log", e))?;
        Ok(())
    }
}

/// Positive-class probability for every input.
pub fn predict<C: Classifier>(model: &C, inputs: &[&C::Input]) -> Result<Vec<f64>> {
    let chunks: Vec<Vec<f64>> = inputs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Graph::new();
            let bound = model.store().bind_constants(&mut g);
            let probs = model.forward(&mut g, &bound, chunk)?;
            let p = g.value(probs);
            Ok((0..p.rows()).map(|r| p.get(r, 1)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Mean cross-entropy and positive-class scores over a labelled set.
pub fn score_set<C: Classifier>(model: &C, set: &[Example<C::Input>]) -> Result<(f64, Vec<f64>)> {
    let inputs: Vec<&C::Input> = set.iter().map(|e| &e.input).collect();
    let scores = predict(model, &inputs)?;
    let loss = set
        .iter()
        .zip(&scores)
        .map(|(e, &p)| {
            let q = if e.label == 1 { p } else { 1.0 - p };
            -q.max(crate::autodiff::LOG_EPS).ln()
        })
        .sum::<f64>()
        / set.len().max(1) as f64;
    Ok((loss, scores))
}

/// Mean loss and its gradient over one minibatch.
pub fn batch_gradient<C: Classifier>(
    model: &C,
    batch: &[&Example<C::Input>],
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let total = batch.len() as f64;
    let parts: Vec<(f64, Vec<Option<Tensor>>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Graph::new();
            let bound = model.store().bind(&mut g);
            let inputs: Vec<&C::Input> = chunk.iter().map(|e| &e.input).collect();
            let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
            let probs = model.forward(&mut g, &bound, &inputs)?;
            let loss = g.cross_entropy(probs, &labels)?;
            let weighted = g.scale(loss, chunk.len() as f64 / total);
            let value = g.value(weighted).get(0, 0);
            let mut grads = g.backward(weighted)?;
            Ok((value, model.store().collect_grads(&bound, &mut grads)))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut acc = Vec::new();
    for (l, gr) in parts {
        loss += l;
        accumulate_grads(&mut acc, gr);
    }
    Ok((loss, acc))
}

/// Optimiser state aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: Optimizer, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.rows(), e.tensor.cols()))
            .collect();
        Self {
            kind,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Gradients of trainable entries receive the
    /// `2λθ` penalty term; frozen entries are left alone.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, l2: f64) {
        self.step += 1;
        let t = self.step as i32;
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let theta = entry.tensor.data_mut();
            let grad = grads.get(i).and_then(|g| g.as_ref());
            match self.kind {
                Optimizer::Sgd => {
                    for (k, w) in theta.iter_mut().enumerate() {
                        let g = grad.map_or(0.0, |g| g.data()[k]) + 2.0 * l2 * *w;
                        *w -= lr * g;
                    }
                }
                Optimizer::Adam => {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for (k, w) in theta.iter_mut().enumerate() {
                        let g = grad.map_or(0.0, |g| g.data()[k]) + 2.0 * l2 * *w;
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
                        *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

fn all_finite(grads: &[Option<Tensor>]) -> bool {
    grads.iter().flatten().all(Tensor::is_finite)
}

fn evaluate<C: Classifier>(
    model: &C,
    train_set: &[Example<C::Input>],
    val_set: &[Example<C::Input>],
    iteration: usize,
) -> Result<LogEntry> {
    let (train_loss, _) = score_set(model, train_set)?;
    let (val_loss, scores) = score_set(model, val_set)?;
    let labels: Vec<bool> = val_set.iter().map(|e| e.label == 1).collect();
    let val_auc = auc(&scores, &labels).unwrap_or(0.5);
    Ok(LogEntry {
        iteration,
        train_loss,
        val_loss,
        val_auc,
    })
}

/// Trains `model` in place with shuffled minibatches. Validation runs at
/// iteration 0, every evaluation interval, and after the last update; the
/// weights with the lowest validation loss are restored at the end (ties
/// keep the earlier iteration).
///
/// A non-finite loss or gradient aborts with [`Error::Divergence`] and
/// leaves the model at its last finite weights.
pub fn train<C: Classifier>(
    model: &mut C,
    train_set: &[Example<C::Input>],
    val_set: &[Example<C::Input>],
    config: &TrainConfig,
) -> Result<TrainingLog> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation sets"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::new(config.optimizer, model.store());
    let interval = config.eval_interval();

    let first = evaluate(model, train_set, val_set, 0)?;
    let mut log = TrainingLog {
        entries: vec![first],
        best_iteration: 0,
        best_val_loss: first.val_loss,
    };
    let mut best = model.store().clone();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let batch_size = config.batch_size.min(train_set.len());
    for it in 1..=config.iterations {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&Example<C::Input>> = order[cursor..cursor + batch_size].iter().map(|&i| &train_set[i]).collect();
        cursor += batch_size;

        let (loss, grads) = batch_gradient(model, &batch)?;
        if !loss.is_finite() || !all_finite(&grads) {
            return Err(Error::Divergence { iteration: it, loss });
        }
        let before = model.store().clone();
        opt.apply(model.store_mut(), &grads, config.learning_rate, config.l2);
        if model.store().entries().iter().any(|e| !e.tensor.is_finite()) {
            *model.store_mut() = before;
            return Err(Error::Divergence { iteration: it, loss });
        }

        if it % interval == 0 || it == config.iterations {
            let entry = evaluate(model, train_set, val_set, it)?;
            if !entry.val_loss.is_finite() {
                return Err(Error::Divergence { iteration: it, loss: entry.val_loss });
            }
            if entry.val_loss < log.best_val_loss {
                log.best_val_loss = entry.val_loss;
                log.best_iteration = it;
                best = model.store().clone();
            }
            log.entries.push(entry);
        }
    }
    *model.store_mut() = best;
    Ok(log)
}

/// Hyperparameter grid for random search. Sampled iteration counts are
/// divided by `desk_factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchGrid {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub iterations: Vec<usize>,
    pub l2: Vec<f64>,
    pub desk_factor: usize,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-2, 1e-3, 1e-4],
            batch_sizes: vec![64, 256, 512],
            iterations: vec![10_000, 50_000, 100_000, 200_000],
            l2: vec![1e-4, 1e-5, 1e-6],
            desk_factor: 100,
        }
    }
}

impl SearchGrid {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.batch_sizes.is_empty() || self.iterations.is_empty() || self.l2.is_empty() {
            return Err(Error::invalid("every search axis needs at least one value"));
        }
        if self.desk_factor == 0 {
            return Err(Error::invalid("desk factor must be at least 1"));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.learning_rates.len() * self.batch_sizes.len() * self.iterations.len() * self.l2.len()
    }

    fn config(&self, flat: usize, base: &TrainConfig) -> TrainConfig {
        let mut rest = flat;
        let mut pick = |n: usize| {
            let i = rest % n;
            rest /= n;
            i
        };
        let lr = self.learning_rates[pick(self.learning_rates.len())];
        let bs = self.batch_sizes[pick(self.batch_sizes.len())];
        let it = self.iterations[pick(self.iterations.len())];
        let l2 = self.l2[pick(self.l2.len())];
        TrainConfig {
            learning_rate: lr,
            batch_size: bs,
            iterations: (it / self.desk_factor).max(1),
            l2,
            ..base.clone()
        }
    }

    /// `k` distinct grid points drawn with `seed` (all of them when the
    /// grid is smaller than `k`).
    pub fn sample(&self, k: usize, base: &TrainConfig, seed: u64) -> Result<Vec<TrainConfig>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, self.size(), k.min(self.size()));
        Ok(picks
            .into_iter()
            .map(|flat| {
                let mut c = self.config(flat, base);
                c.seed = rng.random();
                c
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: TrainConfig,
    pub val_auc: f64,
    pub val_loss: f64,
    pub best_iteration: usize,
}

/// Trials ranked by validation AUC, best first; ties keep trial order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub trials: Vec<Trial>,
}

impl Leaderboard {
    pub fn best(&self) -> Option<&Trial> {
        self.trials.first()
    }
}

/// Runs `run` on `k` sampled configurations. `run` returns the trained
/// model's log; its kept checkpoint supplies the trial's scores.
pub fn random_search<F>(grid: &SearchGrid, k: usize, base: &TrainConfig, seed: u64, mut run: F) -> Result<Leaderboard>
where
    F: FnMut(usize, &TrainConfig) -> Result<TrainingLog>,
{
    if k == 0 {
        return Err(Error::invalid("random search needs k ≥ 1"));
    }
    let mut trials = Vec::with_capacity(k);
    for (index, config) in grid.sample(k, base, seed)?.into_iter().enumerate() {
        let log = run(index, &config)?;
        let best = log
            .best()
            .copied()
            .ok_or_else(|| Error::Contract("training log has no kept checkpoint".into()))?;
        trials.push(Trial {
            index,
            config,
            val_auc: best.val_auc,
            val_loss: best.val_loss,
            best_iteration: log.best_iteration,
        });
    }
    trials.sort_by(|a, b| b.val_auc.total_cmp(&a.val_auc).then(a.index.cmp(&b.index)));
    Ok(Leaderboard { trials })
}

/// Tag written into every checkpoint file.
pub const CHECKPOINT_FORMAT: &str = "mupod-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub format: String,
    pub kind: String,
    pub model: M,
}

pub fn save_checkpoint<M: Serialize>(path: &Path, kind: &str, model: &M) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        kind: kind.into(),
        model,
    };
    crate::claims::io::write_json(path, &ck)
}

/// Loads a checkpoint, checking the format tag and model kind.
pub fn load_checkpoint<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<M> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: serde_json::Value = serde_json::from_str(&text)?;
    let format = header.get("format").and_then(|v| v.as_str()).unwrap_or("");
    if format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: format {format:?}, expected {CHECKPOINT_FORMAT:?}",
            path.display()
        )));
    }
    let found = header.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    if found != kind {
        return Err(Error::Checkpoint(format!(
            "{}: holds a {found:?} model, expected {kind:?}",
            path.display()
        )));
    }
    let ck: Checkpoint<M> = serde_json::from_value(header)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(ck.model)
}
