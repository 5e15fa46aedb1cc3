//! Per-stream LSTM encoders that turn monthly multi-hot vectors into
//! fixed-width hidden states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::claims::PatientRecord;
use crate::error::{Error, Result};
use crate::training::{examples, train, Classifier, TrainConfig, TrainingLog};

/// Hidden width of each stream encoder.
pub const HIDDEN_DIM: usize = 10;

/// Gate order used for parameter names and storage.
const GATES: [&str; 4] = ["input", "forget", "output", "cell"];

/// Parameter handles for one LSTM inside a [`ParamStore`]. Each gate has
/// a `(input_dim + hidden_dim) × hidden_dim` weight and a `1 × hidden_dim`
/// bias; the first `input_dim` weight rows act on `x`, the rest on `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmLayout {
    pub input_dim: usize,
    pub hidden_dim: usize,
    weights: [ParamId; 4],
    biases: [ParamId; 4],
}

impl LstmLayout {
    /// Adds freshly initialised gate parameters under `prefix`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let scale = (1.0 / (input_dim + hidden_dim) as f64).sqrt();
        let weights = GATES.map(|gate| {
            store.add(
                format!("{prefix}.w_{gate}"),
                Tensor::uniform(input_dim + hidden_dim, hidden_dim, scale, rng),
            )
        });
        let biases = GATES.map(|gate| {
            // Forget gate starts open.
            let init = if gate == "forget" { 1.0 } else { 0.0 };
            store.add(format!("{prefix}.b_{gate}"), Tensor::filled(1, hidden_dim, init))
        });
        Self {
            input_dim,
            hidden_dim,
            weights,
            biases,
        }
    }

    pub fn weight(&self, gate: usize) -> ParamId {
        self.weights[gate]
    }

    pub fn bias(&self, gate: usize) -> ParamId {
        self.biases[gate]
    }

    /// One recurrence step for a batch of rows: `x` is `B × input_dim`,
    /// `h` and `c` are `B × hidden_dim`.
    pub fn step(&self, g: &mut Graph, bound: &Bound, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xh = g.concat_cols(&[x, h])?;
        let mut gate = |i: usize| -> Result<Var> {
            let z = g.matmul(xh, bound[self.weights[i]])?;
            g.add_row(z, bound[self.biases[i]])
        };
        let (zi, zf, zo, zc) = (gate(0)?, gate(1)?, gate(2)?, gate(3)?);
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let o = g.sigmoid(zo);
        let cand = g.tanh(zc);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Encodes several sequences at once. Returns, per sequence, a
    /// `T_i × hidden_dim` matrix of hidden states starting from
    /// `h₀ = c₀ = 0`.
    pub fn encode_batch(&self, g: &mut Graph, bound: &Bound, streams: &[Var]) -> Result<Vec<Var>> {
        let run = self.run_batch(g, bound, streams)?;
        run.per_sequence(g)
    }

    /// Final hidden state of each sequence as a `B × hidden_dim` matrix.
    pub fn last_hidden_batch(&self, g: &mut Graph, bound: &Bound, streams: &[Var]) -> Result<Var> {
        let run = self.run_batch(g, bound, streams)?;
        g.gather_rows(run.all_hidden, &run.last_rows)
    }

    fn run_batch(&self, g: &mut Graph, bound: &Bound, streams: &[Var]) -> Result<BatchRun> {
        if streams.is_empty() {
            return Err(Error::invalid("encode_batch needs at least one sequence"));
        }
        let lens: Vec<usize> = streams.iter().map(|&s| g.value(s).rows()).collect();
        if let Some(i) = lens.iter().position(|&t| t == 0) {
            return Err(Error::invalid(format!("sequence {i} has no time steps")));
        }
        for &s in streams {
            if g.value(s).cols() != self.input_dim {
                return Err(Error::dim(
                    "lstm input",
                    g.value(s).shape(),
                    crate::error::Shape(g.value(s).rows(), self.input_dim),
                ));
            }
        }
        // Longest first so the active set at every step is a row prefix.
        let mut order: Vec<usize> = (0..streams.len()).collect();
        order.sort_by(|&a, &b| lens[b].cmp(&lens[a]).then(a.cmp(&b)));
        let mut offsets = vec![0; streams.len()];
        let mut acc = 0;
        for (i, &t) in lens.iter().enumerate() {
            offsets[i] = acc;
            acc += t;
        }
        let all_inputs = g.stack_rows(streams)?;

        let max_t = lens[order[0]];
        let hidden = self.hidden_dim;
        let mut h = g.constant(Tensor::zeros(streams.len(), hidden));
        let mut c = g.constant(Tensor::zeros(streams.len(), hidden));
        let mut step_outputs = Vec::with_capacity(max_t);
        // Row of (sequence, t) inside the stacked step outputs.
        let mut row_of = vec![Vec::new(); streams.len()];
        let mut emitted = 0;
        for t in 0..max_t {
            let active = order.iter().take_while(|&&s| lens[s] > t).count();
            if active < g.value(h).rows() {
                h = g.slice_rows(h, 0, active)?;
                c = g.slice_rows(c, 0, active)?;
            }
            let rows: Vec<usize> = order[..active].iter().map(|&s| offsets[s] + t).collect();
            let x = g.gather_rows(all_inputs, &rows)?;
            let (h_next, c_next) = self.step(g, bound, x, h, c)?;
            for (r, &s) in order[..active].iter().enumerate() {
                row_of[s].push(emitted + r);
            }
            emitted += active;
            step_outputs.push(h_next);
            h = h_next;
            c = c_next;
        }
        let all_hidden = g.stack_rows(&step_outputs)?;
        let last_rows = row_of.iter().map(|r| *r.last().expect("non-empty")).collect();
        Ok(BatchRun {
            all_hidden,
            row_of,
            last_rows,
        })
    }

    /// Hidden states for a single sequence computed without gradients.
    pub fn encode_tensor(&self, store: &ParamStore, stream: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = store.bind_constants(&mut g);
        let x = g.constant(stream.clone());
        let out = self.encode_batch(&mut g, &bound, &[x])?;
        Ok(g.value(out[0]).clone())
    }
}

struct BatchRun {
    all_hidden: Var,
    row_of: Vec<Vec<usize>>,
    last_rows: Vec<usize>,
}

impl BatchRun {
    fn per_sequence(&self, g: &mut Graph) -> Result<Vec<Var>> {
        let flat: Vec<usize> = self.row_of.iter().flatten().copied().collect();
        let ordered = g.gather_rows(self.all_hidden, &flat)?;
        let mut out = Vec::with_capacity(self.row_of.len());
        let mut start = 0;
        for rows in &self.row_of {
            out.push(g.slice_rows(ordered, start, rows.len())?);
            start += rows.len();
        }
        Ok(out)
    }
}

/// Standalone LSTM weights for one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub layout: LstmLayout,
    pub store: ParamStore,
}

impl LstmParams {
    pub fn new(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = LstmLayout::register(&mut store, "lstm", input_dim, hidden_dim, &mut rng);
        Self { layout, store }
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.layout.hidden_dim
    }

    pub fn gate_weight(&self, gate: usize) -> &Tensor {
        self.store.get(self.layout.weight(gate))
    }

    pub fn gate_bias(&self, gate: usize) -> &Tensor {
        self.store.get(self.layout.bias(gate))
    }

    pub fn gate_weight_mut(&mut self, gate: usize) -> &mut Tensor {
        self.store.get_mut(self.layout.weight(gate))
    }

    pub fn gate_bias_mut(&mut self, gate: usize) -> &mut Tensor {
        self.store.get_mut(self.layout.bias(gate))
    }
}

/// Single LSTM step on plain tensors (`1 × input_dim` input).
pub fn lstm_step(x: &Tensor, h: &Tensor, c: &Tensor, params: &LstmParams) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bound = params.store.bind_constants(&mut g);
    let (x, h, c) = (g.constant(x.clone()), g.constant(h.clone()), g.constant(c.clone()));
    let (h2, c2) = params.layout.step(&mut g, &bound, x, h, c)?;
    Ok((g.value(h2).clone(), g.value(c2).clone()))
}

/// Runs the encoder over a `T × input_dim` stream from a zero state and
/// returns the `T × hidden_dim` hidden states.
pub fn encode_stream(stream: &Tensor, params: &LstmParams) -> Result<Tensor> {
    if stream.rows() == 0 {
        return Err(Error::invalid("encode_stream needs T ≥ 1"));
    }
    params.layout.encode_tensor(&params.store, stream)
}

/// Which event stream an encoder reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Med,
    Diag,
}

impl StreamKind {
    pub fn extract(self, p: &PatientRecord, med_vocab: usize, diag_vocab: usize) -> Tensor {
        match self {
            StreamKind::Med => p.med_stream(med_vocab),
            StreamKind::Diag => p.diag_stream(diag_vocab),
        }
    }
}

/// LSTM encoder plus a linear softmax head on the last hidden state,
/// used to pretrain a stream encoder on the outcome label.
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub stream: StreamKind,
    pub med_vocab: usize,
    pub diag_vocab: usize,
    pub lstm: LstmLayout,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub store: ParamStore,
}

impl PretrainModel {
    pub fn new(stream: StreamKind, med_vocab: usize, diag_vocab: usize, hidden_dim: usize, seed: u64) -> Self {
        let input_dim = match stream {
            StreamKind::Med => med_vocab,
            StreamKind::Diag => diag_vocab,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lstm = LstmLayout::register(&mut store, "lstm", input_dim, hidden_dim, &mut rng);
        let scale = (1.0 / hidden_dim as f64).sqrt();
        let head_w = store.add("head.w", Tensor::uniform(hidden_dim, 2, scale, &mut rng));
        let head_b = store.add("head.b", Tensor::zeros(1, 2));
        Self {
            stream,
            med_vocab,
            diag_vocab,
            lstm,
            head_w,
            head_b,
            store,
        }
    }

    /// Encoder weights with the head dropped.
    pub fn encoder(&self) -> LstmParams {
        let mut store = ParamStore::new();
        for e in self.store.entries().iter().filter(|e| e.name.starts_with("lstm.")) {
            store.add(e.name.clone(), e.tensor.clone());
        }
        LstmParams {
            layout: self.lstm,
            store,
        }
    }
}

impl Classifier for PretrainModel {
    type Input = Tensor;

    fn prepare(&self, p: &PatientRecord) -> Result<Tensor> {
        if p.months.is_empty() {
            return Err(Error::invalid(format!("patient {} has no months", p.id)));
        }
        Ok(self.stream.extract(p, self.med_vocab, self.diag_vocab))
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, bound: &Bound, batch: &[&Tensor]) -> Result<Var> {
        let streams: Vec<Var> = batch.iter().map(|s| g.constant((*s).clone())).collect();
        let last = self.lstm.last_hidden_batch(g, bound, &streams)?;
        let logits = g.matmul(last, bound[self.head_w])?;
        let logits = g.add_row(logits, bound[self.head_b])?;
        g.softmax_rows(logits)
    }
}

/// Settings for supervised encoder pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub hidden_dim: usize,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: HIDDEN_DIM,
            train: TrainConfig::default(),
        }
    }
}

/// Trains an LSTM encoder with a linear head on the last hidden state to
/// predict the label from one stream, then discards the head.
pub fn pretrain_encoder(
    train_set: &[&PatientRecord],
    val_set: &[&PatientRecord],
    stream: StreamKind,
    med_vocab: usize,
    diag_vocab: usize,
    config: &PretrainConfig,
) -> Result<(LstmParams, TrainingLog)> {
    let mut model = PretrainModel::new(stream, med_vocab, diag_vocab, config.hidden_dim, config.train.seed);
    let train_set = examples(&model, train_set)?;
    let val_set = examples(&model, val_set)?;
    let log = train(&mut model, &train_set, &val_set, &config.train)?;
    Ok((model.encoder(), log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_params(input: usize, hidden: usize) -> LstmParams {
        let mut p = LstmParams::new(input, hidden, 0);
        for e in p.store.entries_mut() {
            e.tensor = Tensor::zeros(e.tensor.rows(), e.tensor.cols());
        }
        p
    }

    #[test]
    fn zero_params_from_zero_state() {
        let p = zero_params(3, 4);
        let (h, c) = lstm_step(
            &Tensor::row_vector(&[1.0, -2.0, 0.5]),
            &Tensor::zeros(1, 4),
            &Tensor::zeros(1, 4),
            &p,
        )
        .unwrap();
        assert_eq!(h, Tensor::zeros(1, 4));
        assert_eq!(c, Tensor::zeros(1, 4));
    }

    #[test]
    fn zero_params_halve_the_cell() {
        let p = zero_params(2, 3);
        let c0 = Tensor::row_vector(&[2.0, -1.0, 0.4]);
        let (h, c) = lstm_step(&Tensor::row_vector(&[1.0, 1.0]), &Tensor::zeros(1, 3), &c0, &p).unwrap();
        for k in 0..3 {
            let half = 0.5 * c0.get(0, k);
            assert!((c.get(0, k) - half).abs() < 1e-15);
            assert!((h.get(0, k) - 0.5 * half.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn encoding_single_step_equals_one_lstm_step() {
        let p = LstmParams::new(3, 4, 5);
        let x = Tensor::row_vector(&[0.0, 1.0, 1.0]);
        let enc = encode_stream(&x, &p).unwrap();
        let (h, _) = lstm_step(&x, &Tensor::zeros(1, 4), &Tensor::zeros(1, 4), &p).unwrap();
        assert_eq!(enc, h);
    }

    #[test]
    fn zero_stream_with_zero_biases_is_a_fixed_point() {
        let mut p = LstmParams::new(3, 4, 2);
        for gate in 0..4 {
            *p.gate_bias_mut(gate) = Tensor::zeros(1, 4);
        }
        let enc = encode_stream(&Tensor::zeros(6, 3), &p).unwrap();
        assert_eq!(enc, Tensor::zeros(6, 4));
    }

    #[test]
    fn batched_encoding_matches_single_sequences() {
        let p = LstmParams::new(2, 3, 8);
        let seqs = [
            Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]),
            Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 1.0], &[1.0, 0.0], &[0.0, 0.0]]),
            Tensor::from_rows(&[&[1.0, 1.0]]),
        ];
        let mut g = Graph::new();
        let bound = p.store.bind_constants(&mut g);
        let vars: Vec<Var> = seqs.iter().map(|s| g.constant(s.clone())).collect();
        let outs = p.layout.encode_batch(&mut g, &bound, &vars).unwrap();
        let last = p.layout.last_hidden_batch(&mut g, &bound, &vars).unwrap();
        for (i, s) in seqs.iter().enumerate() {
            let single = encode_stream(s, &p).unwrap();
            assert_eq!(g.value(outs[i]), &single);
            assert_eq!(g.value(last).row(i), single.row(single.rows() - 1));
        }
    }

    #[test]
    fn empty_stream_is_rejected() {
        let p = LstmParams::new(2, 3, 0);
        assert!(encode_stream(&Tensor::zeros(0, 2), &p).is_err());
    }
}
