//! Multi-stream attention encoder and prediction head.
//!
//! Each layer computes three attention pairs over the medication (M) and
//! diagnosis (D) streams, `MM`, `MD` and `DD`, and reconstructs
//! `M̂ = [O_MM, O_MD]·W_m + b_m` and `D̂ = [O_DD, O_MD]·W_d + b_d`.
//! The cross-stream output `O_MD` feeds both reconstructions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::claims::{PatientRecord, DEMO_DIM};
use crate::error::{Error, Result};
use crate::representation::{LstmLayout, LstmParams, HIDDEN_DIM};
use crate::training::Classifier;

/// Attention pair, query stream first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pair {
    MM,
    MD,
    DD,
}

impl Pair {
    pub const ALL: [Pair; 3] = [Pair::MM, Pair::MD, Pair::DD];

    pub fn name(self) -> &'static str {
        match self {
            Pair::MM => "MM",
            Pair::MD => "MD",
            Pair::DD => "DD",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MupodConfig {
    /// Width of each encoded stream; must match the LSTM hidden size.
    pub stream_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub causal: bool,
    pub pooling: Pooling,
    pub residual: bool,
    pub layer_norm: bool,
    pub positional: bool,
    pub fine_tune_encoders: bool,
}

impl Default for MupodConfig {
    fn default() -> Self {
        Self {
            stream_dim: HIDDEN_DIM,
            heads: 1,
            layers: 2,
            causal: false,
            pooling: Pooling::Mean,
            residual: false,
            layer_norm: false,
            positional: true,
            fine_tune_encoders: false,
        }
    }
}

impl MupodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("layers must be at least 1"));
        }
        if self.heads == 0 || !self.stream_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "stream width {} is not divisible by {} heads",
                self.stream_dim, self.heads
            )));
        }
        if self.positional && !self.stream_dim.is_multiple_of(2) {
            return Err(Error::invalid("positional encoding needs an even stream width"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.stream_dim / self.heads
    }
}

/// Sinusoidal position table: `PE(t, 2i) = sin(t / 10000^{2i/d})`,
/// `PE(t, 2i+1) = cos(t / 10000^{2i/d})`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("positional encoding width {dim} must be even")));
    }
    let mut pe = Tensor::zeros(len, dim);
    for t in 0..len {
        for i in 0..dim / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe.set(t, 2 * i, angle.sin());
            pe.set(t, 2 * i + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// Scaled dot-product attention of queries `x_q` over keys `y_k` and
/// values `y_v`. Returns `(weights, output)`.
pub fn cross_attention(g: &mut Graph, x_q: Var, y_k: Var, y_v: Var, causal: bool) -> Result<(Var, Var)> {
    let d_k = g.value(x_q).cols();
    let scores = g.matmul_nt(x_q, y_k)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let att = g.softmax_rows_masked(scores, causal)?;
    let out = g.matmul(att, y_v)?;
    Ok((att, out))
}

/// Row ranges of each patient inside stacked `ΣT × d` matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    ranges: Vec<(usize, usize)>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut start = 0;
        let ranges = lengths
            .iter()
            .map(|&t| {
                let r = (start, t);
                start += t;
                r
            })
            .collect();
        Self { ranges }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn total_rows(&self) -> usize {
        self.ranges.last().map_or(0, |&(s, t)| s + t)
    }

    /// `B × ΣT` matrix that averages each patient's rows.
    pub fn mean_pool_matrix(&self) -> Tensor {
        let mut m = Tensor::zeros(self.len(), self.total_rows());
        for (b, &(s, t)) in self.ranges.iter().enumerate() {
            for r in s..s + t {
                m.set(b, r, 1.0 / t as f64);
            }
        }
        m
    }

    pub fn last_rows(&self) -> Vec<usize> {
        self.ranges.iter().map(|&(s, t)| s + t - 1).collect()
    }

    /// Position table stacked to match the segments.
    pub fn positional(&self, dim: usize) -> Result<Tensor> {
        let longest = self.ranges.iter().map(|r| r.1).max().unwrap_or(0);
        let table = positional_encoding(longest, dim)?;
        let rows: Vec<usize> = self.ranges.iter().flat_map(|&(_, t)| 0..t).collect();
        table.gather_rows(&rows)
    }
}

/// Attention weights and outputs of one pair for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer: usize,
    pub pair: Pair,
    /// `T × T` weights, averaged over heads.
    pub weights: Tensor,
    /// `T × d` output with heads side by side.
    pub output: Tensor,
}

/// Graph handles behind an [`AttentionRecord`].
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub layer: usize,
    pub pair: Pair,
    pub heads: Vec<Var>,
    pub output: Var,
}

impl AttentionVars {
    pub fn resolve(&self, g: &Graph) -> AttentionRecord {
        let mut weights = g.value(self.heads[0]).clone();
        for &h in &self.heads[1..] {
            weights.add_assign(g.value(h));
        }
        let weights = weights.scale(1.0 / self.heads.len() as f64);
        AttentionRecord {
            layer: self.layer,
            pair: self.pair,
            weights,
            output: g.value(self.output).clone(),
        }
    }
}

/// Query/key/value projections for one stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Projections {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
}

impl Projections {
    fn register(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = |n: &str| store.add(format!("{prefix}.{n}"), xavier(d, d, rng));
        Self {
            q: w("q"),
            k: w("k"),
            v: w("v"),
        }
    }

    fn apply(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<[Var; 3]> {
        Ok([
            g.matmul(x, bound[self.q])?,
            g.matmul(x, bound[self.k])?,
            g.matmul(x, bound[self.v])?,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub med: Projections,
    pub diag: Projections,
    pub med_w: ParamId,
    pub med_b: ParamId,
    pub diag_w: ParamId,
    pub diag_b: ParamId,
}

pub(crate) fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

/// Per-patient, per-head slices of stacked projections.
pub(crate) fn split_heads(
    g: &mut Graph,
    stacked: Var,
    segments: &Segments,
    heads: usize,
) -> Result<Vec<Vec<Var>>> {
    let d = g.value(stacked).cols();
    let dk = d / heads;
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = if heads == 1 { stacked } else { g.slice_cols(stacked, h * dk, dk)? };
        let mut rows = Vec::with_capacity(segments.len());
        for &(s, t) in segments.ranges() {
            rows.push(g.slice_rows(cols, s, t)?);
        }
        per_head.push(rows);
    }
    Ok(per_head)
}

/// Multi-head attention for every patient in the batch. `q`, `k`, `v`
/// are indexed `[head][patient]`. Returns the stacked `ΣT × d` output and,
/// per patient, the per-head weights.
pub(crate) fn attend_batch(
    g: &mut Graph,
    q: &[Vec<Var>],
    k: &[Vec<Var>],
    v: &[Vec<Var>],
    causal: bool,
) -> Result<(Var, Vec<Vec<Var>>, Vec<Var>)> {
    let heads = q.len();
    let patients = q[0].len();
    let mut weights = vec![Vec::with_capacity(heads); patients];
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut outs = Vec::with_capacity(patients);
        for p in 0..patients {
            let (att, out) = cross_attention(g, q[h][p], k[h][p], v[h][p], causal)?;
            weights[p].push(att);
            outs.push(out);
        }
        head_outputs.push(outs);
    }
    // Per-patient outputs with heads side by side, then stacked.
    let per_patient: Vec<Var> = if heads == 1 {
        head_outputs.pop().expect("one head")
    } else {
        (0..patients)
            .map(|p| {
                let parts: Vec<Var> = head_outputs.iter().map(|o| o[p]).collect();
                g.concat_cols(&parts)
            })
            .collect::<Result<_>>()?
    };
    let stacked = g.stack_rows(&per_patient)?;
    Ok((stacked, weights, per_patient))
}

pub(crate) fn finish_block(
    g: &mut Graph,
    reconstructed: Var,
    input: Var,
    residual: bool,
    layer_norm: bool,
) -> Result<Var> {
    let mut out = reconstructed;
    if residual {
        out = g.add(out, input)?;
    }
    if layer_norm {
        out = g.layer_norm_rows(out);
    }
    Ok(out)
}

/// One multi-stream layer over a batch. `m` and `d` are the stacked
/// `ΣT × d` stream matrices.
pub fn encoder_layer(
    g: &mut Graph,
    bound: &Bound,
    layout: &LayerLayout,
    config: &MupodConfig,
    segments: &Segments,
    m: Var,
    d: Var,
    layer: usize,
    trace: Option<&mut Vec<Vec<AttentionVars>>>,
) -> Result<(Var, Var)> {
    let heads = config.heads;
    let [mq, mk, mv] = layout.med.apply(g, bound, m)?;
    let [dq, dk, dv] = layout.diag.apply(g, bound, d)?;
    let split = |g: &mut Graph, x: Var| split_heads(g, x, segments, heads);
    let (mq, mk, mv) = (split(g, mq)?, split(g, mk)?, split(g, mv)?);
    let (dq, dk, dv) = (split(g, dq)?, split(g, dk)?, split(g, dv)?);

    let (o_mm, w_mm, p_mm) = attend_batch(g, &mq, &mk, &mv, config.causal)?;
    let (o_md, w_md, p_md) = attend_batch(g, &mq, &dk, &dv, config.causal)?;
    let (o_dd, w_dd, p_dd) = attend_batch(g, &dq, &dk, &dv, config.causal)?;

    if let Some(trace) = trace {
        let triples = [(Pair::MM, w_mm, p_mm), (Pair::MD, w_md, p_md), (Pair::DD, w_dd, p_dd)];
        for (pair, weights, outputs) in triples {
            for (p, (heads, output)) in weights.into_iter().zip(outputs).enumerate() {
                trace[p].push(AttentionVars {
                    layer,
                    pair,
                    heads,
                    output,
                });
            }
        }
    }

    let m_cat = g.concat_cols(&[o_mm, o_md])?;
    let m_hat = g.matmul(m_cat, bound[layout.med_w])?;
    let m_hat = g.add_row(m_hat, bound[layout.med_b])?;
    let d_cat = g.concat_cols(&[o_dd, o_md])?;
    let d_hat = g.matmul(d_cat, bound[layout.diag_w])?;
    let d_hat = g.add_row(d_hat, bound[layout.diag_b])?;
    Ok((
        finish_block(g, m_hat, m, config.residual, config.layer_norm)?,
        finish_block(g, d_hat, d, config.residual, config.layer_norm)?,
    ))
}

/// Per-patient input prepared once before training.
#[derive(Debug, Clone, PartialEq)]
pub struct MupodInput {
    /// Encoder outputs when the encoders are frozen, raw multi-hot
    /// streams otherwise.
    pub med: Tensor,
    pub diag: Tensor,
    pub demo: Tensor,
    pub encoded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MupodModel {
    pub config: MupodConfig,
    pub med_vocab: usize,
    pub diag_vocab: usize,
    pub store: ParamStore,
    pub med_encoder: LstmLayout,
    pub diag_encoder: LstmLayout,
    pub layers: Vec<LayerLayout>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl MupodModel {
    /// Builds a model around pretrained stream encoders. Attention and
    /// head weights are drawn from `seed`.
    pub fn new(config: MupodConfig, med: &LstmParams, diag: &LstmParams, seed: u64) -> Result<Self> {
        config.validate()?;
        for (name, enc) in [("medication", med), ("diagnosis", diag)] {
            if enc.hidden_dim() != config.stream_dim {
                return Err(Error::invalid(format!(
                    "{name} encoder width {} differs from stream width {}",
                    enc.hidden_dim(),
                    config.stream_dim
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut copy_encoder = |store: &mut ParamStore, prefix: &str, src: &LstmParams| {
            let layout = LstmLayout::register(store, prefix, src.input_dim(), src.hidden_dim(), &mut rng);
            for gate in 0..4 {
                *store.get_mut(layout.weight(gate)) = src.gate_weight(gate).clone();
                *store.get_mut(layout.bias(gate)) = src.gate_bias(gate).clone();
            }
            layout
        };
        let med_encoder = copy_encoder(&mut store, "encoder.med", med);
        let diag_encoder = copy_encoder(&mut store, "encoder.diag", diag);

        let d = config.stream_dim;
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("layer{l}");
                LayerLayout {
                    med: Projections::register(&mut store, &format!("{p}.med"), d, &mut rng),
                    diag: Projections::register(&mut store, &format!("{p}.diag"), d, &mut rng),
                    med_w: store.add(format!("{p}.med_w"), xavier(2 * d, d, &mut rng)),
                    med_b: store.add(format!("{p}.med_b"), Tensor::zeros(1, d)),
                    diag_w: store.add(format!("{p}.diag_w"), xavier(2 * d, d, &mut rng)),
                    diag_b: store.add(format!("{p}.diag_b"), Tensor::zeros(1, d)),
                }
            })
            .collect();
        let head_w = store.add("head.w", xavier(2 * d + DEMO_DIM, 2, &mut rng));
        let head_b = store.add("head.b", Tensor::zeros(1, 2));
        store.set_trainable("encoder.", config.fine_tune_encoders);
        Ok(Self {
            config,
            med_vocab: med.input_dim(),
            diag_vocab: diag.input_dim(),
            store,
            med_encoder,
            diag_encoder,
            layers,
            head_w,
            head_b,
        })
    }

    fn encoders_frozen(&self) -> bool {
        !self.config.fine_tune_encoders
    }

    /// Stacked stream matrices (encoded, plus positions) for a batch.
    pub fn stream_inputs(&self, g: &mut Graph, bound: &Bound, batch: &[&MupodInput]) -> Result<(Segments, Var, Var)> {
        let segments = Segments::from_lengths(&batch.iter().map(|x| x.med.rows()).collect::<Vec<_>>());
        let mut streams = [None, None];
        for (slot, pick, layout) in [
            (0, (|x: &MupodInput| &x.med) as fn(&MupodInput) -> &Tensor, &self.med_encoder),
            (1, |x: &MupodInput| &x.diag, &self.diag_encoder),
        ] {
            let parts: Vec<Var> = batch.iter().map(|x| g.constant(pick(x).clone())).collect();
            let stacked = if batch.iter().all(|x| x.encoded) {
                g.stack_rows(&parts)?
            } else if batch.iter().any(|x| x.encoded) {
                return Err(Error::Contract("batch mixes encoded and raw inputs".into()));
            } else {
                let encoded = layout.encode_batch(g, bound, &parts)?;
                g.stack_rows(&encoded)?
            };
            streams[slot] = Some(stacked);
        }
        let [Some(mut m), Some(mut d)] = streams else { unreachable!() };
        if self.config.positional {
            let pe = g.constant(segments.positional(self.config.stream_dim)?);
            m = g.add(m, pe)?;
            d = g.add(d, pe)?;
        }
        Ok((segments, m, d))
    }

    /// The attention stack. Returns the final `M̂`, `D̂`.
    pub fn attend(
        &self,
        g: &mut Graph,
        bound: &Bound,
        segments: &Segments,
        mut m: Var,
        mut d: Var,
        mut trace: Option<&mut Vec<Vec<AttentionVars>>>,
    ) -> Result<(Var, Var)> {
        for (l, layout) in self.layers.iter().enumerate() {
            (m, d) = encoder_layer(g, bound, layout, &self.config, segments, m, d, l, trace.as_deref_mut())?;
        }
        Ok((m, d))
    }

    /// Pools both streams, appends demographics and returns `B × 2`
    /// class probabilities.
    pub fn predict_head(
        &self,
        g: &mut Graph,
        bound: &Bound,
        segments: &Segments,
        m_hat: Var,
        d_hat: Var,
        demo: Var,
    ) -> Result<Var> {
        let (pm, pd) = pool(g, segments, self.config.pooling, m_hat, d_hat)?;
        let features = g.concat_cols(&[pm, pd, demo])?;
        let logits = g.matmul(features, bound[self.head_w])?;
        let logits = g.add_row(logits, bound[self.head_b])?;
        g.softmax_rows(logits)
    }

    /// Forward pass that also returns, per patient, every layer's
    /// attention records.
    pub fn forward_traced(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &[&MupodInput],
    ) -> Result<(Var, Vec<Vec<AttentionVars>>)> {
        let mut trace = vec![Vec::new(); batch.len()];
        let probs = self.forward_inner(g, bound, batch, Some(&mut trace))?;
        Ok((probs, trace))
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &[&MupodInput],
        trace: Option<&mut Vec<Vec<AttentionVars>>>,
    ) -> Result<Var> {
        let (segments, m, d) = self.stream_inputs(g, bound, batch)?;
        let (m_hat, d_hat) = self.attend(g, bound, &segments, m, d, trace)?;
        let demo_rows: Vec<Var> = batch.iter().map(|x| g.constant(x.demo.clone())).collect();
        let demo = g.stack_rows(&demo_rows)?;
        self.predict_head(g, bound, &segments, m_hat, d_hat, demo)
    }

    /// Attention records of one patient, computed without gradients.
    pub fn explain(&self, input: &MupodInput) -> Result<(f64, Vec<AttentionRecord>)> {
        let mut g = Graph::new();
        let bound = self.store.bind_constants(&mut g);
        let (probs, trace) = self.forward_traced(&mut g, &bound, &[input])?;
        let records = trace[0].iter().map(|r| r.resolve(&g)).collect();
        Ok((g.value(probs).get(0, 1), records))
    }
}

pub(crate) fn pool(g: &mut Graph, segments: &Segments, pooling: Pooling, a: Var, b: Var) -> Result<(Var, Var)> {
    match pooling {
        Pooling::Mean => {
            let p = g.constant(segments.mean_pool_matrix());
            Ok((g.matmul(p, a)?, g.matmul(p, b)?))
        }
        Pooling::Last => {
            let rows = segments.last_rows();
            Ok((g.gather_rows(a, &rows)?, g.gather_rows(b, &rows)?))
        }
    }
}

impl Classifier for MupodModel {
    type Input = MupodInput;

    fn prepare(&self, p: &PatientRecord) -> Result<MupodInput> {
        if p.months.is_empty() {
            return Err(Error::invalid(format!("patient {} has no months", p.id)));
        }
        let med = p.med_stream(self.med_vocab);
        let diag = p.diag_stream(self.diag_vocab);
        let demo = p.demo_row();
        if self.encoders_frozen() {
            Ok(MupodInput {
                med: self.med_encoder.encode_tensor(&self.store, &med)?,
                diag: self.diag_encoder.encode_tensor(&self.store, &diag)?,
                demo,
                encoded: true,
            })
        } else {
            Ok(MupodInput {
                med,
                diag,
                demo,
                encoded: false,
            })
        }
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, bound: &Bound, batch: &[&MupodInput]) -> Result<Var> {
        self.forward_inner(g, bound, batch, None)
    }
}
