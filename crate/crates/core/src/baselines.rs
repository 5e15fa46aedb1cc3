//! Comparison models: an LSTM over the concatenated monthly vector and a
//! single-stream transformer encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::claims::{PatientRecord, DEMO_DIM};
use crate::encoder::{
    attend_batch, finish_block, pool, split_heads, xavier, AttentionVars, Pair, Pooling, Segments,
};
use crate::error::{Error, Result};
use crate::representation::LstmLayout;
use crate::training::Classifier;

/// `[meds | diags | demographics]` for every month.
pub fn concat_stream(p: &PatientRecord, med_vocab: usize, diag_vocab: usize) -> Result<Tensor> {
    let m = p.med_stream(med_vocab);
    let d = p.diag_stream(diag_vocab);
    Tensor::concat_cols(&[&m, &d, &p.demo_stream()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConcatLstmConfig {
    pub hidden_dim: usize,
}

impl Default for ConcatLstmConfig {
    fn default() -> Self {
        Self { hidden_dim: 20 }
    }
}

/// One LSTM over `[meds | diags | demographics]` with a softmax head on
/// the last hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatLstm {
    pub config: ConcatLstmConfig,
    pub med_vocab: usize,
    pub diag_vocab: usize,
    pub lstm: LstmLayout,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub store: ParamStore,
}

impl ConcatLstm {
    pub fn new(config: ConcatLstmConfig, med_vocab: usize, diag_vocab: usize, seed: u64) -> Result<Self> {
        if config.hidden_dim == 0 {
            return Err(Error::invalid("hidden width must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = med_vocab + diag_vocab + DEMO_DIM;
        let lstm = LstmLayout::register(&mut store, "lstm", input, config.hidden_dim, &mut rng);
        let head_w = store.add("head.w", xavier(config.hidden_dim, 2, &mut rng));
        let head_b = store.add("head.b", Tensor::zeros(1, 2));
        Ok(Self {
            config,
            med_vocab,
            diag_vocab,
            lstm,
            head_w,
            head_b,
            store,
        })
    }
}

impl Classifier for ConcatLstm {
    type Input = Tensor;

    fn prepare(&self, p: &PatientRecord) -> Result<Tensor> {
        if p.months.is_empty() {
            return Err(Error::invalid(format!("patient {} has no months", p.id)));
        }
        concat_stream(p, self.med_vocab, self.diag_vocab)
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub causal: bool,
    pub pooling: Pooling,
    pub residual: bool,
    pub layer_norm: bool,
    pub positional: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 20,
            heads: 1,
            layers: 2,
            causal: false,
            pooling: Pooling::Mean,
            residual: false,
            layer_norm: false,
            positional: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfLayer {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

/// Single-stream encoder over the embedded `[meds | diags]` vector, with
/// the same pooling and demographic head as the multi-stream model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleTransformer {
    pub config: TransformerConfig,
    pub med_vocab: usize,
    pub diag_vocab: usize,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub layers: Vec<SelfLayer>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub store: ParamStore,
}

impl SingleTransformer {
    pub fn new(config: TransformerConfig, med_vocab: usize, diag_vocab: usize, seed: u64) -> Result<Self> {
        let d = config.d_model;
        if config.layers == 0 || config.heads == 0 || !d.is_multiple_of(config.heads) {
            return Err(Error::invalid(format!(
                "need ≥ 1 layer and a width ({d}) divisible by the head count ({})",
                config.heads
            )));
        }
        if config.positional && !d.is_multiple_of(2) {
            return Err(Error::invalid("positional encoding needs an even width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = med_vocab + diag_vocab;
        let embed_w = store.add("embed.w", xavier(input, d, &mut rng));
        let embed_b = store.add("embed.b", Tensor::zeros(1, d));
        let layers = (0..config.layers)
            .map(|l| SelfLayer {
                q: store.add(format!("layer{l}.q"), xavier(d, d, &mut rng)),
                k: store.add(format!("layer{l}.k"), xavier(d, d, &mut rng)),
                v: store.add(format!("layer{l}.v"), xavier(d, d, &mut rng)),
                w: store.add(format!("layer{l}.w"), xavier(d, d, &mut rng)),
                b: store.add(format!("layer{l}.b"), Tensor::zeros(1, d)),
            })
            .collect();
        let head_w = store.add("head.w", xavier(d + DEMO_DIM, 2, &mut rng));
        let head_b = store.add("head.b", Tensor::zeros(1, 2));
        Ok(Self {
            config,
            med_vocab,
            diag_vocab,
            embed_w,
            embed_b,
            layers,
            head_w,
            head_b,
            store,
        })
    }

    /// Self-attention stack over stacked `ΣT × d` rows; records are
    /// tagged `MM`.
    pub fn attend(
        &self,
        g: &mut Graph,
        bound: &Bound,
        segments: &Segments,
        mut x: Var,
        mut trace: Option<&mut Vec<Vec<AttentionVars>>>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        for (l, layer) in self.layers.iter().enumerate() {
            let q = g.matmul(x, bound[layer.q])?;
            let k = g.matmul(x, bound[layer.k])?;
            let v = g.matmul(x, bound[layer.v])?;
            let q = split_heads(g, q, segments, heads)?;
            let k = split_heads(g, k, segments, heads)?;
            let v = split_heads(g, v, segments, heads)?;
            let (o, weights, outputs) = attend_batch(g, &q, &k, &v, self.config.causal)?;
            if let Some(trace) = trace.as_deref_mut() {
                for (p, (heads, output)) in weights.into_iter().zip(outputs).enumerate() {
                    trace[p].push(AttentionVars {
                        layer: l,
                        pair: Pair::MM,
                        heads,
                        output,
                    });
                }
            }
            let y = g.matmul(o, bound[layer.w])?;
            let y = g.add_row(y, bound[layer.b])?;
            x = finish_block(g, y, x, self.config.residual, self.config.layer_norm)?;
        }
        Ok(x)
    }

    pub fn predict_head(&self, g: &mut Graph, bound: &Bound, segments: &Segments, x: Var, demo: Var) -> Result<Var> {
        let (px, _) = pool(g, segments, self.config.pooling, x, x)?;
        let features = g.concat_cols(&[px, demo])?;
        let logits = g.matmul(features, bound[self.head_w])?;
        let logits = g.add_row(logits, bound[self.head_b])?;
        g.softmax_rows(logits)
    }
}

/// Prepared input for [`SingleTransformer`].
#[derive(Debug, Clone, PartialEq)]
pub struct SingleInput {
    pub events: Tensor,
    pub demo: Tensor,
}

impl Classifier for SingleTransformer {
    type Input = SingleInput;

    fn prepare(&self, p: &PatientRecord) -> Result<SingleInput> {
        if p.months.is_empty() {
            return Err(Error::invalid(format!("patient {} has no months", p.id)));
        }
        let events = Tensor::concat_cols(&[&p.med_stream(self.med_vocab), &p.diag_stream(self.diag_vocab)])?;
        Ok(SingleInput {
            events,
            demo: p.demo_row(),
        })
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, bound: &Bound, batch: &[&SingleInput]) -> Result<Var> {
        let segments = Segments::from_lengths(&batch.iter().map(|x| x.events.rows()).collect::<Vec<_>>());
        let rows: Vec<Var> = batch.iter().map(|x| g.constant(x.events.clone())).collect();
        let raw = g.stack_rows(&rows)?;
        let x = g.matmul(raw, bound[self.embed_w])?;
        let mut x = g.add_row(x, bound[self.embed_b])?;
        if self.config.positional {
            let pe = g.constant(segments.positional(self.config.d_model)?);
            x = g.add(x, pe)?;
        }
        let x = self.attend(g, bound, &segments, x, None)?;
        let demo_rows: Vec<Var> = batch.iter().map(|x| g.constant(x.demo.clone())).collect();
        let demo = g.stack_rows(&demo_rows)?;
        self.predict_head(g, bound, &segments, x, demo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{demographics, Label, MonthEvents};

    fn patient() -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            label: Label::Positive,
            demo: demographics(50.0, true),
            months: vec![
                MonthEvents { t: 0, meds: vec![1], diags: vec![0] },
                MonthEvents { t: 1, meds: vec![], diags: vec![] },
            ],
        }
    }

    #[test]
    fn concat_layout() {
        let x = concat_stream(&patient(), 2, 1).unwrap();
        assert_eq!(x.shape(), crate::error::Shape(2, 6));
        assert_eq!(x.row(0), &[0.0, 1.0, 1.0, 0.5, 1.0, 0.0]);
        assert_eq!(x.row(1), &[0.0, 0.0, 0.0, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn baselines_produce_distributions() {
        let p = patient();
        let lstm = ConcatLstm::new(ConcatLstmConfig::default(), 2, 1, 0).unwrap();
        let tf = SingleTransformer::new(TransformerConfig::default(), 2, 1, 0).unwrap();
        let a = crate::training::predict(&lstm, &[&lstm.prepare(&p).unwrap()]).unwrap();
        let b = crate::training::predict(&tf, &[&tf.prepare(&p).unwrap()]).unwrap();
        assert!(a[0] > 0.0 && a[0] < 1.0);
        assert!(b[0] > 0.0 && b[0] < 1.0);
    }
}
