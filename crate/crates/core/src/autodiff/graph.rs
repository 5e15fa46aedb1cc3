//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value. Nodes only
//! reference earlier nodes, so reverse insertion order is a valid
//! topological order for [`Graph::backward`].

use crate::error::{Error, Result, Shape};

use super::tensor::{Tensor, LAYER_NORM_EPS};

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Entrywise operation kinds. Binary kinds carry their right operand.
#[derive(Debug, Clone, Copy)]
pub enum Elementwise {
    Add(Var),
    Sub(Var),
    Mul(Var),
    Sigmoid,
    Tanh,
    Scale(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    LayerNorm(Var),
    CrossEntropy(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::StackRows(..) => "stack_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::LayerNorm(..) => "layer_norm",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::LayerNorm(a)
            | Op::CrossEntropy(a, _) => vec![*a],
            Op::ConcatCols(parts) | Op::StackRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A single-threaded tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a fixed input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.parents().iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn elementwise(&mut self, a: Var, kind: Elementwise) -> Result<Var> {
        let x = self.value(a);
        let (value, op) = match kind {
            Elementwise::Add(b) => (x.add(self.value(b))?, Op::Add(a, b)),
            Elementwise::Sub(b) => (x.sub(self.value(b))?, Op::Sub(a, b)),
            Elementwise::Mul(b) => (x.mul(self.value(b))?, Op::Mul(a, b)),
            Elementwise::Sigmoid => (x.sigmoid(), Op::Sigmoid(a)),
            Elementwise::Tanh => (x.tanh(), Op::Tanh(a)),
            Elementwise::Scale(c) => (x.scale(c), Op::Scale(a, c)),
        };
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, Elementwise::Add(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, Elementwise::Sub(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, Elementwise::Mul(b))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).sigmoid();
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).tanh();
        self.push(value, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    /// Broadcasts a `1×n` bias over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, false)
    }

    /// Softmax over each row; with `causal`, future columns get exactly zero.
    pub fn softmax_rows_masked(&mut self, a: Var, causal: bool) -> Result<Var> {
        let value = self.value(a).softmax_rows(causal)?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&values)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::stack_rows(&values)?;
        Ok(self.push(value, Op::StackRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        Ok(self.push(value, Op::SliceRows(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(indices)?;
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec())))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).mean_rows()?;
        Ok(self.push(value, Op::MeanRows(a)))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).layer_norm_rows();
        self.push(value, Op::LayerNorm(a))
    }

    /// Mean negative log-likelihood of the true class, `−log` clamped at
    /// [`LOG_EPS`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let p = self.value(probs);
        if labels.len() != p.rows() {
            return Err(Error::dim(
                "cross_entropy",
                p.shape(),
                Shape(labels.len(), p.cols()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= p.cols()) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                p.cols()
            )));
        }
        let n = labels.len() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -p.get(i, l).max(LOG_EPS).ln())
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(probs, labels.to_vec())))
    }

    /// Propagates gradients from a `1×1` root. A graph can be
    /// differentiated once; call [`Graph::reset`] to allow another pass.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this graph; reset before differentiating again".into(),
            ));
        }
        let root_shape = self.value(root).shape();
        if root_shape != Shape(1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {root_shape}"
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.tracked {
                self.propagate(id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Clears the consumed flag so [`Graph::backward`] may run again.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut send = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].tracked {
                    send(*a, g.matmul_nt(self.value(*b))?);
                }
                if self.nodes[b.0].tracked {
                    send(*b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.nodes[a.0].tracked {
                    send(*a, g.matmul(self.value(*b))?);
                }
                if self.nodes[b.0].tracked {
                    send(*b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                send(*a, g.mul(self.value(*b))?);
                send(*b, g.mul(self.value(*a))?);
            }
            Op::AddRow(a, bias) => {
                send(*a, g.clone());
                let mut col_sums = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (s, v) in col_sums.data_mut().iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                send(*bias, col_sums);
            }
            Op::Scale(a, c) => send(*a, g.scale(*c)),
            Op::Sigmoid(a) => send(*a, g.zip_map(&node.value, "sigmoid", |g, y| g * y * (1.0 - y))?),
            Op::Tanh(a) => send(*a, g.zip_map(&node.value, "tanh", |g, y| g * (1.0 - y * y))?),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut out = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        out.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                send(*a, out);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    if self.nodes[p.0].tracked {
                        send(p, g.slice_cols(start, width)?);
                    }
                    start += width;
                }
            }
            Op::StackRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let height = self.value(p).rows();
                    if self.nodes[p.0].tracked {
                        send(p, g.slice_rows(start, height)?);
                    }
                    start += height;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut out = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        out.set(r, start + c, g.get(r, c));
                    }
                }
                send(*a, out);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut out = Tensor::zeros(src.rows(), src.cols());
                let w = src.cols();
                out.data_mut()[start * w..(start + g.rows()) * w].copy_from_slice(g.data());
                send(*a, out);
            }
            Op::GatherRows(a, indices) => {
                let src = self.value(*a);
                let mut out = Tensor::zeros(src.rows(), src.cols());
                let w = src.cols();
                for (r, &i) in indices.iter().enumerate() {
                    for (o, v) in out.data_mut()[i * w..(i + 1) * w].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                send(*a, out);
            }
            Op::MeanRows(a) => {
                let src = self.value(*a);
                let n = src.rows() as f64;
                let mut out = Tensor::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    for c in 0..src.cols() {
                        out.set(r, c, g.get(0, c) / n);
                    }
                }
                send(*a, out);
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                send(*a, Tensor::filled(src.rows(), src.cols(), g.get(0, 0)));
            }
            Op::LayerNorm(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut out = Tensor::zeros(x.rows(), x.cols());
                let n = x.cols() as f64;
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..x.cols() {
                        out.set(r, c, inv * (gr[c] - g_mean - yr[c] * gy_mean));
                    }
                }
                send(*a, out);
            }
            Op::CrossEntropy(probs, labels) => {
                let p = self.value(*probs);
                let n = labels.len() as f64;
                let mut out = Tensor::zeros(p.rows(), p.cols());
                for (i, &l) in labels.iter().enumerate() {
                    let pi = p.get(i, l);
                    if pi > LOG_EPS {
                        out.set(i, l, -g.get(0, 0) / (n * pi));
                    }
                }
                send(*probs, out);
            }
        }
        Ok(())
    }
}

/// Gradients produced by one [`Graph::backward`] pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` for untracked nodes
    /// or nodes the root does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let s = g.sum(a);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &Tensor::ones(2, 2));
    }

    #[test]
    fn grad_of_dot_product() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(&[1.0, 2.0, 3.0]));
        let y = g.constant(Tensor::row_vector(&[-1.0, 0.5, 4.0]));
        let xy = g.mul(x, y).unwrap();
        let dot = g.sum(xy);
        assert_eq!(g.value(dot).get(0, 0), 12.0);
        let grads = g.backward(dot).unwrap();
        assert_eq!(grads.get(x).unwrap(), g.value(y));
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn backward_twice_is_rejected_until_reset() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        g.reset();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn non_scalar_root_is_a_contract_error() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(2, 3));
        let s = g.elementwise(z, Elementwise::Sigmoid).unwrap();
        assert_eq!(g.value(s), &Tensor::filled(2, 3, 0.5));
        let t = g.elementwise(z, Elementwise::Tanh).unwrap();
        assert_eq!(g.value(t), &Tensor::zeros(2, 3));
        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let sum = g.elementwise(a, Elementwise::Add(z)).unwrap();
        assert_eq!(g.value(sum), g.value(a));
        let bad = g.constant(Tensor::zeros(3, 2));
        assert!(matches!(
            g.elementwise(a, Elementwise::Mul(bad)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let l = g.cross_entropy(p, &[0]).unwrap();
        assert!(g.value(l).get(0, 0) <= 1e-11);

        let half = g.constant(Tensor::from_rows(&[&[0.5, 0.5]]));
        for label in [0, 1] {
            let l = g.cross_entropy(half, &[label]).unwrap();
            assert!((g.value(l).get(0, 0) - 2f64.ln()).abs() < 1e-15);
        }

        let batch = g.constant(Tensor::from_rows(&[&[0.25, 0.75], &[0.9, 0.1]]));
        let l = g.cross_entropy(batch, &[1, 0]).unwrap();
        let expected = (-(0.75f64).ln() - (0.9f64).ln()) / 2.0;
        assert!((g.value(l).get(0, 0) - expected).abs() < 1e-15);

        assert!(matches!(g.cross_entropy(batch, &[2, 0]), Err(Error::Validation(_))));
    }

    #[test]
    fn untracked_subgraph_gets_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_rows(&[&[1.0], &[2.0]]));
        let x = g.constant(Tensor::from_rows(&[&[3.0, 4.0]]));
        let x2 = g.scale(x, 2.0);
        let y = g.matmul(x2, w).unwrap();
        assert!(!g.is_tracked(x2));
        assert!(g.is_tracked(y));
        let grads = g.backward(y).unwrap();
        assert!(grads.get(x2).is_none());
        assert_eq!(grads.get(w).unwrap(), &Tensor::from_rows(&[&[6.0], &[8.0]]));
    }
}
