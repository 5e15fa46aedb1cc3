//! Straight-line reference implementations used as test oracles. Nothing
//! here touches the graph engine.
#![allow(dead_code)]

use mupod_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step; gate order input, forget, output, candidate. Each
/// weight has the `x` rows first, then the `h` rows.
pub fn lstm_step(x: &[f64], h: &[f64], c: &[f64], w: &[Mat; 4], b: &[Vec<f64>; 4]) -> (Vec<f64>, Vec<f64>) {
    let xh: Vec<f64> = x.iter().chain(h).copied().collect();
    let hidden = h.len();
    let z = |g: usize, j: usize| -> f64 {
        let mut s = b[g][j];
        for (r, v) in xh.iter().enumerate() {
            s += v * w[g][r][j];
        }
        s
    };
    let mut h2 = vec![0.0; hidden];
    let mut c2 = vec![0.0; hidden];
    for j in 0..hidden {
        let i = sigmoid(z(0, j));
        let f = sigmoid(z(1, j));
        let o = sigmoid(z(2, j));
        let g = z(3, j).tanh();
        c2[j] = f * c[j] + i * g;
        h2[j] = o * c2[j].tanh();
    }
    (h2, c2)
}

pub fn lstm_encode(xs: &Mat, hidden: usize, w: &[Mat; 4], b: &[Vec<f64>; 4]) -> Mat {
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        let (h2, c2) = lstm_step(x, &h, &c, w, b);
        out.push(h2.clone());
        h = h2;
        c = c2;
    }
    out
}

/// Scaled dot-product attention; with `causal`, key `j > i` gets weight 0.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, causal: bool) -> (Mat, Mat) {
    let dk = q[0].len() as f64;
    let mut att = vec![vec![0.0; k.len()]; q.len()];
    for i in 0..q.len() {
        let allowed: Vec<usize> = (0..k.len()).filter(|&j| !causal || j <= i).collect();
        let scores: Vec<f64> = allowed
            .iter()
            .map(|&j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
            .collect();
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (n, &j) in allowed.iter().enumerate() {
            att[i][j] = exps[n] / z;
        }
    }
    let out = matmul(&att, v);
    (att, out)
}

fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn hcat(parts: &[&Mat]) -> Mat {
    (0..parts[0].len())
        .map(|r| parts.iter().flat_map(|p| p[r].iter().copied()).collect())
        .collect()
}

fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn layer_norm(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter().map(|x| (x - mean) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

pub struct StreamWeights {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
}

pub struct LayerWeights {
    pub med: StreamWeights,
    pub diag: StreamWeights,
    pub med_w: Mat,
    pub med_b: Vec<f64>,
    pub diag_w: Mat,
    pub diag_b: Vec<f64>,
}

pub struct LayerFlags {
    pub heads: usize,
    pub causal: bool,
    pub residual: bool,
    pub layer_norm: bool,
}

/// Multi-head attention with heads placed side by side.
fn multi_head(q: &Mat, k: &Mat, v: &Mat, heads: usize, causal: bool) -> (Vec<Mat>, Mat) {
    let dk = q[0].len() / heads;
    let mut weights = Vec::new();
    let mut outs = Vec::new();
    for h in 0..heads {
        let (a, o) = attention(&cols(q, h * dk, dk), &cols(k, h * dk, dk), &cols(v, h * dk, dk), causal);
        weights.push(a);
        outs.push(o);
    }
    let refs: Vec<&Mat> = outs.iter().collect();
    (weights, hcat(&refs))
}

/// One multi-stream layer for a single patient. Returns `(M̂, D̂)` and the
/// per-head weights of the MM, MD and DD pairs in that order.
pub fn encoder_layer(m: &Mat, d: &Mat, w: &LayerWeights, f: &LayerFlags) -> (Mat, Mat, [Vec<Mat>; 3]) {
    let (mq, mk, mv) = (matmul(m, &w.med.q), matmul(m, &w.med.k), matmul(m, &w.med.v));
    let (dq, dk, dv) = (matmul(d, &w.diag.q), matmul(d, &w.diag.k), matmul(d, &w.diag.v));
    let (a_mm, o_mm) = multi_head(&mq, &mk, &mv, f.heads, f.causal);
    let (a_md, o_md) = multi_head(&mq, &dk, &dv, f.heads, f.causal);
    let (a_dd, o_dd) = multi_head(&dq, &dk, &dv, f.heads, f.causal);
    let finish = |rec: Mat, input: &Mat| {
        let mut out = rec;
        if f.residual {
            out = out.iter().zip(input).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        }
        if f.layer_norm {
            out = layer_norm(&out);
        }
        out
    };
    let m_hat = finish(add_bias(&matmul(&hcat(&[&o_mm, &o_md]), &w.med_w), &w.med_b), m);
    let d_hat = finish(add_bias(&matmul(&hcat(&[&o_dd, &o_md]), &w.diag_w), &w.diag_b), d);
    (m_hat, d_hat, [a_mm, a_md, a_dd])
}

/// Fraction of (positive, negative) pairs ordered correctly, ties ½.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}
