#[path = "support/oracles.rs"]
mod oracles;

use mupod_core::autodiff::{grad_check, grad_check_with_step, Bound, Graph, Tensor, Var};
use mupod_core::baselines::{SingleTransformer, TransformerConfig};
use mupod_core::claims::{demographics, Label, MonthEvents, PatientRecord};
use mupod_core::encoder::{
    cross_attention, encoder_layer, MupodConfig, MupodModel, Pair, Pooling, Segments,
};
use mupod_core::representation::{encode_stream, LstmParams};
use mupod_core::training::Classifier;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use oracles::{mat, max_abs_diff, LayerFlags, LayerWeights, StreamWeights};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(rows, cols, 1.0, rng)
}

fn multi_hot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            if rng.random_bool(0.3) {
                t.set(r, c, 1.0);
            }
        }
    }
    t
}

fn lstm_weights(p: &LstmParams) -> ([oracles::Mat; 4], [Vec<f64>; 4]) {
    (
        std::array::from_fn(|g| mat(p.gate_weight(g))),
        std::array::from_fn(|g| p.gate_bias(g).row(0).to_vec()),
    )
}

#[test]
fn lstm_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let (input, hidden, t) = (rng.random_range(1..7), rng.random_range(1..6), rng.random_range(1..9));
        let mut p = LstmParams::new(input, hidden, trial);
        for gate in 0..4 {
            *p.gate_bias_mut(gate) = random(1, hidden, &mut rng);
        }
        let xs = random(t, input, &mut rng);
        let (w, b) = lstm_weights(&p);
        let expected = oracles::lstm_encode(&mat(&xs), hidden, &w, &b);
        let got = mat(&encode_stream(&xs, &p).unwrap());
        assert!(max_abs_diff(&got, &expected) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lstm_prefix_and_future_independence(seed in any::<u64>(), t in 2usize..10, cut in 1usize..10) {
        let cut = cut.min(t - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = LstmParams::new(4, 3, seed);
        let xs = multi_hot(t, 4, &mut rng);
        let full = encode_stream(&xs, &p).unwrap();
        let prefix = encode_stream(&xs.slice_rows(0, cut).unwrap(), &p).unwrap();
        prop_assert_eq!(prefix, full.slice_rows(0, cut).unwrap());

        let mut perturbed = xs.clone();
        for r in cut..t {
            for c in 0..4 {
                perturbed.set(r, c, rng.random_range(-3.0..3.0));
            }
        }
        let again = encode_stream(&perturbed, &p).unwrap();
        prop_assert_eq!(again.slice_rows(0, cut).unwrap(), full.slice_rows(0, cut).unwrap());
    }
}

#[test]
fn lstm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = LstmParams::new(3, 4, 9);
    let xs = multi_hot(5, 3, &mut rng);
    let probe = random(5, 4, &mut rng);
    let params: Vec<Tensor> = p.store.entries().iter().map(|e| e.tensor.clone()).collect();
    let err = grad_check(
        |g, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let x = g.constant(xs.clone());
            let h = p.layout.encode_batch(g, &bound, &[x])?;
            let c = g.constant(probe.clone());
            let prod = g.mul(h[0], c)?;
            Ok(g.sum(prod))
        },
        &params,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn cross_attention_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let causal = rng.random_bool(0.5);
        let tq = rng.random_range(1..8);
        let tk = if causal { tq } else { rng.random_range(1..8) };
        let dk = rng.random_range(1..6);
        let dv = rng.random_range(1..6);
        let (q, k, v) = (random(tq, dk, &mut rng), random(tk, dk, &mut rng), random(tk, dv, &mut rng));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let (att, out) = cross_attention(&mut g, qv, kv, vv, causal).unwrap();
        let (ea, eo) = oracles::attention(&mat(&q), &mat(&k), &mat(&v), causal);
        assert!(max_abs_diff(&mat(g.value(att)), &ea) <= 1e-10);
        assert!(max_abs_diff(&mat(g.value(out)), &eo) <= 1e-10);
    }
}

fn model(config: MupodConfig, med_vocab: usize, diag_vocab: usize, seed: u64) -> MupodModel {
    let d = config.stream_dim;
    let med = LstmParams::new(med_vocab, d, seed);
    let diag = LstmParams::new(diag_vocab, d, seed + 1);
    MupodModel::new(config, &med, &diag, seed + 2).unwrap()
}

fn layer_weights(m: &MupodModel, l: usize) -> LayerWeights {
    let s = &m.store;
    let lay = &m.layers[l];
    let stream = |p: &mupod_core::encoder::Projections| StreamWeights {
        q: mat(s.get(p.q)),
        k: mat(s.get(p.k)),
        v: mat(s.get(p.v)),
    };
    LayerWeights {
        med: stream(&lay.med),
        diag: stream(&lay.diag),
        med_w: mat(s.get(lay.med_w)),
        med_b: s.get(lay.med_b).row(0).to_vec(),
        diag_w: mat(s.get(lay.diag_w)),
        diag_b: s.get(lay.diag_b).row(0).to_vec(),
    }
}

#[test]
fn encoder_layer_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let heads = [1, 2][rng.random_range(0..2)];
        let config = MupodConfig {
            stream_dim: 2 * heads * rng.random_range(1..4),
            heads,
            layers: 1,
            causal: rng.random_bool(0.5),
            residual: rng.random_bool(0.5),
            layer_norm: rng.random_bool(0.3),
            ..Default::default()
        };
        let mut m = model(config.clone(), 4, 4, trial);
        // Non-zero biases so they are exercised.
        let (mb, db) = (m.layers[0].med_b, m.layers[0].diag_b);
        *m.store.get_mut(mb) = random(1, config.stream_dim, &mut rng);
        *m.store.get_mut(db) = random(1, config.stream_dim, &mut rng);

        let lens: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..6)).collect();
        let segments = Segments::from_lengths(&lens);
        let total = segments.total_rows();
        let (ms, ds) = (random(total, config.stream_dim, &mut rng), random(total, config.stream_dim, &mut rng));

        let mut g = Graph::new();
        let bound = m.store.bind_constants(&mut g);
        let (mv, dv) = (g.constant(ms.clone()), g.constant(ds.clone()));
        let mut trace = vec![Vec::new(); lens.len()];
        let (m_hat, d_hat) =
            encoder_layer(&mut g, &bound, &m.layers[0], &config, &segments, mv, dv, 0, Some(&mut trace)).unwrap();

        let w = layer_weights(&m, 0);
        let flags = LayerFlags {
            heads,
            causal: config.causal,
            residual: config.residual,
            layer_norm: config.layer_norm,
        };
        for (p, &(start, t)) in segments.ranges().iter().enumerate() {
            let rows = |x: &Tensor| mat(&x.slice_rows(start, t).unwrap());
            let (em, ed, atts) = oracles::encoder_layer(&rows(&ms), &rows(&ds), &w, &flags);
            assert!(max_abs_diff(&rows(g.value(m_hat)), &em) <= 1e-10);
            assert!(max_abs_diff(&rows(g.value(d_hat)), &ed) <= 1e-10);

            assert_eq!(trace[p].len(), 3);
            let pairs: Vec<Pair> = trace[p].iter().map(|r| r.pair).collect();
            assert_eq!(pairs, vec![Pair::MM, Pair::MD, Pair::DD]);
            for (rec, expected) in trace[p].iter().zip(&atts) {
                for (h, &var) in rec.heads.iter().enumerate() {
                    assert!(max_abs_diff(&mat(g.value(var)), &expected[h]) <= 1e-10);
                }
            }
        }
    }
}

fn patient(id: &str, label: Label, t: usize, vocab: usize, rng: &mut ChaCha8Rng) -> PatientRecord {
    PatientRecord {
        id: id.into(),
        label,
        demo: demographics(rng.random_range(20.0..80.0), rng.random_bool(0.5)),
        months: (0..t as u32)
            .map(|m| MonthEvents {
                t: m,
                meds: (0..vocab as u32).filter(|_| rng.random_bool(0.4)).collect(),
                diags: (0..vocab as u32).filter(|_| rng.random_bool(0.4)).collect(),
            })
            .collect(),
    }
}

#[test]
fn causal_stack_ignores_future_months() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = MupodConfig {
        stream_dim: 4,
        causal: true,
        fine_tune_encoders: true,
        ..Default::default()
    };
    let m = model(config, 5, 5, 1);
    let outputs = |p: &PatientRecord| {
        let x = m.prepare(p).unwrap();
        let mut g = Graph::new();
        let bound = m.store.bind_constants(&mut g);
        let (seg, mv, dv) = m.stream_inputs(&mut g, &bound, &[&x]).unwrap();
        let (mh, dh) = m.attend(&mut g, &bound, &seg, mv, dv, None).unwrap();
        (g.value(mh).clone(), g.value(dh).clone())
    };
    for trial in 0..50 {
        let t = rng.random_range(2..8);
        let p = patient("p", Label::Positive, t, 5, &mut rng);
        let cut = rng.random_range(1..t);
        let mut q = p.clone();
        for month in &mut q.months[cut..] {
            *month = MonthEvents {
                t: month.t,
                meds: (0..5).filter(|_| rng.random_bool(0.5)).collect(),
                diags: (0..5).filter(|_| rng.random_bool(0.5)).collect(),
            };
        }
        let (a_m, a_d) = outputs(&p);
        let (b_m, b_d) = outputs(&q);
        let head = |x: &Tensor| x.slice_rows(0, cut).unwrap();
        assert!(head(&a_m).max_abs_diff(&head(&b_m)) <= 1e-12, "trial {trial}");
        assert!(head(&a_d).max_abs_diff(&head(&b_d)) <= 1e-12, "trial {trial}");
    }
}

#[test]
fn mupod_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = MupodConfig {
        fine_tune_encoders: true,
        ..Default::default()
    };
    let m = model(config, 4, 4, 8);
    let patients = [
        patient("a", Label::Positive, 3, 4, &mut rng),
        patient("b", Label::Negative, 3, 4, &mut rng),
    ];
    let inputs: Vec<_> = patients.iter().map(|p| m.prepare(p).unwrap()).collect();
    let params: Vec<Tensor> = m.store.entries().iter().map(|e| e.tensor.clone()).collect();
    // Some gradients reaching the recurrent encoders and the second layer's
    // scores are near 1e-9, where a 1e-5 step is dominated by round-off in
    // the loss.
    let err = grad_check_with_step(
        |g, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let probs = m.forward(g, &bound, &[&inputs[0], &inputs[1]])?;
            g.cross_entropy(probs, &[1, 0])
        },
        &params,
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn probabilities_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for pooling in [Pooling::Mean, Pooling::Last] {
        let m = model(MupodConfig { pooling, ..Default::default() }, 6, 6, 2);
        let ps: Vec<PatientRecord> = (0..5).map(|i| patient(&format!("p{i}"), Label::Negative, 2 + i, 6, &mut rng)).collect();
        let xs: Vec<_> = ps.iter().map(|p| m.prepare(p).unwrap()).collect();
        let refs: Vec<_> = xs.iter().collect();
        let mut g = Graph::new();
        let bound = m.store.bind_constants(&mut g);
        let probs = m.forward(&mut g, &bound, &refs).unwrap();
        for r in 0..5 {
            let row = g.value(probs).row(r);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}

#[test]
fn frozen_and_fine_tuned_inputs_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frozen = model(MupodConfig::default(), 5, 5, 3);
    let mut tuned_cfg = frozen.config.clone();
    tuned_cfg.fine_tune_encoders = true;
    let tuned = MupodModel { config: tuned_cfg, ..frozen.clone() };
    let p = patient("p", Label::Positive, 6, 5, &mut rng);
    let a = mupod_core::training::predict(&frozen, &[&frozen.prepare(&p).unwrap()]).unwrap();
    let b = mupod_core::training::predict(&tuned, &[&tuned.prepare(&p).unwrap()]).unwrap();
    assert!((a[0] - b[0]).abs() <= 1e-12);
}

/// With both streams fed the same input, tied projections, and the
/// cross-stream half of each reconstruction zeroed, the multi-stream stack
/// collapses to the single-stream encoder.
#[test]
fn merged_streams_reduce_to_single_transformer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 10;
    let tf = SingleTransformer::new(TransformerConfig { d_model: d, ..Default::default() }, 4, 4, 1).unwrap();
    let mut mp = model(MupodConfig { stream_dim: d, ..Default::default() }, 4, 4, 2);
    for (l, sl) in tf.layers.iter().enumerate() {
        let lay = mp.layers[l];
        for proj in [lay.med, lay.diag] {
            *mp.store.get_mut(proj.q) = tf.store.get(sl.q).clone();
            *mp.store.get_mut(proj.k) = tf.store.get(sl.k).clone();
            *mp.store.get_mut(proj.v) = tf.store.get(sl.v).clone();
        }
        let recon = Tensor::stack_rows(&[tf.store.get(sl.w), &Tensor::zeros(d, d)]).unwrap();
        *mp.store.get_mut(lay.med_w) = recon.clone();
        *mp.store.get_mut(lay.diag_w) = recon;
        *mp.store.get_mut(lay.med_b) = tf.store.get(sl.b).clone();
        *mp.store.get_mut(lay.diag_b) = tf.store.get(sl.b).clone();
    }
    let th = tf.store.get(tf.head_w);
    let head = Tensor::stack_rows(&[
        &th.slice_rows(0, d).unwrap(),
        &Tensor::zeros(d, 2),
        &th.slice_rows(d, th.rows() - d).unwrap(),
    ])
    .unwrap();
    let (hw, hb) = (mp.head_w, mp.head_b);
    *mp.store.get_mut(hw) = head;
    *mp.store.get_mut(hb) = tf.store.get(tf.head_b).clone();

    let segments = Segments::from_lengths(&[3, 5, 2]);
    let x = random(segments.total_rows(), d, &mut rng);
    let demo = random(3, 3, &mut rng);

    let mut g = Graph::new();
    let bt = tf.store.bind_constants(&mut g);
    let bm = mp.store.bind_constants(&mut g);
    let (xv, demo_v) = (g.constant(x), g.constant(demo));
    let xt = tf.attend(&mut g, &bt, &segments, xv, None).unwrap();
    let pt: Var = tf.predict_head(&mut g, &bt, &segments, xt, demo_v).unwrap();
    let (mh, dh) = mp.attend(&mut g, &bm, &segments, xv, xv, None).unwrap();
    let pm = mp.predict_head(&mut g, &bm, &segments, mh, dh, demo_v).unwrap();

    assert!(g.value(mh).max_abs_diff(g.value(xt)) <= 1e-10);
    assert!(g.value(dh).max_abs_diff(g.value(xt)) <= 1e-10);
    assert!(g.value(pm).max_abs_diff(g.value(pt)) <= 1e-10);
}
