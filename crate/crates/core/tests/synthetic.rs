#[path = "support/oracles.rs"]
mod oracles;

use mupod_core::claims::io::write_records;
use mupod_core::evaluation::auc;
use mupod_core::synthetic::{generate, oracle_score, GeneratorConfig, LabelRule};
use proptest::prelude::*;

fn small(signal: f64, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_patients: 400,
        signal,
        seed,
        ..Default::default()
    }
}

fn oracle_auc(cfg: &GeneratorConfig) -> f64 {
    let (m, _, truth) = generate(cfg).unwrap();
    let scores: Vec<f64> = m.patients.iter().map(|p| oracle_score(p, &truth)).collect();
    let labels: Vec<bool> = m.patients.iter().map(|p| p.label.is_positive()).collect();
    auc(&scores, &labels).unwrap()
}

#[test]
fn positive_rate_is_balanced() {
    let (m, _, _) = generate(&GeneratorConfig { seed: 5, ..Default::default() }).unwrap();
    assert_eq!(m.len(), 2000);
    assert!((m.positive_rate() - 0.5).abs() <= 0.02, "{}", m.positive_rate());
}

#[test]
fn full_signal_is_separable_and_null_signal_is_not() {
    for rule in [LabelRule::CrossStream, LabelRule::SingleStream] {
        let strong = GeneratorConfig { rule, ..small(1.0, 1) };
        assert_eq!(oracle_auc(&strong), 1.0);
        let null = GeneratorConfig { rule, ..small(0.0, 1) };
        let a = oracle_auc(&null);
        assert!((0.45..=0.55).contains(&a), "{a}");
    }
}

#[test]
fn oracle_auc_tracks_signal() {
    // Planted positives score ≥ 1 and everyone else scores 0, so the oracle
    // AUC is (1 + s) / 2 up to sampling noise.
    let a = oracle_auc(&GeneratorConfig { n_patients: 2000, ..small(0.8, 2) });
    assert!((a - 0.9).abs() <= 0.03, "{a}");
}

#[test]
fn output_is_byte_identical_per_seed() {
    let bytes = |cfg: &GeneratorConfig| {
        let (m, _, truth) = generate(cfg).unwrap();
        let mut out = Vec::new();
        write_records(&mut out, &m.patients).unwrap();
        out.extend(serde_json::to_vec(&truth).unwrap());
        out
    };
    let a = bytes(&small(0.8, 9));
    assert_eq!(a, bytes(&small(0.8, 9)));
    assert_ne!(a, bytes(&small(0.8, 10)));
}

#[test]
fn positives_are_an_exact_split() {
    for (n, rate) in [(7, 0.5), (400, 0.5), (101, 0.3)] {
        let (m, _, _) = generate(&GeneratorConfig { n_patients: n, positive_rate: rate, ..small(0.8, 4) }).unwrap();
        let pos = m.patients.iter().filter(|p| p.label.is_positive()).count();
        assert_eq!(pos, (rate * n as f64).round() as usize);
    }
}

#[test]
fn rejects_invalid_config() {
    assert!(generate(&GeneratorConfig { signal: 1.5, ..Default::default() }).is_err());
    assert!(generate(&GeneratorConfig { med_vocab_size: 2, ..Default::default() }).is_err());
    assert!(generate(&GeneratorConfig { lag_window: 24, ..Default::default() }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_cohorts_satisfy_claims_invariants(
        seed in any::<u64>(),
        n in 1usize..40,
        months in 3usize..12,
        signal in 0.0f64..=1.0,
        single in any::<bool>(),
    ) {
        let cfg = GeneratorConfig {
            n_patients: n,
            n_months: months,
            lag_window: 1,
            signal,
            rule: if single { LabelRule::SingleStream } else { LabelRule::CrossStream },
            base_rate: 0.1,
            seed,
            ..Default::default()
        };
        let (m, vocab, truth) = generate(&cfg).unwrap();
        prop_assert!(m.validate().is_ok());
        prop_assert!(vocab.validate().is_ok());
        prop_assert_eq!(vocab.med_size(), cfg.med_vocab_size);
        for p in &m.patients {
            prop_assert_eq!(p.months.len(), months);
            prop_assert_eq!(p.demo.len(), 3);
            // Only positives can carry the pair.
            if !p.label.is_positive() {
                prop_assert_eq!(oracle_score(p, &truth), 0.0);
            }
        }
    }
}
