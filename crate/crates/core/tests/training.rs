use mupod_core::baselines::{ConcatLstm, ConcatLstmConfig};
use mupod_core::claims::{split_dataset, EnrolleeTimeMatrix, PatientRecord};
use mupod_core::encoder::{MupodConfig, MupodModel};
use mupod_core::evaluation::auc;
use mupod_core::representation::{pretrain_encoder, LstmParams, PretrainConfig, StreamKind};
use mupod_core::synthetic::{generate, GeneratorConfig, LabelRule};
use mupod_core::training::{
    examples, load_checkpoint, predict, random_search, save_checkpoint, train, Classifier, Optimizer,
    SearchGrid, TrainConfig,
};
use mupod_core::Error;

struct Data {
    matrix: EnrolleeTimeMatrix,
    train: Vec<String>,
    val: Vec<String>,
}

impl Data {
    fn new(cfg: &GeneratorConfig) -> Self {
        let (matrix, _, _) = generate(cfg).unwrap();
        let splits = split_dataset(&matrix, (0.8, 0.2, 0.0), 1).unwrap();
        Data {
            matrix,
            train: splits.train,
            val: splits.val,
        }
    }

    fn train(&self) -> Vec<&PatientRecord> {
        self.matrix.select(&self.train).unwrap()
    }

    fn val(&self) -> Vec<&PatientRecord> {
        self.matrix.select(&self.val).unwrap()
    }
}

fn small_cohort(rule: LabelRule, signal: f64) -> Data {
    Data::new(&GeneratorConfig {
        n_patients: 600,
        n_months: 12,
        med_vocab_size: 8,
        diag_vocab_size: 8,
        base_rate: 0.08,
        signal,
        rule,
        seed: 21,
        ..Default::default()
    })
}

fn quick(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 32,
        eval_every: 10,
        ..Default::default()
    }
}

fn lstm() -> ConcatLstm {
    ConcatLstm::new(ConcatLstmConfig { hidden_dim: 8 }, 8, 8, 3).unwrap()
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let data = small_cohort(LabelRule::CrossStream, 0.8);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let mut m = lstm();
            let tr = examples(&m, &data.train()).unwrap();
            let va = examples(&m, &data.val()).unwrap();
            let log = train(&mut m, &tr, &va, &quick(30)).unwrap();
            (m.store().clone(), log)
        })
    };
    let (a_store, a_log) = run(1);
    let (b_store, b_log) = run(3);
    assert_eq!(a_store, b_store);
    assert_eq!(a_log, b_log);
}

#[test]
fn zero_iterations_leaves_weights_untouched() {
    let data = small_cohort(LabelRule::CrossStream, 0.8);
    let mut m = lstm();
    let before = m.store().clone();
    let tr = examples(&m, &data.train()).unwrap();
    let va = examples(&m, &data.val()).unwrap();
    let log = train(&mut m, &tr, &va, &quick(0)).unwrap();
    assert_eq!(m.store(), &before);
    assert_eq!(log.entries.len(), 1);
    assert_eq!(log.best_iteration, 0);
}

#[test]
fn validation_loss_improves() {
    let data = small_cohort(LabelRule::SingleStream, 1.0);
    let mut m = lstm();
    let tr = examples(&m, &data.train()).unwrap();
    let va = examples(&m, &data.val()).unwrap();
    let log = train(&mut m, &tr, &va, &quick(60)).unwrap();
    assert!(log.best_val_loss < log.entries[0].val_loss);
    let kept = log.best().unwrap();
    assert_eq!(kept.val_loss, log.best_val_loss);
    // The restored weights are the ones that scored best.
    let scores = predict(&m, &va.iter().map(|e| &e.input).collect::<Vec<_>>()).unwrap();
    let labels: Vec<bool> = va.iter().map(|e| e.label == 1).collect();
    assert_eq!(auc(&scores, &labels).unwrap(), kept.val_auc);
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let data = small_cohort(LabelRule::CrossStream, 0.8);
    let mut m = lstm();
    let tr = examples(&m, &data.train()).unwrap();
    let va = examples(&m, &data.val()).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e300,
        optimizer: Optimizer::Sgd,
        ..quick(20)
    };
    match train(&mut m, &tr, &va, &cfg) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(m.store().entries().iter().all(|e| e.tensor.is_finite()));
}

#[test]
fn empty_sets_and_bad_configs_are_rejected() {
    let data = small_cohort(LabelRule::CrossStream, 0.8);
    let mut m = lstm();
    let tr = examples(&m, &data.train()).unwrap();
    assert!(train(&mut m, &tr, &[], &quick(5)).is_err());
    let bad = TrainConfig { batch_size: 0, ..quick(5) };
    assert!(train(&mut m, &tr, &tr, &bad).is_err());
}

#[test]
fn pretrained_head_learns_single_stream_signal() {
    let data = small_cohort(LabelRule::SingleStream, 1.0);
    let cfg = PretrainConfig {
        train: TrainConfig { iterations: 200, ..quick(200) },
        ..Default::default()
    };
    let (enc, log) = pretrain_encoder(&data.train(), &data.val(), StreamKind::Med, 8, 8, &cfg).unwrap();
    assert_eq!(enc.hidden_dim(), 10);
    let auc = log.best().unwrap().val_auc;
    assert!(auc >= 0.9, "{auc}");
}

#[test]
fn concat_lstm_learns_single_stream_signal() {
    let data = small_cohort(LabelRule::SingleStream, 1.0);
    let mut m = lstm();
    let tr = examples(&m, &data.train()).unwrap();
    let va = examples(&m, &data.val()).unwrap();
    let log = train(&mut m, &tr, &va, &quick(200)).unwrap();
    let auc = log.best().unwrap().val_auc;
    assert!(auc >= 0.85, "{auc}");
}

#[test]
fn checkpoints_round_trip_and_check_their_kind() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let med = LstmParams::new(8, 10, 1);
    let diag = LstmParams::new(8, 10, 2);
    let model = MupodModel::new(MupodConfig::default(), &med, &diag, 3).unwrap();
    save_checkpoint(&path, "mupod", &model).unwrap();
    let back: MupodModel = load_checkpoint(&path, "mupod").unwrap();
    assert_eq!(back, model);

    assert!(matches!(load_checkpoint::<MupodModel>(&path, "concat-lstm"), Err(Error::Checkpoint(_))));
    let text = std::fs::read_to_string(&path).unwrap().replace("mupod-checkpoint-v1", "mupod-checkpoint-v0");
    std::fs::write(&path, text).unwrap();
    assert!(matches!(load_checkpoint::<MupodModel>(&path, "mupod"), Err(Error::Checkpoint(_))));
}

#[test]
fn random_search_ranks_trials() {
    let data = small_cohort(LabelRule::SingleStream, 1.0);
    let grid = SearchGrid {
        learning_rates: vec![1e-2, 1e-3],
        batch_sizes: vec![32],
        iterations: vec![1000, 2000],
        l2: vec![1e-5],
        desk_factor: 100,
    };
    let board = random_search(&grid, 3, &quick(0), 7, |_, cfg| {
        let mut m = lstm();
        let tr = examples(&m, &data.train()).unwrap();
        let va = examples(&m, &data.val()).unwrap();
        train(&mut m, &tr, &va, cfg)
    })
    .unwrap();
    assert_eq!(board.trials.len(), 3);
    assert!(board.trials.windows(2).all(|w| w[0].val_auc >= w[1].val_auc));
    assert!(board.trials.iter().all(|t| [10, 20].contains(&t.config.iterations)));
}
