use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use mupod_core::baselines::{ConcatLstm, SingleTransformer};
use mupod_core::claims::io::{read_json, write_json, DatasetDir, Vocabulary};
use mupod_core::claims::{
    build_matrix, filter_min_entries, read_claims, read_enrollees, split_dataset, EnrolleeTimeMatrix, PatientRecord,
    Splits,
};
use mupod_core::encoder::{MupodModel, Pair};
use mupod_core::evaluation::{evaluate_scores, format_table, imbalanced_eval, write_metrics_csv, MetricsRow};
use mupod_core::explain::{aggregate_attention_at, export_dot};
use mupod_core::representation::{pretrain_encoder, LstmParams, PretrainConfig, StreamKind};
use mupod_core::synthetic::{generate, LabelRule};
use mupod_core::training::{
    examples, load_checkpoint, predict, random_search, save_checkpoint, train, Classifier, TrainConfig, TrainingLog,
};
use serde::Serialize;

use crate::args::{ModelKind, PairArg, RuleArg, SplitName};
use crate::config::{Purpose, RunConfig};
use crate::error::{io_error, CliError};

pub const MODEL_FILE: &str = "model.json";
pub const MED_ENCODER_FILE: &str = "med_encoder.json";
pub const DIAG_ENCODER_FILE: &str = "diag_encoder.json";
pub const ENCODER_KIND: &str = "lstm-encoder";

/// Files a command read and wrote, for the manifest.
#[derive(Debug, Default)]
pub struct Io {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_error(path, e))
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{} does not exist", path.display())))
    }
}

struct Dataset {
    matrix: EnrolleeTimeMatrix,
    vocab: Vocabulary,
    splits: Splits,
}

impl Dataset {
    fn load(dir: &Path, io: &mut Io) -> Result<Self, CliError> {
        let d = DatasetDir::new(dir);
        for p in [d.dataset(), d.vocab(), d.splits()] {
            require(&p)?;
            io.inputs.push(p);
        }
        let (matrix, vocab) = d.load()?;
        let splits = d.load_splits()?;
        Ok(Self { matrix, vocab, splits })
    }

    fn split(&self, which: SplitName) -> Result<Vec<&PatientRecord>, CliError> {
        let ids = match which {
            SplitName::Train => &self.splits.train,
            SplitName::Val => &self.splits.val,
            SplitName::Test => &self.splits.test,
        };
        Ok(self.matrix.select(ids)?)
    }

    fn non_empty(&self, which: SplitName) -> Result<Vec<&PatientRecord>, CliError> {
        let set = self.split(which)?;
        if set.is_empty() {
            return Err(CliError::usage(format!("the {which:?} split is empty").to_lowercase()));
        }
        Ok(set)
    }
}

fn write_splits(dir: &DatasetDir, matrix: &EnrolleeTimeMatrix, cfg: &RunConfig, io: &mut Io) -> Result<Splits, CliError> {
    let s = &cfg.split;
    let splits = split_dataset(matrix, (s.train, s.val, s.test), cfg.seed_for(Purpose::Split))?;
    dir.write_splits(&splits)?;
    io.outputs.push(dir.splits());
    Ok(splits)
}

pub fn generate_cmd(
    cfg: &mut RunConfig,
    out: &Path,
    n_patients: Option<usize>,
    signal: Option<f64>,
    rule: Option<RuleArg>,
    io: &mut Io,
) -> Result<(), CliError> {
    let seed = cfg.seed_for(Purpose::Generate);
    let g = &mut cfg.generator;
    g.seed = seed;
    if let Some(n) = n_patients {
        g.n_patients = n;
    }
    if let Some(s) = signal {
        g.signal = s;
    }
    if let Some(r) = rule {
        g.rule = match r {
            RuleArg::CrossStream => LabelRule::CrossStream,
            RuleArg::SingleStream => LabelRule::SingleStream,
        };
    }
    let (matrix, vocab, truth) = generate(&cfg.generator)?;
    let dir = DatasetDir::new(out);
    dir.write(&matrix, &vocab)?;
    write_json(&dir.truth(), &truth)?;
    io.outputs.extend([dir.dataset(), dir.vocab(), dir.truth()]);
    let splits = write_splits(&dir, &matrix, cfg, io)?;
    let positives = matrix.patients.iter().filter(|p| p.label.is_positive()).count();
    println!(
        "generated {} patients ({positives} positive); split {}/{}/{} into {}",
        matrix.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

pub fn preprocess_cmd(
    cfg: &RunConfig,
    claims: &Path,
    enrollees: &Path,
    vocab_path: &Path,
    out: &Path,
    io: &mut Io,
) -> Result<(), CliError> {
    let window = cfg.preprocess.window;
    let rows = read_claims(open(claims)?, &window)?;
    let people = read_enrollees(open(enrollees)?)?;
    let mut vocab: Vocabulary = read_json(vocab_path)?;
    vocab.validate()?;
    vocab.window = window;
    io.inputs.extend([claims.to_path_buf(), enrollees.to_path_buf(), vocab_path.to_path_buf()]);

    let (matrix, report) = build_matrix(&rows, &people, &vocab, window);
    for w in report.warnings() {
        eprintln!("warning: {w}");
    }
    let (matrix, filtered) = filter_min_entries(matrix, cfg.preprocess.min_entries);
    if matrix.is_empty() {
        eprintln!(
            "warning: no patient has {} or more months with events; the dataset is empty",
            cfg.preprocess.min_entries
        );
    }
    let dir = DatasetDir::new(out);
    dir.write(&matrix, &vocab)?;
    io.outputs.extend([dir.dataset(), dir.vocab()]);
    write_splits(&dir, &matrix, cfg, io)?;
    println!(
        "read {} claim rows; kept {} patients, dropped {} below {} active months",
        report.rows_read,
        filtered.kept,
        filtered.dropped.len(),
        cfg.preprocess.min_entries
    );
    Ok(())
}

fn write_log(path: &Path, log: &TrainingLog, io: &mut Io) -> Result<(), CliError> {
    log.write_csv(create(path)?)?;
    io.outputs.push(path.to_path_buf());
    Ok(())
}

pub fn pretrain_cmd(cfg: &RunConfig, data: &Path, out: &Path, io: &mut Io) -> Result<(), CliError> {
    let ds = Dataset::load(data, io)?;
    let (tr, va) = (ds.non_empty(SplitName::Train)?, ds.non_empty(SplitName::Val)?);
    create_dir(out)?;
    let (mv, dv) = (ds.vocab.med_size(), ds.vocab.diag_size());
    for (stream, purpose, file, log_file) in [
        (StreamKind::Med, Purpose::PretrainMed, MED_ENCODER_FILE, "med_pretrain_log.csv"),
        (StreamKind::Diag, Purpose::PretrainDiag, DIAG_ENCODER_FILE, "diag_pretrain_log.csv"),
    ] {
        let pc = PretrainConfig {
            train: TrainConfig {
                seed: cfg.seed_for(purpose),
                ..cfg.pretrain.train.clone()
            },
            ..cfg.pretrain.clone()
        };
        let (enc, log) = pretrain_encoder(&tr, &va, stream, mv, dv, &pc)?;
        let path = out.join(file);
        save_checkpoint(&path, ENCODER_KIND, &enc)?;
        io.outputs.push(path);
        write_log(&out.join(log_file), &log, io)?;
        let best = log.best().map_or(f64::NAN, |e| e.val_auc);
        println!("{stream:?} encoder: best validation AUC {best:.4} at iteration {}", log.best_iteration);
    }
    Ok(())
}

fn load_encoders(dir: Option<&Path>, ds: &Dataset, io: &mut Io) -> Result<(LstmParams, LstmParams), CliError> {
    let dir = dir.ok_or_else(|| CliError::usage("mupod needs --encoders <dir> written by `pretrain`"))?;
    let mut load = |file: &str, expected: usize, name: &str| -> Result<LstmParams, CliError> {
        let path = dir.join(file);
        require(&path)?;
        let enc: LstmParams = load_checkpoint(&path, ENCODER_KIND)?;
        if enc.input_dim() != expected {
            return Err(CliError::usage(format!(
                "{} encoder expects {} {name} columns but the dataset has {expected}",
                path.display(),
                enc.input_dim()
            )));
        }
        io.inputs.push(path);
        Ok(enc)
    };
    let med = load(MED_ENCODER_FILE, ds.vocab.med_size(), "medication")?;
    let diag = load(DIAG_ENCODER_FILE, ds.vocab.diag_size(), "diagnosis")?;
    Ok((med, diag))
}

/// A freshly initialised model of any kind.
enum Untrained {
    Mupod(MupodModel),
    Lstm(ConcatLstm),
    Transformer(SingleTransformer),
}

fn build(kind: ModelKind, cfg: &RunConfig, ds: &Dataset, encoders: Option<&Path>, io: &mut Io) -> Result<Untrained, CliError> {
    let (mv, dv) = (ds.vocab.med_size(), ds.vocab.diag_size());
    let seed = cfg.seed_for(Purpose::Init);
    Ok(match kind {
        ModelKind::Mupod => {
            let (med, diag) = load_encoders(encoders, ds, io)?;
            Untrained::Mupod(MupodModel::new(cfg.mupod.clone(), &med, &diag, seed)?)
        }
        ModelKind::ConcatLstm => Untrained::Lstm(ConcatLstm::new(cfg.concat_lstm.clone(), mv, dv, seed)?),
        ModelKind::Transformer => Untrained::Transformer(SingleTransformer::new(cfg.transformer.clone(), mv, dv, seed)?),
    })
}

fn fit<C: Classifier + Serialize>(
    mut model: C,
    tr: &[&PatientRecord],
    va: &[&PatientRecord],
    tc: &TrainConfig,
) -> Result<(C, TrainingLog), CliError> {
    let train_set = examples(&model, tr)?;
    let val_set = examples(&model, va)?;
    let log = train(&mut model, &train_set, &val_set, tc)?;
    Ok((model, log))
}

fn save_model(path: &Path, kind: ModelKind, model: &Untrained) -> Result<(), CliError> {
    match model {
        Untrained::Mupod(m) => save_checkpoint(path, kind.tag(), m)?,
        Untrained::Lstm(m) => save_checkpoint(path, kind.tag(), m)?,
        Untrained::Transformer(m) => save_checkpoint(path, kind.tag(), m)?,
    }
    Ok(())
}

fn fit_any(model: Untrained, tr: &[&PatientRecord], va: &[&PatientRecord], tc: &TrainConfig) -> Result<(Untrained, TrainingLog), CliError> {
    Ok(match model {
        Untrained::Mupod(m) => {
            let (m, log) = fit(m, tr, va, tc)?;
            (Untrained::Mupod(m), log)
        }
        Untrained::Lstm(m) => {
            let (m, log) = fit(m, tr, va, tc)?;
            (Untrained::Lstm(m), log)
        }
        Untrained::Transformer(m) => {
            let (m, log) = fit(m, tr, va, tc)?;
            (Untrained::Transformer(m), log)
        }
    })
}

pub fn train_cmd(
    cfg: &RunConfig,
    data: &Path,
    kind: ModelKind,
    encoders: Option<&Path>,
    out: &Path,
    io: &mut Io,
) -> Result<(), CliError> {
    let ds = Dataset::load(data, io)?;
    let (tr, va) = (ds.non_empty(SplitName::Train)?, ds.non_empty(SplitName::Val)?);
    let model = build(kind, cfg, &ds, encoders, io)?;
    let tc = TrainConfig {
        seed: cfg.seed_for(Purpose::Train),
        ..cfg.train.clone()
    };
    let (model, log) = fit_any(model, &tr, &va, &tc)?;
    create_dir(out)?;
    let path = out.join(MODEL_FILE);
    save_model(&path, kind, &model)?;
    io.outputs.push(path);
    write_log(&out.join("train_log.csv"), &log, io)?;
    let best = log.best().map_or(f64::NAN, |e| e.val_auc);
    println!(
        "{}: best validation AUC {best:.4} (loss {:.4}) at iteration {}",
        kind.tag(),
        log.best_val_loss,
        log.best_iteration
    );
    Ok(())
}

pub fn search_cmd(
    cfg: &RunConfig,
    data: &Path,
    kind: ModelKind,
    encoders: Option<&Path>,
    trials: Option<usize>,
    out: &Path,
    io: &mut Io,
) -> Result<(), CliError> {
    let ds = Dataset::load(data, io)?;
    let (tr, va) = (ds.non_empty(SplitName::Train)?, ds.non_empty(SplitName::Val)?);
    let k = trials.unwrap_or(cfg.search.trials);
    let mut trained = Vec::new();
    let mut build_io = Io::default();
    // The search callback speaks the core error type; keep the CLI error so
    // its exit code survives.
    let mut failure: Option<CliError> = None;
    let result = random_search(&cfg.search.grid, k, &cfg.train, cfg.seed_for(Purpose::Search), |i, tc| {
        let run = build(kind, cfg, &ds, encoders, &mut build_io).and_then(|m| fit_any(m, &tr, &va, tc));
        let (model, log) = run.map_err(|e| {
            let core = mupod_core::Error::Contract(e.message.clone());
            failure = Some(e);
            core
        })?;
        let best = log.best().map_or(f64::NAN, |e| e.val_auc);
        println!(
            "trial {i}: lr {} batch {} iterations {} l2 {} → validation AUC {best:.4}",
            tc.learning_rate, tc.batch_size, tc.iterations, tc.l2
        );
        trained.push(model);
        Ok(log)
    });
    let board = match result {
        Ok(b) => b,
        Err(e) => return Err(failure.unwrap_or_else(|| e.into())),
    };
    build_io.inputs.sort();
    build_io.inputs.dedup();
    io.inputs.extend(build_io.inputs);

    create_dir(out)?;
    let best = board.best().ok_or_else(|| CliError::runtime("search ran no trials"))?;
    let path = out.join(MODEL_FILE);
    save_model(&path, kind, &trained[best.index])?;
    io.outputs.push(path);
    let lb = out.join("leaderboard.json");
    write_json(&lb, &board)?;
    io.outputs.push(lb);
    println!("best trial {} with validation AUC {:.4}", best.index, best.val_auc);
    Ok(())
}

/// A trained model loaded from a checkpoint.
enum Trained {
    Mupod(MupodModel),
    Lstm(ConcatLstm),
    Transformer(SingleTransformer),
}

impl Trained {
    fn load(path: &Path, io: &mut Io) -> Result<(ModelKind, Self), CliError> {
        require(path)?;
        let header: serde_json::Value = read_json(path)?;
        let tag = header.get("kind").and_then(|v| v.as_str()).unwrap_or("");
        let kind = ModelKind::from_tag(tag)
            .ok_or_else(|| CliError::usage(format!("{}: unknown model kind {tag:?}", path.display())))?;
        let model = match kind {
            ModelKind::Mupod => Trained::Mupod(load_checkpoint(path, tag)?),
            ModelKind::ConcatLstm => Trained::Lstm(load_checkpoint(path, tag)?),
            ModelKind::Transformer => Trained::Transformer(load_checkpoint(path, tag)?),
        };
        io.inputs.push(path.to_path_buf());
        Ok((kind, model))
    }

    fn vocab(&self) -> (usize, usize) {
        match self {
            Trained::Mupod(m) => (m.med_vocab, m.diag_vocab),
            Trained::Lstm(m) => (m.med_vocab, m.diag_vocab),
            Trained::Transformer(m) => (m.med_vocab, m.diag_vocab),
        }
    }

    fn check(&self, vocab: &Vocabulary) -> Result<(), CliError> {
        let (mv, dv) = self.vocab();
        if (mv, dv) != (vocab.med_size(), vocab.diag_size()) {
            return Err(CliError::usage(format!(
                "checkpoint expects {mv} medication × {dv} diagnosis columns but the dataset has {} × {}",
                vocab.med_size(),
                vocab.diag_size()
            )));
        }
        Ok(())
    }

    fn scores(&self, patients: &[&PatientRecord]) -> Result<Vec<f64>, CliError> {
        fn run<C: Classifier>(m: &C, patients: &[&PatientRecord]) -> Result<Vec<f64>, CliError> {
            let inputs = patients.iter().map(|p| m.prepare(p)).collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&C::Input> = inputs.iter().collect();
            Ok(predict(m, &refs)?)
        }
        match self {
            Trained::Mupod(m) => run(m, patients),
            Trained::Lstm(m) => run(m, patients),
            Trained::Transformer(m) => run(m, patients),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_cmd(
    cfg: &mut RunConfig,
    data: &Path,
    checkpoint: &Path,
    split: SplitName,
    ratios: Option<Vec<f64>>,
    repeats: Option<usize>,
    threshold: Option<f64>,
    out: &Path,
    io: &mut Io,
) -> Result<(), CliError> {
    let e = &mut cfg.evaluate;
    if let Some(r) = ratios {
        e.ratios = r;
    }
    if let Some(r) = repeats {
        e.repeats = r;
    }
    if let Some(t) = threshold {
        e.threshold = t;
    }
    let ds = Dataset::load(data, io)?;
    let (kind, model) = Trained::load(checkpoint, io)?;
    model.check(&ds.vocab)?;
    let patients = ds.non_empty(split)?;
    let scores = model.scores(&patients)?;
    let labels: Vec<bool> = patients.iter().map(|p| p.label.is_positive()).collect();

    let e = &cfg.evaluate;
    let mut rows = vec![MetricsRow::full(kind.tag(), &evaluate_scores(&scores, &labels, e.threshold)?)];
    if !e.ratios.is_empty() {
        let seed = cfg.seed_for(Purpose::Evaluate);
        for r in imbalanced_eval(&scores, &labels, &e.ratios, e.repeats, e.threshold, seed)? {
            rows.push(MetricsRow::imbalanced(kind.tag(), &r));
        }
    }
    create_dir(out)?;
    let metrics = out.join("metrics.csv");
    write_metrics_csv(create(&metrics)?, &rows)?;
    io.outputs.push(metrics);

    let scores_path = out.join("scores.csv");
    let mut text = String::from("id,label,score\n");
    for (p, s) in patients.iter().zip(&scores) {
        text.push_str(&format!("{},{},{s}\n", p.id, p.label.index()));
    }
    std::fs::write(&scores_path, text).map_err(|e| io_error(&scores_path, e))?;
    io.outputs.push(scores_path);
    print!("{}", format_table(&rows));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn explain_cmd(
    cfg: &mut RunConfig,
    data: &Path,
    checkpoint: &Path,
    patient_ids: &[String],
    count: usize,
    layer: Option<usize>,
    pair: Option<PairArg>,
    out: &Path,
    io: &mut Io,
) -> Result<(), CliError> {
    if let Some(l) = layer {
        cfg.explain.layer = l;
    }
    if let Some(p) = pair {
        cfg.explain.pair = match p {
            PairArg::Mm => Pair::MM,
            PairArg::Md => Pair::MD,
            PairArg::Dd => Pair::DD,
        };
    }
    let ds = Dataset::load(data, io)?;
    let (kind, model) = Trained::load(checkpoint, io)?;
    model.check(&ds.vocab)?;
    let Trained::Mupod(model) = model else {
        return Err(CliError::usage(format!("explain needs a mupod checkpoint, got {}", kind.tag())));
    };
    if cfg.explain.layer >= model.config.layers {
        return Err(CliError::usage(format!(
            "layer {} requested but the model has {}",
            cfg.explain.layer, model.config.layers
        )));
    }
    let patients: Vec<&PatientRecord> = if patient_ids.is_empty() {
        ds.split(SplitName::Test)?.into_iter().take(count).collect()
    } else {
        patient_ids
            .iter()
            .map(|id| ds.matrix.get(id).ok_or_else(|| CliError::usage(format!("no patient {id:?} in the dataset"))))
            .collect::<Result<_, _>>()?
    };
    if patients.is_empty() {
        return Err(CliError::usage("no patients to explain"));
    }
    let graphs = patients
        .iter()
        .map(|p| {
            let (_, trace) = model.explain(&model.prepare(p)?)?;
            aggregate_attention_at(&trace, p, cfg.explain.layer, cfg.explain.pair)
        })
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(out)?;
    let dot = out.join("attention.dot");
    std::fs::write(&dot, export_dot(&graphs, Some(&ds.vocab))?).map_err(|e| io_error(&dot, e))?;
    let sidecar = out.join("attention.json");
    write_json(&sidecar, &graphs)?;
    io.outputs.extend([dot, sidecar]);
    let edges: usize = graphs.iter().map(|g| g.edges.len()).sum();
    println!("explained {} patients ({edges} edges) into {}", graphs.len(), out.display());
    Ok(())
}
