use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mupod", version, about = "Multi-stream transformer workflows on longitudinal claims data")]
pub struct Cli {
    /// TOML or JSON run configuration; missing sections take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Manifest path; defaults to `<out>/<command>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Mupod,
    ConcatLstm,
    Transformer,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Mupod => "mupod",
            ModelKind::ConcatLstm => "concat-lstm",
            ModelKind::Transformer => "transformer",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [ModelKind::Mupod, ModelKind::ConcatLstm, ModelKind::Transformer]
            .into_iter()
            .find(|k| k.tag() == tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    CrossStream,
    SingleStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairArg {
    Mm,
    Md,
    Dd,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with a planted event pair.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_patients: Option<usize>,
        #[arg(long)]
        signal: Option<f64>,
        #[arg(long, value_enum)]
        rule: Option<RuleArg>,
    },
    /// Build a dataset from a claims CSV and an enrollee table.
    Preprocess {
        #[arg(long)]
        claims: PathBuf,
        #[arg(long)]
        enrollees: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the medication and diagnosis stream encoders.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model with the configured hyperparameters.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "mupod")]
        model: ModelKind,
        /// Directory written by `pretrain`; required for mupod.
        #[arg(long)]
        encoders: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random search over the configured grid; keeps the best trial.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "mupod")]
        model: ModelKind,
        #[arg(long)]
        encoders: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split and write metrics, optionally at reduced positive ratios.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Comma-separated positive:negative ratios, e.g. `0.5,0.2,0.1`.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export medication–diagnosis attention graphs as DOT plus a JSON sidecar.
    Explain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Patient id; repeat for several. Defaults to the first `--count`
        /// patients of the test split.
        #[arg(long)]
        patient: Vec<String>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, value_enum)]
        pair: Option<PairArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest and verify every output hash.
    Rerun { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Preprocess { .. } => "preprocess",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Search { .. } => "search",
            Command::Evaluate { .. } => "evaluate",
            Command::Explain { .. } => "explain",
            Command::Rerun { .. } => "rerun",
        }
    }
}

/// Drops `--config <path>` / `--config=<path>` from recorded arguments.
pub fn without_config(args: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args {
        let s = a.to_string_lossy().into_owned();
        if skip {
            skip = false;
            continue;
        }
        if s == "--config" {
            skip = true;
            continue;
        }
        if s.starts_with("--config=") {
            continue;
        }
        out.push(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_flag_is_stripped() {
        let args: Vec<OsString> = ["train", "--config", "a.toml", "--data", "d", "--config=b.json", "--out", "o"]
            .iter()
            .map(OsString::from)
            .collect();
        assert_eq!(without_config(&args), ["train", "--data", "d", "--out", "o"]);
    }

    #[test]
    fn ratios_split_on_commas() {
        let cli = Cli::try_parse_from([
            "mupod", "evaluate", "--data", "d", "--checkpoint", "c", "--out", "o", "--ratios", "0.5,0.2,0.1",
        ])
        .unwrap();
        match cli.command {
            Command::Evaluate { ratios, .. } => assert_eq!(ratios, Some(vec![0.5, 0.2, 0.1])),
            _ => unreachable!(),
        }
    }

    #[test]
    fn model_tags_round_trip() {
        for k in [ModelKind::Mupod, ModelKind::ConcatLstm, ModelKind::Transformer] {
            assert_eq!(ModelKind::from_tag(k.tag()), Some(k));
        }
    }
}
