//! Command-line workflows: generate or preprocess a dataset, pretrain the
//! stream encoders, train or search models, evaluate, and explain. Every
//! run writes a manifest that `rerun` can replay and verify.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use args::{without_config, Cli, Command};
use commands::Io;
use config::RunConfig;
use error::CliError;
use manifest::{now, Artifact, RunManifest, MANIFEST_FORMAT};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "MUPOD_THREADS";

/// Parses `args` (program name first), runs the command and maps the
/// outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(error::EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match run(cli, &args[1..], None) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn out_dir(command: &Command) -> Option<&Path> {
    match command {
        Command::Generate { out, .. }
        | Command::Preprocess { out, .. }
        | Command::Pretrain { out, .. }
        | Command::Train { out, .. }
        | Command::Search { out, .. }
        | Command::Evaluate { out, .. }
        | Command::Explain { out, .. } => Some(out),
        Command::Rerun { .. } => None,
    }
}

/// Runs a parsed command. `config` replaces the `--config` file when
/// replaying a manifest.
pub fn run(cli: Cli, raw_args: &[OsString], config: Option<RunConfig>) -> Result<(), CliError> {
    if let Command::Rerun { manifest } = &cli.command {
        return rerun(manifest);
    }
    let mut cfg = match (config, &cli.config) {
        (Some(c), _) => c,
        (None, Some(path)) => RunConfig::load(path)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let started_at = now();
    let mut io = Io::default();
    let name = cli.command.name();
    let out = out_dir(&cli.command).map(Path::to_path_buf).unwrap_or_default();
    std::fs::create_dir_all(&out).map_err(|e| error::io_error(&out, e))?;

    match &cli.command {
        Command::Generate {
            out,
            n_patients,
            signal,
            rule,
        } => commands::generate_cmd(&mut cfg, out, *n_patients, *signal, *rule, &mut io)?,
        Command::Preprocess {
            claims,
            enrollees,
            vocab,
            out,
        } => commands::preprocess_cmd(&cfg, claims, enrollees, vocab, out, &mut io)?,
        Command::Pretrain { data, out } => commands::pretrain_cmd(&cfg, data, out, &mut io)?,
        Command::Train {
            data,
            model,
            encoders,
            out,
        } => commands::train_cmd(&cfg, data, *model, encoders.as_deref(), out, &mut io)?,
        Command::Search {
            data,
            model,
            encoders,
            trials,
            out,
        } => commands::search_cmd(&cfg, data, *model, encoders.as_deref(), *trials, out, &mut io)?,
        Command::Evaluate {
            data,
            checkpoint,
            split,
            ratios,
            repeats,
            threshold,
            out,
        } => commands::evaluate_cmd(
            &mut cfg,
            data,
            checkpoint,
            *split,
            ratios.clone(),
            *repeats,
            *threshold,
            out,
            &mut io,
        )?,
        Command::Explain {
            data,
            checkpoint,
            patient,
            count,
            layer,
            pair,
            out,
        } => commands::explain_cmd(&mut cfg, data, checkpoint, patient, *count, *layer, *pair, out, &mut io)?,
        Command::Rerun { .. } => unreachable!("handled above"),
    }

    let hash_all = |paths: &[PathBuf]| paths.iter().map(|p| Artifact::hash(p)).collect::<Result<Vec<_>, _>>();
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: name.into(),
        args: without_config(raw_args),
        seed: cfg.seed,
        config: cfg,
        inputs: hash_all(&io.inputs)?,
        outputs: hash_all(&io.outputs)?,
        started_at,
        finished_at: now(),
    };
    let path = cli.manifest.clone().unwrap_or_else(|| out.join(format!("{name}.manifest.json")));
    manifest.write(&path)?;
    Ok(())
}

/// Replays a manifest with its recorded configuration and checks that
/// every input is unchanged and every output hashes identically.
pub fn rerun(path: &Path) -> Result<(), CliError> {
    let recorded = RunManifest::load(path)?;
    for a in &recorded.inputs {
        if Artifact::hash(&a.path)?.sha256 != a.sha256 {
            return Err(CliError::usage(format!("input {} changed since the recorded run", a.path.display())));
        }
    }
    let mut argv: Vec<OsString> = vec!["mupod".into()];
    argv.extend(recorded.args.iter().map(OsString::from));
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if matches!(cli.command, Command::Rerun { .. }) {
        return Err(CliError::usage("a rerun manifest cannot point at another rerun"));
    }
    run(cli, &argv[1..], Some(recorded.config.clone()))?;
    let changed = recorded.changed_outputs()?;
    if !changed.is_empty() {
        let list: Vec<String> = changed.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::runtime(format!("outputs differ from the recorded run: {}", list.join(", "))));
    }
    println!("reproduced {} outputs of `{}`", recorded.outputs.len(), recorded.command);
    Ok(())
}
