//! Entry points behind the `ipl` subcommands. Each returns the files it wrote.
//!
//! Data directory layout (written by `gen`): `source.csv`, `source_test.csv`
//! and `target.csv`. Target labels are stored for scoring and never used
//! for training.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::{Profile, RunConfig};
use crate::datagen::{make_domain_pair, read_labeled, write_labeled};
use crate::error::{Error, Result};
use crate::experiment::{ablation, ablation_table, sweep, sweep_table, SweepParam};
use crate::io::{metrics_to_text, save_checkpoint, SoftPredictionSet};
use crate::pipeline::{evaluate, export_predictions, run_full, train_source};

pub const SOURCE_FILE: &str = "source.csv";
pub const SOURCE_TEST_FILE: &str = "source_test.csv";
pub const TARGET_FILE: &str = "target.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const SOURCE_CHECKPOINT: &str = "source.ckpt";
pub const TARGET_CHECKPOINT: &str = "target.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CONFIG_FILE: &str = "config.txt";

/// Builds the run config: file (if any), then `--profile`, then `--seed`.
pub fn resolve_config(
    path: Option<&Path>,
    profile: Option<Profile>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    if let Some(p) = profile {
        text.push_str(&format!("\nprofile = {p}\n"));
    }
    let mut config = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: PathBuf, contents: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn first_seed(config: &RunConfig) -> u64 {
    config.seeds[0]
}

/// Generates a synthetic source/target pair.
pub fn cmd_gen(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    create_dir(out)?;
    let pair = make_domain_pair(&config.data, first_seed(config))?;
    let k = pair.num_classes;
    let mut written = Vec::new();
    for (name, set) in [
        (SOURCE_FILE, &pair.source),
        (SOURCE_TEST_FILE, &pair.source_test),
    ] {
        let path = out.join(name);
        write_labeled(&path, set, k)?;
        written.push(path);
    }
    let path = out.join(TARGET_FILE);
    write_labeled(&path, &pair.target.into_labeled(), k)?;
    written.push(path);
    write_file(out.join(CONFIG_FILE), &config.render(), &mut written)?;
    Ok(written)
}

/// Trains the source model and exports its predictions on the target inputs.
pub fn cmd_source(config: &RunConfig, data: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    create_dir(out)?;
    let hp = config.hyper_for_seed(first_seed(config));
    let (source, k) = read_labeled(&data.join(SOURCE_FILE))?;
    let (target, target_k) = read_labeled(&data.join(TARGET_FILE))?;
    if target_k != k || target.features.cols() != source.features.cols() {
        return Err(Error::Validation(
            "source and target files disagree on classes or dimension".into(),
        ));
    }
    let model = train_source(&source, k, &hp)?;

    let mut written = Vec::new();
    let path = out.join(SOURCE_CHECKPOINT);
    save_checkpoint(&model, &path)?;
    written.push(path);
    let predictions = export_predictions(&model, &target.features)?;
    write_file(
        out.join(PREDICTIONS_FILE),
        &predictions.to_text(),
        &mut written,
    )?;

    let test_path = data.join(SOURCE_TEST_FILE);
    if test_path.exists() {
        let (test, _) = read_labeled(&test_path)?;
        let acc = evaluate(&model, &test.features, &test.labels)?.accuracy;
        info!("source test accuracy {acc:.4}");
        write_file(
            out.join("source_summary.txt"),
            &format!("source_test_acc={acc:.6}\n"),
            &mut written,
        )?;
    }
    Ok(written)
}

/// Adapts to the target using only the exported predictions.
pub fn cmd_adapt(
    config: &RunConfig,
    data: &Path,
    predictions: &Path,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let hp = config.hyper_for_seed(first_seed(config));
    let predictions = SoftPredictionSet::read(predictions)?;
    let (target, k) = read_labeled(&data.join(TARGET_FILE))?;
    if k != predictions.num_classes() {
        return Err(Error::Validation(format!(
            "target file has K={k}, predictions have K={}",
            predictions.num_classes()
        )));
    }
    create_dir(out)?;
    let outcome = run_full(&target.features, &predictions, &hp, Some(&target.labels))?;

    let mut written = Vec::new();
    write_file(
        out.join(METRICS_FILE),
        &metrics_to_text(&outcome.history),
        &mut written,
    )?;
    let path = out.join(TARGET_CHECKPOINT);
    save_checkpoint(&outcome.model, &path)?;
    written.push(path);

    let fmt_acc = |a: Option<f64>| a.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
    let mut summary = String::new();
    let _ = writeln!(summary, "stop={}", outcome.stop.name());
    let _ = writeln!(summary, "rounds={}", outcome.rounds());
    let _ = writeln!(summary, "high_size={}", outcome.pools.high_len());
    let _ = writeln!(summary, "low_size={}", outcome.pools.low_len());
    let _ = writeln!(summary, "source_acc={}", fmt_acc(outcome.source_accuracy));
    let _ = writeln!(summary, "crude_acc={}", fmt_acc(outcome.crude_accuracy));
    let _ = writeln!(summary, "final_acc={}", fmt_acc(outcome.final_accuracy));
    let _ = writeln!(
        summary,
        "crude_fingerprint={:016x}",
        outcome.crude.fingerprint()
    );
    write_file(out.join(SUMMARY_FILE), &summary, &mut written)?;
    Ok(written)
}

pub fn cmd_sweep(
    config: &RunConfig,
    param: SweepParam,
    values: &[f64],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let rows = sweep(config, param, values)?;
    create_dir(out)?;
    let mut written = Vec::new();
    write_file(
        out.join(format!("sweep_{param}.csv")),
        &sweep_table(param, &rows),
        &mut written,
    )?;
    Ok(written)
}

pub fn cmd_ablate(config: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let rows = ablation(config)?;
    create_dir(out)?;
    let mut written = Vec::new();
    write_file(
        out.join("ablation.csv"),
        &ablation_table(&rows),
        &mut written,
    )?;
    Ok(written)
}
