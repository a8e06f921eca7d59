//! Multi-seed runs, hyperparameter sweeps and the loss ablation.
//!
//! Each seed generates its own domain pair and source model. The source
//! predictions go through the text wire format before adaptation, so
//! in-process runs see exactly what a file-based run would.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::{Finetune, Hyperparams, RunConfig};
use crate::datagen::{make_domain_pair, DomainPair};
use crate::error::{Error, Result};
use crate::io::SoftPredictionSet;
use crate::losses::LossWeights;
use crate::pipeline::{
    evaluate, export_predictions, run_full, train_source, AdaptationOutcome, StopReason,
};

/// Data and source predictions for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub pair: DomainPair,
    pub predictions: SoftPredictionSet,
    pub source_test_accuracy: f64,
}

pub fn prepare(config: &RunConfig, seed: u64) -> Result<Prepared> {
    let pair = make_domain_pair(&config.data, seed)?;
    let hp = config.hyper_for_seed(seed);
    let source = train_source(&pair.source, pair.num_classes, &hp)?;
    let source_test_accuracy = evaluate(
        &source,
        &pair.source_test.features,
        &pair.source_test.labels,
    )?
    .accuracy;
    let exported = export_predictions(&source, pair.target.inputs())?;
    let predictions =
        SoftPredictionSet::from_text(&exported.to_text(), Path::new("<predictions>"))?;
    Ok(Prepared {
        seed,
        pair,
        predictions,
        source_test_accuracy,
    })
}

pub fn adapt(prepared: &Prepared, hp: &Hyperparams) -> Result<AdaptationOutcome> {
    let target = &prepared.pair.target;
    run_full(
        target.inputs(),
        &prepared.predictions,
        hp,
        Some(target.evaluation_labels()),
    )
}

/// Headline numbers of one adapted seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    pub source_test_accuracy: f64,
    /// Accuracy of the source predictions on the target.
    pub source_accuracy: f64,
    pub crude_accuracy: f64,
    pub final_accuracy: f64,
    /// Purity of the high-confidence pool right after warm-up.
    pub warmup_purity: f64,
    pub warmup_size: usize,
    pub rounds: usize,
    pub stop: StopReason,
}

impl RunSummary {
    pub fn new(prepared: &Prepared, outcome: &AdaptationOutcome) -> Self {
        let warmup = outcome.history.first();
        Self {
            seed: prepared.seed,
            source_test_accuracy: prepared.source_test_accuracy,
            source_accuracy: outcome.source_accuracy.unwrap_or(f64::NAN),
            crude_accuracy: outcome.crude_accuracy.unwrap_or(f64::NAN),
            final_accuracy: outcome.final_accuracy.unwrap_or(f64::NAN),
            warmup_purity: warmup.map_or(f64::NAN, |m| m.high_purity),
            warmup_size: warmup.map_or(0, |m| m.high_size),
            rounds: outcome.rounds(),
            stop: outcome.stop,
        }
    }
}

pub fn prepare_all(config: &RunConfig) -> Result<Vec<Prepared>> {
    config
        .seeds
        .par_iter()
        .map(|&s| prepare(config, s))
        .collect()
}

/// Adapts every prepared seed with the hyperparameters from `make_hp`.
pub fn run_prepared<F>(prepared: &[Prepared], make_hp: F) -> Result<Vec<RunSummary>>
where
    F: Fn(u64) -> Hyperparams + Sync,
{
    prepared
        .par_iter()
        .map(|p| adapt(p, &make_hp(p.seed)).map(|o| RunSummary::new(p, &o)))
        .collect()
}

pub fn run_seeds(config: &RunConfig) -> Result<Vec<RunSummary>> {
    config.validate()?;
    let prepared = prepare_all(config)?;
    run_prepared(&prepared, |s| config.hyper_for_seed(s))
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Beta,
    Lambda,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Lambda => "lambda",
        }
    }

    pub fn apply(self, hp: &mut Hyperparams, value: f64) {
        match self {
            SweepParam::Alpha => hp.alpha = value,
            SweepParam::Beta => hp.beta = value,
            SweepParam::Lambda => hp.lambda_stop = value,
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(Error::Config(format!(
                "can only sweep alpha|beta|lambda, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub runs: Vec<RunSummary>,
}

/// Re-runs adaptation for each value. Source models are shared across values.
pub fn sweep(config: &RunConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    config.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    for &v in values {
        let mut hp = config.hyper.clone();
        param.apply(&mut hp, v);
        hp.validate()?;
    }
    let prepared = prepare_all(config)?;
    values
        .iter()
        .map(|&value| {
            let runs = run_prepared(&prepared, |seed| {
                let mut hp = config.hyper_for_seed(seed);
                param.apply(&mut hp, value);
                hp
            })?;
            Ok(SweepRow { value, runs })
        })
        .collect()
}

fn seed_columns(s: &mut String, runs: &[RunSummary]) {
    for r in runs {
        let _ = write!(s, ",acc_seed{}", r.seed);
    }
}

pub fn sweep_table(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{param},mean_final_acc,mean_crude_acc,mean_source_acc,mean_warmup_purity,mean_rounds"
    );
    if let Some(first) = rows.first() {
        seed_columns(&mut s, &first.runs);
    }
    s.push('\n');
    for row in rows {
        let r = &row.runs;
        let _ = write!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.2}",
            row.value,
            mean(r.iter().map(|x| x.final_accuracy)),
            mean(r.iter().map(|x| x.crude_accuracy)),
            mean(r.iter().map(|x| x.source_accuracy)),
            mean(r.iter().map(|x| x.warmup_purity)),
            mean(r.iter().map(|x| x.rounds as f64)),
        );
        for x in r {
            let _ = write!(s, ",{:.6}", x.final_accuracy);
        }
        s.push('\n');
    }
    s
}

/// One row of the loss ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub weights: LossWeights,
}

pub const ABLATION_VARIANTS: [AblationVariant; 4] = [
    AblationVariant {
        name: "kd",
        weights: LossWeights::KD_ONLY,
    },
    AblationVariant {
        name: "kd+im",
        weights: LossWeights::KD_IM,
    },
    AblationVariant {
        name: "kd+mix",
        weights: LossWeights::KD_MIX,
    },
    AblationVariant {
        name: "kd+im+mix",
        weights: LossWeights::FULL,
    },
];

impl AblationVariant {
    /// Round objective set to this variant. Variants without the IM term
    /// also skip the IM fine-tune, so the term is absent end to end.
    pub fn configure(&self, base: &Hyperparams) -> Hyperparams {
        let mut hp = base.clone();
        hp.loss_weights = self.weights;
        if self.weights.im == 0.0 && hp.finetune != Finetune::Full {
            hp.finetune = Finetune::None;
        }
        hp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub runs: Vec<RunSummary>,
}

impl AblationRow {
    pub fn mean_final_accuracy(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.final_accuracy))
    }
}

pub fn ablation(config: &RunConfig) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let prepared = prepare_all(config)?;
    ABLATION_VARIANTS
        .iter()
        .map(|variant| {
            let runs = run_prepared(&prepared, |seed| {
                variant.configure(&config.hyper_for_seed(seed))
            })?;
            Ok(AblationRow {
                variant: *variant,
                runs,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("losses,mean_final_acc,mean_crude_acc,mean_rounds");
    if let Some(first) = rows.first() {
        seed_columns(&mut s, &first.runs);
    }
    s.push('\n');
    for row in rows {
        let r = &row.runs;
        let _ = write!(
            s,
            "{},{:.6},{:.6},{:.2}",
            row.variant.name,
            row.mean_final_accuracy(),
            mean(r.iter().map(|x| x.crude_accuracy)),
            mean(r.iter().map(|x| x.rounds as f64)),
        );
        for x in r {
            let _ = write!(s, ",{:.6}", x.final_accuracy);
        }
        s.push('\n');
    }
    s
}
