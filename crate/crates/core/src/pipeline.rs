//! Training stages and the round loop.
//!
//! Source side: [`train_source`] then [`export_predictions`]. Everything on
//! the target side starts from a [`SoftPredictionSet`] and never sees the
//! source model.
//!
//! Target side, driven by [`Adapter`]:
//!
//! 1. a crude model is distilled from the source predictions (plus mixup) and
//!    frozen; every later round restarts from a copy of it,
//! 2. warm-up: a student distilled from the same predictions supplies the
//!    features for prototypes and similarity; the warm-up gate fills the
//!    high-confidence pool, which must not come out empty,
//! 3. incremental rounds: the current model relabels and gates the remaining
//!    low-confidence samples until the low pool is small enough, the round
//!    cap is hit, or two consecutive rounds promote nothing,
//! 4. a last fine-tune over all target samples.

use log::{debug, info};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::config::{Finetune, Hyperparams};
use crate::datagen::{iterate_batches, seeded_rng, LabeledSet};
use crate::error::{Error, Result};
use crate::io::{RoundMetrics, SoftPredictionSet, ROW_SUM_TOL};
use crate::losses::{
    cross_entropy_smoothed, one_hot, smooth_labels, total_loss, LossWeights, MixupPlan,
};
use crate::matrix::Matrix;
use crate::nn::{Gradients, Mlp, Sgd};
use crate::selector::{
    incremental_gate, intra_class_similarity, prototype_labels, warmup_gate, Evidence,
    GateThresholds,
};

const STAGE_SOURCE: u64 = 1;
const STAGE_CRUDE: u64 = 2;
const STAGE_STUDENT: u64 = 3;
const STAGE_FINETUNE: u64 = 4;
const STAGE_ROUND: u64 = 100;
/// Stream reserved for mixup coefficients and partners inside a stage.
const MIXUP_STREAM: u64 = u64::MAX;

/// Independent seed for one stage of a run.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seeded_rng(seed, stage).next_u64()
}

/// Mean loss terms over the last epoch of a training stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochLoss {
    pub total: f64,
    pub kd: f64,
    pub im: f64,
    pub mix: f64,
}

struct Schedule<'a> {
    stage: &'static str,
    hp: &'a Hyperparams,
    seed: u64,
    epochs: usize,
}

/// Mini-batch SGD over `n` samples. `batch_loss` gets the model, the batch
/// indices and the stage's mixup RNG.
fn fit<F>(model: &mut Mlp, n: usize, schedule: Schedule<'_>, mut batch_loss: F) -> Result<EpochLoss>
where
    F: FnMut(&Mlp, &[usize], &mut ChaCha8Rng) -> Result<(EpochLoss, Gradients)>,
{
    let Schedule {
        stage,
        hp,
        seed,
        epochs,
    } = schedule;
    let mut opt = Sgd::new(model, hp.lr, hp.momentum, hp.weight_decay);
    let mut rng = seeded_rng(seed, MIXUP_STREAM);
    let mut last = EpochLoss::default();
    for epoch in 0..epochs {
        let mut acc = EpochLoss::default();
        for (step, batch) in iterate_batches(n, hp.batch_size, seed, epoch as u64)
            .iter()
            .enumerate()
        {
            let (loss, grads) = batch_loss(model, batch, &mut rng)?;
            let diverged = |loss: f64| Error::Divergence {
                stage,
                epoch,
                step,
                loss,
            };
            if !loss.total.is_finite() {
                return Err(diverged(loss.total));
            }
            opt.step(model, &grads)?;
            if !model.is_finite() {
                return Err(diverged(loss.total));
            }
            let w = batch.len() as f64;
            acc.total += w * loss.total;
            acc.kd += w * loss.kd;
            acc.im += w * loss.im;
            acc.mix += w * loss.mix;
        }
        let n = n.max(1) as f64;
        last = EpochLoss {
            total: acc.total / n,
            kd: acc.kd / n,
            im: acc.im / n,
            mix: acc.mix / n,
        };
        debug!("{stage} epoch {epoch}: loss {:.6}", last.total);
    }
    Ok(last)
}

/// Cross-entropy against fixed soft targets, in place.
pub fn fit_cross_entropy(
    model: &mut Mlp,
    inputs: &Matrix,
    targets: &Matrix,
    hp: &Hyperparams,
    seed: u64,
) -> Result<EpochLoss> {
    targets.ensure_shape("fit_cross_entropy", inputs.rows(), model.num_classes())?;
    let schedule = Schedule {
        stage: "source",
        hp,
        seed,
        epochs: hp.epochs_source,
    };
    fit(model, inputs.rows(), schedule, |m, batch, _| {
        let x = inputs.select_rows(batch);
        let fwd = m.forward(&x)?;
        let lv = cross_entropy_smoothed(&fwd.probs, &targets.select_rows(batch))?;
        let grads = m.backward(&fwd, &lv.grad_logits)?;
        let loss = EpochLoss {
            total: lv.value,
            kd: lv.value,
            ..EpochLoss::default()
        };
        Ok((loss, grads))
    })
}

/// Trains the source model with label-smoothed cross-entropy.
pub fn train_source(source: &LabeledSet, num_classes: usize, hp: &Hyperparams) -> Result<Mlp> {
    hp.validate()?;
    let dims = hp.layer_dims(source.features.cols(), num_classes);
    let mut model = Mlp::new(&dims, stage_seed(hp.seed, STAGE_SOURCE))?;
    let targets = smooth_labels(&one_hot(&source.labels, num_classes)?, hp.gamma)?;
    let loss = fit_cross_entropy(
        &mut model,
        &source.features,
        &targets,
        hp,
        stage_seed(hp.seed, STAGE_SOURCE),
    )?;
    info!("source model trained, final epoch loss {:.4}", loss.total);
    Ok(model)
}

/// Softmax outputs of the source model on the target inputs. This is the
/// only thing handed to the adaptation side.
pub fn export_predictions(source_model: &Mlp, target_inputs: &Matrix) -> Result<SoftPredictionSet> {
    SoftPredictionSet::new(source_model.predict(target_inputs)?)
}

/// Trains `model` on the rows `subset` of `inputs` with the weighted objective.
#[allow(clippy::too_many_arguments)]
fn fit_target(
    model: &mut Mlp,
    inputs: &Matrix,
    teacher: &Matrix,
    subset: &[usize],
    weights: LossWeights,
    hp: &Hyperparams,
    stage: &'static str,
    seed: u64,
    epochs: usize,
) -> Result<EpochLoss> {
    let schedule = Schedule {
        stage,
        hp,
        seed,
        epochs,
    };
    fit(model, subset.len(), schedule, |m, batch, rng| {
        let rows: Vec<usize> = batch.iter().map(|&b| subset[b]).collect();
        let x = inputs.select_rows(&rows);
        let t = (weights.kd != 0.0).then(|| teacher.select_rows(&rows));
        let plan = if weights.mix != 0.0 {
            Some(MixupPlan::sample(rows.len(), hp.omega, rng)?)
        } else {
            None
        };
        let tl = total_loss(m, &x, t.as_ref(), weights, plan.as_ref())?;
        let loss = EpochLoss {
            total: tl.value,
            kd: tl.kd,
            im: tl.im,
            mix: tl.mix,
        };
        Ok((loss, tl.grads))
    })
}

fn check_inputs(inputs: &Matrix, predictions: &SoftPredictionSet) -> Result<()> {
    if inputs.rows() != predictions.len() {
        return Err(Error::shape(
            "adaptation inputs",
            predictions.len(),
            inputs.rows(),
        ));
    }
    if inputs.rows() == 0 {
        return Err(Error::Validation("target set is empty".into()));
    }
    Ok(())
}

fn distill_fresh(
    inputs: &Matrix,
    predictions: &SoftPredictionSet,
    hp: &Hyperparams,
    weights: LossWeights,
    stage: &'static str,
    stage_id: u64,
) -> Result<(Mlp, EpochLoss)> {
    check_inputs(inputs, predictions)?;
    let dims = hp.layer_dims(inputs.cols(), predictions.num_classes());
    let seed = stage_seed(hp.seed, stage_id);
    let mut model = Mlp::new(&dims, seed)?;
    let all: Vec<usize> = (0..inputs.rows()).collect();
    let loss = fit_target(
        &mut model,
        inputs,
        predictions.probs(),
        &all,
        weights,
        hp,
        stage,
        seed,
        hp.epochs_warm,
    )?;
    Ok((model, loss))
}

/// Crude target model: distillation plus mixup on every target sample.
pub fn train_crude_target(
    inputs: &Matrix,
    predictions: &SoftPredictionSet,
    hp: &Hyperparams,
) -> Result<Mlp> {
    let (model, _) = distill_fresh(
        inputs,
        predictions,
        hp,
        LossWeights::KD_MIX,
        "crude",
        STAGE_CRUDE,
    )?;
    Ok(model)
}

/// Student used only to supply features for the warm-up selection.
pub fn train_student(
    inputs: &Matrix,
    predictions: &SoftPredictionSet,
    hp: &Hyperparams,
) -> Result<Mlp> {
    let (model, _) = distill_fresh(
        inputs,
        predictions,
        hp,
        LossWeights::KD_ONLY,
        "student",
        STAGE_STUDENT,
    )?;
    Ok(model)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return f64::NAN;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the labels.
    pub per_class: Vec<Option<f64>>,
}

pub fn evaluate(model: &Mlp, inputs: &Matrix, truth: &[usize]) -> Result<Evaluation> {
    if inputs.rows() != truth.len() {
        return Err(Error::shape("evaluate", inputs.rows(), truth.len()));
    }
    let predicted = model.predict(inputs)?.argmax_rows();
    let k = model.num_classes();
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        if t >= k {
            return Err(Error::Validation(format!(
                "label {t} out of range for {k} classes"
            )));
        }
        totals[t] += 1;
        hits[t] += usize::from(p == t);
    }
    Ok(Evaluation {
        accuracy: accuracy(&predicted, truth),
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
            .collect(),
    })
}

/// The two sample pools. Every sample is in exactly one of them, and a
/// sample in the high-confidence pool never goes back.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidencePools {
    in_high: Vec<bool>,
    promoted_round: Vec<Option<usize>>,
    high_count: usize,
    /// Soft pseudo-label per sample.
    labels: Matrix,
}

impl ConfidencePools {
    /// All samples start in the low-confidence pool with the given labels.
    pub fn new(initial_labels: Matrix) -> Self {
        let n = initial_labels.rows();
        Self {
            in_high: vec![false; n],
            promoted_round: vec![None; n],
            high_count: 0,
            labels: initial_labels,
        }
    }

    pub fn len(&self) -> usize {
        self.in_high.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_high.is_empty()
    }

    pub fn high_len(&self) -> usize {
        self.high_count
    }

    pub fn low_len(&self) -> usize {
        self.len() - self.high_count
    }

    /// `|L| / n`; 0 for an empty set.
    pub fn low_fraction(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.low_len() as f64 / self.len() as f64
        }
    }

    pub fn is_high(&self, i: usize) -> bool {
        self.in_high[i]
    }

    pub fn promoted_round(&self, i: usize) -> Option<usize> {
        self.promoted_round[i]
    }

    pub fn high_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.in_high[i]).collect()
    }

    pub fn low_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.in_high[i]).collect()
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        self.labels.argmax_rows()
    }

    /// Moves sample `i` into the high-confidence pool, optionally replacing
    /// its pseudo-label. Promoting twice is an error and leaves state as is.
    pub fn promote(&mut self, i: usize, round: usize, label: Option<&[f64]>) -> Result<()> {
        if i >= self.len() {
            return Err(Error::Validation(format!(
                "sample {i} out of range for {} samples",
                self.len()
            )));
        }
        if self.in_high[i] {
            return Err(Error::Validation(format!(
                "sample {i} is already high-confidence"
            )));
        }
        if let Some(row) = label {
            if row.len() != self.labels.cols() {
                return Err(Error::shape(
                    "ConfidencePools::promote",
                    self.labels.cols(),
                    row.len(),
                ));
            }
            self.labels.row_mut(i).copy_from_slice(row);
        }
        self.in_high[i] = true;
        self.promoted_round[i] = Some(round);
        self.high_count += 1;
        Ok(())
    }

    /// Checks the partition and that every pseudo-label is a distribution.
    pub fn check_invariants(&self) -> Result<()> {
        let counted = self.in_high.iter().filter(|h| **h).count();
        if counted != self.high_count || self.labels.rows() != self.len() {
            return Err(Error::Validation("pool bookkeeping out of sync".into()));
        }
        for (i, (&h, r)) in self.in_high.iter().zip(&self.promoted_round).enumerate() {
            if h != r.is_some() {
                return Err(Error::Validation(format!(
                    "sample {i}: membership and promotion round disagree"
                )));
            }
        }
        for (i, row) in self.labels.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..).contains(p)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Validation(format!(
                    "pseudo-label row {i} is not a distribution"
                )));
            }
        }
        Ok(())
    }
}

/// Why the round loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The low-confidence fraction dropped below the stopping threshold.
    LowFractionReached,
    LowPoolEmpty,
    MaxRounds,
    /// Two consecutive rounds promoted nothing.
    Stalled,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::LowFractionReached => "low-fraction-reached",
            StopReason::LowPoolEmpty => "low-pool-empty",
            StopReason::MaxRounds => "max-rounds",
            StopReason::Stalled => "stalled",
        }
    }
}

/// Rounds without promotions tolerated before the loop gives up.
pub const STALL_ROUNDS: usize = 2;

/// Loop control: `None` means run another round.
pub fn stop_reason(
    pools: &ConfidencePools,
    round: usize,
    idle_rounds: usize,
    hp: &Hyperparams,
) -> Option<StopReason> {
    if pools.low_len() == 0 {
        Some(StopReason::LowPoolEmpty)
    } else if pools.low_fraction() < hp.lambda_stop {
        Some(StopReason::LowFractionReached)
    } else if round >= hp.max_rounds {
        Some(StopReason::MaxRounds)
    } else if idle_rounds >= STALL_ROUNDS {
        Some(StopReason::Stalled)
    } else {
        None
    }
}

#[derive(Debug, Clone)]
pub struct AdaptationOutcome {
    pub model: Mlp,
    pub crude: Mlp,
    pub pools: ConfidencePools,
    pub history: Vec<RoundMetrics>,
    pub stop: StopReason,
    /// Accuracy of the source hard labels on the target, if labels were given.
    pub source_accuracy: Option<f64>,
    pub crude_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
}

impl AdaptationOutcome {
    pub fn rounds(&self) -> usize {
        self.history.last().map_or(0, |m| m.round)
    }
}

/// Target-side state machine. Labels in `truth` are used for metrics only.
#[derive(Debug)]
pub struct Adapter<'a> {
    inputs: &'a Matrix,
    predictions: &'a SoftPredictionSet,
    hp: &'a Hyperparams,
    truth: Option<&'a [usize]>,
    thresholds: GateThresholds,
    crude: Mlp,
    crude_fingerprint: u64,
    current: Mlp,
    pools: ConfidencePools,
    round: usize,
    idle_rounds: usize,
    history: Vec<RoundMetrics>,
}

impl<'a> Adapter<'a> {
    /// Validates the inputs and trains the crude model.
    pub fn new(
        inputs: &'a Matrix,
        predictions: &'a SoftPredictionSet,
        hp: &'a Hyperparams,
        truth: Option<&'a [usize]>,
    ) -> Result<Self> {
        hp.validate()?;
        check_inputs(inputs, predictions)?;
        if let Some(t) = truth {
            if t.len() != inputs.rows() {
                return Err(Error::shape("evaluation labels", inputs.rows(), t.len()));
            }
        }
        let crude = train_crude_target(inputs, predictions, hp)?;
        let crude_fingerprint = crude.fingerprint();
        info!("crude target model trained (fingerprint {crude_fingerprint:016x})");
        Ok(Self {
            inputs,
            predictions,
            hp,
            truth,
            thresholds: hp.thresholds(),
            current: crude.clone(),
            crude,
            crude_fingerprint,
            pools: ConfidencePools::new(predictions.probs().clone()),
            round: 0,
            idle_rounds: 0,
            history: Vec::new(),
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn pools(&self) -> &ConfidencePools {
        &self.pools
    }

    pub fn crude(&self) -> &Mlp {
        &self.crude
    }

    pub fn current(&self) -> &Mlp {
        &self.current
    }

    pub fn history(&self) -> &[RoundMetrics] {
        &self.history
    }

    pub fn next_stop(&self) -> Option<StopReason> {
        stop_reason(&self.pools, self.round, self.idle_rounds, self.hp)
    }

    /// Fills the high-confidence pool from the source predictions and trains
    /// the round-1 model on it.
    pub fn warmup(&mut self) -> Result<&RoundMetrics> {
        if self.round != 0 {
            return Err(Error::Validation("warm-up already done".into()));
        }
        let student = train_student(self.inputs, self.predictions, self.hp)?;
        let fwd = student.forward(self.inputs)?;
        let protos = prototype_labels(fwd.features(), &fwd.probs)?;
        let source_labels = self.predictions.hard_labels();
        let k = self.predictions.num_classes();
        let sim = intra_class_similarity(fwd.features(), &source_labels, k, self.hp.delta)?;
        let confidence = self.predictions.probs().max_rows();

        for i in 0..self.pools.len() {
            let ev = Evidence {
                label: source_labels[i],
                confidence: confidence[i],
                prototype: protos.labels[i],
                margin: protos.margins[i],
                similarity: sim.scores[i],
            };
            if warmup_gate(&ev, &self.thresholds).is_promote() {
                self.pools.promote(i, 1, None)?;
            }
        }
        if self.pools.high_len() == 0 {
            return Err(Error::EmptySelection {
                candidates: self.pools.len(),
            });
        }
        self.finish_round(1)
    }

    /// Relabels and gates the low-confidence pool with the current model,
    /// then retrains from the crude model on the enlarged pool.
    pub fn incremental_round(&mut self) -> Result<&RoundMetrics> {
        if self.round == 0 {
            return Err(Error::Validation("incremental round before warm-up".into()));
        }
        let round = self.round + 1;
        let fwd = self.current.forward(self.inputs)?;
        let labels = fwd.probs.argmax_rows();
        let confidence = fwd.probs.max_rows();
        let protos = prototype_labels(fwd.features(), &fwd.probs)?;
        let sim = intra_class_similarity(
            fwd.features(),
            &labels,
            self.predictions.num_classes(),
            self.hp.delta,
        )?;

        let mut promoted = 0;
        for i in self.pools.low_indices() {
            let ev = Evidence {
                label: labels[i],
                confidence: confidence[i],
                prototype: protos.labels[i],
                margin: protos.margins[i],
                similarity: sim.scores[i],
            };
            if incremental_gate(&ev, &self.thresholds, round).is_promote() {
                self.pools.promote(i, round, Some(fwd.probs.row(i)))?;
                promoted += 1;
            }
        }
        self.idle_rounds = if promoted == 0 {
            self.idle_rounds + 1
        } else {
            0
        };
        debug!("round {round}: promoted {promoted}");
        self.finish_round(round)
    }

    fn finish_round(&mut self, round: usize) -> Result<&RoundMetrics> {
        if self.crude.fingerprint() != self.crude_fingerprint {
            return Err(Error::Validation(
                "crude model changed between rounds".into(),
            ));
        }
        let mut model = self.crude.clone();
        let high = self.pools.high_indices();
        let loss = fit_target(
            &mut model,
            self.inputs,
            self.pools.labels(),
            &high,
            self.hp.loss_weights,
            self.hp,
            "round",
            stage_seed(self.hp.seed, STAGE_ROUND + round as u64),
            self.hp.epochs_round,
        )?;
        self.current = model;
        self.round = round;

        let (purity, acc) = match self.truth {
            Some(truth) => {
                let pseudo = self.pools.hard_labels();
                let hits = high.iter().filter(|&&i| pseudo[i] == truth[i]).count();
                let purity = hits as f64 / high.len().max(1) as f64;
                (
                    purity,
                    evaluate(&self.current, self.inputs, truth)?.accuracy,
                )
            }
            None => (f64::NAN, f64::NAN),
        };
        let metrics = RoundMetrics {
            round,
            high_size: self.pools.high_len(),
            low_size: self.pools.low_len(),
            high_purity: purity,
            target_accuracy: acc,
            loss_kd: loss.kd,
            loss_im: loss.im,
            loss_mix: loss.mix,
        };
        info!(
            "round {round}: |H|={} |L|={} purity={purity:.4} acc={acc:.4}",
            metrics.high_size, metrics.low_size
        );
        self.history.push(metrics);
        Ok(self.history.last().expect("just pushed"))
    }

    /// Final fine-tune over all target samples.
    pub fn finish(self, stop: StopReason) -> Result<AdaptationOutcome> {
        let mut model = self.current;
        let all: Vec<usize> = (0..self.inputs.rows()).collect();
        let seed = stage_seed(self.hp.seed, STAGE_FINETUNE);
        let epochs = self.hp.epochs_finetune;
        let teacher = self.pools.labels();
        match self.hp.finetune {
            Finetune::InfoMax => {
                fit_target(
                    &mut model,
                    self.inputs,
                    teacher,
                    &all,
                    LossWeights::IM_ONLY,
                    self.hp,
                    "finetune",
                    seed,
                    epochs,
                )?;
            }
            Finetune::Full => {
                fit_target(
                    &mut model,
                    self.inputs,
                    teacher,
                    &all,
                    self.hp.loss_weights,
                    self.hp,
                    "finetune",
                    seed,
                    epochs,
                )?;
            }
            Finetune::None => {}
        }
        let score = |m: &Mlp| -> Result<Option<f64>> {
            self.truth
                .map(|t| evaluate(m, self.inputs, t).map(|e| e.accuracy))
                .transpose()
        };
        let outcome = AdaptationOutcome {
            final_accuracy: score(&model)?,
            crude_accuracy: score(&self.crude)?,
            source_accuracy: self
                .truth
                .map(|t| accuracy(&self.predictions.hard_labels(), t)),
            model,
            crude: self.crude,
            pools: self.pools,
            history: self.history,
            stop,
        };
        info!(
            "adaptation stopped after round {} ({}), final accuracy {:?}",
            outcome.rounds(),
            stop.name(),
            outcome.final_accuracy
        );
        Ok(outcome)
    }
}

/// The whole target side: crude model, warm-up, rounds, fine-tune.
pub fn run_full(
    inputs: &Matrix,
    predictions: &SoftPredictionSet,
    hp: &Hyperparams,
    truth: Option<&[usize]>,
) -> Result<AdaptationOutcome> {
    let mut adapter = Adapter::new(inputs, predictions, hp, truth)?;
    adapter.warmup()?;
    let stop = loop {
        if let Some(reason) = adapter.next_stop() {
            break reason;
        }
        adapter.incremental_round()?;
    };
    adapter.finish(stop)
}
