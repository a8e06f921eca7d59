//! Training objectives.
//!
//! Every loss takes probability rows (softmax outputs) and reports its
//! gradient with respect to the *logits* that produced them, so it can be fed
//! straight into [`Mlp::backward`]. All logarithms use `ln(max(p, 1e-12))`.
//!
//! Batch losses are means over samples. The diversity term is the negative
//! entropy of the batch-mean prediction, so minimizing it spreads predictions
//! over classes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Gradients, Mlp};

pub const LOG_FLOOR: f64 = 1e-12;

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// A loss value with its gradient on the logits.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad_logits: Matrix,
}

/// A loss value with its gradient on the model parameters.
#[derive(Debug, Clone)]
pub struct ParamLoss {
    pub value: f64,
    pub grads: Gradients,
}

/// Converts `dL/dp` into `dL/dz` for `p = softmax(z)`, row by row.
pub fn softmax_backward(probs: &Matrix, grad_probs: &Matrix) -> Result<Matrix> {
    probs.ensure_same_shape("softmax_backward", grad_probs)?;
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = grad_probs.row(r);
        let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, pi), gi) in out.row_mut(r).iter_mut().zip(p).zip(g) {
            *o = pi * (gi - inner);
        }
    }
    Ok(out)
}

pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Validation(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        m.set(i, y, 1.0);
    }
    Ok(m)
}

/// Label smoothing `q = γ/K + (1 − γ)·y` on one-hot rows.
pub fn smooth_labels(one_hot: &Matrix, gamma: f64) -> Result<Matrix> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Validation(format!(
            "smoothing gamma must be in [0, 1), got {gamma}"
        )));
    }
    let k = one_hot.cols();
    if k == 0 {
        return Err(Error::Validation("label matrix has no classes".into()));
    }
    let mut q = one_hot.clone();
    for (r, row) in one_hot.iter_rows().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::Validation(format!(
                "row {r} is not one-hot: {row:?}"
            )));
        }
        for v in q.row_mut(r) {
            *v = gamma / k as f64 + (1.0 - gamma) * *v;
        }
    }
    Ok(q)
}

fn check_pair(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    a.ensure_same_shape(op, b)?;
    if a.rows() == 0 {
        return Err(Error::Validation(format!("{op}: empty batch")));
    }
    Ok(())
}

/// Mean of `−Σ_k q_k ln p_k`.
pub fn cross_entropy_smoothed(probs: &Matrix, targets: &Matrix) -> Result<LossValue> {
    check_pair("cross_entropy_smoothed", probs, targets)?;
    let n = probs.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let (p, q) = (probs.row(r), targets.row(r));
        value -= p
            .iter()
            .zip(q)
            .map(|(&pk, &qk)| qk * clamped_ln(pk))
            .sum::<f64>();
        let q_sum: f64 = q.iter().sum();
        for ((g, &pk), &qk) in grad.row_mut(r).iter_mut().zip(p).zip(q) {
            *g = (pk * q_sum - qk) / n;
        }
    }
    Ok(LossValue {
        value: value / n,
        grad_logits: grad,
    })
}

/// Mean of `KL(teacher ‖ student) = Σ_k t_k ln(t_k / s_k)`, gradient on the
/// student's logits.
pub fn kl_divergence(teacher: &Matrix, student: &Matrix) -> Result<LossValue> {
    check_pair("kl_divergence", teacher, student)?;
    let n = teacher.rows() as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(teacher.rows(), teacher.cols());
    for r in 0..teacher.rows() {
        let (t, s) = (teacher.row(r), student.row(r));
        for (&tk, &sk) in t.iter().zip(s) {
            if tk > 0.0 {
                value += tk * (clamped_ln(tk) - clamped_ln(sk));
            }
        }
        let t_sum: f64 = t.iter().sum();
        for ((g, &tk), &sk) in grad.row_mut(r).iter_mut().zip(t).zip(s) {
            *g = (sk * t_sum - tk) / n;
        }
    }
    Ok(LossValue {
        value: value / n,
        grad_logits: grad,
    })
}

/// Mean per-sample entropy `−Σ_k p_k ln p_k`.
pub fn entropy_loss(probs: &Matrix) -> Result<LossValue> {
    if probs.rows() == 0 {
        return Err(Error::Validation("entropy_loss: empty batch".into()));
    }
    let n = probs.rows() as f64;
    let mut value = 0.0;
    let mut grad_probs = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        for (g, &p) in grad_probs.row_mut(r).iter_mut().zip(probs.row(r)) {
            if p > 0.0 {
                value -= p * clamped_ln(p);
            }
            *g = -(clamped_ln(p) + 1.0) / n;
        }
    }
    Ok(LossValue {
        value: value / n,
        grad_logits: softmax_backward(probs, &grad_probs)?,
    })
}

/// `Σ_k p̂_k ln p̂_k` where `p̂` is the batch-mean prediction.
pub fn diversity_loss(probs: &Matrix) -> Result<LossValue> {
    if probs.rows() == 0 {
        return Err(Error::Validation("diversity_loss: empty batch".into()));
    }
    let n = probs.rows() as f64;
    let mean = probs.column_means();
    let value = mean
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| m * clamped_ln(m))
        .sum::<f64>();
    let per_class: Vec<f64> = mean.iter().map(|&m| (clamped_ln(m) + 1.0) / n).collect();
    let mut grad_probs = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        grad_probs.row_mut(r).copy_from_slice(&per_class);
    }
    Ok(LossValue {
        value,
        grad_logits: softmax_backward(probs, &grad_probs)?,
    })
}

/// Information maximization: entropy plus diversity.
pub fn im_loss(probs: &Matrix) -> Result<LossValue> {
    let mut ent = entropy_loss(probs)?;
    let div = diversity_loss(probs)?;
    ent.grad_logits.add_scaled(&div.grad_logits, 1.0)?;
    Ok(LossValue {
        value: ent.value + div.value,
        grad_logits: ent.grad_logits,
    })
}

/// `η·a + (1 − η)·b`.
pub fn mixup_pair(a: &[f64], b: &[f64], eta: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| eta * x + (1.0 - eta) * y)
        .collect()
}

pub fn mix_rows(a: &Matrix, b: &Matrix, eta: f64) -> Result<Matrix> {
    a.ensure_same_shape("mix_rows", b)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Validation(format!(
            "mixing coefficient must be in [0, 1], got {eta}"
        )));
    }
    let data = mixup_pair(a.data(), b.data(), eta);
    Matrix::from_vec(a.rows(), a.cols(), data)
}

/// Runs `loss` on the model's predictions for `x` and backpropagates it.
pub fn model_loss<F>(model: &Mlp, x: &Matrix, loss: F) -> Result<ParamLoss>
where
    F: FnOnce(&Matrix) -> Result<LossValue>,
{
    let fwd = model.forward(x)?;
    let lv = loss(&fwd.probs)?;
    let grads = model.backward(&fwd, &lv.grad_logits)?;
    Ok(ParamLoss {
        value: lv.value,
        grads,
    })
}

/// Detached targets `Mix_η(f(x_i), f(x_j))` for interpolation consistency.
pub fn mixup_targets(model: &Mlp, x_i: &Matrix, x_j: &Matrix, eta: f64) -> Result<Matrix> {
    x_i.ensure_same_shape("mixup_targets", x_j)?;
    mix_rows(&model.predict(x_i)?, &model.predict(x_j)?, eta)
}

/// `KL(targets ‖ f(x_mixed))` with the targets held fixed.
pub fn mixup_loss_with_targets(
    model: &Mlp,
    x_mixed: &Matrix,
    targets: &Matrix,
) -> Result<ParamLoss> {
    model_loss(model, x_mixed, |probs| kl_divergence(targets, probs))
}

/// Interpolation-consistency loss for one mixing coefficient. Gradient flows
/// only through the prediction on the mixed inputs.
pub fn mixup_consistency_loss(
    model: &Mlp,
    x_i: &Matrix,
    x_j: &Matrix,
    eta: f64,
) -> Result<ParamLoss> {
    let targets = mixup_targets(model, x_i, x_j, eta)?;
    let x_mixed = mix_rows(x_i, x_j, eta)?;
    mixup_loss_with_targets(model, &x_mixed, &targets)
}

/// One mixing coefficient and a partner permutation for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupPlan {
    pub eta: f64,
    pub partners: Vec<usize>,
}

impl MixupPlan {
    /// `η ~ Beta(ω, ω)`, partners a uniform shuffle of the batch.
    pub fn sample<R: Rng + ?Sized>(batch_len: usize, omega: f64, rng: &mut R) -> Result<Self> {
        let beta = Beta::new(omega, omega)
            .map_err(|e| Error::Config(format!("mixup omega {omega}: {e}")))?;
        let eta = beta.sample(rng).clamp(0.0, 1.0);
        let mut partners: Vec<usize> = (0..batch_len).collect();
        partners.shuffle(rng);
        Ok(Self { eta, partners })
    }
}

/// Term weights of the full objective. Ablations switch terms off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub kd: f64,
    pub im: f64,
    pub mix: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kd: 1.0,
            im: 1.0,
            mix: 1.0,
        }
    }
}

impl LossWeights {
    pub const KD_ONLY: Self = Self {
        kd: 1.0,
        im: 0.0,
        mix: 0.0,
    };
    pub const KD_IM: Self = Self {
        kd: 1.0,
        im: 1.0,
        mix: 0.0,
    };
    pub const KD_MIX: Self = Self {
        kd: 1.0,
        im: 0.0,
        mix: 1.0,
    };
    pub const FULL: Self = Self {
        kd: 1.0,
        im: 1.0,
        mix: 1.0,
    };
    pub const IM_ONLY: Self = Self {
        kd: 0.0,
        im: 1.0,
        mix: 0.0,
    };
}

/// Value of each term (unweighted) and the weighted total with its gradient.
/// Disabled terms are not evaluated and report 0.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub kd: f64,
    pub im: f64,
    pub mix: f64,
    pub value: f64,
    pub grads: Gradients,
}

/// `w_kd·L_kd + w_im·L_im + w_mix·L_mix` on one batch.
///
/// The mixup partners come from `plan`; it is required whenever the mixup
/// term is enabled. Mixup targets reuse the batch predictions, detached.
pub fn total_loss(
    model: &Mlp,
    x: &Matrix,
    teacher: Option<&Matrix>,
    weights: LossWeights,
    plan: Option<&MixupPlan>,
) -> Result<TotalLoss> {
    let fwd = model.forward(x)?;
    let mut grad_logits = Matrix::zeros(x.rows(), model.num_classes());
    let (mut kd, mut im, mut mix) = (0.0, 0.0, 0.0);

    if weights.kd != 0.0 {
        let teacher = teacher.ok_or_else(|| {
            Error::Validation("distillation term enabled without teacher probabilities".into())
        })?;
        let lv = kl_divergence(teacher, &fwd.probs)?;
        kd = lv.value;
        grad_logits.add_scaled(&lv.grad_logits, weights.kd)?;
    }
    if weights.im != 0.0 {
        let lv = im_loss(&fwd.probs)?;
        im = lv.value;
        grad_logits.add_scaled(&lv.grad_logits, weights.im)?;
    }
    let mut grads = model.backward(&fwd, &grad_logits)?;

    if weights.mix != 0.0 {
        let plan = plan
            .ok_or_else(|| Error::Validation("mixup term enabled without a mixing plan".into()))?;
        if plan.partners.len() != x.rows() {
            return Err(Error::shape("total_loss", x.rows(), plan.partners.len()));
        }
        let targets = mix_rows(&fwd.probs, &fwd.probs.select_rows(&plan.partners), plan.eta)?;
        let x_mixed = mix_rows(x, &x.select_rows(&plan.partners), plan.eta)?;
        let mut part = mixup_loss_with_targets(model, &x_mixed, &targets)?;
        mix = part.value;
        if weights.mix != 1.0 {
            for (w, b) in part.grads.layers.iter_mut() {
                w.scale(weights.mix);
                b.iter_mut().for_each(|v| *v *= weights.mix);
            }
        }
        grads.add_assign(&part.grads)?;
    }

    Ok(TotalLoss {
        kd,
        im,
        mix,
        value: weights.kd * kd + weights.im * im + weights.mix * mix,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn smoothing_examples() {
        let q = smooth_labels(&m(&[&[1.0, 0.0]]), 0.1).unwrap();
        assert!((q.get(0, 0) - 0.95).abs() < 1e-12 && (q.get(0, 1) - 0.05).abs() < 1e-12);

        let y = m(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(smooth_labels(&y, 0.0).unwrap(), y);

        let q = smooth_labels(&y, 0.1).unwrap();
        let expected = [0.1 / 3.0, 0.1 / 3.0 + 0.9, 0.1 / 3.0];
        for (a, b) in q.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((q.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smoothing_rejects_soft_rows_and_bad_gamma() {
        assert!(smooth_labels(&m(&[&[0.5, 0.5]]), 0.1).is_err());
        assert!(smooth_labels(&m(&[&[1.0, 1.0]]), 0.1).is_err());
        assert!(smooth_labels(&m(&[&[1.0, 0.0]]), 1.0).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let q = m(&[&[0.95, 0.05]]);
        let ce = cross_entropy_smoothed(&q, &q).unwrap();
        let h = -(0.95f64 * 0.95f64.ln() + 0.05 * 0.05f64.ln());
        assert!((ce.value - h).abs() < 1e-12);

        let uniform = m(&[&[0.5, 0.5]]);
        assert!((cross_entropy_smoothed(&uniform, &q).unwrap().value - LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let p = m(&[&[0.2, 0.3, 0.5]]);
        let kl = kl_divergence(&p, &p).unwrap();
        assert_eq!(kl.value, 0.0);
        let kl = kl_divergence(&m(&[&[1.0, 0.0]]), &m(&[&[0.5, 0.5]])).unwrap();
        assert!((kl.value - LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_clamps_zero_student() {
        let kl = kl_divergence(&m(&[&[0.5, 0.5]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert!(kl.value.is_finite() && kl.value > 10.0);
    }

    #[test]
    fn entropy_examples() {
        let onehot = m(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(entropy_loss(&onehot).unwrap().value, 0.0);
        let uniform = m(&[&[1.0 / 3.0; 3]]);
        assert!((entropy_loss(&uniform).unwrap().value - 3f64.ln()).abs() < 1e-12);
        let mixed = m(&[&[0.0, 1.0, 0.0], &[1.0 / 3.0; 3]]);
        assert!((entropy_loss(&mixed).unwrap().value - 3f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_examples() {
        let same = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(diversity_loss(&same).unwrap().value, 0.0);
        let balanced = m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        assert!((diversity_loss(&balanced).unwrap().value + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn im_examples() {
        let same = m(&[&[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(im_loss(&same).unwrap().value, 0.0);
        let balanced = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((im_loss(&balanced).unwrap().value + LN_2).abs() < 1e-12);
    }

    #[test]
    fn mixup_pair_examples() {
        assert_eq!(mixup_pair(&[1.0, 2.0], &[3.0, 4.0], 1.0), vec![1.0, 2.0]);
        assert_eq!(mixup_pair(&[1.0, 2.0], &[3.0, 4.0], 0.0), vec![3.0, 4.0]);
        assert_eq!(mixup_pair(&[2.0, 0.0], &[0.0, 2.0], 0.5), vec![1.0, 1.0]);
    }

    #[test]
    fn mixup_consistency_vanishes_on_identical_inputs_or_eta_one() {
        let model = Mlp::new(&[3, 6, 4, 3], 4).unwrap();
        let xi = m(&[&[0.1, 0.2, 0.3], &[1.0, -1.0, 0.5]]);
        let xj = m(&[&[-0.4, 0.9, 0.0], &[0.3, 0.3, 0.3]]);
        for eta in [0.0, 0.3, 0.77, 1.0] {
            assert!(
                mixup_consistency_loss(&model, &xi, &xi, eta)
                    .unwrap()
                    .value
                    .abs()
                    < 1e-15
            );
        }
        assert!(
            mixup_consistency_loss(&model, &xi, &xj, 1.0)
                .unwrap()
                .value
                .abs()
                < 1e-15
        );
        assert!(mixup_consistency_loss(&model, &xi, &xj, 0.3).unwrap().value > 0.0);
    }

    #[test]
    fn mixup_plan_is_a_permutation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let plan = MixupPlan::sample(10, 0.3, &mut rng).unwrap();
        let mut sorted = plan.partners.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert!((0.0..=1.0).contains(&plan.eta));
        assert!(MixupPlan::sample(3, 0.0, &mut rng).is_err());
    }

    #[test]
    fn total_loss_vanishes_on_degenerate_batch() {
        // zero-weight model: uniform predictions over two classes.
        let model = Mlp::zeros(&[2, 2]).unwrap();
        let x = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let teacher = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let plan = MixupPlan {
            eta: 0.4,
            partners: vec![1, 0],
        };
        let total = total_loss(&model, &x, Some(&teacher), LossWeights::FULL, Some(&plan)).unwrap();
        assert_eq!(total.kd, 0.0);
        assert_eq!(total.mix, 0.0);
        // uniform rows: entropy ln 2, diversity −ln 2
        assert!(total.im.abs() < 1e-15);
        assert!(total.value.abs() < 1e-15);
    }

    #[test]
    fn total_loss_requires_inputs_for_enabled_terms() {
        let model = Mlp::new(&[2, 3], 0).unwrap();
        let x = m(&[&[1.0, 0.0]]);
        assert!(total_loss(&model, &x, None, LossWeights::KD_ONLY, None).is_err());
        assert!(total_loss(&model, &x, None, LossWeights::IM_ONLY, None).is_ok());
        let t = m(&[&[0.2, 0.3, 0.5]]);
        assert!(total_loss(&model, &x, Some(&t), LossWeights::KD_MIX, None).is_err());
    }

    #[test]
    fn losses_reject_shape_mismatch() {
        let a = m(&[&[0.5, 0.5]]);
        let b = m(&[&[0.2, 0.3, 0.5]]);
        assert!(kl_divergence(&a, &b).is_err());
        assert!(cross_entropy_smoothed(&a, &b).is_err());
    }
}
