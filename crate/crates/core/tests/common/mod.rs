//! Shared test support: finite differences and brute-force selector oracles.
//!
//! The oracles are written from the definitions, without reusing the
//! library's helpers (no shared norm, argmax or centroid code).

#![allow(dead_code)]

use ipl::losses::{
    cross_entropy_smoothed, diversity_loss, entropy_loss, im_loss, kl_divergence, mix_rows,
    mixup_loss_with_targets, mixup_targets, model_loss, one_hot, smooth_labels, total_loss,
    LossValue, LossWeights,
};
use ipl::nn::Mlp;
use ipl::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - m).exp() / z;
        }
    }
    out
}

pub fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    softmax(&random_matrix(rng, rows, cols, 2.0))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn fd_matrix(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Vec<f64> {
    let mut x = x.clone();
    let mut out = Vec::with_capacity(x.data().len());
    for i in 0..x.data().len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let up = f(&x);
        x.data_mut()[i] = orig - FD_STEP;
        let down = f(&x);
        x.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * FD_STEP));
    }
    out
}

/// Central differences of `f` with respect to every model parameter, in
/// `parameter_slices` order.
pub fn fd_params(model: &Mlp, f: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    let mut m = model.clone();
    let sizes: Vec<usize> = m.parameter_slices().iter().map(|s| s.len()).collect();
    let mut out = Vec::new();
    for (s, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = m.parameter_slices()[s][j];
            m.parameter_slices_mut()[s][j] = orig + FD_STEP;
            let up = f(&m);
            m.parameter_slices_mut()[s][j] = orig - FD_STEP;
            let down = f(&m);
            m.parameter_slices_mut()[s][j] = orig;
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

fn logit_check(logits: &Matrix, loss: impl Fn(&Matrix) -> LossValue) -> f64 {
    let analytic = loss(&softmax(logits)).grad_logits;
    let numeric = fd_matrix(logits, |z| loss(&softmax(z)).value);
    rel_error(analytic.data(), &numeric)
}

/// One finite-difference check: loss name and relative error.
pub struct GradCheck {
    pub name: String,
    pub rel_error: f64,
}

/// Gradient checks over random instances of every loss. Returns one entry
/// per (loss, instance).
pub fn gradient_checks(instances: usize, seed: u64) -> Vec<GradCheck> {
    let mut rng = rng(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, i: usize, e: f64| {
        out.push(GradCheck {
            name: format!("{name}#{i}"),
            rel_error: e,
        })
    };
    for i in 0..instances {
        let n = rng.random_range(2..7);
        let k = rng.random_range(2..6);
        let logits = random_matrix(&mut rng, n, k, 2.0);

        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let q = smooth_labels(&one_hot(&labels, k).unwrap(), 0.1).unwrap();
        push(
            "cross_entropy",
            i,
            logit_check(&logits, |p| cross_entropy_smoothed(p, &q).unwrap()),
        );

        let teacher = random_probs(&mut rng, n, k);
        push(
            "kl",
            i,
            logit_check(&logits, |p| kl_divergence(&teacher, p).unwrap()),
        );
        push(
            "entropy",
            i,
            logit_check(&logits, |p| entropy_loss(p).unwrap()),
        );
        push(
            "diversity",
            i,
            logit_check(&logits, |p| diversity_loss(p).unwrap()),
        );
        push("im", i, logit_check(&logits, |p| im_loss(p).unwrap()));

        // Parameter-space checks through the network.
        let d = rng.random_range(2..5);
        let dims = [d, 4, 3, k];
        let model = Mlp::new(&dims, rng.random()).unwrap();
        let x = random_matrix(&mut rng, n, d, 1.5);

        let analytic = model_loss(&model, &x, |p| cross_entropy_smoothed(p, &q)).unwrap();
        let numeric = fd_params(&model, |m| {
            model_loss(m, &x, |p| cross_entropy_smoothed(p, &q))
                .unwrap()
                .value
        });
        push(
            "network_cross_entropy",
            i,
            rel_error(&analytic.grads.flatten(), &numeric),
        );

        // Mixup with the interpolated targets held fixed.
        let x_j = random_matrix(&mut rng, n, d, 1.5);
        let eta = rng.random_range(0.05..0.95);
        let targets = mixup_targets(&model, &x, &x_j, eta).unwrap();
        let x_mixed = mix_rows(&x, &x_j, eta).unwrap();
        let analytic = mixup_loss_with_targets(&model, &x_mixed, &targets).unwrap();
        let numeric = fd_params(&model, |m| {
            mixup_loss_with_targets(m, &x_mixed, &targets)
                .unwrap()
                .value
        });
        push("mixup", i, rel_error(&analytic.grads.flatten(), &numeric));

        // Weighted distillation + IM objective as used in training.
        let w = LossWeights {
            kd: 0.7,
            im: 1.3,
            mix: 0.0,
        };
        let analytic = total_loss(&model, &x, Some(&teacher), w, None).unwrap();
        let numeric = fd_params(&model, |m| {
            total_loss(m, &x, Some(&teacher), w, None).unwrap().value
        });
        push(
            "kd_im_objective",
            i,
            rel_error(&analytic.grads.flatten(), &numeric),
        );
    }
    out
}

// ---- selector oracles ----

fn o_norm(a: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in a {
        s += v * v;
    }
    s.sqrt()
}

fn o_cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (o_norm(a), o_norm(b));
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let mut d = 0.0;
    for i in 0..a.len() {
        d += a[i] * b[i];
    }
    1.0 - d / (na * nb)
}

fn o_nearest(g: &[f64], centers: &[Option<Vec<f64>>]) -> (usize, Vec<f64>) {
    let dists: Vec<f64> = centers
        .iter()
        .map(|c| c.as_ref().map_or(f64::INFINITY, |c| o_cos_dist(g, c)))
        .collect();
    let mut best = None;
    for (c, &d) in dists.iter().enumerate() {
        if centers[c].is_none() {
            continue;
        }
        match best {
            None => best = Some(c),
            Some(b) if d < dists[b] => best = Some(c),
            _ => {}
        }
    }
    (best.expect("at least one centroid"), dists)
}

pub struct OraclePrototypes {
    /// Weighted centroids; `None` for classes with no weight.
    pub initial: Vec<Option<Vec<f64>>>,
    pub labels_initial: Vec<usize>,
    pub distances_initial: Vec<Vec<f64>>,
    pub refined: Vec<Option<Vec<f64>>>,
    pub labels: Vec<usize>,
    pub distances: Vec<Vec<f64>>,
    pub margins: Vec<f64>,
}

pub fn oracle_margin(dists: &[f64]) -> f64 {
    let mut finite: Vec<f64> = dists.iter().copied().filter(|d| d.is_finite()).collect();
    finite.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = (finite[0], finite[1]);
    if lo <= 0.0 {
        if hi <= 0.0 {
            0.0
        } else {
            1e12
        }
    } else {
        (hi - lo) / lo
    }
}

pub fn oracle_prototypes(features: &Matrix, probs: &Matrix) -> OraclePrototypes {
    let (n, k, d) = (features.rows(), probs.cols(), features.cols());
    let mut initial: Vec<Option<Vec<f64>>> = Vec::new();
    for c in 0..k {
        let w: f64 = (0..n).map(|i| probs.get(i, c)).sum();
        if w < 1e-9 {
            initial.push(None);
            continue;
        }
        let center = (0..d)
            .map(|j| {
                (0..n)
                    .map(|i| probs.get(i, c) * features.get(i, j))
                    .sum::<f64>()
                    / w
            })
            .collect();
        initial.push(Some(center));
    }
    let (labels_initial, distances_initial): (Vec<usize>, Vec<Vec<f64>>) =
        (0..n).map(|i| o_nearest(features.row(i), &initial)).unzip();

    let mut refined = initial.clone();
    for (c, slot) in refined.iter_mut().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| labels_initial[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        *slot = Some(
            (0..d)
                .map(|j| members.iter().map(|&i| features.get(i, j)).sum::<f64>() / m)
                .collect(),
        );
    }
    let (labels, distances): (Vec<usize>, Vec<Vec<f64>>) =
        (0..n).map(|i| o_nearest(features.row(i), &refined)).unzip();
    let margins = distances.iter().map(|d| oracle_margin(d)).collect();
    OraclePrototypes {
        initial,
        labels_initial,
        distances_initial,
        refined,
        labels,
        distances,
        margins,
    }
}

fn close(a: f64, b: f64) -> bool {
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= 1e-10 * b.abs().max(1.0)
}

/// Compares library centroids against the oracle's; returns a description
/// of the first mismatch.
pub fn compare_centroids(
    got: &ipl::selector::Centroids,
    want: &[Option<Vec<f64>>],
) -> Result<(), String> {
    for (c, w) in want.iter().enumerate() {
        match w {
            None if !got.empty[c] => return Err(format!("class {c} should be empty")),
            None => {}
            Some(_) if got.empty[c] => return Err(format!("class {c} should not be empty")),
            Some(w) => {
                for (a, b) in got.centers.row(c).iter().zip(w) {
                    if !close(*a, *b) {
                        return Err(format!("centroid {c}: {a} vs {b}"));
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn compare_reals(what: &str, got: &[f64], want: &[f64]) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{what}: length {} vs {}", got.len(), want.len()));
    }
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        if !close(*a, *b) {
            return Err(format!("{what}[{i}]: {a} vs {b}"));
        }
    }
    Ok(())
}

/// Brute-force `ts`: for each sample, count same-class samples (itself
/// included) with cosine similarity above `delta`.
pub fn oracle_similarity(features: &Matrix, labels: &[usize], delta: f64) -> Vec<f64> {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let same: Vec<usize> = (0..n).filter(|&j| labels[j] == labels[i]).collect();
            let hits = same
                .iter()
                .filter(|&&j| {
                    let (a, b) = (features.row(i), features.row(j));
                    let (na, nb) = (o_norm(a), o_norm(b));
                    if na == 0.0 || nb == 0.0 {
                        return false;
                    }
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    dot / (na * nb) > delta
                })
                .count();
            hits as f64 / same.len() as f64
        })
        .collect()
}

pub struct GateInputs {
    pub label: usize,
    pub confidence: f64,
    pub prototype: usize,
    pub margin: f64,
    pub similarity: f64,
}

pub fn oracle_warmup(x: &GateInputs, alpha: f64, beta: f64, theta: f64) -> bool {
    let by_prototype = x.prototype == x.label && x.margin > beta;
    let by_confidence = x.confidence > alpha;
    (by_prototype || by_confidence) && x.similarity > theta
}

pub fn oracle_incremental(x: &GateInputs, beta: f64, theta: f64, round: usize) -> bool {
    let mut theta_r = theta + 0.05 * (round as f64 - 1.0);
    if theta_r > 0.9 {
        theta_r = 0.9;
    }
    if theta_r < theta {
        theta_r = theta;
    }
    x.prototype == x.label && x.margin > beta && x.similarity > theta_r
}

/// Random selector instance: clustered features so that prototypes are
/// meaningful, with probabilities loosely tied to the clusters.
pub struct SelectorInstance {
    pub features: Matrix,
    pub probs: Matrix,
}

pub fn selector_instance(rng: &mut ChaCha8Rng) -> SelectorInstance {
    let n = rng.random_range(10..=200);
    let k = rng.random_range(2..=8);
    let d = rng.random_range(2..=12);
    let centers = random_matrix(rng, k, d, 3.0);
    let mut features = Matrix::zeros(n, d);
    let mut logits = Matrix::zeros(n, k);
    for i in 0..n {
        let c = rng.random_range(0..k);
        for j in 0..d {
            features.set(i, j, centers.get(c, j) + rng.random_range(-1.0..1.0));
        }
        for j in 0..k {
            let bump = if j == c { 2.0 } else { 0.0 };
            logits.set(i, j, bump + rng.random_range(-1.5..1.5));
        }
    }
    SelectorInstance {
        features,
        probs: softmax(&logits),
    }
}

/// Checks every selector stage of one random instance against the oracles:
/// centroids, assignment, refinement, margins, similarity and both gate masks.
pub fn check_selector_instance(rng: &mut ChaCha8Rng) -> Result<(), String> {
    use ipl::selector::*;

    let inst = selector_instance(rng);
    let (features, probs) = (&inst.features, &inst.probs);
    let want = oracle_prototypes(features, probs);

    let initial = weighted_centroids(features, probs).map_err(|e| e.to_string())?;
    compare_centroids(&initial, &want.initial).map_err(|e| format!("weighted_centroids: {e}"))?;

    let first = assign_nearest(features, &initial).map_err(|e| e.to_string())?;
    if first.labels != want.labels_initial {
        return Err("assign_nearest: labels differ".into());
    }
    for (i, row) in want.distances_initial.iter().enumerate() {
        compare_reals("assign_nearest distances", first.distances.row(i), row)?;
    }

    let (refined, second) =
        refine_prototypes(features, &first.labels, &initial).map_err(|e| e.to_string())?;
    compare_centroids(&refined, &want.refined).map_err(|e| format!("refine_prototypes: {e}"))?;
    if second.labels != want.labels {
        return Err("refine_prototypes: labels differ".into());
    }
    let margins: Vec<f64> = want
        .distances
        .iter()
        .map(|d| distance_margin(d))
        .collect::<ipl::Result<_>>()
        .map_err(|e| e.to_string())?;
    compare_reals("distance_margin", &margins, &want.margins)?;

    let set = prototype_labels(features, probs).map_err(|e| e.to_string())?;
    if set.labels != want.labels {
        return Err("prototype_labels: labels differ".into());
    }
    compare_reals("prototype margins", &set.margins, &want.margins)?;

    let labels = probs.argmax_rows();
    let delta = rng.random_range(-0.5..0.95);
    let sim = intra_class_similarity(features, &labels, probs.cols(), delta)
        .map_err(|e| e.to_string())?;
    let want_sim = oracle_similarity(features, &labels, delta);
    compare_reals("intra_class_similarity", &sim.scores, &want_sim)?;

    let th = GateThresholds {
        alpha: rng.random_range(0.3..0.95),
        beta: rng.random_range(0.0..0.5),
        theta: rng.random_range(0.0..0.7),
        theta_step: 0.05,
        theta_cap: 0.9,
    };
    let round = rng.random_range(1..12);
    for i in 0..labels.len() {
        let confidence = probs.row(i).iter().cloned().fold(0.0, f64::max);
        let ev = Evidence {
            label: labels[i],
            confidence,
            prototype: want.labels[i],
            margin: want.margins[i],
            similarity: want_sim[i],
        };
        let x = GateInputs {
            label: labels[i],
            confidence,
            prototype: want.labels[i],
            margin: want.margins[i],
            similarity: want_sim[i],
        };
        if warmup_gate(&ev, &th).is_promote() != oracle_warmup(&x, th.alpha, th.beta, th.theta) {
            return Err(format!("warm-up gate differs at sample {i}"));
        }
        if incremental_gate(&ev, &th, round).is_promote()
            != oracle_incremental(&x, th.beta, th.theta, round)
        {
            return Err(format!("incremental gate differs at sample {i}"));
        }
    }
    Ok(())
}
