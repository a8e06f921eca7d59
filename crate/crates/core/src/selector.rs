//! High-confidence sample selection.
//!
//! Three signals decide whether a pseudo-label is trusted:
//!
//! - the maximum softmax probability of the source prediction,
//! - agreement with a *prototype label*: the nearest class centroid under
//!   cosine distance, after one refinement round, and only when the nearest
//!   centroid is clearly closer than the runner-up (relative margin `d_t`),
//! - the intra-class similarity score `ts`: the fraction of the sample's
//!   pseudo-class whose cosine similarity to it exceeds `δ`.
//!
//! Ties are broken toward the lowest class index everywhere.

use log::warn;

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

/// Classes whose total soft weight falls below this have no centroid.
pub const MIN_CLASS_WEIGHT: f64 = 1e-9;

/// Margin reported when a feature sits exactly on its nearest centroid.
pub const MARGIN_SENTINEL: f64 = 1e12;

/// Class centroids; empty classes keep a row but are excluded from assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub centers: Matrix,
    pub empty: Vec<bool>,
}

impl Centroids {
    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    pub fn active(&self) -> usize {
        self.empty.iter().filter(|e| !**e).count()
    }
}

/// Soft-weighted class centroids `c_k = Σ_i p_ik g_i / Σ_i p_ik`.
pub fn weighted_centroids(features: &Matrix, probs: &Matrix) -> Result<Centroids> {
    if features.rows() != probs.rows() {
        return Err(Error::shape(
            "weighted_centroids",
            features.rows(),
            probs.rows(),
        ));
    }
    let (k, d) = (probs.cols(), features.cols());
    let mut centers = Matrix::zeros(k, d);
    let mut weight = vec![0.0; k];
    for (g, p) in features.iter_rows().zip(probs.iter_rows()) {
        for (c, &pc) in p.iter().enumerate() {
            if pc == 0.0 {
                continue;
            }
            weight[c] += pc;
            for (dst, gv) in centers.row_mut(c).iter_mut().zip(g) {
                *dst += pc * gv;
            }
        }
    }
    let mut empty = vec![false; k];
    for c in 0..k {
        if weight[c] < MIN_CLASS_WEIGHT {
            empty[c] = true;
            centers.row_mut(c).fill(0.0);
        } else {
            centers.row_mut(c).iter_mut().for_each(|v| *v /= weight[c]);
        }
    }
    Ok(Centroids { centers, empty })
}

/// `1 − cos(a, b)`; defined as 1 when either vector has zero norm.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / denom
}

/// Nearest-centroid labels with the full distance table (`n × K`). Empty
/// centroids get an infinite distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub distances: Matrix,
}

pub fn assign_nearest(features: &Matrix, centroids: &Centroids) -> Result<Assignment> {
    if features.cols() != centroids.centers.cols() {
        return Err(Error::shape(
            "assign_nearest",
            centroids.centers.cols(),
            features.cols(),
        ));
    }
    if centroids.active() == 0 {
        return Err(Error::Validation(
            "assign_nearest: every centroid is empty".into(),
        ));
    }
    let k = centroids.num_classes();
    let center_norms: Vec<f64> = centroids.centers.iter_rows().map(norm).collect();
    if let Some(c) = (0..k).find(|&c| !centroids.empty[c] && center_norms[c] == 0.0) {
        warn!("centroid {c} has zero norm; its cosine distances are set to 1");
    }
    let mut zero_features = 0usize;
    let mut distances = Matrix::zeros(features.rows(), k);
    let mut labels = Vec::with_capacity(features.rows());
    for (i, g) in features.iter_rows().enumerate() {
        let g_norm = norm(g);
        if g_norm == 0.0 {
            zero_features += 1;
        }
        let row = distances.row_mut(i);
        let mut best = usize::MAX;
        for c in 0..k {
            row[c] = if centroids.empty[c] {
                f64::INFINITY
            } else if g_norm == 0.0 || center_norms[c] == 0.0 {
                1.0
            } else {
                1.0 - dot(g, centroids.centers.row(c)) / (g_norm * center_norms[c])
            };
            if !centroids.empty[c] && (best == usize::MAX || row[c] < row[best]) {
                best = c;
            }
        }
        labels.push(best);
    }
    if zero_features > 0 {
        warn!("{zero_features} zero-norm feature rows; their cosine distances are set to 1");
    }
    Ok(Assignment { labels, distances })
}

/// Plain class means of features under hard labels. A class with no members
/// keeps its centroid from `previous`.
pub fn class_means(features: &Matrix, labels: &[usize], previous: &Centroids) -> Result<Centroids> {
    let k = previous.num_classes();
    if labels.len() != features.rows() {
        return Err(Error::shape("class_means", features.rows(), labels.len()));
    }
    let mut centers = Matrix::zeros(k, features.cols());
    let mut counts = vec![0usize; k];
    for (g, &y) in features.iter_rows().zip(labels) {
        if y >= k {
            return Err(Error::Validation(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        counts[y] += 1;
        for (dst, v) in centers.row_mut(y).iter_mut().zip(g) {
            *dst += v;
        }
    }
    let mut empty = vec![false; k];
    for c in 0..k {
        if counts[c] == 0 {
            centers.row_mut(c).copy_from_slice(previous.centers.row(c));
            empty[c] = previous.empty[c];
        } else {
            let n = counts[c] as f64;
            centers.row_mut(c).iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(Centroids { centers, empty })
}

/// One hard-assignment refinement round: recompute centroids as class means of
/// `labels_initial`, then reassign.
pub fn refine_prototypes(
    features: &Matrix,
    labels_initial: &[usize],
    initial: &Centroids,
) -> Result<(Centroids, Assignment)> {
    let refined = class_means(features, labels_initial, initial)?;
    let assignment = assign_nearest(features, &refined)?;
    Ok((refined, assignment))
}

/// Relative gap `(second − min) / min` between the two smallest finite
/// distances. A zero minimum gives [`MARGIN_SENTINEL`], unless the runner-up
/// is also zero (an exact tie, margin 0).
pub fn distance_margin(distances: &[f64]) -> Result<f64> {
    let (mut first, mut second) = (f64::INFINITY, f64::INFINITY);
    let mut finite = 0;
    for &d in distances.iter().filter(|d| d.is_finite()) {
        finite += 1;
        if d < first {
            second = first;
            first = d;
        } else if d < second {
            second = d;
        }
    }
    if finite < 2 {
        return Err(Error::Validation(format!(
            "distance margin needs at least two candidate centroids, got {finite}"
        )));
    }
    if first <= 0.0 {
        if second <= 0.0 {
            return Ok(0.0);
        }
        warn!("feature coincides with its centroid; margin set to sentinel");
        return Ok(MARGIN_SENTINEL);
    }
    Ok((second - first) / first)
}

/// Prototype labels and margins for every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub centroids_initial: Centroids,
    pub centroids_refined: Centroids,
    pub labels_initial: Vec<usize>,
    pub labels: Vec<usize>,
    pub margins: Vec<f64>,
}

/// Weighted centroids, nearest assignment, one refinement, margins.
pub fn prototype_labels(features: &Matrix, probs: &Matrix) -> Result<PrototypeSet> {
    let initial = weighted_centroids(features, probs)?;
    let first = assign_nearest(features, &initial)?;
    let (refined, second) = refine_prototypes(features, &first.labels, &initial)?;
    let margins = second
        .distances
        .iter_rows()
        .map(distance_margin)
        .collect::<Result<Vec<_>>>()?;
    Ok(PrototypeSet {
        centroids_initial: initial,
        centroids_refined: refined,
        labels_initial: first.labels,
        labels: second.labels,
        margins,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStats {
    /// Per sample, in `[0, 1]`.
    pub scores: Vec<f64>,
    pub class_sizes: Vec<usize>,
}

/// Fraction of each sample's pseudo-class (itself included) with cosine
/// similarity strictly above `delta`.
pub fn intra_class_similarity(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    delta: f64,
) -> Result<SimilarityStats> {
    if labels.len() != features.rows() {
        return Err(Error::shape(
            "intra_class_similarity",
            features.rows(),
            labels.len(),
        ));
    }
    if !(-1.0..=1.0).contains(&delta) {
        return Err(Error::Validation(format!(
            "similarity threshold must be in [-1, 1], got {delta}"
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Validation(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        members[y].push(i);
    }

    // Unit rows; zero-norm rows stay zero so all their similarities are 0.
    let mut unit = features.clone();
    let mut zero_rows = 0usize;
    for r in 0..unit.rows() {
        let row = unit.row_mut(r);
        let n = norm(row);
        if n == 0.0 {
            zero_rows += 1;
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    if zero_rows > 0 {
        warn!("{zero_rows} zero-norm feature rows; their similarities are set to 0");
    }

    let mut counts = vec![0usize; labels.len()];
    for class in &members {
        for (a, &i) in class.iter().enumerate() {
            let ui = unit.row(i);
            for &j in &class[a..] {
                if dot(ui, unit.row(j)) > delta {
                    counts[i] += 1;
                    if j != i {
                        counts[j] += 1;
                    }
                }
            }
        }
    }
    let class_sizes: Vec<usize> = members.iter().map(Vec::len).collect();
    let scores = labels
        .iter()
        .zip(&counts)
        .map(|(&y, &c)| c as f64 / class_sizes[y] as f64)
        .collect();
    Ok(SimilarityStats {
        scores,
        class_sizes,
    })
}

/// The thresholds the gates consult.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateThresholds {
    /// Softmax confidence threshold.
    pub alpha: f64,
    /// Prototype margin threshold.
    pub beta: f64,
    /// Similarity score threshold before tightening.
    pub theta: f64,
    /// Per-round increase of the similarity threshold.
    pub theta_step: f64,
    /// Upper bound for the tightened similarity threshold.
    pub theta_cap: f64,
}

impl GateThresholds {
    /// `θ_r = θ + step·(r − 1)`, capped; never below `θ`.
    pub fn theta_for_round(&self, round: usize) -> f64 {
        let ramp = self.theta + self.theta_step * round.saturating_sub(1) as f64;
        ramp.min(self.theta_cap).max(self.theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectReason {
    /// Prototype label disagrees with the pseudo-label (and, during warm-up,
    /// the softmax confidence is not above `α` either).
    PrototypeMismatch,
    /// Labels agree but the prototype margin is not above `β`.
    SmallMargin,
    /// Similarity score not above the (round) threshold.
    LowSimilarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Promote,
    Reject(RejectReason),
}

impl Decision {
    pub fn is_promote(self) -> bool {
        matches!(self, Decision::Promote)
    }
}

/// Per-sample evidence for a gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evidence {
    /// Current hard pseudo-label.
    pub label: usize,
    /// Highest probability of the pseudo-label row.
    pub confidence: f64,
    pub prototype: usize,
    pub margin: f64,
    pub similarity: f64,
}

fn prototype_clause(ev: &Evidence, beta: f64) -> std::result::Result<(), RejectReason> {
    if ev.prototype != ev.label {
        Err(RejectReason::PrototypeMismatch)
    } else if ev.margin <= beta {
        Err(RejectReason::SmallMargin)
    } else {
        Ok(())
    }
}

/// Warm-up: `[(prototype == label ∧ d_t > β) ∨ max p > α] ∧ ts > θ`.
pub fn warmup_gate(ev: &Evidence, th: &GateThresholds) -> Decision {
    if let Err(reason) = prototype_clause(ev, th.beta) {
        if ev.confidence <= th.alpha {
            return Decision::Reject(reason);
        }
    }
    if ev.similarity <= th.theta {
        return Decision::Reject(RejectReason::LowSimilarity);
    }
    Decision::Promote
}

/// Incremental rounds: `prototype == label ∧ d_t > β ∧ ts > θ_r`.
pub fn incremental_gate(ev: &Evidence, th: &GateThresholds, round: usize) -> Decision {
    if let Err(reason) = prototype_clause(ev, th.beta) {
        return Decision::Reject(reason);
    }
    if ev.similarity <= th.theta_for_round(round) {
        return Decision::Reject(RejectReason::LowSimilarity);
    }
    Decision::Promote
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    const TH: GateThresholds = GateThresholds {
        alpha: 0.8,
        beta: 0.3,
        theta: 0.3,
        theta_step: 0.05,
        theta_cap: 0.9,
    };

    fn ev(
        label: usize,
        confidence: f64,
        prototype: usize,
        margin: f64,
        similarity: f64,
    ) -> Evidence {
        Evidence {
            label,
            confidence,
            prototype,
            margin,
            similarity,
        }
    }

    #[test]
    fn one_hot_weights_give_class_means() {
        let g = m(&[&[1.0, 2.0], &[3.0, 4.0], &[10.0, 0.0]]);
        let p = m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let c = weighted_centroids(&g, &p).unwrap();
        assert_eq!(c.centers.row(0), &[2.0, 3.0]);
        assert_eq!(c.centers.row(1), &[10.0, 0.0]);
        assert_eq!(c.empty, vec![false, false]);
    }

    #[test]
    fn uniform_weights_give_global_mean() {
        let g = m(&[&[1.0, 2.0], &[3.0, 6.0]]);
        let p = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let c = weighted_centroids(&g, &p).unwrap();
        assert_eq!(c.centers.row(0), &[2.0, 4.0]);
        assert_eq!(c.centers.row(1), &[2.0, 4.0]);
    }

    #[test]
    fn class_without_weight_is_empty() {
        let g = m(&[&[1.0, 2.0]]);
        let p = m(&[&[1.0, 0.0]]);
        let c = weighted_centroids(&g, &p).unwrap();
        assert_eq!(c.empty, vec![false, true]);
        let a = assign_nearest(&m(&[&[-1.0, 0.0]]), &c).unwrap();
        assert_eq!(a.labels, vec![0]);
        assert!(a.distances.get(0, 1).is_infinite());
    }

    #[test]
    fn feature_on_centroid_is_distance_zero() {
        let c = Centroids {
            centers: m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            empty: vec![false, false],
        };
        let a = assign_nearest(&m(&[&[0.0, 3.0]]), &c).unwrap();
        assert_eq!(a.labels, vec![1]);
        assert_eq!(a.distances.get(0, 1), 0.0);
    }

    #[test]
    fn equidistant_feature_goes_to_lower_index() {
        let c = Centroids {
            centers: m(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]),
            empty: vec![false; 3],
        };
        let a = assign_nearest(&m(&[&[1.0, 1.0]]), &c).unwrap();
        assert_eq!(a.labels, vec![0]);
    }

    #[test]
    fn zero_norm_distance_is_one() {
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
        let c = Centroids {
            centers: m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            empty: vec![false; 2],
        };
        let a = assign_nearest(&m(&[&[0.0, 0.0]]), &c).unwrap();
        assert_eq!(a.distances.row(0), &[1.0, 1.0]);
        assert_eq!(a.labels, vec![0]);
    }

    #[test]
    fn refinement_keeps_fixed_point() {
        let g = m(&[&[1.0, 0.1], &[1.0, -0.1], &[0.1, 1.0], &[-0.1, 1.0]]);
        let p = m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let c0 = weighted_centroids(&g, &p).unwrap();
        let a0 = assign_nearest(&g, &c0).unwrap();
        let (_, a1) = refine_prototypes(&g, &a0.labels, &c0).unwrap();
        assert_eq!(a1.labels, vec![0, 0, 1, 1]);
        assert_eq!(a0.labels, a1.labels);
    }

    #[test]
    fn refinement_keeps_previous_centroid_for_vacated_class() {
        let g = m(&[&[1.0, 0.0], &[0.9, 0.1]]);
        let c0 = Centroids {
            centers: m(&[&[1.0, 0.0], &[0.0, 1.0]]),
            empty: vec![false; 2],
        };
        let (c1, _) = refine_prototypes(&g, &[0, 0], &c0).unwrap();
        assert_eq!(c1.centers.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn separable_blobs_recover_ground_truth() {
        // Two directions; soft labels are deliberately poor.
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let mut truth = Vec::new();
        for i in 0..20 {
            let t = i as f64 * 0.01;
            let (row, y) = if i % 2 == 0 {
                (vec![1.0, t], 0)
            } else {
                (vec![t, 1.0], 1)
            };
            rows.push(row);
            probs.push(if y == 0 {
                vec![0.6, 0.4]
            } else {
                vec![0.45, 0.55]
            });
            truth.push(y);
        }
        let set = prototype_labels(
            &Matrix::from_rows(&rows).unwrap(),
            &Matrix::from_rows(&probs).unwrap(),
        )
        .unwrap();
        assert_eq!(set.labels, truth);
        assert!(set.margins.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn margin_examples() {
        assert!((distance_margin(&[0.2, 0.4, 0.9]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(distance_margin(&[0.3, 0.3]).unwrap(), 0.0);
        assert!((distance_margin(&[0.1, 0.5]).unwrap() - 4.0).abs() < 1e-12);
        assert!((distance_margin(&[0.9, 0.4, 0.2]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(distance_margin(&[0.0, 0.5]).unwrap(), MARGIN_SENTINEL);
        assert_eq!(distance_margin(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(distance_margin(&[0.5]).is_err());
        assert!(distance_margin(&[0.5, f64::INFINITY]).is_err());
    }

    #[test]
    fn similarity_examples() {
        let same = m(&[&[1.0, 2.0], &[2.0, 4.0], &[0.5, 1.0]]);
        let s = intra_class_similarity(&same, &[0, 0, 0], 1, 0.99).unwrap();
        assert_eq!(s.scores, vec![1.0; 3]);

        let singleton = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = intra_class_similarity(&singleton, &[0, 1], 2, 0.6).unwrap();
        assert_eq!(s.scores, vec![1.0, 1.0]);
        assert_eq!(s.class_sizes, vec![1, 1]);

        let ortho = m(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let s = intra_class_similarity(&ortho, &[0, 0, 0], 1, 0.6).unwrap();
        let expected = [2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
        for (a, b) in s.scores.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_validates_inputs() {
        let f = m(&[&[1.0, 0.0]]);
        assert!(intra_class_similarity(&f, &[0], 1, 1.5).is_err());
        assert!(intra_class_similarity(&f, &[1], 1, 0.5).is_err());
        assert!(intra_class_similarity(&f, &[0, 0], 1, 0.5).is_err());
    }

    #[test]
    fn zero_norm_feature_has_no_similar_peers() {
        let f = m(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let s = intra_class_similarity(&f, &[0, 0], 1, 0.6).unwrap();
        assert_eq!(s.scores, vec![0.0, 0.5]);
    }

    #[test]
    fn warmup_gate_examples() {
        // confident softmax with similar peers
        assert_eq!(
            warmup_gate(&ev(0, 0.95, 1, 0.0, 0.5), &TH),
            Decision::Promote
        );
        // prototype mismatch and low confidence
        assert_eq!(
            warmup_gate(&ev(0, 0.5, 1, 5.0, 1.0), &TH),
            Decision::Reject(RejectReason::PrototypeMismatch)
        );
        // prototype clause holds but similarity fails
        assert_eq!(
            warmup_gate(&ev(2, 0.5, 2, 0.4, 0.2), &TH),
            Decision::Reject(RejectReason::LowSimilarity)
        );
        // prototype agrees with margin below β, low confidence
        assert_eq!(
            warmup_gate(&ev(2, 0.5, 2, 0.3, 0.9), &TH),
            Decision::Reject(RejectReason::SmallMargin)
        );
        assert_eq!(
            warmup_gate(&ev(2, 0.5, 2, 0.31, 0.9), &TH),
            Decision::Promote
        );
    }

    #[test]
    fn incremental_gate_examples() {
        assert_eq!(
            incremental_gate(&ev(1, 0.2, 1, 2.0, 0.9), &TH, 2),
            Decision::Promote
        );
        assert_eq!(
            incremental_gate(&ev(1, 0.99, 1, 2.0, 0.3), &TH, 1),
            Decision::Reject(RejectReason::LowSimilarity)
        );
        assert_eq!(
            incremental_gate(&ev(1, 0.99, 0, 2.0, 1.0), &TH, 2),
            Decision::Reject(RejectReason::PrototypeMismatch)
        );
        // θ_3 = 0.4
        assert_eq!(
            incremental_gate(&ev(1, 0.2, 1, 2.0, 0.4), &TH, 3),
            Decision::Reject(RejectReason::LowSimilarity)
        );
        assert_eq!(
            incremental_gate(&ev(1, 0.2, 1, 2.0, 0.41), &TH, 3),
            Decision::Promote
        );
    }

    #[test]
    fn theta_schedule_ramps_and_caps() {
        assert_eq!(TH.theta_for_round(1), 0.3);
        assert!((TH.theta_for_round(2) - 0.35).abs() < 1e-12);
        assert_eq!(TH.theta_for_round(50), 0.9);
        let high = GateThresholds { theta: 0.95, ..TH };
        assert_eq!(high.theta_for_round(5), 0.95);
    }
}
