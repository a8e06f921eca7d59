//! Synthetic two-domain classification data.
//!
//! The source domain is a mixture of `K` isotropic Gaussian blobs. The target
//! domain draws from the same blobs, then rotates them in a random 2D plane,
//! translates them along a random direction and adds extra noise. Target
//! labels exist only for scoring and are reachable through
//! [`TargetSet::evaluation_labels`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

/// ChaCha8 generator on an independent stream of `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSpec {
    /// Rotation angle in radians, applied in a random 2D plane.
    pub rotation: f64,
    /// Length of the translation, along a random unit direction.
    pub translation: f64,
    /// Standard deviation of extra isotropic noise on target samples.
    pub noise: f64,
}

impl ShiftSpec {
    pub const NONE: ShiftSpec = ShiftSpec {
        rotation: 0.0,
        translation: 0.0,
        noise: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_source: usize,
    pub n_source_test: usize,
    pub n_target: usize,
    /// Distance of every class mean from the origin.
    pub separation: f64,
    /// Within-class standard deviation.
    pub class_std: f64,
    /// Ratio between the most and least frequent class; 1 is balanced.
    pub imbalance: f64,
    pub shift: ShiftSpec,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            num_classes: 5,
            dim: 16,
            n_source: 2000,
            n_source_test: 500,
            n_target: 2000,
            separation: 3.0,
            class_std: 1.0,
            imbalance: 1.0,
            shift: ShiftSpec {
                rotation: 0.9,
                translation: 2.0,
                noise: 0.5,
            },
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.dim < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 dimensions, got {}",
                self.dim
            )));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Validation(format!(
                "class separation must be positive, got {}",
                self.separation
            )));
        }
        if !(self.class_std >= 0.0 && self.shift.noise >= 0.0) {
            return Err(Error::Validation(
                "noise scales must be non-negative".into(),
            ));
        }
        if !(1.0..).contains(&self.imbalance) {
            return Err(Error::Validation(format!(
                "imbalance ratio must be >= 1, got {}",
                self.imbalance
            )));
        }
        if self.n_source == 0 || self.n_target == 0 {
            return Err(Error::Validation(
                "source and target sizes must be positive".into(),
            ));
        }
        if !self.shift.rotation.is_finite() || !self.shift.translation.is_finite() {
            return Err(Error::Validation("shift must be finite".into()));
        }
        Ok(())
    }

    /// Class priors `∝ imbalance^(−k/(K−1))`.
    pub fn priors(&self) -> Vec<f64> {
        let k = self.num_classes;
        let raw: Vec<f64> = (0..k)
            .map(|c| self.imbalance.powf(-(c as f64) / (k - 1) as f64))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Target inputs with labels kept aside for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    inputs: Matrix,
    hidden_labels: Vec<usize>,
}

impl TargetSet {
    pub fn new(inputs: Matrix, hidden_labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != hidden_labels.len() {
            return Err(Error::shape(
                "TargetSet::new",
                inputs.rows(),
                hidden_labels.len(),
            ));
        }
        Ok(Self {
            inputs,
            hidden_labels,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    /// Ground truth, for scoring only.
    pub fn evaluation_labels(&self) -> &[usize] {
        &self.hidden_labels
    }

    pub fn len(&self) -> usize {
        self.hidden_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden_labels.is_empty()
    }

    pub fn into_labeled(self) -> LabeledSet {
        LabeledSet {
            features: self.inputs,
            labels: self.hidden_labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainPair {
    pub num_classes: usize,
    pub dim: usize,
    pub shift: ShiftSpec,
    pub source: LabeledSet,
    pub source_test: LabeledSet,
    pub target: TargetSet,
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vector(rng, dim);
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Labels with exact per-class counts (largest remainder), shuffled.
fn draw_labels(rng: &mut ChaCha8Rng, n: usize, priors: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = priors
        .iter()
        .map(|p| (p * n as f64).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = priors[a] * n as f64 - counts[a] as f64;
        let rb = priors[b] * n as f64 - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = n - counts.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[c] += 1;
        missing -= 1;
    }
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(rng);
    labels
}

fn sample_blobs(rng: &mut ChaCha8Rng, means: &[Vec<f64>], labels: &[usize], std: f64) -> Matrix {
    let dim = means[0].len();
    let mut x = Matrix::zeros(labels.len(), dim);
    for (i, &y) in labels.iter().enumerate() {
        let noise = gaussian_vector(rng, dim);
        for ((dst, m), z) in x.row_mut(i).iter_mut().zip(&means[y]).zip(noise) {
            *dst = m + std * z;
        }
    }
    x
}

/// Rotation by `angle` in the plane spanned by orthonormal `u`, `v`.
fn rotate_in_plane(x: &mut [f64], u: &[f64], v: &[f64], angle: f64) {
    let (a, b) = (dot(x, u), dot(x, v));
    let (s, c) = angle.sin_cos();
    let (a2, b2) = (c * a - s * b, s * a + c * b);
    for ((xi, ui), vi) in x.iter_mut().zip(u).zip(v) {
        *xi += (a2 - a) * ui + (b2 - b) * vi;
    }
}

pub fn make_domain_pair(spec: &DomainSpec, seed: u64) -> Result<DomainPair> {
    spec.validate()?;
    let (k, dim) = (spec.num_classes, spec.dim);
    let priors = spec.priors();

    let mut rng = seeded_rng(seed, 0);
    let means: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            unit_vector(&mut rng, dim)
                .into_iter()
                .map(|v| v * spec.separation)
                .collect()
        })
        .collect();
    if means.iter().enumerate().any(|(i, a)| {
        means[i + 1..]
            .iter()
            .any(|b| a.iter().zip(b).all(|(x, y)| x == y))
    }) {
        return Err(Error::Validation("two class means coincide".into()));
    }

    // Shift geometry: a random plane (Gram-Schmidt) and a random direction.
    let u = unit_vector(&mut rng, dim);
    let v = loop {
        let mut w = gaussian_vector(&mut rng, dim);
        let proj = dot(&w, &u);
        w.iter_mut().zip(&u).for_each(|(wi, ui)| *wi -= proj * ui);
        let n = norm(&w);
        if n > 1e-8 {
            break w.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let direction = unit_vector(&mut rng, dim);

    let mut rng = seeded_rng(seed, 1);
    let source_labels = draw_labels(&mut rng, spec.n_source, &priors);
    let source = sample_blobs(&mut rng, &means, &source_labels, spec.class_std);

    let mut rng = seeded_rng(seed, 2);
    let test_labels = draw_labels(&mut rng, spec.n_source_test, &priors);
    let source_test = sample_blobs(&mut rng, &means, &test_labels, spec.class_std);

    let mut rng = seeded_rng(seed, 3);
    let target_labels = draw_labels(&mut rng, spec.n_target, &priors);
    let mut target = sample_blobs(&mut rng, &means, &target_labels, spec.class_std);
    for r in 0..target.rows() {
        let extra = gaussian_vector(&mut rng, dim);
        let row = target.row_mut(r);
        rotate_in_plane(row, &u, &v, spec.shift.rotation);
        for ((xi, d), z) in row.iter_mut().zip(&direction).zip(extra) {
            *xi += spec.shift.translation * d + spec.shift.noise * z;
        }
    }

    Ok(DomainPair {
        num_classes: k,
        dim,
        shift: spec.shift,
        source: LabeledSet {
            features: source,
            labels: source_labels,
        },
        source_test: LabeledSet {
            features: source_test,
            labels: test_labels,
        },
        target: TargetSet::new(target, target_labels)?,
    })
}

/// Shuffled mini-batches of `0..n` for one epoch; the last batch may be short.
pub fn iterate_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, epoch));
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Writes `K=<k> dim=<d> n=<n>` followed by one `label,x_0,...` line per row.
/// Values use the shortest representation that parses back exactly.
pub fn write_labeled(path: &Path, set: &LabeledSet, num_classes: usize) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "K={} dim={} n={}",
        num_classes,
        set.features.cols(),
        set.len()
    );
    for (row, y) in set.features.iter_rows().zip(&set.labels) {
        let _ = write!(out, "{y}");
        for v in row {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn header_field(path: &Path, token: Option<&str>, key: &str) -> Result<usize> {
    token
        .and_then(|t| t.strip_prefix(key))
        .and_then(|t| t.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(path, 1, format!("expected `{key}=<count>` in header")))
}

/// Reads a file written by [`write_labeled`]; returns the set and `K`.
pub fn read_labeled(path: &Path) -> Result<(LabeledSet, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let mut tokens = header.split_whitespace();
    let k = header_field(path, tokens.next(), "K")?;
    let dim = header_field(path, tokens.next(), "dim")?;
    let n = header_field(path, tokens.next(), "n")?;

    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let mut fields = line.split(',');
        let y: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::parse(path, lineno, "bad label"))?;
        if y >= k {
            return Err(Error::parse(
                path,
                lineno,
                format!("label {y} out of range for K={k}"),
            ));
        }
        let before = data.len();
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad number `{f}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, lineno, "non-finite value"));
            }
            data.push(v);
        }
        if data.len() - before != dim {
            return Err(Error::parse(path, lineno, format!("expected {dim} values")));
        }
        labels.push(y);
    }
    if labels.len() != n {
        return Err(Error::parse(
            path,
            1,
            format!("header says n={n}, found {} rows", labels.len()),
        ));
    }
    let features = Matrix::from_vec(n, dim, data)?;
    Ok((LabeledSet { features, labels }, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DomainSpec {
        DomainSpec {
            n_source: 200,
            n_source_test: 50,
            n_target: 150,
            ..DomainSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = make_domain_pair(&small(), 7).unwrap();
        let b = make_domain_pair(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = make_domain_pair(&small(), 8).unwrap();
        assert_ne!(a.target.inputs(), c.target.inputs());
    }

    #[test]
    fn rejects_degenerate_specs() {
        for spec in [
            DomainSpec {
                num_classes: 1,
                ..small()
            },
            DomainSpec { dim: 1, ..small() },
            DomainSpec {
                separation: 0.0,
                ..small()
            },
            DomainSpec {
                imbalance: 0.5,
                ..small()
            },
        ] {
            assert!(matches!(
                make_domain_pair(&spec, 0),
                Err(Error::Validation(_))
            ));
        }
    }

    #[test]
    fn balanced_by_default() {
        let pair = make_domain_pair(&small(), 1).unwrap();
        let mut counts = vec![0; 5];
        pair.target
            .evaluation_labels()
            .iter()
            .for_each(|&y| counts[y] += 1);
        assert_eq!(counts, vec![30; 5]);
    }

    #[test]
    fn imbalance_skews_priors() {
        let spec = DomainSpec {
            imbalance: 10.0,
            ..small()
        };
        let p = spec.priors();
        assert!((p[0] / p[4] - 10.0).abs() < 1e-9);
        let pair = make_domain_pair(&spec, 1).unwrap();
        let first = pair.source.labels.iter().filter(|&&y| y == 0).count();
        let last = pair.source.labels.iter().filter(|&&y| y == 4).count();
        assert!(first > 5 * last);
    }

    #[test]
    fn zero_shift_keeps_target_on_source_means() {
        let spec = DomainSpec {
            shift: ShiftSpec::NONE,
            class_std: 0.0,
            ..small()
        };
        let pair = make_domain_pair(&spec, 3).unwrap();
        for (row, &y) in pair
            .target
            .inputs()
            .iter_rows()
            .zip(pair.target.evaluation_labels())
        {
            let same = pair.source.labels.iter().position(|&l| l == y).unwrap();
            assert_eq!(row, pair.source.features.row(same));
        }
    }

    #[test]
    fn rotation_preserves_norm() {
        let mut x = vec![1.0, 2.0, 3.0];
        let u = [1.0, 0.0, 0.0];
        let v = [0.0, 1.0, 0.0];
        rotate_in_plane(&mut x, &u, &v, std::f64::consts::FRAC_PI_2);
        assert!((x[0] + 2.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12 && x[2] == 3.0);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let batches = iterate_batches(103, 10, 5, 0);
        assert_eq!(batches.len(), 11);
        assert_eq!(batches.last().unwrap().len(), 3);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());

        let other = iterate_batches(103, 10, 5, 1);
        assert_ne!(batches, other);
        let mut all_other = other.concat();
        all_other.sort_unstable();
        assert_eq!(all_other, all);
        assert_eq!(iterate_batches(103, 10, 5, 0), batches);
    }

    #[test]
    fn dump_round_trips() {
        let pair = make_domain_pair(&small(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("source.csv");
        write_labeled(&path, &pair.source, pair.num_classes).unwrap();
        let (back, k) = read_labeled(&path).unwrap();
        assert_eq!(k, 5);
        assert_eq!(back, pair.source);
    }

    #[test]
    fn load_rejects_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "K=2 dim=2 n=1\n3,0.1,0.2\n").unwrap();
        assert!(matches!(
            read_labeled(&path),
            Err(Error::Parse { line: 2, .. })
        ));
        fs::write(&path, "K=2 dim=2 n=1\n1,0.1\n").unwrap();
        assert!(read_labeled(&path).is_err());
        fs::write(&path, "K=2 dim=2 n=2\n1,0.1,0.3\n").unwrap();
        assert!(read_labeled(&path).is_err());
    }
}
