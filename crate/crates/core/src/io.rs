//! On-disk formats: exported soft predictions, model checkpoints and round metrics.
//!
//! The predictions file is the only thing the adaptation side reads from the
//! source side. A checkpoint handed to the predictions reader is refused.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Mlp;

/// Row sums of an in-memory prediction set must be this close to 1.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Looser tolerance for rows read back from text before renormalization.
const FILE_ROW_SUM_TOL: f64 = 1e-6;

const CHECKPOINT_MAGIC: &str = "ipl-checkpoint";
const CHECKPOINT_VERSION: &str = "v1";

/// Soft source predictions on the target set, one row per sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPredictionSet {
    probs: Matrix,
}

impl SoftPredictionSet {
    pub fn new(probs: Matrix) -> Result<Self> {
        if probs.cols() < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {}",
                probs.cols()
            )));
        }
        for (i, row) in probs.iter_rows().enumerate() {
            check_row(row, ROW_SUM_TOL).map_err(|m| Error::Validation(format!("row {i}: {m}")))?;
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        self.probs.argmax_rows()
    }

    /// Text form: `K=<k> n=<n>` then `sample_id,p_0,...,p_{K-1}` per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("K={} n={}\n", self.num_classes(), self.len());
        for (i, row) in self.probs.iter_rows().enumerate() {
            let _ = write!(s, "{i}");
            for p in row {
                let _ = write!(s, ",{p:.8e}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`to_text`](Self::to_text) output. Rows are renormalized to
    /// undo rounding; `path` is only used in error messages.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        if text.starts_with(CHECKPOINT_MAGIC) {
            return Err(Error::BlackBoxViolation(path.to_path_buf()));
        }
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
        let (k, n) = parse_header(header)
            .ok_or_else(|| Error::parse(path, 1, format!("bad header `{header}`")))?;
        if k < 2 {
            return Err(Error::parse(path, 1, "need at least 2 classes"));
        }
        let mut probs = Matrix::zeros(n, k);
        let mut seen = vec![false; n];
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let id: usize = fields
                .next()
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| Error::parse(path, lineno, "bad sample id"))?;
            if id >= n || seen[id] {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("sample id {id} out of range or repeated"),
                ));
            }
            seen[id] = true;
            let row: Vec<f64> = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
            if row.len() != k {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected {k} probabilities, got {}", row.len()),
                ));
            }
            check_row(&row, FILE_ROW_SUM_TOL).map_err(|m| Error::parse(path, lineno, m))?;
            let sum: f64 = row.iter().sum();
            for (dst, p) in probs.row_mut(id).iter_mut().zip(&row) {
                *dst = p / sum;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::parse(
                path,
                text.lines().count(),
                format!("sample id {missing} missing"),
            ));
        }
        Self::new(probs)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

fn check_row(row: &[f64], tol: f64) -> std::result::Result<(), String> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("probabilities must be finite and non-negative".into());
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(format!("row sums to {sum}"));
    }
    Ok(())
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let mut k = None;
    let mut n = None;
    for part in line.split_whitespace() {
        match part.split_once('=')? {
            ("K", v) => k = v.parse().ok(),
            ("n", v) => n = v.parse().ok(),
            _ => return None,
        }
    }
    Some((k?, n?))
}

/// Text dump of all parameters. Floats use shortest round-trip formatting,
/// so a save/load cycle is exact.
pub fn checkpoint_to_text(model: &Mlp) -> String {
    let mut s = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nlayer_dims");
    for d in model.layer_dims() {
        let _ = write!(s, " {d}");
    }
    s.push('\n');
    for (i, layer) in model.layers().iter().enumerate() {
        let _ = writeln!(s, "layer {i} {} {}", layer.out_dim(), layer.in_dim());
        for row in layer.weights.iter_rows() {
            push_floats(&mut s, row);
        }
        push_floats(&mut s, &layer.bias);
    }
    s
}

fn push_floats(s: &mut String, values: &[f64]) {
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:?}");
    }
    s.push('\n');
}

pub fn checkpoint_from_text(text: &str, path: &Path) -> Result<Mlp> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| {
            Error::parse(path, 0, format!("unexpected end of file, expected {what}"))
        })
    };
    let (ln, magic) = next("header")?;
    if magic.trim() != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
        return Err(Error::parse(
            path,
            ln,
            format!("not a {CHECKPOINT_VERSION} checkpoint"),
        ));
    }
    let (ln, dims_line) = next("layer_dims")?;
    let dims: Vec<usize> = dims_line
        .strip_prefix("layer_dims")
        .ok_or_else(|| Error::parse(path, ln, "expected layer_dims"))?
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(path, ln, format!("{e}")))?;
    if dims.len() < 2 {
        return Err(Error::parse(path, ln, "need at least two layer dims"));
    }
    let parse_floats = |ln: usize, line: &str, expect: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, ln, format!("{e}")))?;
        if v.len() != expect {
            return Err(Error::parse(
                path,
                ln,
                format!("expected {expect} values, got {}", v.len()),
            ));
        }
        Ok(v)
    };
    let mut params = Vec::with_capacity(dims.len() - 1);
    for (i, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let (ln, head) = next("layer header")?;
        if head.trim() != format!("layer {i} {fan_out} {fan_in}") {
            return Err(Error::parse(path, ln, format!("bad layer header `{head}`")));
        }
        let mut weights = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_out {
            let (ln, line) = next("weight row")?;
            weights.extend(parse_floats(ln, line, fan_in)?);
        }
        let (ln, line) = next("bias")?;
        let bias = parse_floats(ln, line, fan_out)?;
        params.push((Matrix::from_vec(fan_out, fan_in, weights)?, bias));
    }
    Mlp::from_parameters(&dims, params)
}

pub fn save_checkpoint(model: &Mlp, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Mlp> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_text(&text, path)
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub high_size: usize,
    pub low_size: usize,
    /// Fraction of the high-confidence pool whose pseudo-label is correct.
    pub high_purity: f64,
    pub target_accuracy: f64,
    pub loss_kd: f64,
    pub loss_im: f64,
    pub loss_mix: f64,
}

pub const METRICS_HEADER: &str = "round,H_size,L_size,H_purity,target_acc,L_kd,L_im,L_mix";

pub fn metrics_to_text(rows: &[RoundMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.round,
            m.high_size,
            m.low_size,
            m.high_purity,
            m.target_accuracy,
            m.loss_kd,
            m.loss_im,
            m.loss_mix
        );
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[RoundMetrics]) -> Result<()> {
    fs::write(path, metrics_to_text(rows)).map_err(|e| Error::io(path, e))
}
