//! Detection losses with analytic gradients and the center update.
//!
//! Reductions differ on purpose: softmax cross-entropy is a batch mean, the
//! center term is a batch sum, and SmoothL1 is divided by the number of
//! positives. The center weight `mu` absorbs the scale difference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const NUM_CLASSES: usize = 2;
/// Class index of the face / foreground class. Background is 0.
pub const FACE: usize = 1;

/// Per-class feature centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Centers {
    pub values: Matrix,
    pub alpha: f64,
}

impl Centers {
    pub fn zeros(feature_dim: usize, alpha: f64) -> Result<Self> {
        Self::new(Matrix::zeros(NUM_CLASSES, feature_dim), alpha)
    }

    pub fn new(values: Matrix, alpha: f64) -> Result<Self> {
        if values.rows() != NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "centers need {NUM_CLASSES} rows, got {}",
                values.rows()
            )));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "center rate alpha must be in (0, 1], got {alpha}"
            )));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite("centers"));
        }
        Ok(Centers { values, alpha })
    }

    pub fn feature_dim(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1.0,
            mu: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub reg: f64,
    pub center: f64,
    pub total: f64,
    /// Unreduced classification loss per sample, used to rank hard examples.
    pub per_sample_cls: Vec<f64>,
    /// Unreduced SmoothL1 per sample (zero for unmasked rows).
    pub per_sample_reg: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CeOutput {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grad: Matrix,
}

fn check_labels(labels: &[usize], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("label {l} out of range")));
    }
    Ok(())
}

/// Two-class softmax cross-entropy, averaged over rows.
pub fn softmax_ce(logits: &Matrix, labels: &[usize]) -> Result<CeOutput> {
    let m = logits.rows();
    if m == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if logits.cols() != NUM_CLASSES {
        return Err(Error::ShapeMismatch(format!(
            "logits need {NUM_CLASSES} columns, got {}",
            logits.cols()
        )));
    }
    check_labels(labels, m)?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let inv_m = 1.0 / m as f64;
    let mut grad = Matrix::zeros(m, NUM_CLASSES);
    let mut per_sample = Vec::with_capacity(m);
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row[0].max(row[1]);
        let e0 = (row[0] - max).exp();
        let e1 = (row[1] - max).exp();
        let lse = max + (e0 + e1).ln();
        per_sample.push(lse - row[label]);
        let z = e0 + e1;
        let g = grad.row_mut(i);
        g[0] = e0 / z * inv_m;
        g[1] = e1 / z * inv_m;
        g[label] -= inv_m;
    }
    let loss = per_sample.iter().sum::<f64>() * inv_m;
    Ok(CeOutput {
        loss,
        per_sample,
        grad,
    })
}

/// Probability of the face class for one logit row.
pub fn face_probability(logits: &[f64]) -> f64 {
    let d = logits[0] - logits[FACE];
    1.0 / (1.0 + d.exp())
}

fn check_center_inputs(features: &Matrix, labels: &[usize], centers: &Centers) -> Result<()> {
    if features.cols() != centers.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} but centers have dim {}",
            features.cols(),
            centers.feature_dim()
        )));
    }
    check_labels(labels, features.rows())
}

/// `0.5 * sum_i |x_i - c_{y_i}|^2` over the batch, with the gradient with
/// respect to the features (centers held constant).
pub fn center_loss(features: &Matrix, labels: &[usize], centers: &Centers) -> Result<(f64, Matrix)> {
    check_center_inputs(features, labels, centers)?;
    let mut grad = Matrix::zeros(features.rows(), features.cols());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let c = centers.values.row(y);
        for ((g, &x), &cj) in grad.row_mut(i).iter_mut().zip(features.row(i)).zip(c) {
            let diff = x - cj;
            *g = diff;
            loss += 0.5 * diff * diff;
        }
    }
    Ok((loss, grad))
}

/// Mini-batch center step: `c_j -= alpha * sum_{y_i=j}(c_j - x_i) / (1 + n_j)`.
pub fn update_centers(centers: &Centers, features: &Matrix, labels: &[usize]) -> Result<Centers> {
    check_center_inputs(features, labels, centers)?;
    let d = centers.feature_dim();
    let mut sums = vec![vec![0.0; d]; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        let c = centers.values.row(y);
        for ((s, &cj), &x) in sums[y].iter_mut().zip(c).zip(features.row(i)) {
            *s += cj - x;
        }
    }
    let mut next = centers.clone();
    for (j, (sum, &n)) in sums.iter().zip(&counts).enumerate() {
        if n == 0 {
            continue;
        }
        let denom = 1.0 + n as f64;
        for (c, s) in next.values.row_mut(j).iter_mut().zip(sum) {
            *c -= centers.alpha * s / denom;
        }
    }
    if !next.values.all_finite() {
        return Err(Error::NonFinite("centers"));
    }
    Ok(next)
}

#[inline]
fn smooth_l1_scalar(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

#[derive(Debug, Clone)]
pub struct SmoothL1Output {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grad: Matrix,
}

/// SmoothL1 on masked rows, normalized by `max(1, number of masked rows)`.
pub fn smooth_l1(pred: &Matrix, target: &Matrix, mask: &[bool]) -> Result<SmoothL1Output> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() || mask.len() != pred.rows() {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{}, target {}x{}, mask {}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols(),
            mask.len()
        )));
    }
    if !pred.all_finite() || !target.all_finite() {
        return Err(Error::NonFinite("smooth_l1 inputs"));
    }
    let n_pos = mask.iter().filter(|&&m| m).count();
    let norm = 1.0 / (n_pos.max(1) as f64);
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut per_sample = vec![0.0; pred.rows()];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let g = grad.row_mut(i);
        for (k, (&p, &t)) in pred.row(i).iter().zip(target.row(i)).enumerate() {
            let (l, d) = smooth_l1_scalar(p - t);
            per_sample[i] += l;
            g[k] = d * norm;
        }
    }
    let loss = per_sample.iter().sum::<f64>() * norm;
    Ok(SmoothL1Output {
        loss,
        per_sample,
        grad,
    })
}

/// Inputs of the combined head loss; all share the batch dimension `m`.
#[derive(Debug, Clone, Copy)]
pub struct MultitaskInputs<'a> {
    pub logits: &'a Matrix,
    pub labels: &'a [usize],
    pub pred_deltas: &'a Matrix,
    pub target_deltas: &'a Matrix,
    pub pos_mask: &'a [bool],
    pub features: &'a Matrix,
}

#[derive(Debug, Clone)]
pub struct MultitaskGrads {
    pub logits: Matrix,
    pub deltas: Matrix,
    /// Direct gradient of the weighted center term. The cross-entropy path
    /// reaches the features through the logit layer during backprop.
    pub features: Matrix,
}

/// `L = L_cls + lambda * L_reg + mu * L_center`.
pub fn multitask_loss(
    inputs: MultitaskInputs<'_>,
    centers: &Centers,
    weights: LossWeights,
) -> Result<(LossReport, MultitaskGrads)> {
    weights.validate()?;
    let m = inputs.logits.rows();
    if inputs.pred_deltas.rows() != m || inputs.features.rows() != m {
        return Err(Error::ShapeMismatch(format!(
            "batch sizes differ: logits {m}, deltas {}, features {}",
            inputs.pred_deltas.rows(),
            inputs.features.rows()
        )));
    }
    let ce = softmax_ce(inputs.logits, inputs.labels)?;
    let reg = smooth_l1(inputs.pred_deltas, inputs.target_deltas, inputs.pos_mask)?;
    let (center, mut center_grad) = center_loss(inputs.features, inputs.labels, centers)?;

    let mut delta_grad = reg.grad;
    delta_grad.scale(weights.lambda);
    center_grad.scale(weights.mu);

    let report = LossReport {
        cls: ce.loss,
        reg: reg.loss,
        center,
        total: ce.loss + weights.lambda * reg.loss + weights.mu * center,
        per_sample_cls: ce.per_sample,
        per_sample_reg: reg.per_sample,
    };
    Ok((
        report,
        MultitaskGrads {
            logits: ce.grad,
            deltas: delta_grad,
            features: center_grad,
        },
    ))
}
