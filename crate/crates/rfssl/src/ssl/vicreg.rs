//! Variance-invariance-covariance regularization.
//!
//! The loss couples three terms: a mean-squared invariance term pulling
//! the two views of each sample together, a hinge on each column's
//! standard deviation holding the batch open against collapse, and a
//! penalty on squared off-diagonal covariance entries decorrelating the
//! projection dimensions. Gradients are hand-derived; the centering
//! steps need no extra chain term because both the variance and
//! covariance gradients are column-centered by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul_ab, matmul_atb};
use crate::nn::{CustomOp, NodeId, Tape, Tensor};

use super::ProjectionPair;

fn default_lambda() -> f64 {
    25.0
}

fn default_mu() -> f64 {
    25.0
}

fn default_nu() -> f64 {
    1.0
}

fn default_gamma() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    1e-4
}

/// Term weights and hinge constants. Defaults: invariance 25, variance
/// 25, covariance 1, std threshold 1, epsilon 1e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VicregWeights {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            mu: default_mu(),
            nu: default_nu(),
            gamma: default_gamma(),
            epsilon: default_epsilon(),
        }
    }
}

impl VicregWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("nu", self.nu),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "vicreg weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "vicreg gamma must be finite and positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Per-term values for logging; the weighted sum is the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicregComponents {
    pub invariance: f64,
    pub variance_a: f64,
    pub variance_b: f64,
    pub covariance_a: f64,
    pub covariance_b: f64,
}

impl VicregComponents {
    pub fn weighted_total(&self, w: &VicregWeights) -> f64 {
        w.lambda * self.invariance
            + w.mu * (self.variance_a + self.variance_b)
            + w.nu * (self.covariance_a + self.covariance_b)
    }
}

/// Column means and the centered matrix, row-major `[n, d]`.
fn centered(z: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut means = vec![0.0f64; d];
    for row in z.chunks_exact(d) {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut zc = z.to_vec();
    for row in zc.chunks_exact_mut(d) {
        for (v, &m) in row.iter_mut().zip(&means) {
            *v -= m;
        }
    }
    (means, zc)
}

/// Unbiased column variances from an already centered matrix.
fn column_variances(zc: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut var = vec![0.0f64; d];
    for row in zc.chunks_exact(d) {
        for (s, &v) in var.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    for s in &mut var {
        *s /= (n - 1) as f64;
    }
    var
}

fn require_rows(z: &Tensor) -> Result<(usize, usize)> {
    if z.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "expected an [n, d] batch, got {:?}",
            z.shape()
        )));
    }
    let (n, d) = (z.shape()[0], z.shape()[1]);
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance and covariance need at least 2 rows, got {n}"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("batch has zero columns".into()));
    }
    Ok((n, d))
}

/// Mean squared distance between paired rows:
/// `(1/n) * sum_i ||a_i - b_i||^2`.
pub fn invariance_term(pair: &ProjectionPair) -> f64 {
    let (a, b) = (pair.view_a().data(), pair.view_b().data());
    let n = pair.n() as f64;
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    sum / n
}

/// Hinge on per-column standard deviation:
/// `(1/d) * sum_j max(0, gamma - sqrt(epsilon + Var(col_j)))` with the
/// unbiased variance estimator.
pub fn variance_term(z: &Tensor, gamma: f64, epsilon: f64) -> Result<f64> {
    let (n, d) = require_rows(z)?;
    let (_, zc) = centered(z.data(), n, d);
    let var = column_variances(&zc, n, d);
    let sum: f64 = var
        .iter()
        .map(|&v| (gamma - (epsilon + v).sqrt()).max(0.0))
        .sum();
    Ok(sum / d as f64)
}

/// Mean squared off-diagonal covariance:
/// `(1/d) * sum_{j != k} C_jk^2` with `C = Zc^T Zc / (n - 1)`.
pub fn covariance_term(z: &Tensor) -> Result<f64> {
    let (n, d) = require_rows(z)?;
    let (_, zc) = centered(z.data(), n, d);
    let mut c = matmul_atb(&zc, n, d, &zc, d);
    let scale = 1.0 / (n - 1) as f64;
    for v in &mut c {
        *v *= scale;
    }
    let mut sum = 0.0f64;
    for j in 0..d {
        for k in 0..d {
            if j != k {
                sum += c[j * d + k] * c[j * d + k];
            }
        }
    }
    Ok(sum / d as f64)
}

/// Weighted total plus the individual terms:
/// `lambda * s + mu * (v_a + v_b) + nu * (c_a + c_b)`.
pub fn vicreg_loss(pair: &ProjectionPair, w: &VicregWeights) -> Result<(f64, VicregComponents)> {
    w.validate()?;
    let components = VicregComponents {
        invariance: invariance_term(pair),
        variance_a: variance_term(pair.view_a(), w.gamma, w.epsilon)?,
        variance_b: variance_term(pair.view_b(), w.gamma, w.epsilon)?,
        covariance_a: covariance_term(pair.view_a())?,
        covariance_b: covariance_term(pair.view_b())?,
    };
    Ok((components.weighted_total(w), components))
}

/// Gradient of the variance and covariance terms for one view, written
/// into `out` with the given weights already applied.
fn accumulate_view_grad(z: &[f64], n: usize, d: usize, w: &VicregWeights, out: &mut [f64]) {
    let (_, zc) = centered(z, n, d);
    let var = column_variances(&zc, n, d);
    let nm1 = (n - 1) as f64;

    // Variance hinge: active columns contribute
    // -zc / (d * (n-1) * sqrt(epsilon + var)); the column is centered,
    // so the mean-dependence term vanishes identically.
    let mut col_scale = vec![0.0f64; d];
    for (j, &v) in var.iter().enumerate() {
        let s = (w.epsilon + v).sqrt();
        if w.gamma - s > 0.0 {
            col_scale[j] = -w.mu / (d as f64 * nm1 * s);
        }
    }
    for (orow, zrow) in out.chunks_exact_mut(d).zip(zc.chunks_exact(d)) {
        for ((o, &v), &s) in orow.iter_mut().zip(zrow).zip(&col_scale) {
            *o += s * v;
        }
    }

    // Covariance: 4 / (d * (n-1)) * Zc * C_off. Columns of Zc * C_off
    // are linear combinations of zero-mean columns, so the centering
    // projection is again the identity.
    let mut c = matmul_atb(&zc, n, d, &zc, d);
    let scale = 1.0 / nm1;
    for v in &mut c {
        *v *= scale;
    }
    for j in 0..d {
        c[j * d + j] = 0.0;
    }
    let zc_c = matmul_ab(&zc, n, d, &c, d);
    let cov_scale = w.nu * 4.0 / (d as f64 * nm1);
    for (o, &v) in out.iter_mut().zip(&zc_c) {
        *o += cov_scale * v;
    }
}

/// Analytic gradients of the weighted total with respect to each view.
pub fn vicreg_grad(pair: &ProjectionPair, w: &VicregWeights) -> Result<(Tensor, Tensor)> {
    w.validate()?;
    let (n, d) = (pair.n(), pair.d());
    let (a, b) = (pair.view_a().data(), pair.view_b().data());
    let inv_scale = w.lambda * 2.0 / n as f64;
    let mut ga: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| inv_scale * (x - y))
        .collect();
    let mut gb: Vec<f64> = ga.iter().map(|&g| -g).collect();
    accumulate_view_grad(a, n, d, w, &mut ga);
    accumulate_view_grad(b, n, d, w, &mut gb);
    Ok((
        Tensor::new(vec![n, d], ga)?,
        Tensor::new(vec![n, d], gb)?,
    ))
}

/// Tape op computing the weighted total over two projection nodes.
#[derive(Debug)]
pub struct VicregOp {
    pub weights: VicregWeights,
}

impl CustomOp for VicregOp {
    fn name(&self) -> &'static str {
        "vicreg_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let pair = ProjectionPair::new(inputs[0].clone(), inputs[1].clone())?;
        let (total, _) = vicreg_loss(&pair, &self.weights)?;
        Ok(Tensor::scalar(total))
    }

    fn backward(&self, inputs: &[&Tensor], grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = grad_out.scalar_value()?;
        let pair = ProjectionPair::new(inputs[0].clone(), inputs[1].clone())?;
        let (mut ga, mut gb) = vicreg_grad(&pair, &self.weights)?;
        for v in ga.data_mut() {
            *v *= g;
        }
        for v in gb.data_mut() {
            *v *= g;
        }
        Ok(vec![Some(ga), Some(gb)])
    }
}

/// Attach the loss to a tape over two projection nodes.
pub fn vicreg_node(
    tape: &mut Tape,
    view_a: NodeId,
    view_b: NodeId,
    weights: VicregWeights,
) -> Result<NodeId> {
    weights.validate()?;
    tape.custom(Box::new(VicregOp { weights }), &[view_a, view_b])
}
