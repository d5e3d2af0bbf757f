//! Self-supervised objectives over paired projection batches.
//!
//! All three losses consume two views of the same batch: for each row
//! index `i`, `view_a[i]` and `view_b[i]` are projections of two
//! independently augmented versions of the same underlying patch.
//! Conventions shared by every loss: rows are samples, columns are
//! projection dimensions, and every reduction is a mean so logged
//! magnitudes do not depend on batch size.

pub mod byol;
pub mod simclr;
pub mod vicreg;

use crate::error::{Error, Result};
use crate::nn::gradcheck::{check_function, CheckOutcome};
use crate::nn::{Tape, Tensor};
use crate::rng;

pub use byol::{
    byol_align_node, byol_step, byol_symmetric_node, cosine_alignment, ByolAlignOp, Predictor,
};
pub use simclr::{nt_xent_loss, nt_xent_node, nt_xent_with_grad, NtXentOp};
pub use vicreg::{
    covariance_term, invariance_term, variance_term, vicreg_grad, vicreg_loss, vicreg_node,
    VicregComponents, VicregOp, VicregWeights,
};

/// Two equally shaped `[n, d]` projection batches, row-aligned so that
/// row `i` of each view comes from the same sample.
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    view_a: Tensor,
    view_b: Tensor,
}

impl ProjectionPair {
    /// Validates shapes (`[n, d]`, equal, `n >= 2`, `d >= 1`) and
    /// finiteness of both views.
    pub fn new(view_a: Tensor, view_b: Tensor) -> Result<Self> {
        check_pair(&view_a, &view_b)?;
        Ok(Self { view_a, view_b })
    }

    pub fn n(&self) -> usize {
        self.view_a.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.view_a.shape()[1]
    }

    pub fn view_a(&self) -> &Tensor {
        &self.view_a
    }

    pub fn view_b(&self) -> &Tensor {
        &self.view_b
    }
}

/// Shared validation for loss entry points that receive the two views as
/// raw tensors (for example from tape nodes). Returns `(n, d)`.
pub(crate) fn check_pair(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "projection batch must be [n, d], got {:?}",
            a.shape()
        )));
    }
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "projection views must have equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, d) = (a.shape()[0], a.shape()[1]);
    if n < 2 || d < 1 {
        return Err(Error::InvalidArgument(format!(
            "projection batch needs n >= 2 rows and d >= 1 columns, got {n} x {d}"
        )));
    }
    if !a.all_finite() || !b.all_finite() {
        return Err(Error::NonFinite("projection batch".into()));
    }
    Ok((n, d))
}

/// Central-difference checks for each self-supervised loss, on small
/// random batches, using the same step and tolerance as the layer
/// suite. The VICReg batch is scaled per column so every hinge is
/// clearly active or clearly inactive and the finite-difference window
/// never straddles the hinge.
pub fn check_ssl_losses(seed: u64) -> Result<Vec<CheckOutcome>> {
    use rand::Rng;

    let mut entries = Vec::new();
    let mut rand = rng::substream(seed, "gradcheck-ssl");
    let (n, d) = (6, 5);
    let mut matrix = |col_scale: &dyn Fn(usize) -> f64| {
        let data: Vec<f64> = (0..n * d)
            .map(|i| (rand.gen::<f64>() * 2.0 - 1.0) * col_scale(i % d))
            .collect();
        Tensor::new(vec![n, d], data).expect("sized")
    };

    // Columns alternate between std far below gamma (hinge active) and
    // std far above it (hinge inactive).
    let spread = |j: usize| if j % 2 == 0 { 0.4 } else { 2.5 };
    let za = matrix(&spread);
    let zb = matrix(&spread);
    let w = VicregWeights::default();
    entries.push(check_function("loss.vicreg", &[za, zb], move |t| {
        let mut tape = Tape::new();
        let a = tape.leaf(t[0].clone(), true);
        let b = tape.leaf(t[1].clone(), true);
        let loss = vicreg_node(&mut tape, a, b, w.clone())?;
        tape.backward(loss)?;
        Ok((
            tape.value(loss).scalar_value()?,
            vec![tape.grad(a).unwrap().clone(), tape.grad(b).unwrap().clone()],
        ))
    })?);

    let za = matrix(&|_| 1.0);
    let zb = matrix(&|_| 1.0);
    entries.push(check_function("loss.nt_xent", &[za, zb], move |t| {
        let mut tape = Tape::new();
        let a = tape.leaf(t[0].clone(), true);
        let b = tape.leaf(t[1].clone(), true);
        let loss = nt_xent_node(&mut tape, a, b, simclr::DEFAULT_TEMPERATURE)?;
        tape.backward(loss)?;
        Ok((
            tape.value(loss).scalar_value()?,
            vec![tape.grad(a).unwrap().clone(), tape.grad(b).unwrap().clone()],
        ))
    })?);

    // The target view enters as a constant: only the online view is
    // finite-differenced, matching the no-gradient contract.
    let p = matrix(&|_| 1.0);
    let q = matrix(&|_| 1.0);
    entries.push(check_function("loss.byol_alignment", &[p], move |t| {
        let mut tape = Tape::new();
        let pn = tape.leaf(t[0].clone(), true);
        let qn = tape.leaf(q.clone(), false);
        let loss = byol_align_node(&mut tape, pn, qn)?;
        tape.backward(loss)?;
        Ok((
            tape.value(loss).scalar_value()?,
            vec![tape.grad(pn).unwrap().clone()],
        ))
    })?);

    Ok(entries)
}
