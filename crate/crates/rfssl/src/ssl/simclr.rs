//! Normalized-temperature cross entropy over a 2n-view batch.
//!
//! The two views are stacked into 2n rows; each row's positive is its
//! counterpart in the other view and every other row is a negative.
//! Rows are L2-normalized internally, similarities are cosine over
//! temperature, and the loss is the mean cross entropy over all 2n
//! anchors (self-similarity excluded from each anchor's partition
//! function).

use crate::error::{Error, Result};
use crate::nn::tensor::{matmul_ab, matmul_abt};
use crate::nn::{CustomOp, NodeId, Tape, Tensor};

use super::{check_pair, ProjectionPair};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

fn check_temperature(temperature: f64) -> Result<()> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be finite and positive, got {temperature}"
        )));
    }
    Ok(())
}

/// Stacked unit rows `[2n, d]` (view a first) plus the original norms.
fn normalized_rows(a: &Tensor, b: &Tensor, n: usize, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut unit = Vec::with_capacity(2 * n * d);
    unit.extend_from_slice(a.data());
    unit.extend_from_slice(b.data());
    let mut norms = vec![0.0f64; 2 * n];
    for (i, row) in unit.chunks_exact_mut(d).enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "zero-norm projection row {i} cannot be normalized"
            )));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms[i] = norm;
    }
    Ok((unit, norms))
}

fn loss_and_grad(
    a: &Tensor,
    b: &Tensor,
    temperature: f64,
) -> Result<(f64, Tensor, Tensor)> {
    check_temperature(temperature)?;
    let (n, d) = check_pair(a, b)?;
    let m = 2 * n;
    let (unit, norms) = normalized_rows(a, b, n, d)?;

    // Cosine similarities over temperature, anchors in rows.
    let mut sims = matmul_abt(&unit, m, d, &unit, m);
    for v in &mut sims {
        *v /= temperature;
    }

    // Per anchor: log-sum-exp over the other 2n-1 rows minus the
    // positive logit. dL/dsim lands in `coeff`, rows scaled by 1/m.
    let mut loss = 0.0f64;
    let mut coeff = vec![0.0f64; m * m];
    for anchor in 0..m {
        let row = &sims[anchor * m..(anchor + 1) * m];
        let positive = (anchor + n) % m;
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if j != anchor && v > max {
                max = v;
            }
        }
        let mut denom = 0.0f64;
        for (j, &v) in row.iter().enumerate() {
            if j != anchor {
                denom += (v - max).exp();
            }
        }
        let lse = max + denom.ln();
        loss += lse - row[positive];
        let crow = &mut coeff[anchor * m..(anchor + 1) * m];
        for (j, &v) in row.iter().enumerate() {
            if j != anchor {
                crow[j] = (v - lse).exp() / m as f64;
            }
        }
        crow[positive] -= 1.0 / m as f64;
    }
    loss /= m as f64;

    // Each similarity feeds two anchors; symmetrize the coefficient
    // matrix, map through the unit rows, then undo the normalization.
    let mut sym = vec![0.0f64; m * m];
    for i in 0..m {
        for j in 0..m {
            sym[i * m + j] = (coeff[i * m + j] + coeff[j * m + i]) / temperature;
        }
    }
    let mut grad_unit = matmul_ab(&sym, m, m, &unit, d);
    for (i, row) in grad_unit.chunks_exact_mut(d).enumerate() {
        let u = &unit[i * d..(i + 1) * d];
        let inner: f64 = row.iter().zip(u).map(|(&g, &v)| g * v).sum();
        for (g, &v) in row.iter_mut().zip(u) {
            *g = (*g - inner * v) / norms[i];
        }
    }

    let ga = Tensor::new(vec![n, d], grad_unit[..n * d].to_vec())?;
    let gb = Tensor::new(vec![n, d], grad_unit[n * d..].to_vec())?;
    Ok((loss, ga, gb))
}

/// Loss value only.
pub fn nt_xent_loss(pair: &ProjectionPair, temperature: f64) -> Result<f64> {
    loss_and_grad(pair.view_a(), pair.view_b(), temperature).map(|(l, _, _)| l)
}

/// Loss plus analytic gradients with respect to each raw (unnormalized)
/// view.
pub fn nt_xent_with_grad(
    pair: &ProjectionPair,
    temperature: f64,
) -> Result<(f64, Tensor, Tensor)> {
    loss_and_grad(pair.view_a(), pair.view_b(), temperature)
}

/// Tape op computing the loss over two projection nodes.
#[derive(Debug)]
pub struct NtXentOp {
    pub temperature: f64,
}

impl CustomOp for NtXentOp {
    fn name(&self) -> &'static str {
        "nt_xent_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (loss, _, _) = loss_and_grad(inputs[0], inputs[1], self.temperature)?;
        Ok(Tensor::scalar(loss))
    }

    fn backward(&self, inputs: &[&Tensor], grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = grad_out.scalar_value()?;
        let (_, mut ga, mut gb) = loss_and_grad(inputs[0], inputs[1], self.temperature)?;
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
pub fn nt_xent_node(
    tape: &mut Tape,
    view_a: NodeId,
    view_b: NodeId,
    temperature: f64,
) -> Result<NodeId> {
    check_temperature(temperature)?;
    tape.custom(Box::new(NtXentOp { temperature }), &[view_a, view_b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_pair(n: usize, d: usize, seed: u64) -> ProjectionPair {
        let mut rand = rng::substream(seed, "nt-xent-test");
        let mut make = || {
            let data = (0..n * d).map(|_| rand.gen::<f64>() * 2.0 - 1.0).collect();
            Tensor::new(vec![n, d], data).unwrap()
        };
        ProjectionPair::new(make(), make()).unwrap()
    }

    #[test]
    fn orthogonal_identical_pairs_closed_form() {
        // Each anchor sees its positive at cosine 1 and two negatives
        // at cosine 0, so every anchor contributes log(1 + 2/e).
        let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let pair = ProjectionPair::new(z.clone(), z).unwrap();
        let loss = nt_xent_loss(&pair, 1.0).unwrap();
        let expected = (1.0 + 2.0 / std::f64::consts::E).ln();
        assert!((loss - expected).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn huge_temperature_flattens_to_log_of_negatives() {
        let pair = random_pair(4, 6, 11);
        let loss = nt_xent_loss(&pair, 1e6).unwrap();
        assert!((loss - 7.0f64.ln()).abs() < 1e-3, "got {loss}");
    }

    #[test]
    fn invariant_to_row_rescaling_and_permutation() {
        let pair = random_pair(5, 3, 12);
        let base = nt_xent_loss(&pair, DEFAULT_TEMPERATURE).unwrap();

        let mut scaled = pair.view_a().clone();
        for v in &mut scaled.data_mut()[3..6] {
            *v *= 37.5;
        }
        let scaled_pair = ProjectionPair::new(scaled, pair.view_b().clone()).unwrap();
        let loss = nt_xent_loss(&scaled_pair, DEFAULT_TEMPERATURE).unwrap();
        assert!((loss - base).abs() < 1e-12);

        let perm = [3usize, 0, 4, 1, 2];
        let permute = |t: &Tensor| {
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(&t.data()[i * 3..(i + 1) * 3]);
            }
            Tensor::new(vec![5, 3], data).unwrap()
        };
        let permuted =
            ProjectionPair::new(permute(pair.view_a()), permute(pair.view_b())).unwrap();
        let loss = nt_xent_loss(&permuted, DEFAULT_TEMPERATURE).unwrap();
        assert!((loss - base).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_norm_rows_and_bad_temperature() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let pair = ProjectionPair::new(a, b).unwrap();
        assert!(nt_xent_loss(&pair, 1.0).is_err());

        let pair = random_pair(3, 2, 13);
        assert!(nt_xent_loss(&pair, 0.0).is_err());
        assert!(nt_xent_loss(&pair, -1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let pair = random_pair(4, 3, 14);
        let (_, ga, gb) = nt_xent_with_grad(&pair, DEFAULT_TEMPERATURE).unwrap();
        let h = 1e-5;
        for (ti, grad) in [(0usize, &ga), (1usize, &gb)] {
            for i in 0..12 {
                let mut views = [pair.view_a().clone(), pair.view_b().clone()];
                views[ti].data_mut()[i] += h;
                let plus = nt_xent_loss(
                    &ProjectionPair::new(views[0].clone(), views[1].clone()).unwrap(),
                    DEFAULT_TEMPERATURE,
                )
                .unwrap();
                let mut views = [pair.view_a().clone(), pair.view_b().clone()];
                views[ti].data_mut()[i] -= h;
                let minus = nt_xent_loss(
                    &ProjectionPair::new(views[0].clone(), views[1].clone()).unwrap(),
                    DEFAULT_TEMPERATURE,
                )
                .unwrap();
                let fd = (plus - minus) / (2.0 * h);
                let g = grad.data()[i];
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-5, "input {ti} elem {i}: analytic {g} fd {fd}");
            }
        }
    }

    #[test]
    fn tape_node_matches_direct_evaluation() {
        let pair = random_pair(6, 4, 15);
        let mut tape = Tape::new();
        let na = tape.leaf(pair.view_a().clone(), true);
        let nb = tape.leaf(pair.view_b().clone(), true);
        let loss = nt_xent_node(&mut tape, na, nb, 0.3).unwrap();
        tape.backward(loss).unwrap();

        let (expected, ga, gb) = nt_xent_with_grad(&pair, 0.3).unwrap();
        assert!((tape.value(loss).scalar_value().unwrap() - expected).abs() < 1e-12);
        assert_eq!(tape.grad(na).unwrap(), &ga);
        assert_eq!(tape.grad(nb).unwrap(), &gb);
    }
}
