//! Central finite-difference verification of every analytic gradient.
//!
//! Two layers of checking: small random tensors through each op in
//! isolation, and the full model with every parameter tensor sampled.
//! Both use the same step and tolerance; the CLI exposes the suite so a
//! build can be validated on the target machine.

use rand::Rng;

use crate::error::Result;
use crate::nn::autodiff::{CustomOp, Tape};
use crate::nn::loss::cross_entropy_node;
use crate::nn::model::{ArchDescriptor, BnMode, Model};
use crate::nn::tensor::Tensor;
use crate::rng;

/// Central-difference step in float64.
pub const FD_STEP: f64 = 1e-4;
/// Maximum accepted relative error between analytic and numeric values.
pub const REL_TOL: f64 = 1e-5;
/// Gradient magnitudes below this floor are compared absolutely; the
/// floor keeps finite-difference noise on dead paths from reading as
/// huge relative errors.
const MAG_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub samples: usize,
    pub worst_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<CheckOutcome>,
    pub worst_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn from_entries(entries: Vec<CheckOutcome>) -> Self {
        let worst_err = entries.iter().map(|e| e.worst_err).fold(0.0, f64::max);
        let passed = entries.iter().all(|e| e.passed);
        Self {
            entries,
            worst_err,
            passed,
        }
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .entries
            .iter()
            .map(|e| {
                format!(
                    "{} {:<40} samples {:>3}  max rel err {:.3e}",
                    if e.passed { "ok  " } else { "FAIL" },
                    e.name,
                    e.samples,
                    e.worst_err
                )
            })
            .collect();
        lines.push(format!(
            "{}: {} checks, worst relative error {:.3e} (tolerance {:.0e})",
            if self.passed { "passed" } else { "FAILED" },
            self.entries.len(),
            self.worst_err,
            REL_TOL
        ));
        lines
    }
}

/// Scalar probe `sum(w .* y)`: turns any tensor into a loss whose
/// gradient pattern exercises every element independently.
#[derive(Debug)]
pub struct DotProbe(pub Tensor);

impl CustomOp for DotProbe {
    fn name(&self) -> &'static str {
        "dot_probe"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs[0].shape() != self.0.shape() {
            return Err(crate::error::Error::Shape(format!(
                "probe shape {:?} does not match input {:?}",
                self.0.shape(),
                inputs[0].shape()
            )));
        }
        Ok(Tensor::scalar(
            inputs[0]
                .data()
                .iter()
                .zip(self.0.data())
                .map(|(a, b)| a * b)
                .sum(),
        ))
    }

    fn backward(&self, _inputs: &[&Tensor], grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let s = grad_out.scalar_value()?;
        let data = self.0.data().iter().map(|&v| v * s).collect();
        Ok(vec![Some(Tensor::new(self.0.shape().to_vec(), data)?)])
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAG_FLOOR)
}

fn rand_tensor(shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).expect("sized")
}

/// Check one differentiable function of several tensors: analytic
/// gradients against central differences at every element.
pub(crate) fn check_function<F>(name: &str, inputs: &[Tensor], mut f: F) -> Result<CheckOutcome>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    let (_, analytic) = f(inputs)?;
    let mut worst = 0.0f64;
    let mut samples = 0usize;
    for (ti, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= FD_STEP;
            let fd = (f(&plus)?.0 - f(&minus)?.0) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[ti].data()[i], fd));
            samples += 1;
        }
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        samples,
        worst_err: worst,
        passed: worst < REL_TOL,
    })
}

/// Per-op checks on small random tensors. Each closure rebuilds its tape
/// from the (possibly perturbed) inputs and returns loss plus analytic
/// input gradients.
pub fn check_layer_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = rng::substream(seed, "gradcheck-layers");
    let mut entries = Vec::new();

    let probe = rand_tensor(vec![1, 2, 5, 5], &mut rng);
    let x = rand_tensor(vec![1, 3, 5, 5], &mut rng);
    let w = rand_tensor(vec![2, 3, 3, 3], &mut rng);
    let p = probe.clone();
    entries.push(check_function("op.conv2d", &[x, w], move |t| {
        let mut tape = Tape::new();
        let x = tape.leaf(t[0].clone(), true);
        let w = tape.leaf(t[1].clone(), true);
        let y = tape.conv2d(x, w, 1, 1)?;
        let loss = tape.custom(Box::new(DotProbe(p.clone())), &[y])?;
        tape.backward(loss)?;
        Ok((
            tape.value(loss).scalar_value()?,
            vec![tape.grad(x).unwrap().clone(), tape.grad(w).unwrap().clone()],
        ))
    })?);

    let probe = rand_tensor(vec![2, 3, 2, 2], &mut rng);
    let x = rand_tensor(vec![2, 3, 2, 2], &mut rng);
    let gamma = rand_tensor(vec![3], &mut rng);
    let beta = rand_tensor(vec![3], &mut rng);
    let p = probe.clone();
    entries.push(check_function(
        "op.batch_norm.batch_stats",
        &[x.clone(), gamma.clone(), beta.clone()],
        move |t| {
            let mut tape = Tape::new();
            let x = tape.leaf(t[0].clone(), true);
            let g = tape.leaf(t[1].clone(), true);
            let b = tape.leaf(t[2].clone(), true);
            let y = tape.batch_norm(x, g, b, None, 1e-4)?;
            let loss = tape.custom(Box::new(DotProbe(p.clone())), &[y])?;
            tape.backward(loss)?;
            Ok((
                tape.value(loss).scalar_value()?,
                vec![
                    tape.grad(x).unwrap().clone(),
                    tape.grad(g).unwrap().clone(),
                    tape.grad(b).unwrap().clone(),
                ],
            ))
        },
    )?);

    let p = probe.clone();
    let mean = vec![0.2, -0.1, 0.05];
    let var = vec![1.5, 0.7, 2.2];
    entries.push(check_function(
        "op.batch_norm.given_stats",
        &[x, gamma, beta],
        move |t| {
            let mut tape = Tape::new();
            let x = tape.leaf(t[0].clone(), true);
            let g = tape.leaf(t[1].clone(), true);
            let b = tape.leaf(t[2].clone(), true);
            let y = tape.batch_norm(x, g, b, Some((mean.clone(), var.clone())), 1e-4)?;
            let loss = tape.custom(Box::new(DotProbe(p.clone())), &[y])?;
            tape.backward(loss)?;
            Ok((
                tape.value(loss).scalar_value()?,
                vec![
                    tape.grad(x).unwrap().clone(),
                    tape.grad(g).unwrap().clone(),
                    tape.grad(b).unwrap().clone(),
                ],
            ))
        },
    )?);

    let probe = rand_tensor(vec![3, 4], &mut rng);
    let x = rand_tensor(vec![3, 5], &mut rng);
    let w = rand_tensor(vec![4, 5], &mut rng);
    let b = rand_tensor(vec![4], &mut rng);
    let p = probe.clone();
    entries.push(check_function("op.linear", &[x, w, b], move |t| {
        let mut tape = Tape::new();
        let x = tape.leaf(t[0].clone(), true);
        let w = tape.leaf(t[1].clone(), true);
        let b = tape.leaf(t[2].clone(), true);
        let y = tape.linear(x, w, b)?;
        let loss = tape.custom(Box::new(DotProbe(p.clone())), &[y])?;
        tape.backward(loss)?;
        Ok((
            tape.value(loss).scalar_value()?,
            vec![
                tape.grad(x).unwrap().clone(),
                tape.grad(w).unwrap().clone(),
                tape.grad(b).unwrap().clone(),
            ],
        ))
    })?);

    // ReLU inputs are kept away from the kink, where the derivative is
    // genuinely discontinuous and finite differences cannot agree.
    let probe = rand_tensor(vec![8], &mut rng);
    let mut x = rand_tensor(vec![8], &mut rng);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v + 1e-12);
        }
    }
    let p = probe.clone();
    entries.push(check_function("op.relu", &[x], move |t| {
        let mut tape = Tape::new();
        let x = tape.leaf(t[0].clone(), true);
        let y = tape.relu(x);
        let loss = tape.custom(Box::new(DotProbe(p.clone())), &[y])?;
        tape.backward(loss)?;
        Ok((
            tape.value(loss).scalar_value()?,
            vec![tape.grad(x).unwrap().clone()],
        ))
    })?);

    let probe = rand_tensor(vec![6], &mut rng);
    let a = rand_tensor(vec![6], &mut rng);
    let b = rand_tensor(vec![6], &mut rng);
    let p = probe.clone();
    entries.push(check_function("op.add_scale", &[a, b], move |t| {
        let mut tape = Tape::new();
        let a = tape.leaf(t[0].clone(), true);
        let b = tape.leaf(t[1].clone(), true);
        let sb = tape.scale(b, -1.7);
        let y = tape.add(a, sb)?;
        let loss = tape.custom(Box::new(DotProbe(p.clone())), &[y])?;
        tape.backward(loss)?;
        Ok((
            tape.value(loss).scalar_value()?,
            vec![tape.grad(a).unwrap().clone(), tape.grad(b).unwrap().clone()],
        ))
    })?);

    let probe = rand_tensor(vec![2, 3], &mut rng);
    let x = rand_tensor(vec![2, 3, 3, 2], &mut rng);
    let p = probe.clone();
    entries.push(check_function("op.global_avg_pool", &[x], move |t| {
        let mut tape = Tape::new();
        let x = tape.leaf(t[0].clone(), true);
        let y = tape.global_avg_pool(x)?;
        let loss = tape.custom(Box::new(DotProbe(p.clone())), &[y])?;
        tape.backward(loss)?;
        Ok((
            tape.value(loss).scalar_value()?,
            vec![tape.grad(x).unwrap().clone()],
        ))
    })?);

    let x = rand_tensor(vec![3, 4], &mut rng);
    entries.push(check_function("op.cross_entropy", &[x], move |t| {
        let mut tape = Tape::new();
        let x = tape.leaf(t[0].clone(), true);
        let loss = cross_entropy_node(&mut tape, x, &[1, 3, 0])?;
        tape.backward(loss)?;
        Ok((
            tape.value(loss).scalar_value()?,
            vec![tape.grad(x).unwrap().clone()],
        ))
    })?);

    Ok(entries)
}

/// Full-model check: one scalar functional touching the backbone, the
/// projector, and the classifier head, with a handful of elements
/// sampled from every parameter tensor.
pub fn check_model_parameters(seed: u64) -> Result<Vec<CheckOutcome>> {
    let arch = ArchDescriptor::tiny();
    let mut model = Model::new(arch.clone(), seed)?;
    let mut rng = rng::substream(seed, "gradcheck-model");
    let n = 8usize;
    let input = {
        let data = (0..n * arch.input_size * arch.input_size)
            .map(|_| 0.3 * rng::gaussian(&mut rng))
            .collect();
        Tensor::new(vec![n, 1, arch.input_size, arch.input_size], data)?
    };
    let labels = vec![0usize, 1, 1, 0, 1, 0, 0, 1];
    let probe = {
        let data = (0..n * arch.projector_out)
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        Tensor::new(vec![n, arch.projector_out], data)?
    };

    // Loss = cross-entropy through the head + probe through the
    // projector, so every segment contributes gradient signal. Each
    // evaluation also reports the ReLU activation pattern: a central
    // difference is a derivative estimate only while the pattern is
    // constant across the window, so samples whose window crosses a
    // kink are discarded and redrawn. The analytic gradient needs no
    // such care; it uses the exact mask at the evaluation point.
    let eval = |model: &mut Model,
                want_grads: bool|
     -> Result<(f64, u64, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, &|_| true);
        let embed = model.backbone_forward(&mut tape, &binding, &input, BnMode::FrozenBatch)?;
        let proj = model.projector_forward(&mut tape, &binding, embed, BnMode::FrozenBatch)?;
        let logits = model.head_forward(&mut tape, &binding, embed)?;
        let ce = cross_entropy_node(&mut tape, logits, &labels)?;
        let pl = tape.custom(Box::new(DotProbe(probe.clone())), &[proj])?;
        let total = tape.add(ce, pl)?;
        let value = tape.value(total).scalar_value()?;
        let signature = tape.relu_mask_signature();
        if !want_grads {
            return Ok((value, signature, None));
        }
        tape.backward(total)?;
        let grads = model
            .grads(&tape, &binding)
            .into_iter()
            .map(|g| g.expect("all parameters trainable and reachable").clone())
            .collect();
        Ok((value, signature, Some(grads)))
    };

    let (_, base_signature, grads) = eval(&mut model, true)?;
    let grads = grads.expect("requested");

    let mut entries = Vec::new();
    for idx in 0..model.params().len() {
        let name = model.params().name_at(idx).to_string();
        let numel = model.params().tensor_at(idx).numel();
        let mut pick = rng::substream(seed, &format!("gradcheck-idx:{name}"));
        let target = numel.min(4);
        let mut used = Vec::new();
        let mut worst = 0.0f64;
        let mut samples = 0usize;
        let mut draws = 0usize;
        while samples < target && draws < 16 * target && used.len() < numel {
            draws += 1;
            let i = (pick.gen::<u64>() as usize) % numel;
            if used.contains(&i) {
                continue;
            }
            used.push(i);
            let original = model.params().tensor_at(idx).data()[i];
            // A window straddling a ReLU kink does not estimate the
            // derivative; halve the step until the activation pattern is
            // constant across it. Smaller steps only shrink the
            // truncation error, and the noise floor stays far below the
            // tolerance at the final step size.
            let mut accepted = None;
            let mut step = FD_STEP;
            for _ in 0..5 {
                model.params_mut().tensor_at_mut(idx).data_mut()[i] = original + step;
                let (plus, sig_plus, _) = eval(&mut model, false)?;
                model.params_mut().tensor_at_mut(idx).data_mut()[i] = original - step;
                let (minus, sig_minus, _) = eval(&mut model, false)?;
                model.params_mut().tensor_at_mut(idx).data_mut()[i] = original;
                if sig_plus == base_signature && sig_minus == base_signature {
                    accepted = Some((plus - minus) / (2.0 * step));
                    break;
                }
                step *= 0.5;
            }
            let Some(fd) = accepted else { continue };
            worst = worst.max(relative_error(grads[idx].data()[i], fd));
            samples += 1;
        }
        entries.push(CheckOutcome {
            name: format!("model.{name}"),
            samples,
            worst_err: worst,
            passed: samples > 0 && worst < REL_TOL,
        });
    }
    Ok(entries)
}

/// The complete suite: per-op checks plus the sampled whole-model check.
pub fn run_gradient_checks(seed: u64) -> Result<GradCheckReport> {
    let mut entries = check_layer_suite(seed)?;
    entries.extend(check_model_parameters(seed)?);
    Ok(GradCheckReport::from_entries(entries))
}
