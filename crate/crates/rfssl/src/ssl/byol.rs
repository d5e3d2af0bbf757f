//! Momentum-teacher objective: an online network is trained to predict
//! a slowly moving target network's projection of the other view.
//!
//! The target never receives gradient; after each optimizer step its
//! parameters and running statistics are pulled toward the online
//! network by an exponential moving average. A small two-layer MLP (the
//! predictor) sits on top of the online projector only; the asymmetry
//! is what keeps the objective from collapsing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::model::{ema_update, Binding, BnMode, Model, ParamSet};
use crate::nn::optim::Optimizer;
use crate::nn::{CustomOp, NodeId, Tape, Tensor};
use crate::rng;

pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_PREDICTOR_HIDDEN: usize = 512;

/// Alignment loss `2 - 2 * mean_i cos(p_i, q_i)` and its gradient with
/// respect to `p` only. Row pairs with the prediction in `p` and the
/// target projection in `q`.
pub fn cosine_alignment(p: &Tensor, q: &Tensor) -> Result<(f64, Tensor)> {
    if p.shape().len() != 2 || p.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "alignment expects equal [n, d] batches, got {:?} and {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let (n, d) = (p.shape()[0], p.shape()[1]);
    if n == 0 {
        return Err(Error::InvalidArgument("empty alignment batch".into()));
    }
    let mut loss = 2.0f64;
    let mut grad = vec![0.0f64; n * d];
    for i in 0..n {
        let prow = &p.data()[i * d..(i + 1) * d];
        let qrow = &q.data()[i * d..(i + 1) * d];
        let pn = prow.iter().map(|&v| v * v).sum::<f64>().sqrt();
        let qn = qrow.iter().map(|&v| v * v).sum::<f64>().sqrt();
        if pn == 0.0 || qn == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "zero-norm row {i} in alignment batch"
            )));
        }
        let inner: f64 = prow.iter().zip(qrow).map(|(&a, &b)| a * b).sum();
        let cos = inner / (pn * qn);
        loss -= 2.0 * cos / n as f64;
        // d cos / d p = (q_hat - cos * p_hat) / ||p||.
        let gscale = -2.0 / (n as f64 * pn);
        for (k, g) in grad[i * d..(i + 1) * d].iter_mut().enumerate() {
            *g = gscale * (qrow[k] / qn - cos * prow[k] / pn);
        }
    }
    Ok((loss, Tensor::new(vec![n, d], grad)?))
}

/// Tape op over `[prediction, target_projection]`. The target input
/// never receives a gradient, regardless of how it was produced.
#[derive(Debug)]
pub struct ByolAlignOp;

impl CustomOp for ByolAlignOp {
    fn name(&self) -> &'static str {
        "byol_alignment"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (loss, _) = cosine_alignment(inputs[0], inputs[1])?;
        Ok(Tensor::scalar(loss))
    }

    fn backward(&self, inputs: &[&Tensor], grad_out: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = grad_out.scalar_value()?;
        let (_, mut gp) = cosine_alignment(inputs[0], inputs[1])?;
        for v in gp.data_mut() {
            *v *= g;
        }
        Ok(vec![Some(gp), None])
    }
}

/// Attach the one-directional alignment loss to a tape.
pub fn byol_align_node(tape: &mut Tape, prediction: NodeId, target: NodeId) -> Result<NodeId> {
    tape.custom(Box::new(ByolAlignOp), &[prediction, target])
}

/// Symmetrized loss: the two view orderings are averaged, keeping the
/// magnitude comparable to a single direction.
pub fn byol_symmetric_node(
    tape: &mut Tape,
    prediction_a: NodeId,
    target_b: NodeId,
    prediction_b: NodeId,
    target_a: NodeId,
) -> Result<NodeId> {
    let ab = byol_align_node(tape, prediction_a, target_b)?;
    let ba = byol_align_node(tape, prediction_b, target_a)?;
    let sum = tape.add(ab, ba)?;
    Ok(tape.scale(sum, 0.5))
}

/// Two-layer MLP with batch norm in the hidden layer, mapping the
/// projection space onto itself. Owns its parameters and running
/// statistics; bound to a tape per step like the main model.
#[derive(Debug, Clone)]
pub struct Predictor {
    dim: usize,
    hidden: usize,
    params: ParamSet,
    buffers: BTreeMap<String, Vec<f64>>,
    bn_eps: f64,
    bn_momentum: f64,
}

impl Predictor {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument(format!(
                "predictor dims must be positive, got {dim} and {hidden}"
            )));
        }
        let mut params = ParamSet::default();
        let add_linear = |params: &mut ParamSet, prefix: &str, out: usize, inp: usize| {
            let std = (2.0 / inp as f64).sqrt();
            let wname = format!("{prefix}.weight");
            let mut rand = rng::substream(seed, &format!("init:{wname}"));
            let data = (0..out * inp)
                .map(|_| std * rng::gaussian(&mut rand))
                .collect();
            params.insert(&wname, Tensor::new(vec![out, inp], data)?)?;
            params.insert(&format!("{prefix}.bias"), Tensor::zeros(vec![out]))
        };
        add_linear(&mut params, "predictor.fc1", hidden, dim)?;
        params.insert(
            "predictor.bn.gamma",
            Tensor::new(vec![hidden], vec![1.0; hidden])?,
        )?;
        params.insert("predictor.bn.beta", Tensor::zeros(vec![hidden]))?;
        add_linear(&mut params, "predictor.fc2", dim, hidden)?;
        let mut buffers = BTreeMap::new();
        buffers.insert("predictor.bn.running_mean".to_string(), vec![0.0; hidden]);
        buffers.insert("predictor.bn.running_var".to_string(), vec![1.0; hidden]);
        Ok(Self {
            dim,
            hidden,
            params,
            buffers,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let ids = (0..self.params.len())
            .map(|i| tape.leaf(self.params.tensor_at(i).clone(), trainable))
            .collect();
        Binding::from_ids(ids)
    }

    fn node(&self, binding: &Binding, name: &str) -> NodeId {
        binding.id_at(self.params.position(name).expect("known predictor param"))
    }

    /// `[n, dim]` input to `[n, dim]` prediction.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        x: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let w1 = self.node(binding, "predictor.fc1.weight");
        let b1 = self.node(binding, "predictor.fc1.bias");
        let mut h = tape.linear(x, w1, b1)?;
        let gamma = self.node(binding, "predictor.bn.gamma");
        let beta = self.node(binding, "predictor.bn.beta");
        let given = match mode {
            BnMode::Eval => Some((
                self.buffers["predictor.bn.running_mean"].clone(),
                self.buffers["predictor.bn.running_var"].clone(),
            )),
            BnMode::Train | BnMode::FrozenBatch => None,
        };
        h = tape.batch_norm(h, gamma, beta, given, self.bn_eps)?;
        if mode == BnMode::Train {
            let (mean, var) = tape
                .bn_batch_stats(h)
                .expect("train-mode batch norm saves batch stats");
            let (mean, var) = (mean.to_vec(), var.to_vec());
            let mom = self.bn_momentum;
            for (key, fresh) in [
                ("predictor.bn.running_mean", mean),
                ("predictor.bn.running_var", var),
            ] {
                let running = self.buffers.get_mut(key).expect("buffer exists");
                for (r, b) in running.iter_mut().zip(&fresh) {
                    *r = (1.0 - mom) * *r + mom * b;
                }
            }
        }
        h = tape.relu(h);
        let w2 = self.node(binding, "predictor.fc2.weight");
        let b2 = self.node(binding, "predictor.fc2.bias");
        tape.linear(h, w2, b2)
    }

    pub fn grads<'t>(&self, tape: &'t Tape, binding: &Binding) -> Vec<Option<&'t Tensor>> {
        (0..self.params.len())
            .map(|i| tape.grad(binding.id_at(i)))
            .collect()
    }
}

/// One full training step: both views through the online network and
/// predictor, both views through the no-gradient target, symmetrized
/// alignment loss, optimizer steps for the online model and predictor,
/// then the EMA pull of the target toward the online weights.
#[allow(clippy::too_many_arguments)]
pub fn byol_step(
    online: &mut Model,
    target: &mut Model,
    predictor: &mut Predictor,
    online_opt: &mut Optimizer,
    predictor_opt: &mut Optimizer,
    view_a: &Tensor,
    view_b: &Tensor,
    lr: f64,
    ema_decay: f64,
) -> Result<f64> {
    if online.arch() != target.arch() {
        return Err(Error::InvalidArgument(
            "online and target networks have different architectures".into(),
        ));
    }
    if predictor.dim() != online.arch().projector_out {
        return Err(Error::InvalidArgument(format!(
            "predictor dim {} does not match projector output {}",
            predictor.dim(),
            online.arch().projector_out
        )));
    }
    if !(0.0..1.0).contains(&ema_decay) {
        return Err(Error::InvalidArgument(format!(
            "ema decay must be in [0, 1), got {ema_decay}"
        )));
    }

    let mut tape = Tape::new();
    let online_binding = online.bind(&mut tape, &|_| true);
    let target_binding = target.bind(&mut tape, &|_| false);
    let predictor_binding = predictor.bind(&mut tape, true);

    let predict = |online: &mut Model,
                       predictor: &mut Predictor,
                       tape: &mut Tape,
                       view: &Tensor|
     -> Result<NodeId> {
        let embed = online.backbone_forward(tape, &online_binding, view, BnMode::Train)?;
        let proj = online.projector_forward(tape, &online_binding, embed, BnMode::Train)?;
        predictor.forward(tape, &predictor_binding, proj, BnMode::Train)
    };
    let prediction_a = predict(online, predictor, &mut tape, view_a)?;
    let prediction_b = predict(online, predictor, &mut tape, view_b)?;

    let project = |target: &mut Model, tape: &mut Tape, view: &Tensor| -> Result<NodeId> {
        let embed = target.backbone_forward(tape, &target_binding, view, BnMode::FrozenBatch)?;
        target.projector_forward(tape, &target_binding, embed, BnMode::FrozenBatch)
    };
    let target_a = project(target, &mut tape, view_a)?;
    let target_b = project(target, &mut tape, view_b)?;

    let loss = byol_symmetric_node(&mut tape, prediction_a, target_b, prediction_b, target_a)?;
    let loss_value = tape.value(loss).scalar_value()?;
    if !loss_value.is_finite() {
        return Err(Error::Divergence(format!(
            "alignment loss became non-finite: {loss_value}"
        )));
    }
    tape.backward(loss)?;

    {
        let grads = online.grads(&tape, &online_binding);
        online_opt.step(online.params_mut(), &grads, lr)?;
    }
    {
        let grads = predictor.grads(&tape, &predictor_binding);
        predictor_opt.step(predictor.params_mut(), &grads, lr)?;
    }
    ema_update(target, online, ema_decay)?;
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ArchDescriptor;
    use rand::Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rand = rng::substream(seed, "byol-test");
        let data = (0..n * d).map(|_| rand.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn aligned_rows_give_zero_loss_and_opposed_rows_give_four() {
        let q = random_matrix(5, 4, 21);
        let (loss, _) = cosine_alignment(&q, &q).unwrap();
        assert!(loss.abs() < 1e-12);

        // Scale invariance in the prediction: still perfectly aligned.
        let mut scaled = q.clone();
        for v in scaled.data_mut() {
            *v *= 3.0;
        }
        let (loss, _) = cosine_alignment(&scaled, &q).unwrap();
        assert!(loss.abs() < 1e-12);

        let mut negated = q.clone();
        for v in negated.data_mut() {
            *v = -*v;
        }
        let (loss, _) = cosine_alignment(&negated, &q).unwrap();
        assert!((loss - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = random_matrix(4, 3, 22);
        let q = random_matrix(4, 3, 23);
        let (_, grad) = cosine_alignment(&p, &q).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            let mut plus = p.clone();
            plus.data_mut()[i] += h;
            let mut minus = p.clone();
            minus.data_mut()[i] -= h;
            let fd = (cosine_alignment(&plus, &q).unwrap().0
                - cosine_alignment(&minus, &q).unwrap().0)
                / (2.0 * h);
            let g = grad.data()[i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
            assert!(rel < 1e-5, "elem {i}: analytic {g} fd {fd}");
        }
    }

    #[test]
    fn target_input_never_receives_gradient() {
        let p = random_matrix(3, 4, 24);
        let q = random_matrix(3, 4, 25);
        let mut tape = Tape::new();
        // Even with a gradient-requesting target leaf, the op returns
        // no gradient for it.
        let pn = tape.leaf(p, true);
        let qn = tape.leaf(q, true);
        let loss = byol_align_node(&mut tape, pn, qn).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(pn).is_some());
        assert!(tape.grad(qn).is_none());
    }

    #[test]
    fn symmetric_node_averages_both_directions() {
        let p1 = random_matrix(4, 3, 26);
        let p2 = random_matrix(4, 3, 27);
        let q1 = random_matrix(4, 3, 28);
        let q2 = random_matrix(4, 3, 29);
        let mut tape = Tape::new();
        let (n1, n2) = (tape.leaf(p1.clone(), true), tape.leaf(p2.clone(), true));
        let (m1, m2) = (tape.leaf(q1.clone(), false), tape.leaf(q2.clone(), false));
        let loss = byol_symmetric_node(&mut tape, n1, m2, n2, m1).unwrap();
        let expected = 0.5
            * (cosine_alignment(&p1, &q2).unwrap().0 + cosine_alignment(&p2, &q1).unwrap().0);
        assert!((tape.value(loss).scalar_value().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let p = random_matrix(2, 2, 30);
        let zero = Tensor::zeros(vec![2, 2]);
        assert!(cosine_alignment(&p, &zero).is_err());
        let mismatched = random_matrix(3, 2, 31);
        assert!(cosine_alignment(&p, &mismatched).is_err());
    }

    #[test]
    fn predictor_structure_and_gradient_flow() {
        let predictor = Predictor::new(128, 512, 7).unwrap();
        // fc1 512x128 + 512, bn 2x512, fc2 128x512 + 128.
        assert_eq!(predictor.param_count(), 132_736);
        assert_eq!(
            Predictor::new(128, 512, 7).unwrap().params().tensor_at(0),
            predictor.params().tensor_at(0)
        );

        let mut small = Predictor::new(6, 9, 8).unwrap();
        let x = random_matrix(5, 6, 32);
        let mut tape = Tape::new();
        let binding = small.bind(&mut tape, true);
        let xn = tape.leaf(x, false);
        let y = small
            .forward(&mut tape, &binding, xn, BnMode::Train)
            .unwrap();
        assert_eq!(tape.value(y).shape(), [5, 6]);
        // Train mode moved the running statistics off their defaults.
        assert!(small.buffers["predictor.bn.running_mean"]
            .iter()
            .any(|&v| v != 0.0));

        let probe = crate::nn::gradcheck::DotProbe(random_matrix(5, 6, 33));
        let loss = tape.custom(Box::new(probe), &[y]).unwrap();
        tape.backward(loss).unwrap();
        let grads = small.grads(&tape, &binding);
        assert!(grads.iter().all(|g| g.is_some()));
    }

    #[test]
    fn ema_follows_geometric_decay_closed_form() {
        let arch = ArchDescriptor::tiny();
        let online = Model::new(arch.clone(), 41).unwrap();
        let mut target = Model::new(arch, 42).unwrap();
        let initial = target.params().tensor_at(3).clone();
        let online_vals = online.params().tensor_at(3).clone();
        let k = 5;
        for _ in 0..k {
            ema_update(&mut target, &online, 0.99).unwrap();
        }
        let factor = 0.99f64.powi(k);
        for ((&t, &q), &p) in target
            .params()
            .tensor_at(3)
            .data()
            .iter()
            .zip(initial.data())
            .zip(online_vals.data())
        {
            let expected = p + factor * (q - p);
            assert!((t - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn full_step_trains_online_and_pulls_target() {
        let arch = ArchDescriptor::tiny();
        let mut online = Model::new(arch.clone(), 50).unwrap();
        let mut target = Model::new(arch.clone(), 51).unwrap();
        let mut predictor =
            Predictor::new(arch.projector_out, DEFAULT_PREDICTOR_HIDDEN, 52).unwrap();
        let mut online_opt = Optimizer::new("adam", online.params(), 0.0).unwrap();
        let mut predictor_opt = Optimizer::new("adam", predictor.params(), 0.0).unwrap();

        let mut rand = rng::substream(53, "byol-step-views");
        let mut view = || {
            let data = (0..2 * 32 * 32).map(|_| rng::gaussian(&mut rand)).collect();
            Tensor::new(vec![2, 1, 32, 32], data).unwrap()
        };
        let (va, vb) = (view(), view());

        let online_before = online.params().tensor_at(0).clone();
        let target_before = target.params().tensor_at(0).clone();
        let loss = byol_step(
            &mut online,
            &mut target,
            &mut predictor,
            &mut online_opt,
            &mut predictor_opt,
            &va,
            &vb,
            1e-3,
            DEFAULT_EMA_DECAY,
        )
        .unwrap();
        assert!(loss.is_finite() && loss > 0.0 && loss < 4.0);
        assert_ne!(online.params().tensor_at(0).data(), online_before.data());
        assert_ne!(target.params().tensor_at(0).data(), target_before.data());

        // The target moved strictly between its old value and the
        // online value (it is their convex combination).
        let t = target.params().tensor_at(0).data()[0];
        let q = target_before.data()[0];
        let p = online.params().tensor_at(0).data()[0];
        assert!((t - q) * (t - p) < 0.0, "t {t} not between q {q} and p {p}");

        let mut wrong_arch = ArchDescriptor::tiny();
        wrong_arch.num_classes = 3;
        let mut mismatched = Model::new(wrong_arch, 54).unwrap();
        assert!(byol_step(
            &mut online,
            &mut mismatched,
            &mut predictor,
            &mut online_opt,
            &mut predictor_opt,
            &va,
            &vb,
            1e-3,
            DEFAULT_EMA_DECAY,
        )
        .is_err());
    }
}
