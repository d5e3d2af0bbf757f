//! The patch encoder: a small residual convolutional backbone with a
//! projection head for self-supervised pretraining and a linear
//! classifier head for finetuning.
//!
//! Parameters live in a [`ParamSet`] keyed by hierarchical names
//! (`backbone.*`, `projector.*`, `head.*`), so optimizers, checkpoints,
//! and momentum copies all address them uniformly. Batch-norm running
//! statistics are buffers, not parameters: they are updated in place
//! during training-mode forwards and consumed verbatim in eval mode.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::autodiff::{NodeId, Tape};
use crate::nn::tensor::Tensor;
use crate::rng;

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const PROJECTOR_PREFIX: &str = "projector.";
pub const HEAD_PREFIX: &str = "head.";

/// Structural hyperparameters of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub input_size: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub num_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ArchDescriptor {
    /// Default configuration used throughout: small enough to pretrain on
    /// a CPU in minutes while keeping the residual structure intact.
    pub fn tiny() -> Self {
        Self {
            input_size: 32,
            stem_kernel: 5,
            stem_stride: 2,
            stage_channels: vec![8, 16, 32],
            stage_blocks: vec![1, 1, 1],
            projector_hidden: 512,
            projector_out: 128,
            num_classes: 2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Full-size configuration matching the published millions-of-weights
    /// encoder. Constructible and trainable through the same code paths,
    /// but far too slow for the test suite's end-to-end runs.
    pub fn paper_scale() -> Self {
        Self {
            input_size: 32,
            stem_kernel: 5,
            stem_stride: 2,
            stage_channels: vec![64, 128, 256],
            stage_blocks: vec![3, 4, 4],
            projector_hidden: 512,
            projector_out: 128,
            num_classes: 2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn embed_dim(&self) -> usize {
        *self.stage_channels.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_blocks.len() {
            return Err(Error::Config(format!(
                "stage_channels ({}) and stage_blocks ({}) must be equal-length and non-empty",
                self.stage_channels.len(),
                self.stage_blocks.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.stage_blocks.iter().any(|&b| b == 0)
        {
            return Err(Error::Config("zero-size stage".into()));
        }
        if self.input_size == 0 || self.stem_kernel == 0 || self.stem_stride == 0 {
            return Err(Error::Config("stem dimensions must be positive".into()));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::Config("stem kernel must be odd".into()));
        }
        if self.projector_hidden == 0 || self.projector_out == 0 || self.num_classes < 2 {
            return Err(Error::Config("head dimensions too small".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bad batch-norm constants".into()));
        }
        // Every stage past the first halves the grid; the stem halves once.
        let mut size = (self.input_size + 2 * (self.stem_kernel / 2) - self.stem_kernel)
            / self.stem_stride
            + 1;
        for _ in 1..self.stage_channels.len() {
            if size < 2 {
                return Err(Error::Config(format!(
                    "input_size {} too small for {} downsampling stages",
                    self.input_size,
                    self.stage_channels.len()
                )));
            }
            size = (size + 2 - 3) / 2 + 1;
        }
        Ok(())
    }
}

/// Ordered, name-indexed collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor_at(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// How batch-norm layers treat statistics during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running buffers are updated.
    Train,
    /// Stored running statistics; nothing is updated.
    Eval,
    /// Batch statistics without touching the buffers. Used for momentum
    /// target networks and for finite-difference checking, where a
    /// forward pass must not mutate state.
    FrozenBatch,
}

/// Tape handles for one binding of the parameters, aligned with the
/// owning [`ParamSet`]. Clone-free and cheap to pass around.
#[derive(Debug, Clone)]
pub struct Binding {
    ids: Vec<NodeId>,
}

impl Binding {
    pub(crate) fn from_ids(ids: Vec<NodeId>) -> Self {
        Self { ids }
    }

    pub fn id_at(&self, idx: usize) -> NodeId {
        self.ids[idx]
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: ArchDescriptor,
    params: ParamSet,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl Model {
    /// Build a model with He-style initialization. Every tensor draws
    /// from its own named substream, so the initialization of one layer
    /// is independent of the presence of others.
    pub fn new(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut model = Self {
            arch,
            params: ParamSet::default(),
            buffers: BTreeMap::new(),
        };
        let arch = model.arch.clone();

        let c0 = arch.stage_channels[0];
        model.add_conv(
            "backbone.stem.conv.weight",
            c0,
            1,
            arch.stem_kernel,
            seed,
        )?;
        model.add_bn("backbone.stem.bn", c0)?;

        let mut cin = c0;
        for (si, (&cout, &blocks)) in arch
            .stage_channels
            .iter()
            .zip(&arch.stage_blocks)
            .enumerate()
        {
            for bi in 0..blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let p = format!("backbone.stage{si}.block{bi}");
                model.add_conv(&format!("{p}.conv1.weight"), cout, cin, 3, seed)?;
                model.add_bn(&format!("{p}.bn1"), cout)?;
                model.add_conv(&format!("{p}.conv2.weight"), cout, cout, 3, seed)?;
                model.add_bn(&format!("{p}.bn2"), cout)?;
                if stride != 1 || cin != cout {
                    model.add_conv(&format!("{p}.down.conv.weight"), cout, cin, 1, seed)?;
                    model.add_bn(&format!("{p}.down.bn"), cout)?;
                }
                cin = cout;
            }
        }
        model.add_bn("backbone.final_bn", cin)?;

        model.add_linear("projector.fc1", arch.projector_hidden, cin, seed)?;
        model.add_bn("projector.bn", arch.projector_hidden)?;
        model.add_linear(
            "projector.fc2",
            arch.projector_out,
            arch.projector_hidden,
            seed,
        )?;

        model.add_linear("head.fc", arch.num_classes, cin, seed)?;
        Ok(model)
    }

    fn add_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, seed: u64) -> Result<()> {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut rng = rng::substream(seed, &format!("init:{name}"));
        let data = (0..cout * cin * k * k)
            .map(|_| std * rng::gaussian(&mut rng))
            .collect();
        self.params
            .insert(name, Tensor::new(vec![cout, cin, k, k], data)?)
    }

    fn add_linear(&mut self, prefix: &str, out: usize, inp: usize, seed: u64) -> Result<()> {
        let std = (2.0 / inp as f64).sqrt();
        let wname = format!("{prefix}.weight");
        let mut rng = rng::substream(seed, &format!("init:{wname}"));
        let data = (0..out * inp).map(|_| std * rng::gaussian(&mut rng)).collect();
        self.params.insert(&wname, Tensor::new(vec![out, inp], data)?)?;
        self.params
            .insert(&format!("{prefix}.bias"), Tensor::zeros(vec![out]))
    }

    fn add_bn(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.params.insert(
            &format!("{prefix}.gamma"),
            Tensor::new(vec![c], vec![1.0; c])?,
        )?;
        self.params
            .insert(&format!("{prefix}.beta"), Tensor::zeros(vec![c]))?;
        self.buffers
            .insert(format!("{prefix}.running_mean"), vec![0.0; c]);
        self.buffers
            .insert(format!("{prefix}.running_var"), vec![1.0; c]);
        Ok(())
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BTreeMap<String, Vec<f64>> {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Insert every parameter into the tape as a leaf. Calling forward
    /// twice against one binding reuses the same leaves, so gradients
    /// from both passes accumulate, which is weight sharing across views.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Binding {
        let ids = self
            .params
            .iter()
            .map(|(name, tensor)| tape.leaf(tensor.clone(), trainable(name)))
            .collect();
        Binding { ids }
    }

    fn node(&self, binding: &Binding, name: &str) -> NodeId {
        let idx = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("parameter {name} missing; model and binding disagree"));
        binding.ids[idx]
    }

    fn bn_forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        x: NodeId,
        prefix: &str,
        mode: BnMode,
    ) -> Result<NodeId> {
        let gamma = self.node(binding, &format!("{prefix}.gamma"));
        let beta = self.node(binding, &format!("{prefix}.beta"));
        let given = match mode {
            BnMode::Eval => {
                let mean = self.buffers[&format!("{prefix}.running_mean")].clone();
                let var = self.buffers[&format!("{prefix}.running_var")].clone();
                Some((mean, var))
            }
            BnMode::Train | BnMode::FrozenBatch => None,
        };
        let y = tape.batch_norm(x, gamma, beta, given, self.arch.bn_eps)?;
        if mode == BnMode::Train {
            let (mean, var) = tape
                .bn_batch_stats(y)
                .expect("train-mode batch norm saves batch stats");
            let (mean, var) = (mean.to_vec(), var.to_vec());
            let mom = self.arch.bn_momentum;
            let rm = self
                .buffers
                .get_mut(&format!("{prefix}.running_mean"))
                .expect("buffer exists");
            for (r, b) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - mom) * *r + mom * b;
            }
            let rv = self
                .buffers
                .get_mut(&format!("{prefix}.running_var"))
                .expect("buffer exists");
            for (r, b) in rv.iter_mut().zip(&var) {
                *r = (1.0 - mom) * *r + mom * b;
            }
        }
        Ok(y)
    }

    /// Encode a batch of patches `[n, 1, s, s]` into embeddings
    /// `[n, embed_dim]`.
    pub fn backbone_forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        input: &Tensor,
        mode: BnMode,
    ) -> Result<NodeId> {
        let s = self.arch.input_size;
        if input.shape() != [input.shape()[0], 1, s, s] || input.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "backbone expects [n, 1, {s}, {s}] with n > 0, got {:?}",
                input.shape()
            )));
        }
        if !input.all_finite() {
            return Err(Error::NonFinite("backbone input".into()));
        }
        let x = tape.leaf(input.clone(), false);
        let w = self.node(binding, "backbone.stem.conv.weight");
        let mut h = tape.conv2d(x, w, self.arch.stem_stride, self.arch.stem_kernel / 2)?;
        h = self.bn_forward(tape, binding, h, "backbone.stem.bn", mode)?;
        h = tape.relu(h);

        let stages = self.arch.stage_channels.len();
        let blocks = self.arch.stage_blocks.clone();
        let channels = self.arch.stage_channels.clone();
        let mut cin = channels[0];
        for si in 0..stages {
            for bi in 0..blocks[si] {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let cout = channels[si];
                let p = format!("backbone.stage{si}.block{bi}");
                let w1 = self.node(binding, &format!("{p}.conv1.weight"));
                let mut b = tape.conv2d(h, w1, stride, 1)?;
                b = self.bn_forward(tape, binding, b, &format!("{p}.bn1"), mode)?;
                b = tape.relu(b);
                let w2 = self.node(binding, &format!("{p}.conv2.weight"));
                b = tape.conv2d(b, w2, 1, 1)?;
                b = self.bn_forward(tape, binding, b, &format!("{p}.bn2"), mode)?;
                let shortcut = if stride != 1 || cin != cout {
                    let wd = self.node(binding, &format!("{p}.down.conv.weight"));
                    let sc = tape.conv2d(h, wd, stride, 0)?;
                    self.bn_forward(tape, binding, sc, &format!("{p}.down.bn"), mode)?
                } else {
                    h
                };
                h = tape.add(b, shortcut)?;
                h = tape.relu(h);
                cin = cout;
            }
        }
        h = self.bn_forward(tape, binding, h, "backbone.final_bn", mode)?;
        h = tape.relu(h);
        tape.global_avg_pool(h)
    }

    /// Map embeddings `[n, embed_dim]` to projections `[n, projector_out]`.
    pub fn projector_forward(
        &mut self,
        tape: &mut Tape,
        binding: &Binding,
        embed: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let w1 = self.node(binding, "projector.fc1.weight");
        let b1 = self.node(binding, "projector.fc1.bias");
        let mut h = tape.linear(embed, w1, b1)?;
        h = self.bn_forward(tape, binding, h, "projector.bn", mode)?;
        h = tape.relu(h);
        let w2 = self.node(binding, "projector.fc2.weight");
        let b2 = self.node(binding, "projector.fc2.bias");
        tape.linear(h, w2, b2)
    }

    /// Map embeddings `[n, embed_dim]` to class logits `[n, num_classes]`.
    pub fn head_forward(&self, tape: &mut Tape, binding: &Binding, embed: NodeId) -> Result<NodeId> {
        let w = self.node(binding, "head.fc.weight");
        let b = self.node(binding, "head.fc.bias");
        tape.linear(embed, w, b)
    }

    /// Parameter gradients from the tape after `backward`, aligned with
    /// [`Model::params`] order; `None` where no gradient flowed.
    pub fn grads<'t>(&self, tape: &'t Tape, binding: &Binding) -> Vec<Option<&'t Tensor>> {
        binding.ids.iter().map(|&id| tape.grad(id)).collect()
    }
}

/// Exponential moving average of `online` into `target`, covering both
/// parameters and running-statistic buffers:
/// `target = decay * target + (1 - decay) * online`.
pub fn ema_update(target: &mut Model, online: &Model, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!(
            "ema decay must be in [0, 1], got {decay}"
        )));
    }
    if target.arch != online.arch {
        return Err(Error::InvalidArgument(
            "ema models have different architectures".into(),
        ));
    }
    for idx in 0..online.params.len() {
        let name = online.params.name_at(idx).to_string();
        let src = online.params.tensor_at(idx).clone();
        let t_idx = target
            .params
            .position(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("ema target missing {name}")))?;
        let dst = target.params.tensor_at_mut(t_idx);
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = decay * *d + (1.0 - decay) * s;
        }
    }
    for (name, src) in online.buffers.iter() {
        let dst = target
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("ema target missing buffer {name}")))?;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = decay * *d + (1.0 - decay) * s;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::autodiff::CustomOp;

    fn input_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = rng::substream(seed, "model-test-input");
        let data = (0..n * 32 * 32).map(|_| rng::gaussian(&mut rng) * 0.3).collect();
        Tensor::new(vec![n, 1, 32, 32], data).unwrap()
    }

    #[derive(Debug)]
    struct SumAll;
    impl CustomOp for SumAll {
        fn name(&self) -> &'static str {
            "sum_all"
        }
        fn forward(&self, inputs: &[&Tensor]) -> crate::error::Result<Tensor> {
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        fn backward(
            &self,
            inputs: &[&Tensor],
            grad_out: &Tensor,
        ) -> crate::error::Result<Vec<Option<Tensor>>> {
            let s = grad_out.scalar_value()?;
            Ok(vec![Some(Tensor::new(
                inputs[0].shape().to_vec(),
                vec![s; inputs[0].numel()],
            )?)])
        }
    }

    #[test]
    fn tiny_parameter_count_is_exact() {
        let model = Model::new(ArchDescriptor::tiny(), 0).unwrap();
        // stem 200+16, stage0 1184, stage1 3680, stage2 14528, final bn 64,
        // projector 83584, head 66.
        assert_eq!(model.param_count(), 103_322);
        assert_eq!(model.arch().embed_dim(), 32);
    }

    #[test]
    fn paper_scale_constructs_with_millions_of_parameters() {
        let model = Model::new(ArchDescriptor::paper_scale(), 0).unwrap();
        let count = model.param_count();
        assert!(
            (4_000_000..12_000_000).contains(&count),
            "unexpected size {count}"
        );
    }

    #[test]
    fn initialization_is_seeded() {
        let a = Model::new(ArchDescriptor::tiny(), 11).unwrap();
        let b = Model::new(ArchDescriptor::tiny(), 11).unwrap();
        let c = Model::new(ArchDescriptor::tiny(), 12).unwrap();
        let flat = |m: &Model| -> Vec<u64> {
            m.params()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn forward_shapes_and_modes() {
        let mut model = Model::new(ArchDescriptor::tiny(), 3).unwrap();
        let x = input_batch(3, 5);

        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, &|_| true);
        let embed = model
            .backbone_forward(&mut tape, &binding, &x, BnMode::Train)
            .unwrap();
        assert_eq!(tape.value(embed).shape(), &[3, 32]);
        let proj = model
            .projector_forward(&mut tape, &binding, embed, BnMode::Train)
            .unwrap();
        assert_eq!(tape.value(proj).shape(), &[3, 128]);
        let logits = model.head_forward(&mut tape, &binding, embed).unwrap();
        assert_eq!(tape.value(logits).shape(), &[3, 2]);

        // Train mode moved the running statistics off their init values.
        let rm = &model.buffers()["backbone.stem.bn.running_mean"];
        assert!(rm.iter().any(|&v| v != 0.0));

        // FrozenBatch must not touch buffers.
        let snapshot = model.buffers().clone();
        let mut tape2 = Tape::new();
        let b2 = model.bind(&mut tape2, &|_| true);
        model
            .backbone_forward(&mut tape2, &b2, &x, BnMode::FrozenBatch)
            .unwrap();
        assert_eq!(&snapshot, model.buffers());

        // Eval mode is deterministic given fixed buffers.
        let run_eval = |model: &mut Model| -> Vec<u64> {
            let mut t = Tape::new();
            let b = model.bind(&mut t, &|_| true);
            let e = model
                .backbone_forward(&mut t, &b, &x, BnMode::Eval)
                .unwrap();
            t.value(e).data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run_eval(&mut model), run_eval(&mut model));
    }

    #[test]
    fn shared_binding_accumulates_across_views() {
        let mut model = Model::new(ArchDescriptor::tiny(), 7).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, &|_| true);
        let e1 = model
            .backbone_forward(&mut tape, &binding, &input_batch(2, 21), BnMode::FrozenBatch)
            .unwrap();
        let e2 = model
            .backbone_forward(&mut tape, &binding, &input_batch(2, 22), BnMode::FrozenBatch)
            .unwrap();
        let both = tape.add(e1, e2).unwrap();
        let loss = tape.custom(Box::new(SumAll), &[both]).unwrap();
        tape.backward(loss).unwrap();
        let grads = model.grads(&tape, &binding);
        let have: usize = grads.iter().filter(|g| g.is_some()).count();
        // Every backbone parameter gets a gradient; projector and head are
        // unused in this graph.
        let backbone: usize = model
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with(BACKBONE_PREFIX))
            .count();
        assert_eq!(have, backbone);
    }

    #[test]
    fn trainable_predicate_freezes_segments() {
        let mut model = Model::new(ArchDescriptor::tiny(), 9).unwrap();
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, &|name: &str| name.starts_with(HEAD_PREFIX));
        let embed = model
            .backbone_forward(&mut tape, &binding, &input_batch(2, 31), BnMode::FrozenBatch)
            .unwrap();
        let logits = model.head_forward(&mut tape, &binding, embed).unwrap();
        let loss = tape.custom(Box::new(SumAll), &[logits]).unwrap();
        tape.backward(loss).unwrap();
        for (idx, (name, _)) in model.params().iter().enumerate() {
            let g = tape.grad(binding.id_at(idx));
            if name.starts_with(HEAD_PREFIX) {
                assert!(g.is_some(), "{name} should have a gradient");
            } else {
                assert!(g.is_none(), "{name} should be frozen");
            }
        }
    }

    #[test]
    fn ema_with_zero_decay_copies_online() {
        let online = Model::new(ArchDescriptor::tiny(), 41).unwrap();
        let mut target = Model::new(ArchDescriptor::tiny(), 42).unwrap();
        ema_update(&mut target, &online, 0.0).unwrap();
        for (name, t) in online.params().iter() {
            assert_eq!(t.data(), target.params().get(name).unwrap().data(), "{name}");
        }
        for (name, buf) in online.buffers() {
            assert_eq!(buf, &target.buffers()[name], "{name}");
        }
    }

    #[test]
    fn rejects_bad_architectures() {
        let mut arch = ArchDescriptor::tiny();
        arch.stage_blocks = vec![1, 1];
        assert!(Model::new(arch, 0).is_err());

        let mut arch = ArchDescriptor::tiny();
        arch.input_size = 4;
        assert!(Model::new(arch, 0).is_err());

        let model = Model::new(ArchDescriptor::tiny(), 0).unwrap();
        let mut model = model;
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, &|_| true);
        let bad = Tensor::zeros(vec![1, 2, 32, 32]);
        assert!(model
            .backbone_forward(&mut tape, &binding, &bad, BnMode::Train)
            .is_err());
    }
}
