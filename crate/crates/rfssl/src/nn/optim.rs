//! Optimizers operating on a [`ParamSet`] with gradients aligned by index.
//!
//! Both optimizers skip parameters whose gradient slot is `None`, so
//! frozen segments cost nothing and keep their state at zero. State is
//! exportable by parameter name for checkpointing.

use crate::error::{Error, Result};
use crate::nn::model::ParamSet;
use crate::nn::tensor::Tensor;

/// Serializable optimizer state: named flat vectors plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub kind: String,
    pub step: u64,
    pub vectors: Vec<(String, Vec<f64>)>,
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: (0..params.len()).map(|i| vec![0.0; params.tensor_at(i).numel()]).collect(),
            v: (0..params.len()).map(|i| vec![0.0; params.tensor_at(i).numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
        check_alignment(params, grads, self.m.len())?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if !g.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for {}",
                    params.name_at(idx)
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let w = params.tensor_at_mut(idx).data_mut();
            for ((wi, (mi, vi)), &gi) in w.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *wi);
            }
        }
        Ok(())
    }

    pub fn export(&self, params: &ParamSet) -> OptimizerSnapshot {
        let mut vectors = Vec::new();
        for idx in 0..self.m.len() {
            vectors.push((format!("m:{}", params.name_at(idx)), self.m[idx].clone()));
            vectors.push((format!("v:{}", params.name_at(idx)), self.v[idx].clone()));
        }
        OptimizerSnapshot {
            kind: "adam".into(),
            step: self.step,
            vectors,
        }
    }

    pub fn import(&mut self, params: &ParamSet, snapshot: &OptimizerSnapshot) -> Result<()> {
        if snapshot.kind != "adam" {
            return Err(Error::Format(format!(
                "optimizer snapshot is {}, expected adam",
                snapshot.kind
            )));
        }
        self.step = snapshot.step;
        import_named(params, &snapshot.vectors, "m:", &mut self.m)?;
        import_named(params, &snapshot.vectors, "v:", &mut self.v)
    }
}

/// Layer-wise normalized momentum optimizer: the second moment is a
/// scalar per tensor, the normalized gradient gets weight decay added,
/// and momentum accumulates without dampening. The first step seeds the
/// moments directly, making the initial update invariant to gradient
/// scale.
#[derive(Debug, Clone)]
pub struct NovoGrad {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    initialized: Vec<bool>,
    m: Vec<Vec<f64>>,
    v: Vec<f64>,
}

impl NovoGrad {
    pub fn new(params: &ParamSet, weight_decay: f64) -> Self {
        Self {
            beta1: 0.95,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay,
            step: 0,
            initialized: vec![false; params.len()],
            m: (0..params.len()).map(|i| vec![0.0; params.tensor_at(i).numel()]).collect(),
            v: vec![0.0; params.len()],
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
        check_alignment(params, grads, self.m.len())?;
        self.step += 1;
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if !g.all_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient for {}",
                    params.name_at(idx)
                )));
            }
            let norm_sq: f64 = g.data().iter().map(|v| v * v).sum();
            if self.initialized[idx] {
                self.v[idx] = self.beta2 * self.v[idx] + (1.0 - self.beta2) * norm_sq;
            } else {
                self.v[idx] = norm_sq;
            }
            let denom = self.v[idx].sqrt() + self.eps;
            let m = &mut self.m[idx];
            let w = params.tensor_at_mut(idx).data_mut();
            if self.initialized[idx] {
                for ((wi, mi), &gi) in w.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                    let ghat = gi / denom + self.weight_decay * *wi;
                    *mi = self.beta1 * *mi + ghat;
                    *wi -= lr * *mi;
                }
            } else {
                for ((wi, mi), &gi) in w.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                    *mi = gi / denom + self.weight_decay * *wi;
                    *wi -= lr * *mi;
                }
                self.initialized[idx] = true;
            }
        }
        Ok(())
    }

    pub fn export(&self, params: &ParamSet) -> OptimizerSnapshot {
        let mut vectors = Vec::new();
        for idx in 0..self.m.len() {
            vectors.push((format!("m:{}", params.name_at(idx)), self.m[idx].clone()));
            vectors.push((
                format!("v:{}", params.name_at(idx)),
                vec![self.v[idx], if self.initialized[idx] { 1.0 } else { 0.0 }],
            ));
        }
        OptimizerSnapshot {
            kind: "novograd".into(),
            step: self.step,
            vectors,
        }
    }

    pub fn import(&mut self, params: &ParamSet, snapshot: &OptimizerSnapshot) -> Result<()> {
        if snapshot.kind != "novograd" {
            return Err(Error::Format(format!(
                "optimizer snapshot is {}, expected novograd",
                snapshot.kind
            )));
        }
        self.step = snapshot.step;
        import_named(params, &snapshot.vectors, "m:", &mut self.m)?;
        for idx in 0..params.len() {
            let key = format!("v:{}", params.name_at(idx));
            let vec = snapshot
                .vectors
                .iter()
                .find(|(k, _)| k == &key)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Format(format!("optimizer snapshot missing {key}")))?;
            if vec.len() != 2 {
                return Err(Error::Format(format!("bad scalar slot for {key}")));
            }
            self.v[idx] = vec[0];
            self.initialized[idx] = vec[1] != 0.0;
        }
        Ok(())
    }
}

fn check_alignment(params: &ParamSet, grads: &[Option<&Tensor>], slots: usize) -> Result<()> {
    if params.len() != grads.len() || params.len() != slots {
        return Err(Error::Shape(format!(
            "optimizer saw {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            slots
        )));
    }
    Ok(())
}

fn import_named(
    params: &ParamSet,
    vectors: &[(String, Vec<f64>)],
    prefix: &str,
    dest: &mut [Vec<f64>],
) -> Result<()> {
    for idx in 0..params.len() {
        let key = format!("{prefix}{}", params.name_at(idx));
        let vec = vectors
            .iter()
            .find(|(k, _)| k == &key)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Format(format!("optimizer snapshot missing {key}")))?;
        if vec.len() != dest[idx].len() {
            return Err(Error::Format(format!(
                "optimizer slot {key} has {} values, parameter wants {}",
                vec.len(),
                dest[idx].len()
            )));
        }
        dest[idx].copy_from_slice(vec);
    }
    Ok(())
}

/// Either optimizer kind behind one interface, selected by name so
/// training code can switch via configuration.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    NovoGrad(NovoGrad),
}

impl Optimizer {
    pub fn new(kind: &str, params: &ParamSet, weight_decay: f64) -> Result<Self> {
        match kind {
            "adam" => Ok(Self::Adam(Adam::new(params, weight_decay))),
            "novograd" => Ok(Self::NovoGrad(NovoGrad::new(params, weight_decay))),
            other => Err(Error::Config(format!(
                "unknown optimizer kind {other:?}, expected \"adam\" or \"novograd\""
            ))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Adam(_) => "adam",
            Self::NovoGrad(_) => "novograd",
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<&Tensor>],
        lr: f64,
    ) -> Result<()> {
        match self {
            Self::Adam(o) => o.step(params, grads, lr),
            Self::NovoGrad(o) => o.step(params, grads, lr),
        }
    }

    pub fn export(&self, params: &ParamSet) -> OptimizerSnapshot {
        match self {
            Self::Adam(o) => o.export(params),
            Self::NovoGrad(o) => o.export(params),
        }
    }

    /// Rebuild from a snapshot, inferring the kind from its tag.
    pub fn from_snapshot(
        snapshot: &OptimizerSnapshot,
        params: &ParamSet,
        weight_decay: f64,
    ) -> Result<Self> {
        let mut opt = Self::new(&snapshot.kind, params, weight_decay)?;
        match &mut opt {
            Self::Adam(o) => o.import(params, snapshot)?,
            Self::NovoGrad(o) => o.import(params, snapshot)?,
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: Vec<f64>) -> ParamSet {
        let mut p = ParamSet::default();
        let n = values.len();
        p.insert("w", Tensor::new(vec![n], values).unwrap()).unwrap();
        p
    }

    #[test]
    fn adam_first_step_magnitude_is_scale_free() {
        for scale in [1.0, 1e6] {
            let mut params = one_param(vec![0.0]);
            let mut opt = Adam::new(&params, 0.0);
            let g = Tensor::new(vec![1], vec![scale]).unwrap();
            opt.step(&mut params, &[Some(&g)], 0.01).unwrap();
            let w = params.tensor_at(0).data()[0];
            // Bias correction makes the first update exactly lr / (1 + eps')
            // in magnitude, whatever the gradient size.
            assert!((w + 0.01).abs() < 1e-6, "scale {scale}: {w}");
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = one_param(vec![3.0, -2.0]);
        let mut opt = Adam::new(&params, 0.0);
        for _ in 0..500 {
            let w = params.tensor_at(0).data().to_vec();
            let g = Tensor::new(vec![2], w.iter().map(|v| 2.0 * v).collect()).unwrap();
            opt.step(&mut params, &[Some(&g)], 0.05).unwrap();
        }
        for &w in params.tensor_at(0).data() {
            assert!(w.abs() < 1e-2, "did not converge: {w}");
        }
    }

    #[test]
    fn novograd_first_step_is_scale_invariant() {
        let base = vec![0.3, -0.4, 1.2, 0.05];
        let updates: Vec<Vec<f64>> = [1.0, 250.0]
            .iter()
            .map(|&scale| {
                let mut params = one_param(vec![0.0; 4]);
                let mut opt = NovoGrad::new(&params, 0.0);
                let g =
                    Tensor::new(vec![4], base.iter().map(|v| v * scale).collect()).unwrap();
                opt.step(&mut params, &[Some(&g)], 0.1).unwrap();
                params.tensor_at(0).data().to_vec()
            })
            .collect();
        // The eps in the denominator breaks invariance at the 1e-10 level;
        // anything beyond that is a real bug.
        for (a, b) in updates[0].iter().zip(&updates[1]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        // And the first step is along the unit gradient direction.
        let norm: f64 = base.iter().map(|v| v * v).sum::<f64>();
        let norm = norm.sqrt();
        for (w, g) in updates[0].iter().zip(&base) {
            assert!((w + 0.1 * g / norm).abs() < 1e-8);
        }
    }

    #[test]
    fn novograd_momentum_accumulates_without_dampening() {
        // Constant unit gradient: v stays 1, ghat stays 1, so
        // m_k = 1 + b1 + b1^2 + ...
        let mut params = one_param(vec![0.0]);
        let mut opt = NovoGrad::new(&params, 0.0);
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let ghat = 1.0 / (1.0 + 1e-8);
        let mut expected = 0.0;
        let mut m = 0.0;
        for k in 0..5 {
            opt.step(&mut params, &[Some(&g)], 0.01).unwrap();
            m = if k == 0 { ghat } else { 0.95 * m + ghat };
            expected -= 0.01 * m;
        }
        let w = params.tensor_at(0).data()[0];
        assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut params = ParamSet::default();
        params.insert("a", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        params.insert("b", Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        let mut opt = NovoGrad::new(&params, 0.01);
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        opt.step(&mut params, &[Some(&g), None], 0.1).unwrap();
        assert_ne!(params.tensor_at(0).data()[0], 1.0);
        assert_eq!(params.tensor_at(1).data()[0], 2.0);
    }

    #[test]
    fn snapshot_round_trip_resumes_bit_exact() {
        let run = |resume: bool| -> Vec<u64> {
            let mut params = one_param(vec![1.0, -1.0, 0.5]);
            let mut opt = NovoGrad::new(&params, 0.01);
            let grads: Vec<Tensor> = (0..6)
                .map(|k| {
                    Tensor::new(vec![3], vec![0.1 * k as f64 + 0.05, -0.2, 0.3]).unwrap()
                })
                .collect();
            for g in grads.iter().take(3) {
                opt.step(&mut params, &[Some(g)], 0.02).unwrap();
            }
            if resume {
                let snap = opt.export(&params);
                let mut fresh = NovoGrad::new(&params, 0.01);
                fresh.import(&params, &snap).unwrap();
                opt = fresh;
            }
            for g in grads.iter().skip(3) {
                opt.step(&mut params, &[Some(g)], 0.02).unwrap();
            }
            params.tensor_at(0).data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(false), run(true));

        let params = one_param(vec![0.0]);
        let adam = Adam::new(&params, 0.0);
        let snap = adam.export(&params);
        assert_eq!(snap.kind, "adam");
        let mut novo = NovoGrad::new(&params, 0.0);
        assert!(novo.import(&params, &snap).is_err());
    }

    #[test]
    fn non_finite_gradients_are_divergence() {
        let mut params = one_param(vec![0.0]);
        let mut opt = Adam::new(&params, 0.0);
        let g = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let err = opt.step(&mut params, &[Some(&g)], 0.01).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
    }
}
