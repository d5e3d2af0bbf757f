//! Model checkpoints: architecture, parameters, batch-norm buffers,
//! optional optimizer state, and free-form metadata in one container
//! file. Round trips are bit-exact, so a resumed run continues the exact
//! trajectory of an uninterrupted one.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::container::{
    self, expect_version, f64s_to_le_bytes, le_bytes_to_f64s, Container, ContainerKind,
};
use crate::error::{Error, Result};
use crate::nn::model::{ArchDescriptor, Model};
use crate::nn::optim::OptimizerSnapshot;

pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    kind: String,
    step: u64,
    vectors: Vec<(String, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchDescriptor,
    params: Vec<(String, Vec<usize>)>,
    buffers: Vec<(String, usize)>,
    optimizer: Option<OptimizerHeader>,
    meta: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerSnapshot>,
    pub meta: BTreeMap<String, String>,
}

pub fn checkpoint_to_bytes(
    model: &Model,
    optimizer: Option<&OptimizerSnapshot>,
    meta: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut values: Vec<f64> = Vec::new();
    let mut param_entries = Vec::new();
    for (name, tensor) in model.params().iter() {
        param_entries.push((name.to_string(), tensor.shape().to_vec()));
        values.extend_from_slice(tensor.data());
    }
    let mut buffer_entries = Vec::new();
    for (name, buf) in model.buffers() {
        buffer_entries.push((name.clone(), buf.len()));
        values.extend_from_slice(buf);
    }
    let optimizer_header = optimizer.map(|snap| {
        let mut vectors = Vec::new();
        for (name, vec) in &snap.vectors {
            vectors.push((name.clone(), vec.len()));
            values.extend_from_slice(vec);
        }
        OptimizerHeader {
            kind: snap.kind.clone(),
            step: snap.step,
            vectors,
        }
    });
    let header = CheckpointHeader {
        arch: model.arch().clone(),
        params: param_entries,
        buffers: buffer_entries,
        optimizer: optimizer_header,
        meta: meta.clone(),
    };
    container::container_to_bytes(
        ContainerKind::Checkpoint,
        CHECKPOINT_VERSION,
        &header,
        &f64s_to_le_bytes(&values),
    )
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let container = container::parse_container(bytes)?;
    decode(container)
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    optimizer: Option<&OptimizerSnapshot>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = checkpoint_to_bytes(model, optimizer, meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let container = container::read_container(path)?;
    decode(container)
}

fn decode(container: Container) -> Result<Checkpoint> {
    expect_version(&container, ContainerKind::Checkpoint, CHECKPOINT_VERSION)?;
    let header: CheckpointHeader = container.header()?;
    let values = le_bytes_to_f64s(&container.payload)?;

    // Build a skeleton with the stored architecture, then overwrite every
    // tensor; name or shape disagreements mean the file does not describe
    // this architecture and are format errors.
    let mut model = Model::new(header.arch.clone(), 0)?;
    if header.params.len() != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, architecture wants {}",
            header.params.len(),
            model.params().len()
        )));
    }
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[f64]> {
        let end = cursor
            .checked_add(n)
            .filter(|&e| e <= values.len())
            .ok_or_else(|| Error::Format("checkpoint payload shorter than header claims".into()))?;
        let slice = &values[cursor..end];
        cursor = end;
        Ok(slice)
    };
    for (name, shape) in &header.params {
        let idx = model
            .params()
            .position(name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter {name} not in architecture")))?;
        let n: usize = shape.iter().product();
        let slice = take(n)?;
        let tensor = model.params_mut().tensor_at_mut(idx);
        if tensor.shape() != &shape[..] {
            return Err(Error::Format(format!(
                "checkpoint parameter {name} has shape {shape:?}, architecture wants {:?}",
                tensor.shape()
            )));
        }
        tensor.data_mut().copy_from_slice(slice);
    }
    for (name, len) in &header.buffers {
        let slice = take(*len)?.to_vec();
        let buf = model
            .buffers_mut()
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("checkpoint buffer {name} not in architecture")))?;
        if buf.len() != *len {
            return Err(Error::Format(format!("checkpoint buffer {name} has wrong length")));
        }
        *buf = slice;
    }
    let optimizer = match header.optimizer {
        None => None,
        Some(oh) => {
            let mut vectors = Vec::new();
            for (name, len) in oh.vectors {
                let slice = take(len)?.to_vec();
                vectors.push((name, slice));
            }
            Some(OptimizerSnapshot {
                kind: oh.kind,
                step: oh.step,
                vectors,
            })
        }
    };
    if cursor != values.len() {
        return Err(Error::Format(format!(
            "checkpoint payload has {} trailing values",
            values.len() - cursor
        )));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::optim::NovoGrad;
    use crate::nn::tensor::Tensor;
    use crate::rng;

    fn perturbed_model(seed: u64) -> Model {
        let mut model = Model::new(ArchDescriptor::tiny(), seed).unwrap();
        let mut rng = rng::substream(seed, "ckpt-test");
        for idx in 0..model.params().len() {
            for v in model.params_mut().tensor_at_mut(idx).data_mut() {
                *v += 0.01 * rng::gaussian(&mut rng);
            }
        }
        for buf in model.buffers_mut().values_mut() {
            for v in buf.iter_mut() {
                *v += 0.1 * rng::gaussian(&mut rng);
            }
        }
        model
    }

    fn assert_models_bit_equal(a: &Model, b: &Model) {
        assert_eq!(a.arch(), b.arch());
        for (name, t) in a.params().iter() {
            let other = b.params().get(name).unwrap();
            let ab: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = other.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{name}");
        }
        for (name, buf) in a.buffers() {
            let other = &b.buffers()[name];
            let ab: Vec<u64> = buf.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = other.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{name}");
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = perturbed_model(5);
        let mut params = model.params().clone();
        let mut opt = NovoGrad::new(&params, 0.01);
        // Advance the optimizer so its state is non-trivial.
        let g = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let head_idx = params.position("head.fc.bias").unwrap();
        let mut grads: Vec<Option<&Tensor>> = vec![None; params.len()];
        grads[head_idx] = Some(&g);
        opt.step(&mut params, &grads, 0.01).unwrap();
        let snap = opt.export(&params);

        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), "17".to_string());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, Some(&snap), &meta).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_models_bit_equal(&model, &loaded.model);
        assert_eq!(loaded.meta["epoch"], "17");
        let loaded_snap = loaded.optimizer.unwrap();
        assert_eq!(loaded_snap.kind, "novograd");
        assert_eq!(loaded_snap.step, snap.step);
        assert_eq!(loaded_snap.vectors, snap.vectors);

        // Importing the loaded state resumes identically.
        let mut resumed = NovoGrad::new(&params, 0.01);
        resumed.import(&params, &loaded_snap).unwrap();
    }

    #[test]
    fn checkpoint_without_optimizer() {
        let model = perturbed_model(9);
        let bytes = checkpoint_to_bytes(&model, None, &BTreeMap::new()).unwrap();
        let loaded = checkpoint_from_bytes(&bytes).unwrap();
        assert!(loaded.optimizer.is_none());
        assert_models_bit_equal(&model, &loaded.model);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let model = perturbed_model(11);
        let bytes = checkpoint_to_bytes(&model, None, &BTreeMap::new()).unwrap();
        let cut = &bytes[..bytes.len() - 16];
        assert!(matches!(checkpoint_from_bytes(cut), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        #[derive(Serialize, Deserialize)]
        struct Dummy {}
        let bytes = container::container_to_bytes(
            ContainerKind::CoreSet,
            1,
            &Dummy {},
            &[],
        )
        .unwrap();
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Format(_))));
    }
}
