//! Patient-level dataset splitting and class balancing.
//!
//! Splits are always made at the patient level so that no patient
//! contributes cores to more than one of train/val/test. The test split
//! is grown until it holds at least a requested fraction of all
//! cancer-labeled cores, which keeps the evaluation set meaningful even
//! when the cancer class is rare.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::data::frame::{CoreMeta, SplitManifest};
use crate::error::{Error, Result};
use crate::rng;

/// Configuration for [`split_patients`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Minimum fraction of cancer cores that must land in the test split.
    pub test_cancer_fraction: f64,
    /// Fraction of the remaining (non-test) patients assigned to validation.
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_cancer_fraction: 0.25,
            val_fraction: 0.2,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.test_cancer_fraction) {
            return Err(Error::InvalidArgument(format!(
                "test_cancer_fraction must be in [0, 1], got {}",
                self.test_cancer_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "val_fraction must be in [0, 1], got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

fn cancer_cores_by_patient(cores: &[CoreMeta]) -> BTreeMap<String, usize> {
    let mut map: BTreeMap<String, usize> = BTreeMap::new();
    for core in cores {
        let entry = map.entry(core.patient_id.clone()).or_insert(0);
        if core.label == 1 {
            *entry += 1;
        }
    }
    map
}

/// Split patients into train/val/test groups.
///
/// Patients are shuffled with a seeded RNG ("split" substream), then moved
/// into the test split one at a time until the test split holds at least
/// `test_cancer_fraction` of all cancer cores. A fraction of the remaining
/// patients (rounded to nearest, at most all of them) becomes validation
/// and the rest train.
///
/// Requires at least two distinct patients with at least one cancer core
/// each; with fewer, a patient-disjoint cancer evaluation is impossible.
pub fn split_patients(cores: &[CoreMeta], config: &SplitConfig, seed: u64) -> Result<SplitManifest> {
    config.validate()?;
    if cores.is_empty() {
        return Err(Error::InvalidArgument("no cores to split".into()));
    }
    let per_patient = cancer_cores_by_patient(cores);
    let patients_with_cancer = per_patient.values().filter(|&&n| n > 0).count();
    if patients_with_cancer < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 patients with cancer cores, found {patients_with_cancer}"
        )));
    }
    let total_cancer: usize = per_patient.values().sum();

    let mut patients: Vec<String> = per_patient.keys().cloned().collect();
    let mut rng = rng::substream(seed, "split");
    patients.shuffle(&mut rng);

    let mut test_patients: Vec<String> = Vec::new();
    let mut test_cancer = 0usize;
    let mut rest: Vec<String> = Vec::new();
    let needed = config.test_cancer_fraction * total_cancer as f64;
    for patient in patients {
        if (test_cancer as f64) < needed {
            test_cancer += per_patient[&patient];
            test_patients.push(patient);
        } else {
            rest.push(patient);
        }
    }
    if (test_cancer as f64) < needed {
        return Err(Error::InvalidArgument(format!(
            "cannot reach test cancer fraction {}: only {test_cancer} of {total_cancer} cancer cores available",
            config.test_cancer_fraction
        )));
    }
    if config.test_cancer_fraction > 0.0 && rest.is_empty() {
        return Err(Error::InvalidArgument(
            "test split consumed every patient; nothing left to train on".into(),
        ));
    }

    let val_count = ((rest.len() as f64) * config.val_fraction).round() as usize;
    let val_count = val_count.min(rest.len());
    let val_patients: Vec<String> = rest[..val_count].to_vec();
    let train_patients: Vec<String> = rest[val_count..].to_vec();
    if train_patients.is_empty() {
        return Err(Error::InvalidArgument(
            "no patients left for training after test and val assignment".into(),
        ));
    }

    let manifest = SplitManifest {
        train_patients,
        val_patients,
        test_patients,
    };
    manifest.validate_disjoint()?;
    Ok(manifest)
}

/// Filter low-involvement cancer cores and optionally undersample benign cores.
///
/// Cancer cores with involvement strictly below `min_involvement` are
/// dropped (a core at exactly the threshold is kept); benign cores are
/// never dropped by the involvement rule. When `balance` is set, benign
/// cores are undersampled with a seeded RNG ("subsample" substream) down
/// to the number of surviving cancer cores; if there are fewer benign
/// cores than that, all are kept. Returns core ids. Inputs are sorted
/// before shuffling so the result depends only on the seed and the set
/// of cores, not their order.
pub fn balance_and_filter(
    cores: &[CoreMeta],
    min_involvement: f64,
    balance: bool,
    seed: u64,
) -> Vec<String> {
    let mut cancer: Vec<&CoreMeta> = cores
        .iter()
        .filter(|c| c.label == 1 && c.involvement >= min_involvement)
        .collect();
    let mut benign: Vec<&CoreMeta> = cores.iter().filter(|c| c.label == 0).collect();
    cancer.sort_by(|a, b| a.core_id.cmp(&b.core_id));
    benign.sort_by(|a, b| a.core_id.cmp(&b.core_id));

    if balance {
        let mut rng = rng::substream(seed, "subsample");
        benign.shuffle(&mut rng);
        benign.truncate(cancer.len());
    }

    let mut kept: Vec<String> = cancer
        .iter()
        .chain(benign.iter())
        .map(|c| c.core_id.clone())
        .collect();
    kept.sort();
    kept
}
