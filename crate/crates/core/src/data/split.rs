//! Patient-disjoint train / test split.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PairedSample;
use crate::tensor::{Result, TensorError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    /// Patient id to `"train"` or `"test"`.
    pub patients: BTreeMap<String, String>,
}

impl SplitManifest {
    pub fn is_test(&self, sample_id: &str) -> bool {
        self.test_ids.iter().any(|s| s == sample_id)
    }
}

/// Shuffle patients with `seed`, then move whole patients into the test set
/// until it covers at least `test_fraction` of the samples.
pub fn split_by_patient(samples: &[PairedSample], test_fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(TensorError::Invalid("test_fraction must lie in [0, 1)".into()));
    }
    let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        *per_patient.entry(s.patient_id.as_str()).or_default() += 1;
    }
    if per_patient.len() < 2 {
        return Err(TensorError::Invalid("a patient-disjoint split needs at least two patients".into()));
    }
    let mut order: Vec<&str> = per_patient.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let target = test_fraction * samples.len() as f64;
    let mut test: BTreeSet<&str> = BTreeSet::new();
    let mut covered = 0usize;
    for p in &order {
        if (covered as f64) >= target || test.len() + 1 == order.len() {
            break;
        }
        test.insert(p);
        covered += per_patient[p];
    }

    let mut m = SplitManifest {
        train_ids: Vec::new(),
        test_ids: Vec::new(),
        patients: BTreeMap::new(),
    };
    for p in per_patient.keys() {
        let side = if test.contains(p) { "test" } else { "train" };
        m.patients.insert(String::from(*p), String::from(side));
    }
    for s in samples {
        if test.contains(s.patient_id.as_str()) {
            m.test_ids.push(s.sample_id.clone());
        } else {
            m.train_ids.push(s.sample_id.clone());
        }
    }
    Ok(m)
}
