//! Paired image / WBT samples: synthetic generation, WBT regridding,
//! augmentation, patient-disjoint splitting and class-balanced batching.

mod augment;
mod batch;
mod split;
mod synth;
mod wbt;

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

pub use augment::{augment, augment_with_target, hflip, random_erase, rotate, AugmentConfig};
pub use batch::BalancedSampler;
pub use split::{split_by_patient, SplitManifest};
pub use synth::{
    class_counts_like_clinic, render_image, render_raw_wbt, render_sample, synth_dataset, synth_dataset_with_counts,
    SynthFactors,
};
pub use wbt::{
    frequency_axis, pressure_axis, resample_onto, resample_wbt, WbtRawGrid, FREQ_MAX_HZ, FREQ_MIN_HZ, GRID_STEPS, PRESSURE_MAX,
    PRESSURE_MIN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    /// Acute otitis media.
    AOM,
    /// Otitis media with effusion.
    OME,
    /// No effusion.
    NOE,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::AOM, Label::OME, Label::NOE];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::AOM => "AOM",
            Label::OME => "OME",
            Label::NOE => "NOE",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Label> {
        match s.to_ascii_uppercase().as_str() {
            "AOM" => Ok(Label::AOM),
            "OME" => Ok(Label::OME),
            "NOE" => Ok(Label::NOE),
            _ => Err(TensorError::Invalid(alloc::format!("unknown class '{s}' (expected AOM, OME or NOE)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// (3, H, W) in [0, 1].
    pub image: Tensor,
    /// (1, H, W) absorbance in [0, 1].
    pub wbt: Tensor,
    pub label: Label,
    pub patient_id: String,
    pub sample_id: String,
}

impl PairedSample {
    pub fn validate(&self) -> Result<()> {
        let in_range = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if self.image.rank() != 3 || self.image.shape()[0] != 3 {
            return Err(TensorError::Invalid(alloc::format!(
                "sample {}: image shape {:?}, expected (3, H, W)",
                self.sample_id,
                self.image.shape()
            )));
        }
        if self.wbt.rank() != 3 || self.wbt.shape()[0] != 1 {
            return Err(TensorError::Invalid(alloc::format!(
                "sample {}: wbt shape {:?}, expected (1, H, W)",
                self.sample_id,
                self.wbt.shape()
            )));
        }
        if !in_range(&self.image) || !in_range(&self.wbt) {
            return Err(TensorError::Invalid(alloc::format!("sample {}: values outside [0, 1]", self.sample_id)));
        }
        Ok(())
    }
}

/// Stack the images and WBT grids of `idx` into (N, C, H, W) batches.
pub fn stack_batch(samples: &[PairedSample], idx: &[usize]) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let images: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].image).collect();
    let wbts: Vec<&Tensor> = idx.iter().map(|&i| &samples[i].wbt).collect();
    let labels = idx.iter().map(|&i| samples[i].label.index()).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&wbts)?, labels))
}

/// Per-class mean of the flattened WBT grids, indexed by `Label::index`.
pub fn class_mean_wbt(samples: &[&PairedSample]) -> Result<Vec<Option<Vec<f64>>>> {
    let mut sums: Vec<Option<Vec<f64>>> = alloc::vec![None; Label::COUNT];
    let mut counts = [0usize; Label::COUNT];
    for s in samples {
        let slot = sums[s.label.index()].get_or_insert_with(|| alloc::vec![0.0; s.wbt.numel()]);
        if slot.len() != s.wbt.numel() {
            return Err(TensorError::Invalid("WBT grids differ in size".into()));
        }
        slot.iter_mut().zip(s.wbt.data()).for_each(|(a, b)| *a += b);
        counts[s.label.index()] += 1;
    }
    for (slot, &c) in sums.iter_mut().zip(&counts) {
        if let Some(v) = slot {
            v.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    Ok(sums)
}
