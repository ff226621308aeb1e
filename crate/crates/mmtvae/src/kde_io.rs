//! Per-class KDE files: `<CLASS>.json` holds the bandwidth and the
//! cross-validation curve, `<CLASS>.bin` the kernel centers.

use std::path::Path;

use mmtvae_core::data::Label;
use mmtvae_core::latent::{ClassKdeSet, KdeModel};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Result};
use crate::{fsio, records};

pub const MAGIC: &[u8; 4] = b"MMTK";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeMeta {
    pub class: Label,
    pub bandwidth: f64,
    pub dim: usize,
    pub points: usize,
    /// `(bandwidth, mean held-out log-likelihood)` per candidate.
    #[serde(default)]
    pub cv_curve: Vec<(f64, f64)>,
}

pub fn write_kde(dir: &Path, model: &KdeModel, cv_curve: &[(f64, f64)]) -> Result<()> {
    let meta = KdeMeta {
        class: model.class,
        bandwidth: model.bandwidth,
        dim: model.dim(),
        points: model.len(),
        cv_curve: cv_curve.to_vec(),
    };
    let name = model.class.as_str();
    let blob = records::encode(MAGIC, b"", &[("points", &model.points)])?;
    fsio::atomic_write(&dir.join(format!("{name}.bin")), &blob)?;
    fsio::atomic_write(&dir.join(format!("{name}.json")), &serde_json::to_vec_pretty(&meta)?)
}

pub fn read_kde(dir: &Path, class: Label) -> Result<KdeModel> {
    let name = class.as_str();
    let meta: KdeMeta = serde_json::from_slice(&fsio::read(&dir.join(format!("{name}.json")))?)?;
    if meta.class != class {
        return Err(format_err(format!("{name}.json describes class {}", meta.class)));
    }
    let mut c = records::decode(MAGIC, &fsio::read(&dir.join(format!("{name}.bin")))?)?;
    let points = c.take("points").ok_or_else(|| format_err(format!("{name}.bin has no points record")))?;
    if points.shape() != [meta.points, meta.dim] {
        return Err(format_err(format!(
            "{name}.bin holds {:?} points, metadata says ({}, {})",
            points.shape(),
            meta.points,
            meta.dim
        )));
    }
    Ok(KdeModel::new(class, meta.bandwidth, points)?)
}

/// Every class file present in `dir`.
pub fn read_kde_set(dir: &Path) -> Result<ClassKdeSet> {
    let mut models = Vec::new();
    for class in Label::ALL {
        if dir.join(format!("{}.json", class.as_str())).exists() {
            models.push(read_kde(dir, class)?);
        }
    }
    if models.is_empty() {
        return Err(format_err(format!("no KDE files in {}", dir.display())));
    }
    Ok(ClassKdeSet::new(models)?)
}
