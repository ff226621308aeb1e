//! Dataset directories: `manifest.json` plus one record file per sample
//! under `samples/<id>.bin`.

use std::collections::BTreeSet;
use std::path::Path;

use mmtvae_core::data::{Label, PairedSample, SplitManifest, SynthFactors};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Result};
use crate::{fsio, records};

pub const MAGIC: &[u8; 4] = b"MMTS";
pub const MANIFEST: &str = "manifest.json";
pub const SAMPLE_DIR: &str = "samples";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub label: Label,
    pub patient_id: String,
    /// Generating factors, for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<SynthFactors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub image_size: usize,
    pub samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitManifest>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<PairedSample>,
}

/// Sample ids become file names, so keep them to a safe alphabet.
fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(format_err(format!("sample id {id:?} is not a valid file name")))
    }
}

pub fn write_dataset(
    dir: &Path,
    samples: &[PairedSample],
    factors: Option<&[SynthFactors]>,
    split: Option<&SplitManifest>,
) -> Result<()> {
    let first = samples.first().ok_or_else(|| format_err("refusing to write an empty dataset"))?;
    let image_size = first.image.shape()[1];
    if let Some(f) = factors {
        if f.len() != samples.len() {
            return Err(format_err("one factor record per sample required"));
        }
    }
    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        check_id(&s.sample_id)?;
        if !seen.insert(s.sample_id.as_str()) {
            return Err(format_err(format!("duplicate sample id {}", s.sample_id)));
        }
        if s.image.shape()[1] != image_size {
            return Err(format_err(format!("sample {} has a different image size", s.sample_id)));
        }
        let bytes = records::encode(MAGIC, b"", &[("image", &s.image), ("wbt", &s.wbt)])?;
        fsio::atomic_write(&dir.join(SAMPLE_DIR).join(format!("{}.bin", s.sample_id)), &bytes)?;
        entries.push(SampleEntry {
            sample_id: s.sample_id.clone(),
            label: s.label,
            patient_id: s.patient_id.clone(),
            factors: factors.map(|f| f[i]),
        });
    }
    let manifest = Manifest {
        version: records::VERSION,
        image_size,
        samples: entries,
        split: split.cloned(),
    };
    fsio::atomic_write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&fsio::read(&dir.join(MANIFEST))?)?;
    if m.version != records::VERSION {
        return Err(format_err(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        check_id(&e.sample_id)?;
        let path = dir.join(SAMPLE_DIR).join(format!("{}.bin", e.sample_id));
        let mut c = records::decode(MAGIC, &fsio::read(&path)?)?;
        let missing = |what: &str| format_err(format!("{}: no {what} record", path.display()));
        let image = c.take("image").ok_or_else(|| missing("image"))?;
        let wbt = c.take("wbt").ok_or_else(|| missing("wbt"))?;
        let s = PairedSample {
            image,
            wbt,
            label: e.label,
            patient_id: e.patient_id.clone(),
            sample_id: e.sample_id.clone(),
        };
        s.validate()?;
        if s.image.shape()[1] != manifest.image_size {
            return Err(format_err(format!("sample {} does not match image_size {}", s.sample_id, manifest.image_size)));
        }
        samples.push(s);
    }
    Ok(Dataset { manifest, samples })
}

impl Dataset {
    /// Samples of one side of the stored split. Without a stored split,
    /// every sample counts as training data.
    pub fn select(&self, which: SplitChoice) -> Vec<PairedSample> {
        let keep = |s: &PairedSample| match (which, &self.manifest.split) {
            (SplitChoice::All, _) => true,
            (SplitChoice::Train, None) => true,
            (SplitChoice::Test, None) => false,
            (SplitChoice::Train, Some(m)) => !m.is_test(&s.sample_id),
            (SplitChoice::Test, Some(m)) => m.is_test(&s.sample_id),
        };
        self.samples.iter().filter(|s| keep(s)).cloned().collect()
    }
}
