//! Model checkpoints: the full model configuration and run position as a
//! JSON header, then every parameter, buffer and Adam moment as a record.

use std::path::Path;

use mmtvae_core::loss::LossReport;
use mmtvae_core::model::{ModelConfig, TripletVae};
use mmtvae_core::optim::{AdamConfig, AdamState};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Result};
use crate::{fsio, records};

pub const MAGIC: &[u8; 4] = b"MMTV";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    pub adam: Option<AdamMeta>,
    /// Loss terms of the last finished epoch.
    pub metrics: Option<LossReport>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: TripletVae,
    pub adam: Option<AdamState>,
}

pub fn encode(
    model: &TripletVae,
    adam: Option<&AdamState>,
    epoch: usize,
    seed: u64,
    metrics: Option<LossReport>,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: model.config.clone(),
        epoch,
        seed,
        adam: adam.map(|a| AdamMeta {
            config: a.config,
            step: a.step,
        }),
        metrics,
    };
    let names: Vec<String> = adam
        .map(|a| {
            a.moments
                .iter()
                .flat_map(|(n, _, _)| [format!("{ADAM_M}{n}"), format!("{ADAM_V}{n}")])
                .collect()
        })
        .unwrap_or_default();
    let mut recs: Vec<(&str, &mmtvae_core::Tensor)> =
        model.params.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    if let Some(a) = adam {
        for (i, (_, m, v)) in a.moments.iter().enumerate() {
            recs.push((names[2 * i].as_str(), m));
            recs.push((names[2 * i + 1].as_str(), v));
        }
    }
    records::encode(MAGIC, &serde_json::to_vec(&header)?, &recs)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = records::decode(MAGIC, bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&c.header)?;
    let mut model = TripletVae::new(header.model.clone(), 0)?;
    for p in model.params.iter_mut() {
        let t = c
            .take(&p.name)
            .ok_or_else(|| format_err(format!("checkpoint is missing parameter {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(format_err(format!(
                "parameter {}: checkpoint shape {:?}, model shape {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    let adam = match &header.adam {
        None => None,
        Some(meta) => {
            let mut state = AdamState::new(meta.config, &model.params);
            state.step = meta.step;
            for (name, m, v) in state.moments.iter_mut() {
                for (prefix, slot) in [(ADAM_M, &mut *m), (ADAM_V, &mut *v)] {
                    let key = format!("{prefix}{name}");
                    let t = c.take(&key).ok_or_else(|| format_err(format!("checkpoint is missing {key}")))?;
                    if t.shape() != slot.shape() {
                        return Err(format_err(format!("{key}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
                    }
                    *slot = t;
                }
            }
            Some(state)
        }
    };
    if let Some((name, _)) = c.records.first() {
        return Err(format_err(format!("checkpoint has unknown record {name}")));
    }
    Ok(Checkpoint { header, model, adam })
}

pub fn save(
    path: &Path,
    model: &TripletVae,
    adam: Option<&AdamState>,
    epoch: usize,
    seed: u64,
    metrics: Option<LossReport>,
) -> Result<()> {
    fsio::atomic_write(path, &encode(model, adam, epoch, seed, metrics)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fsio::read(path)?)
}
