//! Held-out evaluation summarized as one JSON document.

use std::collections::BTreeMap;

use mmtvae_core::data::{class_mean_wbt, synth_dataset, Label, PairedSample};
use mmtvae_core::latent::{silhouette, ClassKdeSet, DEFAULT_FOLDS};
use mmtvae_core::loss::{LossConfig, LossReport};
use mmtvae_core::model::TripletVae;
use mmtvae_core::train::{embed, evaluate_losses, generation_stats, NearestClassMean};
use serde::{Deserialize, Serialize};

use crate::error::{format_err, Result};

/// Per-class count of the fresh synthetic grids the fidelity classifier is
/// fit on.
pub const CLASSIFIER_SAMPLES_PER_CLASS: usize = 100;
/// Mixed into the evaluation seed for the classifier's data.
const CLASSIFIER_SEED_SALT: u64 = 0x5eed_c1a5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub samples: usize,
    /// Mean WBT grid of the evaluated samples, row-major (pressure, frequency).
    pub dataset_wbt: Vec<f64>,
    /// Mean eval-mode reconstruction from the latent means.
    pub reconstructed_wbt: Vec<f64>,
    /// Mean of the KDE-generated grids.
    pub generated_wbt: Vec<f64>,
    /// Mean absolute per-cell difference between generated and dataset means.
    pub generated_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub split: String,
    pub samples: usize,
    pub losses: LossReport,
    pub silhouette: f64,
    pub class_means: BTreeMap<Label, ClassMeans>,
    pub generation_fidelity: BTreeMap<Label, f64>,
    pub generated_per_class: usize,
}

pub struct EvalOptions<'a> {
    pub split: &'a str,
    pub loss: &'a LossConfig,
    /// Fit on the evaluated embeddings when `None`.
    pub kdes: Option<ClassKdeSet>,
    pub generate: usize,
    pub seed: u64,
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Nearest-class-mean classifier on freshly synthesized grids that share
/// nothing with the training data but the generator.
pub fn fidelity_classifier(image_size: usize, seed: u64) -> Result<NearestClassMean> {
    let (held, _) = synth_dataset(CLASSIFIER_SAMPLES_PER_CLASS, image_size, seed ^ CLASSIFIER_SEED_SALT)?;
    Ok(NearestClassMean::fit(&held)?)
}

pub fn evaluate(model: &mut TripletVae, samples: &[PairedSample], opts: EvalOptions<'_>) -> Result<Report> {
    if samples.is_empty() {
        return Err(format_err("nothing to evaluate"));
    }
    let losses = evaluate_losses(model, samples, opts.loss, 32)?;
    let mu = embed(model, samples)?;
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let sil = silhouette(&mu, &idx)?;
    let kdes = match opts.kdes {
        Some(k) => k,
        None => ClassKdeSet::fit(&mu, &labels, DEFAULT_FOLDS, opts.seed)?,
    };
    let classifier = fidelity_classifier(model.config.image_size, opts.seed)?;

    let refs: Vec<&PairedSample> = samples.iter().collect();
    let dataset_means = class_mean_wbt(&refs)?;
    let (_, recon) = model.decode_batch(&mu)?;

    let mut class_means = BTreeMap::new();
    let mut fidelity = BTreeMap::new();
    for class in Label::ALL {
        let (Some(dataset_wbt), Some(_)) = (&dataset_means[class.index()], kdes.get(class)) else {
            continue;
        };
        let members: Vec<usize> = (0..samples.len()).filter(|&i| labels[i] == class).collect();
        let mut reconstructed = vec![0.0; dataset_wbt.len()];
        for &i in &members {
            reconstructed.iter_mut().zip(recon.sample(i)).for_each(|(a, b)| *a += b / members.len() as f64);
        }
        let g = generation_stats(model, &kdes, &classifier, class, opts.generate, opts.seed ^ (class.index() as u64 + 1))?;
        fidelity.insert(class, g.fidelity);
        class_means.insert(
            class,
            ClassMeans {
                samples: members.len(),
                dataset_wbt: dataset_wbt.clone(),
                reconstructed_wbt: reconstructed,
                generated_mae: mean_abs_diff(&g.mean_wbt, dataset_wbt),
                generated_wbt: g.mean_wbt,
            },
        );
    }
    Ok(Report {
        split: opts.split.to_string(),
        samples: samples.len(),
        losses,
        silhouette: sil,
        class_means,
        generation_fidelity: fidelity,
        generated_per_class: opts.generate,
    })
}
