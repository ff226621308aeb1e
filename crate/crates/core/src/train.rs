//! Training loop and evaluation metrics that need no file IO.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{augment_with_target, stack_batch, AugmentConfig, BalancedSampler, Label, PairedSample};
use crate::latent::{silhouette, ClassKdeSet};
use crate::loss::{vae_loss, LossConfig, LossReport, SsimConfig};
use crate::model::{sample_eps, ModelConfig, Preset, TripletVae};
use crate::nn::{Mode, Session};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub per_class_batch: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    /// Epochs between checkpoints.
    pub checkpoint_every: usize,
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> TrainConfig {
        TrainConfig {
            epochs: 5000,
            per_class_batch: 20,
            seed: 0,
            model: ModelConfig::paper(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 50,
            test_fraction: 0.2,
        }
    }

    pub fn desk() -> TrainConfig {
        TrainConfig {
            epochs: 200,
            model: ModelConfig::desk(),
            loss: LossConfig {
                ssim: SsimConfig::desk(),
                ..LossConfig::default()
            },
            ..TrainConfig::paper()
        }
    }

    pub fn preset(p: Preset) -> TrainConfig {
        match p {
            Preset::Paper => TrainConfig::paper(),
            Preset::Desk => TrainConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TensorError::Invalid("epochs must be at least 1".into()));
        }
        if self.per_class_batch == 0 {
            return Err(TensorError::Invalid("per_class_batch must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(TensorError::Invalid("checkpoint_every must be at least 1".into()));
        }
        if self.loss.ssim.window > self.model.image_size {
            return Err(TensorError::Invalid(alloc::format!(
                "SSIM window {} exceeds image size {}",
                self.loss.ssim.window,
                self.model.image_size
            )));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean of the per-batch loss terms.
    pub losses: LossReport,
    /// Class histogram of each batch.
    pub batch_histograms: Vec<[usize; Label::COUNT]>,
    pub triplets: usize,
}

/// Owns the model, optimizer state and the sampling RNG for one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: TripletVae,
    pub adam: AdamState,
    pub epoch: usize,
    sampler: BalancedSampler,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// `train` must contain every class at least once.
    pub fn new(cfg: TrainConfig, train: &[PairedSample]) -> Result<Trainer> {
        cfg.validate()?;
        let model = TripletVae::new(cfg.model.clone(), cfg.seed)?;
        Trainer::with_model(cfg, model, train)
    }

    pub fn with_model(cfg: TrainConfig, model: TripletVae, train: &[PairedSample]) -> Result<Trainer> {
        cfg.validate()?;
        let labels: Vec<Label> = train.iter().map(|s| s.label).collect();
        let sampler = BalancedSampler::new(&labels, cfg.per_class_batch)?;
        let adam = AdamState::new(cfg.adam, &model.params);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        Ok(Trainer {
            cfg,
            model,
            adam,
            epoch: 0,
            sampler,
            rng,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    /// One optimizer step on one balanced batch.
    pub fn step(&mut self, train: &[PairedSample]) -> Result<(LossReport, [usize; Label::COUNT], usize)> {
        let idx = self.sampler.next_batch(&mut self.rng);
        let (batch, targets): (Vec<PairedSample>, Vec<PairedSample>) = idx
            .iter()
            .map(|&i| augment_with_target(&train[i], &self.cfg.augment, &mut self.rng))
            .unzip();
        let all: Vec<usize> = (0..batch.len()).collect();
        let (images, wbts, labels) = stack_batch(&batch, &all)?;
        let (target_images, target_wbts, _) = stack_batch(&targets, &all)?;
        let mut hist = [0usize; Label::COUNT];
        labels.iter().for_each(|&l| hist[l] += 1);

        let eps = sample_eps(&[batch.len(), self.cfg.model.latent_dim], &mut self.rng);
        let mut s = Session::new(Graph::new());
        let iv = s.graph.constant(images);
        let wv = s.graph.constant(wbts);
        let out = self.model.forward(&mut s, iv, wv, eps, Mode::Train)?;
        let ti = s.graph.constant(target_images);
        let tw = s.graph.constant(target_wbts);
        let lv = vae_loss(&mut s.graph, &out, ti, tw, &labels, &self.cfg.loss)?;
        let report = lv.report(&s.graph, &self.cfg.loss.weights);
        if !report.total.is_finite() {
            return Err(TensorError::NonFinite { op: "training loss".into() });
        }
        s.graph.backward(lv.total)?;
        self.model.params.zero_grads();
        s.collect_grads(&mut self.model.params);
        self.adam.step(&mut self.model.params)?;
        Ok((report, hist, lv.triplets.len()))
    }

    pub fn run_epoch(&mut self, train: &[PairedSample]) -> Result<EpochReport> {
        let n = self.batches_per_epoch();
        let mut reports = Vec::with_capacity(n);
        let mut hists = Vec::with_capacity(n);
        let mut triplets = 0;
        for _ in 0..n {
            let (r, h, t) = self.step(train)?;
            reports.push(r);
            hists.push(h);
            triplets += t;
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch: self.epoch,
            losses: LossReport::mean(&reports),
            batch_histograms: hists,
            triplets,
        })
    }
}

/// Eval-mode loss terms over `samples`, batch by batch with zero noise so the
/// numbers are deterministic.
pub fn evaluate_losses(model: &mut TripletVae, samples: &[PairedSample], cfg: &LossConfig, batch: usize) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(TensorError::Invalid("cannot evaluate an empty split".into()));
    }
    let mut reports = Vec::new();
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, wbts, labels) = stack_batch(samples, chunk)?;
        let mut s = Session::inference(Graph::new());
        let iv = s.graph.constant(images);
        let wv = s.graph.constant(wbts);
        let eps = Tensor::zeros([chunk.len(), model.config.latent_dim]);
        let out = model.forward(&mut s, iv, wv, eps, Mode::Eval)?;
        let lv = vae_loss(&mut s.graph, &out, iv, wv, &labels, cfg)?;
        reports.push(lv.report(&s.graph, &cfg.weights));
    }
    Ok(LossReport::mean(&reports))
}

/// Eval-mode encoder means of `samples`, (n, d).
pub fn embed(model: &mut TripletVae, samples: &[PairedSample]) -> Result<Tensor> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let (images, wbts, _) = stack_batch(samples, &idx)?;
    Ok(model.encode_batch(&images, &wbts)?.0)
}

/// Silhouette of the encoder means by class.
pub fn embedding_silhouette(model: &mut TripletVae, samples: &[PairedSample]) -> Result<f64> {
    let mu = embed(model, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
    silhouette(&mu, &labels)
}

/// Nearest-class-mean classifier over flattened WBT grids.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestClassMean {
    pub means: Vec<Vec<f64>>,
}

impl NearestClassMean {
    pub fn fit(samples: &[PairedSample]) -> Result<NearestClassMean> {
        let refs: Vec<&PairedSample> = samples.iter().collect();
        let means = crate::data::class_mean_wbt(&refs)?
            .into_iter()
            .enumerate()
            .map(|(k, m)| m.ok_or_else(|| TensorError::Invalid(alloc::format!("no {} samples to fit on", Label::ALL[k]))))
            .collect::<Result<Vec<_>>>()?;
        Ok(NearestClassMean { means })
    }

    pub fn predict(&self, wbt: &[f64]) -> Label {
        let dist = |m: &Vec<f64>| m.iter().zip(wbt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let k = (0..self.means.len())
            .min_by(|&a, &b| dist(&self.means[a]).total_cmp(&dist(&self.means[b])))
            .unwrap_or(0);
        Label::ALL[k]
    }
}

/// Class-conditional generation summary for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub class: Label,
    pub samples: usize,
    /// Fraction assigned to `class` by the classifier.
    pub fidelity: f64,
    /// Mean generated WBT grid, flattened.
    pub mean_wbt: Vec<f64>,
}

/// Draw `n` latents from the class KDE, decode them, and score the WBT
/// grids with `classifier`.
pub fn generation_stats(
    model: &mut TripletVae,
    kdes: &ClassKdeSet,
    classifier: &NearestClassMean,
    class: Label,
    n: usize,
    seed: u64,
) -> Result<GenerationStats> {
    let kde = kdes
        .get(class)
        .ok_or_else(|| TensorError::Invalid(alloc::format!("no KDE for class {class}")))?;
    if kde.dim() != model.config.latent_dim {
        return Err(TensorError::ShapeMismatch {
            op: "generate",
            lhs: alloc::vec![model.config.latent_dim],
            rhs: alloc::vec![kde.dim()],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = kde.sample(n, &mut rng);
    let (_, wbts) = model.decode_batch(&z)?;
    let per = wbts.numel() / n.max(1);
    let mut mean = alloc::vec![0.0; per];
    let mut hits = 0usize;
    for i in 0..n {
        let w = wbts.sample(i);
        mean.iter_mut().zip(w).for_each(|(m, v)| *m += v / n as f64);
        if classifier.predict(w) == class {
            hits += 1;
        }
    }
    Ok(GenerationStats {
        class,
        samples: n,
        fidelity: hits as f64 / n.max(1) as f64,
        mean_wbt: mean,
    })
}
