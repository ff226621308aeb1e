//! The `mmtvae` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use mmtvae_core::data::{
    class_counts_like_clinic, frequency_axis, pressure_axis, resample_wbt, split_by_patient, synth_dataset_with_counts,
    Label,
};
use mmtvae_core::latent::{fit_class_kdes, project, Method, TsneConfig, DEFAULT_FOLDS};
use mmtvae_core::model::Preset;
use mmtvae_core::train::{embed, TrainConfig, Trainer};
use mmtvae_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::dataset::{read_dataset, write_dataset, SplitChoice};
use crate::error::{format_err, Result};
use crate::report::{evaluate, EvalOptions};
use crate::tables::{self, Embeddings};
use crate::{checkpoint, fsio, kde_io, netpbm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Paper,
    Desk,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Preset {
        match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Pca,
    Tsne,
}

#[derive(Debug, Parser)]
#[command(name = "mmtvae", version, about = "Multi-modal triplet VAE for otoscopy images and WBT grids")]
pub struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file overriding fields of the preset's training config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "paper")]
    pub preset: PresetArg,
    /// Overrides the number of training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset with a patient-disjoint split.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Samples per class.
        #[arg(long, default_value_t = 100, conflicts_with = "clinic_total")]
        n_per_class: usize,
        /// Total sample count split in the clinical class ratio instead.
        #[arg(long)]
        clinic_total: Option<usize>,
        /// Defaults to the preset's input size.
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train on the training split of a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write latent means of one split to CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one cross-validated KDE per class on an embedding CSV.
    FitKde {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
    },
    /// Decode class-conditional samples drawn from a fitted KDE.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kde: PathBuf,
        #[arg(long)]
        class: Label,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// 2-D projection of an embedding CSV.
    Project {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_enum, default_value = "pca")]
        method: MethodArg,
        #[arg(long)]
        perplexity: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Losses, silhouette and generation statistics as a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
        /// Directory of fitted KDEs; fit on the evaluated split otherwise.
        #[arg(long)]
        kde: Option<PathBuf>,
        /// Generated samples per class.
        #[arg(long, default_value_t = 500)]
        generate: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regrid a raw WBT matrix CSV onto the model grid.
    ResampleWbt {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse and run; returns the process exit code. Usage errors give 2 and
/// runtime failures 1.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Overlay `patch` onto `base`; keys absent from `base` are rejected so a
/// typo cannot silently fall back to a default.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| format_err(format!("unknown config key {here}")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::preset(cli.preset.into()))?;
    if let Some(path) = &cli.config {
        let patch: Value = serde_json::from_slice(&fsio::read(path)?)?;
        merge(&mut value, patch, "")?;
    }
    let mut cfg: TrainConfig = serde_json::from_value(value)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = cli.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth {
            out,
            n_per_class,
            clinic_total,
            image_size,
        } => synth(&cfg, out, *n_per_class, *clinic_total, *image_size),
        Command::Train { data, out } => train(cfg, data, out),
        Command::Embed {
            checkpoint,
            data,
            split,
            out,
        } => embed_cmd(checkpoint, data, *split, out),
        Command::FitKde { embeddings, out, folds } => fit_kde_cmd(&cfg, embeddings, out, *folds),
        Command::Sample {
            checkpoint,
            kde,
            class,
            n,
            out,
        } => sample_cmd(&cfg, checkpoint, kde, *class, *n, out),
        Command::Project {
            embeddings,
            method,
            perplexity,
            iterations,
            out,
        } => project_cmd(&cfg, embeddings, *method, *perplexity, *iterations, out),
        Command::Eval {
            checkpoint,
            data,
            split,
            kde,
            generate,
            out,
        } => eval_cmd(&cfg, checkpoint, data, *split, kde.as_deref(), *generate, out),
        Command::ResampleWbt { input, steps, out } => resample_cmd(input, *steps, out),
    }
}

fn synth(cfg: &TrainConfig, out: &Path, n_per_class: usize, clinic_total: Option<usize>, size: Option<usize>) -> Result<()> {
    let size = size.unwrap_or(cfg.model.image_size);
    let counts = match clinic_total {
        Some(t) => class_counts_like_clinic(t),
        None => [n_per_class; 3],
    };
    let (samples, factors) = synth_dataset_with_counts(counts, size, cfg.seed)?;
    let split = split_by_patient(&samples, cfg.test_fraction, cfg.seed)?;
    write_dataset(out, &samples, Some(&factors), Some(&split))?;
    info!(
        "wrote {} samples ({} test) at {size} px to {}",
        samples.len(),
        split.test_ids.len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: TrainConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = read_dataset(data)?;
    if ds.manifest.image_size != cfg.model.image_size {
        return Err(format_err(format!(
            "dataset is {} px but the model expects {} px; pick a matching --preset",
            ds.manifest.image_size, cfg.model.image_size
        )));
    }
    let train = ds.select(SplitChoice::Train);
    fsio::atomic_write(&out.join("config.json"), &serde_json::to_vec_pretty(&cfg)?)?;
    let mut trainer = Trainer::new(cfg.clone(), &train)?;
    info!(
        "training {} parameters on {} samples, {} batches per epoch",
        trainer.model.parameter_count(),
        train.len(),
        trainer.batches_per_epoch()
    );
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    for _ in 0..cfg.epochs {
        let rep = trainer.run_epoch(&train)?;
        let l = rep.losses;
        if rep.triplets == 0 {
            warn!("epoch {}: no triplets were mined", rep.epoch);
        }
        info!(
            "epoch {} total {:.5} ssim {:.5} bce {:.5} kl {:.5} triplet {:.5}",
            rep.epoch, l.total, l.ssim_loss, l.bce_loss, l.kl_loss, l.triplet_loss
        );
        rows.push((rep.epoch, l));
        fsio::atomic_write(&out.join("metrics.csv"), &tables::encode_metrics(&rows)?)?;
        let save = |name: &str| {
            checkpoint::save(&out.join(name), &trainer.model, Some(&trainer.adam), rep.epoch, cfg.seed, Some(l))
        };
        if l.total < best {
            best = l.total;
            save("best.ckpt")?;
        }
        if rep.epoch % cfg.checkpoint_every == 0 || rep.epoch == cfg.epochs {
            save("latest.ckpt")?;
        }
    }
    Ok(())
}

fn embed_cmd(ckpt: &Path, data: &Path, split: SplitChoice, out: &Path) -> Result<()> {
    let mut model = checkpoint::load(ckpt)?.model;
    let ds = read_dataset(data)?;
    let samples = ds.select(split);
    if samples.is_empty() {
        return Err(format_err("the selected split is empty"));
    }
    let mu = embed(&mut model, &samples)?;
    let e = Embeddings {
        sample_ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
        labels: samples.iter().map(|s| s.label).collect(),
        points: mu,
    };
    fsio::atomic_write(out, &tables::encode_embeddings(&e)?)?;
    info!("embedded {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn read_embeddings(path: &Path) -> Result<Embeddings> {
    tables::decode_embeddings(&fsio::read(path)?)
}

fn fit_kde_cmd(cfg: &TrainConfig, path: &Path, out: &Path, folds: usize) -> Result<()> {
    let e = read_embeddings(path)?;
    for fit in fit_class_kdes(&e.points, &e.labels, folds, cfg.seed)? {
        let m = &fit.model;
        if fit.selected_index() == 0 || fit.selected_index() + 1 == fit.cv_curve.len() {
            warn!("{}: bandwidth {} is at the edge of the search grid", m.class, m.bandwidth);
        }
        info!("{}: {} points, bandwidth {:.5}", m.class, m.len(), m.bandwidth);
        kde_io::write_kde(out, m, &fit.cv_curve)?;
    }
    Ok(())
}

fn sample_cmd(cfg: &TrainConfig, ckpt: &Path, kde: &Path, class: Label, n: usize, out: &Path) -> Result<()> {
    if n == 0 {
        return Err(format_err("--n must be at least 1"));
    }
    let mut model = checkpoint::load(ckpt)?.model;
    let kdes = kde_io::read_kde_set(kde)?;
    let k = kdes.get(class).ok_or_else(|| format_err(format!("no KDE for class {class} in {}", kde.display())))?;
    if k.dim() != model.config.latent_dim {
        return Err(format_err(format!(
            "KDE has {} dimensions, model latent has {}",
            k.dim(),
            model.config.latent_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = k.sample(n, &mut rng);
    let (images, wbts) = model.decode_batch(&z)?;
    let size = model.config.image_size;
    let one = |t: &Tensor, i: usize, c: usize| Tensor::new([c, size, size], t.sample(i).to_vec());
    for i in 0..n {
        fsio::atomic_write(&out.join(format!("sample_{i:03}.ppm")), &netpbm::encode_ppm(&one(&images, i, 3)?)?)?;
        fsio::atomic_write(&out.join(format!("sample_{i:03}_wbt.pgm")), &netpbm::encode_pgm(&one(&wbts, i, 1)?)?)?;
    }
    let csv = tables::encode_wbt_long(&pressure_axis(size), &frequency_axis(size), &wbts)?;
    fsio::atomic_write(&out.join("wbt.csv"), &csv)?;
    info!("wrote {n} {class} samples to {}", out.display());
    Ok(())
}

fn project_cmd(
    cfg: &TrainConfig,
    path: &Path,
    method: MethodArg,
    perplexity: Option<f64>,
    iterations: Option<usize>,
    out: &Path,
) -> Result<()> {
    let e = read_embeddings(path)?;
    let mut tc = TsneConfig {
        seed: cfg.seed,
        ..TsneConfig::default()
    };
    if let Some(p) = perplexity {
        tc.perplexity = p;
    }
    if let Some(i) = iterations {
        tc.iterations = i;
    }
    let m = match method {
        MethodArg::Pca => Method::Pca,
        MethodArg::Tsne => Method::Tsne,
    };
    let r = project(&e.points, m, &tc)?;
    fsio::atomic_write(out, &tables::encode_projection(&e.sample_ids, &e.labels, &r.coords)?)
}

fn eval_cmd(
    cfg: &TrainConfig,
    ckpt: &Path,
    data: &Path,
    split: SplitChoice,
    kde: Option<&Path>,
    generate: usize,
    out: &Path,
) -> Result<()> {
    if generate == 0 {
        return Err(format_err("--generate must be at least 1"));
    }
    let mut model = checkpoint::load(ckpt)?.model;
    let ds = read_dataset(data)?;
    let samples = ds.select(split);
    let kdes = kde.map(kde_io::read_kde_set).transpose()?;
    let split_name = format!("{split:?}").to_lowercase();
    let report = evaluate(
        &mut model,
        &samples,
        EvalOptions {
            split: &split_name,
            loss: &cfg.loss,
            kdes,
            generate,
            seed: cfg.seed,
        },
    )?;
    info!(
        "{split_name}: total loss {:.5}, silhouette {:.4}",
        report.losses.total, report.silhouette
    );
    fsio::atomic_write(out, &serde_json::to_vec_pretty(&report)?)
}

fn resample_cmd(input: &Path, steps: usize, out: &Path) -> Result<()> {
    let raw = tables::decode_wbt_matrix(&fsio::read(input)?)?;
    let grid = resample_wbt(&raw, steps)?;
    let csv = tables::encode_wbt_matrix(&pressure_axis(steps), &frequency_axis(steps), grid.data())?;
    fsio::atomic_write(out, &csv)
}
