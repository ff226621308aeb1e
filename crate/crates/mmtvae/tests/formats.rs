use mmtvae::{checkpoint, dataset, kde_io, netpbm, records, tables};
use mmtvae_core::data::{pressure_axis, frequency_axis, split_by_patient, synth_dataset, Label, WbtRawGrid};
use mmtvae_core::latent::{ClassKdeSet, KdeModel};
use mmtvae_core::loss::{LossReport, LossWeights};
use mmtvae_core::model::{ModelConfig, TripletVae};
use mmtvae_core::optim::{AdamConfig, AdamState};
use mmtvae_core::Tensor;
use proptest::prelude::*;

fn f32_tensor(shape: &[usize], values: impl Fn(usize) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| values(i) as f32 as f64).collect()).unwrap()
}

#[test]
fn record_container_round_trips() {
    let a = f32_tensor(&[2, 3], |i| i as f64 * 0.1 - 0.2);
    let b = Tensor::scalar(1.5);
    let e = f32_tensor(&[0, 4], |_| 0.0);
    let bytes = records::encode(b"TEST", b"{\"k\":1}", &[("a", &a), ("b", &b), ("empty", &e)]).unwrap();
    let c = records::decode(b"TEST", &bytes).unwrap();
    assert_eq!(c.header, b"{\"k\":1}");
    assert_eq!(c.records, vec![("a".into(), a), ("b".into(), b), ("empty".into(), e)]);
}

#[test]
fn record_container_rejects_damage() {
    let a = f32_tensor(&[4], |i| i as f64);
    let bytes = records::encode(b"TEST", b"", &[("a", &a)]).unwrap();
    assert!(records::decode(b"XXXX", &bytes).is_err());
    for cut in [3, 10, bytes.len() - 1] {
        assert!(records::decode(b"TEST", &bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(records::decode(b"TEST", &extra).is_err());
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(records::decode(b"TEST", &version).unwrap_err().to_string().contains("version"));
}

fn small_model() -> TripletVae {
    let cfg = ModelConfig {
        image_size: 8,
        enc_widths: vec![2, 4],
        dec_widths: vec![4, 2, 2],
        latent_dim: 3,
        ..ModelConfig::desk()
    };
    TripletVae::new(cfg, 11).unwrap()
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let model = small_model();
    let mut adam = AdamState::new(AdamConfig::default(), &model.params);
    adam.step = 17;
    for (_, m, v) in adam.moments.iter_mut() {
        *m = f32_tensor(m.shape(), |i| (i as f64 * 0.37).sin() * 1e-3);
        *v = f32_tensor(v.shape(), |i| (i as f64 * 0.11).cos().abs() * 1e-6);
    }
    let metrics = LossReport::new(0.3, 0.6, 1.2, 0.05, &LossWeights::default());
    let first = checkpoint::encode(&model, Some(&adam), 42, 7, Some(metrics)).unwrap();
    let ck = checkpoint::decode(&first).unwrap();
    assert_eq!(ck.header.epoch, 42);
    assert_eq!(ck.header.seed, 7);
    assert_eq!(ck.header.model, model.config);
    assert_eq!(ck.header.metrics, Some(metrics));
    assert_eq!(ck.adam.as_ref(), Some(&adam));
    let second = checkpoint::encode(&ck.model, ck.adam.as_ref(), 42, 7, Some(metrics)).unwrap();
    assert_eq!(first, second);
}

#[test]
fn checkpoint_without_optimizer_state() {
    let model = small_model();
    let bytes = checkpoint::encode(&model, None, 0, 0, None).unwrap();
    let ck = checkpoint::decode(&bytes).unwrap();
    assert!(ck.adam.is_none());
    for ((_, a), (_, b)) in ck.model.params.iter().zip(model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn checkpoint_detects_config_mismatch() {
    let model = small_model();
    let bytes = checkpoint::encode(&model, None, 0, 0, None).unwrap();
    let c = records::decode(checkpoint::MAGIC, &bytes).unwrap();
    let mut header: serde_json::Value = serde_json::from_slice(&c.header).unwrap();
    header["model"]["latent_dim"] = 4.into();
    let recs: Vec<(&str, &Tensor)> = c.records.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let bad = records::encode(checkpoint::MAGIC, &serde_json::to_vec(&header).unwrap(), &recs).unwrap();
    assert!(checkpoint::decode(&bad).is_err());
}

#[test]
fn dataset_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (samples, factors) = synth_dataset(4, 8, 3).unwrap();
    let split = split_by_patient(&samples, 0.25, 3).unwrap();
    dataset::write_dataset(dir.path(), &samples, Some(&factors), Some(&split)).unwrap();
    let ds = dataset::read_dataset(dir.path()).unwrap();
    assert_eq!(ds.samples, samples);
    assert_eq!(ds.manifest.split.as_ref(), Some(&split));
    let stored: Vec<_> = ds.manifest.samples.iter().map(|e| e.factors.unwrap()).collect();
    assert_eq!(stored, factors);
    let test = ds.select(dataset::SplitChoice::Test);
    let train = ds.select(dataset::SplitChoice::Train);
    assert_eq!(test.len() + train.len(), samples.len());
    assert!(test.iter().all(|s| split.is_test(&s.sample_id)));
}

#[test]
fn dataset_rejects_unsafe_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (mut samples, _) = synth_dataset(1, 4, 0).unwrap();
    samples[0].sample_id = "../escape".into();
    assert!(dataset::write_dataset(dir.path(), &samples, None, None).is_err());
}

#[test]
fn netpbm_headers_and_quantization() {
    let img = Tensor::new([3, 1, 2], vec![0.0, 1.0, 0.5, 0.25, 2.0, -1.0]).unwrap();
    let ppm = netpbm::encode_ppm(&img).unwrap();
    assert!(ppm.starts_with(b"P6\n2 1\n255\n"));
    assert_eq!(&ppm[ppm.len() - 6..], &[0, 128, 255, 255, 64, 0]);
    let p = netpbm::decode(&ppm).unwrap();
    assert_eq!((p.channels, p.width, p.height, p.maxval), (3, 2, 1, 255));

    let gray = Tensor::new([1, 2, 2], vec![0.0, 0.2, 0.6, 1.0]).unwrap();
    let pgm = netpbm::encode_pgm(&gray).unwrap();
    assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
    assert_eq!(netpbm::decode(&pgm).unwrap().pixels, vec![0, 51, 153, 255]);
    assert!(netpbm::encode_ppm(&gray).is_err());
}

#[test]
fn netpbm_decoder_skips_comments() {
    let bytes = b"P5\n# made by hand\n2 1\n255\n\x07\x09";
    let p = netpbm::decode(bytes).unwrap();
    assert_eq!(p.pixels, vec![7, 9]);
}

#[test]
fn metrics_log_round_trips() {
    let w = LossWeights::default();
    let rows = vec![(1, LossReport::new(0.5, 0.7, 2.0, 0.1, &w)), (2, LossReport::new(0.4, 0.6, 1.5, 0.0, &w))];
    let bytes = tables::encode_metrics(&rows).unwrap();
    assert!(bytes.starts_with(b"epoch,ssim,bce,kl,triplet,total\n"));
    assert_eq!(tables::decode_metrics(&bytes).unwrap(), rows);
}

#[test]
fn embedding_csv_round_trips() {
    let e = tables::Embeddings {
        sample_ids: vec!["S00000".into(), "S00001".into()],
        labels: vec![Label::AOM, Label::NOE],
        points: Tensor::new([2, 3], vec![0.1, -2.5, 1e-9, 3.0, 0.0, -0.125]).unwrap(),
    };
    let bytes = tables::encode_embeddings(&e).unwrap();
    assert!(bytes.starts_with(b"sample_id,label,mu_0,mu_1,mu_2\n"));
    assert_eq!(tables::decode_embeddings(&bytes).unwrap(), e);
}

#[test]
fn wbt_matrix_round_trips() {
    let p = vec![100.0, 0.0, -100.0];
    let f = vec![250.0, 1000.0];
    let grid = WbtRawGrid::new(p.clone(), f.clone(), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let bytes = tables::encode_wbt_matrix(&p, &f, &grid.absorbance).unwrap();
    assert_eq!(tables::decode_wbt_matrix(&bytes).unwrap(), grid);
}

#[test]
fn long_wbt_csv_has_one_row_per_cell() {
    let grids = Tensor::zeros([2, 1, 4, 4]);
    let bytes = tables::encode_wbt_long(&pressure_axis(4), &frequency_axis(4), &grids).unwrap();
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 16);
    assert!(text.starts_with("sample,pressure_dapa,frequency_hz,absorbance\n0,180,226,0\n"));
}

#[test]
fn kde_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let points = f32_tensor(&[5, 2], |i| i as f64 * 0.3 - 1.0);
    let m = KdeModel::new(Label::OME, 0.25, points).unwrap();
    kde_io::write_kde(dir.path(), &m, &[(0.25, -1.0)]).unwrap();
    let set = kde_io::read_kde_set(dir.path()).unwrap();
    assert_eq!(set, ClassKdeSet::new(vec![m]).unwrap());
    assert!(set.get(Label::AOM).is_none());
}

proptest! {
    #[test]
    fn records_preserve_f32_values(values in prop::collection::vec(-1e6f32..1e6, 0..64), name in "[a-z.]{1,12}") {
        let n = values.len();
        let t = Tensor::new([n], values.iter().map(|&v| v as f64).collect()).unwrap();
        let bytes = records::encode(b"PROP", b"", &[(name.as_str(), &t)]).unwrap();
        let c = records::decode(b"PROP", &bytes).unwrap();
        prop_assert_eq!(&c.records[0].0, &name);
        prop_assert_eq!(&c.records[0].1, &t);
    }
}
