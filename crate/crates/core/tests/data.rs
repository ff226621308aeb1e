use std::collections::BTreeSet;

use mmtvae_core::data::{
    augment, augment_with_target, frequency_axis, hflip, render_raw_wbt, pressure_axis, random_erase, resample_wbt, split_by_patient, synth_dataset,
    synth_dataset_with_counts, AugmentConfig, BalancedSampler, Label, PairedSample, WbtRawGrid,
};
use mmtvae_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn raw_axes() -> (Vec<f64>, Vec<f64>) {
    let p: Vec<f64> = (0..=50).map(|i| 200.0 - 10.0 * i as f64).collect();
    let f: Vec<f64> = (0..80).map(|i| 226.0 * (8000f64 / 226.0).powf(i as f64 / 79.0)).collect();
    (p, f)
}

#[test]
fn target_axes() {
    let p = pressure_axis(64);
    assert_eq!(p.len(), 64);
    assert_eq!(p[0], 180.0);
    assert_eq!(p[63], -280.0);
    let step = (p[0] - p[63]) / 63.0;
    assert!(p.windows(2).all(|w| ((w[0] - w[1]) - step).abs() < 1e-9));
    let f = frequency_axis(64);
    assert_eq!((f[0], f[63]), (226.0, 4000.0));
    let ratio = f[1] / f[0];
    assert!(f.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-9));
}

#[test]
fn resample_reproduces_bilinear_surface() {
    let (p, f) = raw_axes();
    let surf = |p: f64, f: f64| 0.5 + 4e-4 * p - 3e-5 * f + 1e-7 * p * f;
    let raw = WbtRawGrid::from_fn(p, f, surf).unwrap();
    let out = resample_wbt(&raw, 64).unwrap();
    assert_eq!(out.shape(), &[1, 64, 64]);
    let (tp, tf) = (pressure_axis(64), frequency_axis(64));
    for (i, &pp) in tp.iter().enumerate() {
        for (j, &ff) in tf.iter().enumerate() {
            let want = surf(pp, ff);
            assert!((0.0..=1.0).contains(&want));
            assert!((out.data()[i * 64 + j] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn resample_constant_and_clamp() {
    let (p, f) = raw_axes();
    let raw = WbtRawGrid::from_fn(p.clone(), f.clone(), |_, _| 0.37).unwrap();
    assert!(resample_wbt(&raw, 16).unwrap().data().iter().all(|&v| v == 0.37));
    let raw = WbtRawGrid::from_fn(p, f, |p, _| p / 100.0).unwrap();
    let out = resample_wbt(&raw, 16).unwrap();
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn resample_names_uncovered_axis() {
    let (_, f) = raw_axes();
    let p: Vec<f64> = (0..=10).map(|i| 100.0 - 10.0 * i as f64).collect();
    let err = resample_wbt(&WbtRawGrid::from_fn(p, f, |_, _| 0.5).unwrap(), 8).unwrap_err();
    assert!(err.to_string().contains("pressure"), "{err}");
    let (p, _) = raw_axes();
    let f: Vec<f64> = (0..10).map(|i| 300.0 + 500.0 * i as f64).collect();
    let err = resample_wbt(&WbtRawGrid::from_fn(p, f, |_, _| 0.5).unwrap(), 8).unwrap_err();
    assert!(err.to_string().contains("frequency"), "{err}");
}

#[test]
fn synth_is_deterministic_and_valid() {
    let (a, fa) = synth_dataset(4, 16, 9).unwrap();
    let (b, fb) = synth_dataset(4, 16, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(fa, fb);
    let (c, _) = synth_dataset(4, 16, 10).unwrap();
    assert_ne!(a, c);
    for s in &a {
        s.validate().unwrap();
        assert_eq!(s.image.shape(), &[3, 16, 16]);
        assert_eq!(s.wbt.shape(), &[1, 16, 16]);
    }
    let ids: BTreeSet<_> = a.iter().map(|s| &s.sample_id).collect();
    assert_eq!(ids.len(), a.len());
}

#[test]
fn noe_ridge_sits_at_the_peak_pressure() {
    let (_, factors) = synth_dataset(60, 8, 21).unwrap();
    let noe: Vec<_> = factors.iter().filter(|f| f.class == Label::NOE).collect();
    let mut ridged = 0;
    for fac in &noe {
        let raw = render_raw_wbt(fac);
        let nf = raw.frequencies.len();
        let (mut near, mut n_near, mut far, mut n_far) = (0.0, 0, 0.0, 0);
        for (i, &p) in raw.pressures.iter().enumerate() {
            let row = &raw.absorbance[i * nf..(i + 1) * nf];
            let d = (p - fac.pressure_peak_center).abs();
            if d <= 40.0 {
                near += row.iter().sum::<f64>();
                n_near += nf;
            } else if d >= 150.0 {
                far += row.iter().sum::<f64>();
                n_far += nf;
            }
        }
        if near / n_near as f64 > far / n_far as f64 + 0.1 {
            ridged += 1;
        }
    }
    // Tilt and artifact blobs can mask the ridge in a few ears.
    assert!(ridged * 10 >= noe.len() * 9, "{ridged} of {}", noe.len());
}

fn low_freq_mean(s: &PairedSample) -> f64 {
    let (h, w) = (s.wbt.shape()[1], s.wbt.shape()[2]);
    let cols = w / 8;
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..cols {
            acc += s.wbt.data()[i * w + j];
        }
    }
    acc / (h * cols) as f64
}

#[test]
fn aom_absorbs_less_than_noe_at_low_frequencies() {
    let (samples, _) = synth_dataset(100, 32, 5).unwrap();
    let mean = |l: Label| {
        let v: Vec<f64> = samples.iter().filter(|s| s.label == l).map(low_freq_mean).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(Label::AOM) < mean(Label::NOE));
    assert!(mean(Label::OME) < mean(Label::NOE));
}

#[test]
fn nearest_class_mean_separates_raw_wbt() {
    let (samples, _) = synth_dataset(150, 32, 77).unwrap();
    let (fit, held): (Vec<_>, Vec<_>) = samples.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let d = samples[0].wbt.numel();
    let mut means = vec![vec![0.0; d]; 3];
    let mut counts = [0usize; 3];
    for (_, s) in &fit {
        let k = s.label.index();
        means[k].iter_mut().zip(s.wbt.data()).for_each(|(m, v)| *m += v);
        counts[k] += 1;
    }
    for k in 0..3 {
        means[k].iter_mut().for_each(|m| *m /= counts[k] as f64);
    }
    let correct = held
        .iter()
        .filter(|(_, s)| {
            let dist = |m: &Vec<f64>| m.iter().zip(s.wbt.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let pred = (0..3).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            pred == s.label.index()
        })
        .count();
    let acc = correct as f64 / held.len() as f64;
    assert!(acc >= 0.9, "accuracy {acc}");
}

#[test]
fn disabled_augmentation_is_identity() {
    let (samples, _) = synth_dataset(2, 16, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in &samples {
        assert_eq!(&augment(s, &AugmentConfig::disabled(), &mut rng), s);
    }
}

#[test]
fn training_target_is_the_input_before_erasing() {
    let (samples, _) = synth_dataset(3, 16, 4).unwrap();
    let erase_only = AugmentConfig { erase_prob: 1.0, ..AugmentConfig::disabled() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in &samples {
        let (input, target) = augment_with_target(s, &erase_only, &mut rng);
        assert_eq!(&target, s);
        assert_ne!(input.wbt, s.wbt);
        assert_ne!(input.image, s.image);
    }
    // Flips and rotations reach the target; a seeded pair matches `augment`.
    let geometric = AugmentConfig { erase_prob: 0.0, ..AugmentConfig::default() };
    let (input, target) = augment_with_target(&samples[0], &geometric, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(input, target);
    assert_ne!(target.image, samples[0].image);
    let cfg = AugmentConfig::default();
    let (input, _) = augment_with_target(&samples[1], &cfg, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(input, augment(&samples[1], &cfg, &mut ChaCha8Rng::seed_from_u64(5)));
}

#[test]
fn hflip_is_an_involution() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Tensor::from_fn([3, 5, 7], |_| rng.random());
    assert_ne!(hflip(&t), t);
    assert_eq!(hflip(&hflip(&t)), t);
}

#[test]
fn erased_fraction_stays_in_bounds() {
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut t = Tensor::zeros([1, 32, 32]);
    let mut placed = 0;
    for _ in 0..10_000 {
        if let Some((top, left, h, w)) = random_erase(&mut t, &cfg, &mut rng) {
            let frac = (h * w) as f64 / 1024.0;
            assert!((0.02..=0.33).contains(&frac), "{frac}");
            assert!(top + h <= 32 && left + w <= 32);
            placed += 1;
        }
    }
    assert!(placed > 9_900);
}

#[test]
fn split_of_ten_even_patients() {
    let samples: Vec<PairedSample> = (0..100)
        .map(|i| PairedSample {
            image: Tensor::zeros([3, 2, 2]),
            wbt: Tensor::zeros([1, 2, 2]),
            label: Label::ALL[i % 3],
            patient_id: format!("P{}", i / 10),
            sample_id: format!("S{i}"),
        })
        .collect();
    let m = split_by_patient(&samples, 0.2, 4).unwrap();
    assert_eq!(m.patients.values().filter(|v| *v == "test").count(), 2);
    assert_eq!(m.test_ids.len(), 20);
    assert_eq!(m, split_by_patient(&samples, 0.2, 4).unwrap());
    assert!(split_by_patient(&samples[..10], 0.2, 4).is_err());
}

#[test]
fn balanced_batches_oversample_small_class() {
    let mut labels = vec![Label::AOM; 5];
    labels.extend(vec![Label::OME; 30]);
    labels.extend(vec![Label::NOE; 47]);
    let mut s = BalancedSampler::new(&labels, 20).unwrap();
    assert_eq!(s.batches_per_epoch(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut noe_seen = Vec::new();
    for _ in 0..3 {
        let b = s.next_batch(&mut rng);
        let mut hist = [0; 3];
        b.iter().for_each(|&i| hist[labels[i].index()] += 1);
        assert_eq!(hist, [20, 20, 20]);
        noe_seen.extend(b.iter().copied().filter(|&i| labels[i] == Label::NOE));
    }
    // The first 47 NOE draws are a permutation of the class.
    let first: BTreeSet<usize> = noe_seen[..47].iter().copied().collect();
    assert_eq!(first.len(), 47);
    assert!(BalancedSampler::new(&labels[5..], 20).is_err());
}

proptest! {
    #[test]
    fn split_is_patient_disjoint(seed in any::<u64>(), n in 10usize..80) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<PairedSample> = (0..n)
            .map(|i| PairedSample {
                image: Tensor::zeros([3, 1, 1]),
                wbt: Tensor::zeros([1, 1, 1]),
                label: Label::ALL[i % 3],
                patient_id: format!("P{}", rng.random_range(0..n / 2)),
                sample_id: format!("S{i}"),
            })
            .collect();
        prop_assume!(samples.iter().map(|s| &s.patient_id).collect::<BTreeSet<_>>().len() >= 2);
        let m = split_by_patient(&samples, 0.2, seed).unwrap();
        let side = |id: &String| samples.iter().find(|s| &s.sample_id == id).unwrap().patient_id.clone();
        let tr: BTreeSet<_> = m.train_ids.iter().map(side).collect();
        let te: BTreeSet<_> = m.test_ids.iter().map(side).collect();
        prop_assert!(tr.is_disjoint(&te));
        prop_assert_eq!(m.train_ids.len() + m.test_ids.len(), n);
    }

    #[test]
    fn augmentation_preserves_metadata(seed in any::<u64>()) {
        let (samples, _) = synth_dataset_with_counts([1, 1, 1], 12, seed % 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &samples {
            let a = augment(s, &AugmentConfig::default(), &mut rng);
            prop_assert_eq!(a.label, s.label);
            prop_assert_eq!(&a.sample_id, &s.sample_id);
            prop_assert_eq!(&a.patient_id, &s.patient_id);
            prop_assert_eq!(a.image.shape(), s.image.shape());
            prop_assert_eq!(a.wbt.shape(), s.wbt.shape());
            prop_assert!(a.validate().is_ok());
        }
    }

    #[test]
    fn every_batch_is_balanced(seed in any::<u64>(), per in 1usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<Label> = (0..rng.random_range(3..90)).map(|i| Label::ALL[if i < 3 { i } else { rng.random_range(0..3) }]).collect();
        let mut s = BalancedSampler::new(&labels, per).unwrap();
        for _ in 0..10 {
            let mut hist = [0; 3];
            s.next_batch(&mut rng).iter().for_each(|&i| hist[labels[i].index()] += 1);
            prop_assert_eq!(hist, [per; 3]);
        }
    }
}
