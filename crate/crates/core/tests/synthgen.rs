use ranksemi::metrics::{mean_ap, mean_ap_from_scores};
use ranksemi::synthgen::{generate, SynthData, SynthSpec};
use ranksemi::trainer::{train, Method, TrainingConfig};
use ranksemi::Dataset;

#[test]
fn noise_count_matches_fraction() {
    let spec = SynthSpec {
        n_labelled: 200,
        n_unlabelled: 2000,
        noise_fraction: 0.1,
        n_val: 10,
        n_test: 10,
        seed: 3,
        ..SynthSpec::default()
    };
    let d: SynthData<f64> = generate(&spec).unwrap();
    assert_eq!(d.noise_flags.values().filter(|&&f| f).count(), 200);
    assert_eq!(d.noise_flags.len(), 2000);

    for img in d.unlabelled.images() {
        assert!(!img.labelled);
        assert!(img.persons.iter().all(|p| p.label.is_none()));
    }
    for ds in [&d.labelled, &d.val, &d.test] {
        for img in ds.images() {
            assert_eq!(img.important_indices().len(), 1, "{}", img.id);
            assert!((2..=12).contains(&img.len()));
        }
    }
}

#[test]
fn zero_noise_flags_all_false() {
    let d: SynthData<f64> = generate(&SynthSpec {
        noise_fraction: 0.0,
        n_unlabelled: 50,
        ..SynthSpec::default()
    })
    .unwrap();
    assert!(d.noise_flags.values().all(|&f| !f));
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let spec = SynthSpec {
        n_labelled: 10,
        n_unlabelled: 20,
        n_val: 5,
        n_test: 5,
        seed: 12,
        ..SynthSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate::<f64>(&spec).unwrap().write_dir(a.path()).unwrap();
    generate::<f64>(&spec).unwrap().write_dir(b.path()).unwrap();
    for f in SynthData::<f64>::FILES {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let other = generate::<f64>(&SynthSpec { seed: 13, ..spec }).unwrap();
    assert_ne!(other.labelled, generate::<f64>(&spec).unwrap().labelled);
}

#[test]
fn invalid_specs_are_rejected() {
    for spec in [
        SynthSpec { noise_fraction: 1.0, ..SynthSpec::default() },
        SynthSpec { people_min: 5, people_max: 3, ..SynthSpec::default() },
    ] {
        assert!(generate::<f64>(&spec).is_err());
    }
}

/// Per-person logistic regression that never sees the rest of the group.
fn linear_probe(train: &Dataset<f64>) -> Vec<f64> {
    let dim = train.feature_dim();
    let mut w = vec![0.0; dim + 1];
    let rows: Vec<(&[f64], f64)> = train
        .images()
        .iter()
        .flat_map(|img| {
            img.persons
                .iter()
                .map(|p| (p.features.as_slice(), if p.label == Some(true) { 1.0 } else { 0.0 }))
        })
        .collect();
    for _ in 0..500 {
        let mut g = vec![0.0; dim + 1];
        for (x, y) in &rows {
            let z: f64 = w[dim] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            for (gi, xi) in g.iter_mut().zip(x.iter()) {
                *gi += err * xi;
            }
            g[dim] += err;
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= 0.1 * gi / rows.len() as f64;
        }
    }
    w
}

#[test]
fn importance_is_relational() {
    let d: SynthData<f64> = generate(&SynthSpec { seed: 21, ..SynthSpec::default() }).unwrap();
    let w = linear_probe(&d.labelled);
    let dim = d.labelled.feature_dim();
    let probe_items: Vec<(Vec<f64>, Vec<bool>)> = d
        .test
        .images()
        .iter()
        .map(|img| {
            let s = img
                .persons
                .iter()
                .map(|p| w[dim] + p.features.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            (s, img.labels().unwrap())
        })
        .collect();
    let probe = mean_ap_from_scores(&probe_items).unwrap();

    let cfg = TrainingConfig {
        method: Method::Supervised,
        ..TrainingConfig::default()
    };
    let (model, _) = train(&cfg, &d.labelled, &d.unlabelled, &d.val).unwrap();
    let relational = mean_ap(&model, &d.test).unwrap();
    assert!(relational > probe + 0.1, "relation model {relational:.4} vs probe {probe:.4}");
}
