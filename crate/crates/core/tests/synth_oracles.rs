use nalgebra::{DMatrix, DVector};
use qpmil_core::linalg::dot;
use qpmil_core::{generate_sequence, Bag, GeneratorConfig};

fn mean_pool(bag: &Bag) -> Vec<f64> {
    bag.features.row_mean()
}

/// Ridge least-squares probe per dataset on mean-pooled features; returns the lowest test accuracy.
fn worst_probe_accuracy(config: &GeneratorConfig) -> f64 {
    let data = generate_sequence::<f64>(config).unwrap();
    let mut worst = 1.0f64;
    for ds in &data.datasets {
        let c = ds.labels.len();
        let d = config.dim + 1;
        let design = |bags: &[Bag]| {
            DMatrix::from_fn(bags.len(), d, |i, j| if j < config.dim { mean_pool(&bags[i])[j] } else { 1.0 })
        };
        let x = design(&ds.train);
        let y = DMatrix::from_fn(ds.train.len(), c, |i, k| if ds.local_index(ds.train[i].label) == Some(k) { 1.0 } else { -1.0 });
        let gram = x.transpose() * &x + DMatrix::identity(d, d) * 1e-3;
        let w = gram.cholesky().expect("ridge system is positive definite").solve(&(x.transpose() * y));
        let scores = design(&ds.test) * w;
        let correct = ds
            .test
            .iter()
            .enumerate()
            .filter(|(i, b)| {
                let row: DVector<f64> = scores.row(*i).transpose();
                Some(row.argmax().0) == ds.local_index(b.label)
            })
            .count();
        worst = worst.min(correct as f64 / ds.test.len() as f64);
    }
    worst
}

#[test]
fn linear_probe_learns_default_benchmark() {
    let acc = worst_probe_accuracy(&GeneratorConfig::default());
    assert!(acc >= 0.9, "probe accuracy {acc}");
}

#[test]
fn noiseless_pure_signal_is_nearest_centroid_separable() {
    let config = GeneratorConfig {
        signal_ratio: 1.0,
        noise: 1e-9,
        bag_size_min: 4,
        bag_size_max: 12,
        train_per_dataset: 20,
        test_per_dataset: 10,
        ..GeneratorConfig::default()
    };
    let data = generate_sequence::<f64>(&config).unwrap();
    let centroids = &data.truth.class_centroids;
    for ds in &data.datasets {
        for bag in ds.all_bags() {
            for row in bag.features.row_iter() {
                // Every instance lies on one of its class's centroids.
                let (best, cos) = centroids
                    .iter()
                    .enumerate()
                    .flat_map(|(class, cs)| cs.iter().map(move |c| (class, dot(row, c))))
                    .fold((usize::MAX, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                assert_eq!(best, bag.label, "{}", bag.bag_id);
                assert!(cos > 1.0 - 1e-12);
            }
        }
    }
}

#[test]
fn signal_masks_mark_class_instances() {
    let config = GeneratorConfig { train_per_dataset: 10, test_per_dataset: 4, noise: 0.05, ..GeneratorConfig::default() };
    let data = generate_sequence::<f64>(&config).unwrap();
    for ds in &data.datasets {
        for bag in ds.all_bags() {
            let mask = &data.truth.signal_masks[&bag.bag_id];
            let own = &data.truth.class_centroids[bag.label];
            for (row, signal) in bag.features.row_iter().zip(mask) {
                let near_own = own.iter().map(|c| dot(row, c)).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(near_own > 0.9, *signal, "{}", bag.bag_id);
            }
        }
    }
}

#[test]
fn imbalanced_preset_keeps_budget() {
    let preset = GeneratorConfig::tcga_preset();
    let sizes = preset.train_sizes.clone().unwrap();
    assert_eq!(sizes.iter().sum::<usize>(), 4 * GeneratorConfig::default().train_per_dataset);
    assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    let data = generate_sequence::<f64>(&preset).unwrap();
    for (ds, n) in data.datasets.iter().zip(&sizes) {
        assert_eq!(ds.train.len(), *n);
    }
}
