//! Seeded generator of incremental bag-classification sequences.
//!
//! Every dataset owns `classes_per_dataset` classes, each represented by a few
//! latent centroids. A bag mixes `⌈ρ·n⌉` signal instances drawn around its
//! class's centroids with background instances drawn around centroids shared by
//! every dataset. All instances are unit-normalised.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetOrder, DatasetSplit, EnsembleCatalog, IncrementalSequence, InstanceBag};
use crate::error::{Error, Result};
use crate::linalg::{dot, normalized, Matrix};
use crate::scalar::Scalar;
use crate::seeds::derive_seed;

/// Slide totals of the four TCGA cohorts (NSCLC, BRCA, RCC, ESCA).
pub const TCGA_SLIDE_COUNTS: [usize; 4] = [965, 952, 768, 150];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub datasets: usize,
    pub classes_per_dataset: usize,
    pub centroids_per_class: usize,
    pub dim: usize,
    pub bag_size_min: usize,
    pub bag_size_max: usize,
    /// Fraction of each bag drawn near its class's centroids.
    pub signal_ratio: f64,
    /// Expected norm of the isotropic noise added before normalisation.
    pub noise: f64,
    pub background_centroids: usize,
    pub train_per_dataset: usize,
    pub test_per_dataset: usize,
    /// Per-dataset training sizes overriding `train_per_dataset`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_sizes: Option<Vec<usize>>,
    /// Minimum pairwise angle between all centroids, in degrees.
    pub min_angle_deg: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            datasets: 4,
            classes_per_dataset: 2,
            centroids_per_class: 3,
            dim: 64,
            bag_size_min: 32,
            bag_size_max: 128,
            signal_ratio: 0.2,
            noise: 0.3,
            background_centroids: 8,
            train_per_dataset: 200,
            test_per_dataset: 50,
            train_sizes: None,
            min_angle_deg: 60.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.signal_ratio > 0.0 && self.signal_ratio <= 1.0) {
            return bad("signal ratio must lie in (0, 1]");
        }
        if !self.noise.is_finite() || self.noise <= 0.0 {
            return bad("noise scale must be positive");
        }
        if self.datasets == 0 || self.classes_per_dataset == 0 || self.centroids_per_class == 0 || self.dim == 0 {
            return bad("dataset, class, centroid and dimension counts must be positive");
        }
        if self.bag_size_min == 0 || self.bag_size_min > self.bag_size_max {
            return bad("bag size range must be non-empty and start above zero");
        }
        if self.signal_ratio < 1.0 && self.background_centroids == 0 {
            return bad("background instances need at least one background centroid");
        }
        if let Some(sizes) = &self.train_sizes {
            if sizes.len() != self.datasets {
                return bad("train_sizes needs one entry per dataset");
            }
        }
        if !(0.0..=180.0).contains(&self.min_angle_deg) {
            return bad("minimum angle must lie in [0, 180] degrees");
        }
        Ok(())
    }

    pub fn train_size(&self, dataset: usize) -> usize {
        self.train_sizes.as_ref().map_or(self.train_per_dataset, |s| s[dataset])
    }

    /// Config with the four TCGA cohort proportions over the same training budget.
    pub fn tcga_preset() -> Self {
        emulate_imbalance(&Self::default(), &TCGA_SLIDE_COUNTS).expect("preset counts are valid")
    }
}

/// Splits `budget` in proportion to `counts`, rounding by largest remainder (ties to the earlier entry).
pub fn scale_counts(counts: &[usize], budget: usize) -> Result<Vec<usize>> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::InvalidInput("counts must be positive".into()));
    }
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    let mut out: Vec<usize> = counts.iter().map(|&c| (c as u128 * budget as u128 / total) as usize).collect();
    let mut rema: Vec<(u128, usize)> =
        counts.iter().enumerate().map(|(i, &c)| (c as u128 * budget as u128 % total, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = budget - out.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        out[i] += 1;
    }
    Ok(out)
}

/// Rescales per-dataset training sizes to the ratios of `counts`, keeping the total training budget.
pub fn emulate_imbalance(config: &GeneratorConfig, counts: &[usize]) -> Result<GeneratorConfig> {
    if counts.len() != config.datasets {
        return Err(Error::InvalidInput(format!("{} counts for {} datasets", counts.len(), config.datasets)));
    }
    if counts.iter().all(|&c| c == counts[0]) && counts[0] > 0 {
        return Ok(config.clone());
    }
    let budget = (0..config.datasets).map(|d| config.train_size(d)).sum();
    Ok(GeneratorConfig { train_sizes: Some(scale_counts(counts, budget)?), ..config.clone() })
}

/// Diagnostics that never reach training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `class_centroids[c]` holds the centroids of global class `c`.
    pub class_centroids: Vec<Vec<Vec<f64>>>,
    pub background_centroids: Vec<Vec<f64>>,
    /// Per bag id, which instances were drawn from class centroids.
    pub signal_masks: BTreeMap<String, Vec<bool>>,
}

/// Datasets in their natural order plus ground truth.
#[derive(Debug, Clone)]
pub struct GeneratedData<T> {
    pub datasets: Vec<DatasetSplit<T>>,
    pub truth: GroundTruth,
}

impl<T: Scalar> GeneratedData<T> {
    pub fn sequence(&self, order: DatasetOrder) -> Result<IncrementalSequence<T>> {
        IncrementalSequence::new(self.datasets.clone(), &order.permutation(self.datasets.len()))
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if dot(&v, &v) > 1e-12 {
            return normalized(&v);
        }
    }
}

/// `count` random unit vectors, pairwise separated by at least `min_angle_deg`.
fn separated_centroids(count: usize, dim: usize, min_angle_deg: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    const ATTEMPTS: usize = 10_000;
    let max_cos = min_angle_deg.to_radians().cos();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let accepted = (0..ATTEMPTS).map(|_| random_unit(rng, dim)).find(|c| out.iter().all(|o| dot(o, c) <= max_cos));
        match accepted {
            Some(c) => out.push(c),
            None => {
                return Err(Error::Infeasible(format!(
                    "could not place centroid {} of {count} at {min_angle_deg}° separation in {dim} dimensions",
                    out.len() + 1
                )))
            }
        }
    }
    Ok(out)
}

fn perturb(center: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = noise / (center.len() as f64).sqrt();
    let v: Vec<f64> = center.iter().map(|c| c + scale * rng.sample::<f64, _>(StandardNormal)).collect();
    if dot(&v, &v) > 1e-12 {
        normalized(&v)
    } else {
        center.to_vec()
    }
}

struct DatasetPlan<'a> {
    index: usize,
    name: String,
    codes: Vec<String>,
    names: Vec<Vec<String>>,
    labels: Vec<usize>,
    centroids: &'a [Vec<Vec<f64>>],
}

type DatasetMeta = (String, Vec<(String, Vec<String>)>);

fn dataset_plans(config: &GeneratorConfig) -> Vec<DatasetMeta> {
    let catalog = EnsembleCatalog::builtin();
    (0..config.datasets)
        .map(|d| {
            let known = catalog.datasets().get(d).cloned().filter(|(_, codes)| codes.len() == config.classes_per_dataset);
            match known {
                Some((name, codes)) => {
                    let classes = codes
                        .into_iter()
                        .map(|code| {
                            let names = catalog.names_for(&name, &code).expect("catalog code").to_vec();
                            (code, names)
                        })
                        .collect();
                    (name, classes)
                }
                None => {
                    let name = format!("SYN{}", d + 1);
                    let classes = (0..config.classes_per_dataset)
                        .map(|k| {
                            let code = format!("S{}{}", d + 1, (b'A' + (k % 26) as u8) as char);
                            (code.clone(), vec![format!("synthetic tumor type {code}")])
                        })
                        .collect();
                    (name, classes)
                }
            }
        })
        .collect()
}

fn make_bag<T: Scalar>(
    id: String,
    plan: &DatasetPlan<'_>,
    local: usize,
    background: &[Vec<f64>],
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(InstanceBag<T>, Vec<bool>)> {
    let n = rng.random_range(config.bag_size_min..=config.bag_size_max);
    let signal = ((config.signal_ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut mask = vec![false; n];
    mask[..signal].fill(true);
    mask.shuffle(rng);
    let class_centroids = &plan.centroids[local];
    let mut data = Vec::with_capacity(n * config.dim);
    for &is_signal in &mask {
        let pick: &[Vec<f64>] = if is_signal { class_centroids } else { background };
        let center = &pick[rng.random_range(0..pick.len())];
        data.extend(perturb(center, config.noise, rng).into_iter().map(T::lit));
    }
    let bag = InstanceBag::new(id, plan.index, plan.labels[local], Matrix::from_vec(n, config.dim, data)?)?;
    Ok((bag, mask))
}

/// Generates all datasets; same config → bitwise-identical output.
pub fn generate_sequence<T: Scalar>(config: &GeneratorConfig) -> Result<GeneratedData<T>> {
    config.validate()?;
    let classes = config.datasets * config.classes_per_dataset;
    let total = classes * config.centroids_per_class + config.background_centroids;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "centroids", 0));
    let all = separated_centroids(total, config.dim, config.min_angle_deg, &mut rng)?;
    let (class_flat, background) = all.split_at(classes * config.centroids_per_class);
    let class_centroids: Vec<Vec<Vec<f64>>> =
        class_flat.chunks(config.centroids_per_class).map(|c| c.to_vec()).collect();

    let plans: Vec<DatasetPlan<'_>> = dataset_plans(config)
        .into_iter()
        .enumerate()
        .map(|(d, (name, cls))| {
            let first = d * config.classes_per_dataset;
            DatasetPlan {
                index: d + 1,
                name,
                codes: cls.iter().map(|(c, _)| c.clone()).collect(),
                names: cls.into_iter().map(|(_, n)| n).collect(),
                labels: (first..first + config.classes_per_dataset).collect(),
                centroids: &class_centroids[first..first + config.classes_per_dataset],
            }
        })
        .collect();

    type Generated<T> = (DatasetSplit<T>, Vec<(String, Vec<bool>)>);
    let generated: Vec<Generated<T>> = plans
        .par_iter()
        .enumerate()
        .map(|(d, plan)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "dataset", d as u64));
            let mut masks = Vec::new();
            let mut split = |count: usize, part: &str| -> Result<Vec<InstanceBag<T>>> {
                (0..count)
                    .map(|k| {
                        // Balanced classes: bag k belongs to local class k mod C.
                        let local = k % config.classes_per_dataset;
                        let id = format!("{}-{part}-{k:04}", plan.name);
                        let (bag, mask) = make_bag(id.clone(), plan, local, background, config, &mut rng)?;
                        masks.push((id, mask));
                        Ok(bag)
                    })
                    .collect()
            };
            let train = split(config.train_size(d), "train")?;
            let test = split(config.test_per_dataset, "test")?;
            let ds = DatasetSplit {
                index: plan.index,
                name: plan.name.clone(),
                labels: plan.labels.clone(),
                class_codes: plan.codes.clone(),
                class_names: plan.names.clone(),
                train,
                test,
            };
            Ok((ds, masks))
        })
        .collect::<Result<_>>()?;

    let mut datasets = Vec::with_capacity(generated.len());
    let mut signal_masks = BTreeMap::new();
    for (ds, masks) in generated {
        datasets.push(ds);
        signal_masks.extend(masks);
    }
    Ok(GeneratedData {
        datasets,
        truth: GroundTruth { class_centroids, background_centroids: background.to_vec(), signal_masks },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig { train_per_dataset: 12, test_per_dataset: 4, bag_size_min: 8, bag_size_max: 16, ..Default::default() }
    }

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(scale_counts(&TCGA_SLIDE_COUNTS, 300).unwrap(), vec![102, 101, 81, 16]);
        assert_eq!(scale_counts(&TCGA_SLIDE_COUNTS, 2835).unwrap(), TCGA_SLIDE_COUNTS.to_vec());
        assert_eq!(scale_counts(&[1, 1, 1], 10).unwrap(), vec![4, 3, 3]);
        assert!(scale_counts(&[3, 0], 10).is_err());
    }

    #[test]
    fn uniform_counts_leave_config_unchanged() {
        let c = GeneratorConfig::default();
        assert_eq!(emulate_imbalance(&c, &[5, 5, 5, 5]).unwrap(), c);
        let p = GeneratorConfig::tcga_preset();
        let sizes = p.train_sizes.unwrap();
        assert_eq!(sizes.iter().sum::<usize>(), 800);
        assert!(sizes[0] > sizes[1] && sizes[1] > sizes[2] && sizes[2] > sizes[3]);
    }

    #[test]
    fn shapes_labels_and_norms() {
        let g = generate_sequence::<f64>(&small()).unwrap();
        assert_eq!(g.datasets.len(), 4);
        assert_eq!(g.datasets[0].name, "NSCLC");
        for (d, ds) in g.datasets.iter().enumerate() {
            assert_eq!(ds.labels, vec![2 * d, 2 * d + 1]);
            assert_eq!((ds.train.len(), ds.test.len()), (12, 4));
            for b in ds.all_bags() {
                assert!((8..=16).contains(&b.n()));
                for row in b.features.row_iter() {
                    assert!((dot(row, row) - 1.0).abs() < 1e-12);
                }
                let mask = &g.truth.signal_masks[&b.bag_id];
                assert_eq!(mask.iter().filter(|m| **m).count(), (0.2 * b.n() as f64).ceil() as usize);
            }
        }
    }

    #[test]
    fn seeded_determinism() {
        let a = generate_sequence::<f64>(&small()).unwrap();
        let b = generate_sequence::<f64>(&small()).unwrap();
        for (x, y) in a.datasets.iter().zip(&b.datasets) {
            for (p, q) in x.all_bags().zip(y.all_bags()) {
                assert_eq!(p.features.as_slice(), q.features.as_slice());
            }
        }
        let c = generate_sequence::<f64>(&GeneratorConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.datasets[0].train[0].features.as_slice(), c.datasets[0].train[0].features.as_slice());
    }

    #[test]
    fn infeasible_separation() {
        let c = GeneratorConfig { dim: 2, min_angle_deg: 90.0, ..small() };
        assert!(matches!(generate_sequence::<f64>(&c), Err(Error::Infeasible(_))));
    }

    #[test]
    fn invalid_configs() {
        assert!(GeneratorConfig { signal_ratio: 0.0, ..small() }.validate().is_err());
        assert!(GeneratorConfig { noise: 0.0, ..small() }.validate().is_err());
        assert!(GeneratorConfig { bag_size_min: 9, bag_size_max: 8, ..small() }.validate().is_err());
    }
}
