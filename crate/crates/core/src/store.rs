//! Persistence: model bundles, dataset directories, and CSV/JSON report files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{ClassRegistry, DatasetSplit};
use crate::encoders::{ingest_features, write_feature_file, FeatureManifest, ManifestRow};
use crate::error::{Error, Result};
use crate::eval::PerformanceMatrix;
use crate::linalg::Matrix;
use crate::model::{ClassHead, ModelConfig, QpmilModel};
use crate::pool::{MatchStats, PoolConfig, PrototypePair, PrototypePool};
use crate::scalar::Scalar;
use crate::trainer::LogRow;

pub const BUNDLE_VERSION: u32 = 1;

/// Keys, prompts and finalized frequency tables of a pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolCheckpoint {
    pub version: u32,
    pub config: PoolConfig,
    pub keys: Vec<Vec<f64>>,
    pub prompts: Vec<Matrix<f64>>,
    pub frequencies: Vec<Vec<u64>>,
    pub events: Vec<u64>,
}

/// Everything needed to restore a trained model. The frozen encoders are regenerated from
/// `config.encoder_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub pool: PoolCheckpoint,
    pub head: ClassHead<f64>,
    pub registry: ClassRegistry,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|x| T::lit(*x)).collect()
}

impl PoolCheckpoint {
    pub fn new<T: Scalar>(pool: &PrototypePool<T>, stats: &MatchStats) -> Self {
        Self {
            version: BUNDLE_VERSION,
            config: pool.config(),
            keys: pool.pairs().iter().map(|p| to_f64(&p.key)).collect(),
            prompts: pool.pairs().iter().map(|p| p.prompt.convert()).collect(),
            frequencies: stats.finalized().to_vec(),
            events: stats.finalized_events().to_vec(),
        }
    }

    pub fn restore<T: Scalar>(&self) -> Result<(PrototypePool<T>, MatchStats)> {
        if self.version != BUNDLE_VERSION {
            return Err(Error::Version(self.version));
        }
        if self.keys.len() != self.prompts.len() {
            return Err(Error::Shape("key and prompt counts differ".into()));
        }
        let pairs = self
            .keys
            .iter()
            .zip(&self.prompts)
            .map(|(k, p)| PrototypePair { key: from_f64(k), prompt: p.convert() })
            .collect();
        let pool = PrototypePool::from_pairs(self.config, pairs)?;
        let stats = MatchStats::from_tables(self.config, self.frequencies.clone(), self.events.clone())?;
        Ok((pool, stats))
    }
}

impl ModelBundle {
    pub fn new<T: Scalar>(model: &QpmilModel<T>, stats: &MatchStats) -> Self {
        Self {
            version: BUNDLE_VERSION,
            seed: model.seed,
            config: model.config,
            pool: PoolCheckpoint::new(&model.pool, stats),
            head: ClassHead {
                base: model.head.base.iter().map(|v| to_f64(v)).collect(),
                tunable: model.head.tunable.iter().map(|v| to_f64(v)).collect(),
                alpha: model.head.alpha.as_f64(),
                tau: model.head.tau.as_f64(),
            },
            registry: model.registry.clone(),
        }
    }

    pub fn restore<T: Scalar>(&self) -> Result<(QpmilModel<T>, MatchStats)> {
        if self.version != BUNDLE_VERSION {
            return Err(Error::Version(self.version));
        }
        let mut model = QpmilModel::new(self.config, self.registry.clone(), self.seed)?;
        let (pool, stats) = self.pool.restore()?;
        if self.head.base.len() != model.num_classes() || self.head.tunable.len() != model.num_classes() {
            return Err(Error::Shape("class head does not match the registry".into()));
        }
        model.pool = pool;
        model.head = ClassHead {
            base: self.head.base.iter().map(|v| from_f64(v)).collect(),
            tunable: self.head.tunable.iter().map(|v| from_f64(v)).collect(),
            alpha: T::lit(self.head.alpha),
            tau: T::lit(self.head.tau),
        };
        Ok((model, stats))
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn save_model<T: Scalar>(path: &Path, model: &QpmilModel<T>, stats: &MatchStats) -> Result<()> {
    write_json(path, &ModelBundle::new(model, stats))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(QpmilModel<T>, MatchStats)> {
    read_json::<ModelBundle>(path)?.restore()
}

/// `dataset,key,count` rows, one per key of every finalized table.
pub fn write_frequency_csv(path: &Path, stats: &MatchStats, dataset_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "key", "count"])?;
    for (t, table) in stats.finalized().iter().enumerate() {
        let name = dataset_names.get(t).cloned().unwrap_or_else(|| format!("dataset_{}", t + 1));
        for (k, c) in table.iter().enumerate() {
            w.write_record([name.clone(), k.to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `step,L_C,L_M,L_S,L_T` rows.
pub fn write_training_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "L_C", "L_M", "L_S", "L_T"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.classification.to_string(),
            r.matching.to_string(),
            r.similarity.to_string(),
            r.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_matrix_csv(path: &Path, matrix: &PerformanceMatrix, dataset_names: &[String]) -> Result<()> {
    fs::write(path, matrix.to_csv(dataset_names)?)?;
    Ok(())
}

/// First two principal-component scores of the encoded prompt features, one row per pool entry.
pub fn prototype_projection<T: Scalar>(model: &QpmilModel<T>) -> Result<Vec<[f64; 2]>> {
    let feats: Vec<Vec<f64>> = model
        .pool
        .pairs()
        .iter()
        .map(|p| model.encoder.encode_prompt(&p.prompt).map(|f| to_f64(&f)))
        .collect::<Result<_>>()?;
    let (m, d) = (feats.len(), feats.first().map_or(0, Vec::len));
    let mut x = DMatrix::from_fn(m, d, |i, j| feats[i][j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.ok_or(Error::InvalidInput("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let mut scores = vec![[0.0; 2]; m];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut axis = v_t.row(k).transpose();
        // Fix the sign so the largest-magnitude loading is positive.
        let pivot = axis.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            axis = -axis;
        }
        let proj = &x * axis;
        for (i, s) in scores.iter_mut().enumerate() {
            s[slot] = proj[i];
        }
    }
    Ok(scores)
}

/// `prototype,pc1,pc2` rows.
pub fn write_projection_csv(path: &Path, scores: &[[f64; 2]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["prototype", "pc1", "pc2"])?;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([i.to_string(), s[0].to_string(), s[1].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Dataset description stored next to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub index: usize,
    pub name: String,
    pub labels: Vec<usize>,
    pub class_codes: Vec<String>,
    pub class_names: Vec<Vec<String>>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const DATASETS_FILE: &str = "datasets.json";

fn file_stem(bag_id: &str) -> String {
    bag_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}

/// Writes `features/<bag>.qpf`, `manifest.csv` and `datasets.json` under `dir`.
pub fn write_dataset_dir<T: Scalar>(dir: &Path, datasets: &[DatasetSplit<T>]) -> Result<()> {
    let features = dir.join("features");
    fs::create_dir_all(&features)?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for ds in datasets {
        for bag in ds.all_bags() {
            let rel = PathBuf::from("features").join(format!("{}.qpf", file_stem(&bag.bag_id)));
            write_feature_file(&dir.join(&rel), &bag.features.convert())?;
            rows.push(ManifestRow {
                bag_id: bag.bag_id.clone(),
                dataset: bag.dataset_index,
                label: bag.label,
                path: rel.to_string_lossy().replace('\\', "/"),
            });
        }
        records.push(DatasetRecord {
            index: ds.index,
            name: ds.name.clone(),
            labels: ds.labels.clone(),
            class_codes: ds.class_codes.clone(),
            class_names: ds.class_names.clone(),
            train: ds.train.iter().map(|b| b.bag_id.clone()).collect(),
            test: ds.test.iter().map(|b| b.bag_id.clone()).collect(),
        });
    }
    FeatureManifest { base_dir: dir.to_path_buf(), rows }.write(&dir.join(MANIFEST_FILE))?;
    write_json(&dir.join(DATASETS_FILE), &records)
}

/// Loads a dataset directory written by [`write_dataset_dir`] or assembled by hand around ingested features.
pub fn read_dataset_dir<T: Scalar>(dir: &Path) -> Result<Vec<DatasetSplit<T>>> {
    let records: Vec<DatasetRecord> = read_json(&dir.join(DATASETS_FILE))?;
    let manifest = FeatureManifest::read(&dir.join(MANIFEST_FILE))?;
    let mut bags: std::collections::HashMap<String, _> =
        ingest_features::<T>(&manifest, None)?.into_iter().map(|b| (b.bag_id.clone(), b)).collect();
    let mut take = |id: &String| bags.remove(id).ok_or_else(|| Error::InvalidInput(format!("bag {id} is not in the manifest")));
    records
        .into_iter()
        .map(|r| {
            Ok(DatasetSplit {
                index: r.index,
                name: r.name,
                labels: r.labels,
                class_codes: r.class_codes,
                class_names: r.class_names,
                train: r.train.iter().map(&mut take).collect::<Result<_>>()?,
                test: r.test.iter().map(&mut take).collect::<Result<_>>()?,
            })
        })
        .collect()
}

/// Appends one line to a file, creating it with `header` if absent.
pub fn append_csv_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{line}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetOrder;
    use crate::eval::predict_label;
    use crate::pool::PenaltyRule;
    use crate::synth::{generate_sequence, GeneratorConfig};
    use crate::trainer::{train_incremental, TrainConfig};

    fn small_data() -> GeneratorConfig {
        GeneratorConfig {
            datasets: 2,
            bag_size_min: 8,
            bag_size_max: 16,
            train_per_dataset: 12,
            test_per_dataset: 6,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn bundle_round_trip_preserves_predictions_and_penalty() {
        let data = generate_sequence::<f64>(&small_data()).unwrap();
        let seq = data.sequence(DatasetOrder::Forward).unwrap();
        let model = QpmilModel::new(ModelConfig::default(), ClassRegistry::with_builtin_templates(), 7).unwrap();
        let train = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let out = train_incremental(&seq, model, &train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, out.final_model(), &out.stats).unwrap();
        let (back, stats) = load_model::<f64>(&path).unwrap();
        assert_eq!(stats, out.stats);
        assert_eq!(
            stats.compute_penalty::<f64>(3, PenaltyRule::MatchRate).unwrap(),
            out.stats.compute_penalty::<f64>(3, PenaltyRule::MatchRate).unwrap()
        );
        for bag in seq.datasets().iter().flat_map(|d| &d.test) {
            let a = out.final_model().infer(&bag.features).unwrap();
            let b = back.infer(&bag.features).unwrap();
            assert_eq!(a.matched, b.matched);
            assert_eq!(a.logits, b.logits);
            assert_eq!(predict_label(&back, bag, true).unwrap(), predict_label(out.final_model(), bag, true).unwrap());
        }
        let mut bundle: ModelBundle = read_json(&path).unwrap();
        bundle.version = 99;
        assert!(matches!(bundle.restore::<f64>(), Err(Error::Version(99))));
    }

    #[test]
    fn dataset_dir_round_trip() {
        let data = generate_sequence::<f64>(&small_data()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(dir.path(), &data.datasets).unwrap();
        let back = read_dataset_dir::<f64>(dir.path()).unwrap();
        assert_eq!(back.len(), data.datasets.len());
        for (a, b) in data.datasets.iter().zip(&back) {
            assert_eq!((a.index, &a.name, &a.labels, &a.class_names), (b.index, &b.name, &b.labels, &b.class_names));
            assert_eq!(a.train.len(), b.train.len());
            for (x, y) in a.all_bags().zip(b.all_bags()) {
                assert_eq!((&x.bag_id, x.label, x.features.shape()), (&y.bag_id, y.label, y.features.shape()));
                // Features are stored as f32.
                let err = x.features.as_slice().iter().zip(y.features.as_slice()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                assert!(err < 1e-6);
            }
        }
    }

    #[test]
    fn projection_is_centered_and_sign_stable() {
        let model = QpmilModel::<f64>::new(ModelConfig::default(), ClassRegistry::with_builtin_templates(), 3).unwrap();
        let a = prototype_projection(&model).unwrap();
        assert_eq!(a.len(), model.config.pool.size);
        for k in 0..2 {
            assert!(a.iter().map(|s| s[k]).sum::<f64>().abs() < 1e-9);
        }
        assert_eq!(a, prototype_projection(&model).unwrap());
    }

    #[test]
    fn csv_headers() {
        let dir = tempfile::tempdir().unwrap();
        let mut stats = MatchStats::new(PoolConfig { size: 3, top_n: 1, prompt_len: 1 });
        stats.record_match(&[2]);
        stats.finalize_dataset();
        let p = dir.path().join("f.csv");
        write_frequency_csv(&p, &stats, &["A".into()]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "dataset,key,count\nA,0,0\nA,1,0\nA,2,1\n");
        let q = dir.path().join("s.csv");
        append_csv_line(&q, "a,b", "1,2").unwrap();
        append_csv_line(&q, "a,b", "3,4").unwrap();
        assert_eq!(fs::read_to_string(&q).unwrap(), "a,b\n1,2\n3,4\n");
    }
}
