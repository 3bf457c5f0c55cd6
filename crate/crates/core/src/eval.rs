//! Performance-matrix bookkeeping, the incremental-learning metrics, masked
//! (task-aware) accuracy, and k-fold orchestration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassRegistry, DatasetOrder, DatasetSplit, IncrementalSequence, InstanceBag};
use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::model::{ModelConfig, QpmilModel};
use crate::pool::select_top_n;
use crate::scalar::Scalar;
use crate::seeds::derive_seed;
use crate::trainer::{train_finetune_baseline, train_incremental, train_joint, TrainConfig};

/// Predicted class of one bag: over all registered classes, or masked to the bag's own dataset.
pub fn predict_label<T: Scalar>(model: &QpmilModel<T>, bag: &InstanceBag<T>, masked: bool) -> Result<usize> {
    let inference = model.infer(&bag.features)?;
    if masked {
        let subset = model.registry.classes_of_dataset(bag.dataset_index);
        let logits: Vec<T> = subset.iter().map(|c| inference.logits[*c]).collect();
        let best = argmax(&logits).ok_or(Error::UnknownClass(bag.label))?;
        Ok(subset[best])
    } else {
        argmax(&inference.logits).ok_or(Error::InvalidInput("model has no classes".into()))
    }
}

/// Fraction of bags whose (masked) argmax equals the label.
pub fn evaluate_accuracy<T: Scalar>(model: &QpmilModel<T>, bags: &[InstanceBag<T>], masked: bool) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let correct = bags
        .par_iter()
        .map(|b| predict_label(model, b, masked).map(|p| usize::from(p == b.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / bags.len() as f64)
}

/// Lower-triangular accuracy matrix `R[i][t]` (test on dataset `t` after training through `i`)
/// plus the optional joint-training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    pub rows: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<Vec<f64>>,
}

impl PerformanceMatrix {
    pub fn new(rows: Vec<Vec<f64>>, joint: Option<Vec<f64>>) -> Result<Self> {
        let m = Self { rows, joint };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::InvalidInput("performance matrix has no rows".into()));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.len() != i + 1 {
                return Err(Error::Shape(format!("row {} has {} entries, expected {}", i + 1, r.len(), i + 1)));
            }
        }
        let t = self.rows.len();
        if let Some(j) = &self.joint {
            if j.len() != t {
                return Err(Error::Shape(format!("joint row has {} entries, expected {t}", j.len())));
            }
        }
        let all = self.rows.iter().flatten().chain(self.joint.iter().flatten());
        if let Some(v) = all.copied().find(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!("accuracy {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Number of datasets `T`.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn last(&self) -> &[f64] {
        self.rows.last().expect("validated non-empty")
    }

    /// `(1/T) Σ_t R[T][t]`
    pub fn acc(&self) -> f64 {
        self.last().iter().sum::<f64>() / self.len() as f64
    }

    /// `(1/T) Σ_t R[T][t] / R_joint[t]`
    pub fn upper_bound_ratio(&self) -> Result<f64> {
        let joint = self.joint.as_ref().ok_or(Error::InvalidInput("no joint-training row".into()))?;
        let mut sum = 0.0;
        for (t, (r, j)) in self.last().iter().zip(joint).enumerate() {
            if *j <= 0.0 {
                return Err(Error::ZeroJointAccuracy(t + 1));
            }
            sum += r / j;
        }
        Ok(sum / self.len() as f64)
    }

    /// `(1/(T−1)) Σ_{t<T} (max_i R[i][t] − R[T][t])`, the max running over every row that tests `t`.
    pub fn forgetting(&self) -> Result<f64> {
        let t_count = self.len();
        if t_count < 2 {
            return Err(Error::UndefinedMetric("forgetting"));
        }
        let last = self.last();
        let sum: f64 = (0..t_count - 1)
            .map(|t| {
                let best = self.rows[t..].iter().map(|r| r[t]).fold(f64::NEG_INFINITY, f64::max);
                best - last[t]
            })
            .sum();
        Ok(sum / (t_count - 1) as f64)
    }

    /// `(1/(T−1)) Σ_{t<T} (R[T][t] − R[t][t])`
    pub fn bwt(&self) -> Result<f64> {
        let t_count = self.len();
        if t_count < 2 {
            return Err(Error::UndefinedMetric("bwt"));
        }
        let last = self.last();
        let sum: f64 = (0..t_count - 1).map(|t| last[t] - self.rows[t][t]).sum();
        Ok(sum / (t_count - 1) as f64)
    }

    /// Matrix as CSV text: header `after_training,dataset_1,…`, then one row per trained dataset and
    /// an optional `joint` row. Entries above the diagonal are empty.
    pub fn to_csv(&self, names: &[String]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let t = self.len();
        let label = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("dataset_{}", i + 1));
        let mut header = vec!["after_training".to_string()];
        header.extend((0..t).map(label));
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![label(i)];
            rec.extend((0..t).map(|k| row.get(k).map(|v| format!("{v:.6}")).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        if let Some(j) = &self.joint {
            let mut rec = vec!["joint".to_string()];
            rec.extend(j.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }
}

/// Class-incremental and masked performance matrices of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMatrices {
    pub unmasked: PerformanceMatrix,
    pub masked: PerformanceMatrix,
}

/// Evaluates each snapshot on the test splits of every dataset seen so far.
pub fn evaluate_snapshots<T: Scalar>(snapshots: &[QpmilModel<T>], sequence: &IncrementalSequence<T>) -> Result<RunMatrices> {
    let mut unmasked = Vec::with_capacity(snapshots.len());
    let mut masked = Vec::with_capacity(snapshots.len());
    for (i, model) in snapshots.iter().enumerate() {
        let mut u = Vec::with_capacity(i + 1);
        let mut m = Vec::with_capacity(i + 1);
        for ds in &sequence.datasets()[..=i] {
            let acc = evaluate_accuracy(model, &ds.test, false)?;
            let macc = evaluate_accuracy(model, &ds.test, true)?;
            debug_assert!(macc >= acc);
            u.push(acc);
            m.push(macc);
        }
        unmasked.push(u);
        masked.push(m);
    }
    Ok(RunMatrices { unmasked: PerformanceMatrix::new(unmasked, None)?, masked: PerformanceMatrix::new(masked, None)? })
}

/// Per-dataset accuracy of a jointly trained model.
pub fn evaluate_joint<T: Scalar>(model: &QpmilModel<T>, sequence: &IncrementalSequence<T>, masked: bool) -> Result<Vec<f64>> {
    sequence.datasets().iter().map(|ds| evaluate_accuracy(model, &ds.test, masked)).collect()
}

/// Matrices of a JointTrain run. The model sees every dataset at once, so each row
/// repeats the final accuracies and the joint row equals the final row.
pub fn joint_matrices<T: Scalar>(model: &QpmilModel<T>, sequence: &IncrementalSequence<T>) -> Result<RunMatrices> {
    let unmasked = evaluate_joint(model, sequence, false)?;
    let masked = evaluate_joint(model, sequence, true)?;
    let fill = |last: &[f64]| (0..last.len()).map(|i| last[..=i].to_vec()).collect::<Vec<_>>();
    Ok(RunMatrices {
        unmasked: PerformanceMatrix::new(fill(&unmasked), Some(unmasked.clone()))?,
        masked: PerformanceMatrix::new(fill(&masked), None)?,
    })
}

/// Scalar metrics of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub acc: f64,
    pub upper_bound_ratio: Option<f64>,
    pub forgetting: Option<f64>,
    pub bwt: Option<f64>,
    pub masked_acc: f64,
    /// Mean accuracy of the JointTrain row, when present.
    pub joint_acc: Option<f64>,
    /// Mean pairwise overlap of the datasets' top-N key sets.
    pub key_overlap: Option<f64>,
}

impl RunMetrics {
    pub fn from_matrices(m: &RunMatrices) -> Result<Self> {
        let (forgetting, bwt) =
            if m.unmasked.len() >= 2 { (Some(m.unmasked.forgetting()?), Some(m.unmasked.bwt()?)) } else { (None, None) };
        Ok(Self {
            acc: m.unmasked.acc(),
            upper_bound_ratio: m.unmasked.joint.as_ref().map(|_| m.unmasked.upper_bound_ratio()).transpose()?,
            forgetting,
            bwt,
            masked_acc: m.masked.acc(),
            joint_acc: m.unmasked.joint.as_ref().map(|j| j.iter().sum::<f64>() / j.len() as f64),
            key_overlap: None,
        })
    }
}

/// Which learner a fold run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Qpmil,
    Joint,
    Finetune,
}

/// Everything a cross-validated experiment needs besides the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub method: Method,
    pub order: DatasetOrder,
    /// Also train JointTrain per fold to fill the upper-bound row.
    pub with_joint: bool,
    pub seed: u64,
}

/// Outcome of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub matrices: RunMatrices,
    pub metrics: RunMetrics,
    /// Finalized matching-frequency tables, one per trained dataset.
    pub frequencies: Vec<Vec<u64>>,
    /// Dataset names in training order.
    pub datasets: Vec<String>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

/// Cross-validated report; serialises to the metrics JSON layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub acc: Summary,
    pub upper_bound_ratio: Option<Summary>,
    pub forgetting: Option<Summary>,
    pub bwt: Option<Summary>,
    pub masked_acc: Summary,
    pub joint_acc: Option<Summary>,
    pub key_overlap: Option<Summary>,
    pub per_fold: Vec<FoldResult>,
}

impl CrossValReport {
    pub fn from_folds(per_fold: Vec<FoldResult>) -> Result<Self> {
        if per_fold.is_empty() {
            return Err(Error::InvalidInput("no folds".into()));
        }
        let collect = |f: &dyn Fn(&RunMetrics) -> Option<f64>| -> Option<Summary> {
            let vals: Option<Vec<f64>> = per_fold.iter().map(|r| f(&r.metrics)).collect();
            vals.and_then(|v| Summary::of(&v))
        };
        Ok(Self {
            acc: collect(&|m| Some(m.acc)).expect("non-empty"),
            upper_bound_ratio: collect(&|m| m.upper_bound_ratio),
            forgetting: collect(&|m| m.forgetting),
            bwt: collect(&|m| m.bwt),
            masked_acc: collect(&|m| Some(m.masked_acc)).expect("non-empty"),
            joint_acc: collect(&|m| m.joint_acc),
            key_overlap: collect(&|m| m.key_overlap),
            per_fold,
        })
    }
}

/// Mean number of shared keys between the top-`n` sets of every pair of tables.
/// `None` for fewer than two tables.
pub fn key_overlap(tables: &[Vec<u64>], n: usize) -> Option<f64> {
    let top: Vec<Vec<usize>> = tables
        .iter()
        .map(|t| select_top_n(&t.iter().map(|c| -(*c as f64)).collect::<Vec<_>>(), n))
        .collect();
    let mut shared = 0usize;
    let mut pairs = 0usize;
    for a in 0..top.len() {
        for b in a + 1..top.len() {
            shared += top[a].iter().filter(|k| top[b].contains(k)).count();
            pairs += 1;
        }
    }
    (pairs > 0).then(|| shared as f64 / pairs as f64)
}

/// Seeded fold index for every bag (train and test pooled), stratified by class within each dataset.
pub fn assign_folds<T: Scalar>(datasets: &[DatasetSplit<T>], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 folds, got {k}")));
    }
    datasets
        .iter()
        .map(|ds| {
            let bags: Vec<&InstanceBag<T>> = ds.all_bags().collect();
            let mut folds = vec![0; bags.len()];
            for &label in &ds.labels {
                let mut members: Vec<usize> = (0..bags.len()).filter(|&i| bags[i].label == label).collect();
                if members.len() < k {
                    return Err(Error::TooFewBags { class: label, count: members.len(), folds: k });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "fold-assignment", (ds.index * 1000 + label) as u64));
                members.shuffle(&mut rng);
                for (pos, bag) in members.into_iter().enumerate() {
                    folds[bag] = pos % k;
                }
            }
            Ok(folds)
        })
        .collect()
}

/// Re-splits every dataset so fold `fold` becomes its test set.
pub fn fold_split<T: Scalar>(datasets: &[DatasetSplit<T>], assignment: &[Vec<usize>], fold: usize) -> Vec<DatasetSplit<T>> {
    datasets
        .iter()
        .zip(assignment)
        .map(|(ds, folds)| {
            let (test, train): (Vec<_>, Vec<_>) =
                ds.all_bags().cloned().zip(folds).partition(|(_, f)| **f == fold);
            let mut split = ds.clone_meta();
            split.train = train.into_iter().map(|(b, _)| b).collect();
            split.test = test.into_iter().map(|(b, _)| b).collect();
            split
        })
        .collect()
}

impl<T: Scalar> DatasetSplit<T> {
    /// Copy of the dataset description without any bags.
    pub fn clone_meta(&self) -> DatasetSplit<T> {
        DatasetSplit {
            index: self.index,
            name: self.name.clone(),
            labels: self.labels.clone(),
            class_codes: self.class_codes.clone(),
            class_names: self.class_names.clone(),
            train: Vec::new(),
            test: Vec::new(),
        }
    }
}

/// Trained artefacts of one run, kept for persistence.
#[derive(Debug, Clone)]
pub struct RunArtifacts<T> {
    pub sequence: IncrementalSequence<T>,
    pub snapshots: Vec<QpmilModel<T>>,
    pub joint: Option<QpmilModel<T>>,
    pub stats: crate::pool::MatchStats,
    pub log: Vec<crate::trainer::LogRow>,
    pub joint_log: Vec<crate::trainer::LogRow>,
}

/// Trains and evaluates one method on one train/test split.
pub fn run_single<T: Scalar>(datasets: Vec<DatasetSplit<T>>, spec: &ExperimentSpec) -> Result<(FoldResult, RunArtifacts<T>)> {
    let perm = spec.order.permutation(datasets.len());
    let sequence = IncrementalSequence::new(datasets, &perm)?;
    let names: Vec<String> = sequence.datasets().iter().map(|d| d.name.clone()).collect();
    let templates = ClassRegistry::with_builtin_templates();
    let fresh = |config: ModelConfig| QpmilModel::new(config, ClassRegistry::new(templates.templates().to_vec())?, spec.seed);

    let joint = if spec.with_joint || spec.method == Method::Joint {
        Some(train_joint(sequence.datasets(), fresh(spec.model)?, &spec.train)?)
    } else {
        None
    };
    let (matrices, snapshots, stats, log) = match spec.method {
        Method::Joint => {
            let j = joint.as_ref().expect("joint trained");
            (joint_matrices(&j.model, &sequence)?, vec![j.model.clone()], j.stats.clone(), j.log.clone())
        }
        Method::Qpmil | Method::Finetune => {
            let outcome = if spec.method == Method::Qpmil {
                train_incremental(&sequence, fresh(spec.model)?, &spec.train)?
            } else {
                train_finetune_baseline(&sequence, &spec.model, &spec.train, &templates, spec.seed)?
            };
            let mut m = evaluate_snapshots(&outcome.snapshots, &sequence)?;
            if let Some(j) = &joint {
                m.unmasked.joint = Some(evaluate_joint(&j.model, &sequence, false)?);
                m.masked.joint = Some(evaluate_joint(&j.model, &sequence, true)?);
            }
            (m, outcome.snapshots, outcome.stats, outcome.log)
        }
    };
    let mut metrics = RunMetrics::from_matrices(&matrices)?;
    if spec.method == Method::Qpmil && spec.model.flags.use_key {
        metrics.key_overlap = key_overlap(stats.finalized(), spec.model.pool.top_n);
    }
    let result = FoldResult { fold: 0, matrices, metrics, frequencies: stats.finalized().to_vec(), datasets: names };
    let artifacts = RunArtifacts {
        sequence,
        snapshots,
        joint_log: joint.as_ref().map(|j| j.log.clone()).unwrap_or_default(),
        joint: joint.map(|j| j.model),
        stats,
        log,
    };
    Ok((result, artifacts))
}

/// `k` complete runs, one per held-out fold, reported as mean ± sample std.
///
/// `workers` bounds fold-level parallelism; results are assembled in fold order.
pub fn run_folds<T: Scalar>(datasets: &[DatasetSplit<T>], k: usize, spec: &ExperimentSpec, workers: usize) -> Result<CrossValReport> {
    let assignment = assign_folds(datasets, k, derive_seed(spec.seed, "folds", 0))?;
    let run = |fold: usize| -> Result<FoldResult> {
        let split = fold_split(datasets, &assignment, fold);
        let fold_spec = ExperimentSpec {
            seed: derive_seed(spec.seed, "fold-model", fold as u64),
            train: TrainConfig { seed: derive_seed(spec.seed, "fold-shuffle", fold as u64), ..spec.train },
            ..*spec
        };
        let (mut result, _) = run_single(split, &fold_spec)?;
        result.fold = fold;
        Ok(result)
    };
    let folds: Vec<FoldResult> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| (0..k).into_par_iter().map(run).collect::<Result<_>>())?
    } else {
        (0..k).map(run).collect::<Result<_>>()?
    };
    CrossValReport::from_folds(folds)
}
