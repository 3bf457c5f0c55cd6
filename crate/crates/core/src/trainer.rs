//! Sequential training over datasets, the parameter-freezing policy, and the
//! JointTrain / FineTune reference baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassRegistry, DatasetSplit, IncrementalSequence, InstanceBag};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, QpmilModel};
use crate::objectives::{gradients, Gradients, LossBreakdown, LossWeights, StepScope};
use crate::optim::{Adam, AdamConfig, Slot};
use crate::pool::{MatchStats, PenaltyRule, PoolConfig};
use crate::scalar::Scalar;

/// Which tunable vectors keep training after their dataset has passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Only the current dataset's classes train.
    #[default]
    FreezePrevious,
    /// Every registered class trains (naive fine-tuning).
    TrainAll,
}

/// Classes spanned by the classification and similarity losses while training dataset `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    AllSeen,
    #[default]
    CurrentOnly,
}

/// Mini-batch size for reverse-order runs; forward order uses 16.
pub const REVERSE_BATCH_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub penalty: PenaltyRule,
    pub freeze: FreezePolicy,
    pub loss_scope: LossScope,
    /// Seed for bag shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            penalty: PenaltyRule::default(),
            freeze: FreezePolicy::default(),
            loss_scope: LossScope::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::InvalidInput("epochs, batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// 1-based position of the dataset in the training sequence (0 for joint training).
    pub dataset: usize,
    pub step: usize,
    #[serde(rename = "L_C")]
    pub classification: f64,
    #[serde(rename = "L_M")]
    pub matching: f64,
    #[serde(rename = "L_S")]
    pub similarity: f64,
    #[serde(rename = "L_T")]
    pub total: f64,
}

/// Result of an incremental run: one model snapshot after each dataset.
#[derive(Debug, Clone)]
pub struct IncrementalOutcome<T> {
    pub snapshots: Vec<QpmilModel<T>>,
    pub stats: MatchStats,
    pub log: Vec<LogRow>,
}

impl<T: Scalar> IncrementalOutcome<T> {
    pub fn final_model(&self) -> &QpmilModel<T> {
        self.snapshots.last().expect("at least one dataset was trained")
    }
}

/// Result of a single-phase run.
#[derive(Debug, Clone)]
pub struct JointOutcome<T> {
    pub model: QpmilModel<T>,
    pub stats: MatchStats,
    pub log: Vec<LogRow>,
}

struct Phase<'a, T> {
    bags: Vec<&'a InstanceBag<T>>,
    scope: StepScope,
    penalty: Vec<T>,
    dataset: usize,
}

fn apply<T: Scalar>(model: &mut QpmilModel<T>, adam: &mut Adam<T>, grads: &Gradients<T>) {
    for (i, g) in &grads.keys {
        adam.update(Slot::Key(*i), &mut model.pool.pairs_mut()[*i].key, g);
    }
    for (i, g) in &grads.prompts {
        adam.update(Slot::Prompt(*i), model.pool.pairs_mut()[*i].prompt.as_mut_slice(), g.as_slice());
    }
    for (c, g) in &grads.tunable {
        adam.update(Slot::Tunable(*c), &mut model.head.tunable[*c], g);
    }
}

fn run_phase<T: Scalar>(
    model: &mut QpmilModel<T>,
    phase: Phase<'_, T>,
    config: &TrainConfig,
    stats: &mut MatchStats,
    rng: &mut ChaCha8Rng,
    log: &mut Vec<LogRow>,
) -> Result<()> {
    let mut adam = Adam::new(config.adam);
    let mut order: Vec<usize> = (0..phase.bags.len()).collect();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            let snapshot: &QpmilModel<T> = model;
            let results = batch
                .par_iter()
                .map(|&b| {
                    let bag = phase.bags[b];
                    let query = snapshot.query(&bag.features)?;
                    let matched = snapshot.select(&query, Some(&phase.penalty))?;
                    let (loss, grads) = gradients(snapshot, bag, &matched, &phase.scope, config.weights)?;
                    Ok((matched, loss, grads))
                })
                .collect::<Result<Vec<(Vec<usize>, LossBreakdown<T>, Gradients<T>)>>>()?;
            let mut total = Gradients::default();
            let mut sums = [0.0f64; 4];
            for (matched, loss, grads) in &results {
                stats.record_match(matched);
                total.accumulate(grads);
                for (s, v) in sums.iter_mut().zip([loss.classification, loss.matching, loss.similarity, loss.total]) {
                    *s += v.as_f64();
                }
            }
            let inv = 1.0 / results.len() as f64;
            total.scale(T::lit(inv));
            apply(model, &mut adam, &total);
            step += 1;
            log.push(LogRow {
                dataset: phase.dataset,
                step,
                classification: sums[0] * inv,
                matching: sums[1] * inv,
                similarity: sums[2] * inv,
                total: sums[3] * inv,
            });
        }
    }
    Ok(())
}

fn register<T: Scalar>(model: &mut QpmilModel<T>, ds: &DatasetSplit<T>) -> Result<()> {
    let ids = model.register_dataset(ds.index, &ds.class_names)?;
    if ids.clone().ne(ds.labels.iter().copied()) {
        return Err(Error::InvalidInput(format!(
            "dataset {} labels {:?} do not match registered ids {ids:?}",
            ds.index, ds.labels
        )));
    }
    Ok(())
}

/// Trains `model` on each dataset of `sequence` in turn.
///
/// `model` must not have any classes registered yet; each dataset registers its
/// own classes on arrival.
pub fn train_incremental<T: Scalar>(
    sequence: &IncrementalSequence<T>,
    mut model: QpmilModel<T>,
    config: &TrainConfig,
) -> Result<IncrementalOutcome<T>> {
    config.validate()?;
    if model.num_classes() != 0 {
        return Err(Error::InvalidInput("incremental training starts from a model without classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stats = MatchStats::new(model.config.pool);
    let mut log = Vec::new();
    let mut snapshots = Vec::with_capacity(sequence.len());
    for (pos, ds) in sequence.datasets().iter().enumerate() {
        if ds.train.is_empty() {
            return Err(Error::EmptyTrainingSet(ds.index));
        }
        register(&mut model, ds)?;
        let classes = model.num_classes();
        let trainable = (0..classes)
            .map(|c| match config.freeze {
                FreezePolicy::TrainAll => true,
                FreezePolicy::FreezePrevious => ds.labels.contains(&c),
            })
            .collect();
        let loss_classes = match config.loss_scope {
            LossScope::AllSeen => (0..classes).collect(),
            LossScope::CurrentOnly => ds.labels.clone(),
        };
        let penalty = if model.flags().use_penalty {
            stats.compute_penalty(pos + 1, config.penalty)?
        } else {
            vec![T::one(); model.config.pool.size]
        };
        let phase = Phase { bags: ds.train.iter().collect(), scope: StepScope { loss_classes, trainable }, penalty, dataset: pos + 1 };
        run_phase(&mut model, phase, config, &mut stats, &mut rng, &mut log)?;
        stats.finalize_dataset();
        log::debug!("finished dataset {} ({} of {})", ds.name, pos + 1, sequence.len());
        snapshots.push(model.clone());
    }
    if snapshots.is_empty() {
        return Err(Error::InvalidInput("empty dataset sequence".into()));
    }
    Ok(IncrementalOutcome { snapshots, stats, log })
}

/// Trains on the union of all datasets in one phase, with every class registered up front.
pub fn train_joint<T: Scalar>(datasets: &[DatasetSplit<T>], mut model: QpmilModel<T>, config: &TrainConfig) -> Result<JointOutcome<T>> {
    config.validate()?;
    if model.num_classes() != 0 {
        return Err(Error::InvalidInput("joint training starts from a model without classes".into()));
    }
    for ds in datasets {
        if ds.train.is_empty() {
            return Err(Error::EmptyTrainingSet(ds.index));
        }
        register(&mut model, ds)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stats = MatchStats::new(model.config.pool);
    let mut log = Vec::new();
    let classes = model.num_classes();
    let phase = Phase {
        bags: datasets.iter().flat_map(|d| &d.train).collect(),
        scope: StepScope::all(classes),
        penalty: vec![T::one(); model.config.pool.size],
        dataset: 0,
    };
    run_phase(&mut model, phase, config, &mut stats, &mut rng, &mut log)?;
    stats.finalize_dataset();
    Ok(JointOutcome { model, stats, log })
}

/// Model settings of the FineTune lower bound: one shared prompt, no keys, no
/// matching penalty, no class-similarity loss.
pub fn finetune_model_config(base: &ModelConfig) -> ModelConfig {
    let mut config = *base;
    config.pool = PoolConfig { size: 1, top_n: 1, prompt_len: base.pool.prompt_len };
    config.flags.use_key = false;
    config.flags.use_penalty = false;
    config.flags.use_class_similarity_loss = false;
    config
}

/// Naive sequential fine-tuning of the degenerate single-prompt variant: every class keeps
/// training and the classification loss spans all classes seen so far.
pub fn train_finetune_baseline<T: Scalar>(
    sequence: &IncrementalSequence<T>,
    base: &ModelConfig,
    config: &TrainConfig,
    templates: &ClassRegistry,
    seed: u64,
) -> Result<IncrementalOutcome<T>> {
    let model = QpmilModel::new(finetune_model_config(base), ClassRegistry::new(templates.templates().to_vec())?, seed)?;
    let config = TrainConfig { freeze: FreezePolicy::TrainAll, loss_scope: LossScope::AllSeen, ..*config };
    train_incremental(sequence, model, &config)
}
