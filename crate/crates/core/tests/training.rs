use qpmil_core::data::DatasetOrder;
use qpmil_core::objectives::{gradients, LossWeights, StepScope};
use qpmil_core::trainer::{FreezePolicy, LossScope};
use qpmil_core::{
    generate_sequence, train_incremental, train_joint, ClassRegistry, GeneratorConfig, Model, ModelConfig, Sequence,
    TrainConfig,
};

fn small_sequence(datasets: usize) -> Sequence {
    let config = GeneratorConfig {
        datasets,
        bag_size_min: 8,
        bag_size_max: 20,
        train_per_dataset: 24,
        test_per_dataset: 8,
        ..GeneratorConfig::default()
    };
    generate_sequence::<f64>(&config).unwrap().sequence(DatasetOrder::Forward).unwrap()
}

fn fresh(config: ModelConfig) -> Model {
    Model::new(config, ClassRegistry::with_builtin_templates(), 9).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() }
}

#[test]
fn earlier_class_vectors_are_bitwise_frozen() {
    let seq = small_sequence(3);
    for scope in [LossScope::CurrentOnly, LossScope::AllSeen] {
        let out = train_incremental(&seq, fresh(ModelConfig::default()), &TrainConfig { loss_scope: scope, ..quick() }).unwrap();
        for t in 1..out.snapshots.len() {
            let (before, after) = (&out.snapshots[t - 1], &out.snapshots[t]);
            for c in 0..before.num_classes() {
                assert_eq!(before.head.tunable[c], after.head.tunable[c], "class {c} moved during dataset {}", t + 1);
                assert_eq!(before.head.base[c], after.head.base[c]);
            }
            assert_eq!(before.encoder, after.encoder);
            // The current dataset's vectors do train.
            let current = &seq.datasets()[t].labels;
            assert!(current.iter().any(|c| after.head.tunable[*c].iter().any(|x| *x != 0.0)));
        }
    }
}

#[test]
fn train_all_policy_moves_earlier_vectors() {
    let seq = small_sequence(2);
    let config = TrainConfig { freeze: FreezePolicy::TrainAll, loss_scope: LossScope::AllSeen, ..quick() };
    let out = train_incremental(&seq, fresh(ModelConfig::default()), &config).unwrap();
    assert_ne!(out.snapshots[0].head.tunable[0], out.snapshots[1].head.tunable[0]);
}

#[test]
fn same_seed_same_model() {
    let seq = small_sequence(2);
    let a = train_incremental(&seq, fresh(ModelConfig::default()), &quick()).unwrap();
    let b = train_incremental(&seq, fresh(ModelConfig::default()), &quick()).unwrap();
    assert_eq!(a.stats, b.stats);
    assert_eq!(a.final_model().pool, b.final_model().pool);
    assert_eq!(a.final_model().head, b.final_model().head);
    let c = train_incremental(&seq, fresh(ModelConfig::default()), &TrainConfig { seed: 1, ..quick() }).unwrap();
    assert_ne!(a.final_model().pool, c.final_model().pool);
}

#[test]
fn frequency_tables_count_every_training_match() {
    let seq = small_sequence(3);
    let config = quick();
    let out = train_incremental(&seq, fresh(ModelConfig::default()), &config).unwrap();
    let n = ModelConfig::default().pool.top_n as u64;
    for (t, (table, events)) in out.stats.finalized().iter().zip(out.stats.finalized_events()).enumerate() {
        let bags = seq.datasets()[t].train.len() as u64;
        assert_eq!(*events, bags * config.epochs as u64);
        assert_eq!(table.iter().sum::<u64>(), events * n);
    }
    let steps_per_dataset = 24usize.div_ceil(config.batch_size) * config.epochs;
    assert_eq!(out.log.len(), 3 * steps_per_dataset);
    assert!(out.log.iter().all(|r| r.total.is_finite() && r.classification >= 0.0));
}

#[test]
fn single_dataset_matches_static_training() {
    let seq = small_sequence(1);
    let out = train_incremental(&seq, fresh(ModelConfig::default()), &quick()).unwrap();
    assert_eq!(out.snapshots.len(), 1);
    let mut no_penalty = ModelConfig::default();
    no_penalty.flags.use_penalty = false;
    let plain = train_incremental(&seq, fresh(no_penalty), &quick()).unwrap();
    // With one dataset the penalty table is all ones.
    assert_eq!(out.final_model().pool, plain.final_model().pool);
}

#[test]
fn joint_training_registers_everything() {
    let seq = small_sequence(2);
    let out = train_joint(seq.datasets(), fresh(ModelConfig::default()), &quick()).unwrap();
    assert_eq!(out.model.num_classes(), 4);
    assert_eq!(out.stats.finalized().len(), 1);
    assert!(train_joint(seq.datasets(), out.model, &quick()).is_err());
}

#[test]
fn ablated_variants_route_gradients_as_configured() {
    let seq = small_sequence(2);
    let bag = &seq.datasets()[1].train[0];
    let weights = LossWeights::default();
    let mut config = ModelConfig::default();
    config.flags.use_key = false;
    let mut model = fresh(config);
    for ds in seq.datasets() {
        model.register_dataset(ds.index, &ds.class_names).unwrap();
    }
    let matched = model.select(&model.query(&bag.features).unwrap(), None).unwrap();
    assert_eq!(matched, (0..config.pool.top_n).collect::<Vec<_>>());
    let (loss, grads) = gradients(&model, bag, &matched, &StepScope::all(4), weights).unwrap();
    assert!(grads.keys.is_empty());
    assert_eq!(loss.matching, 0.0);

    config.flags.use_key = true;
    config.flags.use_tunable_vector = false;
    let mut model = fresh(config);
    for ds in seq.datasets() {
        model.register_dataset(ds.index, &ds.class_names).unwrap();
    }
    let matched = model.select(&model.query(&bag.features).unwrap(), None).unwrap();
    let (_, grads) = gradients(&model, bag, &matched, &StepScope::all(4), weights).unwrap();
    assert!(grads.tunable.is_empty());
    assert_eq!(grads.keys.len(), config.pool.top_n);

    let current_only = StepScope { loss_classes: vec![2, 3], trainable: vec![false, false, true, true] };
    config.flags.use_tunable_vector = true;
    let mut model = fresh(config);
    for ds in seq.datasets() {
        model.register_dataset(ds.index, &ds.class_names).unwrap();
    }
    let (_, grads) = gradients(&model, bag, &matched, &current_only, weights).unwrap();
    assert_eq!(grads.tunable.keys().copied().collect::<Vec<_>>(), vec![2, 3]);
}
