//! The five subcommands. Each returns the paths or reports it produced so tests can inspect them.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use qpmil_core::data::{DatasetSplit, IncrementalSequence};
use qpmil_core::eval::{
    evaluate_joint, evaluate_snapshots, joint_matrices, key_overlap, run_folds, run_single, CrossValReport, ExperimentSpec,
    FoldResult, Method, RunMetrics,
};
use qpmil_core::pool::{MatchStats, PoolConfig};
use qpmil_core::store::{
    append_csv_line, load_model, prototype_projection, read_dataset_dir, read_json, save_model, write_dataset_dir,
    write_frequency_csv, write_json, write_matrix_csv, write_projection_csv, write_training_log,
};
use qpmil_core::synth::{emulate_imbalance, TCGA_SLIDE_COUNTS};
use qpmil_core::trainer::LogRow;
use qpmil_core::{generate_sequence, Model, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const MODEL_FILE: &str = "model.json";
pub const JOINT_FILE: &str = "joint.json";
pub const METRICS_FILE: &str = "metrics.json";

/// Dataset directory or in-memory generation, per the config.
pub fn load_datasets(config: &RunConfig) -> Result<Vec<DatasetSplit<f64>>> {
    match &config.data {
        Some(dir) => read_dataset_dir(dir).with_context(|| format!("loading datasets from {}", dir.display())),
        None => Ok(generate_sequence::<f64>(&config.generator)?.datasets),
    }
}

fn sequence(config: &RunConfig, datasets: Vec<DatasetSplit<f64>>) -> Result<IncrementalSequence<f64>> {
    let perm = config.order.permutation(datasets.len());
    Ok(IncrementalSequence::new(datasets, &perm)?)
}

/// Class-imbalance presets for `generate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Training sizes in the proportions of the four TCGA cohorts.
    Tcga,
}

pub fn cmd_generate(config: &RunConfig, preset: Option<Preset>) -> Result<PathBuf> {
    let out = config.out_dir()?.to_path_buf();
    let generator = match preset {
        Some(Preset::Tcga) => emulate_imbalance(&config.generator, &TCGA_SLIDE_COUNTS)?,
        None => config.generator.clone(),
    };
    let data = generate_sequence::<f64>(&generator)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_dataset_dir(&out, &data.datasets)?;
    fs::write(out.join("generator.toml"), toml::to_string(&generator)?)?;
    write_json(&out.join("truth.json"), &data.truth)?;
    let bags: usize = data.datasets.iter().map(|d| d.train.len() + d.test.len()).sum();
    info!("wrote {} datasets ({bags} bags) to {}", data.datasets.len(), out.display());
    Ok(out)
}

/// Index of a trained run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: Method,
    /// Dataset names in training order.
    pub datasets: Vec<String>,
    /// Per-dataset checkpoints relative to the run directory; empty for JointTrain.
    pub checkpoints: Vec<String>,
    pub joint: Option<String>,
}

fn slug(i: usize, name: &str) -> String {
    let clean: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    format!("{:02}_{clean}", i + 1)
}

fn stats_prefix(stats: &MatchStats, pool: PoolConfig, k: usize) -> Result<MatchStats> {
    Ok(MatchStats::from_tables(pool, stats.finalized()[..k].to_vec(), stats.finalized_events()[..k].to_vec())?)
}

pub fn cmd_train(config: &RunConfig) -> Result<PathBuf> {
    let out = config.out_dir()?.to_path_buf();
    let mut snapshot = config.clone();
    if let Some(d) = &config.data {
        snapshot.data = Some(d.canonicalize()?);
    }
    let datasets = load_datasets(config)?;
    let spec = ExperimentSpec {
        model: config.model,
        train: TrainConfig { seed: config.shuffle_seed(), ..config.train },
        method: config.mode,
        order: config.order,
        with_joint: config.with_joint,
        seed: config.model_seed(),
    };
    let (result, art) = run_single(datasets, &spec)?;
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(out.join("logs"))?;
    fs::write(out.join(CONFIG_FILE), snapshot.to_toml()?)?;

    let names = result.datasets.clone();
    let mut manifest = RunManifest { mode: config.mode, datasets: names.clone(), checkpoints: Vec::new(), joint: None };
    let final_model = art.snapshots.last().expect("at least one snapshot");
    if config.mode == Method::Joint {
        save_model(&out.join(MODEL_FILE), final_model, &art.stats)?;
        write_training_log(&out.join("logs").join("joint.csv"), &art.log)?;
    } else {
        let pool = final_model.config.pool;
        for (k, model) in art.snapshots.iter().enumerate() {
            let rel = format!("checkpoints/{}.json", slug(k, &names[k]));
            save_model(&out.join(&rel), model, &stats_prefix(&art.stats, pool, k + 1)?)?;
            manifest.checkpoints.push(rel);
            let rows: Vec<LogRow> = art.log.iter().filter(|r| r.dataset == k + 1).cloned().collect();
            write_training_log(&out.join("logs").join(format!("{}.csv", slug(k, &names[k]))), &rows)?;
        }
        save_model(&out.join(MODEL_FILE), final_model, &art.stats)?;
        if let Some(joint) = &art.joint {
            let stats = MatchStats::new(joint.config.pool);
            save_model(&out.join(JOINT_FILE), joint, &stats)?;
            write_training_log(&out.join("logs").join("joint.csv"), &art.joint_log)?;
            manifest.joint = Some(JOINT_FILE.to_string());
        }
    }
    write_frequency_csv(&out.join("frequencies.csv"), &art.stats, &names)?;
    write_projection_csv(&out.join("projection.csv"), &prototype_projection(final_model)?)?;
    write_json(&out.join(RUN_FILE), &manifest)?;
    info!(
        "trained {:?} on {} datasets: ACC {:.4}, masked ACC {:.4}",
        config.mode,
        names.len(),
        result.metrics.acc,
        result.metrics.masked_acc
    );
    Ok(out)
}

/// Recomputes the performance matrices of a trained run from its stored models.
pub fn cmd_eval(run_dir: &Path, masked: bool, out: Option<&Path>) -> Result<CrossValReport> {
    if !run_dir.is_dir() {
        bail!("run directory {} does not exist", run_dir.display());
    }
    let config_path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&config_path).with_context(|| format!("{} is not a run directory", run_dir.display()))?;
    let config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", config_path.display()))?;
    config.validate()?;
    let manifest: RunManifest = read_json(&run_dir.join(RUN_FILE))?;
    let seq = sequence(&config, load_datasets(&config)?)?;
    let names: Vec<String> = seq.datasets().iter().map(|d| d.name.clone()).collect();
    if names != manifest.datasets {
        bail!("datasets {names:?} do not match the trained run {:?}", manifest.datasets);
    }

    let (final_model, stats): (Model, MatchStats) = load_model(&run_dir.join(MODEL_FILE))?;
    let matrices = if manifest.mode == Method::Joint {
        joint_matrices(&final_model, &seq)?
    } else {
        let snapshots = manifest
            .checkpoints
            .iter()
            .map(|rel| Ok(load_model::<f64>(&run_dir.join(rel))?.0))
            .collect::<Result<Vec<_>>>()?;
        let mut m = evaluate_snapshots(&snapshots, &seq)?;
        if let Some(rel) = &manifest.joint {
            let (joint, _): (Model, _) = load_model(&run_dir.join(rel))?;
            m.unmasked.joint = Some(evaluate_joint(&joint, &seq, false)?);
            m.masked.joint = Some(evaluate_joint(&joint, &seq, true)?);
        }
        m
    };
    let mut metrics = RunMetrics::from_matrices(&matrices)?;
    if manifest.mode == Method::Qpmil && final_model.config.flags.use_key {
        metrics.key_overlap = key_overlap(stats.finalized(), final_model.config.pool.top_n);
    }
    let fold = FoldResult { fold: 0, matrices, metrics, frequencies: stats.finalized().to_vec(), datasets: names.clone() };
    let report = CrossValReport::from_folds(vec![fold])?;

    let dest = out.unwrap_or(run_dir);
    fs::create_dir_all(dest)?;
    write_json(&dest.join(METRICS_FILE), &report)?;
    write_matrix_csv(&dest.join("matrix.csv"), &report.per_fold[0].matrices.unmasked, &names)?;
    if masked {
        write_matrix_csv(&dest.join("masked_matrix.csv"), &report.per_fold[0].matrices.masked, &names)?;
    }
    Ok(report)
}

/// Rows of the component and prototype-pool ablation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// FineTune lower bound.
    Finetune,
    /// Prototype pool without any class-feature enhancement.
    Pool,
    PoolTv,
    PoolTvCe,
    /// The complete method.
    Full,
    NoKey,
    NoPenalty,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Finetune, Variant::Pool, Variant::PoolTv, Variant::PoolTvCe, Variant::Full, Variant::NoKey, Variant::NoPenalty];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Finetune => "finetune",
            Variant::Pool => "pool",
            Variant::PoolTv => "pool-tv",
            Variant::PoolTvCe => "pool-tv-ce",
            Variant::Full => "full",
            Variant::NoKey => "no-key",
            Variant::NoPenalty => "no-penalty",
        }
    }

    pub fn spec(self, config: &RunConfig) -> ExperimentSpec {
        let mut model = config.model;
        let mut method = Method::Qpmil;
        let flags = &mut model.flags;
        match self {
            Variant::Finetune => {
                method = Method::Finetune;
                flags.use_tunable_vector = false;
                flags.use_class_ensemble = false;
            }
            Variant::Pool => {
                flags.use_tunable_vector = false;
                flags.use_class_ensemble = false;
                flags.use_class_similarity_loss = false;
            }
            Variant::PoolTv => {
                flags.use_class_ensemble = false;
                flags.use_class_similarity_loss = false;
            }
            Variant::PoolTvCe => flags.use_class_similarity_loss = false,
            Variant::Full => {}
            Variant::NoKey => flags.use_key = false,
            Variant::NoPenalty => flags.use_penalty = false,
        }
        ExperimentSpec {
            model,
            train: config.train,
            method,
            order: config.order,
            with_joint: config.with_joint && self == Variant::Full,
            seed: config.seed,
        }
    }
}

/// `metrics.json` plus one matrix CSV per fold.
pub fn write_report(dir: &Path, report: &CrossValReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join(METRICS_FILE), report)?;
    for fold in &report.per_fold {
        write_matrix_csv(&dir.join(format!("fold_{}.csv", fold.fold + 1)), &fold.matrices.unmasked, &fold.datasets)?;
        write_matrix_csv(&dir.join(format!("fold_{}_masked.csv", fold.fold + 1)), &fold.matrices.masked, &fold.datasets)?;
    }
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub const ABLATION_HEADER: &str =
    "variant,key,penalty,tv,ce,csl,acc_mean,acc_std,forgetting_mean,forgetting_std,bwt_mean,masked_acc_mean,upper_bound_ratio_mean";

pub fn cmd_ablate(config: &RunConfig, variants: &[Variant]) -> Result<Vec<(Variant, CrossValReport)>> {
    let out = config.out_dir()?.to_path_buf();
    let datasets = load_datasets(config)?;
    let chosen: BTreeSet<Variant> = if variants.is_empty() { Variant::ALL.into_iter().collect() } else { variants.iter().copied().collect() };
    let mut results = Vec::new();
    let mut table = vec![ABLATION_HEADER.to_string()];
    for v in chosen {
        let spec = v.spec(config);
        info!("ablation {}: {} folds", v.name(), config.folds);
        let report = run_folds(&datasets, config.folds, &spec, config.workers)?;
        write_report(&out.join("variants").join(v.name()), &report)?;
        let f = spec.model.flags;
        let pooled = spec.method == Method::Qpmil;
        let yes = |b: bool| if b { "1" } else { "0" };
        table.push(
            [
                v.name().to_string(),
                yes(pooled && f.use_key).into(),
                yes(pooled && f.use_key && f.use_penalty).into(),
                yes(f.use_tunable_vector).into(),
                yes(f.use_class_ensemble).into(),
                yes(pooled && f.use_class_similarity_loss).into(),
                cell(Some(report.acc.mean)),
                cell(Some(report.acc.std)),
                cell(report.forgetting.map(|s| s.mean)),
                cell(report.forgetting.map(|s| s.std)),
                cell(report.bwt.map(|s| s.mean)),
                cell(Some(report.masked_acc.mean)),
                cell(report.upper_bound_ratio.map(|s| s.mean)),
            ]
            .join(","),
        );
        results.push((v, report));
    }
    fs::create_dir_all(&out)?;
    fs::write(out.join("ablation.csv"), table.join("\n") + "\n")?;
    Ok(results)
}

pub const SWEEP_HEADER: &str = "size,top_n,prompt_len,acc_mean,acc_std,forgetting_mean,forgetting_std,masked_acc_mean";

/// Runs every grid point not already present in `sweep.csv`, appending one row per point.
pub fn cmd_sweep(config: &RunConfig) -> Result<PathBuf> {
    let out = config.out_dir()?.to_path_buf();
    fs::create_dir_all(&out)?;
    let path = out.join("sweep.csv");
    let mut done = BTreeSet::new();
    if path.exists() {
        let mut reader = csv::Reader::from_path(&path)?;
        if reader.headers()?.iter().collect::<Vec<_>>().join(",") != SWEEP_HEADER {
            bail!("{} has an unexpected header", path.display());
        }
        for row in reader.records() {
            let row = row?;
            let key: Vec<usize> = (0..3).map(|i| row[i].parse()).collect::<Result<_, _>>()?;
            done.insert((key[0], key[1], key[2]));
        }
    }
    let datasets = load_datasets(config)?;
    let grid = &config.sweep;
    for &size in &grid.size {
        for &top_n in &grid.top_n {
            for &prompt_len in &grid.prompt_len {
                if done.contains(&(size, top_n, prompt_len)) {
                    info!("sweep point M={size} N={top_n} L_P={prompt_len} already done");
                    continue;
                }
                let pool = PoolConfig { size, top_n, prompt_len };
                if pool.validate().is_err() {
                    warn!("skipping invalid pool M={size} N={top_n} L_P={prompt_len}");
                    continue;
                }
                let mut spec = Variant::Full.spec(config);
                spec.with_joint = false;
                spec.model.pool = pool;
                let r = run_folds(&datasets, config.folds, &spec, config.workers)?;
                let line = [
                    size.to_string(),
                    top_n.to_string(),
                    prompt_len.to_string(),
                    cell(Some(r.acc.mean)),
                    cell(Some(r.acc.std)),
                    cell(r.forgetting.map(|s| s.mean)),
                    cell(r.forgetting.map(|s| s.std)),
                    cell(Some(r.masked_acc.mean)),
                ]
                .join(",");
                append_csv_line(&path, SWEEP_HEADER, &line)?;
                info!("sweep point M={size} N={top_n} L_P={prompt_len}: ACC {:.4}", r.acc.mean);
            }
        }
    }
    if !path.exists() {
        fs::write(&path, format!("{SWEEP_HEADER}\n"))?;
    }
    Ok(path)
}
