//! Run configuration: one TOML file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qpmil_core::data::DatasetOrder;
use qpmil_core::eval::Method;
use qpmil_core::seeds::derive_seed;
use qpmil_core::trainer::REVERSE_BATCH_SIZE;
use qpmil_core::{GeneratorConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Grid of pool shapes for `sweep`; the cartesian product is run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub size: Vec<usize>,
    pub top_n: Vec<usize>,
    pub prompt_len: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self { size: vec![20], top_n: vec![1, 3, 5, 7], prompt_len: vec![24] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Generation uses it directly; folds, initialisation and shuffling use derived seeds.
    pub seed: u64,
    pub mode: Method,
    pub order: DatasetOrder,
    pub folds: usize,
    pub workers: usize,
    /// Also train JointTrain so reports carry the upper-bound ratio.
    pub with_joint: bool,
    /// Dataset directory written by `generate`. Without it the generator runs in memory.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Method::Qpmil,
            order: DatasetOrder::Forward,
            folds: 3,
            workers: 1,
            with_joint: true,
            data: None,
            out: None,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepGrid::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Method>,
    pub order: Option<DatasetOrder>,
    pub folds: Option<usize>,
    pub workers: Option<usize>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` and fills order-dependent defaults.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let (mut config, batch_given) = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let raw: toml::Table = toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                let batch_given = raw.get("train").and_then(|t| t.get("batch_size")).is_some();
                let config: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                (config, batch_given)
            }
            None => (RunConfig::default(), false),
        };
        if let Some(s) = overrides.seed {
            config.seed = s;
        }
        if let Some(m) = overrides.mode {
            config.mode = m;
        }
        if let Some(o) = overrides.order {
            config.order = o;
        }
        if let Some(k) = overrides.folds {
            config.folds = k;
        }
        if let Some(w) = overrides.workers {
            config.workers = w;
        }
        if overrides.data.is_some() {
            config.data.clone_from(&overrides.data);
        }
        if overrides.out.is_some() {
            config.out.clone_from(&overrides.out);
        }
        if !batch_given && config.order == DatasetOrder::Reverse {
            config.train.batch_size = REVERSE_BATCH_SIZE;
        }
        config.generator.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            bail!("folds must be at least 2, got {}", self.folds);
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        if let Some(d) = &self.data {
            if !d.is_dir() {
                bail!("data directory {} does not exist", d.display());
            }
        }
        self.generator.validate()?;
        self.model.pool.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Output directory, or an error naming the missing flag.
    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("no output directory: pass --out or set `out` in the config")
    }

    /// Seed for the model initialisation of single-split runs.
    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, "model", 0)
    }

    /// Seed for bag shuffling of single-split runs.
    pub fn shuffle_seed(&self) -> u64 {
        derive_seed(self.seed, "shuffle", 0)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 4\n[model.pool]\ntop_n = 3\n[train]\nepochs = 2\n").unwrap();
        let c = RunConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.generator.seed, 4);
        assert_eq!((c.model.pool.size, c.model.pool.top_n, c.model.pool.prompt_len), (20, 3, 24));
        assert_eq!((c.train.epochs, c.train.batch_size), (2, 16));
        assert!(c.model.flags.use_key);
    }

    #[test]
    fn flags_override_the_file_and_reverse_halves_the_batch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 4\nfolds = 5\n").unwrap();
        let o = Overrides { seed: Some(9), order: Some(DatasetOrder::Reverse), ..Overrides::default() };
        let c = RunConfig::load(Some(&path), &o).unwrap();
        assert_eq!((c.seed, c.folds, c.train.batch_size), (9, 5, 8));
        fs::write(&path, "order = \"reverse\"\n[train]\nbatch_size = 16\n").unwrap();
        assert_eq!(RunConfig::load(Some(&path), &Overrides::default()).unwrap().train.batch_size, 16);
    }

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig { seed: 3, data: Some(PathBuf::from(".")), ..RunConfig::default() };
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "folds = 1\n").unwrap();
        assert!(RunConfig::load(Some(&path), &Overrides::default()).is_err());
        fs::write(&path, "fold = 3\n").unwrap();
        assert!(RunConfig::load(Some(&path), &Overrides::default()).is_err());
        let missing = Overrides { data: Some(dir.path().join("nope")), ..Overrides::default() };
        assert!(RunConfig::load(None, &missing).is_err());
    }
}
