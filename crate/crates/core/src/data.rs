//! Domain records shared by all modules: bags, dataset sequences, and the class registry.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Token replaced by a class name when a template is expanded.
pub const CLASS_NAME_PLACEHOLDER: &str = "ClassName";

const BUILTIN_CATALOG: &str = include_str!("../data/class_ensemble.txt");

/// One weakly labeled sample: an `n × D_f` instance-feature matrix with a bag label.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBag<T> {
    pub bag_id: String,
    /// 1-based dataset index.
    pub dataset_index: usize,
    /// Global class id.
    pub label: usize,
    pub features: Matrix<T>,
}

impl<T: Scalar> InstanceBag<T> {
    pub fn new(bag_id: impl Into<String>, dataset_index: usize, label: usize, features: Matrix<T>) -> Result<Self> {
        let bag_id = bag_id.into();
        if features.rows() == 0 {
            return Err(Error::InvalidInput(format!("bag {bag_id} has no instances")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite(format!("features of bag {bag_id}")));
        }
        if dataset_index == 0 {
            return Err(Error::InvalidInput("dataset indices are 1-based".into()));
        }
        Ok(Self { bag_id, dataset_index, label, features })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Train/test bags of one dataset together with its class descriptions.
#[derive(Debug, Clone)]
pub struct DatasetSplit<T> {
    pub index: usize,
    pub name: String,
    /// Global class ids owned by this dataset, ascending.
    pub labels: Vec<usize>,
    /// Short tumor-type codes, parallel to `labels`.
    pub class_codes: Vec<String>,
    /// Class-name lists, parallel to `labels`.
    pub class_names: Vec<Vec<String>>,
    pub train: Vec<InstanceBag<T>>,
    pub test: Vec<InstanceBag<T>>,
}

impl<T: Scalar> DatasetSplit<T> {
    pub fn local_index(&self, label: usize) -> Option<usize> {
        self.labels.iter().position(|l| *l == label)
    }

    pub fn all_bags(&self) -> impl Iterator<Item = &InstanceBag<T>> {
        self.train.iter().chain(&self.test)
    }
}

/// Ordered sequence of datasets presented to the incremental learner.
///
/// Construction relabels bags so that class ids are contiguous in arrival order.
#[derive(Debug, Clone)]
pub struct IncrementalSequence<T> {
    datasets: Vec<DatasetSplit<T>>,
}

/// Presentation order of the datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetOrder {
    #[default]
    Forward,
    Reverse,
}

impl DatasetOrder {
    pub fn permutation(self, len: usize) -> Vec<usize> {
        match self {
            DatasetOrder::Forward => (0..len).collect(),
            DatasetOrder::Reverse => (0..len).rev().collect(),
        }
    }
}

impl<T: Scalar> IncrementalSequence<T> {
    /// Arranges `datasets` by `order` (a permutation of their positions).
    pub fn new(datasets: Vec<DatasetSplit<T>>, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; datasets.len()];
        if order.len() != datasets.len() || order.iter().any(|&i| i >= datasets.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidInput("order is not a permutation of the datasets".into()));
        }
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        for d in &datasets {
            for l in &d.labels {
                if let Some(prev) = owner.insert(*l, d.index) {
                    return Err(Error::InvalidInput(format!(
                        "class {l} claimed by datasets {prev} and {}",
                        d.index
                    )));
                }
            }
            if let Some(b) = d.all_bags().find(|b| b.dataset_index != d.index || d.local_index(b.label).is_none()) {
                return Err(Error::InvalidInput(format!("bag {} does not belong to dataset {}", b.bag_id, d.index)));
            }
        }
        let mut slots: Vec<Option<DatasetSplit<T>>> = datasets.into_iter().map(Some).collect();
        let mut arranged = Vec::with_capacity(slots.len());
        let mut next_id = 0;
        for &pos in order {
            let mut d = slots[pos].take().expect("permutation checked");
            let remap: BTreeMap<usize, usize> =
                d.labels.iter().enumerate().map(|(k, l)| (*l, next_id + k)).collect();
            for b in d.train.iter_mut().chain(d.test.iter_mut()) {
                b.label = remap[&b.label];
            }
            d.labels = (next_id..next_id + d.labels.len()).collect();
            next_id += d.labels.len();
            arranged.push(d);
        }
        Ok(Self { datasets: arranged })
    }

    /// Datasets in arrival order.
    pub fn datasets(&self) -> &[DatasetSplit<T>] {
        &self.datasets
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.datasets.iter().map(|d| d.labels.len()).sum()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.datasets.iter().flat_map(|d| d.all_bags()).map(|b| b.dim()).next()
    }
}

/// One registered class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub names: Vec<String>,
    pub dataset_index: usize,
    /// Id of the first class registered together with this one.
    pub offset: usize,
}

/// Class names per id plus the shared template list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRegistry {
    templates: Vec<String>,
    classes: Vec<ClassEntry>,
}

impl ClassRegistry {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::InvalidInput("template list is empty".into()));
        }
        if let Some(t) = templates.iter().find(|t| !t.contains(CLASS_NAME_PLACEHOLDER)) {
            return Err(Error::InvalidInput(format!("template {t:?} lacks the {CLASS_NAME_PLACEHOLDER} placeholder")));
        }
        Ok(Self { templates, classes: Vec::new() })
    }

    /// Registry with the shipped template list.
    pub fn with_builtin_templates() -> Self {
        Self::new(EnsembleCatalog::builtin().templates.clone()).expect("builtin templates are valid")
    }

    /// Appends one class per name list; returns the new contiguous id range.
    pub fn register_dataset(&mut self, dataset_index: usize, names_per_class: &[Vec<String>]) -> Result<Range<usize>> {
        if names_per_class.is_empty() || names_per_class.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput("every class needs at least one name".into()));
        }
        let mut fresh = BTreeSet::new();
        for name in names_per_class.iter().flatten() {
            if let Some(c) = self.classes.iter().find(|c| c.names.contains(name)) {
                return Err(Error::DuplicateClassName { name: name.clone(), dataset: c.dataset_index });
            }
            if !fresh.insert(name) {
                return Err(Error::DuplicateClassName { name: name.clone(), dataset: dataset_index });
            }
        }
        let offset = self.classes.len();
        for (k, names) in names_per_class.iter().enumerate() {
            self.classes.push(ClassEntry { id: offset + k, names: names.clone(), dataset_index, offset });
        }
        Ok(offset..self.classes.len())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, id: usize) -> Result<&ClassEntry> {
        self.classes.get(id).ok_or(Error::UnknownClass(id))
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    /// Class ids owned by `dataset_index`.
    pub fn classes_of_dataset(&self, dataset_index: usize) -> Vec<usize> {
        self.classes.iter().filter(|c| c.dataset_index == dataset_index).map(|c| c.id).collect()
    }

    /// All `|names| × |templates|` descriptions of a class, names outer and templates inner.
    pub fn expand_descriptions(&self, class_id: usize) -> Result<Vec<String>> {
        let class = self.class(class_id)?;
        Ok(class
            .names
            .iter()
            .flat_map(|name| self.templates.iter().map(move |t| t.replace(CLASS_NAME_PLACEHOLDER, name)))
            .collect())
    }

    /// The single description used when the class ensemble is switched off.
    pub fn bare_description(&self, class_id: usize) -> Result<String> {
        Ok(self.class(class_id)?.names[0].clone())
    }
}

/// Names for one tumor type in the shipped catalog.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogClass {
    pub dataset: String,
    pub code: String,
    pub names: Vec<String>,
}

/// Parsed template/name data file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsembleCatalog {
    pub templates: Vec<String>,
    pub classes: Vec<CatalogClass>,
}

impl EnsembleCatalog {
    pub fn builtin() -> &'static Self {
        static CATALOG: std::sync::OnceLock<EnsembleCatalog> = std::sync::OnceLock::new();
        CATALOG.get_or_init(|| Self::parse(BUILTIN_CATALOG).expect("shipped catalog parses"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        enum Section {
            None,
            Templates,
            Class(usize),
        }
        let mut templates = Vec::new();
        let mut classes: Vec<CatalogClass> = Vec::new();
        let mut section = Section::None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let parts: Vec<&str> = header.split_whitespace().collect();
                section = match parts.as_slice() {
                    ["templates"] => Section::Templates,
                    ["class", dataset, code] => {
                        classes.push(CatalogClass { dataset: dataset.to_string(), code: code.to_string(), names: vec![] });
                        Section::Class(classes.len() - 1)
                    }
                    _ => {
                        return Err(Error::DataFile { line: lineno + 1, reason: format!("unknown section [{header}]") })
                    }
                };
                continue;
            }
            match section {
                Section::None => {
                    return Err(Error::DataFile { line: lineno + 1, reason: "entry outside a section".into() })
                }
                Section::Templates => templates.push(line.to_string()),
                Section::Class(i) => classes[i].names.push(line.to_string()),
            }
        }
        if templates.is_empty() {
            return Err(Error::DataFile { line: 0, reason: "no templates".into() });
        }
        if let Some(c) = classes.iter().find(|c| c.names.is_empty()) {
            return Err(Error::DataFile { line: 0, reason: format!("class {} {} has no names", c.dataset, c.code) });
        }
        Ok(Self { templates, classes })
    }

    pub fn names_for(&self, dataset: &str, code: &str) -> Option<&[String]> {
        self.classes.iter().find(|c| c.dataset == dataset && c.code == code).map(|c| c.names.as_slice())
    }

    /// Dataset names in file order, each with its class codes.
    pub fn datasets(&self) -> Vec<(String, Vec<String>)> {
        let mut out: Vec<(String, Vec<String>)> = Vec::new();
        for c in &self.classes {
            match out.iter_mut().find(|(d, _)| *d == c.dataset) {
                Some((_, codes)) => codes.push(c.code.clone()),
                None => out.push((c.dataset.clone(), vec![c.code.clone()])),
            }
        }
        out
    }
}
