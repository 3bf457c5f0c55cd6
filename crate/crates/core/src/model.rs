//! The forward model: prototype-guided aggregation of instance features into a
//! bag feature, class-feature enhancement, and class-probability prediction.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClassRegistry;
use crate::encoders::{frozen_encoders, EncoderDims, PromptEncoder, TokenEmbedder, FROZEN_ENCODER_SEED};
use crate::error::{Error, Result};
use crate::linalg::{axpy, cosine, dot, guarded_norm, norm, softmax, Matrix};
use crate::pool::{query_vector, PoolConfig, PoolInit, PrototypePool, QueryMode};
use crate::scalar::Scalar;

/// Cached intermediates of [`aggregate_bag_feature`].
#[derive(Debug, Clone)]
pub struct AggregationTrace<T> {
    /// Row-normalised instances.
    pub instances_unit: Matrix<T>,
    /// Row-normalised prototype features.
    pub prototypes_unit: Matrix<T>,
    pub prototype_norms: Vec<T>,
    /// `n × N` aggregation weights; each column sums to one.
    pub weights: Matrix<T>,
    /// `N × D_f` prototype-guided bag features.
    pub guided: Matrix<T>,
    pub bag_feature: Vec<T>,
}

fn unit_rows<T: Scalar>(m: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = guarded_norm(m.row(i));
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Bag feature `mean_j Σ_i W_ij Z_i` with `W = softmax_i(cos(Z_i, F_j))` column-wise.
pub fn aggregate_bag_feature<T: Scalar>(instances: &Matrix<T>, prototypes: &Matrix<T>) -> Result<Vec<T>> {
    Ok(aggregate_traced(instances, prototypes)?.bag_feature)
}

pub fn aggregate_traced<T: Scalar>(instances: &Matrix<T>, prototypes: &Matrix<T>) -> Result<AggregationTrace<T>> {
    let (n, d) = instances.shape();
    let k = prototypes.rows();
    if n == 0 || k == 0 {
        return Err(Error::InvalidInput("aggregation needs at least one instance and one prototype".into()));
    }
    if prototypes.cols() != d {
        return Err(Error::Shape(format!("instances have width {d}, prototypes {}", prototypes.cols())));
    }
    let (instances_unit, _) = unit_rows(instances);
    let (prototypes_unit, prototype_norms) = unit_rows(prototypes);
    let mut weights = Matrix::zeros(n, k);
    let mut guided = Matrix::zeros(k, d);
    let mut column = vec![T::zero(); n];
    for j in 0..k {
        for (i, c) in column.iter_mut().enumerate() {
            *c = dot(instances_unit.row(i), prototypes_unit.row(j));
        }
        let w = softmax(&column);
        for (i, wi) in w.iter().enumerate() {
            weights.set(i, j, *wi);
            axpy(*wi, instances.row(i), guided.row_mut(j));
        }
    }
    let bag_feature = guided.row_mean();
    Ok(AggregationTrace { instances_unit, prototypes_unit, prototype_norms, weights, guided, bag_feature })
}

/// Gradient of a bag-feature cotangent with respect to the (unnormalised) prototype features.
pub fn aggregate_backward<T: Scalar>(instances: &Matrix<T>, trace: &AggregationTrace<T>, d_bag: &[T]) -> Matrix<T> {
    let (n, d) = instances.shape();
    let k = trace.weights.cols();
    let share = T::one() / T::from_usize(k).unwrap();
    let d_guided: Vec<T> = d_bag.iter().map(|g| *g * share).collect();
    // dW_ij = Z_i · dg_j; identical for every column since all guided rows share one cotangent.
    let d_w: Vec<T> = (0..n).map(|i| dot(instances.row(i), &d_guided)).collect();
    let mut out = Matrix::zeros(k, d);
    for j in 0..k {
        let inner: T = (0..n).map(|i| trace.weights.get(i, j) * d_w[i]).sum();
        let mut d_unit = vec![T::zero(); d];
        for (i, dwi) in d_w.iter().enumerate() {
            let d_s = trace.weights.get(i, j) * (*dwi - inner);
            axpy(d_s, trace.instances_unit.row(i), &mut d_unit);
        }
        // Through F_j / ‖F_j‖.
        let u = trace.prototypes_unit.row(j);
        let radial = dot(u, &d_unit);
        let inv = T::one() / trace.prototype_norms[j];
        for ((o, g), ui) in out.row_mut(j).iter_mut().zip(&d_unit).zip(u) {
            *o = (*g - radial * *ui) * inv;
        }
    }
    out
}

/// `τ · cos(f_b, f'_c)` for every class feature.
pub fn class_logits<T: Scalar>(bag_feature: &[T], class_features: &[Vec<T>], tau: T) -> Result<Vec<T>> {
    if norm(bag_feature) <= T::norm_eps() {
        return Err(Error::DegenerateNorm("bag feature"));
    }
    Ok(class_features.iter().map(|f| tau * cosine(bag_feature, f)).collect())
}

/// Class probabilities over `subset` (all classes when `None`), in subset order.
pub fn predict<T: Scalar>(bag_feature: &[T], class_features: &[Vec<T>], tau: T, subset: Option<&[usize]>) -> Result<Vec<T>> {
    let logits = class_logits(bag_feature, class_features, tau)?;
    match subset {
        None => {
            if logits.is_empty() {
                return Err(Error::InvalidInput("no classes to predict".into()));
            }
            Ok(softmax(&logits))
        }
        Some(s) => {
            if s.is_empty() {
                return Err(Error::InvalidInput("empty class subset".into()));
            }
            let picked = s
                .iter()
                .map(|c| logits.get(*c).copied().ok_or(Error::UnknownClass(*c)))
                .collect::<Result<Vec<T>>>()?;
            Ok(softmax(&picked))
        }
    }
}

/// Switches for the ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_key: bool,
    pub use_penalty: bool,
    pub use_tunable_vector: bool,
    pub use_class_ensemble: bool,
    pub use_class_similarity_loss: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_key: true,
            use_penalty: true,
            use_tunable_vector: true,
            use_class_ensemble: true,
            use_class_similarity_loss: true,
        }
    }
}

/// Frozen ensemble features plus tunable residuals, amplitude `α` and temperature `τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHead<T> {
    pub base: Vec<Vec<T>>,
    pub tunable: Vec<Vec<T>>,
    pub alpha: T,
    pub tau: T,
}

impl<T: Scalar> ClassHead<T> {
    pub fn new(alpha: T, tau: T) -> Result<Self> {
        if alpha < T::zero() || tau.is_nan() || tau <= T::zero() {
            return Err(Error::InvalidInput(format!("need alpha >= 0 and tau > 0, got {alpha} and {tau}")));
        }
        Ok(Self { base: Vec::new(), tunable: Vec::new(), alpha, tau })
    }

    /// Adds a class with a zero tunable vector.
    pub fn push_class(&mut self, base: Vec<T>) -> Result<usize> {
        if !base.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("class base feature".into()));
        }
        self.tunable.push(vec![T::zero(); base.len()]);
        self.base.push(base);
        Ok(self.base.len() - 1)
    }

    pub fn num_classes(&self) -> usize {
        self.base.len()
    }

    /// `f'_txt = f_txt + α·v` (or `f_txt` when the tunable vector is off).
    pub fn enhanced(&self, class_id: usize, use_tunable_vector: bool) -> Result<Vec<T>> {
        let mut f = self.base.get(class_id).ok_or(Error::UnknownClass(class_id))?.clone();
        if use_tunable_vector {
            axpy(self.alpha, &self.tunable[class_id], &mut f);
        }
        Ok(f)
    }

    pub fn enhanced_all(&self, use_tunable_vector: bool) -> Vec<Vec<T>> {
        (0..self.num_classes()).map(|c| self.enhanced(c, use_tunable_vector).unwrap()).collect()
    }
}

/// Mean text feature over a class's descriptions.
pub fn ensemble_feature<T: Scalar>(
    encoder: &PromptEncoder<T>,
    embedder: &TokenEmbedder,
    registry: &ClassRegistry,
    class_id: usize,
    use_class_ensemble: bool,
) -> Result<Vec<T>> {
    let descriptions =
        if use_class_ensemble { registry.expand_descriptions(class_id)? } else { vec![registry.bare_description(class_id)?] };
    let mut acc = vec![T::zero(); encoder.dims().d_f];
    for d in &descriptions {
        axpy(T::one(), &encoder.encode_text(embedder, d)?, &mut acc);
    }
    let inv = T::one() / T::from_usize(descriptions.len()).unwrap();
    acc.iter_mut().for_each(|x| *x *= inv);
    Ok(acc)
}

/// Enhanced class feature `f_txt + α·v` for a registered class.
pub fn build_class_feature<T: Scalar>(
    head: &ClassHead<T>,
    encoder: &PromptEncoder<T>,
    embedder: &TokenEmbedder,
    registry: &ClassRegistry,
    class_id: usize,
    flags: AblationFlags,
) -> Result<Vec<T>> {
    let mut f = ensemble_feature(encoder, embedder, registry, class_id, flags.use_class_ensemble)?;
    if flags.use_tunable_vector {
        let v = head.tunable.get(class_id).ok_or(Error::UnknownClass(class_id))?;
        axpy(head.alpha, v, &mut f);
    }
    Ok(f)
}

/// Architecture and initialisation settings of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderDims,
    pub pool: PoolConfig,
    pub init: PoolInit,
    pub alpha: f64,
    pub tau: f64,
    pub flags: AblationFlags,
    pub query_mode: QueryMode,
    /// Seed of the frozen encoders, independent of the per-run initialisation seed.
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderDims::default(),
            pool: PoolConfig::default(),
            init: PoolInit::default(),
            alpha: 0.5,
            tau: 1.0 / 0.07,
            flags: AblationFlags::default(),
            query_mode: QueryMode::Max,
            encoder_seed: FROZEN_ENCODER_SEED,
        }
    }
}

/// Forward-pass intermediates for one bag.
#[derive(Debug, Clone)]
pub struct Inference<T> {
    pub query: Vec<T>,
    pub matched: Vec<usize>,
    pub bag_feature: Vec<T>,
    /// Logits over every registered class.
    pub logits: Vec<T>,
}

/// The assembled model: pool, class head, frozen encoders and class registry.
#[derive(Debug, Clone)]
pub struct QpmilModel<T> {
    pub config: ModelConfig,
    pub seed: u64,
    pub pool: PrototypePool<T>,
    pub head: ClassHead<T>,
    pub encoder: PromptEncoder<T>,
    pub embedder: TokenEmbedder,
    pub registry: ClassRegistry,
}

impl<T: Scalar> QpmilModel<T> {
    /// Fresh model; keys and prompts drawn from a normal distribution seeded by `seed`.
    /// Encoders come from `config.encoder_seed`.
    pub fn new(config: ModelConfig, registry: ClassRegistry, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = PrototypePool::random(config.pool, config.encoder.d_f, config.encoder.d_e, config.init, &mut rng)?;
        let (encoder, embedder) = frozen_encoders(config.encoder, config.encoder_seed);
        let mut model = Self {
            config,
            seed,
            pool,
            head: ClassHead::new(T::lit(config.alpha), T::lit(config.tau))?,
            encoder,
            embedder,
            registry: ClassRegistry::new(registry.templates().to_vec())?,
        };
        for c in registry.classes() {
            if c.id == c.offset {
                let names: Vec<Vec<String>> =
                    registry.classes_of_dataset(c.dataset_index).iter().map(|id| registry.classes()[*id].names.clone()).collect();
                model.register_dataset(c.dataset_index, &names)?;
            }
        }
        Ok(model)
    }

    pub fn flags(&self) -> AblationFlags {
        self.config.flags
    }

    /// Registers classes and caches their frozen ensemble features.
    pub fn register_dataset(&mut self, dataset_index: usize, names_per_class: &[Vec<String>]) -> Result<Range<usize>> {
        let ids = self.registry.register_dataset(dataset_index, names_per_class)?;
        for id in ids.clone() {
            let base =
                ensemble_feature(&self.encoder, &self.embedder, &self.registry, id, self.config.flags.use_class_ensemble)?;
            self.head.push_class(base)?;
        }
        Ok(ids)
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn class_features(&self) -> Vec<Vec<T>> {
        self.head.enhanced_all(self.config.flags.use_tunable_vector)
    }

    pub fn query(&self, instances: &Matrix<T>) -> Result<Vec<T>> {
        query_vector(instances, self.config.query_mode)
    }

    /// Matched prototype indices; without keys the first `N` prototypes are always used.
    pub fn select(&self, query: &[T], penalty: Option<&[T]>) -> Result<Vec<usize>> {
        if !self.config.flags.use_key {
            return Ok((0..self.config.pool.top_n).collect());
        }
        match penalty {
            Some(p) if self.config.flags.use_penalty => self.pool.match_top_n(query, p),
            _ => self.pool.match_top_n(query, &vec![T::one(); self.config.pool.size]),
        }
    }

    /// Prototype features `F_p` for the matched indices.
    pub fn prototype_features(&self, matched: &[usize]) -> Result<Matrix<T>> {
        let rows = matched
            .iter()
            .map(|i| self.encoder.encode_prompt(&self.pool.pairs()[*i].prompt))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    /// Penalty-free forward pass over all registered classes.
    pub fn infer(&self, instances: &Matrix<T>) -> Result<Inference<T>> {
        let query = self.query(instances)?;
        let matched = self.select(&query, None)?;
        let bag_feature = aggregate_bag_feature(instances, &self.prototype_features(&matched)?)?;
        let logits = class_logits(&bag_feature, &self.class_features(), self.head.tau)?;
        Ok(Inference { query, matched, bag_feature, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_instance_bag_returns_that_instance() {
        let z = Matrix::from_rows(&[vec![0.2, -1.0, 3.0]]).unwrap();
        let f = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 5.0, 1.0]]).unwrap();
        assert_eq!(aggregate_bag_feature(&z, &f).unwrap(), vec![0.2, -1.0, 3.0]);
    }

    #[test]
    fn equidistant_instances_average_uniformly() {
        // Both instances make the same angle with the prototype.
        let z = Matrix::from_rows(&[vec![1.0f64, 1.0], vec![1.0, -1.0]]).unwrap();
        let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let fb = aggregate_bag_feature(&z, &f).unwrap();
        assert!((fb[0] - 1.0).abs() < 1e-15 && fb[1].abs() < 1e-15);
    }

    #[test]
    fn aggregation_rejects_bad_shapes() {
        let z = Matrix::<f64>::zeros(2, 3);
        assert!(aggregate_bag_feature(&z, &Matrix::zeros(1, 2)).is_err());
        assert!(aggregate_bag_feature(&z, &Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn aggregation_backward_matches_finite_differences() {
        let z = Matrix::from_rows(&[vec![0.5, -0.2, 0.9], vec![-0.7, 0.4, 0.1], vec![0.3, 0.8, -0.5]]).unwrap();
        let f = Matrix::from_rows(&[vec![0.1, 0.7, -0.3], vec![-0.4, 0.2, 0.6]]).unwrap();
        let cot = [0.3, -1.1, 0.6];
        let trace = aggregate_traced(&z, &f).unwrap();
        let grad = aggregate_backward(&z, &trace, &cot);
        let obj = |f: &Matrix<f64>| dot(&aggregate_bag_feature(&z, f).unwrap(), &cot);
        for j in 0..2 {
            for k in 0..3 {
                let h = 1e-6;
                let (mut p, mut m) = (f.clone(), f.clone());
                p.set(j, k, f.get(j, k) + h);
                m.set(j, k, f.get(j, k) - h);
                let fd = (obj(&p) - obj(&m)) / (2.0 * h);
                assert!((fd - grad.get(j, k)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn predict_reference_values() {
        assert_eq!(predict(&[1.0, 2.0], &[vec![3.0, 1.0]], 14.2857, None).unwrap(), vec![1.0]);
        let tau: f64 = 14.2857;
        let p = predict(&[1.0, 0.0], &[vec![2.0, 0.0], vec![0.0, 1.0]], tau, None).unwrap();
        let expected = tau.exp() / (tau.exp() + 1.0);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((1.0 - p[0] - 6.2e-7).abs() < 0.1e-7);
        assert!(matches!(predict(&[0.0, 0.0], &[vec![1.0, 0.0]], tau, None), Err(Error::DegenerateNorm(_))));
        assert!(predict(&[1.0, 0.0], &[vec![1.0, 0.0]], tau, Some(&[])).is_err());
    }

    #[test]
    fn enhanced_feature_respects_alpha_and_zero_vector() {
        let mut head = ClassHead::new(0.0, 1.0).unwrap();
        head.push_class(vec![1.0, 2.0]).unwrap();
        head.tunable[0] = vec![5.0, 5.0];
        assert_eq!(head.enhanced(0, true).unwrap(), vec![1.0, 2.0]);
        let mut head = ClassHead::new(0.5, 1.0).unwrap();
        head.push_class(vec![1.0, 2.0]).unwrap();
        assert_eq!(head.enhanced(0, true).unwrap(), vec![1.0, 2.0]);
        head.tunable[0] = vec![2.0, -2.0];
        assert_eq!(head.enhanced(0, true).unwrap(), vec![2.0, 1.0]);
        assert_eq!(head.enhanced(0, false).unwrap(), vec![1.0, 2.0]);
        assert!(ClassHead::new(-1.0, 1.0).is_err());
        assert!(ClassHead::new(0.5, 0.0).is_err());
    }

    #[test]
    fn single_description_ensemble_equals_its_encoding() {
        let mut reg = ClassRegistry::new(vec!["ClassName".into()]).unwrap();
        reg.register_dataset(1, &[vec!["LUAD".into()]]).unwrap();
        let enc = PromptEncoder::<f64>::new(EncoderDims::default(), 1);
        let emb = TokenEmbedder::new(32, 2);
        let f = ensemble_feature(&enc, &emb, &reg, 0, true).unwrap();
        assert_eq!(f, enc.encode_text(&emb, "LUAD").unwrap());
        let head = {
            let mut h = ClassHead::new(0.5, 1.0).unwrap();
            h.push_class(f.clone()).unwrap();
            h
        };
        assert_eq!(build_class_feature(&head, &enc, &emb, &reg, 0, AblationFlags::default()).unwrap(), f);
        assert!(build_class_feature(&head, &enc, &emb, &reg, 3, AblationFlags::default()).is_err());
    }

    #[test]
    fn model_without_keys_always_uses_the_first_prompts() {
        let mut config = ModelConfig::default();
        config.flags.use_key = false;
        let model = QpmilModel::<f64>::new(config, ClassRegistry::with_builtin_templates(), 3).unwrap();
        assert_eq!(model.select(&vec![1.0; 64], None).unwrap(), vec![0, 1, 2, 3, 4]);
    }
}
