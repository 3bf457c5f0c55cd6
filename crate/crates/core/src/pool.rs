//! The queryable prototype pool: `(key, prompt)` pairs, query construction,
//! frequency-penalized Top-N matching, and matching-frequency bookkeeping.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::scalar::Scalar;

/// Pooling used to turn an instance matrix into a query vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    #[default]
    Max,
    Mean,
}

/// Coordinate-wise max (or mean) over the rows of `z`.
pub fn query_vector<T: Scalar>(z: &Matrix<T>, mode: QueryMode) -> Result<Vec<T>> {
    if z.rows() == 0 || z.cols() == 0 {
        return Err(Error::InvalidInput("query of an empty instance matrix".into()));
    }
    Ok(match mode {
        QueryMode::Mean => z.row_mean(),
        QueryMode::Max => {
            let mut out = z.row(0).to_vec();
            for r in z.row_iter().skip(1) {
                for (o, v) in out.iter_mut().zip(r) {
                    *o = o.max(*v);
                }
            }
            out
        }
    })
}

/// `1 − ⟨a,b⟩ / (‖a‖‖b‖)`, rejecting vectors with norm below 1e-12.
pub fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= T::norm_eps() || nb <= T::norm_eps() {
        return Err(Error::DegenerateNorm("cosine distance"));
    }
    Ok(T::one() - dot(a, b) / (na * nb))
}

/// Indices of the `n` smallest scores; ties go to the lower index.
pub fn select_top_n<T: Scalar>(scores: &[T], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).unwrap_or(Ordering::Equal).then(i.cmp(&j)));
    idx.truncate(n);
    idx
}

/// `M`, `N` and `L_P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    /// Number of prototype pairs `M`.
    pub size: usize,
    /// Number of matched pairs per bag `N`.
    pub top_n: usize,
    /// Rows per prompt `L_P`.
    pub prompt_len: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { size: 20, top_n: 5, prompt_len: 24 }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n == 0 || self.top_n > self.size {
            return Err(Error::InvalidInput(format!("need 1 <= N <= M, got N={} M={}", self.top_n, self.size)));
        }
        if self.prompt_len == 0 {
            return Err(Error::InvalidInput("prompt length must be positive".into()));
        }
        Ok(())
    }
}

/// Standard deviations of the normal initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolInit {
    pub key_std: f64,
    pub prompt_std: f64,
}

impl Default for PoolInit {
    fn default() -> Self {
        Self { key_std: 3.0, prompt_std: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypePair<T> {
    pub key: Vec<T>,
    pub prompt: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypePool<T> {
    config: PoolConfig,
    pairs: Vec<PrototypePair<T>>,
}

impl<T: Scalar> PrototypePool<T> {
    pub fn random(config: PoolConfig, d_f: usize, d_e: usize, init: PoolInit, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut sample = |std: f64| T::lit(std * rng.sample::<f64, _>(StandardNormal));
        let pairs = (0..config.size)
            .map(|_| {
                let key = (0..d_f).map(|_| sample(init.key_std)).collect();
                let prompt = (0..config.prompt_len * d_e).map(|_| sample(init.prompt_std)).collect();
                PrototypePair { key, prompt: Matrix::from_vec(config.prompt_len, d_e, prompt).unwrap() }
            })
            .collect();
        Ok(Self { config, pairs })
    }

    pub fn from_pairs(config: PoolConfig, pairs: Vec<PrototypePair<T>>) -> Result<Self> {
        config.validate()?;
        if pairs.len() != config.size {
            return Err(Error::Shape(format!("{} pairs for a pool of size {}", pairs.len(), config.size)));
        }
        Ok(Self { config, pairs })
    }

    pub fn config(&self) -> PoolConfig {
        self.config
    }

    pub fn pairs(&self) -> &[PrototypePair<T>] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [PrototypePair<T>] {
        &mut self.pairs
    }

    pub fn key_distances(&self, z: &[T]) -> Result<Vec<T>> {
        self.pairs.iter().map(|p| cosine_distance(z, &p.key)).collect()
    }

    /// The `N` keys minimising `q(z, k_i) · p_i`.
    pub fn match_top_n(&self, z: &[T], penalty: &[T]) -> Result<Vec<usize>> {
        if penalty.len() != self.pairs.len() {
            return Err(Error::Shape(format!("penalty of length {} for {} keys", penalty.len(), self.pairs.len())));
        }
        if penalty.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(Error::InvalidInput("penalty entries must be finite and non-negative".into()));
        }
        let scores: Vec<T> = self.key_distances(z)?.iter().zip(penalty).map(|(d, p)| *d * *p).collect();
        Ok(select_top_n(&scores, self.config.top_n))
    }
}

/// How prior frequency tables become a penalty table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyRule {
    /// `1 + strength · mean_t(F_t[i] / Σ_j F_t[j])`.
    Relative { strength: f64 },
    /// `1 + mean_t(F_t[i] / E_t)` with `E_t` the number of matching events on dataset `t`:
    /// one plus the fraction of bags that selected key `i`.
    #[default]
    MatchRate,
    /// Mean of the raw count tables; unmatched keys get penalty 0.
    RawMean,
}

/// Per-dataset matching-frequency tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchStats {
    size: usize,
    top_n: usize,
    finalized: Vec<Vec<u64>>,
    current: Vec<u64>,
    current_events: u64,
    finalized_events: Vec<u64>,
}

impl MatchStats {
    pub fn new(config: PoolConfig) -> Self {
        Self {
            size: config.size,
            top_n: config.top_n,
            finalized: Vec::new(),
            current: vec![0; config.size],
            current_events: 0,
            finalized_events: Vec::new(),
        }
    }

    /// Rebuilds statistics from finalized tables and their event counts.
    pub fn from_tables(config: PoolConfig, tables: Vec<Vec<u64>>, events: Vec<u64>) -> Result<Self> {
        if tables.len() != events.len() || tables.iter().any(|t| t.len() != config.size) {
            return Err(Error::Shape("frequency tables do not match the pool size or event counts".into()));
        }
        if let Some(t) = tables.iter().zip(&events).position(|(t, e)| t.iter().sum::<u64>() != e * config.top_n as u64) {
            return Err(Error::InvalidInput(format!("table {} does not hold N counts per event", t + 1)));
        }
        let mut stats = Self::new(config);
        stats.finalized = tables;
        stats.finalized_events = events;
        Ok(stats)
    }

    /// Counts one matching event on the dataset currently being trained.
    pub fn record_match(&mut self, indices: &[usize]) {
        for &i in indices {
            self.current[i] += 1;
        }
        self.current_events += 1;
    }

    /// Closes the table of the current dataset and starts a fresh one.
    pub fn finalize_dataset(&mut self) {
        self.finalized.push(std::mem::replace(&mut self.current, vec![0; self.size]));
        self.finalized_events.push(std::mem::take(&mut self.current_events));
    }

    pub fn current(&self) -> &[u64] {
        &self.current
    }

    pub fn current_events(&self) -> u64 {
        self.current_events
    }

    /// Finalized tables `F_1, F_2, …` in training order.
    pub fn finalized(&self) -> &[Vec<u64>] {
        &self.finalized
    }

    pub fn finalized_events(&self) -> &[u64] {
        &self.finalized_events
    }

    pub fn top_n(&self) -> usize {
        self.top_n
    }

    /// Penalty table for training on dataset `t_c` (1-based) from `F_1 … F_{t_c − 1}`.
    pub fn compute_penalty<T: Scalar>(&self, t_c: usize, rule: PenaltyRule) -> Result<Vec<T>> {
        if t_c == 0 {
            return Err(Error::InvalidInput("dataset indices are 1-based".into()));
        }
        if t_c == 1 {
            return Ok(vec![T::one(); self.size]);
        }
        let prior = self.finalized.get(..t_c - 1).ok_or(Error::MissingPenaltyTable(self.finalized.len() + 1))?;
        let mut mean = vec![0.0f64; self.size];
        for (table, events) in prior.iter().zip(&self.finalized_events) {
            let denom = match rule {
                PenaltyRule::Relative { .. } => table.iter().sum::<u64>() as f64,
                PenaltyRule::MatchRate => *events as f64,
                PenaltyRule::RawMean => 1.0,
            };
            if denom == 0.0 {
                continue;
            }
            for (m, f) in mean.iter_mut().zip(table) {
                *m += *f as f64 / denom;
            }
        }
        let count = prior.len() as f64;
        Ok(mean
            .into_iter()
            .map(|m| match rule {
                PenaltyRule::Relative { strength } => T::lit(1.0 + strength * m / count),
                PenaltyRule::MatchRate => T::lit(1.0 + m / count),
                PenaltyRule::RawMean => T::lit(m / count),
            })
            .collect())
    }

    /// Keys of a finalized table ranked by count (descending, ties to the lower index).
    pub fn most_frequent(&self, table: usize, n: usize) -> Option<Vec<usize>> {
        let counts = self.finalized.get(table)?;
        let neg: Vec<f64> = counts.iter().map(|c| -(*c as f64)).collect();
        Some(select_top_n(&neg, n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn query_vector_small_cases() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(query_vector(&z, QueryMode::Max).unwrap(), vec![1.0, 1.0]);
        assert_eq!(query_vector(&z, QueryMode::Mean).unwrap(), vec![0.5, 0.5]);
        let one = Matrix::from_rows(&[vec![0.3, -2.0]]).unwrap();
        assert_eq!(query_vector(&one, QueryMode::Max).unwrap(), vec![0.3, -2.0]);
        assert_eq!(query_vector(&one, QueryMode::Mean).unwrap(), vec![0.3, -2.0]);
        assert!(query_vector(&Matrix::<f64>::zeros(0, 2), QueryMode::Max).is_err());
    }

    #[test]
    fn cosine_distance_reference_values() {
        assert!(cosine_distance::<f64>(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((cosine_distance::<f64>(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance::<f64>(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateNorm(_))));
    }

    #[test]
    fn penalty_from_hand_formula() {
        let config = PoolConfig { size: 6, top_n: 3, prompt_len: 1 };
        let rel = PenaltyRule::Relative { strength: 1.0 };
        let mut stats = MatchStats::new(config);
        assert_eq!(stats.compute_penalty::<f64>(1, rel).unwrap(), vec![1.0; 6]);
        assert!(matches!(stats.compute_penalty::<f64>(2, rel), Err(Error::MissingPenaltyTable(1))));
        // Five events with N = 3: relative frequencies [0.4, 0.4, 0.2, 0, 0, 0].
        stats.current.copy_from_slice(&[6, 6, 3, 0, 0, 0]);
        stats.current_events = 5;
        stats.finalize_dataset();
        let p: Vec<f64> = stats.compute_penalty(2, rel).unwrap();
        let expected = [1.4, 1.4, 1.2, 1.0, 1.0, 1.0];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{p:?}");
        }
        let rate: Vec<f64> = stats.compute_penalty(2, PenaltyRule::MatchRate).unwrap();
        for (a, b) in rate.iter().zip([2.2, 2.2, 1.6, 1.0, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-12, "{rate:?}");
        }
        // A second identical table leaves the average unchanged.
        stats.current.copy_from_slice(&[6, 6, 3, 0, 0, 0]);
        stats.current_events = 5;
        stats.finalize_dataset();
        assert_eq!(stats.compute_penalty::<f64>(3, rel).unwrap(), p);
        let raw: Vec<f64> = stats.compute_penalty(3, PenaltyRule::RawMean).unwrap();
        assert_eq!(raw, vec![6.0, 6.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn record_match_counts() {
        let mut stats = MatchStats::new(PoolConfig { size: 5, top_n: 2, prompt_len: 1 });
        stats.record_match(&[1, 3]);
        assert_eq!(stats.current(), &[0, 1, 0, 1, 0]);
        for _ in 0..9 {
            stats.record_match(&[0, 4]);
        }
        assert_eq!(stats.current().iter().sum::<u64>(), 2 * 10);
        stats.finalize_dataset();
        assert_eq!(stats.most_frequent(0, 2).unwrap(), vec![0, 4]);
        assert_eq!(stats.current(), &[0; 5]);
    }

    fn pool_with_distances(distances: &[f64]) -> (PrototypePool<f64>, Vec<f64>) {
        // Keys at controlled angles from the query e_0: cos = 1 - d.
        let z = vec![1.0, 0.0];
        let pairs = distances
            .iter()
            .map(|d| {
                let c: f64 = 1.0 - d;
                PrototypePair { key: vec![c, (1.0 - c * c).sqrt()], prompt: Matrix::zeros(1, 1) }
            })
            .collect();
        let pool = PrototypePool::from_pairs(PoolConfig { size: distances.len(), top_n: 2, prompt_len: 1 }, pairs).unwrap();
        (pool, z)
    }

    #[test]
    fn match_top_n_examples() {
        let (pool, z) = pool_with_distances(&[0.3, 0.1, 0.5, 0.2]);
        assert_eq!(pool.match_top_n(&z, &[1.0; 4]).unwrap(), vec![1, 3]);
        assert_eq!(pool.match_top_n(&z, &[1.0, 4.0, 1.0, 1.0]).unwrap(), vec![3, 0]);
        let (pool, z) = pool_with_distances(&[0.4; 4]);
        assert_eq!(pool.match_top_n(&z, &[1.0; 4]).unwrap(), vec![0, 1]);
        assert!(pool.match_top_n(&z, &[1.0; 3]).is_err());
        assert!(pool.match_top_n(&z, &[1.0, -1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn invalid_pool_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = PoolConfig { size: 3, top_n: 4, prompt_len: 2 };
        assert!(PrototypePool::<f64>::random(bad, 4, 2, PoolInit::default(), &mut rng).is_err());
        let ok = PrototypePool::<f64>::random(PoolConfig::default(), 4, 2, PoolInit::default(), &mut rng).unwrap();
        assert_eq!(ok.pairs().len(), 20);
        assert_eq!(ok.pairs()[0].prompt.shape(), (24, 2));
    }
}
