//! Classification, matching and class-similarity losses, their weighted
//! total, and the reverse-mode gradient of that total for one bag.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::InstanceBag;
use crate::error::{Error, Result};
use crate::linalg::{axpy, cosine, cosine_grad_acc, norm, softmax, Matrix};
use crate::model::{aggregate_backward, aggregate_traced, QpmilModel};
use crate::pool::cosine_distance;
use crate::scalar::Scalar;

/// Floor applied to `p(y|x)` before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Component losses of one step and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub classification: T,
    pub matching: T,
    pub similarity: T,
    pub total: T,
    pub lambda: T,
    pub beta: T,
}

/// Balance factors `λ` (matching) and `β` (class similarity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.5, beta: 0.5 }
    }
}

/// `−log p(y|x)`, with `p` floored at 1e-12.
pub fn classification_loss<T: Scalar>(probabilities: &[T], true_class: usize) -> Result<T> {
    let p = *probabilities.get(true_class).ok_or(Error::UnknownClass(true_class))?;
    Ok(-p.max(T::lit(PROB_FLOOR)).ln())
}

/// Mean cosine distance between the query and each matched key.
pub fn matching_loss<T: Scalar>(query: &[T], matched_keys: &[&[T]]) -> Result<T> {
    if matched_keys.is_empty() {
        return Err(Error::InvalidInput("matching loss needs at least one key".into()));
    }
    let total = matched_keys.iter().map(|k| cosine_distance(query, k)).sum::<Result<T>>()?;
    Ok(total / T::from_usize(matched_keys.len()).unwrap())
}

/// Mean pairwise cosine similarity over all class pairs, plus one. Zero for fewer than two classes.
pub fn class_similarity_loss<T: Scalar>(class_features: &[Vec<T>]) -> Result<T> {
    let c = class_features.len();
    if c < 2 {
        log::warn!("class similarity loss is undefined for {c} class(es); using 0");
        return Ok(T::zero());
    }
    if class_features.iter().any(|f| norm(f) <= T::norm_eps()) {
        return Err(Error::DegenerateNorm("class feature"));
    }
    let mut sum = T::zero();
    for i in 0..c {
        for j in i + 1..c {
            sum += cosine(&class_features[i], &class_features[j]);
        }
    }
    Ok(T::lit(2.0) * sum / T::from_usize(c * (c - 1)).unwrap() + T::one())
}

/// `L_T = L_C + λ·L_M + β·L_S`.
pub fn total_loss<T: Scalar>(classification: T, matching: T, similarity: T, weights: LossWeights) -> LossBreakdown<T> {
    let (lambda, beta) = (T::lit(weights.lambda), T::lit(weights.beta));
    LossBreakdown { classification, matching, similarity, total: classification + lambda * matching + beta * similarity, lambda, beta }
}

/// Sparse parameter gradients for one bag or a reduced mini-batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients<T> {
    pub keys: BTreeMap<usize, Vec<T>>,
    pub prompts: BTreeMap<usize, Matrix<T>>,
    pub tunable: BTreeMap<usize, Vec<T>>,
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    axpy(T::one(), src, dst);
}

impl<T: Scalar> Gradients<T> {
    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (i, g) in &other.keys {
            self.keys.entry(*i).and_modify(|d| add_into(d, g)).or_insert_with(|| g.clone());
        }
        for (i, g) in &other.prompts {
            self.prompts.entry(*i).and_modify(|d| add_into(d.as_mut_slice(), g.as_slice())).or_insert_with(|| g.clone());
        }
        for (i, g) in &other.tunable {
            self.tunable.entry(*i).and_modify(|d| add_into(d, g)).or_insert_with(|| g.clone());
        }
    }

    pub fn scale(&mut self, factor: T) {
        let all = self
            .keys
            .values_mut()
            .chain(self.tunable.values_mut())
            .map(|v| v.as_mut_slice())
            .chain(self.prompts.values_mut().map(|m| m.as_mut_slice()));
        for slice in all {
            slice.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.keys.values().chain(self.tunable.values()).all(|v| v.iter().all(|x| x.is_finite()))
            && self.prompts.values().all(Matrix::is_finite)
    }
}

/// Which classes enter the losses and which tunable vectors may receive gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepScope {
    /// Classes spanned by the classification softmax and the similarity loss (ascending ids).
    pub loss_classes: Vec<usize>,
    /// Per class id: whether its tunable vector trains.
    pub trainable: Vec<bool>,
}

impl StepScope {
    /// Every registered class is in the loss and trainable.
    pub fn all(num_classes: usize) -> Self {
        Self { loss_classes: (0..num_classes).collect(), trainable: vec![true; num_classes] }
    }
}

/// Forward pass plus reverse-mode gradient of `L_T` for one bag with a fixed matched set.
///
/// The query vector and the Top-N choice are constants. Prompt gradients flow
/// through the frozen encoder into the aggregation; key gradients come from the
/// matching loss only; tunable-vector gradients come from the classification and
/// similarity losses of trainable classes.
pub fn gradients<T: Scalar>(
    model: &QpmilModel<T>,
    bag: &InstanceBag<T>,
    matched: &[usize],
    scope: &StepScope,
    weights: LossWeights,
) -> Result<(LossBreakdown<T>, Gradients<T>)> {
    let flags = model.flags();
    let target = scope.loss_classes.iter().position(|c| *c == bag.label).ok_or(Error::UnknownClass(bag.label))?;
    let query = model.query(&bag.features)?;

    let traces = matched
        .iter()
        .map(|i| model.encoder.trace_prompt(&model.pool.pairs()[*i].prompt))
        .collect::<Result<Vec<_>>>()?;
    let proto = Matrix::from_rows(&traces.iter().map(|t| t.output.clone()).collect::<Vec<_>>())?;
    let agg = aggregate_traced(&bag.features, &proto)?;
    let bag_feature = &agg.bag_feature;
    if norm(bag_feature) <= T::norm_eps() {
        return Err(Error::DegenerateNorm("bag feature"));
    }

    let features: Vec<Vec<T>> =
        scope.loss_classes.iter().map(|c| model.head.enhanced(*c, flags.use_tunable_vector)).collect::<Result<_>>()?;
    let tau = model.head.tau;
    let logits: Vec<T> = features.iter().map(|f| tau * cosine(bag_feature, f)).collect();
    let probs = softmax(&logits);
    let l_c = classification_loss(&probs, target)?;

    let use_matching = flags.use_key;
    let l_m = if use_matching {
        let keys: Vec<&[T]> = matched.iter().map(|i| model.pool.pairs()[*i].key.as_slice()).collect();
        matching_loss(&query, &keys)?
    } else {
        T::zero()
    };
    let l_s = class_similarity_loss(&features)?;
    let effective = LossWeights {
        lambda: if use_matching { weights.lambda } else { 0.0 },
        beta: if flags.use_class_similarity_loss { weights.beta } else { 0.0 },
    };
    let breakdown = total_loss(l_c, l_m, l_s, effective);
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss of bag {}", bag.bag_id)));
    }

    // dL_C/dlogit = p − onehot, zero once the probability floor is active.
    let floored = probs[target] < T::lit(PROB_FLOOR);
    let d_logits: Vec<T> = probs
        .iter()
        .enumerate()
        .map(|(c, p)| if floored { T::zero() } else if c == target { *p - T::one() } else { *p })
        .collect();

    let d = bag_feature.len();
    let mut d_bag = vec![T::zero(); d];
    let mut d_features = vec![vec![T::zero(); d]; features.len()];
    for (c, f) in features.iter().enumerate() {
        cosine_grad_acc(d_logits[c] * tau, bag_feature, f, &mut d_bag);
        cosine_grad_acc(d_logits[c] * tau, f, bag_feature, &mut d_features[c]);
    }
    let c_count = features.len();
    if effective.beta != 0.0 && c_count >= 2 {
        let coef = breakdown.beta * T::lit(2.0) / T::from_usize(c_count * (c_count - 1)).unwrap();
        for i in 0..c_count {
            for j in 0..c_count {
                if i != j {
                    cosine_grad_acc(coef, &features[i], &features[j], &mut d_features[i]);
                }
            }
        }
    }

    let mut grads = Gradients::default();
    if flags.use_tunable_vector {
        for (pos, class) in scope.loss_classes.iter().enumerate() {
            if scope.trainable.get(*class).copied().unwrap_or(false) {
                grads.tunable.insert(*class, d_features[pos].iter().map(|g| *g * model.head.alpha).collect());
            }
        }
    }

    let d_proto = aggregate_backward(&bag.features, &agg, &d_bag);
    for (row, (idx, trace)) in matched.iter().zip(&traces).enumerate() {
        let rows = model.pool.pairs()[*idx].prompt.rows();
        grads.prompts.insert(*idx, model.encoder.prompt_backward(rows, trace, d_proto.row(row)));
    }

    if use_matching && effective.lambda != 0.0 {
        let coef = -breakdown.lambda / T::from_usize(matched.len()).unwrap();
        for idx in matched {
            let key = &model.pool.pairs()[*idx].key;
            let mut g = vec![T::zero(); key.len()];
            cosine_grad_acc(coef, key, &query, &mut g);
            grads.keys.insert(*idx, g);
        }
    }

    if !grads.is_finite() {
        return Err(Error::NonFinite(format!("gradient of bag {}", bag.bag_id)));
    }
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification_loss_reference_values() {
        assert_eq!(classification_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        let l = classification_loss(&[0.25; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((classification_loss(&[1.0, 0.0], 1).unwrap() - 1e12f64.ln()).abs() < 1e-9);
        assert!(classification_loss(&[1.0], 1).is_err());
    }

    #[test]
    fn matching_loss_reference_values() {
        let z = [1.0f64, 1.0, 0.0];
        assert!(matching_loss(&z, &[&[2.0, 2.0, 0.0], &[0.5, 0.5, 0.0]]).unwrap().abs() < 1e-15);
        assert!((matching_loss(&z, &[&[0.0, 0.0, 1.0], &[1.0, -1.0, 0.0]]).unwrap() - 1.0).abs() < 1e-15);
        assert!((matching_loss(&z, &[&[3.0, 3.0, 0.0], &[0.0, 0.0, 2.0]]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matching_loss::<f64>(&z, &[]).is_err());
    }

    #[test]
    fn class_similarity_loss_reference_values() {
        assert!((class_similarity_loss::<f64>(&[vec![1.0, 0.0], vec![2.0, 0.0]]).unwrap() - 2.0).abs() < 1e-15);
        assert!((class_similarity_loss::<f64>(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap() - 1.0).abs() < 1e-15);
        assert!(class_similarity_loss::<f64>(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap().abs() < 1e-15);
        assert_eq!(class_similarity_loss(&[vec![1.0, 0.0]]).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let b = total_loss(1.0f64, 0.4, 1.2, LossWeights::default());
        assert!((b.total - 1.8).abs() < 1e-15);
        assert_eq!(total_loss(1.3, 0.4, 1.2, LossWeights { lambda: 0.0, beta: 0.0 }).total, 1.3);
        assert_eq!(total_loss(0.0, 0.0, 0.0, LossWeights::default()).total, 0.0);
    }

    #[test]
    fn gradients_accumulate_and_scale() {
        let mut a = Gradients::<f64>::default();
        a.keys.insert(1, vec![1.0, 2.0]);
        let mut b = Gradients::default();
        b.keys.insert(1, vec![1.0, 0.0]);
        b.tunable.insert(0, vec![4.0]);
        a.accumulate(&b);
        a.scale(0.5);
        assert_eq!(a.keys[&1], vec![1.0, 1.0]);
        assert_eq!(a.tunable[&0], vec![2.0]);
    }
}
