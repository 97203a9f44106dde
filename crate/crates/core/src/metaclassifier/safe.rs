use serde::{Deserialize, Serialize};

use super::net::{GroupView, MetaParams};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::FeatureModel;
use crate::numkit::ranked_indices;

/// `P(safe)` must exceed this for a word to count as safe.
pub const SAFE_THRESHOLD: f64 = 0.5;

/// `c = [context prefix, candidate segment, context suffix]`; for the
/// generator that is `[h_t, tanh(W_dc d_t), E x_cand, E x_{t-2}, E x_{t-1}, E x_t]`.
pub fn build_features<M: FeatureModel>(model: &M, state: &M::State, candidate: TokenId) -> Vec<f64> {
    let mut f = model.context_prefix(state);
    f.extend(model.candidate_segment(candidate));
    f.extend(model.context_suffix(state));
    f
}

/// Safety judgments over the whole vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafeVector {
    /// Indexed by token id.
    pub b: Vec<bool>,
    /// Token ids by descending model probability (ties by id).
    pub ranked: Vec<TokenId>,
}

impl SafeVector {
    /// `b` reordered by `ranked`.
    pub fn ranked_flags(&self) -> Vec<bool> {
        self.ranked.iter().map(|&t| self.b[t as usize]).collect()
    }
}

/// `P(safe)` for each of `candidates` at `state`.
pub fn predict_candidates<M: FeatureModel>(
    model: &M,
    state: &M::State,
    candidates: &[TokenId],
    meta: &MetaParams,
) -> Result<Vec<f64>> {
    let prefix = model.context_prefix(state);
    let suffix = model.context_suffix(state);
    let segs: Vec<Vec<f64>> = candidates.iter().map(|&c| model.candidate_segment(c)).collect();
    let views: Vec<&[f64]> = segs.iter().map(Vec::as_slice).collect();
    meta.predict_group(GroupView {
        prefix: &prefix,
        segments: &views,
        suffix: &suffix,
    })
}

pub fn safe_vector<M: FeatureModel>(
    model: &M,
    state: &M::State,
    distribution: &[f64],
    meta: &MetaParams,
) -> Result<SafeVector> {
    safe_vector_at(model, state, distribution, meta, SAFE_THRESHOLD)
}

/// [`safe_vector`] with threshold `tau` in place of 0.5.
pub fn safe_vector_at<M: FeatureModel>(
    model: &M,
    state: &M::State,
    distribution: &[f64],
    meta: &MetaParams,
    tau: f64,
) -> Result<SafeVector> {
    let v = model.vocab_size();
    if distribution.len() != v {
        return Err(Error::Shape(format!(
            "distribution has {} entries, vocabulary has {v}",
            distribution.len()
        )));
    }
    let all: Vec<TokenId> = (0..v as TokenId).collect();
    let probs = predict_candidates(model, state, &all, meta)?;
    Ok(SafeVector {
        b: probs.iter().map(|&p| p > tau).collect(),
        ranked: ranked_indices(distribution).into_iter().map(|i| i as TokenId).collect(),
    })
}

/// Length of the maximal run of ranks that are safe and have probability
/// above `epsilon`.
pub fn safe_prefix_len(ranked_probs: &[f64], ranked_safe: &[bool], epsilon: f64) -> usize {
    ranked_probs
        .iter()
        .zip(ranked_safe)
        .take_while(|(&p, &s)| s && p > epsilon)
        .count()
}

/// Words MCD may sample from at one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafePrefix {
    /// The safe prefix in rank order, or just the argmax after a fallback.
    pub tokens: Vec<TokenId>,
    /// The rank-0 word was judged unsafe.
    pub fallback: bool,
}

const PREFIX_CHUNK: usize = 16;

/// The safe prefix of the probability-ranked vocabulary. Only ranks up to the
/// first unsafe (or near-zero) word are classified; `cap` optionally limits
/// the prefix to the top ranks.
pub fn safe_prefix<M: FeatureModel>(
    model: &M,
    state: &M::State,
    distribution: &[f64],
    meta: &MetaParams,
    epsilon: f64,
    cap: Option<usize>,
) -> Result<SafePrefix> {
    let ranked = ranked_indices(distribution);
    let limit = cap.unwrap_or(ranked.len()).min(ranked.len());
    let mut tokens = Vec::new();
    let mut start = 0;
    'outer: while start < limit {
        let end = (start + PREFIX_CHUNK).min(limit);
        let chunk: Vec<TokenId> = ranked[start..end]
            .iter()
            .take_while(|&&i| distribution[i] > epsilon)
            .map(|&i| i as TokenId)
            .collect();
        if chunk.is_empty() {
            break;
        }
        let probs = predict_candidates(model, state, &chunk, meta)?;
        for (&t, &p) in chunk.iter().zip(&probs) {
            if p > SAFE_THRESHOLD {
                tokens.push(t);
            } else {
                break 'outer;
            }
        }
        if chunk.len() < end - start {
            break;
        }
        start = end;
    }
    if tokens.is_empty() {
        return Ok(SafePrefix {
            tokens: vec![ranked[0] as TokenId],
            fallback: true,
        });
    }
    Ok(SafePrefix { tokens, fallback: false })
}
