use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Candidate, NucleusRule, SamplingMode};
use crate::corpus::{DaVector, TokenId, EOS_ID};
use crate::error::Result;
use crate::metaclassifier::{safe_prefix, MetaParams};
use crate::model::{FeatureModel, SequenceModel};
use crate::numkit::ranked_indices;

/// The `k` most probable tokens with non-zero probability, in rank order.
pub fn topk_set(distribution: &[f64], k: usize) -> Vec<TokenId> {
    ranked_indices(distribution)
        .into_iter()
        .take(k.max(1))
        .take_while(|&i| distribution[i] > 0.0)
        .map(|i| i as TokenId)
        .collect()
}

/// The nucleus in rank order; never empty for a proper distribution.
pub fn nucleus_set(distribution: &[f64], p: f64, rule: NucleusRule) -> Vec<TokenId> {
    let ranked: Vec<usize> = ranked_indices(distribution)
        .into_iter()
        .take_while(|&i| distribution[i] > 0.0)
        .collect();
    let mut out: Vec<TokenId> = Vec::new();
    let mut mass = 0.0;
    for i in ranked {
        if p >= 1.0 {
            out.push(i as TokenId);
            continue;
        }
        match rule {
            NucleusRule::Reach => {
                out.push(i as TokenId);
                mass += distribution[i];
                if mass >= p {
                    break;
                }
            }
            NucleusRule::Within => {
                if !out.is_empty() && mass + distribution[i] > p {
                    break;
                }
                out.push(i as TokenId);
                mass += distribution[i];
            }
        }
    }
    out
}

/// Draws from `set` uniformly or in proportion to `distribution`.
pub fn draw<R: Rng + ?Sized>(set: &[TokenId], distribution: &[f64], mode: SamplingMode, rng: &mut R) -> TokenId {
    match (mode, set.len()) {
        (_, 1) => set[0],
        (SamplingMode::Uniform, n) => set[rng.gen_range(0..n)],
        (SamplingMode::Probabilistic, _) => {
            let w = WeightedIndex::new(set.iter().map(|&t| distribution[t as usize]))
                .expect("sampling set has positive mass");
            set[w.sample(rng)]
        }
    }
}

fn sample_with<M, R, F>(model: &M, encoding: &DaVector, max_len: usize, rng: &mut R, mut choose: F) -> Result<Candidate>
where
    M: SequenceModel,
    R: Rng + ?Sized,
    F: FnMut(&M::State, &[f64], &mut R) -> Result<TokenId>,
{
    let mut state = model.begin(encoding)?;
    let mut out = Candidate::empty();
    while out.len() < max_len {
        let dist = model.distribution(&state);
        let t = choose(&state, &dist, rng)?;
        out.push(t, model.log_distribution(&state)[t as usize]);
        if t == EOS_ID || out.len() == max_len {
            break;
        }
        state = model.advance(&state, t)?;
    }
    Ok(out)
}

pub fn topk_sample<M: SequenceModel, R: Rng + ?Sized>(
    model: &M,
    encoding: &DaVector,
    k: usize,
    mode: SamplingMode,
    max_len: usize,
    rng: &mut R,
) -> Result<Candidate> {
    sample_with(model, encoding, max_len, rng, |_, dist, rng| {
        Ok(draw(&topk_set(dist, k), dist, mode, rng))
    })
}

pub fn nucleus_sample<M: SequenceModel, R: Rng + ?Sized>(
    model: &M,
    encoding: &DaVector,
    p: f64,
    mode: SamplingMode,
    rule: NucleusRule,
    max_len: usize,
    rng: &mut R,
) -> Result<Candidate> {
    sample_with(model, encoding, max_len, rng, |_, dist, rng| {
        Ok(draw(&nucleus_set(dist, p, rule), dist, mode, rng))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McdOptions {
    pub epsilon: f64,
    /// Only judge the top `cap` ranks.
    pub cap: Option<usize>,
    /// Always take the least probable safe word instead of sampling.
    pub edge_case: bool,
}

impl Default for McdOptions {
    fn default() -> Self {
        McdOptions {
            epsilon: 1e-8,
            cap: None,
            edge_case: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct McdStats {
    pub steps: usize,
    pub fallbacks: usize,
    /// Safe-prefix size at every step (1 after a fallback).
    pub prefix_sizes: Vec<usize>,
}

/// Samples uniformly from the safe prefix at every step; when the top word is
/// judged unsafe the argmax is taken and counted as a fallback.
pub fn mcd_sample<M: FeatureModel, R: Rng + ?Sized>(
    model: &M,
    meta: &MetaParams,
    encoding: &DaVector,
    opts: &McdOptions,
    max_len: usize,
    rng: &mut R,
) -> Result<(Candidate, McdStats)> {
    let mut stats = McdStats::default();
    let c = sample_with(model, encoding, max_len, rng, |state, dist, rng| {
        let prefix = safe_prefix(model, state, dist, meta, opts.epsilon, opts.cap)?;
        stats.steps += 1;
        stats.fallbacks += prefix.fallback as usize;
        stats.prefix_sizes.push(prefix.tokens.len());
        Ok(if opts.edge_case {
            *prefix.tokens.last().expect("prefix is never empty")
        } else {
            draw(&prefix.tokens, dist, SamplingMode::Uniform, rng)
        })
    })?;
    Ok((c, stats))
}
