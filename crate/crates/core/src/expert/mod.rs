//! The rollout expert: forces each top-ranked candidate, continues greedily,
//! and accepts candidates whose window scores at least as well against the
//! references as every higher-ranked one. Also the learned-policy signal used
//! by LOLS.

mod precision;

pub use precision::{label_candidates, modified_precision, NgramTable};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{MeaningRepresentation, ReferenceIndex, TokenId, EOS_ID};
use crate::error::{Error, Result};
use crate::metaclassifier::{safe_prefix, MetaParams};
use crate::model::{FeatureModel, SequenceModel};
use crate::numkit::ranked_indices;
use crate::numkit::rng::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Candidates examined per step.
    pub n: usize,
    /// Greedy tokens generated after the forced candidate.
    pub continuation: usize,
    pub ref_cap: usize,
    /// Probability a candidate needs to be considered at all.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            n: 25,
            continuation: 4,
            ref_cap: 500,
            epsilon: 1e-8,
            seed: 7,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("expert needs n >= 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-candidate precisions and labels at one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecord {
    /// Top candidates by descending probability (ties by id).
    pub candidates: Vec<TokenId>,
    pub probs: Vec<f64>,
    pub prec: Vec<f64>,
    pub labels: Vec<bool>,
}

impl PrecisionRecord {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn safe_tokens(&self) -> Vec<TokenId> {
        self.candidates
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l)
            .map(|(&t, _)| t)
            .collect()
    }

    /// Rank 0 is accepted and accepted precisions never decrease.
    pub fn check_invariants(&self) -> Result<()> {
        if self.labels.first() != Some(&true) {
            return Err(Error::Contract("rank-0 candidate must be accepted".into()));
        }
        let accepted: Vec<f64> = self
            .prec
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l)
            .map(|(&p, _)| p)
            .collect();
        if accepted.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Contract("accepted precisions decrease".into()));
        }
        Ok(())
    }
}

/// `[x_t, forced, greedy continuation...]`, cut after `</s>`.
pub fn rollout_window<M: SequenceModel>(
    model: &M,
    state: &M::State,
    forced: TokenId,
    continuation: usize,
) -> Result<Vec<TokenId>> {
    let mut window = vec![model.last_token(state), forced];
    if forced == EOS_ID {
        return Ok(window);
    }
    let mut s = model.advance(state, forced)?;
    for k in 0..continuation {
        let next = model.greedy_next(&s);
        window.push(next);
        if next == EOS_ID {
            break;
        }
        if k + 1 < continuation {
            s = model.advance(&s, next)?;
        }
    }
    Ok(window)
}

/// The references the expert scores against for `mr`.
pub fn reference_table(index: &ReferenceIndex, mr: &MeaningRepresentation, cfg: &ExpertConfig) -> Result<NgramTable> {
    let set = index.references_for(mr, cfg.ref_cap, cfg.seed);
    NgramTable::new(&set.refs)
}

/// The top-`n` candidates above `epsilon`, in rank order.
pub fn top_candidates(distribution: &[f64], n: usize, epsilon: f64) -> Result<Vec<TokenId>> {
    let cands: Vec<TokenId> = ranked_indices(distribution)
        .into_iter()
        .take(n)
        .take_while(|&i| distribution[i] > epsilon)
        .map(|i| i as TokenId)
        .collect();
    if cands.is_empty() {
        return Err(Error::Degenerate { threshold: epsilon });
    }
    Ok(cands)
}

pub fn expert_safe_set<M: SequenceModel>(
    model: &M,
    state: &M::State,
    refs: &NgramTable,
    cfg: &ExpertConfig,
) -> Result<PrecisionRecord> {
    let dist = model.distribution(state);
    let candidates = top_candidates(&dist, cfg.n, cfg.epsilon)?;
    let prec = candidates
        .iter()
        .map(|&c| Ok(refs.precision(&rollout_window(model, state, c, cfg.continuation)?)))
        .collect::<Result<Vec<f64>>>()?;
    let labels = label_candidates(&prec)?;
    Ok(PrecisionRecord {
        probs: candidates.iter().map(|&c| dist[c as usize]).collect(),
        candidates,
        prec,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnedSignal {
    pub prec: f64,
    /// Steps where the policy's safe prefix was empty.
    pub fallbacks: usize,
}

/// Mean window precision over `m` continuations sampled uniformly from the
/// policy's safe prefix after forcing `candidate`.
#[allow(clippy::too_many_arguments)]
pub fn learned_signal<M: FeatureModel>(
    model: &M,
    meta: &MetaParams,
    state: &M::State,
    candidate: TokenId,
    refs: &NgramTable,
    m: usize,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<LearnedSignal> {
    if m == 0 {
        return Err(Error::Config("learned signal needs at least one rollout".into()));
    }
    let mut total = 0.0;
    let mut fallbacks = 0;
    for j in 0..m {
        let mut rng = rng_for(seed, &[j as u64]);
        let mut window = vec![model.last_token(state), candidate];
        if candidate != EOS_ID {
            let mut s = model.advance(state, candidate)?;
            for k in 0..cfg.continuation {
                let dist = model.distribution(&s);
                let prefix = safe_prefix(model, &s, &dist, meta, cfg.epsilon, None)?;
                fallbacks += prefix.fallback as usize;
                let next = *prefix.tokens.choose(&mut rng).expect("prefix is never empty");
                window.push(next);
                if next == EOS_ID {
                    break;
                }
                if k + 1 < cfg.continuation {
                    s = model.advance(&s, next)?;
                }
            }
        }
        total += refs.precision(&window);
    }
    Ok(LearnedSignal {
        prec: total / m as f64,
        fallbacks,
    })
}

/// One line per labelled candidate: `sentence,step,rank,token,prec,label`.
pub fn write_precision_dump<'a, I>(path: &Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = (usize, usize, &'a PrecisionRecord)>,
{
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let write = || -> std::io::Result<()> {
        writeln!(w, "sentence,step,rank,token,prec,label")?;
        for (sentence, step, rec) in records {
            for (rank, ((t, p), l)) in rec.candidates.iter().zip(&rec.prec).zip(&rec.labels).enumerate() {
                writeln!(w, "{sentence},{step},{rank},{t},{p},{}", *l as u8)?;
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
