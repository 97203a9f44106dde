use rand::Rng;

use super::Candidate;
use crate::corpus::{MeaningRepresentation, Vocab};
use crate::error::{Error, Result};
use crate::metrics::slot_error;

/// Survivors sampled from after sorting by normalised probability.
pub const RERANK_TOP: usize = 5;

pub fn score_slot_errors(candidates: &mut [Candidate], mr: &MeaningRepresentation, vocab: &Vocab) {
    for c in candidates {
        c.slot_error = Some(slot_error(&c.text(vocab), mr).rate());
    }
}

/// Indices of the candidates with minimal slot error, best normalised
/// log-probability first (stable on ties), cut to [`RERANK_TOP`].
pub fn rerank_survivors(candidates: &[Candidate]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Contract("cannot rerank an empty pool".into()));
    }
    let errs = candidates
        .iter()
        .map(|c| {
            c.slot_error
                .ok_or_else(|| Error::Contract("candidate has no slot error".into()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let best = errs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut idx: Vec<usize> = (0..candidates.len()).filter(|&i| errs[i] == best).collect();
    idx.sort_by(|&a, &b| {
        candidates[b]
            .normalized_log_prob()
            .total_cmp(&candidates[a].normalized_log_prob())
    });
    idx.truncate(RERANK_TOP);
    Ok(idx)
}

pub fn rerank_index<R: Rng + ?Sized>(candidates: &[Candidate], rng: &mut R) -> Result<usize> {
    let top = rerank_survivors(candidates)?;
    Ok(if top.len() == 1 {
        top[0]
    } else {
        top[rng.gen_range(0..top.len())]
    })
}

/// Lowest slot error, then uniformly among the five most probable.
pub fn rerank<R: Rng + ?Sized>(
    candidates: &[Candidate],
    mr: &MeaningRepresentation,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Candidate> {
    let mut pool = candidates.to_vec();
    score_slot_errors(&mut pool, mr, vocab);
    let i = rerank_index(&pool, rng)?;
    Ok(pool.swap_remove(i))
}
