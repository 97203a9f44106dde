use std::cmp::Ordering;

use super::Candidate;
use crate::corpus::{DaVector, EOS_ID};
use crate::error::Result;
use crate::model::SequenceModel;

/// Argmax at every step, lowest id on ties.
pub fn greedy_decode<M: SequenceModel>(model: &M, encoding: &DaVector, max_len: usize) -> Result<Candidate> {
    let mut state = model.begin(encoding)?;
    let mut out = Candidate::empty();
    while out.len() < max_len {
        let t = model.greedy_next(&state);
        out.push(t, model.log_distribution(&state)[t as usize]);
        if t == EOS_ID || out.len() == max_len {
            break;
        }
        state = model.advance(&state, t)?;
    }
    Ok(out)
}

struct Hyp<S, T> {
    state: S,
    lm_state: Option<T>,
    cand: Candidate,
}

/// Beam search over total log-probability. Returns up to `width` finished
/// beams, best first, ties broken by token sequence.
pub fn beam_decode<M: SequenceModel>(
    model: &M,
    encoding: &DaVector,
    width: usize,
    max_len: usize,
) -> Result<Vec<Candidate>> {
    beam::<M, M>(model, None, encoding, width, max_len)
}

/// Beam search where the first `g` words score `log P(w) - lambda log P_lm(w)`
/// and later words `log P(w)`; beams are ranked by the accumulated modified
/// score.
pub fn mmi_antilm_decode<M: SequenceModel, L: SequenceModel>(
    model: &M,
    lm: &L,
    lambda: f64,
    g: usize,
    encoding: &DaVector,
    width: usize,
    max_len: usize,
) -> Result<Vec<Candidate>> {
    beam(model, Some((lm, lambda, g)), encoding, width, max_len)
}

fn by_score_then_tokens(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

fn beam<M: SequenceModel, L: SequenceModel>(
    model: &M,
    lm: Option<(&L, f64, usize)>,
    encoding: &DaVector,
    width: usize,
    max_len: usize,
) -> Result<Vec<Candidate>> {
    let width = width.max(1);
    let lm_state = match lm {
        Some((l, _, _)) => Some(l.begin(&DaVector(Vec::new()))?),
        None => None,
    };
    let mut live = vec![Hyp {
        state: model.begin(encoding)?,
        lm_state,
        cand: Candidate::empty(),
    }];
    let mut finished: Vec<Candidate> = Vec::new();
    let mut position = 0;
    while !live.is_empty() {
        position += 1;
        let penalised = lm.filter(|&(_, lambda, g)| position <= g && lambda != 0.0);
        // (score, parent, token, log p)
        let mut expansions: Vec<(f64, usize, u32, f64)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let lp = model.log_distribution(&h.state);
            let lm_lp = match (penalised, &h.lm_state) {
                (Some((l, _, _)), Some(s)) => Some(l.log_distribution(s)),
                _ => None,
            };
            for (w, &p) in lp.iter().enumerate() {
                if p == f64::NEG_INFINITY {
                    continue;
                }
                let mut step = p;
                if let (Some((_, lambda, _)), Some(q)) = (penalised, &lm_lp) {
                    step -= lambda * q[w];
                }
                expansions.push((h.cand.score + step, i, w as u32, p));
            }
        }
        expansions.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| {
                let sa = live[a.1].cand.tokens.iter().chain(std::iter::once(&a.2));
                let sb = live[b.1].cand.tokens.iter().chain(std::iter::once(&b.2));
                sa.cmp(sb)
            })
        });
        expansions.truncate(width);
        let mut next = Vec::with_capacity(expansions.len());
        for (score, parent, w, p) in expansions {
            let h = &live[parent];
            let mut cand = h.cand.clone();
            cand.push(w, p);
            cand.score = score;
            if w == EOS_ID || cand.len() >= max_len {
                finished.push(cand);
                continue;
            }
            let state = model.advance(&h.state, w)?;
            let lm_state = match (lm, &h.lm_state) {
                (Some((l, _, g)), Some(s)) if position < g => Some(l.advance(s, w)?),
                _ => None,
            };
            next.push(Hyp { state, lm_state, cand });
        }
        live = next;
        // Without the anti-LM bonus scores only fall, so once `width`
        // finished beams beat every live one the result is settled.
        let monotone = lm.map_or(true, |(_, lambda, g)| position >= g || lambda == 0.0);
        if monotone && finished.len() >= width {
            finished.sort_by(by_score_then_tokens);
            let kth = finished[width - 1].score;
            if live.iter().all(|h| h.cand.score < kth) {
                break;
            }
        }
    }
    finished.sort_by(by_score_then_tokens);
    finished.truncate(width);
    Ok(finished)
}
