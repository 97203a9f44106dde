use std::collections::HashMap;

use crate::corpus::{RefSeq, TokenId};
use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

type Gram = (u8, [TokenId; MAX_ORDER]);

fn gram(window: &[TokenId]) -> Gram {
    let mut key = [TokenId::MAX; MAX_ORDER];
    key[..window.len()].copy_from_slice(window);
    (window.len() as u8, key)
}

/// Maximum count of every 1..4-gram over a reference set, so that clipped
/// counts for many windows cost one lookup per n-gram.
#[derive(Debug, Clone, Default)]
pub struct NgramTable {
    max_counts: HashMap<Gram, u32>,
    refs: usize,
}

impl NgramTable {
    pub fn new(refs: &[RefSeq]) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::Contract("modified precision needs at least one reference".into()));
        }
        let mut max_counts: HashMap<Gram, u32> = HashMap::new();
        let mut local: HashMap<Gram, u32> = HashMap::new();
        for r in refs {
            local.clear();
            for n in 1..=MAX_ORDER {
                for w in r.windows(n) {
                    *local.entry(gram(w)).or_default() += 1;
                }
            }
            for (&g, &c) in &local {
                let e = max_counts.entry(g).or_default();
                *e = (*e).max(c);
            }
        }
        Ok(NgramTable {
            max_counts,
            refs: refs.len(),
        })
    }

    pub fn num_refs(&self) -> usize {
        self.refs
    }

    /// Clipped matches and total n-grams of order `n` in `window`.
    pub fn clipped(&self, window: &[TokenId], n: usize) -> (u32, u32) {
        if window.len() < n {
            return (0, 0);
        }
        let mut counts: HashMap<Gram, u32> = HashMap::new();
        for w in window.windows(n) {
            *counts.entry(gram(w)).or_default() += 1;
        }
        let matched = counts
            .iter()
            .map(|(g, &c)| c.min(self.max_counts.get(g).copied().unwrap_or(0)))
            .sum();
        (matched, (window.len() + 1 - n) as u32)
    }

    /// Geometric mean of the modified 1..4-gram precisions of `window`
    /// (no brevity penalty). Orders longer than the window are skipped; any
    /// order without a match gives 0.
    pub fn precision(&self, window: &[TokenId]) -> f64 {
        let mut log_sum = 0.0;
        let mut levels = 0;
        for n in 1..=MAX_ORDER.min(window.len()) {
            let (m, total) = self.clipped(window, n);
            if m == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / total as f64).ln();
            levels += 1;
        }
        if levels == 0 {
            return 0.0;
        }
        (log_sum / levels as f64).exp()
    }
}

pub fn modified_precision(window: &[TokenId], refs: &[RefSeq]) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::InvalidInput("window must hold at least one token".into()));
    }
    Ok(NgramTable::new(refs)?.precision(window))
}

/// A candidate is accepted when its precision is at least the maximum over
/// all higher-ranked candidates, accepted or not.
pub fn label_candidates(prec: &[f64]) -> Result<Vec<bool>> {
    if let Some(bad) = prec.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("precision {bad} outside [0, 1]")));
    }
    let mut best = f64::NEG_INFINITY;
    Ok(prec
        .iter()
        .map(|&p| {
            let ok = p >= best;
            best = best.max(p);
            ok
        })
        .collect())
}
