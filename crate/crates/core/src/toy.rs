//! Small table-driven models whose next-token distribution is an explicit
//! function of the prefix. Used to check decoders and the expert against
//! exhaustive enumeration.

use std::fmt;
use std::sync::Arc;

use crate::corpus::{DaVector, TokenId, BOS_ID};
use crate::error::{Error, Result};
use crate::model::{FeatureModel, SequenceModel};

type TableFn = dyn Fn(&[TokenId]) -> Vec<f64> + Send + Sync;

/// A model over `vocab` tokens whose distribution is `table(prefix)`, where
/// the prefix starts with `<s>` and ends with the last consumed token.
#[derive(Clone)]
pub struct TableModel {
    vocab: usize,
    max_position: usize,
    table: Arc<TableFn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TableState {
    pub prefix: Vec<TokenId>,
}

impl fmt::Debug for TableModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TableModel").field("vocab", &self.vocab).finish()
    }
}

impl TableModel {
    pub fn new<F>(vocab: usize, table: F) -> Self
    where
        F: Fn(&[TokenId]) -> Vec<f64> + Send + Sync + 'static,
    {
        TableModel {
            vocab,
            max_position: 8,
            table: Arc::new(table),
        }
    }

    /// Every token, at every step, equally likely.
    pub fn uniform(vocab: usize) -> Self {
        Self::new(vocab, move |_| vec![1.0 / vocab as f64; vocab])
    }

    /// Puts probability 1 on `successor[last token]`.
    pub fn chain(successor: Vec<TokenId>) -> Self {
        let vocab = successor.len();
        Self::new(vocab, move |prefix| {
            let mut p = vec![0.0; vocab];
            p[successor[*prefix.last().unwrap() as usize] as usize] = 1.0;
            p
        })
    }

    /// Number of one-hot position slots in the feature prefix.
    pub fn with_max_position(mut self, max_position: usize) -> Self {
        self.max_position = max_position.max(1);
        self
    }
}

impl SequenceModel for TableModel {
    type State = TableState;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn begin(&self, _encoding: &DaVector) -> Result<TableState> {
        Ok(TableState { prefix: vec![BOS_ID] })
    }

    fn advance(&self, state: &TableState, token: TokenId) -> Result<TableState> {
        if token as usize >= self.vocab {
            return Err(Error::InvalidInput(format!("token id {token} outside vocabulary of {}", self.vocab)));
        }
        let mut prefix = state.prefix.clone();
        prefix.push(token);
        Ok(TableState { prefix })
    }

    fn distribution(&self, state: &TableState) -> Vec<f64> {
        let p = (self.table)(&state.prefix);
        assert_eq!(p.len(), self.vocab, "table returned a distribution of the wrong length");
        p
    }

    fn history(&self, state: &TableState) -> [TokenId; 3] {
        let mut out = [BOS_ID; 3];
        for (slot, &t) in out.iter_mut().rev().zip(state.prefix.iter().rev()) {
            *slot = t;
        }
        out
    }
}

/// One-hot features: position, candidate, and the last three tokens.
impl FeatureModel for TableModel {
    fn prefix_dim(&self) -> usize {
        self.max_position
    }

    fn candidate_dim(&self) -> usize {
        self.vocab
    }

    fn suffix_dim(&self) -> usize {
        3 * self.vocab
    }

    fn context_prefix(&self, state: &TableState) -> Vec<f64> {
        let mut v = vec![0.0; self.max_position];
        v[(state.prefix.len() - 1).min(self.max_position - 1)] = 1.0;
        v
    }

    fn candidate_segment(&self, candidate: TokenId) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab];
        v[candidate as usize] = 1.0;
        v
    }

    fn context_suffix(&self, state: &TableState) -> Vec<f64> {
        let mut v = vec![0.0; 3 * self.vocab];
        for (k, t) in self.history(state).iter().enumerate() {
            v[k * self.vocab + *t as usize] = 1.0;
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_is_start_padded() {
        let m = TableModel::uniform(4);
        let s = m.begin(&DaVector(vec![])).unwrap();
        assert_eq!(m.history(&s), [BOS_ID; 3]);
        let s = m.advance(&m.advance(&s, 2).unwrap(), 3).unwrap();
        assert_eq!(m.history(&s), [0, 2, 3]);
    }

    #[test]
    fn chain_is_deterministic() {
        let m = TableModel::chain(vec![2, 1, 3, 1]);
        let s = m.begin(&DaVector(vec![])).unwrap();
        assert_eq!(m.greedy_next(&s), 2);
        assert!(m.advance(&s, 9).is_err());
    }
}
