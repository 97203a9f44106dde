//! Interfaces the decoders, expert and meta-classifier use to drive a
//! next-token model. [`Generator`] implements both; so do the table-driven
//! models in [`crate::toy`].

use crate::corpus::{DaVector, TokenId};
use crate::error::Result;
use crate::generator::{Generator, StepContext};
use crate::numkit::{argmax, log_softmax};

pub trait SequenceModel: Sync {
    type State: Clone + Send + Sync;

    fn vocab_size(&self) -> usize;

    /// State after consuming `<s>`.
    fn begin(&self, encoding: &DaVector) -> Result<Self::State>;

    fn advance(&self, state: &Self::State, token: TokenId) -> Result<Self::State>;

    /// Next-token distribution.
    fn distribution(&self, state: &Self::State) -> Vec<f64>;

    fn log_distribution(&self, state: &Self::State) -> Vec<f64> {
        self.distribution(state).iter().map(|p| p.ln()).collect()
    }

    fn greedy_next(&self, state: &Self::State) -> TokenId {
        argmax(&self.distribution(state)) as TokenId
    }

    /// `[x_{t-2}, x_{t-1}, x_t]`, start-padded.
    fn history(&self, state: &Self::State) -> [TokenId; 3];

    fn last_token(&self, state: &Self::State) -> TokenId {
        self.history(state)[2]
    }
}

/// Per-candidate feature vectors laid out as
/// `[context prefix, candidate, context suffix]`.
pub trait FeatureModel: SequenceModel {
    fn prefix_dim(&self) -> usize;
    fn candidate_dim(&self) -> usize;
    fn suffix_dim(&self) -> usize;

    fn feature_dim(&self) -> usize {
        self.prefix_dim() + self.candidate_dim() + self.suffix_dim()
    }

    fn context_prefix(&self, state: &Self::State) -> Vec<f64>;
    fn candidate_segment(&self, candidate: TokenId) -> Vec<f64>;
    fn context_suffix(&self, state: &Self::State) -> Vec<f64>;
}

impl SequenceModel for Generator {
    type State = StepContext;

    fn vocab_size(&self) -> usize {
        self.config().vocab
    }

    fn begin(&self, encoding: &DaVector) -> Result<StepContext> {
        Ok(self.start(encoding)?.next)
    }

    fn advance(&self, state: &StepContext, token: TokenId) -> Result<StepContext> {
        Generator::advance(self, state, token)
    }

    fn distribution(&self, state: &StepContext) -> Vec<f64> {
        Generator::distribution(self, state)
    }

    fn log_distribution(&self, state: &StepContext) -> Vec<f64> {
        log_softmax(&self.logits(state))
    }

    fn greedy_next(&self, state: &StepContext) -> TokenId {
        Generator::greedy_next(self, state)
    }

    fn history(&self, state: &StepContext) -> [TokenId; 3] {
        state.last
    }
}

/// `c = [h_t, tanh(W_dc d_t), E x_cand, E x_{t-2}, E x_{t-1}, E x_t]`
impl FeatureModel for Generator {
    fn prefix_dim(&self) -> usize {
        2 * self.config().hidden
    }

    fn candidate_dim(&self) -> usize {
        self.config().embed
    }

    fn suffix_dim(&self) -> usize {
        3 * self.config().embed
    }

    fn context_prefix(&self, state: &StepContext) -> Vec<f64> {
        let mut v = state.top_hidden().to_vec();
        v.extend(self.control_projection(&state.d));
        v
    }

    fn candidate_segment(&self, candidate: TokenId) -> Vec<f64> {
        self.embedding(candidate).to_vec()
    }

    fn context_suffix(&self, state: &StepContext) -> Vec<f64> {
        state
            .last
            .iter()
            .flat_map(|&t| self.embedding(t).iter().copied())
            .collect()
    }
}
