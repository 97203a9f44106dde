//! Decoding strategies (greedy, beam, top-k, nucleus, MMI-antiLM and
//! meta-classifier safe sampling), the pool reranker, and statistics over
//! greedy decoding distributions.

mod rerank;
mod sample;
mod search;
mod stats;

pub use rerank::{rerank, rerank_index, rerank_survivors, score_slot_errors, RERANK_TOP};
pub use sample::{draw, mcd_sample, nucleus_sample, nucleus_set, topk_sample, topk_set, McdOptions, McdStats};
pub use search::{beam_decode, greedy_decode, mmi_antilm_decode};
pub use stats::{distribution_stats, greedy_step_profiles, DistributionStats, STAT_RANKS};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{DaVector, MeaningRepresentation, TokenId, Vocab, EOS_ID};
use crate::error::{Error, Result};
use crate::metaclassifier::MetaParams;
use crate::model::{FeatureModel, SequenceModel};
use crate::numkit::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Uniform,
    Probabilistic,
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SamplingMode::Uniform),
            "probabilistic" => Ok(SamplingMode::Probabilistic),
            _ => Err(Error::Config(format!("unknown sampling mode `{s}`"))),
        }
    }
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::Uniform => "uniform",
            SamplingMode::Probabilistic => "probabilistic",
        })
    }
}

/// How the nucleus is cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NucleusRule {
    /// Smallest top set whose mass reaches `p`.
    #[default]
    Reach,
    /// Largest top set whose mass does not exceed `p` (at least the argmax).
    Within,
}

impl FromStr for NucleusRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach" => Ok(NucleusRule::Reach),
            "within" => Ok(NucleusRule::Within),
            _ => Err(Error::Config(format!("unknown nucleus rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam { width: usize },
    TopK { k: usize, mode: SamplingMode },
    Nucleus { p: f64, mode: SamplingMode, rule: NucleusRule },
    Mmi { lambda: f64, g: usize, width: usize },
    Mcd { edge_case: bool, cap: Option<usize> },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Beam { .. } => "beam",
            Strategy::TopK { .. } => "topk",
            Strategy::Nucleus { .. } => "nucleus",
            Strategy::Mmi { .. } => "mmi",
            Strategy::Mcd { .. } => "mcd",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::Beam { width } | Strategy::Mmi { width, .. } if width == 0 => {
                Err(Error::Config("beam width must be at least 1".into()))
            }
            Strategy::Mmi { lambda, .. } if !(lambda >= 0.0) => Err(Error::Config("lambda must be >= 0".into())),
            Strategy::TopK { k: 0, .. } => Err(Error::Config("k must be at least 1".into())),
            Strategy::Nucleus { p, .. } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Config(format!("nucleus p = {p} outside (0, 1]")))
            }
            Strategy::Mcd { cap: Some(0), .. } => Err(Error::Config("safe-set cap must be at least 1".into())),
            _ => Ok(()),
        }
    }

    pub fn is_sampler(&self) -> bool {
        matches!(self, Strategy::TopK { .. } | Strategy::Nucleus { .. } | Strategy::Mcd { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_len: usize,
    /// Outputs generated per input before reranking.
    pub pool_size: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        DecodeConfig {
            strategy,
            max_len: 40,
            pool_size: 10,
            epsilon: 1e-8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        if self.max_len == 0 || self.pool_size == 0 {
            return Err(Error::Config("max length and pool size must be at least 1".into()));
        }
        Ok(())
    }
}

/// A decoded sentence. `tokens` excludes `<s>` and ends with `</s>` unless
/// the length cap was hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<TokenId>,
    /// Sum of the generator's per-token log-probabilities.
    pub log_prob: f64,
    pub token_log_probs: Vec<f64>,
    /// What the search ranked by; equals `log_prob` except under MMI.
    pub score: f64,
    pub slot_error: Option<f64>,
}

impl Candidate {
    pub(crate) fn empty() -> Self {
        Candidate {
            tokens: Vec::new(),
            log_prob: 0.0,
            token_log_probs: Vec::new(),
            score: 0.0,
            slot_error: None,
        }
    }

    pub(crate) fn push(&mut self, token: TokenId, log_prob: f64) {
        self.tokens.push(token);
        self.token_log_probs.push(log_prob);
        self.log_prob += log_prob;
        self.score += log_prob;
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS_ID)
    }

    /// The tokens without the closing `</s>`.
    pub fn words(&self) -> &[TokenId] {
        if self.finished() {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    /// Mean per-token log-probability.
    pub fn normalized_log_prob(&self) -> f64 {
        if self.tokens.is_empty() {
            return 0.0;
        }
        self.log_prob / self.tokens.len() as f64
    }

    pub fn text(&self, vocab: &Vocab) -> Vec<String> {
        vocab.decode(self.words())
    }
}

/// The candidates generated for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub candidates: Vec<Candidate>,
    /// Steps where MCD found no safe word and took the argmax.
    pub fallbacks: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub pool: Pool,
    pub chosen: usize,
}

impl Decoded {
    pub fn output(&self) -> &Candidate {
        &self.pool.candidates[self.chosen]
    }
}

const RERANK_STREAM: u64 = u64::MAX;

/// Everything a strategy may need: the generator, and optionally the
/// language model (MMI) and the meta-classifier (MCD).
pub struct Decoder<'a, M, L = M> {
    pub generator: &'a M,
    pub lm: Option<&'a L>,
    pub meta: Option<&'a MetaParams>,
    pub cfg: DecodeConfig,
}

impl<'a, M: FeatureModel> Decoder<'a, M, M> {
    pub fn new(generator: &'a M, cfg: DecodeConfig) -> Self {
        Decoder {
            generator,
            lm: None,
            meta: None,
            cfg,
        }
    }
}

impl<'a, M: FeatureModel, L: SequenceModel> Decoder<'a, M, L> {
    pub fn with_lm<L2: SequenceModel>(self, lm: &'a L2) -> Decoder<'a, M, L2> {
        Decoder {
            generator: self.generator,
            lm: Some(lm),
            meta: self.meta,
            cfg: self.cfg,
        }
    }

    pub fn with_meta(mut self, meta: &'a MetaParams) -> Self {
        self.meta = Some(meta);
        self
    }

    /// Generates the candidate pool for one input. Sampler draws use the
    /// stream `(seed, input_id, candidate index)`.
    pub fn pool(&self, encoding: &DaVector, input_id: u64) -> Result<Pool> {
        self.cfg.validate()?;
        let (g, cfg) = (self.generator, &self.cfg);
        let n = cfg.pool_size;
        let mut pool = Pool {
            candidates: Vec::with_capacity(n),
            fallbacks: 0,
            steps: 0,
        };
        match cfg.strategy {
            Strategy::Greedy => {
                let c = greedy_decode(g, encoding, cfg.max_len)?;
                pool.candidates = vec![c; n];
            }
            Strategy::Beam { width } => {
                pool.candidates = beam_decode(g, encoding, width.max(n), cfg.max_len)?;
                pool.candidates.truncate(n);
            }
            Strategy::Mmi { lambda, g: horizon, width } => {
                let lm = self
                    .lm
                    .ok_or_else(|| Error::Config("MMI-antiLM decoding needs a language model".into()))?;
                pool.candidates = mmi_antilm_decode(g, lm, lambda, horizon, encoding, width.max(n), cfg.max_len)?;
                pool.candidates.truncate(n);
            }
            Strategy::TopK { .. } | Strategy::Nucleus { .. } | Strategy::Mcd { .. } => {
                for i in 0..n {
                    let mut rng = rng_for(cfg.seed, &[input_id, i as u64]);
                    let c = match cfg.strategy {
                        Strategy::TopK { k, mode } => topk_sample(g, encoding, k, mode, cfg.max_len, &mut rng)?,
                        Strategy::Nucleus { p, mode, rule } => {
                            nucleus_sample(g, encoding, p, mode, rule, cfg.max_len, &mut rng)?
                        }
                        Strategy::Mcd { edge_case, cap } => {
                            let meta = self
                                .meta
                                .ok_or_else(|| Error::Config("MCD decoding needs a meta-classifier".into()))?;
                            let opts = McdOptions {
                                epsilon: cfg.epsilon,
                                cap,
                                edge_case,
                            };
                            let (c, stats) = mcd_sample(g, meta, encoding, &opts, cfg.max_len, &mut rng)?;
                            pool.fallbacks += stats.fallbacks;
                            pool.steps += stats.steps;
                            c
                        }
                        _ => unreachable!(),
                    };
                    pool.candidates.push(c);
                }
            }
        }
        if pool.steps == 0 {
            pool.steps = pool.candidates.iter().map(Candidate::len).sum();
        }
        Ok(pool)
    }

    /// Pool generation followed by reranking.
    pub fn decode(
        &self,
        encoding: &DaVector,
        mr: &MeaningRepresentation,
        vocab: &Vocab,
        input_id: u64,
    ) -> Result<Decoded> {
        let mut pool = self.pool(encoding, input_id)?;
        score_slot_errors(&mut pool.candidates, mr, vocab);
        let mut rng = rng_for(self.cfg.seed, &[input_id, RERANK_STREAM]);
        let chosen = rerank_index(&pool.candidates, &mut rng)?;
        Ok(Decoded { pool, chosen })
    }
}
