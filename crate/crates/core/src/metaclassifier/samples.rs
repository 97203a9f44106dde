use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::net::{GroupView, MetaParams};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::numkit::rng::rng_for;
use crate::numkit::sgd_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignalSource {
    Expert,
    Learned,
}

impl SignalSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SignalSource::Expert => "expert",
            SignalSource::Learned => "learned",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepProvenance {
    pub iteration: usize,
    pub sentence: usize,
    pub step: usize,
    pub source: SignalSource,
}

/// One labelled candidate with its full feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaSample {
    pub feature: Vec<f64>,
    pub label: bool,
    pub provenance: StepProvenance,
    pub rank: usize,
    pub token: TokenId,
}

/// All labelled candidates of one decoding step. The context segments are
/// stored once; candidate segments are shared per token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGroup {
    pub provenance: StepProvenance,
    pub prefix: Vec<f64>,
    pub suffix: Vec<f64>,
    pub candidates: Vec<TokenId>,
    pub segments: Vec<Arc<[f64]>>,
    pub labels: Vec<bool>,
}

impl StepGroup {
    /// A group holding a single flat feature (for [`FeatureLayout::flat`]).
    ///
    /// [`FeatureLayout::flat`]: super::FeatureLayout::flat
    pub fn single(feature: Vec<f64>, label: bool, provenance: StepProvenance) -> Self {
        StepGroup {
            provenance,
            prefix: Vec::new(),
            suffix: Vec::new(),
            candidates: vec![0],
            segments: vec![feature.into()],
            labels: vec![label],
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn feature(&self, rank: usize) -> Vec<f64> {
        let mut f = self.prefix.clone();
        f.extend_from_slice(&self.segments[rank]);
        f.extend_from_slice(&self.suffix);
        f
    }

    pub fn samples(&self) -> impl Iterator<Item = MetaSample> + '_ {
        (0..self.len()).map(move |rank| MetaSample {
            feature: self.feature(rank),
            label: self.labels[rank],
            provenance: self.provenance,
            rank,
            token: self.candidates[rank],
        })
    }

    pub(crate) fn with_view<T>(&self, f: impl FnOnce(GroupView<'_>) -> T) -> T {
        let segs: Vec<&[f64]> = self.segments.iter().map(|s| &s[..]).collect();
        f(GroupView {
            prefix: &self.prefix,
            segments: &segs,
            suffix: &self.suffix,
        })
    }
}

/// Appends one line per labelled candidate:
/// `iteration,sentence,step,rank,token,source,label`.
pub fn append_sample_log(path: &Path, groups: &[StepGroup]) -> Result<()> {
    let new = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        if new {
            writeln!(w, "iteration,sentence,step,rank,token,source,label")?;
        }
        for g in groups {
            let p = g.provenance;
            for (rank, (tok, label)) in g.candidates.iter().zip(&g.labels).enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    p.iteration,
                    p.sentence,
                    p.step,
                    rank,
                    tok,
                    p.source.as_str(),
                    *label as u8
                )?;
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Visit groups in a seeded random order each epoch.
    pub shuffle: bool,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            seed: 7,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainReport {
    /// Mean per-sample cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
    pub samples: usize,
    pub positive_fraction: f64,
    /// Training accuracy at the 0.5 threshold after the last epoch.
    pub accuracy: f64,
    /// Set when every sample carries the same label.
    pub one_class: bool,
}

/// Gradient descent on the two-class cross-entropy. Each step group is one
/// update with the gradient averaged over its candidates; summing instead
/// scales the step by the group size and diverges at this learning rate.
pub fn train_meta(groups: &[StepGroup], params: &mut MetaParams, cfg: &MetaTrainConfig) -> Result<MetaTrainReport> {
    let samples: usize = groups.iter().map(StepGroup::len).sum();
    if samples == 0 {
        return Err(Error::InvalidInput("meta-classifier training needs at least one sample".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let positives = groups.iter().flat_map(|g| &g.labels).filter(|&&l| l).count();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    params.store_mut().zero_grads();
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng_for(cfg.seed, &[0x6d74, epoch as u64]));
        }
        let mut total = 0.0;
        for &gi in &order {
            let g = &groups[gi];
            if g.is_empty() {
                continue;
            }
            total += g.with_view(|v| params.accumulate_group_gradient(v, &g.labels))?;
            sgd_step(params.store_mut(), cfg.learning_rate / g.len() as f64)?;
        }
        epoch_losses.push(total / samples as f64);
    }
    let mut correct = 0usize;
    for g in groups {
        let probs = g.with_view(|v| params.predict_group(v))?;
        correct += probs
            .iter()
            .zip(&g.labels)
            .filter(|(p, &l)| (**p > super::SAFE_THRESHOLD) == l)
            .count();
    }
    Ok(MetaTrainReport {
        epoch_losses,
        samples,
        positive_fraction: positives as f64 / samples as f64,
        accuracy: correct as f64 / samples as f64,
        one_class: positives == 0 || positives == samples,
    })
}
