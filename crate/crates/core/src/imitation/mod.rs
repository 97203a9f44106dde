//! Imitation-learning loops that train the meta-classifier: exact imitation
//! of the expert, DAgger-style roll-ins that mix in the learned policy, and
//! the LOLS adaptation whose training signal shifts from the expert to the
//! learned policy over iterations.

mod rollout;

pub use rollout::{
    dagger_iteration, exact_imitation_iteration, lols_iteration, lols_source, ExpertMemo, ILInstance,
    IterationOutput, SegmentCache,
};
pub use rollout::streams;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::{DaSchema, Dataset, ReferenceIndex};
use crate::error::{Error, Result};
use crate::expert::{reference_table, ExpertConfig};
use crate::metaclassifier::{train_meta, FeatureLayout, MetaParams, MetaTrainConfig, MetaTrainReport, StepGroup};
use crate::model::FeatureModel;
use crate::numkit::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Exact,
    Dagger,
    Lols,
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Framework::Exact),
            "dagger" => Ok(Framework::Dagger),
            "lols" => Ok(Framework::Lols),
            _ => Err(Error::Config(format!("unknown framework `{s}`"))),
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Framework::Exact => "exact",
            Framework::Dagger => "dagger",
            Framework::Lols => "lols",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ILConfig {
    pub framework: Framework,
    /// Iterations after the initial full exact-imitation pass.
    pub iterations: usize,
    pub beta: f64,
    /// Fraction of training sentences visited per later iteration.
    pub subsample: f64,
    /// Rollouts averaged by the learned-policy signal.
    pub m: usize,
    pub expert: ExpertConfig,
    pub meta_train: MetaTrainConfig,
    pub meta_hidden: usize,
    /// Re-initialise the meta-classifier before every retraining instead of
    /// continuing from the current parameters.
    pub reinit: bool,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ILConfig {
    fn default() -> Self {
        ILConfig {
            framework: Framework::Exact,
            iterations: 3,
            beta: 0.1,
            subsample: 0.1,
            m: 5,
            expert: ExpertConfig::default(),
            meta_train: MetaTrainConfig::default(),
            meta_hidden: 128,
            reinit: false,
            max_len: 40,
            seed: 7,
        }
    }
}

impl ILConfig {
    pub fn validate(&self) -> Result<()> {
        self.expert.validate()?;
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta = {} outside (0, 1)", self.beta)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config(format!("subsample = {} outside (0, 1]", self.subsample)));
        }
        if self.m == 0 || self.max_len == 0 || self.meta_hidden == 0 {
            return Err(Error::Config("m, max length and meta hidden size must be positive".into()));
        }
        if self.framework != Framework::Exact && self.iterations == 0 {
            return Err(Error::Config(format!(
                "{} needs at least one iteration after exact-imitation initialisation",
                self.framework
            )));
        }
        Ok(())
    }
}

/// Probability that a LOLS step takes its signal from the expert:
/// `(1 - beta)^i`.
pub fn signal_probability(beta: f64, iteration: usize) -> f64 {
    (1.0 - beta).powi(iteration as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub framework: Framework,
    /// Expert-signal probability; 1 except for LOLS iterations.
    pub p: f64,
    pub sentences: usize,
    pub samples: usize,
    pub positive_fraction: f64,
    pub fallbacks: usize,
    /// Mean number of candidates labelled safe per step.
    pub mean_safe_set: f64,
    pub expert_steps: usize,
    pub learned_steps: usize,
    pub aggregate_samples: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

impl IterationReport {
    pub const CSV_HEADER: &'static str = "iteration,framework,p,sentences,samples,positive_fraction,fallbacks,mean_safe_set,expert_steps,learned_steps,aggregate_samples,final_loss,train_accuracy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.framework,
            self.p,
            self.sentences,
            self.samples,
            self.positive_fraction,
            self.fallbacks,
            self.mean_safe_set,
            self.expert_steps,
            self.learned_steps,
            self.aggregate_samples,
            self.final_loss,
            self.train_accuracy
        )
    }
}

pub struct ILOutcome {
    pub meta: MetaParams,
    pub reports: Vec<IterationReport>,
    /// Every step group collected, in collection order.
    pub groups: Vec<StepGroup>,
}

/// One [`ILInstance`] per training sentence, with the reference n-gram table
/// shared between sentences of the same MR.
pub fn prepare_instances(
    train: &Dataset,
    schema: &DaSchema,
    index: &ReferenceIndex,
    cfg: &ExpertConfig,
) -> Result<Vec<ILInstance>> {
    let mut tables = HashMap::new();
    let mut out = Vec::with_capacity(train.len());
    for (id, inst) in train.instances.iter().enumerate() {
        let key = inst.mr.to_string();
        let refs = match tables.get(&key) {
            Some(t) => Arc::clone(t),
            None => {
                let t = Arc::new(reference_table(index, &inst.mr, cfg)?);
                tables.insert(key.clone(), Arc::clone(&t));
                t
            }
        };
        out.push(ILInstance {
            id,
            key,
            encoding: schema.encode(&inst.mr)?,
            refs,
        });
    }
    Ok(out)
}

/// Sentences visited by iteration `i >= 1`: a fresh seeded sample without
/// replacement, in id order.
pub fn subsample_ids(n: usize, fraction: f64, seed: u64, iteration: usize) -> Vec<usize> {
    let k = ((n as f64 * fraction).ceil() as usize).clamp(1.min(n), n);
    let mut ids = sample(&mut rng_for(seed, &[0x5355_4253, iteration as u64]), n, k).into_vec();
    ids.sort_unstable();
    ids
}

fn report(
    iteration: usize,
    framework: Framework,
    p: f64,
    out: &IterationOutput,
    new: &[StepGroup],
    aggregate: usize,
    train: &MetaTrainReport,
) -> IterationReport {
    let samples: usize = new.iter().map(StepGroup::len).sum();
    let positives = new.iter().flat_map(|g| &g.labels).filter(|&&l| l).count();
    let steps = new.len().max(1);
    IterationReport {
        iteration,
        framework,
        p,
        sentences: out.sentences,
        samples,
        positive_fraction: positives as f64 / samples.max(1) as f64,
        fallbacks: out.fallbacks,
        mean_safe_set: positives as f64 / steps as f64,
        expert_steps: out.expert_steps,
        learned_steps: out.learned_steps,
        aggregate_samples: aggregate,
        final_loss: train.epoch_losses.last().copied().unwrap_or(f64::NAN),
        train_accuracy: train.accuracy,
    }
}

/// Exact imitation over every instance, then `cfg.iterations` rounds of the
/// configured framework on fresh subsamples; after each round the
/// meta-classifier is retrained on everything collected so far.
/// `on_iteration` sees each report and the groups it collected as soon as the
/// round finishes.
pub fn run_il<M, F>(
    cfg: &ILConfig,
    model: &M,
    instances: &[ILInstance],
    mut on_iteration: F,
) -> Result<ILOutcome>
where
    M: FeatureModel,
    F: FnMut(&IterationReport, &[StepGroup]) -> Result<()>,
{
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::InvalidInput("imitation learning needs training instances".into()));
    }
    let layout = FeatureLayout::of(model);
    let fresh = |i: usize| MetaParams::new(layout, cfg.meta_hidden, crate::numkit::rng::derive_seed(cfg.seed, &[i as u64]));
    let mut meta = fresh(0)?;
    let mut memo = ExpertMemo::default();
    let mut segments = SegmentCache::default();
    let mut groups: Vec<StepGroup> = Vec::new();
    let mut reports = Vec::with_capacity(cfg.iterations + 1);
    for i in 0..=cfg.iterations {
        let slice: Vec<&ILInstance> = if i == 0 {
            instances.iter().collect()
        } else {
            subsample_ids(instances.len(), cfg.subsample, cfg.seed, i)
                .into_iter()
                .map(|k| &instances[k])
                .collect()
        };
        let (framework, p) = match (i, cfg.framework) {
            (0, _) | (_, Framework::Exact) => (Framework::Exact, 1.0),
            (_, Framework::Dagger) => (Framework::Dagger, 1.0),
            (_, Framework::Lols) => (Framework::Lols, signal_probability(cfg.beta, i)),
        };
        let out = match framework {
            Framework::Exact => exact_imitation_iteration(model, &slice, cfg, i, &mut memo, &mut segments)?,
            Framework::Dagger => dagger_iteration(model, &meta, &slice, cfg, i, &mut memo, &mut segments)?,
            Framework::Lols => lols_iteration(model, &meta, &slice, cfg, i, &mut memo, &mut segments)?,
        };
        let first_new = groups.len();
        let mut out = out;
        groups.append(&mut out.groups);
        if cfg.reinit && i > 0 {
            meta = fresh(i)?;
        }
        let train_cfg = MetaTrainConfig {
            seed: crate::numkit::rng::derive_seed(cfg.meta_train.seed, &[i as u64]),
            ..cfg.meta_train.clone()
        };
        let train = train_meta(&groups, &mut meta, &train_cfg)?;
        let aggregate = groups.iter().map(StepGroup::len).sum();
        let rep = report(i, framework, p, &out, &groups[first_new..], aggregate, &train);
        on_iteration(&rep, &groups[first_new..])?;
        reports.push(rep);
    }
    Ok(ILOutcome { meta, reports, groups })
}
