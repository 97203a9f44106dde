use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{signal_probability, ILConfig};
use crate::corpus::{DaVector, TokenId, EOS_ID};
use crate::error::{Error, Result};
use crate::expert::{expert_safe_set, label_candidates, learned_signal, top_candidates, NgramTable, PrecisionRecord};
use crate::metaclassifier::{
    predict_candidates, safe_prefix, MetaParams, SignalSource, StepGroup, StepProvenance, SAFE_THRESHOLD,
};
use crate::model::FeatureModel;
use crate::numkit::rng::{derive_seed, rng_for};

/// Tags of the random streams the loops draw from: roll-in choices use
/// `(seed, [ROLL_IN, iteration, sentence])`, LOLS source coins
/// `(seed, [COIN, iteration, sentence, step])` and learned-signal rollouts
/// `(seed, [LEARNED, iteration, sentence, step, rank])`.
pub mod streams {
    pub const ROLL_IN: u64 = 0x524f_4c4c;
    pub const COIN: u64 = 0x434f_494e;
    pub const LEARNED: u64 = 0x4c45_4152;
}

use streams::{COIN, LEARNED, ROLL_IN};

/// A training sentence as the loops see it.
#[derive(Debug, Clone)]
pub struct ILInstance {
    /// Position in the training split; seeds and provenance use it.
    pub id: usize,
    /// Identifies the MR; expert results are memoised per key and prefix.
    pub key: String,
    pub encoding: DaVector,
    pub refs: Arc<NgramTable>,
}

/// Expert labels by MR and prefix. The decoding state is a function of both,
/// so revisiting a prefix never reruns the rollouts.
#[derive(Debug, Default)]
pub struct ExpertMemo {
    map: HashMap<String, HashMap<Vec<TokenId>, Arc<PrecisionRecord>>>,
    hits: usize,
}

impl ExpertMemo {
    pub fn get_or_compute(
        &mut self,
        key: &str,
        prefix: &[TokenId],
        compute: impl FnOnce() -> Result<PrecisionRecord>,
    ) -> Result<Arc<PrecisionRecord>> {
        if let Some(r) = self.map.get(key).and_then(|m| m.get(prefix)) {
            self.hits += 1;
            return Ok(Arc::clone(r));
        }
        let r = Arc::new(compute()?);
        self.map
            .entry(key.to_string())
            .or_default()
            .insert(prefix.to_vec(), Arc::clone(&r));
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.map.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        self.hits
    }
}

/// Candidate feature segments, computed once per token.
#[derive(Debug, Default)]
pub struct SegmentCache(HashMap<TokenId, Arc<[f64]>>);

impl SegmentCache {
    fn get<M: FeatureModel>(&mut self, model: &M, t: TokenId) -> Arc<[f64]> {
        Arc::clone(self.0.entry(t).or_insert_with(|| model.candidate_segment(t).into()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct IterationOutput {
    pub groups: Vec<StepGroup>,
    pub sentences: usize,
    /// Roll-in steps where the learned policy had no safe word.
    pub fallbacks: usize,
    pub expert_steps: usize,
    pub learned_steps: usize,
    /// The rolled-in sentence of every instance, by instance id.
    pub traces: Vec<(usize, Vec<TokenId>)>,
}

/// Where a LOLS step at `(iteration, sentence, step)` takes its signal from.
pub fn lols_source(seed: u64, iteration: usize, sentence: usize, step: usize, p: f64) -> SignalSource {
    let u: f64 = rng_for(seed, &[COIN, iteration as u64, sentence as u64, step as u64]).gen();
    if u < p {
        SignalSource::Expert
    } else {
        SignalSource::Learned
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RollIn {
    Expert,
    Union,
    Policy,
}

struct Ctx<'a, M> {
    model: &'a M,
    meta: Option<&'a MetaParams>,
    cfg: &'a ILConfig,
    iteration: usize,
    roll_in: RollIn,
    /// Expert-signal probability per step.
    p: f64,
}

fn rollout<M: FeatureModel>(
    ctx: &Ctx<'_, M>,
    inst: &ILInstance,
    memo: &mut ExpertMemo,
    segments: &mut SegmentCache,
    out: &mut IterationOutput,
) -> Result<()> {
    let (model, cfg) = (ctx.model, ctx.cfg);
    let mut rng = rng_for(cfg.seed, &[ROLL_IN, ctx.iteration as u64, inst.id as u64]);
    let mut state = model.begin(&inst.encoding)?;
    let mut prefix: Vec<TokenId> = Vec::new();
    for step in 0..cfg.max_len {
        let source = if ctx.p >= 1.0 {
            SignalSource::Expert
        } else {
            lols_source(cfg.seed, ctx.iteration, inst.id, step, ctx.p)
        };
        let (candidates, labels) = match source {
            SignalSource::Expert => {
                out.expert_steps += 1;
                let rec = memo.get_or_compute(&inst.key, &prefix, || {
                    expert_safe_set(model, &state, &inst.refs, &cfg.expert)
                })?;
                (rec.candidates.clone(), rec.labels.clone())
            }
            SignalSource::Learned => {
                out.learned_steps += 1;
                let meta = ctx.meta.expect("learned signal needs a policy");
                let dist = model.distribution(&state);
                let cands = top_candidates(&dist, cfg.expert.n, cfg.expert.epsilon)?;
                let mut prec = Vec::with_capacity(cands.len());
                for (r, &c) in cands.iter().enumerate() {
                    let seed = derive_seed(
                        cfg.seed,
                        &[LEARNED, ctx.iteration as u64, inst.id as u64, step as u64, r as u64],
                    );
                    let s = learned_signal(model, meta, &state, c, &inst.refs, cfg.m, &cfg.expert, seed)?;
                    prec.push(s.prec);
                }
                let labels = label_candidates(&prec)?;
                (cands, labels)
            }
        };
        let next = match ctx.roll_in {
            RollIn::Expert => pick(&candidates, &labels, &mut rng),
            RollIn::Union => {
                let meta = ctx.meta.expect("union roll-in needs a policy");
                let p_safe = predict_candidates(model, &state, &candidates, meta)?;
                let union: Vec<bool> = labels.iter().zip(&p_safe).map(|(&l, &p)| l || p > SAFE_THRESHOLD).collect();
                pick(&candidates, &union, &mut rng)
            }
            RollIn::Policy => {
                let meta = ctx.meta.expect("policy roll-in needs a policy");
                let dist = model.distribution(&state);
                let sp = safe_prefix(model, &state, &dist, meta, cfg.expert.epsilon, None)?;
                out.fallbacks += sp.fallback as usize;
                *sp.tokens.choose(&mut rng).expect("prefix is never empty")
            }
        };
        out.groups.push(StepGroup {
            provenance: StepProvenance {
                iteration: ctx.iteration,
                sentence: inst.id,
                step,
                source,
            },
            prefix: model.context_prefix(&state),
            suffix: model.context_suffix(&state),
            segments: candidates.iter().map(|&t| segments.get(model, t)).collect(),
            candidates,
            labels,
        });
        prefix.push(next);
        if next == EOS_ID {
            break;
        }
        if step + 1 < cfg.max_len {
            state = model.advance(&state, next)?;
        }
    }
    out.sentences += 1;
    out.traces.push((inst.id, prefix));
    Ok(())
}

/// Uniform over the flagged candidates (rank order); rank 0 when none are.
fn pick<R: Rng + ?Sized>(candidates: &[TokenId], flags: &[bool], rng: &mut R) -> TokenId {
    let set: Vec<TokenId> = candidates
        .iter()
        .zip(flags)
        .filter(|(_, &f)| f)
        .map(|(&t, _)| t)
        .collect();
    set.choose(rng).copied().unwrap_or(candidates[0])
}

fn run<M: FeatureModel>(
    ctx: Ctx<'_, M>,
    slice: &[&ILInstance],
    memo: &mut ExpertMemo,
    segments: &mut SegmentCache,
) -> Result<IterationOutput> {
    let mut out = IterationOutput::default();
    for inst in slice {
        rollout(&ctx, inst, memo, segments, &mut out).map_err(|e| Error::Instance {
            instance: inst.id,
            source: Box::new(e),
        })?;
    }
    Ok(out)
}

/// Labels from the expert; the next word is drawn uniformly from the
/// expert-safe candidates.
pub fn exact_imitation_iteration<M: FeatureModel>(
    model: &M,
    slice: &[&ILInstance],
    cfg: &ILConfig,
    iteration: usize,
    memo: &mut ExpertMemo,
    segments: &mut SegmentCache,
) -> Result<IterationOutput> {
    let ctx = Ctx {
        model,
        meta: None,
        cfg,
        iteration,
        roll_in: RollIn::Expert,
        p: 1.0,
    };
    run(ctx, slice, memo, segments)
}

/// Labels from the expert; the next word is drawn uniformly from candidates
/// safe under either the expert or the current policy.
pub fn dagger_iteration<M: FeatureModel>(
    model: &M,
    meta: &MetaParams,
    slice: &[&ILInstance],
    cfg: &ILConfig,
    iteration: usize,
    memo: &mut ExpertMemo,
    segments: &mut SegmentCache,
) -> Result<IterationOutput> {
    let ctx = Ctx {
        model,
        meta: Some(meta),
        cfg,
        iteration,
        roll_in: RollIn::Union,
        p: 1.0,
    };
    run(ctx, slice, memo, segments)
}

/// Roll-in under the policy alone; each step's labels come from the expert
/// with probability `(1 - beta)^iteration`, otherwise from rollouts of the
/// policy itself.
pub fn lols_iteration<M: FeatureModel>(
    model: &M,
    meta: &MetaParams,
    slice: &[&ILInstance],
    cfg: &ILConfig,
    iteration: usize,
    memo: &mut ExpertMemo,
    segments: &mut SegmentCache,
) -> Result<IterationOutput> {
    let ctx = Ctx {
        model,
        meta: Some(meta),
        cfg,
        iteration,
        roll_in: RollIn::Policy,
        p: signal_probability(cfg.beta, iteration),
    };
    run(ctx, slice, memo, segments)
}
