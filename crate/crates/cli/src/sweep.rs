use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use anyhow::{anyhow, bail, Result};
use divdec_core::corpus::CorpusBundle;
use divdec_core::decoding::{NucleusRule, SamplingMode, Strategy};
use divdec_core::metrics::EvalReport;
use serde::{Deserialize, Serialize};

use crate::artifacts::ensure_parent;
use crate::config::ExperimentConfig;
use crate::run::{decode_config, decode_dataset, evaluate_records, Models};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepStrategy {
    Topk,
    Nucleus,
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: SweepStrategy,
    pub mode: SamplingMode,
    pub param: f64,
    pub seed: u64,
    #[serde(rename = "BLEU")]
    pub bleu: f64,
    #[serde(rename = "1-SB")]
    pub one_minus_self_bleu: f64,
    #[serde(rename = "SlotError")]
    pub slot_error: f64,
    #[serde(rename = "Dist-1")]
    pub distinct_1: f64,
    #[serde(rename = "Dist-2")]
    pub distinct_2: f64,
    #[serde(rename = "Dist-4")]
    pub distinct_4: f64,
    #[serde(rename = "Dist-Sent")]
    pub distinct_sentence: f64,
}

impl SweepRow {
    pub fn new(strategy: SweepStrategy, mode: SamplingMode, param: f64, seed: u64, r: &EvalReport) -> Self {
        SweepRow {
            strategy,
            mode,
            param,
            seed,
            bleu: r.bleu4,
            one_minus_self_bleu: r.one_minus_self_bleu,
            slot_error: r.slot_error,
            distinct_1: r.distinct_1,
            distinct_2: r.distinct_2,
            distinct_4: r.distinct_4,
            distinct_sentence: r.distinct_sentence,
        }
    }
}

pub fn strategy_for(s: SweepStrategy, mode: SamplingMode, param: f64) -> Strategy {
    match s {
        SweepStrategy::Topk => Strategy::TopK { k: param as usize, mode },
        SweepStrategy::Nucleus => Strategy::Nucleus {
            p: param,
            mode,
            rule: NucleusRule::default(),
        },
    }
}

/// Decodes the test split at one grid point and evaluates it.
pub fn evaluate_point(
    cfg: &ExperimentConfig,
    bundle: &CorpusBundle,
    models: &Models,
    s: SweepStrategy,
    mode: SamplingMode,
    param: f64,
) -> Result<EvalReport> {
    let dc = decode_config(cfg, strategy_for(s, mode, param));
    let recs = decode_dataset(bundle, &bundle.test, models, &dc)?;
    evaluate_records(&recs, &bundle.test)
}

pub fn grid(cfg: &ExperimentConfig) -> Vec<(SweepStrategy, SamplingMode, f64)> {
    let mut g = Vec::new();
    for &mode in &cfg.modes {
        g.extend(cfg.k_grid.iter().map(|&k| (SweepStrategy::Topk, mode, k as f64)));
        g.extend(cfg.p_grid.iter().map(|&p| (SweepStrategy::Nucleus, mode, p)));
    }
    g
}

/// Evaluates every grid point, spreading points over the available cores.
/// Rows come back in grid order regardless of scheduling.
pub fn run_sweep(cfg: &ExperimentConfig, bundle: &CorpusBundle, models: &Models) -> Result<Vec<SweepRow>> {
    let points = grid(cfg);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(points.len());
    let slots: Vec<Mutex<Option<Result<SweepRow>>>> = points.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(&(s, mode, param)) = points.get(i) else { break };
                let row = evaluate_point(cfg, bundle, models, s, mode, param)
                    .map(|r| SweepRow::new(s, mode, param, cfg.seed, &r));
                *slots[i].lock().unwrap() = Some(row);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every grid point is visited"))
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

// ---- diversity matching ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub p: f64,
    pub achieved: f64,
    pub target: f64,
    /// Objective evaluations spent, endpoints included.
    pub evaluations: usize,
}

/// Where bisection places the midpoint of a bracket `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Arithmetic midpoint.
    Linear,
    /// Midpoint of `-ln(1 - p)`, so halvings crowd towards `p = 1`. A confident
    /// model only diversifies in the last fraction of a percent of mass.
    Tail,
}

/// Closest approach to 1 the tail scale distinguishes.
pub const TAIL_FLOOR: f64 = 1e-9;

impl Scale {
    fn midpoint(self, a: f64, b: f64) -> f64 {
        match self {
            Scale::Linear => 0.5 * (a + b),
            Scale::Tail => {
                let gap = |p: f64| (1.0 - p).max(TAIL_FLOOR);
                1.0 - (gap(a) * gap(b)).sqrt()
            }
        }
    }
}

/// Bisection for the `p` whose diversity `f(p)` is within `tol` of `target`,
/// assuming `f` grows with `p` on `[lo, hi]`. Stops after `max_iter` halvings
/// and returns the closest point seen.
pub fn match_diversity<F>(f: F, target: f64, lo: f64, hi: f64, tol: f64, max_iter: usize) -> Result<MatchResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    match_diversity_on(Scale::Linear, f, target, lo, hi, tol, max_iter)
}

/// [`match_diversity`] with a chosen midpoint rule.
pub fn match_diversity_on<F>(
    scale: Scale,
    mut f: F,
    target: f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<MatchResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(lo < hi) {
        bail!("empty search interval [{lo}, {hi}]");
    }
    let (f_lo, f_hi) = (f(lo)?, f(hi)?);
    let mut evaluations = 2;
    let done = |p: f64, achieved: f64, evaluations: usize| MatchResult {
        p,
        achieved,
        target,
        evaluations,
    };
    if (f_lo - target).abs() <= tol {
        return Ok(done(lo, f_lo, evaluations));
    }
    if (f_hi - target).abs() <= tol {
        return Ok(done(hi, f_hi, evaluations));
    }
    if target < f_lo || target > f_hi {
        return Err(divdec_core::Error::Range {
            target,
            low: f_lo,
            high: f_hi,
        }
        .into());
    }
    let (mut a, mut b) = (lo, hi);
    let mut best = if (f_lo - target).abs() <= (f_hi - target).abs() { (lo, f_lo) } else { (hi, f_hi) };
    for _ in 0..max_iter {
        let mid = scale.midpoint(a, b);
        let v = f(mid)?;
        evaluations += 1;
        if (v - target).abs() < (best.1 - target).abs() {
            best = (mid, v);
        }
        if (v - target).abs() <= tol {
            break;
        }
        if v < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(done(best.0, best.1, evaluations))
}

/// Smallest `p` searched; the nucleus is then the argmax alone.
pub const MATCH_LOW: f64 = 0.01;

/// Evaluations keyed by the bits of `p`; valid for one mode and model set.
pub type NucleusCache = HashMap<u64, EvalReport>;

/// Nucleus `p` matching `target` 1 − Self-BLEU on the test split.
pub fn match_nucleus(
    cfg: &ExperimentConfig,
    bundle: &CorpusBundle,
    models: &Models,
    mode: SamplingMode,
    target: f64,
    cache: &mut NucleusCache,
) -> Result<(MatchResult, EvalReport)> {
    let m = match_diversity_on(
        Scale::Tail,
        |p| {
            if let Some(r) = cache.get(&p.to_bits()) {
                return Ok(r.one_minus_self_bleu);
            }
            let r = evaluate_point(cfg, bundle, models, SweepStrategy::Nucleus, mode, p)?;
            let v = r.one_minus_self_bleu;
            cache.insert(p.to_bits(), r);
            Ok(v)
        },
        target,
        MATCH_LOW,
        1.0,
        cfg.match_tolerance,
        cfg.match_iterations,
    )?;
    let report = cache
        .get(&m.p.to_bits())
        .cloned()
        .ok_or_else(|| anyhow!("matched point was never evaluated"))?;
    Ok((m, report))
}

/// A top-k point paired with the nucleus setting of equal diversity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPoint {
    pub k: usize,
    pub target: f64,
    pub topk_bleu: f64,
    /// Unset when the target lies outside what nucleus sampling reaches.
    pub p: Option<f64>,
    pub achieved: Option<f64>,
    pub nucleus_bleu: Option<f64>,
}

impl MatchedPoint {
    pub fn matched(&self, tol: f64) -> bool {
        self.achieved.is_some_and(|a| (a - self.target).abs() <= tol)
    }
}

/// Matches nucleus sampling to each top-k row with `k ≥ 2` in `mode`.
pub fn match_topk_rows(
    cfg: &ExperimentConfig,
    bundle: &CorpusBundle,
    models: &Models,
    rows: &[SweepRow],
    mode: SamplingMode,
    cache: &mut NucleusCache,
) -> Result<Vec<MatchedPoint>> {
    let mut out = Vec::new();
    for r in rows.iter().filter(|r| r.strategy == SweepStrategy::Topk && r.mode == mode && r.param >= 2.0) {
        let mut mp = MatchedPoint {
            k: r.param as usize,
            target: r.one_minus_self_bleu,
            topk_bleu: r.bleu,
            p: None,
            achieved: None,
            nucleus_bleu: None,
        };
        match match_nucleus(cfg, bundle, models, mode, r.one_minus_self_bleu, cache) {
            Ok((m, rep)) => {
                mp.p = Some(m.p);
                mp.achieved = Some(m.achieved);
                mp.nucleus_bleu = Some(rep.bleu4);
            }
            Err(e) if is_range_error(&e) => {}
            Err(e) => return Err(e),
        }
        out.push(mp);
    }
    Ok(out)
}

pub fn is_range_error(e: &anyhow::Error) -> bool {
    matches!(e.downcast_ref::<divdec_core::Error>(), Some(divdec_core::Error::Range { .. }))
}

pub fn write_matched_csv(path: &Path, points: &[MatchedPoint]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matched_csv(path: &Path) -> Result<Vec<MatchedPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
