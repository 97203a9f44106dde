use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use divdec_core::corpus::{CorpusBundle, Dataset, Grammar, ReferenceIndex};
use divdec_core::decoding::{distribution_stats, DecodeConfig, Decoder, DistributionStats, Strategy};
use divdec_core::generator::{train_generator, train_lm, Generator, GeneratorConfig, TrainLog};
use divdec_core::imitation::{prepare_instances, run_il, Framework, ILConfig, ILOutcome, IterationReport};
use divdec_core::metaclassifier::MetaParams;
use divdec_core::metrics::{evaluate, EvalReport};
use divdec_core::numkit::{Checkpoint, TrainConfig};

use crate::artifacts::{ensure_parent, DecodeRecord, PoolEntry};
use crate::config::ExperimentConfig;

pub fn load_grammar(path: Option<&Path>) -> Result<divdec_core::corpus::CompiledGrammar> {
    let g = match path {
        Some(p) => Grammar::load(p)?,
        None => Grammar::default_grammar(),
    };
    Ok(g.compile()?)
}

pub fn gen_data(grammar: Option<&Path>, seed: u64, sizes: (usize, usize, usize), out: &Path) -> Result<CorpusBundle> {
    let g = load_grammar(grammar)?;
    let bundle = CorpusBundle::generate(&g, seed, sizes)?;
    bundle.save(out)?;
    Ok(bundle)
}

pub fn train_config(cfg: &ExperimentConfig, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.learning_rate,
        clip: cfg.clip,
        epochs,
        patience: cfg.patience,
        seed,
    }
}

fn save_log(path: &Path, log: &TrainLog) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(log)? + "\n")?;
    Ok(())
}

pub fn train_gen(bundle: &CorpusBundle, tc: &TrainConfig, ckpt: &Path, log: &Path) -> Result<Generator> {
    let mc = GeneratorConfig::desk(bundle.vocab.len(), bundle.schema.len());
    let (g, l) = train_generator(&bundle.train, &bundle.val, &bundle.vocab, &bundle.schema, mc, tc)?;
    ensure_parent(ckpt)?;
    g.to_checkpoint().save(ckpt)?;
    save_log(log, &l)?;
    Ok(g)
}

pub fn train_language_model(bundle: &CorpusBundle, tc: &TrainConfig, ckpt: &Path, log: &Path) -> Result<Generator> {
    let mc = GeneratorConfig::desk(bundle.vocab.len(), 0);
    let (g, l) = train_lm(&bundle.train, &bundle.val, &bundle.vocab, mc, tc)?;
    ensure_parent(ckpt)?;
    g.to_checkpoint().save(ckpt)?;
    save_log(log, &l)?;
    Ok(g)
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Generator::from_checkpoint(&ck)?)
}

pub fn load_meta(path: &Path) -> Result<MetaParams> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(MetaParams::from_checkpoint(&ck)?)
}

pub fn il_config(cfg: &ExperimentConfig, framework: Framework) -> ILConfig {
    let mut il = ILConfig {
        framework,
        iterations: cfg.il_iterations,
        beta: cfg.beta,
        subsample: cfg.subsample,
        m: cfg.rollout_m,
        meta_hidden: cfg.meta_hidden,
        max_len: cfg.max_len,
        seed: cfg.seed,
        ..ILConfig::default()
    };
    il.expert.n = cfg.expert_n;
    il.expert.seed = cfg.seed;
    il.meta_train.epochs = cfg.meta_epochs;
    il.meta_train.learning_rate = cfg.meta_learning_rate;
    il.meta_train.seed = cfg.seed;
    il
}

/// Runs imitation learning, appending one CSV row per iteration to `log`.
pub fn train_mcd(bundle: &CorpusBundle, generator: &Generator, il: &ILConfig, ckpt: &Path, log: &Path) -> Result<ILOutcome> {
    let index = ReferenceIndex::build(&bundle.train, &bundle.vocab);
    let instances = prepare_instances(&bundle.train, &bundle.schema, &index, &il.expert)?;
    ensure_parent(log)?;
    let mut rows = format!("{}\n", IterationReport::CSV_HEADER);
    fs::write(log, &rows)?;
    let outcome = run_il(il, generator, &instances, |r: &IterationReport, _| {
        rows.push_str(&r.csv_row());
        rows.push('\n');
        fs::write(log, &rows).map_err(|e| divdec_core::Error::InvalidInput(format!("{}: {e}", log.display())))
    })?;
    ensure_parent(ckpt)?;
    outcome.meta.to_checkpoint().save(ckpt)?;
    Ok(outcome)
}

/// Models a decode may need; `lm` only for MMI, `meta` only for MCD.
pub struct Models<'a> {
    pub generator: &'a Generator,
    pub lm: Option<&'a Generator>,
    pub meta: Option<&'a MetaParams>,
}

pub fn decode_config(cfg: &ExperimentConfig, strategy: Strategy) -> DecodeConfig {
    let mut dc = DecodeConfig::new(strategy, cfg.seed);
    dc.max_len = cfg.max_len;
    dc
}

/// Decodes every instance of `data`; instance `i` uses input id `i`.
pub fn decode_dataset(bundle: &CorpusBundle, data: &Dataset, models: &Models, dc: &DecodeConfig) -> Result<Vec<DecodeRecord>> {
    dc.validate()?;
    let mut out = Vec::with_capacity(data.len());
    for (i, inst) in data.instances.iter().enumerate() {
        let enc = bundle.schema.encode(&inst.mr)?;
        let d = match dc.strategy {
            Strategy::Mmi { .. } => {
                let lm = models.lm.context("MMI decoding needs a language model")?;
                Decoder::new(models.generator, dc.clone())
                    .with_lm(lm)
                    .decode(&enc, &inst.mr, &bundle.vocab, i as u64)?
            }
            Strategy::Mcd { .. } => {
                let meta = models.meta.context("MCD decoding needs a meta-classifier")?;
                Decoder::new(models.generator, dc.clone())
                    .with_meta(meta)
                    .decode(&enc, &inst.mr, &bundle.vocab, i as u64)?
            }
            _ => Decoder::new(models.generator, dc.clone()).decode(&enc, &inst.mr, &bundle.vocab, i as u64)?,
        };
        out.push(DecodeRecord {
            id: i,
            mr: inst.mr.clone(),
            output: d.output().text(&bundle.vocab).join(" "),
            pool: d
                .pool
                .candidates
                .iter()
                .map(|c| PoolEntry {
                    text: c.text(&bundle.vocab).join(" "),
                    log_prob: c.log_prob,
                    slot_error: c.slot_error,
                })
                .collect(),
            fallbacks: d.pool.fallbacks,
        });
    }
    Ok(out)
}

/// Scores outputs against every reference of the same MR in `refs`.
pub fn evaluate_records(records: &[DecodeRecord], refs: &Dataset) -> Result<EvalReport> {
    let mut by_mr: HashMap<String, Vec<Vec<String>>> = HashMap::new();
    for inst in &refs.instances {
        let words = inst.reference.iter().filter(|w| *w != "</s>" && *w != "<s>").cloned().collect();
        by_mr.entry(inst.mr.to_string()).or_default().push(words);
    }
    let mut outputs = Vec::with_capacity(records.len());
    let mut mrs = Vec::with_capacity(records.len());
    let mut rs = Vec::with_capacity(records.len());
    for r in records {
        let refs = by_mr
            .get(&r.mr.to_string())
            .with_context(|| format!("no reference for MR `{}`", r.mr))?;
        outputs.push(r.output.split_whitespace().map(str::to_string).collect::<Vec<_>>());
        mrs.push(&r.mr);
        rs.push(refs.clone());
    }
    Ok(evaluate(&outputs, &mrs, &rs)?)
}

pub fn test_stats(bundle: &CorpusBundle, generator: &Generator, max_len: usize) -> Result<DistributionStats> {
    let enc = bundle
        .test
        .instances
        .iter()
        .map(|i| bundle.schema.encode(&i.mr))
        .collect::<divdec_core::Result<Vec<_>>>()?;
    Ok(distribution_stats(generator, &enc, max_len)?)
}
