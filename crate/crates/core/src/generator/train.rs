use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Generator, GeneratorConfig};
use crate::corpus::{DaSchema, DaVector, Dataset, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::numkit::rng::rng_for;
use crate::numkit::{adam_step, clip_gradients, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy per token (nats), measured during the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Teacher-forced examples: control vector plus target tokens ending in `</s>`.
pub type Example = (DaVector, Vec<TokenId>);

pub fn encode_examples(data: &Dataset, vocab: &Vocab, schema: Option<&DaSchema>) -> Result<Vec<Example>> {
    data.instances
        .iter()
        .map(|inst| {
            let enc = match schema {
                Some(s) => s.encode(&inst.mr)?,
                None => DaVector(Vec::new()),
            };
            Ok((enc, vocab.encode(&inst.reference)))
        })
        .collect()
}

/// Mean per-token cross-entropy.
pub fn mean_loss(model: &mut Generator, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (enc, seq) in examples {
        total += model.sequence_loss(seq, enc, None, false)?;
        tokens += seq.len();
    }
    Ok(total / tokens.max(1) as f64)
}

/// Trains with Adam and global-norm clipping, one sentence per update, and
/// returns the parameters with the best validation loss.
pub fn train_model(
    mut model: Generator,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
) -> Result<(Generator, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("training needs non-empty train and validation splits".into()));
    }
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Generator)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &[epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for &i in &order {
            let (enc, seq) = &train[i];
            let dropout_rng = (model.config().dropout > 0.0).then_some(&mut rng);
            total += model.sequence_loss(seq, enc, dropout_rng, true)?;
            tokens += seq.len();
            clip_gradients(model.store_mut(), cfg.clip)?;
            adam_step(model.store_mut(), cfg)?;
        }
        let val_loss = mean_loss(&mut model, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("validation loss is {val_loss} at epoch {epoch}")));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: total / tokens.max(1) as f64,
            val_loss,
        });
        match &best {
            Some((b, _)) if val_loss >= *b => {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((val_loss, model.clone()));
                log.best_epoch = epoch;
                since_best = 0;
            }
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, log))
}

pub fn train_generator(
    train: &Dataset,
    val: &Dataset,
    vocab: &Vocab,
    schema: &DaSchema,
    model_cfg: GeneratorConfig,
    cfg: &TrainConfig,
) -> Result<(Generator, TrainLog)> {
    let tr = encode_examples(train, vocab, Some(schema))?;
    let va = encode_examples(val, vocab, Some(schema))?;
    let model = Generator::new(model_cfg, cfg.seed)?;
    train_model(model, &tr, &va, cfg)
}

/// Unconditional LM over the references: the same cell with an empty
/// control vector.
pub fn train_lm(
    train: &Dataset,
    val: &Dataset,
    vocab: &Vocab,
    mut model_cfg: GeneratorConfig,
    cfg: &TrainConfig,
) -> Result<(Generator, TrainLog)> {
    model_cfg.da_dim = 0;
    let tr = encode_examples(train, vocab, None)?;
    let va = encode_examples(val, vocab, None)?;
    let model = Generator::new(model_cfg, cfg.seed)?;
    train_model(model, &tr, &va, cfg)
}
