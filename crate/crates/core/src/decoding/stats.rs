use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DaVector, EOS_ID};
use crate::error::{Error, Result};
use crate::model::SequenceModel;

/// Ranks reported per step.
pub const STAT_RANKS: usize = 10;

const CONFIDENT: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    /// Mean probability of the rank-1..10 words.
    pub mean_rank_probs: Vec<f64>,
    /// Fraction of steps whose top word has probability >= 0.99.
    pub confident_fraction: f64,
    pub steps: usize,
}

/// The sorted top-[`STAT_RANKS`] probabilities at every greedy step.
pub fn greedy_step_profiles<M: SequenceModel>(model: &M, encoding: &DaVector, max_len: usize) -> Result<Vec<Vec<f64>>> {
    let mut state = model.begin(encoding)?;
    let mut rows = Vec::new();
    while rows.len() < max_len {
        let mut dist = model.distribution(&state);
        let t = model.greedy_next(&state);
        dist.sort_by(|a, b| b.total_cmp(a));
        dist.resize(STAT_RANKS, 0.0);
        rows.push(dist);
        if t == EOS_ID || rows.len() == max_len {
            break;
        }
        state = model.advance(&state, t)?;
    }
    Ok(rows)
}

impl DistributionStats {
    pub fn from_profiles(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("no decoding steps".into()));
        }
        let mut mean = vec![0.0; STAT_RANKS];
        for r in rows {
            for (m, p) in mean.iter_mut().zip(r) {
                *m += p;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        let confident = rows.iter().filter(|r| r[0] >= CONFIDENT).count();
        Ok(DistributionStats {
            mean_rank_probs: mean,
            confident_fraction: confident as f64 / rows.len() as f64,
            steps: rows.len(),
        })
    }

    pub fn mean_top1(&self) -> f64 {
        self.mean_rank_probs[0]
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.mean_rank_probs.windows(2).all(|w| w[0] > w[1])
    }

    /// `statistic,value` rows: `rank_1` .. `rank_10`, `top1_ge_0.99`, `steps`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut s = String::from("statistic,value\n");
        for (i, p) in self.mean_rank_probs.iter().enumerate() {
            s.push_str(&format!("rank_{},{p}\n", i + 1));
        }
        s.push_str(&format!("top1_ge_{CONFIDENT},{}\nsteps,{}\n", self.confident_fraction, self.steps));
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Statistics over every greedy-decoding step of `encodings`.
pub fn distribution_stats<M: SequenceModel>(model: &M, encodings: &[DaVector], max_len: usize) -> Result<DistributionStats> {
    let mut rows = Vec::new();
    for e in encodings {
        rows.extend(greedy_step_profiles(model, e, max_len)?);
    }
    DistributionStats::from_profiles(&rows)
}
