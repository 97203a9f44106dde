//! Corpus-level evaluation: BLEU-4, Self-BLEU, distinct-n and slot error.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{is_placeholder, MeaningRepresentation};
use crate::error::{Error, Result};

const ORDER: usize = 4;

/// Clipped n-gram statistics of a hypothesis set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NgramProfile {
    /// Clipped matches for orders 1..4.
    pub matches: [u64; ORDER],
    /// Hypothesis n-gram counts for orders 1..4.
    pub totals: [u64; ORDER],
    pub hyp_len: u64,
    /// Sum over hypotheses of the closest reference length.
    pub ref_len: u64,
}

impl NgramProfile {
    pub fn precision(&self, n: usize) -> Option<f64> {
        let (m, t) = (self.matches[n - 1], self.totals[n - 1]);
        (t > 0).then(|| m as f64 / t as f64)
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Geometric mean of the defined precisions times the brevity penalty.
    /// Orders with no hypothesis n-grams are skipped; a zero precision
    /// gives 0.
    pub fn bleu(&self) -> f64 {
        let mut log_sum = 0.0;
        let mut levels = 0;
        for n in 1..=ORDER {
            match self.precision(n) {
                Some(p) if p == 0.0 => return 0.0,
                Some(p) => {
                    log_sum += p.ln();
                    levels += 1;
                }
                None => {}
            }
        }
        if levels == 0 {
            return 0.0;
        }
        self.brevity_penalty() * (log_sum / levels as f64).exp()
    }

    fn add(&mut self, other: &NgramProfile) {
        for n in 0..ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts<T: Hash + Eq>(seq: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Closest reference length; ties go to the shorter one.
fn closest_len(hyp_len: usize, ref_lens: impl IntoIterator<Item = usize>) -> usize {
    ref_lens
        .into_iter()
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

fn sentence_profile<T: Hash + Eq, R: AsRef<[T]>>(hyp: &[T], refs: &[R]) -> NgramProfile {
    let mut p = NgramProfile {
        hyp_len: hyp.len() as u64,
        ref_len: closest_len(hyp.len(), refs.iter().map(|r| r.as_ref().len())) as u64,
        ..Default::default()
    };
    for n in 1..=ORDER {
        let counts = ngram_counts(hyp, n);
        let mut max_ref: HashMap<&[T], u64> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r.as_ref(), n) {
                if counts.contains_key(g) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
        }
        p.matches[n - 1] = counts
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        p.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
    }
    p
}

/// Corpus statistics for hypotheses with their reference sets.
pub fn ngram_profile<T, H, R>(hyps: &[H], refs: &[Vec<R>]) -> Result<NgramProfile>
where
    T: Hash + Eq,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if hyps.is_empty() {
        return Err(Error::InvalidInput("BLEU needs at least one hypothesis".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::InvalidInput("one reference set per hypothesis required".into()));
    }
    let mut total = NgramProfile::default();
    for (h, r) in hyps.iter().zip(refs) {
        if r.is_empty() {
            return Err(Error::InvalidInput("every hypothesis needs a reference".into()));
        }
        total.add(&sentence_profile(h.as_ref(), r));
    }
    Ok(total)
}

/// Corpus BLEU-4 with brevity penalty.
pub fn bleu4<T, H, R>(hyps: &[H], refs: &[Vec<R>]) -> Result<f64>
where
    T: Hash + Eq,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    Ok(ngram_profile(hyps, refs)?.bleu())
}

/// `1 − mean_i BLEU-4(output_i | all other outputs)`.
pub fn self_bleu<T: Hash + Eq, S: AsRef<[T]>>(outputs: &[S]) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::InvalidInput("Self-BLEU needs at least two outputs".into()));
    }
    // per n-gram, the two largest counts with their sentence index, so the
    // leave-one-out maximum is a lookup
    let mut top2: Vec<HashMap<&[T], [(u64, usize); 2]>> = vec![HashMap::new(); ORDER];
    for (i, s) in outputs.iter().enumerate() {
        for n in 1..=ORDER {
            for (g, c) in ngram_counts(s.as_ref(), n) {
                let e = top2[n - 1].entry(g).or_insert([(0, usize::MAX); 2]);
                if c > e[0].0 {
                    e[1] = e[0];
                    e[0] = (c, i);
                } else if c > e[1].0 {
                    e[1] = (c, i);
                }
            }
        }
    }
    let mut lens: Vec<usize> = outputs.iter().map(|s| s.as_ref().len()).collect();
    lens.sort_unstable();
    let mut sum = 0.0;
    for (i, s) in outputs.iter().enumerate() {
        let hyp = s.as_ref();
        let mut p = NgramProfile {
            hyp_len: hyp.len() as u64,
            ..Default::default()
        };
        // the closest length among the others: drop one copy of our own
        let own = lens.binary_search(&hyp.len()).expect("own length present");
        let others = lens[..own].iter().chain(&lens[own + 1..]).copied();
        p.ref_len = closest_len(hyp.len(), others) as u64;
        for n in 1..=ORDER {
            let counts = ngram_counts(hyp, n);
            p.matches[n - 1] = counts
                .iter()
                .map(|(g, &c)| {
                    let t = &top2[n - 1][g];
                    let other = if t[0].1 == i { t[1].0 } else { t[0].0 };
                    c.min(other)
                })
                .sum();
            p.totals[n - 1] = hyp.len().saturating_sub(n - 1) as u64;
        }
        sum += p.bleu();
    }
    Ok(1.0 - sum / outputs.len() as f64)
}

/// Unique n-grams over total n-grams across the corpus (0 when there are no
/// n-grams).
pub fn distinct_n<T: Hash + Eq, S: AsRef<[T]>>(outputs: &[S], n: usize) -> f64 {
    let mut unique: std::collections::HashSet<&[T]> = std::collections::HashSet::new();
    let mut total = 0usize;
    for s in outputs {
        let s = s.as_ref();
        if s.len() >= n && n > 0 {
            for w in s.windows(n) {
                unique.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

pub fn distinct_sentence<T: Hash + Eq, S: AsRef<[T]>>(outputs: &[S]) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let unique: std::collections::HashSet<&[T]> = outputs.iter().map(|s| s.as_ref()).collect();
    unique.len() as f64 / outputs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotErrorCount {
    pub missing: usize,
    /// Repeats of required placeholders plus any foreign placeholder.
    pub redundant: usize,
    pub required: usize,
}

impl SlotErrorCount {
    /// `(missing + redundant) / required`; 0 when nothing is required.
    pub fn rate(&self) -> f64 {
        if self.required == 0 {
            0.0
        } else {
            (self.missing + self.redundant) as f64 / self.required as f64
        }
    }

    /// The MR requires no placeholders, so the rate is not informative.
    pub fn no_slots(&self) -> bool {
        self.required == 0
    }
}

pub fn slot_error<S: AsRef<str>>(output: &[S], mr: &MeaningRepresentation) -> SlotErrorCount {
    let mut required: HashMap<&str, usize> = HashMap::new();
    for p in mr.required_placeholders() {
        *required.entry(p).or_default() += 1;
    }
    let mut produced: HashMap<&str, usize> = HashMap::new();
    for t in output {
        let t = t.as_ref();
        if is_placeholder(t) {
            *produced.entry(t).or_default() += 1;
        }
    }
    let missing = required
        .iter()
        .map(|(p, &r)| r.saturating_sub(produced.get(p).copied().unwrap_or(0)))
        .sum();
    let redundant = produced
        .iter()
        .map(|(p, &c)| c.saturating_sub(required.get(p).copied().unwrap_or(0)))
        .sum();
    SlotErrorCount {
        missing,
        redundant,
        required: required.values().sum(),
    }
}

/// The report columns, in order.
pub const REPORT_COLUMNS: [&str; 7] = ["BLEU", "1-SB", "Dist-1", "Dist-2", "Dist-4", "Dist-Sent", "SlotError"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub one_minus_self_bleu: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub distinct_4: f64,
    pub distinct_sentence: f64,
    /// Corpus slot error rate in percent: total errors over total required
    /// placeholders.
    pub slot_error: f64,
}

impl EvalReport {
    pub fn values(&self) -> [f64; 7] {
        [
            self.bleu4,
            self.one_minus_self_bleu,
            self.distinct_1,
            self.distinct_2,
            self.distinct_4,
            self.distinct_sentence,
            self.slot_error,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        EvalReport {
            bleu4: v[0],
            one_minus_self_bleu: v[1],
            distinct_1: v[2],
            distinct_2: v[3],
            distinct_4: v[4],
            distinct_sentence: v[5],
            slot_error: v[6],
        }
    }
}

/// Evaluates delexicalised outputs against their MRs and reference sets.
pub fn evaluate<S: AsRef<str>>(
    outputs: &[Vec<S>],
    mrs: &[&MeaningRepresentation],
    refs: &[Vec<Vec<S>>],
) -> Result<EvalReport> {
    if outputs.len() != mrs.len() {
        return Err(Error::InvalidInput("one MR per output required".into()));
    }
    let toks: Vec<Vec<&str>> = outputs.iter().map(|o| o.iter().map(AsRef::as_ref).collect()).collect();
    let ref_toks: Vec<Vec<Vec<&str>>> = refs
        .iter()
        .map(|rs| rs.iter().map(|r| r.iter().map(AsRef::as_ref).collect()).collect())
        .collect();
    let (mut errors, mut required) = (0usize, 0usize);
    for (o, mr) in toks.iter().zip(mrs) {
        let c = slot_error(o, mr);
        errors += c.missing + c.redundant;
        required += c.required;
    }
    Ok(EvalReport {
        bleu4: bleu4(&toks, &ref_toks)?,
        one_minus_self_bleu: self_bleu(&toks)?,
        distinct_1: distinct_n(&toks, 1),
        distinct_2: distinct_n(&toks, 2),
        distinct_4: distinct_n(&toks, 4),
        distinct_sentence: distinct_sentence(&toks),
        slot_error: if required == 0 {
            0.0
        } else {
            100.0 * errors as f64 / required as f64
        },
    })
}
