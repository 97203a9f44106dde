use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;

use super::dataset::Dataset;
use super::mr::{AttrKey, MeaningRepresentation};
use super::vocab::{TokenId, Vocab, BOS_ID};
use crate::error::{Error, Result};
use crate::numkit::rng::{hash_str, rng_for};

/// A reference as seen by the expert: `<s>` + tokens + `</s>`.
pub type RefSeq = Arc<[TokenId]>;

/// Training references keyed by (act, attribute) decomposition keys.
#[derive(Debug, Clone)]
pub struct ReferenceIndex {
    refs: Vec<RefSeq>,
    by_key: BTreeMap<AttrKey, BTreeSet<usize>>,
    by_mr: HashMap<MeaningRepresentation, BTreeSet<usize>>,
}

/// Result of a reference lookup.
#[derive(Debug, Clone)]
pub struct RefSet {
    pub refs: Vec<RefSeq>,
    /// False when some decomposition key had no entry in the index.
    pub complete: bool,
}

impl ReferenceIndex {
    pub fn build(train: &Dataset, vocab: &Vocab) -> Self {
        let mut refs: Vec<RefSeq> = Vec::new();
        let mut seen: HashMap<Vec<TokenId>, usize> = HashMap::new();
        let mut by_key: BTreeMap<AttrKey, BTreeSet<usize>> = BTreeMap::new();
        let mut by_mr: HashMap<MeaningRepresentation, BTreeSet<usize>> = HashMap::new();
        for inst in &train.instances {
            let mut seq = vec![BOS_ID];
            seq.extend(vocab.encode(&inst.reference));
            let id = *seen.entry(seq.clone()).or_insert_with(|| {
                refs.push(seq.into());
                refs.len() - 1
            });
            for key in inst.mr.keys() {
                by_key.entry(key).or_default().insert(id);
            }
            by_mr.entry(inst.mr.clone()).or_default().insert(id);
        }
        ReferenceIndex {
            refs,
            by_key,
            by_mr,
        }
    }

    pub fn num_refs(&self) -> usize {
        self.refs.len()
    }

    pub fn reference(&self, id: usize) -> &RefSeq {
        &self.refs[id]
    }

    pub fn ids_for_key(&self, key: &AttrKey) -> Option<&BTreeSet<usize>> {
        self.by_key.get(key)
    }

    /// Exhaustively checks that every training reference is retrievable under
    /// every key of its MR.
    pub fn verify_complete(&self, train: &Dataset, vocab: &Vocab) -> Result<()> {
        for (n, inst) in train.instances.iter().enumerate() {
            let mut seq = vec![BOS_ID];
            seq.extend(vocab.encode(&inst.reference));
            for key in inst.mr.keys() {
                let found = self
                    .by_key
                    .get(&key)
                    .is_some_and(|ids| ids.iter().any(|&i| *self.refs[i] == *seq));
                if !found {
                    return Err(Error::Contract(format!(
                        "instance {n}: reference missing under key {key:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Union of the references filed under each of `mr`'s keys. Above `cap`,
    /// a seeded subsample is taken that always keeps `mr`'s own references.
    pub fn references_for(&self, mr: &MeaningRepresentation, cap: usize, seed: u64) -> RefSet {
        let mut union = BTreeSet::new();
        let mut complete = true;
        for key in mr.keys() {
            match self.by_key.get(&key) {
                Some(ids) => union.extend(ids.iter().copied()),
                None => complete = false,
            }
        }
        let ids: Vec<usize> = if union.len() <= cap {
            union.into_iter().collect()
        } else {
            let own = self.by_mr.get(mr).cloned().unwrap_or_default();
            let mut rest: Vec<usize> = union.difference(&own).copied().collect();
            let mut rng = rng_for(seed, &[hash_str(&mr.to_string())]);
            rest.shuffle(&mut rng);
            rest.truncate(cap.saturating_sub(own.len()));
            let mut ids: Vec<usize> = own.into_iter().chain(rest).collect();
            ids.sort_unstable();
            ids
        };
        RefSet {
            refs: ids.into_iter().map(|i| self.refs[i].clone()).collect(),
            complete,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::dataset::{Instance, Split};

    fn inst(mr: &str, r: &str) -> Instance {
        Instance {
            mr: mr.parse().unwrap(),
            reference: r.split_whitespace().map(str::to_string).collect(),
        }
    }

    fn tiny() -> (Dataset, Vocab) {
        let ds = Dataset {
            split: Split::Train,
            instances: vec![
                inst("welcome();bye()", "glad to help . bye . </s>"),
                inst("welcome();bye()", "glad to assist . goodbye . </s>"),
                inst("welcome();request(area)", "glad to help . which area ? </s>"),
                inst("request(food)", "what food ? </s>"),
            ],
        };
        let vocab = Vocab::build(ds.instances.iter().flat_map(|i| i.reference.iter()));
        (ds, vocab)
    }

    #[test]
    fn own_references_are_included() {
        let (ds, vocab) = tiny();
        let idx = ReferenceIndex::build(&ds, &vocab);
        idx.verify_complete(&ds, &vocab).unwrap();
        let set = idx.references_for(&"welcome();bye()".parse().unwrap(), 500, 1);
        assert!(set.complete);
        assert_eq!(set.refs.len(), 3);
    }

    #[test]
    fn shared_key_pulls_in_other_mr() {
        let (ds, vocab) = tiny();
        let idx = ReferenceIndex::build(&ds, &vocab);
        let set = idx.references_for(&"request(area)".parse().unwrap(), 500, 1);
        assert_eq!(set.refs.len(), 1);
        let set = idx.references_for(&"request(food);welcome()".parse().unwrap(), 500, 1);
        assert_eq!(set.refs.len(), 4);
    }

    #[test]
    fn missing_key_flags_incomplete() {
        let (ds, vocab) = tiny();
        let idx = ReferenceIndex::build(&ds, &vocab);
        let set = idx.references_for(&"request(price);bye()".parse().unwrap(), 500, 1);
        assert!(!set.complete);
        assert_eq!(set.refs.len(), 2);
    }

    #[test]
    fn cap_keeps_own_references_and_is_deterministic() {
        let (ds, vocab) = tiny();
        let idx = ReferenceIndex::build(&ds, &vocab);
        let mr: MeaningRepresentation = "welcome();bye()".parse().unwrap();
        let a = idx.references_for(&mr, 2, 9);
        let b = idx.references_for(&mr, 2, 9);
        assert_eq!(a.refs, b.refs);
        assert_eq!(a.refs.len(), 2);
        let bye = vocab.id("bye");
        let goodbye = vocab.id("goodbye");
        assert!(a.refs.iter().any(|r| r.contains(&bye)));
        assert!(a.refs.iter().any(|r| r.contains(&goodbye)));
    }
}
