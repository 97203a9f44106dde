//! Template grammar for the synthetic corpus.
//!
//! Templates are whitespace-tokenised strings with alternation groups
//! `(a|b c|)` (an empty branch makes the group optional) which may nest.
//! `{slots}` marks where an act's slot phrases are spliced in; `{value}`
//! inside a slot phrase becomes the attribute's placeholder token.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Deserialize;

use super::dataset::{Dataset, Instance, Split};
use super::mr::{placeholder_for, DaSchema, DialogueAct, MeaningRepresentation, SchemaKey, Slot};
use crate::error::{Error, Result};
use crate::numkit::rng::rng_for;

pub const DEFAULT_GRAMMAR: &str = include_str!("../../data/default_grammar.toml");

#[derive(Debug, Clone, Deserialize)]
pub struct Grammar {
    pub attributes: Vec<String>,
    /// Number of distinct MRs instances are drawn from.
    pub mr_pool: usize,
    pub max_acts: usize,
    /// Word placed between consecutive slot phrases.
    #[serde(default = "default_joiner")]
    pub slot_joiner: String,
    pub acts: Vec<ActSpec>,
}

fn default_joiner() -> String {
    "and".into()
}

#[derive(Debug, Clone, Deserialize)]
pub struct ActSpec {
    pub name: String,
    #[serde(default)]
    pub values: bool,
    #[serde(default)]
    pub min_slots: usize,
    #[serde(default)]
    pub max_slots: usize,
    pub templates: Vec<String>,
    /// Slot phrase alternatives keyed by attribute, in schema order.
    #[serde(default)]
    pub slots: BTreeMap<String, Vec<String>>,
    /// Acts this one may not be combined with in a single MR.
    #[serde(default)]
    pub excludes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Word(String),
    Slots,
    Value,
    Group(Vec<Vec<Node>>),
}

fn parse_template(src: &str) -> Result<Vec<Node>> {
    let chars: Vec<char> = src.chars().collect();
    let mut pos = 0;
    let seq = parse_seq(&chars, &mut pos, src)?;
    if pos != chars.len() {
        return Err(Error::Config(format!("unbalanced `)` in template `{src}`")));
    }
    Ok(seq)
}

fn parse_seq(chars: &[char], pos: &mut usize, src: &str) -> Result<Vec<Node>> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<Node>| {
        if !word.is_empty() {
            let node = match word.as_str() {
                "{slots}" => Node::Slots,
                "{value}" => Node::Value,
                w => Node::Word(w.to_string()),
            };
            out.push(node);
            word.clear();
        }
    };
    while *pos < chars.len() {
        let c = chars[*pos];
        match c {
            '(' => {
                flush(&mut word, &mut out);
                *pos += 1;
                let mut branches = vec![parse_seq(chars, pos, src)?];
                loop {
                    match chars.get(*pos) {
                        Some('|') => {
                            *pos += 1;
                            branches.push(parse_seq(chars, pos, src)?);
                        }
                        Some(')') => {
                            *pos += 1;
                            break;
                        }
                        _ => {
                            return Err(Error::Config(format!("unclosed `(` in template `{src}`")))
                        }
                    }
                }
                out.push(Node::Group(branches));
            }
            '|' | ')' => break,
            c if c.is_whitespace() => {
                flush(&mut word, &mut out);
                *pos += 1;
            }
            c => {
                word.push(c);
                *pos += 1;
            }
        }
    }
    flush(&mut word, &mut out);
    Ok(out)
}

fn expand<R: Rng + ?Sized>(
    nodes: &[Node],
    value: Option<&str>,
    slots: &mut dyn FnMut(&mut R, &mut Vec<String>),
    rng: &mut R,
    out: &mut Vec<String>,
) {
    for n in nodes {
        match n {
            Node::Word(w) => out.push(w.clone()),
            Node::Value => out.push(value.unwrap_or("{value}").to_string()),
            Node::Slots => slots(rng, out),
            Node::Group(branches) => {
                let b = &branches[rng.gen_range(0..branches.len())];
                expand(b, value, slots, rng, out);
            }
        }
    }
}

fn words_of(nodes: &[Node], acc: &mut BTreeSet<String>) {
    for n in nodes {
        match n {
            Node::Word(w) => {
                acc.insert(w.clone());
            }
            Node::Group(bs) => bs.iter().for_each(|b| words_of(b, acc)),
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
struct CompiledAct {
    spec: ActSpec,
    templates: Vec<Vec<Node>>,
    slots: Vec<(String, Vec<Vec<Node>>)>,
}

/// A validated grammar ready for sampling.
#[derive(Debug, Clone)]
pub struct CompiledGrammar {
    grammar: Grammar,
    acts: Vec<CompiledAct>,
}

impl Grammar {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("grammar: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn default_grammar() -> Self {
        Self::from_toml(DEFAULT_GRAMMAR).expect("shipped grammar parses")
    }

    pub fn compile(self) -> Result<CompiledGrammar> {
        if self.acts.is_empty() {
            return Err(Error::Config("grammar declares no acts".into()));
        }
        let attrs: HashSet<&str> = self.attributes.iter().map(String::as_str).collect();
        let mut names = HashSet::new();
        let mut acts = Vec::new();
        for a in &self.acts {
            if !names.insert(a.name.clone()) {
                return Err(Error::Config(format!("act `{}` declared twice", a.name)));
            }
            if a.templates.is_empty() {
                return Err(Error::Config(format!("act `{}` has no templates", a.name)));
            }
            let templates = a
                .templates
                .iter()
                .map(|t| parse_template(t))
                .collect::<Result<Vec<_>>>()?;
            let mut slots = Vec::new();
            for attr in &self.attributes {
                if let Some(phrases) = a.slots.get(attr) {
                    if phrases.is_empty() {
                        return Err(Error::Config(format!(
                            "act `{}` attribute `{attr}` has no phrases",
                            a.name
                        )));
                    }
                    let parsed = phrases
                        .iter()
                        .map(|p| parse_template(p))
                        .collect::<Result<Vec<_>>>()?;
                    slots.push((attr.clone(), parsed));
                }
            }
            for attr in a.slots.keys() {
                if !attrs.contains(attr.as_str()) {
                    return Err(Error::Config(format!(
                        "act `{}` uses undeclared attribute `{attr}`",
                        a.name
                    )));
                }
            }
            if a.max_slots < a.min_slots || a.max_slots > slots.len() {
                return Err(Error::Config(format!(
                    "act `{}` slot range {}..={} invalid for {} attributes",
                    a.name,
                    a.min_slots,
                    a.max_slots,
                    slots.len()
                )));
            }
            acts.push(CompiledAct {
                spec: a.clone(),
                templates,
                slots,
            });
        }
        if self.max_acts == 0 {
            return Err(Error::Config("max_acts must be at least 1".into()));
        }
        Ok(CompiledGrammar {
            grammar: self,
            acts,
        })
    }
}

impl CompiledGrammar {
    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn schema(&self) -> DaSchema {
        let mut keys = Vec::new();
        for a in &self.acts {
            keys.push(SchemaKey::Act(a.spec.name.clone()));
            for (attr, _) in &a.slots {
                keys.push(SchemaKey::Slot(a.spec.name.clone(), attr.clone()));
            }
        }
        DaSchema::new(keys).expect("act names are unique")
    }

    /// Every surface word the grammar can emit, plus all placeholders.
    pub fn lexicon(&self) -> BTreeSet<String> {
        let mut words = BTreeSet::new();
        for a in &self.acts {
            a.templates.iter().for_each(|t| words_of(t, &mut words));
            for (_, phrases) in &a.slots {
                phrases.iter().for_each(|p| words_of(p, &mut words));
            }
        }
        words.insert(self.grammar.slot_joiner.clone());
        for attr in &self.grammar.attributes {
            words.insert(placeholder_for(attr));
        }
        words
    }

    fn sample_mr<R: Rng + ?Sized>(&self, rng: &mut R) -> MeaningRepresentation {
        let n_acts = rng.gen_range(1..=self.grammar.max_acts.min(self.acts.len()));
        let mut order: Vec<usize> = (0..self.acts.len()).collect();
        order.shuffle(rng);
        let mut chosen: Vec<usize> = Vec::new();
        for i in order {
            if chosen.len() == n_acts {
                break;
            }
            let name = &self.acts[i].spec.name;
            let clash = chosen.iter().any(|&j| {
                self.acts[j].spec.excludes.contains(name)
                    || self.acts[i].spec.excludes.contains(&self.acts[j].spec.name)
            });
            if !clash {
                chosen.push(i);
            }
        }
        chosen.sort_unstable();
        let acts = chosen
            .into_iter()
            .map(|i| {
                let a = &self.acts[i];
                let k = rng.gen_range(a.spec.min_slots..=a.spec.max_slots);
                let mut picks: Vec<usize> = (0..a.slots.len()).collect();
                picks.shuffle(rng);
                picks.truncate(k);
                picks.sort_unstable();
                let slots = picks
                    .into_iter()
                    .map(|p| {
                        let attr = a.slots[p].0.clone();
                        let value = a.spec.values.then(|| placeholder_for(&attr));
                        Slot { attr, value }
                    })
                    .collect();
                DialogueAct {
                    act: a.spec.name.clone(),
                    slots,
                }
            })
            .collect();
        MeaningRepresentation { acts }
    }

    /// Draws one surface realisation of `mr`, terminated by `</s>`.
    pub fn realise<R: Rng + ?Sized>(
        &self,
        mr: &MeaningRepresentation,
        rng: &mut R,
    ) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for da in &mr.acts {
            let act = self
                .acts
                .iter()
                .find(|a| a.spec.name == da.act)
                .ok_or_else(|| Error::Schema(format!("unknown act `{}`", da.act)))?;
            let mut phrases = Vec::new();
            for s in &da.slots {
                let (_, alts) = act
                    .slots
                    .iter()
                    .find(|(a, _)| *a == s.attr)
                    .ok_or_else(|| Error::Schema(format!("unknown attribute `{}`", s.attr)))?;
                phrases.push((alts, s.value.clone()));
            }
            let template = &act.templates[rng.gen_range(0..act.templates.len())];
            let joiner = self.grammar.slot_joiner.clone();
            let mut fill_slots = |rng: &mut R, out: &mut Vec<String>| {
                for (i, (alts, value)) in phrases.iter().enumerate() {
                    if i > 0 {
                        out.push(joiner.clone());
                    }
                    let alt = &alts[rng.gen_range(0..alts.len())];
                    expand(alt, value.as_deref(), &mut |_: &mut R, _: &mut Vec<String>| {}, rng, out);
                }
            };
            expand(template, None, &mut fill_slots, rng, &mut out);
        }
        out.push(super::vocab::EOS.to_string());
        Ok(out)
    }

    /// Deterministic pool of distinct MRs.
    pub fn mr_pool(&self, seed: u64) -> Vec<MeaningRepresentation> {
        let mut rng = rng_for(seed, &[0x4d52]);
        let mut seen = HashSet::new();
        let mut pool = Vec::new();
        let mut attempts = 0;
        while pool.len() < self.grammar.mr_pool && attempts < self.grammar.mr_pool * 200 {
            attempts += 1;
            let mr = self.sample_mr(&mut rng);
            if seen.insert(mr.clone()) {
                pool.push(mr);
            }
        }
        pool
    }

    /// Train, validation and test splits drawn from a shared MR pool.
    pub fn generate_corpus(
        &self,
        seed: u64,
        sizes: (usize, usize, usize),
    ) -> Result<(Dataset, Dataset, Dataset)> {
        let pool = self.mr_pool(seed);
        let make = |split: Split, n: usize, tag: u64| -> Result<Dataset> {
            let mut rng = rng_for(seed, &[tag]);
            let mut instances = Vec::with_capacity(n);
            for _ in 0..n {
                let mr = pool[rng.gen_range(0..pool.len())].clone();
                let reference = self.realise(&mr, &mut rng)?;
                instances.push(Instance { mr, reference });
            }
            Ok(Dataset { split, instances })
        };
        Ok((
            make(Split::Train, sizes.0, 1)?,
            make(Split::Validation, sizes.1, 2)?,
            make(Split::Test, sizes.2, 3)?,
        ))
    }
}
