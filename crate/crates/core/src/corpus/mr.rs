use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder tokens all start with this prefix.
pub const PLACEHOLDER_PREFIX: &str = "SLOT_";

pub fn placeholder_for(attr: &str) -> String {
    format!(
        "{PLACEHOLDER_PREFIX}{}",
        attr.to_uppercase().replace('-', "_")
    )
}

pub fn is_placeholder(token: &str) -> bool {
    token.starts_with(PLACEHOLDER_PREFIX)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub attr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DialogueAct {
    pub act: String,
    #[serde(default)]
    pub slots: Vec<Slot>,
}

/// Structured generator input: an ordered list of dialogue acts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeaningRepresentation {
    pub acts: Vec<DialogueAct>,
}

/// Decomposition key used by the reference index. Acts without slots are
/// keyed by the act name alone.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttrKey {
    pub act: String,
    pub attr: Option<String>,
}

impl MeaningRepresentation {
    pub fn new(acts: Vec<DialogueAct>) -> Result<Self> {
        if acts.is_empty() {
            return Err(Error::InvalidInput("an MR needs at least one act".into()));
        }
        Ok(MeaningRepresentation { acts })
    }

    /// Placeholders the output must realise, with multiplicity.
    pub fn required_placeholders(&self) -> Vec<&str> {
        self.acts
            .iter()
            .flat_map(|a| a.slots.iter())
            .filter_map(|s| s.value.as_deref())
            .filter(|v| is_placeholder(v))
            .collect()
    }

    pub fn keys(&self) -> Vec<AttrKey> {
        let mut keys = Vec::new();
        for a in &self.acts {
            if a.slots.is_empty() {
                keys.push(AttrKey {
                    act: a.act.clone(),
                    attr: None,
                });
            }
            for s in &a.slots {
                keys.push(AttrKey {
                    act: a.act.clone(),
                    attr: Some(s.attr.clone()),
                });
            }
        }
        keys.sort();
        keys.dedup();
        keys
    }
}

impl fmt::Display for MeaningRepresentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.acts.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{}(", a.act)?;
            for (j, s) in a.slots.iter().enumerate() {
                if j > 0 {
                    f.write_str(",")?;
                }
                match &s.value {
                    Some(v) => write!(f, "{}={}", s.attr, v)?,
                    None => f.write_str(&s.attr)?,
                }
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemaKey {
    Act(String),
    Slot(String, String),
}

/// Index map from act names and (act, attribute) pairs to control-vector
/// positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DaSchema {
    keys: Vec<SchemaKey>,
    index: HashMap<SchemaKey, usize>,
}

/// Multi-hot MR encoding; the generator's initial control vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DaVector(pub Vec<f64>);

impl DaSchema {
    pub fn new(keys: Vec<SchemaKey>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate schema key {k:?}")));
            }
        }
        Ok(DaSchema { keys, index })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[SchemaKey] {
        &self.keys
    }

    pub fn position(&self, key: &SchemaKey) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn encode(&self, mr: &MeaningRepresentation) -> Result<DaVector> {
        let mut v = vec![0.0; self.len()];
        for a in &mr.acts {
            let act = SchemaKey::Act(a.act.clone());
            let pos = self
                .position(&act)
                .ok_or_else(|| Error::Schema(format!("unknown act `{}`", a.act)))?;
            v[pos] = 1.0;
            for s in &a.slots {
                let key = SchemaKey::Slot(a.act.clone(), s.attr.clone());
                let pos = self.position(&key).ok_or_else(|| {
                    Error::Schema(format!("unknown attribute `{}` for act `{}`", s.attr, a.act))
                })?;
                v[pos] = 1.0;
            }
        }
        Ok(DaVector(v))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in &self.keys {
            match k {
                SchemaKey::Act(a) => out.push_str(&format!("act {a}\n")),
                SchemaKey::Slot(a, s) => out.push_str(&format!("slot {a} {s}\n")),
            }
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut keys = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                [] => {}
                ["act", a] => keys.push(SchemaKey::Act(a.to_string())),
                ["slot", a, s] => keys.push(SchemaKey::Slot(a.to_string(), s.to_string())),
                _ => return Err(Error::parse(path, i + 1, "expected `act A` or `slot A S`")),
            }
        }
        Self::new(keys)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

/// Parses the compact `act(attr=value,attr);act()` notation used in logs.
impl std::str::FromStr for MeaningRepresentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut acts = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, rest) = part
                .split_once('(')
                .ok_or_else(|| Error::InvalidInput(format!("bad act `{part}`")))?;
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| Error::InvalidInput(format!("unclosed act `{part}`")))?;
            let slots = inner
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| match s.split_once('=') {
                    Some((a, v)) => Slot {
                        attr: a.to_string(),
                        value: Some(v.to_string()),
                    },
                    None => Slot {
                        attr: s.to_string(),
                        value: None,
                    },
                })
                .collect();
            acts.push(DialogueAct {
                act: name.trim().to_string(),
                slots,
            });
        }
        MeaningRepresentation::new(acts)
    }
}
