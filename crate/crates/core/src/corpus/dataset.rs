use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mr::MeaningRepresentation;
use super::vocab::EOS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Validation => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

/// One (MR, reference) pair. References are word tokens ending in `</s>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub mr: MeaningRepresentation,
    pub reference: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub instances: Vec<Instance>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    mr: MeaningRepresentation,
    #[serde(rename = "ref")]
    reference: String,
}

impl Dataset {
    pub fn empty(split: Split) -> Self {
        Dataset {
            split,
            instances: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            let rec = Record {
                mr: inst.mr.clone(),
                reference: inst.reference.join(" "),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, split: Split, path: &Path) -> Result<Self> {
        let mut instances = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            if rec.mr.acts.is_empty() {
                return Err(Error::parse(path, i + 1, "MR has no acts"));
            }
            let reference: Vec<String> =
                rec.reference.split_whitespace().map(str::to_string).collect();
            if reference.last().map(String::as_str) != Some(EOS) {
                return Err(Error::parse(path, i + 1, "reference must end with </s>"));
            }
            instances.push(Instance {
                mr: rec.mr,
                reference,
            });
        }
        Ok(Dataset { split, instances })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, split: Split) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, split, path)
    }

    /// Distinct MRs in first-appearance order.
    pub fn distinct_mrs(&self) -> Vec<&MeaningRepresentation> {
        let mut seen = std::collections::HashSet::new();
        self.instances
            .iter()
            .map(|i| &i.mr)
            .filter(|mr| seen.insert(*mr))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_empty_dataset() {
        let d = Dataset::from_jsonl("", Split::Test, Path::new("x")).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"mr":[{"act":"bye","slots":[]}],"ref":"bye . </s>"}"#,
            "\n",
            r#"{"mr":[{"act":"bye""#,
            "\n"
        );
        match Dataset::from_jsonl(text, Split::Train, Path::new("d.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reference_without_eos_rejected() {
        let text = r#"{"mr":[{"act":"bye"}],"ref":"bye ."}"#;
        assert!(Dataset::from_jsonl(text, Split::Train, Path::new("d")).is_err());
    }
}
