use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use divdec_core::corpus::MeaningRepresentation;
use divdec_core::imitation::Framework;
use divdec_core::metrics::{EvalReport, REPORT_COLUMNS};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

/// Where each artifact of a run lives.
#[derive(Debug, Clone)]
pub struct Layout {
    pub data: PathBuf,
    pub ckpt: PathBuf,
    pub out: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Layout {
            data: cfg.data_dir.clone(),
            ckpt: cfg.checkpoint_dir.clone(),
            out: cfg.output_dir.clone(),
        }
    }

    pub fn dataset_files(&self) -> Vec<PathBuf> {
        ["train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt", "schema.txt"]
            .iter()
            .map(|f| self.data.join(f))
            .collect()
    }

    pub fn generator(&self) -> PathBuf {
        self.ckpt.join("generator.ckpt")
    }

    pub fn lm(&self) -> PathBuf {
        self.ckpt.join("lm.ckpt")
    }

    pub fn meta(&self, fw: Framework) -> PathBuf {
        self.ckpt.join(format!("meta-{fw}.ckpt"))
    }

    pub fn il_log(&self, fw: Framework) -> PathBuf {
        self.out.join(format!("il-{fw}.csv"))
    }

    pub fn train_log(&self, name: &str) -> PathBuf {
        self.out.join(format!("{name}-train.json"))
    }

    pub fn decode(&self, system: &str) -> PathBuf {
        self.out.join("decode").join(format!("{system}.jsonl"))
    }

    pub fn eval(&self, system: &str) -> PathBuf {
        self.out.join("eval").join(format!("{system}.csv"))
    }

    pub fn sweep(&self) -> PathBuf {
        self.out.join("sweep.csv")
    }

    pub fn matched(&self) -> PathBuf {
        self.out.join("matched.csv")
    }

    pub fn stats(&self) -> PathBuf {
        self.out.join("stats.csv")
    }

    pub fn report_md(&self) -> PathBuf {
        self.out.join("report.md")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.out.join("report.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.out.join("manifest.json")
    }

    /// Location-independent name: `data/…`, `ckpt/…`, `out/…`.
    pub fn label(&self, path: &Path) -> String {
        for (role, dir) in [("data", &self.data), ("ckpt", &self.ckpt), ("out", &self.out)] {
            if let Ok(rest) = path.strip_prefix(dir) {
                return format!("{role}/{}", rest.display());
            }
        }
        path.display().to_string()
    }

    pub fn resolve(&self, label: &str) -> PathBuf {
        match label.split_once('/') {
            Some(("data", rest)) => self.data.join(rest),
            Some(("ckpt", rest)) => self.ckpt.join(rest),
            Some(("out", rest)) => self.out.join(rest),
            _ => PathBuf::from(label),
        }
    }

    pub fn hash_files(&self, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        paths.iter().map(|p| Ok((self.label(p), sha256_file(p)?))).collect()
    }
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn sha256_str(s: &str) -> String {
    format!("{:x}", Sha256::digest(s.as_bytes()))
}

// ---- decode files --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub text: String,
    pub log_prob: f64,
    pub slot_error: Option<f64>,
}

/// One decoded MR: the chosen output and the pool it was picked from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: usize,
    pub mr: MeaningRepresentation,
    pub output: String,
    pub pool: Vec<PoolEntry>,
    pub fallbacks: usize,
}

pub fn write_decode_file(path: &Path, records: &[DecodeRecord]) -> Result<()> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_decode_file(path: &Path) -> Result<Vec<DecodeRecord>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

// ---- evaluation reports ----------------------------------------------------

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    w.write_record(report.values().iter().map(|v| v.to_string()))?;
    w.flush()?;
    Ok(())
}

pub fn read_eval_csv(path: &Path) -> Result<EvalReport> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = r.headers()?.clone();
    if header.iter().ne(REPORT_COLUMNS) {
        bail!("{}: unexpected columns {:?}", path.display(), header);
    }
    let row = r
        .records()
        .next()
        .ok_or_else(|| anyhow!("{}: no data row", path.display()))??;
    let mut v = [0.0; 7];
    for (slot, field) in v.iter_mut().zip(row.iter()) {
        *slot = field.parse()?;
    }
    Ok(EvalReport::from_values(v))
}

// ---- manifest ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage's settings and input hashes.
    pub key: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Seeds and content hashes of everything a run produced. Written without
/// timestamps so a repeated run leaves it byte-identical.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self)? + "\n";
        if fs::read_to_string(path).ok().as_deref() == Some(text.as_str()) {
            return Ok(());
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// True when `stage` ran with this key and its outputs are untouched.
    pub fn is_current(&self, stage: &str, key: &str, layout: &Layout) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.key == key
            && rec
                .outputs
                .iter()
                .all(|(p, h)| sha256_file(&layout.resolve(p)).map(|x| &x == h).unwrap_or(false))
    }
}
