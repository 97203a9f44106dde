use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use divdec_core::decoding::SamplingMode;
use divdec_core::imitation::Framework;

/// Everything a pipeline run needs. Stored on disk as flat `key = value`
/// lines; `#` starts a comment, list values are comma separated.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Built-in grammar when unset.
    pub grammar: Option<PathBuf>,
    pub seed: u64,
    pub sizes: (usize, usize, usize),

    pub gen_epochs: usize,
    pub lm_epochs: usize,
    pub learning_rate: f64,
    pub clip: f64,
    pub patience: usize,

    pub frameworks: Vec<Framework>,
    pub il_iterations: usize,
    pub beta: f64,
    pub subsample: f64,
    pub rollout_m: usize,
    pub expert_n: usize,
    pub meta_hidden: usize,
    pub meta_epochs: usize,
    pub meta_learning_rate: f64,

    pub max_len: usize,
    pub beam_width: usize,
    pub mmi_lambda: f64,
    pub mmi_g: usize,
    pub k_grid: Vec<usize>,
    pub p_grid: Vec<f64>,
    pub modes: Vec<SamplingMode>,
    pub match_tolerance: f64,
    pub match_iterations: usize,

    pub run_sweep: bool,
    pub run_stats: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: "run/data".into(),
            checkpoint_dir: "run/ckpt".into(),
            output_dir: "run/out".into(),
            grammar: None,
            seed: 7,
            sizes: (3000, 300, 300),
            gen_epochs: 10,
            lm_epochs: 10,
            learning_rate: 0.005,
            clip: 0.5,
            patience: 6,
            frameworks: vec![Framework::Exact, Framework::Dagger, Framework::Lols],
            il_iterations: 3,
            beta: 0.1,
            subsample: 0.1,
            rollout_m: 5,
            expert_n: 10,
            meta_hidden: 64,
            meta_epochs: 10,
            meta_learning_rate: 0.05,
            max_len: 40,
            beam_width: 10,
            mmi_lambda: 0.5,
            mmi_g: 5,
            k_grid: (1..=10).collect(),
            p_grid: (2..=19).map(|i| i as f64 * 0.05).collect(),
            modes: vec![SamplingMode::Uniform, SamplingMode::Probabilistic],
            match_tolerance: 0.005,
            match_iterations: 12,
            run_sweep: true,
            run_stats: true,
        }
    }
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow!("`{s}`: {e}")))
        .collect()
}

fn one<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("`{v}`: {e}"))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses `key = value` lines on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", no + 1))?;
            cfg.set(k.trim(), v.trim()).with_context(|| format!("line {}", no + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_kv(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = v.into(),
            "checkpoint_dir" => self.checkpoint_dir = v.into(),
            "output_dir" => self.output_dir = v.into(),
            "grammar" => self.grammar = if v.is_empty() { None } else { Some(v.into()) },
            "seed" => self.seed = one(v)?,
            "sizes" => {
                let s: Vec<usize> = list(v)?;
                if s.len() != 3 {
                    bail!("sizes needs train,val,test");
                }
                self.sizes = (s[0], s[1], s[2]);
            }
            "gen_epochs" => self.gen_epochs = one(v)?,
            "lm_epochs" => self.lm_epochs = one(v)?,
            "learning_rate" => self.learning_rate = one(v)?,
            "clip" => self.clip = one(v)?,
            "patience" => self.patience = one(v)?,
            "frameworks" => self.frameworks = list(v)?,
            "il_iterations" => self.il_iterations = one(v)?,
            "beta" => self.beta = one(v)?,
            "subsample" => self.subsample = one(v)?,
            "rollout_m" => self.rollout_m = one(v)?,
            "expert_n" => self.expert_n = one(v)?,
            "meta_hidden" => self.meta_hidden = one(v)?,
            "meta_epochs" => self.meta_epochs = one(v)?,
            "meta_learning_rate" => self.meta_learning_rate = one(v)?,
            "max_len" => self.max_len = one(v)?,
            "beam_width" => self.beam_width = one(v)?,
            "mmi_lambda" => self.mmi_lambda = one(v)?,
            "mmi_g" => self.mmi_g = one(v)?,
            "k_grid" => self.k_grid = list(v)?,
            "p_grid" => self.p_grid = list(v)?,
            "modes" => self.modes = list(v)?,
            "match_tolerance" => self.match_tolerance = one(v)?,
            "match_iterations" => self.match_iterations = one(v)?,
            "run_sweep" => self.run_sweep = one(v)?,
            "run_stats" => self.run_stats = one(v)?,
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_grid.is_empty() || self.p_grid.is_empty() || self.modes.is_empty() {
            bail!("strategy grids must be non-empty");
        }
        if self.k_grid.contains(&0) {
            bail!("k must be at least 1");
        }
        if self.p_grid.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            bail!("p values must lie in (0, 1]");
        }
        if self.sizes.0 == 0 || self.sizes.2 < 2 {
            bail!("need a non-empty train split and at least two test instances");
        }
        if !(self.match_tolerance > 0.0) || self.match_iterations == 0 {
            bail!("match tolerance and iteration budget must be positive");
        }
        Ok(())
    }

    /// Canonical form without the directory keys, so equal experiments in
    /// different locations share a fingerprint.
    pub fn fingerprint(&self) -> String {
        self.to_kv()
            .lines()
            .filter(|l| !["data_dir", "checkpoint_dir", "output_dir"].iter().any(|k| l.starts_with(k)))
            .map(|l| format!("{l}\n"))
            .collect()
    }

    /// Canonical text form; every key is written so a config round-trips.
    pub fn to_kv(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        let p = |x: &Path| x.display().to_string();
        kv.insert("data_dir", p(&self.data_dir));
        kv.insert("checkpoint_dir", p(&self.checkpoint_dir));
        kv.insert("output_dir", p(&self.output_dir));
        kv.insert("grammar", self.grammar.as_deref().map(p).unwrap_or_default());
        kv.insert("seed", self.seed.to_string());
        kv.insert("sizes", format!("{},{},{}", self.sizes.0, self.sizes.1, self.sizes.2));
        kv.insert("gen_epochs", self.gen_epochs.to_string());
        kv.insert("lm_epochs", self.lm_epochs.to_string());
        kv.insert("learning_rate", self.learning_rate.to_string());
        kv.insert("clip", self.clip.to_string());
        kv.insert("patience", self.patience.to_string());
        kv.insert("frameworks", join(&self.frameworks));
        kv.insert("il_iterations", self.il_iterations.to_string());
        kv.insert("beta", self.beta.to_string());
        kv.insert("subsample", self.subsample.to_string());
        kv.insert("rollout_m", self.rollout_m.to_string());
        kv.insert("expert_n", self.expert_n.to_string());
        kv.insert("meta_hidden", self.meta_hidden.to_string());
        kv.insert("meta_epochs", self.meta_epochs.to_string());
        kv.insert("meta_learning_rate", self.meta_learning_rate.to_string());
        kv.insert("max_len", self.max_len.to_string());
        kv.insert("beam_width", self.beam_width.to_string());
        kv.insert("mmi_lambda", self.mmi_lambda.to_string());
        kv.insert("mmi_g", self.mmi_g.to_string());
        kv.insert("k_grid", join(&self.k_grid));
        kv.insert("p_grid", join(&self.p_grid));
        kv.insert("modes", join(&self.modes));
        kv.insert("match_tolerance", self.match_tolerance.to_string());
        kv.insert("match_iterations", self.match_iterations.to_string());
        kv.insert("run_sweep", self.run_sweep.to_string());
        kv.insert("run_stats", self.run_stats.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
