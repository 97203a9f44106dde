use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use anyhow::{anyhow, Result};
use divdec_core::corpus::CorpusBundle;
use divdec_core::decoding::{SamplingMode, Strategy};
use divdec_core::generator::Generator;
use divdec_core::imitation::Framework;
use divdec_core::metaclassifier::MetaParams;
use divdec_core::metrics::EvalReport;

use crate::artifacts::{
    read_decode_file, read_eval_csv, sha256_file, sha256_str, write_decode_file, write_eval_csv, Layout,
    Manifest, StageRecord,
};
use crate::config::ExperimentConfig;
use crate::report;
use crate::run::{self, Models};
use crate::sweep::{self, SweepRow, SweepStrategy};

/// Stage families in execution order.
pub const STAGES: [&str; 10] = [
    "gen-data",
    "train-gen",
    "train-lm",
    "train-mcd",
    "decode",
    "evaluate",
    "sweep",
    "match-diversity",
    "stats",
    "report",
];

/// A failure attributed to the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: String,
    pub source: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {:#}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub name: String,
    pub skipped: bool,
}

/// Systems decoded by the `decode` stage for this config.
pub fn fixed_systems(cfg: &ExperimentConfig) -> Vec<String> {
    let mut s: Vec<String> = ["greedy", "beam", "mmi"].iter().map(|s| s.to_string()).collect();
    s.extend(cfg.frameworks.iter().map(|f| format!("mcd-{f}")));
    s
}

pub fn system_strategy(cfg: &ExperimentConfig, system: &str) -> Result<Strategy> {
    Ok(match system {
        "greedy" => Strategy::Greedy,
        "beam" => Strategy::Beam { width: cfg.beam_width },
        "mmi" => Strategy::Mmi {
            lambda: cfg.mmi_lambda,
            g: cfg.mmi_g,
            width: cfg.beam_width,
        },
        s if s.starts_with("mcd-") => Strategy::Mcd {
            edge_case: false,
            cap: None,
        },
        _ => return Err(anyhow!("unknown system `{system}`")),
    })
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pub manifest: Manifest,
    pub outcomes: Vec<StageOutcome>,
    only: Option<Vec<String>>,
    bundle: Option<CorpusBundle>,
    generator: Option<Generator>,
    lm: Option<Generator>,
    metas: HashMap<Framework, MetaParams>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut manifest = Manifest::load_or_default(&layout.manifest())?;
        manifest.seed = cfg.seed;
        manifest.config = sha256_str(&cfg.fingerprint());
        Ok(Pipeline {
            cfg,
            layout,
            manifest,
            outcomes: Vec::new(),
            only: None,
            bundle: None,
            generator: None,
            lm: None,
            metas: HashMap::new(),
        })
    }

    /// Restricts the run to the given stage families.
    pub fn only(mut self, stages: Vec<String>) -> Result<Self> {
        if let Some(bad) = stages.iter().find(|s| !STAGES.contains(&s.as_str())) {
            return Err(anyhow!("unknown stage `{bad}`"));
        }
        self.only = Some(stages);
        Ok(self)
    }

    fn enabled(&self, family: &str) -> bool {
        self.only.as_ref().map_or(true, |o| o.iter().any(|s| s == family))
    }

    /// Runs `body` unless the manifest shows the stage already ran with the
    /// same settings and inputs and its outputs are unchanged.
    fn stage<F>(&mut self, name: &str, settings: String, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>, body: F) -> Result<(), StageError>
    where
        F: FnOnce(&mut Self) -> Result<()>,
    {
        let fail = |source: anyhow::Error| StageError {
            stage: name.to_string(),
            source,
        };
        let in_hashes = self.layout.hash_files(&inputs).map_err(fail)?;
        let mut key_text = settings;
        for (p, h) in &in_hashes {
            key_text.push_str(&format!("\n{p}={h}"));
        }
        let key = sha256_str(&key_text);
        let current = self.manifest.is_current(name, &key, &self.layout) && outputs.iter().all(|p| p.exists());
        if !current {
            body(self).map_err(fail)?;
            let rec = StageRecord {
                key,
                seed: self.cfg.seed,
                inputs: in_hashes,
                outputs: self.layout.hash_files(&outputs).map_err(fail)?,
            };
            self.manifest.stages.insert(name.to_string(), rec);
            self.manifest.save(&self.layout.manifest()).map_err(fail)?;
        }
        self.outcomes.push(StageOutcome {
            name: name.to_string(),
            skipped: current,
        });
        Ok(())
    }

    fn bundle(&mut self) -> Result<&CorpusBundle> {
        if self.bundle.is_none() {
            self.bundle = Some(CorpusBundle::load(&self.layout.data)?);
        }
        Ok(self.bundle.as_ref().unwrap())
    }

    fn generator(&mut self) -> Result<&Generator> {
        if self.generator.is_none() {
            self.generator = Some(run::load_generator(&self.layout.generator())?);
        }
        Ok(self.generator.as_ref().unwrap())
    }

    fn ensure_models(&mut self, system: &str) -> Result<()> {
        self.bundle()?;
        self.generator()?;
        if system == "mmi" && self.lm.is_none() {
            self.lm = Some(run::load_generator(&self.layout.lm())?);
        }
        if let Some(fw) = system.strip_prefix("mcd-") {
            let fw: Framework = fw.parse()?;
            if !self.metas.contains_key(&fw) {
                self.metas.insert(fw, run::load_meta(&self.layout.meta(fw))?);
            }
        }
        Ok(())
    }

    fn models(&self, system: &str) -> Models<'_> {
        let meta = system
            .strip_prefix("mcd-")
            .and_then(|f| f.parse::<Framework>().ok())
            .and_then(|f| self.metas.get(&f));
        Models {
            generator: self.generator.as_ref().expect("generator loaded"),
            lm: self.lm.as_ref(),
            meta,
        }
    }

    fn decode_inputs(&self, system: &str) -> Vec<PathBuf> {
        let mut v = self.layout.dataset_files();
        v.push(self.layout.generator());
        if system == "mmi" {
            v.push(self.layout.lm());
        }
        if let Some(fw) = system.strip_prefix("mcd-").and_then(|f| f.parse::<Framework>().ok()) {
            v.push(self.layout.meta(fw));
        }
        v
    }

    pub fn run(&mut self) -> Result<(), StageError> {
        let cfg = self.cfg.clone();
        let l = self.layout.clone();
        let data = l.dataset_files();

        if self.enabled("gen-data") {
            let mut inputs = Vec::new();
            inputs.extend(cfg.grammar.clone());
            let settings = format!("seed={} sizes={:?}", cfg.seed, cfg.sizes);
            self.stage("gen-data", settings, inputs, data.clone(), |p| {
                p.bundle = Some(run::gen_data(cfg.grammar.as_deref(), cfg.seed, cfg.sizes, &l.data)?);
                Ok(())
            })?;
        }

        if self.enabled("train-gen") {
            let tc = run::train_config(&cfg, cfg.gen_epochs, cfg.seed);
            let outs = vec![l.generator(), l.train_log("generator")];
            self.stage("train-gen", format!("{tc:?}"), data.clone(), outs, |p| {
                let g = run::train_gen(p.bundle()?, &tc, &l.generator(), &l.train_log("generator"))?;
                p.generator = Some(g);
                Ok(())
            })?;
        }

        if self.enabled("train-lm") {
            let tc = run::train_config(&cfg, cfg.lm_epochs, cfg.seed);
            let outs = vec![l.lm(), l.train_log("lm")];
            self.stage("train-lm", format!("{tc:?}"), data.clone(), outs, |p| {
                p.lm = Some(run::train_language_model(p.bundle()?, &tc, &l.lm(), &l.train_log("lm"))?);
                Ok(())
            })?;
        }

        if self.enabled("train-mcd") {
            for &fw in &cfg.frameworks {
                let il = run::il_config(&cfg, fw);
                let mut inputs = data.clone();
                inputs.push(l.generator());
                let outs = vec![l.meta(fw), l.il_log(fw)];
                self.stage(&format!("train-mcd:{fw}"), format!("{il:?}"), inputs, outs, |p| {
                    p.bundle()?;
                    p.generator()?;
                    let out = run::train_mcd(
                        p.bundle.as_ref().unwrap(),
                        p.generator.as_ref().unwrap(),
                        &il,
                        &l.meta(fw),
                        &l.il_log(fw),
                    )?;
                    p.metas.insert(fw, out.meta);
                    Ok(())
                })?;
            }
        }

        if self.enabled("decode") {
            for sys in fixed_systems(&cfg) {
                let dc = run::decode_config(&cfg, system_strategy(&cfg, &sys).map_err(|e| StageError {
                    stage: "decode".into(),
                    source: e,
                })?);
                let inputs = self.decode_inputs(&sys);
                self.stage(&format!("decode:{sys}"), format!("{dc:?}"), inputs, vec![l.decode(&sys)], |p| {
                    p.ensure_models(&sys)?;
                    let recs = run::decode_dataset(p.bundle.as_ref().unwrap(), &p.bundle.as_ref().unwrap().test, &p.models(&sys), &dc)?;
                    write_decode_file(&l.decode(&sys), &recs)
                })?;
            }
        }

        if self.enabled("evaluate") {
            for sys in fixed_systems(&cfg) {
                let inputs = vec![l.decode(&sys), l.data.join("test.jsonl")];
                self.stage(&format!("evaluate:{sys}"), String::new(), inputs, vec![l.eval(&sys)], |p| {
                    let recs = read_decode_file(&l.decode(&sys))?;
                    let rep = run::evaluate_records(&recs, &p.bundle()?.test)?;
                    write_eval_csv(&l.eval(&sys), &rep)
                })?;
            }
        }

        let mut model_inputs = data.clone();
        model_inputs.push(l.generator());

        if cfg.run_sweep && self.enabled("sweep") {
            let settings = format!(
                "k={:?} p={:?} modes={:?} max_len={} seed={}",
                cfg.k_grid, cfg.p_grid, cfg.modes, cfg.max_len, cfg.seed
            );
            self.stage("sweep", settings, model_inputs.clone(), vec![l.sweep()], |p| {
                p.ensure_models("greedy")?;
                let rows = sweep::run_sweep(&p.cfg, p.bundle.as_ref().unwrap(), &p.models("greedy"))?;
                sweep::write_sweep_csv(&l.sweep(), &rows)
            })?;
        }

        if cfg.run_sweep && self.enabled("match-diversity") {
            let mcd = cfg.frameworks.first().map(|f| format!("mcd-{f}"));
            let mut inputs = model_inputs.clone();
            inputs.push(l.sweep());
            inputs.extend(mcd.as_ref().map(|s| l.eval(s)));
            let mut outs = vec![l.matched(), l.decode("topk-best"), l.eval("topk-best")];
            if mcd.is_some() {
                outs.extend([l.decode("nucleus-matched"), l.eval("nucleus-matched")]);
            }
            let settings = format!("tol={} iters={} seed={}", cfg.match_tolerance, cfg.match_iterations, cfg.seed);
            self.stage("match-diversity", settings, inputs, outs, |p| p.match_stage(mcd.as_deref()))?;
        }

        if cfg.run_stats && self.enabled("stats") {
            self.stage("stats", format!("max_len={}", cfg.max_len), model_inputs, vec![l.stats()], |p| {
                p.ensure_models("greedy")?;
                let s = run::test_stats(p.bundle.as_ref().unwrap(), p.generator.as_ref().unwrap(), cfg.max_len)?;
                Ok(s.write_csv(&l.stats())?)
            })?;
        }

        if self.enabled("report") {
            let inputs: Vec<PathBuf> = report::SYSTEMS
                .iter()
                .map(|(_, s)| l.eval(s))
                .filter(|p| p.exists())
                .collect();
            self.stage("report", String::new(), inputs, vec![l.report_md(), l.report_csv()], |_| {
                let rows = report::collect(&l)?;
                report::write(&rows, &l.report_md(), &l.report_csv())
            })?;
        }
        Ok(())
    }

    /// Top-k at its best BLEU, nucleus matched to the first MCD system, and
    /// nucleus matched to every top-k point.
    fn match_stage(&mut self, mcd: Option<&str>) -> Result<()> {
        let l = self.layout.clone();
        let cfg = self.cfg.clone();
        self.ensure_models("greedy")?;
        let rows = sweep::read_sweep_csv(&l.sweep())?;
        let mode = SamplingMode::Uniform;
        let bundle = self.bundle.as_ref().unwrap();
        let models = self.models("greedy");

        let mut cache = HashMap::new();
        let best = best_topk(&rows, mode).ok_or_else(|| anyhow!("sweep has no top-k row with k >= 2"))?;
        let dc = run::decode_config(&cfg, sweep::strategy_for(SweepStrategy::Topk, mode, best.param));
        emit(&l, "topk-best", run::decode_dataset(bundle, &bundle.test, &models, &dc)?, bundle)?;

        if let Some(sys) = mcd {
            let target = read_eval_csv(&l.eval(sys))?.one_minus_self_bleu;
            let (m, _) = sweep::match_nucleus(&cfg, bundle, &models, mode, target, &mut cache)?;
            let dc = run::decode_config(&cfg, sweep::strategy_for(SweepStrategy::Nucleus, mode, m.p));
            emit(&l, "nucleus-matched", run::decode_dataset(bundle, &bundle.test, &models, &dc)?, bundle)?;
        }

        let points = sweep::match_topk_rows(&cfg, bundle, &models, &rows, mode, &mut cache)?;
        sweep::write_matched_csv(&l.matched(), &points)
    }
}

fn emit(l: &Layout, sys: &str, recs: Vec<crate::artifacts::DecodeRecord>, bundle: &CorpusBundle) -> Result<EvalReport> {
    write_decode_file(&l.decode(sys), &recs)?;
    let rep = run::evaluate_records(&recs, &bundle.test)?;
    write_eval_csv(&l.eval(sys), &rep)?;
    Ok(rep)
}

/// The top-k row (k ≥ 2) with the highest BLEU in `mode`.
pub fn best_topk(rows: &[SweepRow], mode: SamplingMode) -> Option<&SweepRow> {
    rows.iter()
        .filter(|r| r.strategy == SweepStrategy::Topk && r.mode == mode && r.param >= 2.0)
        .max_by(|a, b| a.bleu.total_cmp(&b.bleu))
}

/// Content hash of the manifest file, for reproducibility checks.
pub fn manifest_hash(layout: &Layout) -> Result<String> {
    sha256_file(&layout.manifest())
}
