use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use divdec_core::corpus::{CorpusBundle, Dataset, Split};
use divdec_core::decoding::{NucleusRule, SamplingMode, Strategy};
use divdec_core::imitation::Framework;
use divdec_harness::artifacts::{read_decode_file, write_decode_file, write_eval_csv, Layout};
use divdec_harness::config::ExperimentConfig;
use divdec_harness::pipeline::{Pipeline, StageError};
use divdec_harness::run::{self, Models};
use divdec_harness::sweep::{self, NucleusCache};
use divdec_harness::report;

#[derive(Parser)]
#[command(name = "divdec", about = "Safe diverse decoding for concept-to-text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Seed for every random choice; required.
    #[arg(long)]
    seed: u64,
    /// Flat key = value experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grammar: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// train,val,test sizes
        #[arg(long, default_value = "3000,300,300")]
        sizes: String,
    },
    /// Train the conditioned generator.
    TrainGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unconditioned language model used by MMI.
    TrainLm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the meta-classifier by imitation learning.
    TrainMcd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "exact")]
        framework: Framework,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        subsample: Option<f64>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Iteration report CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode a dataset split.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long, default_value = "uniform")]
        mode: SamplingMode,
        /// Nucleus set rule: `reach` (mass ≥ p) or `within` (mass ≤ p).
        #[arg(long, default_value = "reach")]
        rule: String,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        g: Option<usize>,
        /// Sample only the least probable safe word.
        #[arg(long)]
        edge_case: bool,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a decode file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        outputs: PathBuf,
        /// Dataset holding the references.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Top-k / nucleus grid over the config's ranges.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Find the nucleus p whose 1 - Self-BLEU matches a target.
    MatchDiversity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target: f64,
        #[arg(long, default_value = "uniform")]
        mode: SamplingMode,
    },
    /// Rank-probability statistics of the generator on the test split.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate the evaluation reports of a run.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run every stage, skipping those whose artifacts are current.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of stages.
        #[arg(long)]
        stages: Option<String>,
    },
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|source| {
        StageError {
            stage: name.to_string(),
            source,
        }
        .into()
    })
}

fn parse_sizes(s: &str) -> Result<(usize, usize, usize)> {
    let v: Vec<usize> = s.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(anyhow!("--sizes needs three comma-separated counts")),
    }
}

fn split_of(data: &Path, name: &str) -> Result<(CorpusBundle, Split)> {
    let bundle = CorpusBundle::load(data)?;
    let split = match name {
        "train" => Split::Train,
        "val" | "validation" => Split::Validation,
        "test" => Split::Test,
        _ => return Err(anyhow!("unknown split `{name}`")),
    };
    Ok((bundle, split))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, grammar, out, sizes } => {
            let sizes = parse_sizes(&sizes)?;
            stage("gen-data", run::gen_data(grammar.as_deref(), common.seed, sizes, &out).map(|_| ()))
        }
        Command::TrainGen { common, data, out } => {
            let cfg = common.config()?;
            stage("train-gen", (|| {
                let bundle = CorpusBundle::load(&data)?;
                let tc = run::train_config(&cfg, cfg.gen_epochs, cfg.seed);
                run::train_gen(&bundle, &tc, &out, &out.with_extension("log.json")).map(|_| ())
            })())
        }
        Command::TrainLm { common, data, out } => {
            let cfg = common.config()?;
            stage("train-lm", (|| {
                let bundle = CorpusBundle::load(&data)?;
                let tc = run::train_config(&cfg, cfg.lm_epochs, cfg.seed);
                run::train_language_model(&bundle, &tc, &out, &out.with_extension("log.json")).map(|_| ())
            })())
        }
        Command::TrainMcd { common, data, ckpt, framework, iterations, beta, subsample, m, n, out, log } => {
            let mut cfg = common.config()?;
            cfg.il_iterations = iterations.unwrap_or(cfg.il_iterations);
            cfg.beta = beta.unwrap_or(cfg.beta);
            cfg.subsample = subsample.unwrap_or(cfg.subsample);
            cfg.rollout_m = m.unwrap_or(cfg.rollout_m);
            cfg.expert_n = n.unwrap_or(cfg.expert_n);
            let log = log.unwrap_or_else(|| out.with_extension("csv"));
            stage("train-mcd", (|| {
                let bundle = CorpusBundle::load(&data)?;
                let g = run::load_generator(&ckpt)?;
                run::train_mcd(&bundle, &g, &run::il_config(&cfg, framework), &out, &log).map(|_| ())
            })())
        }
        Command::Decode {
            common, data, split, strategy, k, p, mode, rule, width, lambda, g, edge_case, cap, ckpt, lm, meta, out,
        } => {
            let cfg = common.config()?;
            let need = |name: &str, v: Option<usize>| v.ok_or_else(|| anyhow!("--strategy {strategy} needs --{name}"));
            let width = width.unwrap_or(cfg.beam_width);
            let strategy = match strategy.as_str() {
                "greedy" => Strategy::Greedy,
                "beam" => Strategy::Beam { width },
                "topk" => Strategy::TopK { k: need("k", k)?, mode },
                "nucleus" => Strategy::Nucleus {
                    p: p.ok_or_else(|| anyhow!("--strategy nucleus needs --p"))?,
                    mode,
                    rule: match rule.as_str() {
                        "reach" => NucleusRule::Reach,
                        "within" => NucleusRule::Within,
                        _ => return Err(anyhow!("unknown nucleus rule `{rule}`")),
                    },
                },
                "mmi" => Strategy::Mmi {
                    lambda: lambda.unwrap_or(cfg.mmi_lambda),
                    g: g.unwrap_or(cfg.mmi_g),
                    width,
                },
                "mcd" => Strategy::Mcd { edge_case, cap },
                other => return Err(anyhow!("unknown strategy `{other}`")),
            };
            let dc = run::decode_config(&cfg, strategy);
            dc.validate()?;
            stage("decode", (|| {
                let (bundle, split) = split_of(&data, &split)?;
                let ds: &Dataset = match split {
                    Split::Train => &bundle.train,
                    Split::Validation => &bundle.val,
                    Split::Test => &bundle.test,
                };
                let generator = run::load_generator(&ckpt)?;
                let lm = lm.as_deref().map(run::load_generator).transpose()?;
                let meta = meta.as_deref().map(run::load_meta).transpose()?;
                let models = Models {
                    generator: &generator,
                    lm: lm.as_ref(),
                    meta: meta.as_ref(),
                };
                let recs = run::decode_dataset(&bundle, ds, &models, &dc)?;
                write_decode_file(&out, &recs)
            })())
        }
        Command::Evaluate { common: _, outputs, refs, report } => stage("evaluate", (|| {
            let recs = read_decode_file(&outputs)?;
            let ds = Dataset::load(&refs, Split::Test)?;
            let rep = run::evaluate_records(&recs, &ds)?;
            write_eval_csv(&report, &rep)?;
            println!("{}", divdec_core::metrics::REPORT_COLUMNS.join(","));
            println!("{}", rep.values().map(|v| v.to_string()).join(","));
            Ok(())
        })()),
        Command::Sweep { common, out } => {
            let cfg = common.config()?;
            let l = Layout::new(&cfg);
            stage("sweep", (|| {
                let bundle = CorpusBundle::load(&l.data)?;
                let generator = run::load_generator(&l.generator())?;
                let models = Models { generator: &generator, lm: None, meta: None };
                let rows = sweep::run_sweep(&cfg, &bundle, &models)?;
                sweep::write_sweep_csv(&out.unwrap_or_else(|| l.sweep()), &rows)
            })())
        }
        Command::MatchDiversity { common, target, mode } => {
            let cfg = common.config()?;
            let l = Layout::new(&cfg);
            stage("match-diversity", (|| {
                let bundle = CorpusBundle::load(&l.data)?;
                let generator = run::load_generator(&l.generator())?;
                let models = Models { generator: &generator, lm: None, meta: None };
                let (m, rep) = sweep::match_nucleus(&cfg, &bundle, &models, mode, target, &mut NucleusCache::new())?;
                println!("p={} achieved={} target={} evaluations={} bleu={}", m.p, m.achieved, m.target, m.evaluations, rep.bleu4);
                Ok(())
            })())
        }
        Command::Stats { common, out } => {
            let cfg = common.config()?;
            let l = Layout::new(&cfg);
            stage("stats", (|| {
                let bundle = CorpusBundle::load(&l.data)?;
                let generator = run::load_generator(&l.generator())?;
                let s = run::test_stats(&bundle, &generator, cfg.max_len)?;
                s.write_csv(&out.unwrap_or_else(|| l.stats()))?;
                println!("mean_top1={} strictly_decreasing={}", s.mean_top1(), s.strictly_decreasing());
                Ok(())
            })())
        }
        Command::Report { common } => {
            let cfg = common.config()?;
            let l = Layout::new(&cfg);
            stage("report", (|| {
                let rows = report::collect(&l)?;
                report::write(&rows, &l.report_md(), &l.report_csv())?;
                print!("{}", report::markdown(&rows));
                Ok(())
            })())
        }
        Command::Pipeline { common, stages } => {
            let cfg = common.config()?;
            let mut p = Pipeline::new(cfg)?;
            if let Some(s) = stages {
                p = p.only(s.split(',').map(|x| x.trim().to_string()).collect())?;
            }
            p.run()?;
            for o in &p.outcomes {
                println!("{:<28} {}", o.name, if o.skipped { "skipped" } else { "done" });
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<StageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
