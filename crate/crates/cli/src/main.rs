use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use demoselect_core::checkpoint::Stage;
use demoselect_core::metrics;
use demoselect_core::pipeline::{self, MethodName, Session, TaskData};
use demoselect_core::{Checkpoint, Error, Result, RewardSource, RunConfig};

mod plot;
mod settings;

use plot::Series;

#[derive(Parser, Debug)]
#[command(name = "demoselect", version, about = "Train and evaluate sequential demonstration retrievers")]
struct Cli {
    /// TOML config layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base hyperparameters: `full` (default hyperparameters) or `toy` (desk scale).
    #[arg(long, global = true, default_value = "full")]
    preset: String,
    /// Directory for task files, checkpoint, CSVs and plots.
    #[arg(long, global = true, env = "DEMOSELECT_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set ppo.beta=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Task generation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Candidate-tree widths, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// KL coefficient.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// PPO steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Skip SVG plots.
    #[arg(long, global = true)]
    no_plots: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus and query splits as JSONL.
    GenTask,
    /// Write a fresh checkpoint whose head equals the demo embeddings.
    Init,
    /// Stage one: fit the reward head on candidate-tree preferences.
    TrainReward {
        /// Write the checkpoint here instead of overwriting the input.
        #[arg(long)]
        save_as: Option<PathBuf>,
    },
    /// Stage two: PPO on the retrieval head.
    TrainPpo {
        /// Reward episodes with raw backend log-probabilities instead of the reward head.
        #[arg(long)]
        no_reward_model: bool,
        #[arg(long)]
        save_as: Option<PathBuf>,
    },
    /// Compare selection methods on the test queries.
    Eval {
        #[arg(long, value_delimiter = ',', default_value = "random,bm25,initial,trained,oracle")]
        methods: Vec<String>,
    },
    /// Exhaustive best tuple for every test query.
    Oracle,
    /// Retrain at several k and record candidate count, cost and accuracy.
    SweepK {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        ks: Vec<usize>,
    },
}

impl Cli {
    fn config(&self) -> Result<(RunConfig, PathBuf)> {
        let mut sets = self.overrides.clone();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push(format!("{k}={v}"));
            }
        };
        push("task.seed", self.seed.map(|v| v.to_string()));
        push("k", self.k.map(|v| v.to_string()));
        push("widths", self.widths.as_ref().map(|w| format!("{w:?}")));
        push("ppo.beta", self.beta.map(|v| format!("{v:e}")));
        push("ppo.total_steps", self.steps.map(|v| v.to_string()));
        if let Some(c) = &self.checkpoint {
            sets.push(format!("paths.checkpoint={:?}", c.display().to_string()));
        }
        let mut cfg = settings::build(&self.preset, self.config.as_deref(), &sets)?;
        let dir = settings::resolve_paths(&mut cfg, self.out_dir.clone());
        cfg.validate()?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        Ok((cfg, dir))
    }
}

fn checkpoint_path(cfg: &RunConfig) -> &Path {
    cfg.paths.checkpoint.as_deref().expect("paths resolved")
}

fn require_file(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} not found; {hint}", path.display())))
    }
}

fn session(cfg: &RunConfig) -> Result<Session> {
    let p = &cfg.paths;
    for path in [&p.corpus, &p.train_queries, &p.test_queries].into_iter().flatten() {
        require_file(path, "run gen-task first")?;
    }
    Session::new(cfg.clone(), TaskData::load(cfg)?)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = checkpoint_path(cfg);
    require_file(path, "run init first")?;
    Checkpoint::load(path)
}

fn save_checkpoint(ckpt: &mut Checkpoint, cfg: &RunConfig, save_as: Option<&Path>) -> Result<PathBuf> {
    ckpt.config = cfg.clone();
    let path = save_as.unwrap_or_else(|| checkpoint_path(cfg)).to_path_buf();
    ckpt.save(&path)?;
    Ok(path)
}

fn run(cli: &Cli) -> Result<()> {
    let (cfg, dir) = cli.config()?;
    let hash = cfg.hash();
    let plots = !cli.no_plots;
    match &cli.cmd {
        Command::GenTask => {
            let data = TaskData::write(&cfg)?;
            println!(
                "wrote {} demonstrations, {} train and {} test queries to {}",
                data.corpus.len(),
                data.train.len(),
                data.test.len(),
                dir.display()
            );
        }
        Command::Init => {
            let s = session(&cfg)?;
            let mut ckpt = s.init_checkpoint()?;
            let path = save_checkpoint(&mut ckpt, &cfg, None)?;
            println!("initialized {}", path.display());
        }
        Command::TrainReward { save_as } => {
            let s = session(&cfg)?;
            let mut ckpt = load_checkpoint(&cfg)?;
            let report = s.train_reward(&mut ckpt)?;
            let csv = dir.join("reward_history.csv");
            pipeline::write_history_csv(&csv, &report.history, &hash)?;
            if plots {
                let h = &report.history;
                let pts = |f: fn(&pipeline_types::Epoch) -> f64| h.iter().map(|e| (e.epoch as f64, f(e))).collect();
                plot::panels(
                    &dir.join("reward_history.svg"),
                    "reward head training",
                    "epoch",
                    &[
                        Series {
                            label: "mean Bradley-Terry loss",
                            points: pts(|e| e.loss),
                        },
                        Series {
                            label: "held-out pair accuracy",
                            points: pts(|e| e.holdout_acc),
                        },
                    ],
                )?;
            }
            let path = save_checkpoint(&mut ckpt, &cfg, save_as.as_deref())?;
            let last = report.history.last().expect("at least one epoch");
            println!(
                "pairs train={} holdout={} final_loss={:.6} holdout_acc={:.4} checkpoint={}",
                report.train_pairs,
                report.holdout_pairs,
                last.loss,
                last.holdout_acc,
                path.display()
            );
        }
        Command::TrainPpo {
            no_reward_model,
            save_as,
        } => {
            let s = session(&cfg)?;
            let mut ckpt = load_checkpoint(&cfg)?;
            let source = if *no_reward_model {
                RewardSource::RawLogprob
            } else {
                cfg.reward_source()
            };
            let curve = s.train_policy(&mut ckpt, source)?;
            let stem = match source {
                RewardSource::RewardHead => "ppo_curves",
                RewardSource::RawLogprob => "ppo_curves_raw",
            };
            pipeline::write_curve_csv(&dir.join(format!("{stem}.csv")), &curve, &hash)?;
            if plots {
                let pts = |f: fn(&pipeline_types::Curve) -> Option<f64>| {
                    curve.iter().filter_map(|c| f(c).map(|v| (c.step as f64, v))).collect()
                };
                plot::panels(
                    &dir.join(format!("{stem}.svg")),
                    "policy training",
                    "step",
                    &[
                        Series {
                            label: "mean terminal reward",
                            points: pts(|c| Some(c.mean_reward)),
                        },
                        Series {
                            label: "mean per-step KL to reference",
                            points: pts(|c| Some(c.mean_kl)),
                        },
                        Series {
                            label: "dev greedy accuracy",
                            points: pts(|c| c.dev_accuracy),
                        },
                    ],
                )?;
            }
            let path = save_checkpoint(&mut ckpt, &cfg, save_as.as_deref())?;
            let last = curve.last();
            println!(
                "steps={} final_reward={:.4} final_kl={:.4} checkpoint={}",
                curve.len(),
                last.map_or(f64::NAN, |c| c.mean_reward),
                last.map_or(f64::NAN, |c| c.mean_kl),
                path.display()
            );
        }
        Command::Eval { methods } => {
            let methods = methods.iter().map(|m| m.parse()).collect::<Result<Vec<MethodName>>>()?;
            let s = session(&cfg)?;
            let ckpt = load_checkpoint(&cfg)?;
            if ckpt.stage != Stage::PolicyTrained && methods.contains(&MethodName::Trained) {
                log::warn!("checkpoint has not been through train-ppo; `trained` equals `initial`");
            }
            let reports = s.evaluate(&ckpt, &methods)?;
            metrics::write_report_csv(&dir.join("eval.csv"), &reports, &hash)?;
            metrics::write_detail_csv(&dir.join("eval_detail.csv"), &reports, &hash)?;
            print!("{}", metrics::format_table(&reports));
        }
        Command::Oracle => {
            let s = session(&cfg)?;
            let rows = pipeline::oracle_tuples(&s.backend, &s.data.test, cfg.k)?;
            let path = dir.join("oracle.csv");
            pipeline::write_oracle_csv(&path, &rows, &hash)?;
            let mean = rows.iter().map(|r| r.gold_logprob.exp()).sum::<f64>() / rows.len().max(1) as f64;
            println!("queries={} mean_gold_prob={:.6} file={}", rows.len(), mean, path.display());
        }
        Command::SweepK { ks } => {
            let s = session(&cfg)?;
            let rows = pipeline::sweep_k(&cfg, &s.data, ks)?;
            pipeline::write_sweep_csv(&dir.join("sweep_k.csv"), &rows, &hash)?;
            println!("k\tm\tscore_calls\tstage1_s\taccuracy");
            for r in &rows {
                println!("{}\t{}\t{}\t{:.4}\t{:.4}", r.k, r.m, r.score_calls, r.stage1_seconds, r.accuracy);
            }
        }
    }
    Ok(())
}

mod pipeline_types {
    pub use demoselect_core::ppo::CurvePoint as Curve;
    pub use demoselect_core::reward::EpochStats as Epoch;
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            // Keep usage errors to one line like every other failure.
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error kind=usage message={}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
