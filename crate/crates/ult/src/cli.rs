//! Command-line interface: training, evaluation, experiment suites,
//! baselines, deploy export and report merging.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::baselines::{
    self, distill_offline, distill_online, distill_two_stage, post_hoc_transfer, train_joint,
    train_ppo, OraclePolicy,
};
use crate::config::Config;
use crate::error::{Result, UltError};
use crate::eval::{
    evaluate, merge_reports, normalize, write_reports_json, EvalMetrics, EvalPolicy,
};
use crate::net::{export_student, load_checkpoint, save_checkpoint, UltNet};
use crate::suites::{ablation_suite, alpha_sweep};
use crate::trainer::Trainer;

#[derive(Parser)]
#[command(
    name = "ult",
    about = "Unified locomotion transformer: joint teacher-student training on a toy legged robot"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train the unified policy and write metrics plus checkpoints.
    Train {
        /// TOML configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output run directory.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the teacher-student mixing rate.
        #[arg(long)]
        alpha: Option<f64>,
        /// Resume from a saved training state (latest.state.json).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint across terrain regimes.
    Eval {
        /// Policy checkpoint (.ultc) or reference policy (.json).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Episode count; defaults to the configured evaluation size.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run the proprioception-only deploy path (the default head).
        #[arg(long)]
        deploy: bool,
        /// Evaluate the privilege-informed teacher head instead.
        #[arg(long)]
        teacher: bool,
        /// Reference metrics (eval.json) to normalize against.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Scheme label used in normalized reports.
        #[arg(long, default_value = "ult")]
        scheme: String,
        /// Directory for eval.json and report.json; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train at several mixing rates and report normalized returns.
    SweepAlpha {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated mixing rates.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.6, 1.0])]
        alphas: Vec<f64>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Reference metrics (eval.json); trains the reference policy when omitted.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Train every loss ablation variant and report normalized returns.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Train a comparison scheme.
    Baseline {
        /// oracle | ppo | joint | offline | online | two-stage | post-hoc
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Saved reference policy (oracle.json); trained fresh when omitted.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Full checkpoint to adapt (post-hoc only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Environment-step budget for distillation and post-hoc transfer.
        #[arg(long)]
        budget: Option<usize>,
        /// Initial imitation weight for the joint scheme.
        #[arg(long, default_value_t = 1.0)]
        w0: f64,
    },
    /// Strip privileged parts from a checkpoint for deployment.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge all report.json files under a directory into one table.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Output directory; defaults to the runs directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn read_eval_json(path: &Path) -> Result<EvalMetrics> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    serde_json::from_reader(r).map_err(|e| UltError::Report(format!("eval json read: {e}")))
}

fn write_eval_json(metrics: &EvalMetrics, path: &Path) -> Result<()> {
    let w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(w, metrics)
        .map_err(|e| UltError::Report(format!("eval json write: {e}")))
}

/// Load or train the reference metrics used for normalization.
fn oracle_metrics(
    oracle: Option<&PathBuf>,
    cfg: &Config,
    out_dir: &Path,
) -> Result<EvalMetrics> {
    if let Some(p) = oracle {
        return read_eval_json(p);
    }
    let dir = out_dir.join("oracle");
    std::fs::create_dir_all(&dir)?;
    let (policy, _) = baselines::train_oracle(cfg, cfg.train.seed, Some(&dir))?;
    let m = evaluate(&EvalPolicy::Oracle(policy), cfg, cfg.eval.episodes, cfg.eval.seed)?;
    write_eval_json(&m, &dir.join("eval.json"))?;
    Ok(m)
}

fn oracle_policy(
    oracle: Option<&PathBuf>,
    cfg: &Config,
    seed: u64,
    out_dir: &Path,
) -> Result<OraclePolicy> {
    match oracle {
        Some(p) => OraclePolicy::load(p),
        None => {
            let dir = out_dir.join("oracle");
            std::fs::create_dir_all(&dir)?;
            let (policy, _) = baselines::train_oracle(cfg, seed, Some(&dir))?;
            Ok(policy)
        }
    }
}

fn default_budget(cfg: &Config) -> usize {
    cfg.train.total_updates * cfg.train.agents * cfg.train.horizon
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out, alpha, resume } => {
            let mut trainer = if let Some(state) = resume {
                Trainer::load_state(&state)?
            } else {
                let mut cfg = load_config(config.as_ref())?;
                if let Some(s) = seed {
                    cfg.train.seed = s;
                }
                if let Some(a) = alpha {
                    cfg.mixer.alpha = a;
                }
                cfg.validate()?;
                Trainer::new(&cfg, cfg.train.seed)?
            };
            let rows = trainer.train(&out)?;
            if let Some(last) = rows.last() {
                println!(
                    "trained to update {} ({} env steps), mean reward {:.4}",
                    last.update, last.env_steps, last.mean_reward
                );
            } else {
                println!("nothing to do: run already at the configured update count");
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            config,
            episodes,
            seed,
            deploy,
            teacher,
            reference,
            scheme,
            out,
        } => {
            if deploy && teacher {
                return Err(UltError::Usage(
                    "--deploy and --teacher are mutually exclusive".into(),
                ));
            }
            let cfg = load_config(config.as_ref())?;
            let episodes = episodes.unwrap_or(cfg.eval.episodes);
            let seed = seed.unwrap_or(cfg.eval.seed);
            let (policy, head) = if checkpoint.extension().and_then(|e| e.to_str())
                == Some("json")
            {
                (EvalPolicy::Oracle(OraclePolicy::load(&checkpoint)?), "oracle")
            } else {
                let loaded = load_checkpoint(&checkpoint)?;
                if teacher {
                    (EvalPolicy::Teacher(loaded.net), "teacher")
                } else {
                    (EvalPolicy::StudentDeploy(loaded.net), "student")
                }
            };
            let metrics = evaluate(&policy, &cfg, episodes, seed)?;
            println!("{}", serde_json::to_string_pretty(&metrics).unwrap());
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
                write_eval_json(&metrics, &dir.join("eval.json"))?;
            }
            if let Some(reference) = reference {
                let oracle = read_eval_json(&reference)?;
                let report =
                    normalize(&metrics, &oracle, &scheme, cfg.mixer.alpha, seed, head)?;
                println!("{}", serde_json::to_string_pretty(&report).unwrap());
                if let Some(dir) = &out {
                    write_reports_json(&[report], &dir.join("report.json"))?;
                }
            }
            Ok(())
        }
        Command::SweepAlpha { config, alphas, seeds, out, oracle } => {
            let cfg = load_config(config.as_ref())?;
            std::fs::create_dir_all(&out)?;
            let reference = oracle_metrics(oracle.as_ref(), &cfg, &out)?;
            let reports = alpha_sweep(&cfg, &alphas, &seeds, &reference, &out)?;
            write_reports_json(&reports, &out.join("merged.json"))?;
            let n = merge_reports(&out, &out.join("merged.csv"), &out.join("merged.json"))?;
            println!("wrote {n} normalized reports to {}", out.display());
            Ok(())
        }
        Command::Ablate { config, seeds, out, oracle } => {
            let cfg = load_config(config.as_ref())?;
            std::fs::create_dir_all(&out)?;
            let reference = oracle_metrics(oracle.as_ref(), &cfg, &out)?;
            let reports = ablation_suite(&cfg, &seeds, &reference, &out)?;
            write_reports_json(&reports, &out.join("merged.json"))?;
            let n = merge_reports(&out, &out.join("merged.csv"), &out.join("merged.json"))?;
            println!("wrote {n} normalized reports to {}", out.display());
            Ok(())
        }
        Command::Baseline { scheme, config, seed, out, oracle, checkpoint, budget, w0 } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let seed = cfg.train.seed;
            std::fs::create_dir_all(&out)?;
            let budget = budget.unwrap_or_else(|| default_budget(&cfg));
            match scheme.as_str() {
                "oracle" => {
                    baselines::train_oracle(&cfg, seed, Some(&out))?;
                }
                "ppo" => {
                    train_ppo(&cfg, seed, &out)?;
                }
                "joint" => {
                    let policy = oracle_policy(oracle.as_ref(), &cfg, seed, &out)?;
                    train_joint(policy, &cfg, seed, w0, &out)?;
                }
                "offline" | "online" | "two-stage" => {
                    let policy = oracle_policy(oracle.as_ref(), &cfg, seed, &out)?;
                    let mut student = UltNet::new(&cfg.net, seed);
                    let rows = match scheme.as_str() {
                        "offline" => {
                            distill_offline(&policy, &mut student, &cfg, budget, seed, "offline")?
                        }
                        "online" => {
                            distill_online(&policy, &mut student, &cfg, budget, seed, "online")?
                        }
                        _ => distill_two_stage(
                            &policy,
                            &mut student,
                            &cfg,
                            (budget / 2, budget - budget / 2),
                            seed,
                        )?,
                    };
                    save_checkpoint(&mut student, &out.join("latest.ultc"), false)?;
                    baselines::write_rows(&rows, &out.join("metrics.csv"))?;
                }
                "post-hoc" => {
                    let ckpt = checkpoint.ok_or_else(|| {
                        UltError::Usage("post-hoc needs --checkpoint with a full network".into())
                    })?;
                    let mut net = load_checkpoint(&ckpt)?.net;
                    let rows = post_hoc_transfer(&mut net, &cfg, budget, seed)?;
                    save_checkpoint(&mut net, &out.join("latest.ultc"), false)?;
                    baselines::write_rows(&rows, &out.join("metrics.csv"))?;
                }
                other => {
                    return Err(UltError::Usage(format!(
                        "unknown baseline scheme {other}; expected oracle, ppo, joint, \
                         offline, online, two-stage or post-hoc"
                    )));
                }
            }
            println!("baseline {scheme} finished; artifacts in {}", out.display());
            Ok(())
        }
        Command::Export { checkpoint, out } => {
            let mut net = load_checkpoint(&checkpoint)?.net;
            export_student(&mut net, &out)?;
            println!("exported deploy checkpoint to {}", out.display());
            Ok(())
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| runs.clone());
            std::fs::create_dir_all(&out)?;
            let n = merge_reports(&runs, &out.join("merged.csv"), &out.join("merged.json"))?;
            println!("merged {n} reports into {}", out.display());
            Ok(())
        }
    }
}

/// Process exit code for a failed run: 1 for usage and configuration
/// problems, 2 for runtime faults.
pub fn exit_code(err: &UltError) -> i32 {
    match err {
        UltError::Usage(_) | UltError::Config(_) => 1,
        _ => 2,
    }
}
