//! Experiment suites: alpha sweeps and loss ablations built on the trainer
//! and evaluation harness, with one normalized report per run.

use std::path::Path;

use crate::config::Config;
use crate::error::Result;
use crate::eval::{evaluate, normalize, write_reports_json, EvalMetrics, EvalPolicy, NormalizedReport};
use crate::trainer::Trainer;

/// Named configuration variants for the loss ablation, base first.
pub fn ablation_variants(base: &Config) -> Vec<(String, Config)> {
    let mut out = Vec::new();
    out.push(("full".to_string(), base.clone()));
    let mut c = base.clone();
    c.losses.next_pred_enabled = false;
    out.push(("no-next-pred".to_string(), c));
    let mut c = base.clone();
    c.losses.beta = 0.0;
    out.push(("no-imitation".to_string(), c));
    let mut c = base.clone();
    c.losses.lambda = 0.0;
    out.push(("no-aux".to_string(), c));
    let mut c = base.clone();
    c.mixer.alpha = 0.0;
    c.losses.lambda = 0.0;
    c.train.privileged_critic = false;
    out.push(("ppo".to_string(), c));
    out
}

/// Train one run and evaluate the student deploy path; the teacher head is
/// evaluated only when the run actually trains it.
pub fn train_and_eval(
    cfg: &Config,
    seed: u64,
    scheme: &str,
    out_dir: &Path,
) -> Result<(EvalMetrics, Option<EvalMetrics>)> {
    let mut trainer = Trainer::new(cfg, seed)?;
    trainer.scheme = scheme.to_string();
    trainer.train(out_dir)?;
    let teacher = if trainer.uses_privilege() && cfg.mixer.alpha > 0.0 {
        let p = EvalPolicy::Teacher(trainer.net.clone());
        Some(evaluate(&p, cfg, cfg.eval.episodes, cfg.eval.seed)?)
    } else {
        None
    };
    let student = EvalPolicy::StudentDeploy(trainer.net);
    let student_metrics = evaluate(&student, cfg, cfg.eval.episodes, cfg.eval.seed)?;
    Ok((student_metrics, teacher))
}

fn report_run(
    student: &EvalMetrics,
    teacher: Option<&EvalMetrics>,
    oracle: &EvalMetrics,
    scheme: &str,
    alpha: f64,
    seed: u64,
    run_dir: &Path,
) -> Result<Vec<NormalizedReport>> {
    let mut reports = vec![normalize(student, oracle, scheme, alpha, seed, "student")?];
    if let Some(t) = teacher {
        reports.push(normalize(t, oracle, scheme, alpha, seed, "teacher")?);
    }
    write_reports_json(&reports, &run_dir.join("report.json"))?;
    Ok(reports)
}

/// Train at each mixing rate and seed; returns normalized student and
/// teacher reports against the reference metrics.
pub fn alpha_sweep(
    base: &Config,
    alphas: &[f64],
    seeds: &[u64],
    oracle: &EvalMetrics,
    out_dir: &Path,
) -> Result<Vec<NormalizedReport>> {
    let mut all = Vec::new();
    for &alpha in alphas {
        let mut cfg = base.clone();
        cfg.mixer.alpha = alpha;
        for &seed in seeds {
            let run_dir = out_dir.join(format!("alpha_{alpha}_seed_{seed}"));
            std::fs::create_dir_all(&run_dir)?;
            let (student, teacher) = train_and_eval(&cfg, seed, "ult", &run_dir)?;
            all.extend(report_run(&student, teacher.as_ref(), oracle, "ult", alpha, seed, &run_dir)?);
        }
    }
    Ok(all)
}

/// Train every ablation variant at every seed; returns normalized student
/// reports (teacher too where trained).
pub fn ablation_suite(
    base: &Config,
    seeds: &[u64],
    oracle: &EvalMetrics,
    out_dir: &Path,
) -> Result<Vec<NormalizedReport>> {
    let mut all = Vec::new();
    for (name, cfg) in ablation_variants(base) {
        for &seed in seeds {
            let run_dir = out_dir.join(format!("{name}_seed_{seed}"));
            std::fs::create_dir_all(&run_dir)?;
            let (student, teacher) = train_and_eval(&cfg, seed, &name, &run_dir)?;
            all.extend(report_run(
                &student,
                teacher.as_ref(),
                oracle,
                &name,
                cfg.mixer.alpha,
                seed,
                &run_dir,
            )?);
        }
    }
    Ok(all)
}

/// Median of an unsorted slice; mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
