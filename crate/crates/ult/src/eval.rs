//! Evaluation harness: deterministic policy rollouts across terrain regimes
//! and levels, normalization against the reference policy, experiment suites
//! and report merging.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::OraclePolicy;
use crate::config::Config;
use crate::env::{sample_regime, Done, RegimeKind, ToyEnv, ALL_REGIMES};
use crate::error::{Result, UltError};
use crate::net::{Mode, UltNet};
use crate::rollout::TrajectoryWindow;

/// A policy under evaluation. Students always run the deploy path; teacher
/// and oracle variants consume privilege at every step.
pub enum EvalPolicy {
    StudentDeploy(UltNet),
    Teacher(UltNet),
    Oracle(OraclePolicy),
}

impl EvalPolicy {
    pub fn needs_privilege(&self) -> bool {
        !matches!(self, EvalPolicy::StudentDeploy(_))
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RegimeMetrics {
    /// Mean raw (pre-weight) linear tracking term per step.
    pub lin_per_step: f64,
    /// Mean raw angular tracking term per step.
    pub ang_per_step: f64,
    /// Mean total episode return.
    pub episode_return: f64,
    /// Fraction of episodes that ran to timeout without collision.
    pub survival: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub per_regime: BTreeMap<String, RegimeMetrics>,
    pub overall: RegimeMetrics,
    pub episodes: usize,
}

struct RegimeAccum {
    lin: f64,
    ang: f64,
    ret: f64,
    survived: usize,
    steps: usize,
    episodes: usize,
}

impl RegimeAccum {
    fn new() -> Self {
        Self { lin: 0.0, ang: 0.0, ret: 0.0, survived: 0, steps: 0, episodes: 0 }
    }

    fn finish(&self) -> RegimeMetrics {
        RegimeMetrics {
            lin_per_step: self.lin / self.steps.max(1) as f64,
            ang_per_step: self.ang / self.steps.max(1) as f64,
            episode_return: self.ret / self.episodes.max(1) as f64,
            survival: self.survived as f64 / self.episodes.max(1) as f64,
            episodes: self.episodes,
        }
    }
}

/// Roll the configured number of episodes across regimes and levels with the
/// stated proportions; deterministic for a fixed (policy, seed, episodes).
pub fn evaluate(policy: &EvalPolicy, cfg: &Config, episodes: usize, seed: u64) -> Result<EvalMetrics> {
    if let EvalPolicy::StudentDeploy(net) | EvalPolicy::Teacher(net) = policy {
        if matches!(policy, EvalPolicy::Teacher(_)) && net.is_deploy_only() {
            return Err(UltError::Usage(
                "teacher evaluation needs the full network, not a deploy export".into(),
            ));
        }
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut accums: BTreeMap<&'static str, RegimeAccum> = BTreeMap::new();
    for ep in 0..episodes {
        let kind = sample_regime(&mut master, &cfg.env);
        let level = master.gen_range(0..=cfg.eval.max_eval_level.min(cfg.env.max_level));
        let env_seed = seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(ep as u64);
        let (lin, ang, ret, steps, survived) = run_episode(policy, cfg, kind, level, env_seed)?;
        let acc = accums.entry(kind.name()).or_insert_with(RegimeAccum::new);
        acc.lin += lin;
        acc.ang += ang;
        acc.ret += ret;
        acc.steps += steps;
        acc.survived += usize::from(survived);
        acc.episodes += 1;
    }
    let mut per_regime = BTreeMap::new();
    let mut total = RegimeAccum::new();
    for (name, acc) in &accums {
        per_regime.insert((*name).to_string(), acc.finish());
        total.lin += acc.lin;
        total.ang += acc.ang;
        total.ret += acc.ret;
        total.steps += acc.steps;
        total.survived += acc.survived;
        total.episodes += acc.episodes;
    }
    Ok(EvalMetrics { per_regime, overall: total.finish(), episodes })
}

fn run_episode(
    policy: &EvalPolicy,
    cfg: &Config,
    kind: RegimeKind,
    level: usize,
    env_seed: u64,
) -> Result<(f64, f64, f64, usize, bool)> {
    let mut env = ToyEnv::new(env_seed);
    let mut obs = env.reset_with(&cfg.env, kind, level)?.to_vec();
    let mut window = TrajectoryWindow::new(cfg.net.window, cfg.net.obs_dim, cfg.net.act_dim);
    window.push_reset(obs.clone());
    let mut lin = 0.0;
    let mut ang = 0.0;
    let mut ret = 0.0;
    let mut steps = 0usize;
    loop {
        let action = match policy {
            EvalPolicy::StudentDeploy(net) => {
                net.act::<ChaCha8Rng>(&window.tokens(), None, Mode::Deploy, false, None)?
                    .action
            }
            EvalPolicy::Teacher(net) => {
                let privilege = env.privilege(&cfg.env).to_vec();
                let (out, _) = net.forward(&window.tokens(), Some(&privilege))?;
                out.teacher_mean.ok_or_else(|| {
                    UltError::Usage("teacher evaluation needs the teacher head".into())
                })?
            }
            EvalPolicy::Oracle(oracle) => {
                let privilege = env.privilege(&cfg.env).to_vec();
                oracle.mean_action(&obs, &privilege)?
            }
        };
        let act_arr = [action[0], action[1], action[2], action[3]];
        let outcome = env.step(act_arr, &cfg.env)?;
        // raw tracking terms, pre-weight
        lin += outcome.reward.raw[0];
        ang += outcome.reward.raw[1];
        ret += outcome.reward.total;
        steps += 1;
        match outcome.done {
            Done::Running => {
                obs = outcome.proprio.to_vec();
                window.push(obs.clone(), action.to_vec());
            }
            Done::Timeout => return Ok((lin, ang, ret, steps, true)),
            Done::Collision => return Ok((lin, ang, ret, steps, false)),
        }
    }
}

pub const REPORT_METRICS: [&str; 4] = ["lin_track", "ang_track", "episode_return", "survival"];

/// One normalized report: per-regime metric ratios against the reference
/// policy plus the all-regime average block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizedReport {
    pub scheme: String,
    pub alpha: f64,
    pub seed: u64,
    pub head: String,
    /// regime -> metric -> ratio; includes an "average" pseudo-regime.
    pub values: BTreeMap<String, BTreeMap<String, f64>>,
}

fn metric_value(m: &RegimeMetrics, metric: &str) -> f64 {
    match metric {
        "lin_track" => m.lin_per_step,
        "ang_track" => m.ang_per_step,
        "episode_return" => m.episode_return,
        "survival" => m.survival,
        _ => f64::NAN,
    }
}

/// Elementwise per-regime ratio against the reference metrics.
pub fn normalize(
    metrics: &EvalMetrics,
    oracle_metrics: &EvalMetrics,
    scheme: &str,
    alpha: f64,
    seed: u64,
    head: &str,
) -> Result<NormalizedReport> {
    let mut values = BTreeMap::new();
    for (regime, m) in &metrics.per_regime {
        let o = oracle_metrics.per_regime.get(regime).ok_or_else(|| {
            UltError::Report(format!("reference metrics missing regime {regime}"))
        })?;
        let mut row = BTreeMap::new();
        for metric in REPORT_METRICS {
            row.insert(metric.to_string(), metric_value(m, metric) / metric_value(o, metric));
        }
        values.insert(regime.clone(), row);
    }
    // all-regime average of the per-regime ratios
    let mut avg = BTreeMap::new();
    for metric in REPORT_METRICS {
        let vals: Vec<f64> = values
            .values()
            .map(|row| row[metric])
            .filter(|v| v.is_finite())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        avg.insert(metric.to_string(), mean);
    }
    values.insert("average".to_string(), avg);
    Ok(NormalizedReport {
        scheme: scheme.to_string(),
        alpha,
        seed,
        head: head.to_string(),
        values,
    })
}

pub const REPORT_HEADER: [&str; 7] =
    ["scheme", "alpha", "seed", "head", "regime", "metric", "value"];

/// Write reports as long-format CSV rows.
pub fn write_reports(reports: &[NormalizedReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(REPORT_HEADER)
        .map_err(|e| UltError::Report(format!("report header: {e}")))?;
    for r in reports {
        for (regime, row) in &r.values {
            for (metric, value) in row {
                w.write_record([
                    r.scheme.as_str(),
                    &r.alpha.to_string(),
                    &r.seed.to_string(),
                    r.head.as_str(),
                    regime,
                    metric,
                    &value.to_string(),
                ])
                .map_err(|e| UltError::Report(format!("report row: {e}")))?;
            }
        }
    }
    w.flush().map_err(|e| UltError::Report(format!("report flush: {e}")))?;
    Ok(())
}

pub fn write_reports_json(reports: &[NormalizedReport], path: &Path) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(w, reports)
        .map_err(|e| UltError::Report(format!("report json: {e}")))?;
    Ok(())
}

pub fn read_reports_json(path: &Path) -> Result<Vec<NormalizedReport>> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| UltError::Report(format!("report json read: {e}")))
}

/// Merge every `report.json` under a directory tree into one sorted,
/// deduplicated table; merging a merged output reproduces it.
pub fn merge_reports(runs_dir: &Path, out_csv: &Path, out_json: &Path) -> Result<usize> {
    let mut reports = Vec::new();
    let mut stack = vec![runs_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().and_then(|n| n.to_str()) == Some("report.json")
                || p.file_name().and_then(|n| n.to_str()) == Some("merged.json")
            {
                reports.extend(read_reports_json(&p)?);
            }
        }
    }
    reports.sort_by(|a, b| {
        (&a.scheme, &a.head, a.seed)
            .cmp(&(&b.scheme, &b.head, b.seed))
            .then(a.alpha.partial_cmp(&b.alpha).unwrap_or(std::cmp::Ordering::Equal))
    });
    reports.dedup_by(|a, b| {
        a.scheme == b.scheme
            && a.alpha == b.alpha
            && a.seed == b.seed
            && a.head == b.head
            && a.values == b.values
    });
    write_reports(&reports, out_csv)?;
    write_reports_json(&reports, out_json)?;
    Ok(reports.len())
}

/// Verify the regime proportions cover every named regime.
pub fn regime_names() -> Vec<&'static str> {
    ALL_REGIMES.iter().map(|r| r.name()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> Config {
        let mut cfg = Config::default();
        cfg.net.embed_dim = 16;
        cfg.net.layers = 1;
        cfg.net.heads = 2;
        cfg.net.ff_dim = 32;
        cfg.net.window = 4;
        cfg.net.priv_hidden = [16, 16];
        cfg.net.teacher_hidden = [16, 16];
        cfg.net.value_hidden = 16;
        cfg.env.episode_s = 2.0;
        cfg
    }

    #[test]
    fn evaluation_is_deterministic() {
        let cfg = small_config();
        let net = UltNet::new(&cfg.net, 3);
        let p = EvalPolicy::StudentDeploy(net);
        let a = evaluate(&p, &cfg, 10, 7).unwrap();
        let b = evaluate(&p, &cfg, 10, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = evaluate(&p, &cfg, 10, 8).unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn self_normalization_is_unity() {
        let cfg = small_config();
        let net = UltNet::new(&cfg.net, 3);
        let p = EvalPolicy::StudentDeploy(net);
        let m = evaluate(&p, &cfg, 20, 7).unwrap();
        let r = normalize(&m, &m, "self", 0.0, 7, "student").unwrap();
        for (regime, row) in &r.values {
            for (metric, v) in row {
                assert!((v - 1.0).abs() < 1e-12, "{regime}/{metric} = {v}");
            }
        }
    }

    #[test]
    fn normalization_is_scale_consistent() {
        let cfg = small_config();
        let net = UltNet::new(&cfg.net, 3);
        let p = EvalPolicy::StudentDeploy(net);
        let m = evaluate(&p, &cfg, 20, 7).unwrap();
        let net2 = UltNet::new(&cfg.net, 4);
        let o = evaluate(&EvalPolicy::StudentDeploy(net2), &cfg, 20, 7).unwrap();
        let r1 = normalize(&m, &o, "x", 0.0, 7, "student").unwrap();
        let scale = |e: &EvalMetrics, k: f64| -> EvalMetrics {
            let mut e = e.clone();
            for v in e.per_regime.values_mut() {
                v.lin_per_step *= k;
                v.ang_per_step *= k;
                v.episode_return *= k;
                v.survival *= k;
            }
            e
        };
        let r2 = normalize(&scale(&m, 3.0), &scale(&o, 3.0), "x", 0.0, 7, "student").unwrap();
        for (regime, row) in &r1.values {
            for (metric, v) in row {
                let v2 = r2.values[regime][metric];
                assert!((v - v2).abs() < 1e-9, "{regime}/{metric}: {v} vs {v2}");
            }
        }
    }

    #[test]
    fn normalize_missing_regime_is_error() {
        let cfg = small_config();
        let net = UltNet::new(&cfg.net, 3);
        let p = EvalPolicy::StudentDeploy(net);
        let m = evaluate(&p, &cfg, 20, 7).unwrap();
        let mut o = m.clone();
        let key = o.per_regime.keys().next().unwrap().clone();
        o.per_regime.remove(&key);
        assert!(normalize(&m, &o, "x", 0.0, 7, "student").is_err());
    }

    #[test]
    fn merge_is_idempotent() {
        let cfg = small_config();
        let net = UltNet::new(&cfg.net, 3);
        let p = EvalPolicy::StudentDeploy(net);
        let m = evaluate(&p, &cfg, 10, 7).unwrap();
        let r = normalize(&m, &m, "self", 0.6, 7, "student").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run1");
        std::fs::create_dir_all(&run).unwrap();
        write_reports_json(&[r], &run.join("report.json")).unwrap();
        let merged_dir = dir.path().join("merged");
        std::fs::create_dir_all(&merged_dir).unwrap();
        let n1 = merge_reports(dir.path(), &merged_dir.join("merged.csv"), &merged_dir.join("merged.json")).unwrap();
        let first = std::fs::read_to_string(merged_dir.join("merged.csv")).unwrap();
        let n2 = merge_reports(dir.path(), &merged_dir.join("merged.csv"), &merged_dir.join("merged.json")).unwrap();
        let second = std::fs::read_to_string(merged_dir.join("merged.csv")).unwrap();
        assert_eq!(n1, n2);
        assert_eq!(first, second);
    }

    #[test]
    fn deploy_export_rejected_for_teacher_eval() {
        let cfg = small_config();
        let mut net = UltNet::new(&cfg.net, 3);
        net.strip_privileged();
        let p = EvalPolicy::Teacher(net);
        assert!(evaluate(&p, &cfg, 2, 1).is_err());
    }
}
