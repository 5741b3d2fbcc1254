//! Loss terms and their gradients: next-token prediction, action imitation,
//! the clipped PPO surrogate, value regression and the entropy bonus.

use ndarray::{s, Array1, Array2};

use crate::config::LossConfig;
use crate::net::{
    gaussian_entropy, gaussian_log_prob, gaussian_log_prob_grads, ForwardOutput, OutputGrads,
};
use crate::rollout::{Provenance, RolloutStep};

/// Mean squared next-token prediction error over aligned pairs. The decode at
/// position i targets the token at position i + 1; the final position targets
/// `next_token` when the episode continued. Returns the loss and its gradient
/// w.r.t. the decoded tokens.
pub fn next_pred_loss(
    zhat: &Array2<f64>,
    tokens: &Array2<f64>,
    next_token: Option<&Array1<f64>>,
) -> (f64, Array2<f64>) {
    let t = zhat.nrows();
    let dim = zhat.ncols();
    let mut d = Array2::zeros((t, dim));
    let mut pairs = 0usize;
    let mut loss = 0.0;
    for i in 0..t.saturating_sub(1) {
        for k in 0..dim {
            let diff = zhat[[i, k]] - tokens[[i + 1, k]];
            loss += diff * diff;
            d[[i, k]] = diff;
        }
        pairs += 1;
    }
    if let Some(next) = next_token {
        for k in 0..dim {
            let diff = zhat[[t - 1, k]] - next[k];
            loss += diff * diff;
            d[[t - 1, k]] = diff;
        }
        pairs += 1;
    }
    if pairs == 0 {
        return (0.0, d);
    }
    let scale = 1.0 / pairs as f64;
    d.mapv_inplace(|v| 2.0 * v * scale);
    (loss * scale, d)
}

/// Squared imitation error between the teacher action mean (treated as a
/// constant target) and the student action mean. Returns the loss and its
/// gradient w.r.t. the student mean only.
pub fn imitation_loss(teacher_mean: &Array1<f64>, student_mean: &Array1<f64>) -> (f64, Array1<f64>) {
    let diff = student_mean - teacher_mean;
    let loss = diff.iter().map(|v| v * v).sum();
    (loss, diff.mapv(|v| 2.0 * v))
}

/// Clipped-surrogate policy loss for one sample.
#[derive(Debug, Clone, Copy)]
pub struct PolicyTerms {
    pub loss: f64,
    /// d loss / d new_logp; zero when the clipped branch is active.
    pub d_new_logp: f64,
    pub approx_kl: f64,
    pub clipped: bool,
}

pub fn ppo_policy_terms(
    new_logp: f64,
    old_logp: f64,
    advantage: f64,
    clip_range: f64,
) -> PolicyTerms {
    let ratio = (new_logp - old_logp).exp();
    let clipped_ratio = ratio.clamp(1.0 - clip_range, 1.0 + clip_range);
    let surr1 = ratio * advantage;
    let surr2 = clipped_ratio * advantage;
    let clipped = surr2 < surr1;
    let loss = -surr1.min(surr2);
    let d_new_logp = if clipped { 0.0 } else { -advantage * ratio };
    PolicyTerms { loss, d_new_logp, approx_kl: old_logp - new_logp, clipped }
}

/// Per-sample loss breakdown, before minibatch averaging.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepLosses {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub next_pred: f64,
    pub imitation: f64,
    /// Policy + weighted value - weighted entropy (the reinforcement part).
    pub l_rl: f64,
    pub total: f64,
    pub clipped: bool,
}

/// Gradients produced by one sample, to be scaled by 1/minibatch and fed into
/// the network backward pass.
pub struct StepGrads {
    pub output: OutputGrads,
    pub d_value: f64,
    pub d_log_std_student: Array1<f64>,
    pub d_log_std_teacher: Array1<f64>,
}

/// Full per-sample objective: clipped surrogate + value regression + entropy
/// bonus on the producing head, plus the weighted prediction and imitation
/// terms. `value` is the critic output used for this sample (privilege token
/// or last proprioceptive position).
#[allow(clippy::too_many_arguments)]
pub fn compute_step_loss(
    out: &ForwardOutput,
    value: f64,
    step: &RolloutStep,
    student_log_std: &Array1<f64>,
    teacher_log_std: &Array1<f64>,
    cfg: &LossConfig,
    tokens: &Array2<f64>,
) -> (StepLosses, StepGrads) {
    let n = student_log_std.len();
    let action = Array1::from(step.action.clone());

    let (mean, log_std) = match step.provenance {
        Provenance::Teacher => (out.teacher_mean.as_ref().expect("teacher mean"), teacher_log_std),
        Provenance::Student => (&out.student_mean, student_log_std),
    };
    let new_logp = gaussian_log_prob(mean, log_std, &action);
    let policy = ppo_policy_terms(new_logp, step.behavior_logp, step.advantage, cfg.clip_range);
    let (d_mean_lp, d_log_std_lp) = gaussian_log_prob_grads(mean, log_std, &action);

    let entropy = gaussian_entropy(log_std);
    let value_err = value - step.return_target;
    let value_loss = value_err * value_err;

    let (next_pred, mut d_zhat) = if cfg.next_pred_enabled {
        next_pred_loss(&out.zhat, tokens, step.next_token.as_ref())
    } else {
        (0.0, Array2::zeros(out.zhat.raw_dim()))
    };
    let (imitation, d_student_mean) = match &out.teacher_mean {
        Some(teacher) => imitation_loss(teacher, &out.student_mean),
        None => (0.0, Array1::zeros(n)),
    };

    let l_ult = next_pred + cfg.beta * imitation;
    let l_rl = policy.loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy;
    let total = l_rl + cfg.lambda * l_ult;

    // gradient assembly
    let mut d_log_std_student = Array1::zeros(n);
    let mut d_log_std_teacher = Array1::zeros(n);
    let mut d_teacher_mean = Array1::zeros(n);
    let mut d_student_policy = Array1::zeros(n);
    match step.provenance {
        Provenance::Teacher => {
            d_teacher_mean = d_mean_lp.mapv(|v| v * policy.d_new_logp);
            d_log_std_teacher = d_log_std_lp.mapv(|v| v * policy.d_new_logp);
            for v in d_log_std_teacher.iter_mut() {
                *v -= cfg.entropy_coef;
            }
        }
        Provenance::Student => {
            d_student_policy = d_mean_lp.mapv(|v| v * policy.d_new_logp);
            d_log_std_student = d_log_std_lp.mapv(|v| v * policy.d_new_logp);
            for v in d_log_std_student.iter_mut() {
                *v -= cfg.entropy_coef;
            }
        }
    }
    // scale the prediction gradient by lambda, then add the imitation and
    // policy-gradient pieces flowing through the student mean (action slice
    // of the final decoded token)
    d_zhat.mapv_inplace(|v| v * cfg.lambda);
    let t = out.zhat.nrows();
    let m = out.zhat.ncols() - n;
    {
        let mut last = d_zhat.slice_mut(s![t - 1, m..m + n]);
        for k in 0..n {
            last[k] += cfg.lambda * cfg.beta * d_student_mean[k] + d_student_policy[k];
        }
    }

    let losses = StepLosses {
        policy: policy.loss,
        value: value_loss,
        entropy,
        approx_kl: policy.approx_kl,
        next_pred,
        imitation,
        l_rl,
        total,
        clipped: policy.clipped,
    };
    let grads = StepGrads {
        output: OutputGrads {
            d_zhat: Some(d_zhat),
            d_teacher: if d_teacher_mean.iter().any(|v| *v != 0.0) {
                Some(d_teacher_mean)
            } else {
                None
            },
            d_value: None,
        },
        d_value: cfg.value_coef * 2.0 * value_err,
        d_log_std_student,
        d_log_std_teacher,
    };
    (losses, grads)
}
