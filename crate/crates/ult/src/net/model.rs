//! The unified network: trajectory embedding, privilege token, causally
//! masked transformer blocks, next-token decode (student), privilege-token
//! heads (teacher action and value).

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::NetConfig;
use crate::error::{Result, UltError};

use super::attention::{AttnCache, Attention};
use super::params::{Activation, LayerNorm, Linear, LnCache, Mlp, MlpCache, Param1, Param2, ParamVisitor};

pub const LOG_STD_MIN: f64 = -4.0;
pub const LOG_STD_MAX: f64 = 1.0;
const LOG_STD_INIT: f64 = -0.5;

/// Pre-norm residual transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

pub struct BlockCache {
    ln1: Vec<LnCache>,
    attn: AttnCache,
    ln2: Vec<LnCache>,
    ln2_out: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

impl Block {
    fn new<R: Rng>(dim: usize, heads: usize, ff_dim: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            ff1: Linear::new(ff_dim, dim, rng),
            ff2: Linear::new(dim, ff_dim, rng),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let seq = x.nrows();
        let dim = x.ncols();
        let mut normed = Array2::zeros((seq, dim));
        let mut ln1 = Vec::with_capacity(seq);
        for i in 0..seq {
            let (y, c) = self.ln1.forward(&x.row(i).to_owned());
            normed.row_mut(i).assign(&y);
            ln1.push(c);
        }
        let (attn_out, attn_cache) = self.attn.forward(&normed);
        let x_mid = x + &attn_out;

        let mut ln2 = Vec::with_capacity(seq);
        let mut ln2_out = Array2::zeros((seq, dim));
        let ff = self.ff1.w.v.nrows();
        let mut ff_pre = Array2::zeros((seq, ff));
        let mut ff_act = Array2::zeros((seq, ff));
        let mut out = x_mid.clone();
        for i in 0..seq {
            let (y, c) = self.ln2.forward(&x_mid.row(i).to_owned());
            ln2_out.row_mut(i).assign(&y);
            ln2.push(c);
            let pre = self.ff1.forward(&y);
            let act = pre.mapv(|v| Activation::Gelu.apply(v));
            let o = self.ff2.forward(&act);
            ff_pre.row_mut(i).assign(&pre);
            ff_act.row_mut(i).assign(&act);
            let mut row = out.row_mut(i);
            row += &o;
        }
        (out, BlockCache { ln1, attn: attn_cache, ln2, ln2_out, ff_pre, ff_act })
    }

    fn backward(&mut self, cache: &BlockCache, gy: &Array2<f64>) -> Array2<f64> {
        let seq = gy.nrows();
        let dim = gy.ncols();
        // feed-forward branch
        let mut g_mid = gy.clone();
        for i in 0..seq {
            let g_out = gy.row(i).to_owned();
            let g_act = self.ff2.backward(&cache.ff_act.row(i).to_owned(), &g_out);
            let pre = cache.ff_pre.row(i);
            let g_pre = Array1::from_shape_fn(g_act.len(), |k| {
                g_act[k] * Activation::Gelu.derivative(pre[k])
            });
            let g_ln2 = self.ff1.backward(&cache.ln2_out.row(i).to_owned(), &g_pre);
            let g_x = self.ln2.backward(&cache.ln2[i], &g_ln2);
            let mut row = g_mid.row_mut(i);
            row += &g_x;
        }
        // attention branch
        let g_attn_out = g_mid.clone();
        let g_normed = self.attn.backward(&cache.attn, &g_attn_out);
        let mut gx = g_mid;
        for i in 0..seq {
            let g = self.ln1.backward(&cache.ln1[i], &g_normed.row(i).to_owned());
            let mut row = gx.row_mut(i);
            row += &g;
        }
        let _ = dim;
        gx
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.ff1.visit(&format!("{prefix}.ff1"), f);
        self.ff2.visit(&format!("{prefix}.ff2"), f);
    }
}

/// Running per-feature token statistics for optional input normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningNorm {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim], count: 1e-4 }
    }

    pub fn update(&mut self, token: &[f64]) {
        self.count += 1.0;
        for (i, x) in token.iter().enumerate() {
            let d = x - self.mean[i];
            self.mean[i] += d / self.count;
            self.var[i] += (d * (x - self.mean[i]) - self.var[i]) / self.count;
        }
    }

    pub fn normalize(&self, token: &Array1<f64>) -> Array1<f64> {
        Array1::from_shape_fn(token.len(), |i| {
            (token[i] - self.mean[i]) / (self.var[i].max(1e-8)).sqrt()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Deploy,
}

pub struct ForwardOutput {
    /// Decoded next tokens for every proprioceptive position, shape (t, m+n).
    pub zhat: Array2<f64>,
    /// Student action mean: the action slice of the last decoded token.
    pub student_mean: Array1<f64>,
    pub teacher_mean: Option<Array1<f64>>,
    pub value: Option<f64>,
}

pub struct ForwardCache {
    pub embedded: Array2<f64>,
    pub norm_tokens: Array2<f64>,
    pub priv_input: Option<Array1<f64>>,
    pub priv_cache: Option<MlpCache>,
    pub blocks: Vec<BlockCache>,
    pub final_ln: Vec<LnCache>,
    pub hhat: Array2<f64>,
    pub teacher_cache: Option<MlpCache>,
    pub value_cache: Option<MlpCache>,
    pub t: usize,
}

/// Gradients flowing into the network outputs.
#[derive(Default)]
pub struct OutputGrads {
    pub d_zhat: Option<Array2<f64>>,
    pub d_teacher: Option<Array1<f64>>,
    pub d_value: Option<f64>,
}

#[derive(Clone)]
pub struct UltNet {
    pub cfg: NetConfig,
    pub input_proj: Linear,
    pub pos_emb: Param2,
    pub priv_enc: Option<Mlp>,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub output_proj: Linear,
    pub teacher_head: Option<Mlp>,
    pub value_head: Option<Mlp>,
    pub log_std_student: Param1,
    pub log_std_teacher: Option<Param1>,
    pub obs_norm: Option<RunningNorm>,
}

impl UltNet {
    pub fn new(cfg: &NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let tok = cfg.token_dim();
        let input_proj = Linear::new(d, tok, &mut rng);
        let pos_emb = {
            let mut p = Param2::zeros(cfg.window + 1, d);
            p.v.mapv_inplace(|_| 0.0);
            for v in p.v.iter_mut() {
                *v = rng.gen_range(-0.02..0.02);
            }
            p
        };
        let priv_enc = Mlp::new(
            &[cfg.priv_dim, cfg.priv_hidden[0], cfg.priv_hidden[1], d],
            Activation::Elu,
            &mut rng,
        );
        let blocks = (0..cfg.layers)
            .map(|_| Block::new(d, cfg.heads, cfg.ff_dim, &mut rng))
            .collect();
        let final_ln = LayerNorm::new(d);
        let output_proj = Linear::new(tok, d, &mut rng);
        let teacher_head = Mlp::new(
            &[d, cfg.teacher_hidden[0], cfg.teacher_hidden[1], cfg.act_dim],
            Activation::Elu,
            &mut rng,
        );
        let value_head = Mlp::new(&[d, cfg.value_hidden, 1], Activation::Elu, &mut rng);
        Self {
            cfg: cfg.clone(),
            input_proj,
            pos_emb,
            priv_enc: Some(priv_enc),
            blocks,
            final_ln,
            output_proj,
            teacher_head: Some(teacher_head),
            value_head: Some(value_head),
            log_std_student: Param1::filled(cfg.act_dim, LOG_STD_INIT),
            log_std_teacher: Some(Param1::filled(cfg.act_dim, LOG_STD_INIT)),
            obs_norm: if cfg.obs_norm { Some(RunningNorm::new(cfg.token_dim())) } else { None },
        }
    }

    pub fn is_deploy_only(&self) -> bool {
        self.teacher_head.is_none()
    }

    /// Full forward pass. `privilege` appends the encoded privilege token at
    /// the end of the sequence; causal masking keeps every proprioceptive
    /// output identical whether or not it is present.
    pub fn forward(
        &self,
        tokens: &Array2<f64>,
        privilege: Option<&[f64]>,
    ) -> Result<(ForwardOutput, ForwardCache)> {
        let t = tokens.nrows();
        let d = self.cfg.embed_dim;
        if t == 0 || t > self.cfg.window {
            return Err(UltError::Config(format!(
                "window length {t} outside 1..={}",
                self.cfg.window
            )));
        }
        if tokens.ncols() != self.cfg.token_dim() {
            return Err(UltError::Config(format!(
                "token dim {} != {}",
                tokens.ncols(),
                self.cfg.token_dim()
            )));
        }
        let mut norm_tokens = tokens.clone();
        if let Some(norm) = &self.obs_norm {
            for i in 0..t {
                let z = norm.normalize(&tokens.row(i).to_owned());
                norm_tokens.row_mut(i).assign(&z);
            }
        }
        let seq = if privilege.is_some() { t + 1 } else { t };
        let mut embedded = Array2::zeros((seq, d));
        for i in 0..t {
            let z = norm_tokens.row(i).to_owned();
            let h = self.input_proj.forward(&z) + &self.pos_emb.v.row(i);
            embedded.row_mut(i).assign(&h);
        }
        let (priv_input, priv_cache) = if let Some(e) = privilege {
            if e.len() != self.cfg.priv_dim {
                return Err(UltError::Config(format!(
                    "privilege dim {} != {}",
                    e.len(),
                    self.cfg.priv_dim
                )));
            }
            let enc = self.priv_enc.as_ref().ok_or_else(|| {
                UltError::Usage("deploy-mode network has no privilege encoder".into())
            })?;
            let e_arr = Array1::from(e.to_vec());
            let (h, cache) = enc.forward(&e_arr);
            let h = h + &self.pos_emb.v.row(self.cfg.window);
            embedded.row_mut(t).assign(&h);
            (Some(e_arr), Some(cache))
        } else {
            (None, None)
        };

        let mut x = embedded.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x);
            x = y;
            block_caches.push(c);
        }
        let mut hhat = Array2::zeros((seq, d));
        let mut final_ln = Vec::with_capacity(seq);
        for i in 0..seq {
            let (y, c) = self.final_ln.forward(&x.row(i).to_owned());
            hhat.row_mut(i).assign(&y);
            final_ln.push(c);
        }

        let tok = self.cfg.token_dim();
        let mut zhat = Array2::zeros((t, tok));
        for i in 0..t {
            let z = self.output_proj.forward(&hhat.row(i).to_owned());
            zhat.row_mut(i).assign(&z);
        }
        let m = self.cfg.obs_dim;
        let n = self.cfg.act_dim;
        let student_mean = zhat.slice(s![t - 1, m..m + n]).to_owned();

        let (teacher_mean, teacher_cache, value, value_cache) = if privilege.is_some() {
            let th = self.teacher_head.as_ref().ok_or_else(|| {
                UltError::Usage("deploy-mode network has no teacher head".into())
            })?;
            let vh = self.value_head.as_ref().ok_or_else(|| {
                UltError::Usage("deploy-mode network has no value head".into())
            })?;
            let he = hhat.row(t).to_owned();
            let (a, tc) = th.forward(&he);
            let (v, vc) = vh.forward(&he);
            (Some(a), Some(tc), Some(v[0]), Some(vc))
        } else {
            (None, None, None, None)
        };

        Ok((
            ForwardOutput { zhat, student_mean, teacher_mean, value },
            ForwardCache {
                embedded,
                norm_tokens,
                priv_input,
                priv_cache,
                blocks: block_caches,
                final_ln,
                hhat,
                teacher_cache,
                value_cache,
                t,
            },
        ))
    }

    /// Value estimate from the last proprioceptive position instead of the
    /// privilege token (used when the privileged critic is disabled).
    pub fn value_from_proprio(&self, cache: &ForwardCache) -> Result<(f64, MlpCache)> {
        let vh = self
            .value_head
            .as_ref()
            .ok_or_else(|| UltError::Usage("deploy-mode network has no value head".into()))?;
        let h = cache.hhat.row(cache.t - 1).to_owned();
        let (v, vc) = vh.forward(&h);
        Ok((v[0], vc))
    }

    /// Backward pass; accumulates parameter gradients.
    pub fn backward(&mut self, cache: &ForwardCache, grads: &OutputGrads) {
        self.backward_with_proprio_value(cache, grads, None)
    }

    /// Like `backward`, but optionally routes a value gradient through the
    /// last proprioceptive position (see `value_from_proprio`).
    pub fn backward_with_proprio_value(
        &mut self,
        cache: &ForwardCache,
        grads: &OutputGrads,
        proprio_value: Option<(f64, &MlpCache)>,
    ) {
        let t = cache.t;
        let seq = cache.hhat.nrows();
        let d = self.cfg.embed_dim;
        let mut g_hhat = Array2::zeros((seq, d));

        if let Some(d_zhat) = &grads.d_zhat {
            for i in 0..t {
                let gz = d_zhat.row(i).to_owned();
                if gz.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let gh = self.output_proj.backward(&cache.hhat.row(i).to_owned(), &gz);
                let mut row = g_hhat.row_mut(i);
                row += &gh;
            }
        }
        if seq > t {
            if let Some(d_teacher) = &grads.d_teacher {
                let th = self.teacher_head.as_mut().expect("teacher head");
                let gh = th.backward(cache.teacher_cache.as_ref().unwrap(), d_teacher);
                let mut row = g_hhat.row_mut(t);
                row += &gh;
            }
            if let Some(dv) = grads.d_value {
                if dv != 0.0 {
                    let vh = self.value_head.as_mut().expect("value head");
                    let gh = vh.backward(
                        cache.value_cache.as_ref().unwrap(),
                        &Array1::from(vec![dv]),
                    );
                    let mut row = g_hhat.row_mut(t);
                    row += &gh;
                }
            }
        }
        if let Some((dv, vc)) = proprio_value {
            if dv != 0.0 {
                let vh = self.value_head.as_mut().expect("value head");
                let gh = vh.backward(vc, &Array1::from(vec![dv]));
                let mut row = g_hhat.row_mut(t - 1);
                row += &gh;
            }
        }

        let mut gx = Array2::zeros((seq, d));
        for i in 0..seq {
            let g = self.final_ln.backward(&cache.final_ln[i], &g_hhat.row(i).to_owned());
            gx.row_mut(i).assign(&g);
        }
        for (block, bc) in self.blocks.iter_mut().rev().zip(cache.blocks.iter().rev()) {
            gx = block.backward(bc, &gx);
        }
        // embedding layer
        for i in 0..t {
            let g = gx.row(i).to_owned();
            for (k, gv) in g.iter().enumerate() {
                self.pos_emb.g[[i, k]] += gv;
            }
            let _ = self.input_proj.backward(&cache.norm_tokens.row(i).to_owned(), &g);
        }
        if seq > t {
            let g = gx.row(t).to_owned();
            for (k, gv) in g.iter().enumerate() {
                self.pos_emb.g[[self.cfg.window, k]] += gv;
            }
            let enc = self.priv_enc.as_mut().expect("privilege encoder");
            let _ = enc.backward(cache.priv_cache.as_ref().unwrap(), &g);
        }
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor) {
        self.input_proj.visit("input_proj", f);
        f("pos_emb", super::params::ParamMut::P2(&mut self.pos_emb));
        if let Some(enc) = &mut self.priv_enc {
            enc.visit("priv_enc", f);
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&format!("block{i}"), f);
        }
        self.final_ln.visit("final_ln", f);
        self.output_proj.visit("output_proj", f);
        if let Some(th) = &mut self.teacher_head {
            th.visit("teacher_head", f);
        }
        if let Some(vh) = &mut self.value_head {
            vh.visit("value_head", f);
        }
        f("log_std_student", super::params::ParamMut::P1(&mut self.log_std_student));
        if let Some(ls) = &mut self.log_std_teacher {
            f("log_std_teacher", super::params::ParamMut::P1(ls));
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, mut p| {
            for g in p.grad_slice() {
                *g = 0.0;
            }
        });
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, mut p| n += p.value_slice().len());
        n
    }

    pub fn student_log_std(&self) -> Array1<f64> {
        self.log_std_student.v.clone()
    }

    pub fn teacher_log_std(&self) -> Result<Array1<f64>> {
        self.log_std_teacher
            .as_ref()
            .map(|p| p.v.clone())
            .ok_or_else(|| UltError::Usage("deploy-mode network has no teacher head".into()))
    }

    /// Strip the privilege encoder, teacher head, value head and teacher
    /// log-std, leaving a deploy-only student network.
    pub fn strip_privileged(&mut self) {
        self.priv_enc = None;
        self.teacher_head = None;
        self.value_head = None;
        self.log_std_teacher = None;
    }
}

pub struct ActOutput {
    pub action: Array1<f64>,
    pub log_prob: f64,
    pub student_mean: Array1<f64>,
    pub teacher_mean: Option<Array1<f64>>,
    pub value: Option<f64>,
}

impl UltNet {
    /// Policy interface. Train mode samples from the requested head's
    /// Gaussian; deploy mode returns the deterministic student mean and
    /// forbids privilege input.
    pub fn act<R: Rng>(
        &self,
        tokens: &Array2<f64>,
        privilege: Option<&[f64]>,
        mode: Mode,
        use_teacher: bool,
        rng: Option<&mut R>,
    ) -> Result<ActOutput> {
        match mode {
            Mode::Deploy => {
                if privilege.is_some() {
                    return Err(UltError::Usage(
                        "privilege input is not allowed in deploy mode".into(),
                    ));
                }
                let (out, _) = self.forward(tokens, None)?;
                let log_std = self.student_log_std();
                let lp = gaussian_log_prob(&out.student_mean, &log_std, &out.student_mean);
                Ok(ActOutput {
                    action: out.student_mean.clone(),
                    log_prob: lp,
                    student_mean: out.student_mean,
                    teacher_mean: None,
                    value: None,
                })
            }
            Mode::Train => {
                if privilege.is_none() {
                    return Err(UltError::Usage(
                        "train mode requires the privilege observation".into(),
                    ));
                }
                let rng = rng.ok_or_else(|| {
                    UltError::Usage("train mode requires a generator".into())
                })?;
                let (out, _) = self.forward(tokens, privilege)?;
                let (mean, log_std) = if use_teacher {
                    (out.teacher_mean.clone().unwrap(), self.teacher_log_std()?)
                } else {
                    (out.student_mean.clone(), self.student_log_std())
                };
                let action = gaussian_sample(&mean, &log_std, rng);
                let lp = gaussian_log_prob(&mean, &log_std, &action);
                Ok(ActOutput {
                    action,
                    log_prob: lp,
                    student_mean: out.student_mean,
                    teacher_mean: out.teacher_mean,
                    value: out.value,
                })
            }
        }
    }
}

const LN_2PI: f64 = 1.8378770664093453;

pub fn gaussian_log_prob(mean: &Array1<f64>, log_std: &Array1<f64>, x: &Array1<f64>) -> f64 {
    let mut lp = 0.0;
    for i in 0..mean.len() {
        let std = log_std[i].exp();
        let z = (x[i] - mean[i]) / std;
        lp += -0.5 * z * z - log_std[i] - 0.5 * LN_2PI;
    }
    lp
}

/// Gradients of log N(x; mean, exp(log_std)) w.r.t. mean and log_std.
pub fn gaussian_log_prob_grads(
    mean: &Array1<f64>,
    log_std: &Array1<f64>,
    x: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let n = mean.len();
    let mut d_mean = Array1::zeros(n);
    let mut d_log_std = Array1::zeros(n);
    for i in 0..n {
        let std = log_std[i].exp();
        let z = (x[i] - mean[i]) / std;
        d_mean[i] = z / std;
        d_log_std[i] = z * z - 1.0;
    }
    (d_mean, d_log_std)
}

pub fn gaussian_entropy(log_std: &Array1<f64>) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
}

pub fn gaussian_sample<R: Rng>(
    mean: &Array1<f64>,
    log_std: &Array1<f64>,
    rng: &mut R,
) -> Array1<f64> {
    use rand_distr::StandardNormal;
    Array1::from_shape_fn(mean.len(), |i| {
        let eps: f64 = rng.sample(StandardNormal);
        mean[i] + log_std[i].exp() * eps
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            embed_dim: 16,
            layers: 1,
            heads: 2,
            ff_dim: 32,
            obs_dim: 5,
            act_dim: 3,
            window: 6,
            priv_dim: 4,
            priv_hidden: [8, 8],
            teacher_hidden: [8, 8],
            value_hidden: 8,
            obs_norm: false,
        }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, t: usize, dim: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, dim), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn privilege_leak_invariance_is_exact() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..50 {
            let net = UltNet::new(&cfg, trial);
            let t = 1 + (trial as usize % cfg.window);
            let tokens = random_tokens(&mut rng, t, cfg.token_dim());
            let e: Vec<f64> = (0..cfg.priv_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (with, _) = net.forward(&tokens, Some(&e)).unwrap();
            let (without, _) = net.forward(&tokens, None).unwrap();
            assert_eq!(with.zhat, without.zhat, "trial {trial}");
            assert_eq!(with.student_mean, without.student_mean);
        }
    }

    #[test]
    fn causality_perturbation() {
        let cfg = tiny_cfg();
        let net = UltNet::new(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = 6;
        let tokens = random_tokens(&mut rng, t, cfg.token_dim());
        let (base, _) = net.forward(&tokens, None).unwrap();
        for j in 0..t {
            let mut perturbed = tokens.clone();
            perturbed[[j, 0]] += 0.5;
            let (out, _) = net.forward(&perturbed, None).unwrap();
            for i in 0..t {
                let changed = out.zhat.row(i) != base.zhat.row(i);
                if i < j {
                    assert!(!changed, "position {i} changed by perturbing {j}");
                } else if i == j {
                    assert!(changed, "position {i} unaffected by its own perturbation");
                }
            }
        }
    }

    #[test]
    fn variable_length_forward_works() {
        let cfg = tiny_cfg();
        let net = UltNet::new(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for t in 1..=cfg.window {
            let tokens = random_tokens(&mut rng, t, cfg.token_dim());
            let e: Vec<f64> = (0..cfg.priv_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (out, _) = net.forward(&tokens, Some(&e)).unwrap();
            assert_eq!(out.zhat.nrows(), t);
            assert_eq!(out.student_mean.len(), cfg.act_dim);
            assert!(out.value.unwrap().is_finite());
        }
        let too_long = random_tokens(&mut rng, cfg.window + 1, cfg.token_dim());
        assert!(net.forward(&too_long, None).is_err());
    }

    #[test]
    fn student_mean_is_decode_slice() {
        let cfg = tiny_cfg();
        let net = UltNet::new(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tokens = random_tokens(&mut rng, 4, cfg.token_dim());
        let (out, _) = net.forward(&tokens, None).unwrap();
        let m = cfg.obs_dim;
        let slice = out.zhat.slice(s![3, m..m + cfg.act_dim]).to_owned();
        assert_eq!(out.student_mean, slice);
    }

    #[test]
    fn privilege_encoder_distinguishes_inputs() {
        let cfg = tiny_cfg();
        let net = UltNet::new(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tokens = random_tokens(&mut rng, 3, cfg.token_dim());
        let mut e1 = vec![0.2; cfg.priv_dim];
        let mut e2 = e1.clone();
        e1[2] = 0.9;
        e2[2] = -0.9;
        let (o1, _) = net.forward(&tokens, Some(&e1)).unwrap();
        let (o2, _) = net.forward(&tokens, Some(&e2)).unwrap();
        assert_ne!(o1.teacher_mean.unwrap(), o2.teacher_mean.unwrap());
    }

    #[test]
    fn deploy_act_is_deterministic_and_equals_train_student_mean() {
        let cfg = tiny_cfg();
        let net = UltNet::new(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens = random_tokens(&mut rng, 5, cfg.token_dim());
        let e: Vec<f64> = (0..cfg.priv_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a1 = net
            .act::<ChaCha8Rng>(&tokens, None, Mode::Deploy, false, None)
            .unwrap();
        let a2 = net
            .act::<ChaCha8Rng>(&tokens, None, Mode::Deploy, false, None)
            .unwrap();
        assert_eq!(a1.action, a2.action);
        let mut srng = ChaCha8Rng::seed_from_u64(99);
        let tr = net
            .act(&tokens, Some(&e), Mode::Train, false, Some(&mut srng))
            .unwrap();
        assert_eq!(a1.action, tr.student_mean);
        // privilege in deploy mode is a usage error
        assert!(net
            .act::<ChaCha8Rng>(&tokens, Some(&e), Mode::Deploy, false, None)
            .is_err());
    }

    #[test]
    fn sampled_log_prob_matches_density() {
        let cfg = tiny_cfg();
        let net = UltNet::new(&cfg, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tokens = random_tokens(&mut rng, 4, cfg.token_dim());
        let e: Vec<f64> = (0..cfg.priv_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut srng = ChaCha8Rng::seed_from_u64(5);
        let out = net
            .act(&tokens, Some(&e), Mode::Train, true, Some(&mut srng))
            .unwrap();
        let mean = out.teacher_mean.clone().unwrap();
        let log_std = net.teacher_log_std().unwrap();
        let mut expect = 0.0;
        for i in 0..mean.len() {
            let std = log_std[i].exp();
            let z: f64 = (out.action[i] - mean[i]) / std;
            expect += -0.5 * z * z - log_std[i]
                - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        assert!((out.log_prob - expect).abs() < 1e-12);
    }

    #[test]
    fn entropy_closed_form_anchor() {
        // all stds = 1, n = 4 => 4 * 0.5 * ln(2*pi*e)
        let log_std = Array1::zeros(4);
        let h = gaussian_entropy(&log_std);
        let expect = 4.0 * 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((h - expect).abs() < 1e-12);
        assert!((expect - 5.6758).abs() < 1e-3);
    }

    /// Analytic gradients of a fixed linear functional of all network
    /// outputs must match central finite differences on every parameter.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut net = UltNet::new(&cfg, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let t = 4;
        let tokens = random_tokens(&mut rng, t, cfg.token_dim());
        let e: Vec<f64> = (0..cfg.priv_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c_z = Array2::from_shape_fn((t, cfg.token_dim()), |_| rng.gen_range(-1.0..1.0));
        let c_a = Array1::from_shape_fn(cfg.act_dim, |_| rng.gen_range(-1.0..1.0));
        let c_v = 0.7;

        let loss = |net: &UltNet| -> f64 {
            let (out, _) = net.forward(&tokens, Some(&e)).unwrap();
            let mut l = (&out.zhat * &c_z).sum();
            l += (&out.teacher_mean.unwrap() * &c_a).sum();
            l += c_v * out.value.unwrap();
            l
        };

        net.zero_grad();
        let (out, cache) = net.forward(&tokens, Some(&e)).unwrap();
        drop(out);
        let grads = OutputGrads {
            d_zhat: Some(c_z.clone()),
            d_teacher: Some(c_a.clone()),
            d_value: Some(c_v),
        };
        net.backward(&cache, &grads);

        let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
        net.visit_params(&mut |name, mut p| {
            analytic.push((name.to_string(), p.grad_slice().to_vec()));
        });

        let eps = 1e-4;
        let mut checked = 0usize;
        let mut failures = Vec::new();
        for (name, grad) in &analytic {
            for k in 0..grad.len() {
                // probe a subset of large tensors to keep runtime bounded
                if grad.len() > 64 && k % 17 != 0 {
                    continue;
                }
                let nudge = |net: &mut UltNet, delta: f64| {
                    net.visit_params(&mut |n2, mut p| {
                        if n2 == name {
                            p.value_slice()[k] += delta;
                        }
                    });
                };
                nudge(&mut net, eps);
                let lp = loss(&net);
                nudge(&mut net, -2.0 * eps);
                let lm = loss(&net);
                nudge(&mut net, eps);
                let fd = (lp - lm) / (2.0 * eps);
                let denom = fd.abs().max(grad[k].abs()).max(1e-6);
                if (fd - grad[k]).abs() / denom > 1e-4 {
                    failures.push(format!("{name}[{k}]: fd {fd} vs {}", grad[k]));
                }
                checked += 1;
            }
        }
        assert!(checked > 300, "checked only {checked} entries");
        assert!(failures.is_empty(), "{} failures: {:?}", failures.len(), &failures[..failures.len().min(5)]);
    }

    #[test]
    fn log_std_grads_flow_for_both_heads() {
        // log-prob gradient formulas against a numeric derivative
        let mean = Array1::from(vec![0.2, -0.4]);
        let log_std = Array1::from(vec![-0.3, 0.1]);
        let x = Array1::from(vec![0.5, -0.1]);
        let (dm, dls) = gaussian_log_prob_grads(&mean, &log_std, &x);
        let eps = 1e-6;
        for i in 0..2 {
            let mut m2 = mean.clone();
            m2[i] += eps;
            let fd = (gaussian_log_prob(&m2, &log_std, &x) - gaussian_log_prob(&mean, &log_std, &x)) / eps;
            assert!((fd - dm[i]).abs() < 1e-5);
            let mut l2 = log_std.clone();
            l2[i] += eps;
            let fd = (gaussian_log_prob(&mean, &l2, &x) - gaussian_log_prob(&mean, &log_std, &x)) / eps;
            assert!((fd - dls[i]).abs() < 1e-5);
        }
    }
}
