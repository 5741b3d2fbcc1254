//! Multi-head self-attention with a strict causal mask. Scores, softmax and
//! the weighted sums are evaluated row by row over j <= i only, so position
//! i's output is bitwise independent of any later token.

use ndarray::{s, Array2};
use rand::Rng;

use super::params::{Linear, ParamVisitor};

#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    pub x: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Softmax rows per (head, query position); probs[h][i] has length i + 1.
    pub probs: Vec<Vec<Vec<f64>>>,
    /// Concatenated head outputs before the output projection.
    pub concat: Array2<f64>,
}

impl Attention {
    pub fn new<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(dim % heads, 0);
        Self {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, AttnCache) {
        let (seq, dim) = (x.nrows(), x.ncols());
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut q = Array2::zeros((seq, dim));
        let mut k = Array2::zeros((seq, dim));
        let mut v = Array2::zeros((seq, dim));
        for i in 0..seq {
            let xi = x.row(i).to_owned();
            q.row_mut(i).assign(&self.wq.forward(&xi));
            k.row_mut(i).assign(&self.wk.forward(&xi));
            v.row_mut(i).assign(&self.wv.forward(&xi));
        }

        let mut probs = vec![Vec::with_capacity(seq); self.heads];
        let mut concat = Array2::zeros((seq, dim));
        for h in 0..self.heads {
            let lo = h * dh;
            let hi = lo + dh;
            for i in 0..seq {
                let qi = q.slice(s![i, lo..hi]);
                let mut scores = Vec::with_capacity(i + 1);
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = k.slice(s![j, lo..hi]);
                    let dot: f64 = qi.iter().zip(kj.iter()).map(|(a, b)| a * b).sum();
                    let sc = dot * scale;
                    if sc > max {
                        max = sc;
                    }
                    scores.push(sc);
                }
                let mut denom = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    denom += *sc;
                }
                for sc in scores.iter_mut() {
                    *sc /= denom;
                }
                for j in 0..=i {
                    let vj = v.slice(s![j, lo..hi]);
                    let p = scores[j];
                    for (d, vv) in vj.iter().enumerate() {
                        concat[[i, lo + d]] += p * vv;
                    }
                }
                probs[h].push(scores);
            }
        }

        let mut y = Array2::zeros((seq, dim));
        for i in 0..seq {
            let ci = concat.row(i).to_owned();
            y.row_mut(i).assign(&self.wo.forward(&ci));
        }
        (y, AttnCache { x: x.clone(), q, k, v, probs, concat })
    }

    pub fn backward(&mut self, cache: &AttnCache, gy: &Array2<f64>) -> Array2<f64> {
        let (seq, dim) = (gy.nrows(), gy.ncols());
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut g_concat = Array2::zeros((seq, dim));
        for i in 0..seq {
            let ci = cache.concat.row(i).to_owned();
            let gyi = gy.row(i).to_owned();
            let gc = self.wo.backward(&ci, &gyi);
            g_concat.row_mut(i).assign(&gc);
        }

        let mut gq = Array2::<f64>::zeros((seq, dim));
        let mut gk = Array2::<f64>::zeros((seq, dim));
        let mut gv = Array2::<f64>::zeros((seq, dim));
        for h in 0..self.heads {
            let lo = h * dh;
            for i in 0..seq {
                let probs = &cache.probs[h][i];
                // grads of the weighted sum w.r.t. probabilities and values
                let mut gp = vec![0.0; i + 1];
                for j in 0..=i {
                    let p = probs[j];
                    for d in 0..dh {
                        let go = g_concat[[i, lo + d]];
                        gp[j] += go * cache.v[[j, lo + d]];
                        gv[[j, lo + d]] += go * p;
                    }
                }
                // softmax backward for row i
                let dot: f64 = gp.iter().zip(probs.iter()).map(|(a, b)| a * b).sum();
                for j in 0..=i {
                    let gs = probs[j] * (gp[j] - dot) * scale;
                    for d in 0..dh {
                        gq[[i, lo + d]] += gs * cache.k[[j, lo + d]];
                        gk[[j, lo + d]] += gs * cache.q[[i, lo + d]];
                    }
                }
            }
        }

        let mut gx = Array2::zeros((seq, dim));
        for i in 0..seq {
            let xi = cache.x.row(i).to_owned();
            let mut g = self.wq.backward(&xi, &gq.row(i).to_owned());
            g += &self.wk.backward(&xi, &gk.row(i).to_owned());
            g += &self.wv.backward(&xi, &gv.row(i).to_owned());
            gx.row_mut(i).assign(&g);
        }
        gx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor) {
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
    }
}
