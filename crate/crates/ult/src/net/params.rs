//! Parameter containers and the small layer zoo (linear, MLP, layer norm)
//! with explicit forward caches and hand-written backward passes.
//!
//! Convention: all sequence math is evaluated position-wise (matrix-vector
//! products per token), so a position's result never depends on how many
//! later tokens are present. The privilege-leak invariance test relies on
//! this for bit-exact agreement.

use ndarray::{Array1, Array2};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Param1 {
    pub v: Array1<f64>,
    pub g: Array1<f64>,
}

impl Param1 {
    pub fn zeros(n: usize) -> Self {
        Self { v: Array1::zeros(n), g: Array1::zeros(n) }
    }

    pub fn filled(n: usize, x: f64) -> Self {
        Self { v: Array1::from_elem(n, x), g: Array1::zeros(n) }
    }
}

#[derive(Debug, Clone)]
pub struct Param2 {
    pub v: Array2<f64>,
    pub g: Array2<f64>,
}

impl Param2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { v: Array2::zeros((rows, cols)), g: Array2::zeros((rows, cols)) }
    }

    /// Uniform Xavier/Glorot initialization.
    pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        let v = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s));
        Self { v, g: Array2::zeros((rows, cols)) }
    }
}

/// A named view of one parameter's flat value and gradient storage.
pub enum ParamMut<'a> {
    P1(&'a mut Param1),
    P2(&'a mut Param2),
}

impl ParamMut<'_> {
    pub fn value_slice(&mut self) -> &mut [f64] {
        match self {
            ParamMut::P1(p) => p.v.as_slice_mut().unwrap(),
            ParamMut::P2(p) => p.v.as_slice_mut().unwrap(),
        }
    }

    pub fn grad_slice(&mut self) -> &mut [f64] {
        match self {
            ParamMut::P1(p) => p.g.as_slice_mut().unwrap(),
            ParamMut::P2(p) => p.g.as_slice_mut().unwrap(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            ParamMut::P1(p) => vec![p.v.len()],
            ParamMut::P2(p) => p.v.shape().to_vec(),
        }
    }
}

pub type ParamVisitor<'a> = dyn FnMut(&str, ParamMut) + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Elu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let u = c * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let u = c * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = c * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// y = W x + b with W stored (out, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param2,
    pub b: Param1,
}

impl Linear {
    pub fn new<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        Self { w: Param2::xavier(out_dim, in_dim, rng), b: Param1::zeros(out_dim) }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.v.dot(x) + &self.b.v
    }

    /// Accumulates parameter grads; returns the input grad.
    pub fn backward(&mut self, x: &Array1<f64>, gy: &Array1<f64>) -> Array1<f64> {
        for (i, gyi) in gy.iter().enumerate() {
            self.b.g[i] += gyi;
            let mut row = self.w.g.row_mut(i);
            row.scaled_add(*gyi, x);
        }
        self.w.v.t().dot(gy)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.w"), ParamMut::P2(&mut self.w));
        f(&format!("{prefix}.b"), ParamMut::P1(&mut self.b));
    }
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input and post-activation outputs of each hidden layer.
    pub inputs: Vec<Array1<f64>>,
    /// Pre-activation values per hidden layer.
    pub pre: Vec<Array1<f64>>,
}

/// Feed-forward stack: activation after every layer except the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(dims: &[usize], act: Activation, rng: &mut R) -> Self {
        let layers = dims.windows(2).map(|w| Linear::new(w[1], w[0], rng)).collect();
        Self { layers, act }
    }

    pub fn forward(&self, x: &Array1<f64>) -> (Array1<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let y = layer.forward(&cur);
            if i < last {
                pre.push(y.clone());
                cur = y.mapv(|v| self.act.apply(v));
            } else {
                cur = y;
            }
        }
        (cur, MlpCache { inputs, pre })
    }

    pub fn backward(&mut self, cache: &MlpCache, gy: &Array1<f64>) -> Array1<f64> {
        let last = self.layers.len() - 1;
        let mut grad = gy.clone();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                let p = &cache.pre[i];
                grad = Array1::from_shape_fn(grad.len(), |k| grad[k] * self.act.derivative(p[k]));
            }
            grad = self.layers[i].backward(&cache.inputs[i], &grad);
        }
        grad
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&format!("{prefix}.{i}"), f);
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array1<f64>,
    pub inv_std: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param1,
    pub beta: Param1,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Param1::filled(dim, 1.0), beta: Param1::zeros(dim) }
    }

    pub fn forward(&self, x: &Array1<f64>) -> (Array1<f64>, LnCache) {
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.mapv(|v| (v - mean) * (v - mean)).sum() / n;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        let xhat = x.mapv(|v| (v - mean) * inv_std);
        let y = &xhat * &self.gamma.v + &self.beta.v;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LnCache, gy: &Array1<f64>) -> Array1<f64> {
        let n = gy.len() as f64;
        self.beta.g += gy;
        self.gamma.g += &(gy * &cache.xhat);
        let gxhat = gy * &self.gamma.v;
        let sum_g = gxhat.sum();
        let sum_gx = (&gxhat * &cache.xhat).sum();
        Array1::from_shape_fn(gy.len(), |k| {
            cache.inv_std * (gxhat[k] - sum_g / n - cache.xhat[k] * sum_gx / n)
        })
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor) {
        f(&format!("{prefix}.gamma"), ParamMut::P1(&mut self.gamma));
        f(&format!("{prefix}.beta"), ParamMut::P1(&mut self.beta));
    }
}
