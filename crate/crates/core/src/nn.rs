//! Minimal dense networks over flat parameter slices, with hand-written
//! backpropagation and an Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "elu" => Ok(Activation::Elu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            _ => Err(invalid_arg(format!("unknown activation {s:?}"))),
        }
    }

    #[inline]
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    fn grad(&self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected stack `sizes[0] → … → sizes[n]`. Hidden layers use
/// `activation`; the last layer uses `output_activation`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub output_activation: Activation,
}

/// Per-layer pre- and post-activations saved by [`Mlp::forward`].
#[derive(Clone, Debug, Default)]
pub struct Cache {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, activation: Activation, output_activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(invalid_arg(format!("bad layer sizes {sizes:?}")));
        }
        Ok(Mlp { sizes, activation, output_activation })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn act(&self, layer: usize) -> Activation {
        if layer + 1 == self.n_layers() {
            self.output_activation
        } else {
            self.activation
        }
    }

    /// Gaussian fan-in init; the last layer is multiplied by `last_gain`.
    /// Biases start at zero.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], last_gain: f64, rng: &mut R) {
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let gain = if l + 1 == self.n_layers() { last_gain } else { 2f64.sqrt() };
            let dist = Normal::new(0.0, gain / (n_in as f64).sqrt()).expect("positive std");
            for p in &mut params[off..off + n_in * n_out] {
                *p = dist.sample(rng);
            }
            off += n_in * n_out;
            params[off..off + n_out].fill(0.0);
            off += n_out;
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64], cache: &mut Cache) -> Vec<f64> {
        debug_assert_eq!(params.len(), self.n_params());
        debug_assert_eq!(x.len(), self.input_dim());
        cache.pre.clear();
        cache.post.clear();
        let mut h = x.to_vec();
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[off..off + n_in * n_out];
            let bias = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let mut z = bias.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &weights[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            }
            let act = self.act(l);
            let y: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            cache.post.push(std::mem::replace(&mut h, y));
            cache.pre.push(z);
        }
        cache.post.push(h.clone());
        h
    }

    pub fn predict(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward(params, x, &mut Cache::default())
    }

    /// Accumulate `∂L/∂θ` into `grad` given `∂L/∂y`; returns `∂L/∂x`.
    /// `cache.post[l]` is the input of layer `l`, `cache.post[n]` the output.
    pub fn backward(&self, params: &[f64], cache: &Cache, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.n_layers());
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut g = grad_out.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let act = self.act(l);
            let z = &cache.pre[l];
            let y = &cache.post[l + 1];
            for o in 0..n_out {
                g[o] *= act.grad(z[o], y[o]);
            }
            let input = &cache.post[l];
            let off = offsets[l];
            let weights = &params[off..off + n_in * n_out];
            let mut g_in = vec![0.0; n_in];
            for o in 0..n_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                let gw = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for i in 0..n_in {
                    gw[i] += go * input[i];
                }
                grad[off + n_in * n_out + o] += go;
                let row = &weights[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    g_in[i] += go * row[i];
                }
            }
            g = g_in;
        }
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Scale `grad` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if n > max_norm && n > 0.0 {
        let s = max_norm / n;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    n
}

/// Sum of per-item losses and gradients over `0..n_items`, evaluated in
/// parallel chunks and reduced in chunk order so the result does not depend
/// on scheduling.
pub fn parallel_grad<F>(n_items: usize, n_params: usize, chunk: usize, f: F) -> (f64, Vec<f64>)
where
    F: Fn(std::ops::Range<usize>, &mut [f64]) -> f64 + Sync,
{
    use rayon::prelude::*;
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..n_items).step_by(chunk).collect();
    let parts: Vec<(f64, Vec<f64>)> = starts
        .par_iter()
        .map(|&s| {
            let mut g = vec![0.0; n_params];
            let l = f(s..(s + chunk).min(n_items), &mut g);
            (l, g)
        })
        .collect();
    let mut grad = vec![0.0; n_params];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for act in [Activation::Elu, Activation::Tanh] {
            let net = Mlp::new(vec![4, 6, 5, 3], act, Activation::Tanh).unwrap();
            let mut params = vec![0.0; net.n_params()];
            net.init(&mut params, 1.0, &mut rng);
            params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |p: &[f64]| net.predict(p, &x).iter().zip(&c).map(|(y, c)| y * c).sum::<f64>();
            let mut cache = Cache::default();
            net.forward(&params, &x, &mut cache);
            let mut grad = vec![0.0; params.len()];
            let gx = net.backward(&params, &cache, &c, &mut grad);
            let h = 1e-6;
            for i in 0..params.len() {
                let mut a = params.clone();
                let mut b = params.clone();
                a[i] += h;
                b[i] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
            }
            for i in 0..4 {
                let mut xa = x.clone();
                xa[i] += h;
                let mut xb = x.clone();
                xb[i] -= h;
                let f = |xx: &[f64]| net.predict(&params, xx).iter().zip(&c).map(|(y, c)| y * c).sum::<f64>();
                let fd = (f(&xa) - f(&xb)) / (2.0 * h);
                assert!((fd - gx[i]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g, 0.05);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
    }

    #[test]
    fn clip_scales_to_bound() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1, 0.0];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.0]);
    }
}
