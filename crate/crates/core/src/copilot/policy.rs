//! Actor-critic with a shared trunk, a tanh-squashed diagonal Gaussian
//! residual head and a scalar value head, over one flat parameter vector.

use std::f64::consts::{LN_2, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid_arg, Error, Result};
use crate::nn::{Activation, Cache, Mlp};
use crate::rollout::Assist;
use crate::se3::{ResidualAction, RunningNormalizer};
use crate::tasks::OBS_DIM;

pub const ACT_DIM: usize = ResidualAction::DIM;
const FORMAT: &str = "#resco-policy v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Stochastic,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub trunk: Mlp,
    pub mu_head: Mlp,
    pub value_head: Mlp,
    /// `[trunk | mu head | value head | log σ]`
    pub params: Vec<f64>,
    pub obs_norm: RunningNormalizer,
    /// Statistics of value targets; the value head predicts in normalized units.
    pub value_norm: RunningNormalizer,
}

/// Forward results kept for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct PolicyCache {
    pub trunk: Cache,
    pub mu: Cache,
    pub value: Cache,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub mu: [f64; ACT_DIM],
    pub log_std: [f64; ACT_DIM],
    /// Value in normalized units.
    pub value: f64,
}

/// Stable `log(1 - tanh(u)^2)`.
pub fn log_squash_jacobian(u: f64) -> f64 {
    let x = -2.0 * u;
    let softplus = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    2.0 * (LN_2 - u - softplus)
}

/// Diagonal Gaussian log density of pre-squash `u`.
pub fn gaussian_log_prob(u: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    let mut lp = 0.0;
    for j in 0..u.len() {
        let z = (u[j] - mu[j]) / log_std[j].exp();
        lp += -0.5 * z * z - log_std[j] - 0.5 * (2.0 * PI).ln();
    }
    lp
}

/// Log density of the squashed action `tanh(u)`.
pub fn squashed_log_prob(u: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    gaussian_log_prob(u, mu, log_std) - u.iter().map(|&x| log_squash_jacobian(x)).sum::<f64>()
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(hidden: Vec<usize>, activation: Activation, init_log_std: f64, rng: &mut R) -> Result<Self> {
        if hidden.is_empty() {
            return Err(invalid_arg("policy trunk needs at least one hidden layer"));
        }
        let mut sizes = vec![OBS_DIM];
        sizes.extend(&hidden);
        let trunk = Mlp::new(sizes, activation, activation)?;
        let h = *hidden.last().expect("non-empty");
        let mu_head = Mlp::new(vec![h, ACT_DIM], Activation::Identity, Activation::Identity)?;
        let value_head = Mlp::new(vec![h, 1], Activation::Identity, Activation::Identity)?;
        let n = trunk.n_params() + mu_head.n_params() + value_head.n_params() + ACT_DIM;
        let mut params = vec![0.0; n];
        let (a, b, c) = (trunk.n_params(), mu_head.n_params(), value_head.n_params());
        trunk.init(&mut params[..a], 2f64.sqrt(), rng);
        mu_head.init(&mut params[a..a + b], 0.01, rng);
        value_head.init(&mut params[a + b..a + b + c], 1.0, rng);
        params[a + b + c..].fill(init_log_std);
        Ok(Policy {
            hidden,
            activation,
            trunk,
            mu_head,
            value_head,
            params,
            obs_norm: RunningNormalizer::new(OBS_DIM),
            value_norm: RunningNormalizer::new(1),
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter ranges of the trunk, mean head, value head and log σ.
    pub fn param_ranges(&self) -> [std::ops::Range<usize>; 4] {
        let a = self.trunk.n_params();
        let b = a + self.mu_head.n_params();
        let c = b + self.value_head.n_params();
        [0..a, a..b, b..c, c..c + ACT_DIM]
    }

    pub fn log_std(&self) -> &[f64] {
        let r = self.param_ranges();
        &self.params[r[3].clone()]
    }

    /// Zero the mean head so the policy's mean residual is exactly zero.
    pub fn zero_mean_head(&mut self) {
        let r = self.param_ranges();
        self.params[r[1].clone()].fill(0.0);
    }

    pub fn normalize_obs(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != OBS_DIM {
            return Err(invalid_arg(format!("observation has {} entries, expected {OBS_DIM}", obs.len())));
        }
        self.obs_norm.normalize(obs)
    }

    /// Forward pass on an already normalized observation.
    pub fn forward_with(&self, params: &[f64], x: &[f64], cache: &mut PolicyCache) -> PolicyOutput {
        let [rt, rm, rv, rs] = self.param_ranges();
        let h = self.trunk.forward(&params[rt], x, &mut cache.trunk);
        let m = self.mu_head.forward(&params[rm], &h, &mut cache.mu);
        let v = self.value_head.forward(&params[rv], &h, &mut cache.value);
        let mut mu = [0.0; ACT_DIM];
        mu.copy_from_slice(&m);
        let mut log_std = [0.0; ACT_DIM];
        log_std.copy_from_slice(&params[rs]);
        PolicyOutput { mu, log_std, value: v[0] }
    }

    pub fn forward(&self, x: &[f64], cache: &mut PolicyCache) -> PolicyOutput {
        self.forward_with(&self.params, x, cache)
    }

    /// Backpropagate head gradients `(∂L/∂μ, ∂L/∂V)`; `∂L/∂logσ` is added
    /// separately by the caller.
    pub fn backward_with(&self, params: &[f64], cache: &PolicyCache, g_mu: &[f64], g_v: f64, grad: &mut [f64]) {
        let [rt, rm, rv, _] = self.param_ranges();
        let mut gh = self.mu_head.backward(&params[rm.clone()], &cache.mu, g_mu, &mut grad[rm]);
        let gv = self.value_head.backward(&params[rv.clone()], &cache.value, &[g_v], &mut grad[rv]);
        gh.iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
        self.trunk.backward(&params[rt.clone()], &cache.trunk, &gh, &mut grad[rt]);
    }

    /// Gaussian log density of `u` given a normalized observation, with its
    /// parameter gradient.
    pub fn log_prob_and_grad(&self, params: &[f64], x: &[f64], u: &[f64]) -> (f64, Vec<f64>) {
        let mut cache = PolicyCache::default();
        let out = self.forward_with(params, x, &mut cache);
        let lp = gaussian_log_prob(u, &out.mu, &out.log_std);
        let mut grad = vec![0.0; params.len()];
        let mut g_mu = [0.0; ACT_DIM];
        let off = self.log_std_offset();
        for j in 0..ACT_DIM {
            let sigma = out.log_std[j].exp();
            let z = (u[j] - out.mu[j]) / sigma;
            g_mu[j] = z / sigma;
            grad[off + j] = z * z - 1.0;
        }
        self.backward_with(params, &cache, &g_mu, 0.0, &mut grad);
        (lp, grad)
    }

    pub fn log_std_offset(&self) -> usize {
        self.param_ranges()[3].start
    }

    /// Sample (or take the mean of) the residual for a raw observation.
    /// Returns the squashed residual, the pre-squash sample and its log density.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], mode: Mode, rng: &mut R) -> Result<(ResidualAction, [f64; ACT_DIM], f64)> {
        let x = self.normalize_obs(obs)?;
        let out = self.forward(&x, &mut PolicyCache::default());
        let mut u = out.mu;
        if mode == Mode::Stochastic {
            for j in 0..ACT_DIM {
                let e: f64 = StandardNormal.sample(rng);
                u[j] += out.log_std[j].exp() * e;
            }
        }
        let lp = squashed_log_prob(&u, &out.mu, &out.log_std);
        let a: Vec<f64> = u.iter().map(|x| x.tanh()).collect();
        Ok((ResidualAction::from_slice(&a)?, u, lp))
    }

    /// Deterministic residual `tanh(μ)`.
    pub fn mean_action(&self, obs: &[f64]) -> Result<ResidualAction> {
        let x = self.normalize_obs(obs)?;
        let out = self.forward(&x, &mut PolicyCache::default());
        let a: Vec<f64> = out.mu.iter().map(|x| x.tanh()).collect();
        ResidualAction::from_slice(&a)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT}");
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(
            s,
            "arch obs={OBS_DIM} act={ACT_DIM} hidden={} activation={}",
            hidden.join(","),
            self.activation.name()
        );
        let mut row = |name: &str, xs: &[f64]| {
            let _ = write!(s, "{name} {}", xs.len());
            for x in xs {
                let _ = write!(s, " {x:.16e}");
            }
            s.push('\n');
        };
        row("params", &self.params);
        row("obs_mean", &self.obs_norm.mean);
        row("obs_var", &self.obs_norm.var);
        row("value_mean", &self.value_norm.mean);
        row("value_var", &self.value_norm.var);
        let _ = writeln!(s, "counts {} {}", self.obs_norm.count, self.value_norm.count);
        s
    }

    /// Write a checkpoint. Loaded policies always have frozen statistics.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Policy> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Policy> {
        let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&FORMAT) {
            return Err(err(1, format!("expected header {FORMAT:?}")));
        }
        let arch = lines.get(1).ok_or_else(|| err(2, "missing arch line".into()))?;
        let mut f = arch.split_whitespace();
        if f.next() != Some("arch") {
            return Err(err(2, "missing arch line".into()));
        }
        let (mut hidden, mut activation) = (None, None);
        for kv in f {
            let (k, v) = kv.split_once('=').ok_or_else(|| err(2, format!("bad field {kv:?}")))?;
            match (k, v) {
                ("obs", v) if v == OBS_DIM.to_string() => {}
                ("act", v) if v == ACT_DIM.to_string() => {}
                ("hidden", v) => {
                    hidden = Some(v.split(',').map(|h| h.parse::<usize>()).collect::<Result<Vec<_>, _>>().map_err(|e| err(2, e.to_string()))?)
                }
                ("activation", v) => activation = Some(Activation::parse(v).map_err(|e| err(2, e.to_string()))?),
                _ => return Err(err(2, format!("unsupported arch field {kv:?}"))),
            }
        }
        let hidden = hidden.ok_or_else(|| err(2, "arch lacks hidden".into()))?;
        let activation = activation.ok_or_else(|| err(2, "arch lacks activation".into()))?;
        let mut p = Policy::new(hidden, activation, 0.0, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0)).map_err(|e| err(2, e.to_string()))?;

        let row = |i: usize, name: &str, n: usize| -> Result<Vec<f64>> {
            let line = lines.get(i).ok_or_else(|| err(i + 1, format!("missing {name}")))?;
            let mut f = line.split_whitespace();
            if f.next() != Some(name) {
                return Err(err(i + 1, format!("expected {name}")));
            }
            let count: usize = f.next().and_then(|c| c.parse().ok()).ok_or_else(|| err(i + 1, "bad length".into()))?;
            if count != n {
                return Err(err(i + 1, format!("{name} has {count} values, architecture needs {n}")));
            }
            let xs: Vec<f64> = f.map(|x| x.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| err(i + 1, e.to_string()))?;
            if xs.len() != n || !xs.iter().all(|x| x.is_finite()) {
                return Err(err(i + 1, format!("{name} must hold {n} finite values")));
            }
            Ok(xs)
        };
        p.params = row(2, "params", p.n_params())?;
        p.obs_norm.mean = row(3, "obs_mean", OBS_DIM)?;
        p.obs_norm.var = row(4, "obs_var", OBS_DIM)?;
        p.value_norm.mean = row(5, "value_mean", 1)?;
        p.value_norm.var = row(6, "value_var", 1)?;
        let counts: Vec<u64> = lines
            .get(7)
            .and_then(|l| l.strip_prefix("counts "))
            .map(|l| l.split_whitespace().map(|c| c.parse::<u64>()).collect::<Result<_, _>>())
            .transpose()
            .map_err(|e| err(8, e.to_string()))?
            .filter(|c: &Vec<u64>| c.len() == 2)
            .ok_or_else(|| err(8, "missing counts".into()))?;
        p.obs_norm.count = counts[0];
        p.value_norm.count = counts[1];
        if p.obs_norm.var.iter().chain(&p.value_norm.var).any(|v| *v < 0.0) {
            return Err(err(4, "negative variance".into()));
        }
        p.obs_norm.freeze();
        p.value_norm.freeze();
        Ok(p)
    }
}

/// Deterministic copilot for deployment and evaluation.
pub struct MeanCopilot<'a>(pub &'a Policy);

impl Assist for MeanCopilot<'_> {
    fn residual(&mut self, obs: &[f64; OBS_DIM]) -> Result<ResidualAction> {
        self.0.mean_action(obs)
    }
}
