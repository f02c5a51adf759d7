//! Non-parametric human surrogate: retrieve nearby demonstrated commands,
//! replay a short chunk of the chosen episode, optionally perturb it.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_state, Result};
use crate::pilots::dataset::DemoDataset;
use crate::pilots::noise::{gated_noise, GateConfig, GateState};
use crate::pilots::Pilot;
use crate::se3::{compose_residual, geodesic, BaseAction, ResidualScale};
use crate::tasks::{layout, observe_state, EnvState, TaskSpec};

/// Weights on translation (per meter), rotation (per radian) and gripper.
pub type Weights = [f64; 3];

pub fn action_distance(a: &BaseAction, b: &BaseAction, w: &Weights) -> f64 {
    let [dp, dr, du] = components(a, b);
    w[0] * dp + w[1] * dr + w[2] * du
}

fn components(a: &BaseAction, b: &BaseAction) -> [f64; 3] {
    [(a.pose.p - b.pose.p).norm(), geodesic(&a.pose.q, &b.pose.q), (a.gripper - b.gripper).abs()]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    pub tau: f64,
    pub weights: Weights,
    pub chunk_min: usize,
    pub chunk_max: usize,
    pub noise_enabled: bool,
    pub noise: GateConfig,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig {
            k: 5,
            tau: 0.05,
            weights: [1.0, 1.0, 1.0],
            chunk_min: 5,
            chunk_max: 15,
            noise_enabled: true,
            noise: GateConfig::default(),
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.tau > 0.0) {
            return Err(invalid_arg("knn needs k >= 1 and tau > 0"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().all(|w| *w == 0.0) {
            return Err(invalid_arg(format!("knn weights {:?} must be >= 0 with one positive", self.weights)));
        }
        if self.chunk_min == 0 || self.chunk_min > self.chunk_max {
            return Err(invalid_arg("knn chunk range must satisfy 1 <= min <= max"));
        }
        self.noise.validate()
    }
}

/// Stored commands flattened in dataset order.
#[derive(Debug)]
pub struct KnnIndex {
    pub data: Arc<DemoDataset>,
    /// `(episode, record)` for each flat index.
    pub slots: Vec<(usize, usize)>,
    pub commands: Vec<BaseAction>,
}

impl KnnIndex {
    pub fn new(data: Arc<DemoDataset>) -> Self {
        let mut slots = Vec::new();
        let mut commands = Vec::new();
        for (e, ep) in data.episodes.iter().enumerate() {
            for (r, rec) in ep.records.iter().enumerate() {
                slots.push((e, r));
                commands.push(rec.action);
            }
        }
        KnnIndex { data, slots, commands }
    }

    /// `k` nearest commands as `(distance, flat index)`, ascending, ties broken by index.
    pub fn nearest(&self, query: &BaseAction, k: usize, w: &Weights) -> Vec<(f64, usize)> {
        let mut all: Vec<(f64, usize)> =
            self.commands.iter().enumerate().map(|(i, c)| (action_distance(query, c, w), i)).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let k = k.min(all.len());
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, cmp);
            all.truncate(k);
        }
        all.sort_by(cmp);
        all
    }
}

/// Softmax of `-d/τ`, shifted by the smallest distance for stability.
pub fn softmax_probabilities(dists: &[f64], tau: f64) -> Vec<f64> {
    let d0 = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = dists.iter().map(|d| (-(d - d0) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Clone, Copy, Debug)]
struct Chunk {
    episode: usize,
    next: usize,
    remaining: usize,
}

pub struct KnnPilot {
    index: Arc<KnnIndex>,
    cfg: KnnConfig,
    scale: ResidualScale,
    rng: ChaCha8Rng,
    chunk: Option<Chunk>,
    gate: GateState,
}

impl KnnPilot {
    pub fn new(index: Arc<KnnIndex>, cfg: KnnConfig, scale: ResidualScale) -> Result<Self> {
        cfg.validate()?;
        Ok(KnnPilot { index, cfg, scale, rng: ChaCha8Rng::seed_from_u64(0), chunk: None, gate: GateState::default() })
    }

    pub fn config(&self) -> &KnnConfig {
        &self.cfg
    }

    /// Pick a neighbor for `query` and return its flat index.
    pub fn select(&mut self, query: &BaseAction) -> Result<usize> {
        if self.index.commands.is_empty() {
            return Err(invalid_state("knn pilot has an empty dataset"));
        }
        let near = self.index.nearest(query, self.cfg.k, &self.cfg.weights);
        let d: Vec<f64> = near.iter().map(|n| n.0).collect();
        let probs = softmax_probabilities(&d, self.cfg.tau);
        Ok(near[sample_categorical(&probs, &mut self.rng)].1)
    }

    /// Next command for a proprioceptive query, before noise.
    pub fn next_command(&mut self, query: &BaseAction) -> Result<BaseAction> {
        if self.chunk.is_none_or(|c| c.remaining == 0) {
            let pick = self.select(query)?;
            let (episode, record) = self.index.slots[pick];
            let len = self.rng.random_range(self.cfg.chunk_min..=self.cfg.chunk_max);
            let left = self.index.data.episodes[episode].records.len() - record;
            self.chunk = Some(Chunk { episode, next: record, remaining: len.min(left) });
        }
        let c = self.chunk.as_mut().expect("chunk loaded above");
        let a = self.index.data.episodes[c.episode].records[c.next].action;
        c.next += 1;
        c.remaining -= 1;
        Ok(a)
    }

    pub fn step(&mut self, query: &BaseAction) -> Result<BaseAction> {
        let a = self.next_command(query)?;
        if !self.cfg.noise_enabled {
            return Ok(a);
        }
        let d = gated_noise(&mut self.gate, &self.cfg.noise, &mut self.rng);
        Ok(compose_residual(&a, &d, &self.scale))
    }
}

/// Proprioceptive command-space embedding of a 20D state.
pub fn proprio_query(state: &[f64]) -> Result<BaseAction> {
    BaseAction::from_array(&state[layout::PROPRIO])
}

impl Pilot for KnnPilot {
    fn name(&self) -> &str {
        "knn"
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.chunk = None;
        self.gate = GateState::default();
    }

    fn act(&mut self, state: &EnvState, _spec: &TaskSpec) -> Result<BaseAction> {
        let query = proprio_query(&observe_state(state))?;
        self.step(&query)
    }
}

pub fn default_grid() -> Vec<Weights> {
    const G: [f64; 5] = [0.1, 0.3, 1.0, 3.0, 10.0];
    let mut out = Vec::with_capacity(125);
    for a in G {
        for b in G {
            for c in G {
                out.push([a, b, c]);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFit {
    pub weights: Weights,
    pub score: f64,
    /// Score of every grid candidate, in grid order.
    pub scores: Vec<f64>,
}

/// Grid search for the weights minimizing leave-one-episode-out nearest
/// neighbor prediction error (position RMSE + rotation RMSE + gripper RMSE).
pub fn fit_weights(data: &DemoDataset, grid: &[Weights]) -> Result<WeightFit> {
    if data.is_empty() {
        return Err(invalid_arg("cannot fit knn weights on an empty dataset"));
    }
    let live: Vec<usize> = (0..data.episodes.len()).filter(|&e| !data.episodes[e].records.is_empty()).collect();
    if live.len() < 2 {
        return Err(invalid_arg("fitting knn weights needs at least two non-empty episodes"));
    }
    if grid.is_empty() {
        return Err(invalid_arg("empty weight grid"));
    }
    for w in grid {
        if w.iter().any(|x| !(*x >= 0.0)) || w.iter().all(|x| *x == 0.0) {
            return Err(invalid_arg(format!("grid weights {w:?} must be >= 0 with one positive")));
        }
    }
    let mut owner = Vec::new();
    let mut commands = Vec::new();
    for (e, ep) in data.episodes.iter().enumerate() {
        for r in &ep.records {
            owner.push(e);
            commands.push(r.action);
        }
    }
    let queries: Vec<(usize, BaseAction, BaseAction)> = data
        .episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| ep.records.iter().map(move |r| (e, r)))
        .map(|(e, r)| Ok((e, proprio_query(&r.state)?, r.action)))
        .collect::<Result<_>>()?;

    let per_query: Vec<Vec<[f64; 3]>> = queries
        .par_iter()
        .map(|(e, q, target)| {
            let cand: Vec<(usize, [f64; 3])> =
                (0..commands.len()).filter(|&j| owner[j] != *e).map(|j| (j, components(q, &commands[j]))).collect();
            grid.iter()
                .map(|w| {
                    let mut best = (f64::INFINITY, usize::MAX);
                    for (j, c) in &cand {
                        let d = w[0] * c[0] + w[1] * c[1] + w[2] * c[2];
                        if d < best.0 {
                            best = (d, *j);
                        }
                    }
                    let err = components(&commands[best.1], target);
                    [err[0] * err[0], err[1] * err[1], err[2] * err[2]]
                })
                .collect()
        })
        .collect();

    let n = queries.len() as f64;
    let mut scores = vec![0.0; grid.len()];
    for (g, score) in scores.iter_mut().enumerate() {
        let mut sums = [0.0; 3];
        for q in &per_query {
            for k in 0..3 {
                sums[k] += q[g][k];
            }
        }
        *score = sums.iter().map(|s| (s / n).sqrt()).sum();
    }
    let mut best = 0;
    for g in 1..grid.len() {
        let better = scores[g] < scores[best];
        let tie_smaller = scores[g] == scores[best] && grid[g].partial_cmp(&grid[best]) == Some(std::cmp::Ordering::Less);
        if better || tie_smaller {
            best = g;
        }
    }
    Ok(WeightFit { weights: grid[best], score: scores[best], scores })
}
