//! Feedforward behavior-cloning pilot: regress the 8D command on the 20D state.
//! The network predicts the target relative to the current end-effector pose
//! (translation offset, rotation vector, gripper). The gripper output is
//! decoded by its sign, since demonstrated gripper commands are open/close.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::nn::{parallel_grad, Activation, Adam, Cache, Mlp};
use crate::pilots::dataset::DemoDataset;
use crate::pilots::Pilot;
use crate::se3::{axis_angle_to_quat, quat_from_wxyz, quat_to_axis_angle, BaseAction, Pose, RunningNormalizer, Vec3};
use crate::tasks::{layout, observe_state, EnvState, TaskSpec, STATE_DIM};

/// Width of the regression target.
pub const TARGET_DIM: usize = 7;

/// Smallest input standard deviation used for normalization. Inputs that
/// never vary in the demonstrations (orientation on the peg task, say) would
/// otherwise turn rounding noise into saturated features.
pub const INPUT_STD_FLOOR: f64 = 1e-2;

fn ee_pose(state: &[f64]) -> Pose {
    let p = &state[layout::EE_POS];
    let q = &state[layout::EE_QUAT];
    let q = if q.iter().all(|v| *v == 0.0) { quat_from_wxyz(1.0, 0.0, 0.0, 0.0) } else { quat_from_wxyz(q[0], q[1], q[2], q[3]) };
    Pose::new(Vec3::new(p[0], p[1], p[2]), q)
}

/// Command expressed relative to the end-effector pose in `state`.
pub fn encode_target(state: &[f64], a: &BaseAction) -> [f64; TARGET_DIM] {
    let ee = ee_pose(state);
    let dp = a.pose.p - ee.p;
    let dr = quat_to_axis_angle(&(a.pose.q * ee.q.inverse()));
    [dp.x, dp.y, dp.z, dr.x, dr.y, dr.z, a.gripper]
}

pub fn decode_target(state: &[f64], y: &[f64]) -> BaseAction {
    let ee = ee_pose(state);
    let q = axis_angle_to_quat(&Vec3::new(y[3], y[4], y[5])) * ee.q;
    BaseAction::new(Pose::new(ee.p + Vec3::new(y[0], y[1], y[2]), quat_from_wxyz(q.w, q.i, q.j, q.k)), if y[6] >= 0.0 { 1.0 } else { -1.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BcOptimizer {
    Adam,
    /// Plain gradient descent.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    /// Minibatch size; `0` means full batch.
    pub batch: usize,
    pub optimizer: BcOptimizer,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig { hidden: vec![128, 128], epochs: 150, lr: 1e-3, batch: 256, optimizer: BcOptimizer::Adam, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BcModel {
    pub net: Mlp,
    pub params: Vec<f64>,
    pub input_norm: RunningNormalizer,
    pub output_norm: RunningNormalizer,
}

impl BcModel {
    pub fn predict(&self, state: &[f64]) -> Result<BaseAction> {
        let x = self.input_norm.normalize(state)?;
        let y = self.output_norm.denormalize(&self.net.predict(&self.params, &x))?;
        Ok(decode_target(state, &y))
    }
}

#[derive(Clone, Debug)]
pub struct BcFit {
    pub model: BcModel,
    /// Mean squared error over the training set after each epoch.
    pub losses: Vec<f64>,
}

fn dataset_loss(net: &Mlp, params: &[f64], xs: &[Vec<f64>], ys: &[Vec<f64>], idx: &[usize]) -> (f64, Vec<f64>) {
    let n_out = net.output_dim() as f64;
    parallel_grad(idx.len(), net.n_params(), 32, |range, g| {
        let mut cache = Cache::default();
        let mut loss = 0.0;
        for &i in &idx[range] {
            let out = net.forward(params, &xs[i], &mut cache);
            let diff: Vec<f64> = out.iter().zip(&ys[i]).map(|(a, b)| a - b).collect();
            loss += diff.iter().map(|d| d * d).sum::<f64>() / n_out;
            let go: Vec<f64> = diff.iter().map(|d| 2.0 * d / n_out).collect();
            net.backward(params, &cache, &go, g);
        }
        loss
    })
}

pub fn fit_bc(data: &DemoDataset, cfg: &BcConfig) -> Result<BcFit> {
    let records: Vec<_> = data.episodes.iter().flat_map(|e| &e.records).collect();
    if records.is_empty() {
        return Err(invalid_arg("cannot fit a bc pilot on an empty dataset"));
    }
    if cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(invalid_arg("bc needs epochs >= 1 and lr > 0"));
    }
    let mut input_norm = RunningNormalizer::new(STATE_DIM);
    let mut output_norm = RunningNormalizer::new(TARGET_DIM);
    let targets: Vec<[f64; TARGET_DIM]> = records.iter().map(|r| encode_target(&r.state, &r.action)).collect();
    for (r, t) in records.iter().zip(&targets) {
        input_norm.update(&r.state)?;
        output_norm.update(t)?;
    }
    input_norm.var.iter_mut().for_each(|v| *v = v.max(INPUT_STD_FLOOR * INPUT_STD_FLOOR));
    input_norm.freeze();
    output_norm.freeze();
    let xs: Vec<Vec<f64>> = records.iter().map(|r| input_norm.normalize(&r.state)).collect::<Result<_>>()?;
    let ys: Vec<Vec<f64>> = targets.iter().map(|t| output_norm.normalize(t)).collect::<Result<_>>()?;

    let mut sizes = vec![STATE_DIM];
    sizes.extend(&cfg.hidden);
    sizes.push(TARGET_DIM);
    let net = Mlp::new(sizes, Activation::Elu, Activation::Identity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = vec![0.0; net.n_params()];
    net.init(&mut params, 1.0, &mut rng);
    let mut adam = Adam::new(params.len());

    let n = xs.len();
    let batch = if cfg.batch == 0 { n } else { cfg.batch.min(n) };
    let mut order: Vec<usize> = (0..n).collect();
    let all: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        for mb in order.chunks(batch) {
            let (_, mut g) = dataset_loss(&net, &params, &xs, &ys, mb);
            g.iter_mut().for_each(|v| *v /= mb.len() as f64);
            match cfg.optimizer {
                BcOptimizer::Adam => adam.step(&mut params, &g, cfg.lr),
                BcOptimizer::Sgd => params.iter_mut().zip(&g).for_each(|(p, d)| *p -= cfg.lr * d),
            }
        }
        let (loss, _) = dataset_loss(&net, &params, &xs, &ys, &all);
        let loss = loss / n as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("bc loss became {loss} at epoch {epoch} (lr {}, {} samples)", cfg.lr, n)));
        }
        losses.push(loss);
    }
    Ok(BcFit { model: BcModel { net, params, input_norm, output_norm }, losses })
}

pub struct BcPilot {
    model: Arc<BcModel>,
}

impl BcPilot {
    pub fn new(model: Arc<BcModel>) -> Self {
        BcPilot { model }
    }
}

impl Pilot for BcPilot {
    fn name(&self) -> &str {
        "bc"
    }

    fn reset(&mut self, _seed: u64) {}

    fn act(&mut self, state: &EnvState, _spec: &TaskSpec) -> Result<BaseAction> {
        self.model.predict(&observe_state(state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilots::dataset::{Episode, Record};
    use crate::tasks::TaskKind;
    use rand::Rng;

    fn dataset(f: impl Fn(&[f64; STATE_DIM]) -> BaseAction, n: usize, seed: u64) -> DemoDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = DemoDataset::new(TaskKind::Peg, "synthetic");
        let records = (0..n)
            .map(|t| {
                let mut s = [0.0; STATE_DIM];
                s.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                Record { t: t as u64, state: s, action: f(&s), assisted: false }
            })
            .collect();
        ds.episodes.push(Episode { id: 0, records, outcome: None });
        ds
    }

    /// A valid end-effector pose in the first seven state slots.
    fn with_pose(mut s: [f64; STATE_DIM]) -> [f64; STATE_DIM] {
        let q = quat_from_wxyz(1.0 + s[3].abs(), s[4], s[5], s[6]);
        s[3..7].copy_from_slice(&crate::se3::quat_to_wxyz(&q));
        s
    }

    #[test]
    fn target_encoding_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let mut s = [0.0; STATE_DIM];
            s.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let s = with_pose(s);
            let r = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let a = BaseAction::new(Pose::new(Vec3::new(0.1, -0.2, 0.3), axis_angle_to_quat(&r)), -1.0);
            let b = decode_target(&s, &encode_target(&s, &a));
            assert!((a.pose.p - b.pose.p).norm() < 1e-12);
            assert!(crate::se3::geodesic(&a.pose.q, &b.pose.q) < 1e-9);
            assert_eq!(b.gripper, -1.0);
        }
    }

    #[test]
    fn constant_offset_is_reproduced() {
        // always command 2 cm above the current pose with the gripper closed
        let above = |s: &[f64]| {
            let ee = ee_pose(s);
            BaseAction::new(Pose::new(ee.p + Vec3::new(0.0, 0.0, 0.02), ee.q), -1.0)
        };
        let mut ds = dataset(|_| BaseAction::new(Pose::identity(), 0.0), 64, 1);
        for r in &mut ds.episodes[0].records {
            r.state = with_pose(r.state);
            r.action = above(&r.state);
        }
        let fit = fit_bc(&ds, &BcConfig { hidden: vec![16], epochs: 5, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let mut s = [0.0; STATE_DIM];
            s.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
            let s = with_pose(s);
            let p = fit.model.predict(&s).unwrap();
            let ee = ee_pose(&s);
            assert!((p.pose.p - ee.p - Vec3::new(0.0, 0.0, 0.02)).norm() < 1e-3);
            assert!(crate::se3::geodesic(&p.pose.q, &ee.q) < 1e-3);
            assert_eq!(p.gripper, -1.0);
        }
    }

    #[test]
    fn linear_task_loss_decreases_monotonically() {
        let ds = dataset(|s| BaseAction::new(Pose::from_translation(Vec3::new(s[0] - 0.5 * s[1], 0.3 * s[2], s[3] + s[4])), 0.5 * s[5]), 200, 3);
        let cfg = BcConfig { hidden: vec![], epochs: 50, lr: 0.05, batch: 0, optimizer: BcOptimizer::Sgd, seed: 1 };
        let fit = fit_bc(&ds, &cfg).unwrap();
        for w in fit.losses.windows(2) {
            assert!(w[1] < w[0], "{:?}", fit.losses);
        }
    }

    #[test]
    fn outputs_unit_quaternions() {
        let ds = dataset(|s| BaseAction::new(Pose::new(Vec3::zeros(), quat_from_wxyz(1.0, s[0], s[1], s[2])), s[3]), 100, 4);
        let fit = fit_bc(&ds, &BcConfig { hidden: vec![8], epochs: 3, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut s = [0.0; STATE_DIM];
            s.iter_mut().for_each(|v| *v = rng.random_range(-10.0..10.0));
            let a = fit.model.predict(&s).unwrap();
            assert!((a.pose.q.into_inner().norm() - 1.0).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&a.gripper));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let ds = dataset(|s| BaseAction::new(Pose::from_translation(Vec3::new(s[0], 0.0, 0.0)), 0.0), 50, 6);
        let cfg = BcConfig { hidden: vec![], epochs: 200, lr: 1e6, batch: 0, optimizer: BcOptimizer::Sgd, seed: 0 };
        assert!(matches!(fit_bc(&ds, &cfg), Err(Error::Diverged(_))));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(fit_bc(&DemoDataset::new(TaskKind::Nut, "x"), &BcConfig::default()).is_err());
    }
}
