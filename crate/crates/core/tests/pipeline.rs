use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resco_core::copilot::{gae, MeanCopilot, Policy};
use resco_core::harness::{cell_seed, run_matrix, Aggregation, CellResult, CopilotEntry, EpisodeSummary, MatrixSpec, PilotEntry};
use resco_core::nn::Activation;
use resco_core::pilots::{GateConfig, PilotSpec};
use resco_core::rollout::{collect_demos, replay_episode, run_episode, Assist, EnvConfig};
use resco_core::seeds::episode_seed;
use resco_core::tasks::{TaskKind, TaskSpec};

fn seeds(n: u64, stream: &str) -> Vec<u64> {
    (0..n).map(|i| episode_seed(3, stream, i)).collect()
}

fn random_policy(seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Policy::new(vec![16, 8], Activation::Elu, -1.0, &mut rng).unwrap();
    // a visible residual so assisted runs actually differ
    let head = p.param_ranges()[1].clone();
    p.params[head].iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * ((i as f64) * 0.7).sin());
    p.obs_norm.freeze();
    p.value_norm.freeze();
    p
}

#[test]
fn collected_demos_replay_exactly() {
    for kind in TaskKind::ALL {
        let env = EnvConfig::new(TaskSpec::for_kind(kind));
        let data = collect_demos(&env, &PilotSpec::novice(), None, &seeds(3, "replay"), "novice").unwrap();
        for ep in &data.episodes {
            let r = replay_episode(&env, ep, None).unwrap();
            assert_eq!(r.max_state_error, 0.0, "{kind} episode {}", ep.id);
            assert!(r.outcome_matches, "{kind} episode {}", ep.id);
        }
    }
}

#[test]
fn assisted_demos_replay_with_the_checkpoint() {
    let env = EnvConfig::new(TaskSpec::peg());
    let policy = random_policy(4);
    let data = collect_demos(&env, &PilotSpec::novice(), Some(&policy), &seeds(2, "assisted"), "novice+copilot").unwrap();
    assert!(data.episodes.iter().all(|e| e.records.iter().all(|r| r.assisted)));
    for ep in &data.episodes {
        assert!(replay_episode(&env, ep, Some(&policy)).unwrap().passes(1e-9));
        assert!(replay_episode(&env, ep, None).is_err());
    }
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("p.ckpt");
    policy.save(&path).unwrap();
    let loaded = Policy::load(&path).unwrap();
    for ep in &data.episodes {
        assert!(replay_episode(&env, ep, Some(&loaded)).unwrap().passes(1e-9));
    }
}

#[test]
fn tampered_demos_fail_replay() {
    let env = EnvConfig::new(TaskSpec::gear());
    let mut data = collect_demos(&env, &PilotSpec::expert(), None, &seeds(1, "tamper"), "expert").unwrap();
    let ep = &mut data.episodes[0];
    ep.records[10].action.pose.p.x += 1e-3;
    let r = replay_episode(&env, ep, None).unwrap();
    assert!(!r.passes(1e-9));
}

#[test]
fn zeroed_head_copilot_matches_unassisted_runs() {
    let env = EnvConfig::new(TaskSpec::peg());
    let mut policy = random_policy(9);
    policy.zero_mean_head();
    let mut e = env.make_env();
    let mut pilot = PilotSpec::novice().build(&env.scale).unwrap();
    for s in seeds(4, "zero-head") {
        let plain = run_episode(&mut e, pilot.as_mut(), None, &env.scale, s, true).unwrap();
        let mut mc = MeanCopilot(&policy);
        let assisted = run_episode(&mut e, pilot.as_mut(), Some(&mut mc as &mut dyn Assist), &env.scale, s, true).unwrap();
        assert_eq!(plain.steps, assisted.steps);
        assert_eq!(plain.events, assisted.events);
        for (a, b) in plain.records.iter().zip(&assisted.records) {
            assert_eq!(a.state, b.state);
            assert_eq!(a.action, b.action);
        }
    }
}

#[test]
fn collection_is_repeatable_and_seed_sensitive() {
    let env = EnvConfig::new(TaskSpec::nut());
    let a = collect_demos(&env, &PilotSpec::novice(), None, &seeds(2, "c"), "n").unwrap().to_text();
    let b = collect_demos(&env, &PilotSpec::novice(), None, &seeds(2, "c"), "n").unwrap().to_text();
    let c = collect_demos(&env, &PilotSpec::novice(), None, &seeds(2, "d"), "n").unwrap().to_text();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn laggy_wrapper_repeats_at_its_rate() {
    let env = EnvConfig::new(TaskSpec::peg());
    let mut e = env.make_env();
    let mut p = PilotSpec::laggy(PilotSpec::expert()).build(&env.scale).unwrap();
    let (mut same, mut total) = (0u32, 0u32);
    for s in seeds(20, "lag") {
        e.reset(resco_core::rollout::env_seed(s));
        p.reset(resco_core::rollout::pilot_seed(s));
        let mut prev = None;
        let z = resco_core::se3::ResidualAction::zero();
        for _ in 0..60 {
            let a = p.act(&e.state, &e.spec).unwrap();
            if let Some(prev) = prev {
                total += 1;
                same += u32::from(prev == a);
            }
            prev = Some(a);
            if e.step(&a, &z, &z).unwrap().done {
                break;
            }
        }
    }
    let rate = f64::from(same) / f64::from(total);
    assert!((rate - 0.8).abs() < 0.05, "repeat rate {rate}");
}

#[test]
fn noisy_wrapper_perturbs_only_when_gate_opens() {
    let env = EnvConfig::new(TaskSpec::peg());
    let e = env.make_env();
    let closed = GateConfig { p_on: 0.0, ..GateConfig::default() };
    let mut quiet = PilotSpec::noisy(PilotSpec::expert(), closed).build(&env.scale).unwrap();
    let mut clean = PilotSpec::expert().build(&env.scale).unwrap();
    quiet.reset(1);
    clean.reset(1);
    assert_eq!(quiet.act(&e.state, &e.spec).unwrap(), clean.act(&e.state, &e.spec).unwrap());
    let mut loud = PilotSpec::noisy(PilotSpec::expert(), GateConfig { p_on: 1.0, ..GateConfig::default() }).build(&env.scale).unwrap();
    loud.reset(1);
    clean.reset(1);
    assert_ne!(loud.act(&e.state, &e.spec).unwrap(), clean.act(&e.state, &e.spec).unwrap());
}

fn small_matrix() -> MatrixSpec {
    let policy = Arc::new(random_policy(2));
    MatrixSpec {
        copilots: vec![CopilotEntry::none(), CopilotEntry { label: "rand".into(), policy: Some(policy) }],
        pilots: vec![PilotEntry::uniform("expert", PilotSpec::expert()), PilotEntry::uniform("laggy", PilotSpec::laggy(PilotSpec::expert()))],
        tasks: vec![EnvConfig::new(TaskSpec::peg()), EnvConfig::new(TaskSpec::nut())],
        episodes: 3,
        seed: 17,
        aggregation: Aggregation::Final,
    }
}

#[test]
fn matrix_is_complete_deterministic_and_recomputable() {
    let spec = small_matrix();
    let a = run_matrix(&spec).unwrap();
    let b = run_matrix(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2 * 2 * 2);
    for c in &a {
        assert_eq!(c.n, 3);
        let seeds: Vec<u64> = (0..3).map(|i| cell_seed(17, &c.copilot, &c.pilot, c.task, i)).collect();
        assert_eq!(c.episodes.iter().map(|e| e.seed).collect::<Vec<_>>(), seeds);
        // streaming (Welford) recomputation of mean and population std
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for e in &c.episodes {
            n += 1.0;
            let d = e.progression - mean;
            mean += d / n;
            m2 += d * (e.progression - mean);
        }
        assert!((mean - c.mean).abs() < 1e-9);
        assert!(((m2 / n).sqrt() - c.std).abs() < 1e-9);
    }
}

#[test]
fn single_cell_matches_a_direct_rollout() {
    let spec = small_matrix();
    let cells = run_matrix(&spec).unwrap();
    let c = cells.iter().find(|c| c.copilot == "none" && c.pilot == "laggy" && c.task == TaskKind::Peg).unwrap();
    let env = &spec.tasks[0];
    let mut e = env.make_env();
    let mut p = PilotSpec::laggy(PilotSpec::expert()).build(&env.scale).unwrap();
    let direct: Vec<EpisodeSummary> = c
        .episodes
        .iter()
        .map(|s| EpisodeSummary::from(&run_episode(&mut e, p.as_mut(), None, &env.scale, s.seed, false).unwrap()))
        .collect();
    assert_eq!(CellResult::aggregate("none", "laggy", TaskKind::Peg, direct, Aggregation::Final), *c);
}

/// Direct evaluation of `A_t = Σ_k (γλ)^k δ_{t+k}` truncated at episode ends.
fn gae_oracle(r: &[f64], v: &[f64], d: &[bool], last: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    let value_after = |t: usize| if d[t] { 0.0 } else if t + 1 < n { v[t + 1] } else { last };
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut w = 1.0;
            for k in t..n {
                sum += w * (r[k] + g * value_after(k) - v[k]);
                if d[k] {
                    break;
                }
                w *= g * l;
            }
            sum
        })
        .collect()
}

proptest! {
    #[test]
    fn gae_matches_direct_sum(steps in prop::collection::vec((-2.0f64..2.0, -3.0f64..3.0, prop::bool::weighted(0.15)), 1..40),
                              last in -3.0f64..3.0, g in 0.5f64..1.0, l in 0.0f64..1.0) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = gae(&r, &v, &d, last, g, l);
        let oracle = gae_oracle(&r, &v, &d, last, g, l);
        for t in 0..r.len() {
            prop_assert!((adv[t] - oracle[t]).abs() < 1e-9);
            prop_assert!((ret[t] - (oracle[t] + v[t])).abs() < 1e-9);
        }
    }
}
