//! Batch evaluation: copilot × pilot × task matrices and the distillation
//! comparison between assisted and unassisted demonstration sets.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copilot::{MeanCopilot, Policy};
use crate::error::{invalid_arg, Result};
use crate::pilots::{fit_bc, BcConfig, DemoDataset, Episode, PilotSpec};
use crate::rollout::{run_episode, Assist, EnvConfig, EpisodeLog};
use crate::seeds::episode_seed;
use crate::tasks::TaskKind;

/// Label of the unassisted row.
pub const NO_COPILOT: &str = "none";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Progression at the last step of each episode.
    #[default]
    Final,
    /// Highest progression reached during each episode.
    Max,
}

#[derive(Clone, Debug)]
pub struct CopilotEntry {
    pub label: String,
    pub policy: Option<Arc<Policy>>,
}

impl CopilotEntry {
    pub fn none() -> Self {
        CopilotEntry { label: NO_COPILOT.into(), policy: None }
    }
}

/// One evaluation pilot, possibly with a different recipe per task (fitted
/// pilots are task specific).
#[derive(Clone, Debug)]
pub struct PilotEntry {
    pub label: String,
    pub per_task: Vec<(TaskKind, PilotSpec)>,
}

impl PilotEntry {
    pub fn uniform(label: impl Into<String>, spec: PilotSpec) -> Self {
        PilotEntry { label: label.into(), per_task: TaskKind::ALL.iter().map(|k| (*k, spec.clone())).collect() }
    }

    pub fn for_task(&self, task: TaskKind) -> Option<&PilotSpec> {
        self.per_task.iter().find(|(k, _)| *k == task).map(|(_, s)| s)
    }
}

#[derive(Clone, Debug)]
pub struct MatrixSpec {
    pub copilots: Vec<CopilotEntry>,
    pub pilots: Vec<PilotEntry>,
    pub tasks: Vec<EnvConfig>,
    pub episodes: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
}

impl MatrixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.copilots.is_empty() || self.pilots.is_empty() || self.tasks.is_empty() {
            return Err(invalid_arg("evaluation matrix needs at least one copilot, pilot and task"));
        }
        if self.episodes == 0 {
            return Err(invalid_arg("evaluation needs at least one episode per cell"));
        }
        for env in &self.tasks {
            env.validate()?;
            for p in &self.pilots {
                if p.for_task(env.spec.kind).is_none() {
                    return Err(invalid_arg(format!("pilot {} has no recipe for task {}", p.label, env.spec.kind)));
                }
            }
        }
        Ok(())
    }
}

/// Per-episode outcome kept for re-aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub progression: f64,
    pub max_progression: f64,
    pub success: bool,
    pub grasped: bool,
    pub steps: u64,
}

impl From<&EpisodeLog> for EpisodeSummary {
    fn from(l: &EpisodeLog) -> Self {
        EpisodeSummary { seed: l.seed, progression: l.progression, max_progression: l.max_progression, success: l.success, grasped: l.grasped, steps: l.steps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub copilot: String,
    pub pilot: String,
    pub task: TaskKind,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub success_rate: f64,
    /// Mean episode length over successful episodes; `None` without any.
    pub mean_steps: Option<f64>,
    pub n: usize,
    pub episodes: Vec<EpisodeSummary>,
}

impl CellResult {
    pub fn aggregate(copilot: &str, pilot: &str, task: TaskKind, episodes: Vec<EpisodeSummary>, how: Aggregation) -> CellResult {
        let n = episodes.len();
        let value = |e: &EpisodeSummary| match how {
            Aggregation::Final => e.progression,
            Aggregation::Max => e.max_progression,
        };
        let nf = n.max(1) as f64;
        let mean = episodes.iter().map(value).sum::<f64>() / nf;
        let var = episodes.iter().map(|e| (value(e) - mean).powi(2)).sum::<f64>() / nf;
        let succ: Vec<&EpisodeSummary> = episodes.iter().filter(|e| e.success).collect();
        let mean_steps = if succ.is_empty() { None } else { Some(succ.iter().map(|e| e.steps as f64).sum::<f64>() / succ.len() as f64) };
        CellResult {
            copilot: copilot.into(),
            pilot: pilot.into(),
            task,
            mean,
            std: var.sqrt(),
            success_rate: succ.len() as f64 / nf,
            mean_steps,
            n,
            episodes,
        }
    }
}

/// Seed of episode `i` in the cell named by its three labels.
pub fn cell_seed(base: u64, copilot: &str, pilot: &str, task: TaskKind, i: u64) -> u64 {
    episode_seed(base, &format!("cell/{copilot}/{pilot}/{task}"), i)
}

/// Evaluate `episodes` seeded episodes of one pilot (optionally assisted).
/// Episodes run in parallel; results come back in seed order.
pub fn evaluate(env: &EnvConfig, pilot: &PilotSpec, policy: Option<&Policy>, seeds: &[u64]) -> Result<Vec<EpisodeLog>> {
    seeds
        .par_iter()
        .map_init(
            || (env.make_env(), pilot.build(&env.scale)),
            |(e, p), &seed| {
                let p = p.as_mut().map_err(|err| invalid_arg(err.to_string()))?;
                let mut mc = policy.map(MeanCopilot);
                run_episode(e, p.as_mut(), mc.as_mut().map(|m| m as &mut dyn Assist), &env.scale, seed, false)
            },
        )
        .collect()
}

pub fn run_matrix(spec: &MatrixSpec) -> Result<Vec<CellResult>> {
    spec.validate()?;
    let mut cells = Vec::new();
    for c in &spec.copilots {
        for p in &spec.pilots {
            for env in &spec.tasks {
                let task = env.spec.kind;
                let recipe = p.for_task(task).expect("validated");
                let seeds: Vec<u64> = (0..spec.episodes as u64).map(|i| cell_seed(spec.seed, &c.label, &p.label, task, i)).collect();
                let logs = evaluate(env, recipe, c.policy.as_deref(), &seeds)
                    .map_err(|e| invalid_arg(format!("cell ({}, {}, {task}): {e}", c.label, p.label)))?;
                let eps = logs.iter().map(EpisodeSummary::from).collect();
                cells.push(CellResult::aggregate(&c.label, &p.label, task, eps, spec.aggregation));
            }
        }
    }
    Ok(cells)
}

pub const CSV_HEADER: &str = "copilot,pilot,task,mean,std,success_rate,mean_steps,n";

pub fn to_csv(cells: &[CellResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for c in cells {
        let steps = c.mean_steps.map_or_else(String::new, |v| format!("{v}"));
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", c.copilot, c.pilot, c.task, c.mean, c.std, c.success_rate, steps, c.n);
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Same number of episodes from each set, successful or not.
    MatchedAttempts,
    /// Same number of successful episodes from each set, failures dropped.
    MatchedSuccesses,
}

impl std::str::FromStr for BudgetMode {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched_attempts" | "matched-attempts" => Ok(BudgetMode::MatchedAttempts),
            "matched_successes" | "matched-successes" => Ok(BudgetMode::MatchedSuccesses),
            other => Err(invalid_arg(format!("unknown budget mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSide {
    pub label: String,
    pub train_episodes: usize,
    pub train_successes: usize,
    pub train_records: usize,
    pub final_loss: f64,
    pub eval: CellResult,
    /// Evaluation episodes that grasped the part.
    pub grasp_stage: usize,
    /// Evaluation episodes that completed the task.
    pub insert_stage: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub mode: BudgetMode,
    pub assisted: DistillSide,
    pub unassisted: DistillSide,
}

/// Restrict both sets to the same budget under `mode`.
pub fn match_budget(a: &DemoDataset, b: &DemoDataset, mode: BudgetMode) -> Result<(DemoDataset, DemoDataset)> {
    let (pred, n): (fn(&Episode) -> bool, usize) = match mode {
        BudgetMode::MatchedAttempts => (|_| true, a.episodes.len().min(b.episodes.len())),
        BudgetMode::MatchedSuccesses => (Episode::success, a.successes().min(b.successes())),
    };
    if n == 0 {
        return Err(invalid_arg(format!("{mode:?} leaves no episodes to train on")));
    }
    Ok((a.filtered(n, pred), b.filtered(n, pred)))
}

pub struct DistillConfig {
    pub bc: BcConfig,
    pub episodes: usize,
    pub seed: u64,
}

/// Distill each dataset into a regression pilot and evaluate both without
/// assistance on the same seeds.
pub fn distill_and_compare(assisted: &DemoDataset, unassisted: &DemoDataset, mode: BudgetMode, env: &EnvConfig, cfg: &DistillConfig) -> Result<DistillReport> {
    if cfg.episodes == 0 {
        return Err(invalid_arg("distillation needs at least one evaluation episode"));
    }
    let (a, u) = match_budget(assisted, unassisted, mode)?;
    let seeds: Vec<u64> = (0..cfg.episodes as u64).map(|i| episode_seed(cfg.seed, "distill", i)).collect();
    let side = |label: &str, data: &DemoDataset| -> Result<DistillSide> {
        let fit = fit_bc(data, &cfg.bc)?;
        let pilot = PilotSpec::Bc(Arc::new(fit.model));
        let logs = evaluate(env, &pilot, None, &seeds)?;
        let eval = CellResult::aggregate(NO_COPILOT, label, env.spec.kind, logs.iter().map(EpisodeSummary::from).collect(), Aggregation::Final);
        Ok(DistillSide {
            label: label.into(),
            train_episodes: data.episodes.len(),
            train_successes: data.successes(),
            train_records: data.len(),
            final_loss: fit.losses.last().copied().unwrap_or(f64::NAN),
            grasp_stage: logs.iter().filter(|l| l.grasped).count(),
            insert_stage: logs.iter().filter(|l| l.success).count(),
            eval,
        })
    };
    Ok(DistillReport { mode, assisted: side("assisted", &a)?, unassisted: side("unassisted", &u)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskSpec;

    fn summary(p: f64, success: bool, steps: u64) -> EpisodeSummary {
        EpisodeSummary { seed: 0, progression: p, max_progression: p.max(0.5), success, grasped: true, steps }
    }

    #[test]
    fn aggregation_uses_population_std_and_successful_steps() {
        let eps = vec![summary(1.0, true, 60), summary(0.5, false, 450), summary(1.0, true, 80), summary(0.0, false, 450)];
        let c = CellResult::aggregate("a", "b", TaskKind::Peg, eps, Aggregation::Final);
        assert_eq!(c.mean, 0.625);
        assert!((c.std - (0.171875f64).sqrt()).abs() < 1e-12);
        assert_eq!(c.success_rate, 0.5);
        assert_eq!(c.mean_steps, Some(70.0));
        let m = CellResult::aggregate("a", "b", TaskKind::Peg, c.episodes.clone(), Aggregation::Max);
        assert_eq!(m.mean, 0.75);
        let none = CellResult::aggregate("a", "b", TaskKind::Peg, vec![summary(0.2, false, 450)], Aggregation::Final);
        assert_eq!(none.mean_steps, None);
    }

    #[test]
    fn empty_axes_are_rejected() {
        let spec = MatrixSpec { copilots: vec![], pilots: vec![], tasks: vec![EnvConfig::new(TaskSpec::peg())], episodes: 1, seed: 0, aggregation: Aggregation::Final };
        assert!(run_matrix(&spec).is_err());
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let c = CellResult::aggregate("none", "expert", TaskKind::Gear, vec![summary(1.0, true, 70)], Aggregation::Final);
        let csv = to_csv(&[c.clone(), c]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "none,expert,gear,1,0,1,70,1");
    }

    #[test]
    fn budget_matching() {
        let mk = |succ: &[bool]| {
            let mut d = DemoDataset::new(TaskKind::Peg, "t");
            for (i, s) in succ.iter().enumerate() {
                d.episodes.push(Episode {
                    id: i as u64,
                    records: vec![],
                    outcome: Some(crate::pilots::EpisodeOutcome { seed: 0, success: *s, steps: 1, progression: 0.0, events: vec![] }),
                });
            }
            d
        };
        let a = mk(&[true, true, false, true]);
        let b = mk(&[false, true, false, false, true, true, true]);
        let (x, y) = match_budget(&a, &b, BudgetMode::MatchedSuccesses).unwrap();
        assert_eq!((x.episodes.len(), y.episodes.len()), (3, 3));
        assert!(x.episodes.iter().chain(&y.episodes).all(|e| e.success()));
        let (x, y) = match_budget(&a, &b, BudgetMode::MatchedAttempts).unwrap();
        assert_eq!((x.episodes.len(), y.episodes.len()), (4, 4));
        assert!(match_budget(&a, &mk(&[false]), BudgetMode::MatchedSuccesses).is_err());
    }
}
