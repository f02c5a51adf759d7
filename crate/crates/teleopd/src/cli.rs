//! Command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use resco_core::config::WorkbenchConfig;
use resco_core::copilot::{train, CurvePoint, Policy, TrainSetup};
use resco_core::harness::{distill_and_compare, run_matrix, to_csv, BudgetMode, CopilotEntry, DistillConfig, MatrixSpec, PilotEntry};
use resco_core::pilots::{default_grid, fit_bc, fit_weights, DemoDataset, GateConfig, PilotArtifact, PilotSpec};
use resco_core::rollout::{collect_demos, replay_episode};
use resco_core::seeds::episode_seed;
use resco_core::tasks::TaskKind;
use tracing::info;

use crate::server::{serve, ServeOptions};
use crate::session::{PilotSource, SessionConfig};

/// Largest state deviation `replay` accepts.
pub const REPLAY_TOL: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "teleopd", version, about = "Residual copilot workbench: data collection, training, evaluation and live teleoperation")]
pub struct Cli {
    /// Workbench configuration file (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record demonstrations from a pilot, optionally assisted by a copilot.
    Collect {
        /// expert (alias scripted), novice, laggy, noisy, knn=<file> or bc=<file>.
        #[arg(long, default_value = "scripted")]
        pilot: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Copilot assisting the pilot (mean residual).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: Option<TaskKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a kNN or regression pilot from a demonstration file.
    FitPilot {
        demos: PathBuf,
        #[arg(long, value_enum)]
        pilot: FitKind,
        /// Overrides the regression seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a residual copilot against a pilot.
    Train {
        #[arg(long, default_value = "novice")]
        pilot: String,
        /// Overrides `ppo.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `ppo.total_steps`.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        task: Option<TaskKind>,
        /// Checkpoint path; the learning curve goes next to it as `<out>.curve.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate copilots × pilots × tasks and write a CSV (stdout by default).
    Eval {
        /// One or more copilot checkpoints; the unassisted row is always included.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// Evaluation pilots. `knn` and `bc` without a file are fitted from
        /// freshly collected expert demonstrations.
        #[arg(long, num_args = 1.., default_values_t = ["laggy".to_string(), "noisy".to_string(), "expert".to_string(), "bc".to_string(), "knn".to_string()])]
        pilot: Vec<String>,
        #[arg(long, num_args = 1..)]
        task: Vec<TaskKind>,
        /// Episodes per cell; `eval.episodes` from the config by default.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expert episodes used to fit `knn` and `bc` pilots given without a file.
        #[arg(long, default_value_t = 20)]
        demo_episodes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill assisted and unassisted demonstrations into regression pilots and compare them.
    Distill {
        assisted: PathBuf,
        unassisted: PathBuf,
        #[arg(long, value_enum, default_value_t = BudgetArg::MatchedSuccesses)]
        mode: BudgetArg,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON report path; stdout by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the websocket teleoperation service.
    Serve {
        /// `service.port` from the config by default.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// human or scripted.
        #[arg(long, default_value = "human")]
        pilot: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        task: Option<TaskKind>,
        /// Directory for recorded sessions.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-simulate a demonstration file and verify states and events.
    Replay {
        demos: PathBuf,
        /// Copilot that assisted the recording, if any step was assisted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FitKind {
    Knn,
    Bc,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BudgetArg {
    MatchedAttempts,
    MatchedSuccesses,
}

impl From<BudgetArg> for BudgetMode {
    fn from(b: BudgetArg) -> Self {
        match b {
            BudgetArg::MatchedAttempts => BudgetMode::MatchedAttempts,
            BudgetArg::MatchedSuccesses => BudgetMode::MatchedSuccesses,
        }
    }
}

/// A pilot named on the command line.
enum PilotArg {
    Builtin(String, PilotSpec),
    Artifact(String, PilotArtifact),
    /// `knn` or `bc` with nothing to load.
    Unfitted(String),
}

fn parse_pilot(arg: &str, cfg: &WorkbenchConfig) -> Result<PilotArg> {
    if let Some((kind, file)) = arg.split_once('=') {
        ensure!(kind == "knn" || kind == "bc", "only knn and bc pilots load from a file, got {kind:?}");
        let art = PilotArtifact::load(Path::new(file))?;
        ensure!(art.kind() == kind, "{file} holds a {} pilot, not {kind}", art.kind());
        return Ok(PilotArg::Artifact(kind.into(), art));
    }
    let expert = PilotSpec::expert();
    Ok(match arg {
        "expert" | "scripted" => PilotArg::Builtin("expert".into(), expert),
        "novice" => PilotArg::Builtin("novice".into(), PilotSpec::novice()),
        "laggy" => PilotArg::Builtin("laggy".into(), PilotSpec::laggy(expert)),
        "noisy" => PilotArg::Builtin("noisy".into(), PilotSpec::noisy(expert, GateConfig::from(&cfg.dmr))),
        "knn" | "bc" => PilotArg::Unfitted(arg.into()),
        other => bail!("unknown pilot {other:?} (expected expert, scripted, novice, laggy, noisy, knn[=file] or bc[=file])"),
    })
}

/// A single ready-to-run pilot for `task`.
fn single_pilot(arg: &str, cfg: &WorkbenchConfig, task: TaskKind) -> Result<(String, PilotSpec)> {
    match parse_pilot(arg, cfg)? {
        PilotArg::Builtin(label, spec) => Ok((label, spec)),
        PilotArg::Artifact(label, art) => {
            ensure!(art.task() == task, "pilot file was fitted on {}, but the task is {task}", art.task());
            Ok((label, art.spec(&cfg.knn)))
        }
        PilotArg::Unfitted(k) => bail!("pilot {k} needs a fitted file: --pilot {k}=<file>"),
    }
}

fn load_config(path: Option<&Path>) -> Result<WorkbenchConfig> {
    match path {
        Some(p) => Ok(WorkbenchConfig::load(p)?),
        None => Ok(WorkbenchConfig::default()),
    }
}

fn load_policy(path: &Path) -> Result<Arc<Policy>> {
    Ok(Arc::new(Policy::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("iteration,env_steps,episodes,mean_return,mean_progression,success_rate,policy_loss,value_loss,kl,clip_fraction,lr\n");
    for p in curve {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            p.iteration, p.env_steps, p.episodes, p.mean_return, p.mean_progression, p.success_rate, p.policy_loss, p.value_loss, p.kl, p.clip_fraction, p.lr
        );
    }
    s
}

fn fit_artifact(data: DemoDataset, kind: FitKind, cfg: &WorkbenchConfig, seed: Option<u64>) -> Result<PilotArtifact> {
    let task = data.task;
    Ok(match kind {
        FitKind::Knn => {
            let fit = fit_weights(&data, &default_grid())?;
            info!(task = %task, weights = ?fit.weights, score = fit.score, "fitted knn weights");
            PilotArtifact::Knn { weights: fit.weights, data: Arc::new(data) }
        }
        FitKind::Bc => {
            let bc = resco_core::pilots::BcConfig { seed: seed.unwrap_or(cfg.bc.seed), ..cfg.bc.clone() };
            let fit = fit_bc(&data, &bc)?;
            info!(task = %task, loss = fit.losses.last().copied().unwrap_or(f64::NAN), "fitted regression pilot");
            PilotArtifact::Bc { task, model: Arc::new(fit.model) }
        }
    })
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Collect { pilot, episodes, seed, checkpoint, task, out } => {
            ensure!(episodes > 0, "--episodes must be at least 1");
            let task = task.unwrap_or(cfg.task.kind);
            let env = cfg.env_config(task);
            let (label, spec) = single_pilot(&pilot, &cfg, task)?;
            let policy = checkpoint.as_deref().map(load_policy).transpose()?;
            let seeds: Vec<u64> = (0..episodes as u64).map(|i| episode_seed(seed, "collect", i)).collect();
            let collector = if policy.is_some() { format!("{label}+copilot") } else { label };
            let data = collect_demos(&env, &spec, policy.as_deref(), &seeds, &collector)?;
            data.save(&out)?;
            println!("collected {} episodes ({} successful, {} records) -> {}", data.episodes.len(), data.successes(), data.len(), out.display());
        }
        Command::FitPilot { demos, pilot, seed, out } => {
            let data = DemoDataset::load(&demos)?;
            let art = fit_artifact(data, pilot, &cfg, seed)?;
            art.save(&out)?;
            println!("fitted {} pilot for {} -> {}", art.kind(), art.task(), out.display());
        }
        Command::Train { pilot, seed, steps, task, out } => {
            let task = task.unwrap_or(cfg.task.kind);
            let (label, spec) = single_pilot(&pilot, &cfg, task)?;
            let mut ppo = cfg.ppo.clone();
            if let Some(s) = seed {
                ppo.seed = s;
            }
            if let Some(s) = steps {
                ppo.total_steps = s;
            }
            let setup = TrainSetup { env: cfg.env_config(task), pilot: spec };
            info!(task = %task, pilot = %label, steps = ppo.total_steps, seed = ppo.seed, "training copilot");
            let mut log = |p: &CurvePoint, _: &Policy| -> resco_core::Result<()> {
                if p.iteration % 10 == 0 {
                    info!(iteration = p.iteration, env_steps = p.env_steps, progression = p.mean_progression, success = p.success_rate, kl = p.kl, lr = p.lr);
                }
                Ok(())
            };
            let outcome = train(&setup, &ppo, Some(&mut log))?;
            outcome.policy.save(&out)?;
            let mut curve_path = out.clone().into_os_string();
            curve_path.push(".curve.csv");
            fs::write(&curve_path, curve_csv(&outcome.curve))?;
            println!("checkpoint -> {}, learning curve -> {}", out.display(), PathBuf::from(curve_path).display());
        }
        Command::Eval { checkpoint, pilot, task, episodes, seed, demo_episodes, out } => {
            ensure!(!checkpoint.is_empty(), "eval needs at least one --checkpoint");
            let tasks: Vec<TaskKind> = if task.is_empty() { TaskKind::ALL.to_vec() } else { task };
            let mut copilots = vec![CopilotEntry::none()];
            for path in &checkpoint {
                let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string());
                ensure!(copilots.iter().all(|c| c.label != label), "two checkpoints share the label {label:?}");
                copilots.push(CopilotEntry { label, policy: Some(load_policy(path)?) });
            }
            let pilots = eval_pilots(&pilot, &cfg, &tasks, seed, demo_episodes)?;
            let spec = MatrixSpec {
                copilots,
                pilots,
                tasks: tasks.iter().map(|t| cfg.env_config(*t)).collect(),
                episodes: episodes.unwrap_or(cfg.eval.episodes),
                seed,
                aggregation: cfg.eval.aggregation,
            };
            let cells = run_matrix(&spec)?;
            write_out(out.as_deref(), &to_csv(&cells))?;
        }
        Command::Distill { assisted, unassisted, mode, episodes, seed, out } => {
            let a = DemoDataset::load(&assisted)?;
            let u = DemoDataset::load(&unassisted)?;
            ensure!(a.task == u.task, "datasets are for different tasks ({} and {})", a.task, u.task);
            let env = cfg.env_config(a.task);
            let report = distill_and_compare(&a, &u, mode.into(), &env, &DistillConfig { bc: cfg.bc.clone(), episodes, seed })?;
            eprintln!(
                "assisted {:.3} ({} grasped, {} inserted) vs unassisted {:.3} ({} grasped, {} inserted)",
                report.assisted.eval.mean, report.assisted.grasp_stage, report.assisted.insert_stage, report.unassisted.eval.mean, report.unassisted.grasp_stage, report.unassisted.insert_stage
            );
            write_out(out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        Command::Serve { port, checkpoint, pilot, seed, task, out } => {
            let source = match pilot.as_str() {
                "human" => PilotSource::Human,
                "scripted" | "expert" => PilotSource::Scripted,
                other => bail!("serve drives sessions from human or scripted input, not {other:?}"),
            };
            if let Some(dir) = &out {
                fs::create_dir_all(dir)?;
            }
            let opts = ServeOptions {
                session: SessionConfig {
                    env: cfg.env_config(task.unwrap_or(cfg.task.kind)),
                    policy: checkpoint.as_deref().map(load_policy).transpose()?,
                    source,
                    max_delta_pos: cfg.service.max_delta_pos,
                    max_delta_rot: cfg.service.max_delta_rot,
                },
                max_sessions: cfg.service.max_sessions,
                seed,
                out_dir: out,
            };
            let addr = SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), port.unwrap_or(cfg.service.port));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(opts, addr, |a| println!("listening on ws://{a}/ws")))?;
        }
        Command::Replay { demos, checkpoint } => {
            let data = DemoDataset::load(&demos)?;
            let env = cfg.env_config(data.task);
            let policy = checkpoint.as_deref().map(load_policy).transpose()?;
            let mut failed = 0;
            for ep in &data.episodes {
                let r = replay_episode(&env, ep, policy.as_deref())?;
                let ok = r.passes(REPLAY_TOL);
                failed += usize::from(!ok);
                println!(
                    "episode {} steps {} max_state_error {:.3e} events {} progression {} {}",
                    r.episode,
                    r.steps,
                    r.max_state_error,
                    if r.outcome_matches { "match" } else { "differ" },
                    r.progression,
                    if ok { "ok" } else { "MISMATCH" }
                );
            }
            ensure!(failed == 0, "{failed} of {} episodes did not replay exactly", data.episodes.len());
        }
    }
    Ok(())
}

/// Evaluation pilots, with `knn`/`bc` fitted per task where no file covers it.
fn eval_pilots(args: &[String], cfg: &WorkbenchConfig, tasks: &[TaskKind], seed: u64, demo_episodes: usize) -> Result<Vec<PilotEntry>> {
    let mut entries: Vec<PilotEntry> = Vec::new();
    let mut unfitted: Vec<String> = Vec::new();
    for a in args {
        match parse_pilot(a, cfg)? {
            PilotArg::Builtin(label, spec) => {
                ensure!(entries.iter().all(|e| e.label != label), "pilot {label} listed twice");
                entries.push(PilotEntry::uniform(label, spec));
            }
            PilotArg::Artifact(label, art) => {
                let spec = art.spec(&cfg.knn);
                match entries.iter_mut().find(|e| e.label == label) {
                    Some(e) => {
                        ensure!(e.for_task(art.task()).is_none(), "two {label} pilots for {}", art.task());
                        e.per_task.push((art.task(), spec));
                    }
                    None => entries.push(PilotEntry { label, per_task: vec![(art.task(), spec)] }),
                }
            }
            PilotArg::Unfitted(label) => {
                ensure!(!unfitted.contains(&label), "pilot {label} listed twice");
                unfitted.push(label.clone());
                if entries.iter().all(|e| e.label != label) {
                    entries.push(PilotEntry { label, per_task: Vec::new() });
                }
            }
        }
    }
    for e in entries.iter_mut().filter(|e| e.label == "knn" || e.label == "bc") {
        for &task in tasks {
            if e.for_task(task).is_some() {
                continue;
            }
            ensure!(demo_episodes > 0, "no {} pilot file for {task} and --demo-episodes is 0", e.label);
            let env = cfg.env_config(task);
            let seeds: Vec<u64> = (0..demo_episodes as u64).map(|i| episode_seed(seed, &format!("eval-demos/{task}"), i)).collect();
            let data = collect_demos(&env, &PilotSpec::expert(), None, &seeds, "expert")?;
            let kind = if e.label == "knn" { FitKind::Knn } else { FitKind::Bc };
            let art = fit_artifact(data, kind, cfg, None)?;
            e.per_task.push((task, art.spec(&cfg.knn)));
        }
    }
    Ok(entries)
}
