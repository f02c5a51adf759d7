//! Demonstration datasets and their line-oriented text format.
//!
//! ```text
//! #resco-demo v1 task=peg rate_hz=15 collector=scripted
//! R <episode> <t> <state × 20> <action × 8> <assisted 0|1>
//! E <episode> <seed> <success 0|1> <steps> <progression> <events>
//! ```
//!
//! Reals are written with 17 significant digits so a write/read cycle is
//! bit-exact. The `E` trailer closes an episode; `<events>` is `-` or a
//! comma-separated list of `name@step`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{invalid_arg, Error, Result};
use crate::se3::BaseAction;
use crate::tasks::{Events, TaskKind, STATE_DIM};

pub const FORMAT_VERSION: &str = "v1";
const MAGIC: &str = "#resco-demo";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub t: u64,
    pub state: [f64; STATE_DIM],
    pub action: BaseAction,
    /// The executed command included a copilot residual.
    pub assisted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub success: bool,
    pub steps: u64,
    pub progression: f64,
    /// Events in the order they were raised, with the step that raised them.
    pub events: Vec<(u64, Events)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub records: Vec<Record>,
    pub outcome: Option<EpisodeOutcome>,
}

impl Episode {
    pub fn success(&self) -> bool {
        self.outcome.as_ref().is_some_and(|o| o.success)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub task: TaskKind,
    pub rate_hz: f64,
    pub collector: String,
    pub episodes: Vec<Episode>,
}

fn real(out: &mut String, x: f64) {
    let _ = write!(out, " {x:.16e}");
}

fn events_field(events: &[(u64, Events)]) -> String {
    let parts: Vec<String> =
        events.iter().flat_map(|(t, e)| e.names().into_iter().map(move |n| format!("{n}@{t}"))).collect();
    if parts.is_empty() {
        "-".into()
    } else {
        parts.join(",")
    }
}

impl DemoDataset {
    pub fn new(task: TaskKind, collector: impl Into<String>) -> Self {
        Self { task, rate_hz: 15.0, collector: collector.into(), episodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn successes(&self) -> usize {
        self.episodes.iter().filter(|e| e.success()).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.collector.is_empty() || self.collector.contains(char::is_whitespace) {
            return Err(invalid_arg(format!("collector id {:?} must be a non-empty token", self.collector)));
        }
        for ep in &self.episodes {
            for w in ep.records.windows(2) {
                if w[1].t <= w[0].t {
                    return Err(invalid_arg(format!("episode {}: timestamps not increasing at t = {}", ep.id, w[1].t)));
                }
            }
            for r in &ep.records {
                if !r.state.iter().all(|x| x.is_finite()) {
                    return Err(invalid_arg(format!("episode {} t {}: non-finite state", ep.id, r.t)));
                }
                BaseAction::from_array(&r.action.to_array())?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{MAGIC} {FORMAT_VERSION} task={} rate_hz={} collector={}",
            self.task, self.rate_hz, self.collector
        );
        for ep in &self.episodes {
            for r in &ep.records {
                let _ = write!(out, "R {} {}", ep.id, r.t);
                r.state.iter().for_each(|&x| real(&mut out, x));
                r.action.to_array().iter().for_each(|&x| real(&mut out, x));
                let _ = writeln!(out, " {}", u8::from(r.assisted));
            }
            if let Some(o) = &ep.outcome {
                let _ = write!(out, "E {} {} {} {}", ep.id, o.seed, u8::from(o.success), o.steps);
                real(&mut out, o.progression);
                let _ = writeln!(out, " {}", events_field(&o.events));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(MAGIC) {
            return Err(err(1, format!("missing {MAGIC} header")));
        }
        if fields.next() != Some(FORMAT_VERSION) {
            return Err(err(1, format!("unsupported version, expected {FORMAT_VERSION}")));
        }
        let (mut task, mut rate_hz, mut collector) = (None, None, None);
        for kv in fields {
            let (k, v) = kv.split_once('=').ok_or_else(|| err(1, format!("bad header field {kv:?}")))?;
            match k {
                "task" => task = Some(v.parse::<TaskKind>().map_err(|e| err(1, e.to_string()))?),
                "rate_hz" => rate_hz = Some(v.parse::<f64>().map_err(|e| err(1, e.to_string()))?),
                "collector" => collector = Some(v.to_string()),
                _ => return Err(err(1, format!("unknown header key {k:?}"))),
            }
        }
        let mut ds = DemoDataset {
            task: task.ok_or_else(|| err(1, "header lacks task".into()))?,
            rate_hz: rate_hz.ok_or_else(|| err(1, "header lacks rate_hz".into()))?,
            collector: collector.ok_or_else(|| err(1, "header lacks collector".into()))?,
            episodes: Vec::new(),
        };

        for (i, line) in lines {
            let n = i + 1;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let int = |s: &str| s.parse::<u64>().map_err(|e| err(n, format!("{s:?}: {e}")));
            let flt = |s: &str| s.parse::<f64>().map_err(|e| err(n, format!("{s:?}: {e}")));
            let flag = |s: &str| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(err(n, format!("expected 0 or 1, got {s:?}"))),
            };
            match f[0] {
                "R" => {
                    if f.len() != 3 + STATE_DIM + BaseAction::DIM + 1 {
                        return Err(err(n, format!("record has {} fields", f.len())));
                    }
                    let id = int(f[1])?;
                    let t = int(f[2])?;
                    let mut state = [0.0; STATE_DIM];
                    for (k, s) in state.iter_mut().enumerate() {
                        *s = flt(f[3 + k])?;
                    }
                    let a: Vec<f64> = f[3 + STATE_DIM..3 + STATE_DIM + 8].iter().map(|s| flt(s)).collect::<Result<_>>()?;
                    let action = BaseAction::from_array(&a).map_err(|e| err(n, e.to_string()))?;
                    let assisted = flag(f[f.len() - 1])?;
                    let open = ds.episodes.last().is_some_and(|e| e.id == id && e.outcome.is_none());
                    if !open {
                        if ds.episodes.iter().any(|e| e.id == id) {
                            return Err(err(n, format!("episode {id} is not contiguous")));
                        }
                        ds.episodes.push(Episode { id, records: Vec::new(), outcome: None });
                    }
                    let ep = ds.episodes.last_mut().expect("episode just ensured");
                    if ep.records.last().is_some_and(|r| r.t >= t) {
                        return Err(err(n, format!("timestamp {t} not increasing")));
                    }
                    ep.records.push(Record { t, state, action, assisted });
                }
                "E" => {
                    if f.len() != 7 {
                        return Err(err(n, format!("trailer has {} fields", f.len())));
                    }
                    let id = int(f[1])?;
                    let mut events = Vec::new();
                    if f[6] != "-" {
                        for item in f[6].split(',') {
                            let (name, t) = item.split_once('@').ok_or_else(|| err(n, format!("bad event {item:?}")))?;
                            let t = int(t)?;
                            let e = Events::from_names([name]).map_err(|e| err(n, e.to_string()))?;
                            match events.last_mut() {
                                Some((lt, le)) if *lt == t => *le = merge(*le, e),
                                _ => events.push((t, e)),
                            }
                        }
                    }
                    let outcome = EpisodeOutcome {
                        seed: int(f[2])?,
                        success: flag(f[3])?,
                        steps: int(f[4])?,
                        progression: flt(f[5])?,
                        events,
                    };
                    match ds.episodes.last_mut() {
                        Some(ep) if ep.id == id && ep.outcome.is_none() => ep.outcome = Some(outcome),
                        _ => {
                            if ds.episodes.iter().any(|e| e.id == id) {
                                return Err(err(n, format!("episode {id} already closed")));
                            }
                            ds.episodes.push(Episode { id, records: Vec::new(), outcome: Some(outcome) });
                        }
                    }
                }
                other => return Err(err(n, format!("unknown record kind {other:?}"))),
            }
        }
        ds.validate().map_err(|e| err(0, e.to_string()))?;
        Ok(ds)
    }

    /// Keep only the first `n` episodes matching `pred`.
    pub fn filtered(&self, n: usize, pred: impl Fn(&Episode) -> bool) -> DemoDataset {
        DemoDataset {
            episodes: self.episodes.iter().filter(|e| pred(e)).take(n).cloned().collect(),
            ..self.clone_header()
        }
    }

    pub fn clone_header(&self) -> DemoDataset {
        DemoDataset { task: self.task, rate_hz: self.rate_hz, collector: self.collector.clone(), episodes: Vec::new() }
    }
}

fn merge(a: Events, b: Events) -> Events {
    Events {
        success: a.success || b.success,
        drop: a.drop || b.drop,
        force_violation: a.force_violation || b.force_violation,
        timeout: a.timeout || b.timeout,
    }
}
