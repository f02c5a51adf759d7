//! Fitted-pilot files written by `fit-pilot`.
//!
//! ```text
//! #resco-pilot v1 kind=knn task=peg weights=<w_pos>,<w_rot>,<w_grip>
//! <demonstration file, verbatim>
//! ```
//!
//! or, for a regression pilot,
//!
//! ```text
//! #resco-pilot v1 kind=bc task=peg
//! arch in=20 out=7 hidden=128,128 activation=elu
//! params <n> ...
//! in_mean <n> ... / in_var / out_mean / out_var
//! counts <in> <out>
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::bc::{BcModel, TARGET_DIM};
use super::dataset::DemoDataset;
use super::knn::{KnnConfig, KnnIndex, Weights};
use super::PilotSpec;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::se3::RunningNormalizer;
use crate::tasks::{TaskKind, STATE_DIM};

const MAGIC: &str = "#resco-pilot";
const VERSION: &str = "v1";

#[derive(Clone, Debug)]
pub enum PilotArtifact {
    Knn { weights: Weights, data: Arc<DemoDataset> },
    Bc { task: TaskKind, model: Arc<BcModel> },
}

fn row(out: &mut String, name: &str, xs: &[f64]) {
    let _ = write!(out, "{name} {}", xs.len());
    for x in xs {
        let _ = write!(out, " {x:.16e}");
    }
    out.push('\n');
}

impl PilotArtifact {
    pub fn task(&self) -> TaskKind {
        match self {
            PilotArtifact::Knn { data, .. } => data.task,
            PilotArtifact::Bc { task, .. } => *task,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PilotArtifact::Knn { .. } => "knn",
            PilotArtifact::Bc { .. } => "bc",
        }
    }

    /// Pilot recipe; kNN settings other than the fitted weights come from `knn`.
    pub fn spec(&self, knn: &KnnConfig) -> PilotSpec {
        match self {
            PilotArtifact::Knn { weights, data } => {
                PilotSpec::Knn { index: Arc::new(KnnIndex::new(data.clone())), cfg: KnnConfig { weights: *weights, ..*knn } }
            }
            PilotArtifact::Bc { model, .. } => PilotSpec::Bc(model.clone()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match self {
            PilotArtifact::Knn { weights, data } => {
                let _ = writeln!(s, "{MAGIC} {VERSION} kind=knn task={} weights={:e},{:e},{:e}", data.task, weights[0], weights[1], weights[2]);
                s.push_str(&data.to_text());
            }
            PilotArtifact::Bc { task, model } => {
                let _ = writeln!(s, "{MAGIC} {VERSION} kind=bc task={task}");
                let hidden: Vec<String> = model.net.sizes[1..model.net.sizes.len() - 1].iter().map(|h| h.to_string()).collect();
                let _ = writeln!(s, "arch in={STATE_DIM} out={} hidden={} activation={}", TARGET_DIM, hidden.join(","), model.net.activation.name());
                row(&mut s, "params", &model.params);
                row(&mut s, "in_mean", &model.input_norm.mean);
                row(&mut s, "in_var", &model.input_norm.var);
                row(&mut s, "out_mean", &model.output_norm.mean);
                row(&mut s, "out_var", &model.output_norm.var);
                let _ = writeln!(s, "counts {} {}", model.input_norm.count, model.output_norm.count);
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let (header, body) = text.split_once('\n').unwrap_or((text, ""));
        let mut f = header.split_whitespace();
        if f.next() != Some(MAGIC) || f.next() != Some(VERSION) {
            return Err(err(1, format!("expected header {MAGIC} {VERSION}")));
        }
        let (mut kind, mut task, mut weights) = (None, None, None);
        for kv in f {
            let (k, v) = kv.split_once('=').ok_or_else(|| err(1, format!("bad header field {kv:?}")))?;
            match k {
                "kind" => kind = Some(v.to_string()),
                "task" => task = Some(v.parse::<TaskKind>().map_err(|e| err(1, e.to_string()))?),
                "weights" => {
                    let w: Vec<f64> = v.split(',').map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| err(1, e.to_string()))?;
                    let w: Weights = w.try_into().map_err(|_| err(1, "weights need three values".into()))?;
                    weights = Some(w);
                }
                _ => return Err(err(1, format!("unknown header key {k:?}"))),
            }
        }
        let task = task.ok_or_else(|| err(1, "header lacks task".into()))?;
        match kind.as_deref() {
            Some("knn") => {
                let weights = weights.ok_or_else(|| err(1, "knn pilot lacks weights".into()))?;
                let data = DemoDataset::parse(body, path).map_err(|e| match e {
                    Error::Parse { path, line, msg } => Error::Parse { path, line: line + 1, msg },
                    other => other,
                })?;
                if data.task != task {
                    return Err(err(2, format!("embedded demonstrations are for {}, header says {task}", data.task)));
                }
                Ok(PilotArtifact::Knn { weights, data: Arc::new(data) })
            }
            Some("bc") => Ok(PilotArtifact::Bc { task, model: Arc::new(parse_bc(body, &err)?) }),
            other => Err(err(1, format!("unknown pilot kind {other:?}"))),
        }
    }
}

fn parse_bc(body: &str, err: &dyn Fn(usize, String) -> Error) -> Result<BcModel> {
    let lines: Vec<&str> = body.lines().collect();
    let arch = lines.first().and_then(|l| l.strip_prefix("arch ")).ok_or_else(|| err(2, "missing arch line".into()))?;
    let (mut hidden, mut activation) = (None, None);
    for kv in arch.split_whitespace() {
        match kv.split_once('=') {
            Some(("in", v)) if v == STATE_DIM.to_string() => {}
            Some(("out", v)) if v == TARGET_DIM.to_string() => {}
            Some(("hidden", v)) => {
                let h: std::result::Result<Vec<usize>, _> = if v.is_empty() { Ok(Vec::new()) } else { v.split(',').map(|h| h.parse()).collect() };
                hidden = Some(h.map_err(|e| err(2, e.to_string()))?);
            }
            Some(("activation", v)) => activation = Some(Activation::parse(v).map_err(|e| err(2, e.to_string()))?),
            _ => return Err(err(2, format!("unsupported arch field {kv:?}"))),
        }
    }
    let mut sizes = vec![STATE_DIM];
    sizes.extend(hidden.ok_or_else(|| err(2, "arch lacks hidden".into()))?);
    sizes.push(TARGET_DIM);
    let net = Mlp::new(sizes, activation.ok_or_else(|| err(2, "arch lacks activation".into()))?, Activation::Identity).map_err(|e| err(2, e.to_string()))?;

    let values = |i: usize, name: &str, n: usize| -> Result<Vec<f64>> {
        let line = lines.get(i).ok_or_else(|| err(i + 2, format!("missing {name}")))?;
        let mut f = line.split_whitespace();
        if f.next() != Some(name) || f.next() != Some(n.to_string().as_str()) {
            return Err(err(i + 2, format!("expected {name} with {n} values")));
        }
        let xs: Vec<f64> = f.map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| err(i + 2, e.to_string()))?;
        if xs.len() != n || !xs.iter().all(|x| x.is_finite()) {
            return Err(err(i + 2, format!("{name} must hold {n} finite values")));
        }
        Ok(xs)
    };
    let params = values(1, "params", net.n_params())?;
    let mut input_norm = RunningNormalizer::new(STATE_DIM);
    let mut output_norm = RunningNormalizer::new(TARGET_DIM);
    input_norm.mean = values(2, "in_mean", STATE_DIM)?;
    input_norm.var = values(3, "in_var", STATE_DIM)?;
    output_norm.mean = values(4, "out_mean", TARGET_DIM)?;
    output_norm.var = values(5, "out_var", TARGET_DIM)?;
    let counts: Vec<u64> = lines
        .get(6)
        .and_then(|l| l.strip_prefix("counts "))
        .and_then(|l| l.split_whitespace().map(|c| c.parse().ok()).collect::<Option<Vec<u64>>>())
        .filter(|c| c.len() == 2)
        .ok_or_else(|| err(8, "missing counts".into()))?;
    input_norm.count = counts[0];
    output_norm.count = counts[1];
    if input_norm.var.iter().chain(&output_norm.var).any(|v| *v < 0.0) {
        return Err(err(4, "negative variance".into()));
    }
    input_norm.freeze();
    output_norm.freeze();
    Ok(BcModel { net, params, input_norm, output_norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pilots::dataset::{Episode, Record};
    use crate::pilots::{fit_bc, BcConfig};
    use crate::se3::{BaseAction, Pose, Vec3};
    use std::path::PathBuf;

    fn data() -> DemoDataset {
        let mut d = DemoDataset::new(TaskKind::Gear, "unit");
        for id in 0..2u64 {
            let records = (0..6)
                .map(|t| {
                    let mut state = [0.0; STATE_DIM];
                    state.iter_mut().enumerate().for_each(|(i, s)| *s = (i as f64 * 0.1 + t as f64 * 0.01 + id as f64).sin());
                    let p = Vec3::new(0.01 * t as f64, 0.002 * id as f64, 0.1);
                    Record { t, state, action: BaseAction::new(Pose::from_translation(p), 0.5), assisted: false }
                })
                .collect();
            d.episodes.push(Episode { id, records, outcome: None });
        }
        d
    }

    #[test]
    fn knn_round_trip() {
        let a = PilotArtifact::Knn { weights: [1.0, 0.3, 0.1], data: Arc::new(data()) };
        let b = PilotArtifact::parse(&a.to_text(), &PathBuf::from("mem")).unwrap();
        match b {
            PilotArtifact::Knn { weights, data: d } => {
                assert_eq!(weights, [1.0, 0.3, 0.1]);
                assert_eq!(*d, data());
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn bc_round_trip_predicts_identically() {
        let fit = fit_bc(&data(), &BcConfig { hidden: vec![6], epochs: 3, ..BcConfig::default() }).unwrap();
        let a = PilotArtifact::Bc { task: TaskKind::Gear, model: Arc::new(fit.model) };
        let text = a.to_text();
        let b = PilotArtifact::parse(&text, &PathBuf::from("mem")).unwrap();
        assert_eq!(b.to_text(), text);
        let (PilotArtifact::Bc { model: m1, .. }, PilotArtifact::Bc { model: m2, .. }) = (&a, &b) else { panic!("wrong kind") };
        let s = data().episodes[0].records[2].state;
        assert_eq!(m1.predict(&s).unwrap().to_array(), m2.predict(&s).unwrap().to_array());
    }

    #[test]
    fn malformed_files_are_rejected() {
        let p = PathBuf::from("mem");
        assert!(PilotArtifact::parse("#resco-pilot v1 kind=knn task=peg\n", &p).is_err());
        assert!(PilotArtifact::parse("#resco-pilot v1 kind=mlp task=peg\n", &p).is_err());
        assert!(PilotArtifact::parse("hello\n", &p).is_err());
        let a = PilotArtifact::Knn { weights: [1.0, 1.0, 1.0], data: Arc::new(data()) };
        let wrong_task = a.to_text().replacen("task=gear", "task=nut", 1);
        assert!(PilotArtifact::parse(&wrong_task, &p).is_err());
    }
}
