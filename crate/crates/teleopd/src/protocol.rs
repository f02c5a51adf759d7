//! JSON messages exchanged over the `/ws` socket.

use resco_core::se3::{quat_to_wxyz, Pose};
use resco_core::tasks::Events;
use serde::{Deserialize, Serialize};

/// Operator command for one tick. Either an incremental move (`dp`, `drot`)
/// or an absolute target (`p`, `q` as w, x, y, z).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputMsg {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dp: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drot: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<[f64; 4]>,
    pub grip: f64,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientMsg {
    Input(InputMsg),
    Assist { enabled: bool },
    Record { enabled: bool },
    Reset { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EeMsg {
    pub p: [f64; 3],
    pub q: [f64; 4],
    pub gripper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMsg {
    pub name: String,
    pub p: [f64; 3],
    pub q: [f64; 4],
    pub attached: bool,
}

impl ObjectMsg {
    pub fn new(name: &str, pose: &Pose, attached: bool) -> Self {
        ObjectMsg { name: name.into(), p: [pose.p.x, pose.p.y, pose.p.z], q: quat_to_wxyz(&pose.q), attached }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMsg {
    pub tick: u64,
    pub ee: EeMsg,
    pub objects: Vec<ObjectMsg>,
    pub wrench: [f64; 6],
    pub progression: f64,
    pub reward: f64,
    pub events: Vec<String>,
    pub assist: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMsg {
    Welcome { session: u64, task: String, rate_hz: f64, copilot: bool, seed: u64 },
    State(StateMsg),
    Error { message: String },
}

pub fn event_names(e: &Events) -> Vec<String> {
    e.names().into_iter().map(String::from).collect()
}

impl ServerMsg {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages hold only finite numbers")
    }
}
