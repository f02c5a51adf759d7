use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resco_core::copilot::Policy;
use resco_core::nn::Activation;
use resco_core::pilots::DemoDataset;
use resco_core::rollout::{replay_episode, EnvConfig};
use resco_core::tasks::TaskSpec;
use resco_teleopd::server::{serve, ServeOptions};
use resco_teleopd::session::{PilotSource, SessionConfig};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::{Error as WsError, Message};
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn policy() -> Arc<Policy> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = Policy::new(vec![16], Activation::Elu, -1.0, &mut rng).unwrap();
    let head = p.param_ranges()[1].clone();
    p.params[head].iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * ((i as f64) * 1.3).cos());
    p.obs_norm.freeze();
    p.value_norm.freeze();
    Arc::new(p)
}

fn env() -> EnvConfig {
    EnvConfig::new(TaskSpec::peg())
}

fn options(policy: Option<Arc<Policy>>, max_sessions: usize, out_dir: Option<&Path>) -> ServeOptions {
    ServeOptions {
        session: SessionConfig { env: env(), policy, source: PilotSource::Human, max_delta_pos: 0.01, max_delta_rot: 0.1 },
        max_sessions,
        seed: 3,
        out_dir: out_dir.map(Path::to_path_buf),
    }
}

async fn start(opts: ServeOptions) -> SocketAddr {
    let (tx, rx) = tokio::sync::oneshot::channel();
    tokio::spawn(async move {
        serve(opts, "127.0.0.1:0".parse().unwrap(), move |a| {
            let _ = tx.send(a);
        })
        .await
        .unwrap();
    });
    rx.await.unwrap()
}

async fn connect(addr: SocketAddr) -> Ws {
    connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn next(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.expect("server went quiet").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

async fn next_state(ws: &mut Ws) -> Value {
    loop {
        let v = next(ws).await;
        if v["type"] == "state" {
            return v;
        }
    }
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::text(v.to_string())).await.unwrap();
}

fn input(seq: u64, dp: [f64; 3]) -> Value {
    json!({"type": "input", "dp": dp, "drot": [0.0, 0.0, 0.0], "grip": 1.0, "seq": seq})
}

#[tokio::test]
async fn welcome_then_monotone_state_stream() {
    let addr = start(options(None, 2, None)).await;
    let mut ws = connect(addr).await;
    let w = next(&mut ws).await;
    assert_eq!(w["type"], "welcome");
    assert_eq!(w["task"], "peg");
    assert_eq!(w["rate_hz"], 15.0);
    assert_eq!(w["copilot"], false);

    let mut last = 0;
    for _ in 0..6 {
        let s = next_state(&mut ws).await;
        let mut keys: Vec<&str> = s.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["assist", "ee", "events", "objects", "progression", "reward", "tick", "type", "wrench"]);
        let mut ee: Vec<&str> = s["ee"].as_object().unwrap().keys().map(String::as_str).collect();
        ee.sort_unstable();
        assert_eq!(ee, ["gripper", "p", "q"]);
        assert_eq!(s["wrench"].as_array().unwrap().len(), 6);
        assert_eq!(s["objects"].as_array().unwrap().len(), 2);
        let tick = s["tick"].as_u64().unwrap();
        assert!(tick > last);
        last = tick;
    }
}

#[tokio::test]
async fn bad_messages_get_error_replies() {
    let addr = start(options(None, 2, None)).await;
    let mut ws = connect(addr).await;
    next(&mut ws).await;
    send(&mut ws, json!({"type": "teleport"})).await;
    let mut got = false;
    for _ in 0..5 {
        let v = next(&mut ws).await;
        if v["type"] == "error" {
            got = true;
            break;
        }
    }
    assert!(got);
    // assist without a checkpoint is refused
    send(&mut ws, json!({"type": "assist", "enabled": true})).await;
    loop {
        let v = next(&mut ws).await;
        if v["type"] == "error" {
            assert!(v["message"].as_str().unwrap().contains("checkpoint"));
            break;
        }
        assert_eq!(v["assist"], false);
    }
}

#[tokio::test]
async fn assist_toggle_shows_within_two_ticks() {
    let addr = start(options(Some(policy()), 2, None)).await;
    let mut ws = connect(addr).await;
    assert_eq!(next(&mut ws).await["copilot"], true);
    next_state(&mut ws).await;
    for enabled in [true, false, true] {
        send(&mut ws, json!({"type": "assist", "enabled": enabled})).await;
        let mut seen = false;
        // a state may already be in flight when the toggle lands
        for _ in 0..2 {
            if next_state(&mut ws).await["assist"] == enabled {
                seen = true;
                break;
            }
        }
        assert!(seen, "assist={enabled} not reflected");
    }
}

#[tokio::test]
async fn session_limit_is_enforced_and_released() {
    let addr = start(options(None, 1, None)).await;
    let mut first = connect(addr).await;
    next(&mut first).await;
    match connect_async(format!("ws://{addr}/ws")).await {
        Err(WsError::Http(resp)) => assert_eq!(resp.status().as_u16(), 503),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("second session admitted"),
    }
    first.close(None).await.unwrap();
    drop(first);
    let mut admitted = false;
    for _ in 0..50 {
        tokio::time::sleep(Duration::from_millis(20)).await;
        if let Ok((mut ws, _)) = connect_async(format!("ws://{addr}/ws")).await {
            assert_eq!(next(&mut ws).await["type"], "welcome");
            admitted = true;
            break;
        }
    }
    assert!(admitted);
}

#[tokio::test]
async fn sessions_are_isolated() {
    let addr = start(options(Some(policy()), 4, None)).await;
    let mut a = connect(addr).await;
    let mut b = connect(addr).await;
    let (wa, wb) = (next(&mut a).await, next(&mut b).await);
    assert_ne!(wa["session"], wb["session"]);
    assert_ne!(wa["seed"], wb["seed"]);
    let b0 = next_state(&mut b).await["ee"]["p"].clone();
    let a0 = next_state(&mut a).await["ee"]["p"].clone();
    send(&mut a, json!({"type": "assist", "enabled": true})).await;
    for seq in 1..=8 {
        send(&mut a, input(seq, [0.0, 0.0, 0.01])).await;
        next_state(&mut a).await;
    }
    let a1 = next_state(&mut a).await;
    assert_eq!(a1["assist"], true);
    assert!(a1["ee"]["p"][2].as_f64().unwrap() - a0[2].as_f64().unwrap() > 0.02);
    let b1 = loop {
        // drain b's backlog and look at its latest state
        let s = next_state(&mut b).await;
        if s["tick"].as_u64().unwrap() >= 10 {
            break s;
        }
    };
    assert_eq!(b1["assist"], false);
    for k in 0..3 {
        assert!((b1["ee"]["p"][k].as_f64().unwrap() - b0[k].as_f64().unwrap()).abs() < 1e-3);
    }
}

#[tokio::test]
async fn recorded_session_replays_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let pol = policy();
    let addr = start(options(Some(pol.clone()), 2, Some(dir.path()))).await;
    let mut ws = connect(addr).await;
    let w = next(&mut ws).await;
    let id = w["session"].as_u64().unwrap();
    send(&mut ws, json!({"type": "record", "enabled": true})).await;
    for seq in 1..=12 {
        send(&mut ws, input(seq, [0.002, -0.001, -0.004])).await;
        if seq == 5 {
            send(&mut ws, json!({"type": "assist", "enabled": true})).await;
        }
        next_state(&mut ws).await;
    }
    send(&mut ws, json!({"type": "reset", "seed": 99})).await;
    next_state(&mut ws).await;
    let path = dir.path().join(format!("session-{id}.demo"));
    let mut found = false;
    for _ in 0..50 {
        if path.exists() {
            found = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(found, "no recording written");
    let data = DemoDataset::load(&path).unwrap();
    assert_eq!(data.episodes.len(), 1);
    let ep = &data.episodes[0];
    assert!(ep.records.len() >= 12);
    assert!(ep.records.iter().any(|r| r.assisted) && ep.records.iter().any(|r| !r.assisted));
    let report = replay_episode(&env(), ep, Some(&pol)).unwrap();
    assert!(report.passes(1e-9), "{report:?}");
    assert!(replay_episode(&env(), ep, None).is_err());
}
