use std::net::SocketAddr;

use acvae::env::{DiscreteAction, EnvConfig, SpritesEnv};
use acvae::governance::{govern_rollout, predict_with_override, ActionChoice, Frame, OverrideSchedule, Override};
use acvae::model::ModelConfig;
use acvae::persist::RunConfig;
use acvae::{AgentModel, Checkpoint};
use acvae_service::protocol::{ModelInfo, PredictResponse, ServerMsg};
use acvae_service::{router, AppState};
use futures_util::{SinkExt, StreamExt};
use serde_json::json;
use tokio_tungstenite::tungstenite::Message;

fn checkpoint(horizon: usize) -> Checkpoint {
    let mut config = RunConfig::default();
    config.model = ModelConfig {
        encoder_hidden: vec![16],
        decoder_hidden: vec![16],
        head_hidden: 8,
        ..ModelConfig::default()
    };
    config.env = EnvConfig {
        horizon,
        ..EnvConfig::default()
    };
    Checkpoint {
        model: AgentModel::init(config.model.clone(), 3).unwrap(),
        config,
        seed: 3,
        step_count: 0,
    }
}

async fn spawn(ck: Option<Checkpoint>) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router(AppState::new(ck))).await.unwrap();
    });
    addr
}

/// Minimal HTTP/1.1 client over a raw socket.
async fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&str>) -> (u16, String) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    let body = body.unwrap_or("");
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    );
    s.write_all(req.as_bytes()).await.unwrap();
    let mut buf = Vec::new();
    s.read_to_end(&mut buf).await.unwrap();
    let text = String::from_utf8(buf).unwrap();
    let status: u16 = text[9..12].parse().unwrap();
    let (head, rest) = text.split_once("\r\n\r\n").unwrap();
    let body = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        let mut out = String::new();
        let mut r = rest;
        loop {
            let (len, tail) = r.split_once("\r\n").unwrap();
            let n = usize::from_str_radix(len.trim(), 16).unwrap();
            if n == 0 {
                break;
            }
            out.push_str(&tail[..n]);
            r = &tail[n + 2..];
        }
        out
    } else {
        rest.to_string()
    };
    (status, body)
}

#[tokio::test]
async fn model_info_echoes_config() {
    let addr = spawn(Some(checkpoint(64))).await;
    let (status, body) = http(addr, "GET", "/api/model", None).await;
    assert_eq!(status, 200);
    let info: ModelInfo = serde_json::from_str(&body).unwrap();
    assert_eq!((info.v, info.n, info.m), (1, 10, 4));
    assert_eq!(info.dims.iter().filter(|d| d.mapped).count(), 4);
    let (_, again) = http(addr, "GET", "/api/model", None).await;
    assert_eq!(body, again);
    let (s1, v1) = http(addr, "GET", "/api/v1/model", None).await;
    assert_eq!((s1, v1), (200, body));
}

#[tokio::test]
async fn model_info_without_checkpoint_is_503() {
    let addr = spawn(None).await;
    let (status, body) = http(addr, "GET", "/api/model", None).await;
    assert_eq!(status, 503);
    let v: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["v"], 1);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn predict_matches_in_process_call() {
    let ck = checkpoint(64);
    let addr = spawn(Some(ck.clone())).await;
    let obs = SpritesEnv::new(EnvConfig::default()).reset(12).0;
    let frame = Frame::from_observation(&obs);
    for (overrides, action) in [(json!({}), json!("left")), (json!({"2": 1.5, "7": -0.25}), json!(null))] {
        let req = json!({"observation": frame, "overrides": overrides, "action": action, "seed": 4});
        let (status, body) = http(addr, "POST", "/api/predict", Some(&req.to_string())).await;
        assert_eq!(status, 200, "{body}");
        let resp: PredictResponse = serde_json::from_str(&body).unwrap();
        let ov: Vec<Override> = overrides
            .as_object()
            .unwrap()
            .iter()
            .map(|(k, v)| Override {
                dim: k.parse().unwrap(),
                value: v.as_f64().unwrap(),
            })
            .collect();
        let choice = match action.as_str() {
            Some(_) => ActionChoice::Given(DiscreteAction::Left),
            None => ActionChoice::Sample(4),
        };
        let local = predict_with_override(&ck.model, &obs, &ov, choice).unwrap();
        assert_eq!(resp.predicted_image, local.frame());
        assert_eq!(resp.policy, local.policy);
        assert_eq!(resp.action, local.action);
    }
}

#[tokio::test]
async fn predict_rejects_bad_input() {
    let addr = spawn(Some(checkpoint(64))).await;
    let frame = Frame::from_observation(&SpritesEnv::new(EnvConfig::default()).reset(1).0);
    let req = json!({"observation": frame, "overrides": {"11": 0.0}});
    let (status, body) = http(addr, "POST", "/api/predict", Some(&req.to_string())).await;
    assert_eq!(status, 400);
    let v: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["field"], "overrides");

    let (status, _) = http(addr, "POST", "/api/predict", Some("{not json")).await;
    assert_eq!(status, 400);

    let req = json!({"session_id": "nope", "overrides": {}});
    let (status, body) = http(addr, "POST", "/api/predict", Some(&req.to_string())).await;
    assert_eq!(status, 404, "{body}");
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn connect(addr: SocketAddr) -> (Ws, String) {
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/api/session")).await.unwrap();
    match recv(&mut ws).await {
        ServerMsg::Hello { session_id, .. } => (ws, session_id),
        other => panic!("expected hello, got {other:?}"),
    }
}

async fn recv(ws: &mut Ws) -> ServerMsg {
    loop {
        match ws.next().await.unwrap().unwrap() {
            Message::Text(t) => return serde_json::from_str(&t).unwrap(),
            Message::Close(_) => panic!("closed"),
            _ => continue,
        }
    }
}

async fn cmd(ws: &mut Ws, v: serde_json::Value) {
    ws.send(Message::Text(v.to_string().into())).await.unwrap();
}

#[tokio::test]
async fn reset_frame_is_environment_render() {
    let addr = spawn(Some(checkpoint(64))).await;
    let (mut ws, _) = connect(addr).await;
    cmd(&mut ws, json!({"cmd": "reset", "seed": 42})).await;
    let expected = SpritesEnv::new(EnvConfig::default()).reset(42).0;
    match recv(&mut ws).await {
        ServerMsg::Reset { frame, step_index, .. } => {
            assert_eq!(step_index, 0);
            assert_eq!(frame.to_observation().unwrap(), expected);
        }
        other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn auto_matches_govern_rollout() {
    let ck = checkpoint(12);
    let addr = spawn(Some(ck.clone())).await;
    let (mut ws, _) = connect(addr).await;
    cmd(&mut ws, json!({"cmd": "reset", "seed": 9})).await;
    recv(&mut ws).await;
    let t0 = std::time::Instant::now();
    cmd(&mut ws, json!({"cmd": "auto", "steps": 12})).await;
    let mut frames = Vec::new();
    for _ in 0..12 {
        match recv(&mut ws).await {
            ServerMsg::Step { frame, action, step_index, .. } => frames.push((frame, action, step_index)),
            other => panic!("{other:?}"),
        }
    }
    // at most 30 steps per second
    assert!(t0.elapsed() >= std::time::Duration::from_millis(11 * 1000 / 30 - 5));
    let trace = govern_rollout(&ck.model, ck.config.env, &OverrideSchedule::default(), 9).unwrap();
    for (i, s) in trace.steps.iter().enumerate() {
        assert_eq!(frames[i], (s.frame.clone(), s.action, i));
    }
}

#[tokio::test]
async fn step_after_done_keeps_session() {
    let addr = spawn(Some(checkpoint(2))).await;
    let (mut ws, id) = connect(addr).await;
    cmd(&mut ws, json!({"cmd": "reset", "seed": 1})).await;
    recv(&mut ws).await;
    for _ in 0..2 {
        cmd(&mut ws, json!({"cmd": "step", "overrides": {"1": 0.5}, "action": "up"})).await;
        match recv(&mut ws).await {
            ServerMsg::Step { applied_overrides, action, .. } => {
                assert_eq!(applied_overrides, vec![Override { dim: 1, value: 0.5 }]);
                assert_eq!(action, DiscreteAction::Up);
            }
            other => panic!("{other:?}"),
        }
    }
    cmd(&mut ws, json!({"cmd": "step"})).await;
    assert!(matches!(recv(&mut ws).await, ServerMsg::Error { .. }));
    // still usable, and visible to /predict
    let req = json!({"session_id": id, "overrides": {}, "action": "noop"});
    let (status, _) = http(addr, "POST", "/api/predict", Some(&req.to_string())).await;
    assert_eq!(status, 200);
    cmd(&mut ws, json!({"cmd": "reset", "seed": 2})).await;
    assert!(matches!(recv(&mut ws).await, ServerMsg::Reset { seed: 2, .. }));
}

#[tokio::test]
async fn malformed_message_closes_with_error() {
    let addr = spawn(Some(checkpoint(64))).await;
    let (mut ws, _) = connect(addr).await;
    cmd(&mut ws, json!({"cmd": "fly"})).await;
    assert!(matches!(recv(&mut ws).await, ServerMsg::Error { .. }));
    loop {
        match ws.next().await {
            Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
            Some(Ok(_)) => continue,
        }
    }
}

async fn play(addr: SocketAddr, seed: u64) -> Vec<ServerMsg> {
    let (mut ws, _) = connect(addr).await;
    let mut out = Vec::new();
    cmd(&mut ws, json!({"cmd": "reset", "seed": seed})).await;
    out.push(recv(&mut ws).await);
    for i in 0..5 {
        cmd(&mut ws, json!({"cmd": "step", "overrides": {"2": i as f64 * 0.5}})).await;
        out.push(recv(&mut ws).await);
    }
    out
}

#[tokio::test]
async fn sessions_are_isolated_and_replayable() {
    let addr = spawn(Some(checkpoint(64))).await;
    let solo_a = play(addr, 5).await;
    let solo_b = play(addr, 6).await;
    assert_eq!(play(addr, 5).await, solo_a);

    // interleave two sessions step by step
    let (mut a, _) = connect(addr).await;
    let (mut b, _) = connect(addr).await;
    let (mut got_a, mut got_b) = (Vec::new(), Vec::new());
    cmd(&mut a, json!({"cmd": "reset", "seed": 5})).await;
    cmd(&mut b, json!({"cmd": "reset", "seed": 6})).await;
    got_a.push(recv(&mut a).await);
    got_b.push(recv(&mut b).await);
    for i in 0..5 {
        let msg = json!({"cmd": "step", "overrides": {"2": i as f64 * 0.5}});
        cmd(&mut b, msg.clone()).await;
        cmd(&mut a, msg).await;
        got_b.push(recv(&mut b).await);
        got_a.push(recv(&mut a).await);
    }
    assert_eq!(got_a, solo_a);
    assert_eq!(got_b, solo_b);
}
