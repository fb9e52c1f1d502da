//! JSON message shapes. Every body carries `"v": 1`.

use std::collections::BTreeMap;

use acvae::env::DiscreteAction;
use acvae::governance::{Frame, Override, StepRecord};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

fn v1() -> u32 {
    PROTOCOL_VERSION
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub v: u32,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ErrorBody {
    pub fn new(error: impl Into<String>, field: Option<&str>) -> Self {
        ErrorBody {
            v: v1(),
            error: error.into(),
            field: field.map(str::to_string),
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DimInfo {
    pub dim: usize,
    pub mapped: bool,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelInfo {
    pub v: u32,
    pub n: usize,
    pub m: usize,
    pub dims: Vec<DimInfo>,
    pub step_count: u64,
    pub seed: u64,
    pub frame_width: usize,
    pub frame_height: usize,
    pub actions: Vec<DiscreteAction>,
    pub config: serde_json::Value,
}

/// Latent overrides keyed by 1-based dim, e.g. `{"2": 1.5}`.
pub type OverrideMap = BTreeMap<String, f64>;

/// Parses an override map; the error names the offending key.
pub fn parse_overrides(map: &OverrideMap) -> Result<Vec<Override>, String> {
    map.iter()
        .map(|(k, &value)| {
            k.trim()
                .parse::<usize>()
                .map(|dim| Override { dim, value })
                .map_err(|_| format!("override key `{k}` is not a dimension index"))
        })
        .collect()
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub observation: Option<Frame>,
    #[serde(default)]
    pub overrides: OverrideMap,
    #[serde(default)]
    pub action: Option<DiscreteAction>,
    /// Seed for sampling the action when none is given.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PredictResponse {
    pub v: u32,
    pub predicted_image: Frame,
    pub policy: Vec<f64>,
    pub value: f64,
    pub action: DiscreteAction,
    pub mu: Vec<f64>,
}

/// Client to server WebSocket messages.
#[derive(Debug, Deserialize, Serialize, Clone)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMsg {
    Reset {
        seed: u64,
    },
    Step {
        #[serde(default)]
        overrides: OverrideMap,
        #[serde(default)]
        action: Option<DiscreteAction>,
    },
    Auto {
        steps: usize,
        #[serde(default)]
        overrides: OverrideMap,
    },
}

/// Server to client WebSocket messages.
#[derive(Debug, Serialize, Deserialize, PartialEq, Clone)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Hello {
        v: u32,
        session_id: String,
    },
    Reset {
        v: u32,
        seed: u64,
        frame: Frame,
        step_index: usize,
    },
    Step {
        v: u32,
        frame: Frame,
        reward: f64,
        done: bool,
        policy: Vec<f64>,
        applied_overrides: Vec<Override>,
        step_index: usize,
        action: DiscreteAction,
    },
    Error {
        v: u32,
        error: String,
    },
}

impl ServerMsg {
    pub fn error(msg: impl Into<String>) -> Self {
        ServerMsg::Error {
            v: v1(),
            error: msg.into(),
        }
    }

    pub fn from_record(r: StepRecord) -> Self {
        ServerMsg::Step {
            v: v1(),
            frame: r.frame,
            reward: r.reward,
            done: r.done,
            policy: r.policy,
            applied_overrides: r.applied_overrides,
            step_index: r.step_index,
            action: r.action,
        }
    }
}
