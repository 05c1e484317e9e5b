use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::space::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Ok,
    Failed,
    Timeout,
}

/// One line of the master/worker protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Register {
        worker_id: String,
        #[serde(default)]
        features: BTreeMap<String, String>,
    },
    Request {
        worker_id: String,
    },
    Task {
        task_id: u64,
        model_id: String,
        assignment: BTreeMap<String, Value>,
        timeout_s: f64,
    },
    Result {
        task_id: u64,
        status: TaskStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        loss: Option<f64>,
        duration_s: f64,
        #[serde(default)]
        log_tail: String,
    },
    Heartbeat {
        worker_id: String,
    },
    Shutdown,
    Error {
        code: String,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("bad_frame: {0}")]
    BadFrame(String),
    #[error("bad_schema: {0}")]
    BadSchema(String),
    #[error("invalid message: {0}")]
    Invalid(String),
}

impl ProtocolError {
    pub fn code(&self) -> &'static str {
        match self {
            ProtocolError::BadFrame(_) => "bad_frame",
            ProtocolError::BadSchema(_) => "bad_schema",
            ProtocolError::Invalid(_) => "invalid_message",
        }
    }

    /// The error reply sent back to the peer.
    pub fn to_message(&self) -> Message {
        let detail = match self {
            ProtocolError::BadFrame(d) | ProtocolError::BadSchema(d) | ProtocolError::Invalid(d) => {
                d.clone()
            }
        };
        Message::Error { code: self.code().to_string(), detail }
    }
}

impl Message {
    pub fn error(code: &str, detail: impl Into<String>) -> Self {
        Message::Error { code: code.to_string(), detail: detail.into() }
    }

    fn check(&self) -> Result<(), String> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be finite"))
            }
        };
        match self {
            Message::Task { assignment, timeout_s, .. } => {
                finite("timeout_s", *timeout_s)?;
                for (k, v) in assignment {
                    if let Value::Real(r) = v {
                        finite(k, *r)?;
                    }
                }
                Ok(())
            }
            Message::Result { status, loss, duration_s, .. } => {
                finite("duration_s", *duration_s)?;
                match (status, loss) {
                    (TaskStatus::Ok, Some(l)) => finite("loss", *l),
                    (TaskStatus::Ok, None) => Err("ok result requires a loss".into()),
                    (_, Some(_)) => Err("loss is only allowed on ok results".into()),
                    (_, None) => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }
}

/// Renders any serializable value as one canonical line: keys sorted,
/// shortest round-trip numbers, newline terminated.
pub fn encode_line<T: Serialize>(value: &T) -> Result<String, ProtocolError> {
    // serde_json::Value objects are BTreeMaps, so keys come out sorted.
    let tree = serde_json::to_value(value).map_err(|e| ProtocolError::Invalid(e.to_string()))?;
    let mut line = tree.to_string();
    line.push('\n');
    Ok(line)
}

pub fn encode(message: &Message) -> Result<String, ProtocolError> {
    message.check().map_err(ProtocolError::Invalid)?;
    encode_line(message)
}

/// Decodes one line. Unknown fields are ignored.
pub fn decode(line: &str) -> Result<Message, ProtocolError> {
    let line = line.trim_end_matches(['\n', '\r']);
    let tree: serde_json::Value =
        serde_json::from_str(line).map_err(|e| ProtocolError::BadFrame(e.to_string()))?;
    if !tree.is_object() {
        return Err(ProtocolError::BadFrame("message must be a JSON object".into()));
    }
    let message: Message =
        serde_json::from_value(tree).map_err(|e| ProtocolError::BadSchema(e.to_string()))?;
    message.check().map_err(ProtocolError::BadSchema)?;
    Ok(message)
}
