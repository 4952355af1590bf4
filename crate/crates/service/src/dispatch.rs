//! Where confirmed selections go: a JSON-lines log or a loopback robot
//! that acknowledges every pick.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::grasp::GraspPoint;
use crate::{ServiceError, ServiceResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickCommand {
    pub session_id: String,
    pub query_id: String,
    pub env_id: String,
    pub candidate_id: String,
    pub grasp_point: Option<GraspPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchState {
    Logged,
    Acknowledged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchStatus {
    pub sink: String,
    pub state: DispatchState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

pub trait DispatchSink: Send + Sync {
    fn name(&self) -> &str;
    fn dispatch(&self, cmd: &PickCommand) -> DispatchStatus;
}

pub struct LogSink {
    path: PathBuf,
    file: Mutex<File>,
}

impl LogSink {
    pub fn open(path: &Path) -> ServiceResult<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ServiceError::Dispatch(format!("{}: {e}", path.display())))?;
        Ok(LogSink { path: path.to_path_buf(), file: Mutex::new(file) })
    }
}

impl DispatchSink for LogSink {
    fn name(&self) -> &str {
        "log"
    }

    fn dispatch(&self, cmd: &PickCommand) -> DispatchStatus {
        let line = serde_json::to_string(cmd).expect("pick command serializes");
        let mut f = self.file.lock().unwrap_or_else(|p| p.into_inner());
        match writeln!(f, "{line}").and_then(|_| f.flush()) {
            Ok(()) => DispatchStatus { sink: "log".into(), state: DispatchState::Logged, detail: None },
            Err(e) => DispatchStatus {
                sink: "log".into(),
                state: DispatchState::Failed,
                detail: Some(format!("{}: {e}", self.path.display())),
            },
        }
    }
}

/// Simulated robot endpoint. Keeps every command it receives.
#[derive(Default)]
pub struct LoopbackSimulator {
    received: Mutex<Vec<PickCommand>>,
}

impl LoopbackSimulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn received(&self) -> Vec<PickCommand> {
        self.received.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

impl DispatchSink for LoopbackSimulator {
    fn name(&self) -> &str {
        "loopback"
    }

    fn dispatch(&self, cmd: &PickCommand) -> DispatchStatus {
        let mut r = self.received.lock().unwrap_or_else(|p| p.into_inner());
        r.push(cmd.clone());
        DispatchStatus {
            sink: "loopback".into(),
            state: DispatchState::Acknowledged,
            detail: Some(format!("pick #{} accepted", r.len())),
        }
    }
}
