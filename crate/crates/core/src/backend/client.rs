//! Blocking HTTP client for the task backend.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use super::http::{ClaimRequest, CompleteRequest, IngestRequest, RenewRequest};
use super::{Analysis, Counts, Task, TaskSpec, TaskStatus};
use crate::error::{Error, Result};

#[derive(Clone)]
pub struct BackendClient {
    base: String,
    agent: ureq::Agent,
}

impl BackendClient {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(10)))
            .build()
            .into();
        BackendClient {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn conn_err(&self, e: ureq::Error) -> Error {
        Error::Connection {
            endpoint: self.base.clone(),
            reason: e.to_string(),
        }
    }

    fn decode(&self, mut resp: ureq::http::Response<ureq::Body>) -> Result<Value> {
        let status = resp.status().as_u16();
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Backend(format!("HTTP {status}: unreadable body: {e}")))?;
        if status == 200 {
            return Ok(v);
        }
        let msg = v["message"].as_str().unwrap_or("").to_string();
        Err(match v["error"].as_str().unwrap_or("") {
            "validation" => Error::Validation(vec![msg]),
            "unknown_task" => Error::UnknownTask(msg),
            "lease_expired" => Error::LeaseExpired(msg),
            "not_claimed" => Error::NotClaimed(msg),
            "lease_mismatch" => Error::LeaseMismatch {
                task_id: String::new(),
                holder: String::new(),
                worker_id: msg,
            },
            _ => Error::Backend(format!("HTTP {status}: {msg}")),
        })
    }

    fn post(&self, path: &str, body: impl serde::Serialize) -> Result<Value> {
        let resp = self
            .agent
            .post(format!("{}{path}", self.base))
            .send_json(body)
            .map_err(|e| self.conn_err(e))?;
        self.decode(resp)
    }

    fn get(&self, path: &str) -> Result<Value> {
        let resp = self
            .agent
            .get(format!("{}{path}", self.base))
            .call()
            .map_err(|e| self.conn_err(e))?;
        self.decode(resp)
    }

    fn field<T: DeserializeOwned>(v: Value, key: &str) -> Result<T> {
        serde_json::from_value(v[key].clone())
            .map_err(|e| Error::Backend(format!("reply field `{key}`: {e}")))
    }

    pub fn ingest(&self, tasks: Vec<TaskSpec>) -> Result<usize> {
        Self::field(self.post("/tasks", IngestRequest { tasks })?, "ingested")
    }

    pub fn claim(&self, client_id: &str, worker_id: &str, analysis: Option<Analysis>) -> Result<Option<Task>> {
        let req = ClaimRequest {
            client_id: client_id.to_string(),
            worker_id: worker_id.to_string(),
            analysis,
        };
        Self::field(self.post("/tasks/claim", req)?, "task")
    }

    pub fn complete(
        &self,
        task_id: &str,
        worker_id: &str,
        status: TaskStatus,
        report_ref: Option<String>,
    ) -> Result<Task> {
        let req = CompleteRequest {
            worker_id: worker_id.to_string(),
            status,
            report_ref,
        };
        Self::field(self.post(&format!("/tasks/{task_id}/complete"), req)?, "task")
    }

    pub fn renew(&self, task_id: &str, worker_id: &str) -> Result<Task> {
        let req = RenewRequest {
            worker_id: worker_id.to_string(),
        };
        Self::field(self.post(&format!("/tasks/{task_id}/renew"), req)?, "task")
    }

    pub fn list(&self, status: Option<TaskStatus>) -> Result<Vec<Task>> {
        let path = match status {
            Some(s) => format!("/tasks?status={}", json!(s).as_str().unwrap_or_default()),
            None => "/tasks".to_string(),
        };
        Self::field(self.get(&path)?, "tasks")
    }

    pub fn health(&self) -> Result<Counts> {
        Self::field(self.get("/health")?, "counts")
    }
}
