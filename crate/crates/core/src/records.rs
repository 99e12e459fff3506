//! Input records: the replayable log of every invocation a generator made.
//!
//! `inputs.jsonl` holds one record per line, written before the request is
//! sent. Outcomes arrive after the response and go to a side file,
//! `outcomes.jsonl`, which [`finalize`] folds back into `inputs.jsonl`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::surface::ApiRef;
use crate::wire::{Request, Response};

pub const INPUTS_FILE: &str = "inputs.jsonl";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    PermissionDenied { permission: String },
    Exception { class: String, message: String },
    NoSuchService,
    NoSuchTxn,
    /// No response: connection dropped, refused or timed out.
    TargetDeath { reason: String },
}

impl From<&Response> for Outcome {
    fn from(r: &Response) -> Self {
        match r {
            Response::Ok(_) => Outcome::Ok,
            Response::PermissionDenied(p) => Outcome::PermissionDenied {
                permission: p.clone(),
            },
            Response::Exception { class, message } => Outcome::Exception {
                class: class.clone(),
                message: message.clone(),
            },
            Response::NoSuchService => Outcome::NoSuchService,
            Response::NoSuchTxn => Outcome::NoSuchTxn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSummary {
    pub blocks_hit: u32,
    pub block_universe: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub seq: u64,
    /// Microseconds since the Unix epoch, taken just before sending.
    pub ts: u64,
    pub service: String,
    pub txn_id: u32,
    #[serde(default)]
    pub principal: u32,
    pub raw_hex: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoded: Option<Value>,
    #[serde(default)]
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackSummary>,
}

impl InputRecord {
    pub fn api_ref(&self) -> ApiRef {
        ApiRef::new(self.service.clone(), self.txn_id)
    }

    pub fn payload(&self) -> Result<Vec<u8>> {
        hex::decode(&self.raw_hex).map_err(|e| Error::Wire(format!("raw_hex: {e}")))
    }

    pub fn request(&self) -> Result<Request> {
        Ok(Request::new(
            self.service.clone(),
            self.txn_id,
            self.principal,
            self.payload()?,
        ))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OutcomeLine {
    seq: u64,
    outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feedback: Option<FeedbackSummary>,
}

/// Append-only writer for a session's input log.
pub struct InputLog {
    dir: PathBuf,
    inputs: File,
    outcomes: BufWriter<File>,
}

fn append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::file(path, e))
}

impl InputLog {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        Ok(InputLog {
            dir: dir.to_path_buf(),
            inputs: append(&dir.join(INPUTS_FILE))?,
            outcomes: BufWriter::new(append(&dir.join(OUTCOMES_FILE))?),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes the record straight to the file, one write call, so the
    /// line exists before the request leaves.
    pub fn persist(&mut self, rec: &InputRecord) -> Result<()> {
        let mut line = serde_json::to_vec(rec)?;
        line.push(b'\n');
        self.inputs.write_all(&line)?;
        Ok(())
    }

    pub fn complete(
        &mut self,
        seq: u64,
        outcome: Outcome,
        feedback: Option<FeedbackSummary>,
    ) -> Result<()> {
        serde_json::to_writer(
            &mut self.outcomes,
            &OutcomeLine {
                seq,
                outcome,
                feedback,
            },
        )?;
        self.outcomes.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.outcomes.flush()?;
        Ok(())
    }
}

impl Drop for InputLog {
    fn drop(&mut self) {
        let _ = self.outcomes.flush();
    }
}

fn read_outcomes(path: &Path) -> HashMap<u64, OutcomeLine> {
    let Ok(f) = File::open(path) else {
        return HashMap::new();
    };
    BufReader::new(f)
        .lines()
        .map_while(|l| l.ok())
        .filter_map(|l| serde_json::from_str::<OutcomeLine>(&l).ok())
        .map(|o| (o.seq, o))
        .collect()
}

/// Reads a JSONL input list. A `outcomes.jsonl` next to it is merged in.
pub fn load_inputs(path: &Path) -> Result<Vec<InputRecord>> {
    let f = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::ReplayCorrupt {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InputRecord = serde_json::from_str(&line).map_err(|e| Error::ReplayCorrupt {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    if let Some(dir) = path.parent() {
        let outcomes = read_outcomes(&dir.join(OUTCOMES_FILE));
        if !outcomes.is_empty() {
            for rec in &mut out {
                if let Some(o) = outcomes.get(&rec.seq) {
                    rec.outcome = Some(o.outcome.clone());
                    rec.feedback = o.feedback;
                }
            }
        }
    }
    Ok(out)
}

pub fn write_inputs(path: &Path, records: &[InputRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let f = File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
        let mut w = BufWriter::new(f);
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

/// Folds `outcomes.jsonl` into `inputs.jsonl` and removes it.
pub fn finalize(dir: &Path) -> Result<usize> {
    let inputs = dir.join(INPUTS_FILE);
    if !inputs.exists() {
        File::create(&inputs).map_err(|e| Error::file(&inputs, e))?;
    }
    let records = load_inputs(&inputs)?;
    write_inputs(&inputs, &records)?;
    let outcomes = dir.join(OUTCOMES_FILE);
    if outcomes.exists() {
        std::fs::remove_file(&outcomes).map_err(|e| Error::file(&outcomes, e))?;
    }
    Ok(records.len())
}
