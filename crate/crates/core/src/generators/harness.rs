//! Frames generated payloads as requests, persists each input before it
//! leaves, and pairs every response with its coverage feedback frame.

use std::io::BufReader;
use std::net::TcpStream;
use std::time::Duration;

use crate::client::TargetClient;
use crate::coverage::ExecFeedback;
use crate::error::{Error, Result};
use crate::records::{FeedbackSummary, InputLog, InputRecord, Outcome};
use crate::surface::ApiRef;
use crate::target::log::now_us;
use crate::wire::{read_frame, values_to_json, Request, Response, TypedValue};

#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub endpoint: String,
    pub feedback_endpoint: Option<String>,
    pub principal: u32,
    /// Open a new request connection for every execution.
    pub reconnect_each_exec: bool,
    pub response_timeout: Duration,
    pub feedback_timeout: Duration,
}

impl HarnessConfig {
    pub fn new(endpoint: &str, feedback_endpoint: Option<&str>, principal: u32) -> Self {
        HarnessConfig {
            endpoint: endpoint.to_string(),
            feedback_endpoint: feedback_endpoint.map(str::to_string),
            principal,
            reconnect_each_exec: false,
            response_timeout: Duration::from_secs(2),
            feedback_timeout: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Delivery {
    Response(Response),
    /// Connection refused, dropped or timed out. A signal for the
    /// monitors, not an error of the generator.
    TargetDeath(String),
}

#[derive(Debug, Clone)]
pub struct Exec {
    pub seq: u64,
    pub ts: u64,
    pub delivery: Delivery,
    pub feedback: Option<ExecFeedback>,
}

struct FeedbackReader {
    reader: BufReader<TcpStream>,
    last_seq: Option<u64>,
}

impl FeedbackReader {
    fn connect(endpoint: &str) -> Result<Self> {
        let stream = TcpStream::connect(endpoint).map_err(|e| Error::Connection {
            endpoint: endpoint.to_string(),
            reason: e.to_string(),
        })?;
        stream.set_nodelay(true)?;
        Ok(FeedbackReader {
            reader: BufReader::new(stream),
            last_seq: None,
        })
    }

    /// Next frame newer than the last one seen. `None` on timeout or a
    /// dead channel.
    fn next(&mut self, timeout: Duration) -> Option<ExecFeedback> {
        self.reader.get_ref().set_read_timeout(Some(timeout)).ok()?;
        loop {
            let body = read_frame(&mut self.reader).ok()??;
            let fb = ExecFeedback::decode(&body).ok()?;
            if self.last_seq.is_some_and(|s| fb.exec_seq <= s) {
                continue;
            }
            self.last_seq = Some(fb.exec_seq);
            return Some(fb);
        }
    }
}

pub struct Harness {
    cfg: HarnessConfig,
    conn: Option<TargetClient>,
    feedback: Option<FeedbackReader>,
    log: InputLog,
    seq: u64,
}

impl Harness {
    pub fn new(cfg: HarnessConfig, log: InputLog) -> Result<Self> {
        let feedback = match &cfg.feedback_endpoint {
            Some(ep) => Some(FeedbackReader::connect(ep)?),
            None => None,
        };
        Ok(Harness {
            cfg,
            conn: None,
            feedback,
            log,
            seq: 0,
        })
    }

    /// Sequence numbers continue after `seq`; for several sessions
    /// sharing one input log.
    pub fn starting_at(mut self, seq: u64) -> Self {
        self.seq = seq;
        self
    }

    /// Sequence number of the last input sent.
    pub fn last_seq(&self) -> u64 {
        self.seq
    }

    pub fn into_log(self) -> InputLog {
        self.log
    }

    pub fn log_mut(&mut self) -> &mut InputLog {
        &mut self.log
    }

    fn connection(&mut self) -> std::result::Result<&mut TargetClient, String> {
        if self.conn.is_none() {
            let c = TargetClient::connect_timeout(&self.cfg.endpoint, self.cfg.response_timeout)
                .map_err(|e| e.to_string())?;
            self.conn = Some(c);
        }
        Ok(self.conn.as_mut().unwrap())
    }

    /// Sends one request. Errors only when the input log cannot be written.
    pub fn send(
        &mut self,
        api: &ApiRef,
        payload: Vec<u8>,
        decoded: Option<&[TypedValue]>,
    ) -> Result<Exec> {
        self.seq += 1;
        let ts = now_us();
        let req = Request::new(api.service.clone(), api.txn_id, self.cfg.principal, payload);
        let body = req.encode();
        self.log.persist(&InputRecord {
            seq: self.seq,
            ts,
            service: api.service.clone(),
            txn_id: api.txn_id,
            principal: self.cfg.principal,
            raw_hex: hex::encode(&req.payload),
            decoded: decoded.map(values_to_json),
            outcome: None,
            feedback: None,
        })?;

        let delivery = match self.connection() {
            Err(reason) => Delivery::TargetDeath(format!("connect: {reason}")),
            Ok(conn) => match conn.send_body(&body).and_then(|_| conn.recv()) {
                Ok(resp) => Delivery::Response(resp),
                Err(e) => {
                    self.conn = None;
                    Delivery::TargetDeath(e.to_string())
                }
            },
        };
        if self.cfg.reconnect_each_exec {
            self.conn = None;
        }
        let timeout = match delivery {
            Delivery::Response(_) => self.cfg.feedback_timeout,
            Delivery::TargetDeath(_) => Duration::from_millis(100),
        };
        let feedback = self.feedback.as_mut().and_then(|f| f.next(timeout));

        let outcome = match &delivery {
            Delivery::Response(r) => Outcome::from(r),
            Delivery::TargetDeath(reason) => Outcome::TargetDeath {
                reason: reason.clone(),
            },
        };
        self.log.complete(
            self.seq,
            outcome,
            feedback.as_ref().map(|f| FeedbackSummary {
                blocks_hit: f.blocks_hit,
                block_universe: f.block_universe,
            }),
        )?;
        Ok(Exec {
            seq: self.seq,
            ts,
            delivery,
            feedback,
        })
    }

    pub fn send_typed(&mut self, api: &ApiRef, values: &[TypedValue]) -> Result<Exec> {
        self.send(api, crate::wire::encode_values(values), Some(values))
    }
}
