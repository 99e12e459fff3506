//! Blocking RPC client for the target's request port.

use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::surface::ServiceDescription;
use crate::wire::{read_frame, write_frame, Request, Response};

pub const SERVICE_MANAGER: &str = "@servicemanager";
pub const INTROSPECT: &str = "@introspect";

pub const SM_LIST: u32 = 1;
pub const SM_DESCRIBE: u32 = 2;
pub const SM_FINGERPRINT: u32 = 3;

pub const IS_STATE_DIGEST: u32 = 1;
pub const IS_GROUND_TRUTH: u32 = 2;
pub const IS_PING: u32 = 3;
pub const IS_STATUS: u32 = 4;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

pub struct TargetClient {
    endpoint: String,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

fn resolve(endpoint: &str) -> Result<SocketAddr> {
    endpoint
        .to_socket_addrs()
        .map_err(|e| Error::Connection {
            endpoint: endpoint.to_string(),
            reason: e.to_string(),
        })?
        .next()
        .ok_or_else(|| Error::Connection {
            endpoint: endpoint.to_string(),
            reason: "address did not resolve".into(),
        })
}

impl TargetClient {
    pub fn connect(endpoint: &str) -> Result<Self> {
        Self::connect_timeout(endpoint, DEFAULT_TIMEOUT)
    }

    pub fn connect_timeout(endpoint: &str, timeout: Duration) -> Result<Self> {
        let addr = resolve(endpoint)?;
        let conn_err = |e: std::io::Error| Error::Connection {
            endpoint: endpoint.to_string(),
            reason: e.to_string(),
        };
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(conn_err)?;
        stream.set_nodelay(true).map_err(conn_err)?;
        stream.set_read_timeout(Some(timeout)).map_err(conn_err)?;
        stream.set_write_timeout(Some(timeout)).map_err(conn_err)?;
        let reader = BufReader::new(stream.try_clone().map_err(conn_err)?);
        Ok(TargetClient {
            endpoint: endpoint.to_string(),
            reader,
            writer: BufWriter::new(stream),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn set_timeout(&self, timeout: Duration) -> std::io::Result<()> {
        self.writer.get_ref().set_read_timeout(Some(timeout))?;
        self.writer.get_ref().set_write_timeout(Some(timeout))
    }

    /// Sends an already encoded request body.
    pub fn send_body(&mut self, body: &[u8]) -> std::io::Result<()> {
        write_frame(&mut self.writer, body)?;
        self.writer.flush()
    }

    /// Reads one response. A closed connection is reported as
    /// `UnexpectedEof`.
    pub fn recv(&mut self) -> std::io::Result<Response> {
        let body = read_frame(&mut self.reader)?.ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "connection closed")
        })?;
        Response::decode(&body)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }

    pub fn call(&mut self, req: &Request) -> Result<Response> {
        self.send_body(&req.encode())
            .and_then(|_| self.recv())
            .map_err(|e| Error::Connection {
                endpoint: self.endpoint.clone(),
                reason: e.to_string(),
            })
    }

    pub fn meta(&mut self, service: &str, txn_id: u32, arg: &[u8]) -> Result<Value> {
        match self.call(&Request::new(service, txn_id, 0, arg.to_vec()))? {
            Response::Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::Protocol {
                service: service.to_string(),
                reason: format!("malformed reply: {e}"),
            }),
            other => Err(Error::Protocol {
                service: service.to_string(),
                reason: format!("txn {txn_id} answered {}", other.status_name()),
            }),
        }
    }

    pub fn list_services(&mut self) -> Result<Vec<String>> {
        let v = self.meta(SERVICE_MANAGER, SM_LIST, &[])?;
        serde_json::from_value(v).map_err(|e| Error::Protocol {
            service: SERVICE_MANAGER.into(),
            reason: format!("malformed list reply: {e}"),
        })
    }

    pub fn describe_service(&mut self, name: &str) -> Result<ServiceDescription> {
        let v = self
            .meta(SERVICE_MANAGER, SM_DESCRIBE, name.as_bytes())
            .map_err(|e| match e {
                Error::Protocol { reason, .. } => Error::Protocol {
                    service: name.to_string(),
                    reason,
                },
                e => e,
            })?;
        serde_json::from_value(v).map_err(|e| Error::Protocol {
            service: name.to_string(),
            reason: format!("malformed describe reply: {e}"),
        })
    }

    pub fn fingerprint(&mut self) -> Result<String> {
        let v = self.meta(SERVICE_MANAGER, SM_FINGERPRINT, &[])?;
        v.as_str().map(str::to_string).ok_or_else(|| Error::Protocol {
            service: SERVICE_MANAGER.into(),
            reason: "fingerprint is not a string".into(),
        })
    }

    pub fn state_digest(&mut self) -> Result<String> {
        let v = self.meta(INTROSPECT, IS_STATE_DIGEST, &[])?;
        v.as_str().map(str::to_string).ok_or_else(|| Error::Protocol {
            service: INTROSPECT.into(),
            reason: "digest is not a string".into(),
        })
    }

    pub fn ground_truth(&mut self) -> Result<Value> {
        self.meta(INTROSPECT, IS_GROUND_TRUTH, &[])
    }

    pub fn ping(&mut self) -> Result<()> {
        self.meta(INTROSPECT, IS_PING, &[]).map(|_| ())
    }

    pub fn status(&mut self) -> Result<Value> {
        self.meta(INTROSPECT, IS_STATUS, &[])
    }
}
