//! Length-prefixed TCP front-end to an embedded bus.
//!
//! Workers running in other processes (or other machines on a trusted
//! network) speak a small framed protocol: requests are
//! `[u32 le length][u8 opcode][JSON body]` and responses are
//! `[u32 le length][u8 status][JSON body]`, where the length counts the tag
//! byte plus the body and status is 0 (ok), 1 (error, body `{"error"}`), or
//! 2 (empty, e.g. a `next` that timed out).
//!
//! Each connection owns its consumers (keyed by queue and worker group), so
//! dropping the connection behaves exactly like a worker crash: leases stay
//! claimed until they expire and are then redelivered to surviving
//! consumers. Partitioned subjects are not exposed here — remote workers are
//! dispatchers, which read unpartitioned queues.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Bus, Consumer, ConsumerHandle, Delivery, QueueConfig, StreamState};
use crate::model::TaskEnvelope;
use crate::payload::Payload;

pub const OP_PUBLISH: u8 = 1;
pub const OP_NEXT: u8 = 2;
pub const OP_ACK: u8 = 3;
pub const OP_HEARTBEAT: u8 = 4;
pub const OP_STATE: u8 = 5;
pub const OP_CREATE_QUEUE: u8 = 6;

pub const STATUS_OK: u8 = 0;
pub const STATUS_ERR: u8 = 1;
pub const STATUS_EMPTY: u8 = 2;

const MAX_FRAME: u32 = 64 * 1024 * 1024;
const MAX_NEXT_TIMEOUT_MS: u64 = 60_000;

#[derive(Debug, Error)]
pub enum SocketError {
    #[error("socket i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("remote error: {0}")]
    Remote(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

#[derive(Serialize, Deserialize)]
struct PublishReq {
    queue: String,
    payload: Payload,
    #[serde(default)]
    headers: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct PublishResp {
    id: u64,
}

fn default_max_inflight() -> usize {
    64
}

#[derive(Serialize, Deserialize)]
struct NextReq {
    queue: String,
    worker_group: String,
    timeout_ms: u64,
    #[serde(default = "default_max_inflight")]
    max_inflight: usize,
}

#[derive(Serialize, Deserialize)]
struct NextResp {
    subject: String,
    message_id: u64,
    payload: Payload,
    #[serde(default)]
    headers: BTreeMap<String, String>,
    enqueue_time_ns: u64,
    retry_count: u32,
}

#[derive(Serialize, Deserialize)]
struct LeaseReq {
    queue: String,
    worker_group: String,
    message_id: u64,
}

#[derive(Serialize, Deserialize)]
struct StateReq {
    queue: String,
}

#[derive(Serialize, Deserialize)]
struct ErrResp {
    error: String,
}

fn write_frame(stream: &mut TcpStream, tag: u8, body: &[u8]) -> std::io::Result<()> {
    let len = (body.len() + 1) as u32;
    stream.write_all(&len.to_le_bytes())?;
    stream.write_all(&[tag])?;
    stream.write_all(body)?;
    stream.flush()
}

/// `Ok(None)` on clean EOF before a frame starts.
fn read_frame(stream: &mut TcpStream) -> std::io::Result<Option<(u8, Vec<u8>)>> {
    let mut len_buf = [0u8; 4];
    match stream.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len_buf);
    if len == 0 || len > MAX_FRAME {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("frame length {len} out of range"),
        ));
    }
    let mut tag = [0u8; 1];
    stream.read_exact(&mut tag)?;
    let mut body = vec![0u8; len as usize - 1];
    stream.read_exact(&mut body)?;
    Ok(Some((tag[0], body)))
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

/// A bus exposed on a local TCP port. Dropping the handle stops accepting;
/// existing connections end when their clients disconnect.
pub struct BusServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl BusServer {
    /// Listen on `127.0.0.1:<port>` (0 picks a free port).
    pub fn serve(bus: Bus, port: u16) -> std::io::Result<BusServer> {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let accept_thread = std::thread::Builder::new()
            .name("bus-socket-accept".to_string())
            .spawn(move || {
                for conn in listener.incoming() {
                    if stop2.load(Ordering::SeqCst) {
                        return;
                    }
                    let Ok(stream) = conn else { continue };
                    let bus = bus.clone();
                    std::thread::spawn(move || {
                        let _ = serve_connection(stream, bus);
                    });
                }
            })?;
        Ok(BusServer {
            addr,
            stop,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BusServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(mut stream: TcpStream, bus: Bus) -> std::io::Result<()> {
    stream.set_nodelay(true).ok();
    // Consumers made for this connection; they drop (leases intact) when the
    // connection ends.
    let mut consumers: HashMap<(String, String), Consumer> = HashMap::new();
    while let Some((opcode, body)) = read_frame(&mut stream)? {
        let reply = handle_request(&bus, &mut consumers, opcode, &body);
        match reply {
            Ok(Some(json)) => write_frame(&mut stream, STATUS_OK, &json)?,
            Ok(None) => write_frame(&mut stream, STATUS_EMPTY, b"{}")?,
            Err(msg) => {
                let body = serde_json::to_vec(&ErrResp { error: msg }).unwrap_or_default();
                write_frame(&mut stream, STATUS_ERR, &body)?
            }
        }
    }
    Ok(())
}

fn handle_request(
    bus: &Bus,
    consumers: &mut HashMap<(String, String), Consumer>,
    opcode: u8,
    body: &[u8],
) -> Result<Option<Vec<u8>>, String> {
    fn parse<'a, T: Deserialize<'a>>(body: &'a [u8]) -> Result<T, String> {
        serde_json::from_slice(body).map_err(|e| format!("bad request body: {e}"))
    }
    fn get_consumer<'a>(
        bus: &Bus,
        consumers: &'a mut HashMap<(String, String), Consumer>,
        queue: &str,
        group: &str,
        max_inflight: usize,
    ) -> Result<&'a Consumer, String> {
        let key = (queue.to_string(), group.to_string());
        if !consumers.contains_key(&key) {
            let c = bus
                .consumer(
                    ConsumerHandle::new(queue)
                        .group(group)
                        .inflight_window(max_inflight),
                )
                .map_err(|e| e.to_string())?;
            consumers.insert(key.clone(), c);
        }
        Ok(consumers.get(&key).unwrap())
    }

    match opcode {
        OP_PUBLISH => {
            let req: PublishReq = parse(body)?;
            let id = bus
                .publish(&req.queue, req.payload, req.headers)
                .map_err(|e| e.to_string())?;
            Ok(Some(serde_json::to_vec(&PublishResp { id }).unwrap()))
        }
        OP_NEXT => {
            let req: NextReq = parse(body)?;
            let timeout = Duration::from_millis(req.timeout_ms.min(MAX_NEXT_TIMEOUT_MS));
            let c = get_consumer(bus, consumers, &req.queue, &req.worker_group, req.max_inflight)?;
            match c.next_timeout(timeout).map_err(|e| e.to_string())? {
                Some(d) => Ok(Some(
                    serde_json::to_vec(&NextResp {
                        subject: d.subject,
                        message_id: d.envelope.message_id,
                        payload: d.envelope.payload,
                        headers: d.envelope.headers,
                        enqueue_time_ns: d.envelope.enqueue_time_ns,
                        retry_count: d.envelope.retry_count,
                    })
                    .unwrap(),
                )),
                None => Ok(None),
            }
        }
        OP_ACK => {
            let req: LeaseReq = parse(body)?;
            let c = consumers
                .get(&(req.queue.clone(), req.worker_group.clone()))
                .ok_or_else(|| format!("no consumer on `{}` for this connection", req.queue))?;
            c.ack_id(&req.queue, req.message_id)
                .map_err(|e| e.to_string())?;
            Ok(Some(b"{}".to_vec()))
        }
        OP_HEARTBEAT => {
            let req: LeaseReq = parse(body)?;
            let c = consumers
                .get(&(req.queue.clone(), req.worker_group.clone()))
                .ok_or_else(|| format!("no consumer on `{}` for this connection", req.queue))?;
            c.heartbeat_id(&req.queue, req.message_id)
                .map_err(|e| e.to_string())?;
            Ok(Some(b"{}".to_vec()))
        }
        OP_STATE => {
            let req: StateReq = parse(body)?;
            let st = bus.stream_state(&req.queue).map_err(|e| e.to_string())?;
            Ok(Some(serde_json::to_vec(&st).unwrap()))
        }
        OP_CREATE_QUEUE => {
            let config: QueueConfig = parse(body)?;
            bus.create_queue(config).map_err(|e| e.to_string())?;
            Ok(Some(b"{}".to_vec()))
        }
        other => Err(format!("unknown opcode {other}")),
    }
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

/// Blocking client for the framed protocol. One request is in flight per
/// client at a time; clone-free by design — open one client per worker
/// thread, exactly as a separate process would.
pub struct BusClient {
    stream: TcpStream,
}

impl BusClient {
    pub fn connect(addr: SocketAddr) -> Result<BusClient, SocketError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true).ok();
        Ok(BusClient { stream })
    }

    fn call(&mut self, opcode: u8, body: &[u8]) -> Result<(u8, Vec<u8>), SocketError> {
        write_frame(&mut self.stream, opcode, body)?;
        match read_frame(&mut self.stream)? {
            Some(reply) => Ok(reply),
            None => Err(SocketError::Protocol(
                "server closed the connection mid-request".to_string(),
            )),
        }
    }

    fn expect_ok<T: for<'a> Deserialize<'a>>(
        &mut self,
        opcode: u8,
        body: &[u8],
    ) -> Result<T, SocketError> {
        let (status, reply) = self.call(opcode, body)?;
        match status {
            STATUS_OK => serde_json::from_slice(&reply)
                .map_err(|e| SocketError::Protocol(format!("bad response body: {e}"))),
            STATUS_ERR => {
                let err: ErrResp = serde_json::from_slice(&reply)
                    .unwrap_or(ErrResp { error: "unknown remote error".to_string() });
                Err(SocketError::Remote(err.error))
            }
            other => Err(SocketError::Protocol(format!(
                "unexpected status {other} for opcode {opcode}"
            ))),
        }
    }

    pub fn create_queue(&mut self, config: &QueueConfig) -> Result<(), SocketError> {
        let body = serde_json::to_vec(config).unwrap();
        let _: serde_json::Value = self.expect_ok(OP_CREATE_QUEUE, &body)?;
        Ok(())
    }

    pub fn publish(
        &mut self,
        queue: &str,
        payload: Payload,
        headers: BTreeMap<String, String>,
    ) -> Result<u64, SocketError> {
        let body = serde_json::to_vec(&PublishReq {
            queue: queue.to_string(),
            payload,
            headers,
        })
        .unwrap();
        let resp: PublishResp = self.expect_ok(OP_PUBLISH, &body)?;
        Ok(resp.id)
    }

    /// Claim the next message for `(queue, worker_group)`, waiting up to
    /// `timeout` server-side. `Ok(None)` when nothing arrived in time.
    pub fn next(
        &mut self,
        queue: &str,
        worker_group: &str,
        timeout: Duration,
        max_inflight: usize,
    ) -> Result<Option<Delivery>, SocketError> {
        let body = serde_json::to_vec(&NextReq {
            queue: queue.to_string(),
            worker_group: worker_group.to_string(),
            timeout_ms: timeout.as_millis() as u64,
            max_inflight,
        })
        .unwrap();
        let (status, reply) = self.call(OP_NEXT, &body)?;
        match status {
            STATUS_EMPTY => Ok(None),
            STATUS_OK => {
                let resp: NextResp = serde_json::from_slice(&reply)
                    .map_err(|e| SocketError::Protocol(format!("bad response body: {e}")))?;
                Ok(Some(Delivery {
                    subject: resp.subject,
                    envelope: TaskEnvelope {
                        message_id: resp.message_id,
                        payload: resp.payload,
                        headers: resp.headers,
                        enqueue_time_ns: resp.enqueue_time_ns,
                        retry_count: resp.retry_count,
                    },
                }))
            }
            STATUS_ERR => {
                let err: ErrResp = serde_json::from_slice(&reply)
                    .unwrap_or(ErrResp { error: "unknown remote error".to_string() });
                Err(SocketError::Remote(err.error))
            }
            other => Err(SocketError::Protocol(format!("unexpected status {other}"))),
        }
    }

    pub fn ack(
        &mut self,
        queue: &str,
        worker_group: &str,
        message_id: u64,
    ) -> Result<(), SocketError> {
        let body = serde_json::to_vec(&LeaseReq {
            queue: queue.to_string(),
            worker_group: worker_group.to_string(),
            message_id,
        })
        .unwrap();
        let _: serde_json::Value = self.expect_ok(OP_ACK, &body)?;
        Ok(())
    }

    pub fn heartbeat(
        &mut self,
        queue: &str,
        worker_group: &str,
        message_id: u64,
    ) -> Result<(), SocketError> {
        let body = serde_json::to_vec(&LeaseReq {
            queue: queue.to_string(),
            worker_group: worker_group.to_string(),
            message_id,
        })
        .unwrap();
        let _: serde_json::Value = self.expect_ok(OP_HEARTBEAT, &body)?;
        Ok(())
    }

    pub fn stream_state(&mut self, queue: &str) -> Result<StreamState, SocketError> {
        let body = serde_json::to_vec(&StateReq {
            queue: queue.to_string(),
        })
        .unwrap();
        self.expect_ok(OP_STATE, &body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::BusOptions;

    fn served_bus(ack: Duration) -> (Bus, BusServer) {
        let bus = Bus::open(BusOptions::in_memory().ack_timeout(ack)).unwrap();
        let server = BusServer::serve(bus.clone(), 0).unwrap();
        (bus, server)
    }

    #[test]
    fn remote_roundtrip_publish_next_ack_state() {
        let (_bus, server) = served_bus(Duration::from_secs(5));
        let mut client = BusClient::connect(server.addr()).unwrap();
        client.create_queue(&QueueConfig::new("jobs")).unwrap();
        let id = client
            .publish("jobs", Payload::new().with("block_num", 7i64), BTreeMap::new())
            .unwrap();
        assert_eq!(id, 1);
        let d = client
            .next("jobs", "jobs", Duration::from_secs(2), 64)
            .unwrap()
            .expect("message delivered");
        assert_eq!(d.envelope.message_id, 1);
        assert_eq!(d.envelope.payload.get_int("block_num"), Some(7));
        client.ack("jobs", "jobs", d.envelope.message_id).unwrap();
        let st = client.stream_state("jobs").unwrap();
        assert_eq!(st.depth, 0);
        assert_eq!(st.delivered_total, 1);
    }

    #[test]
    fn empty_timeout_returns_none_not_an_error() {
        let (_bus, server) = served_bus(Duration::from_secs(5));
        let mut client = BusClient::connect(server.addr()).unwrap();
        client.create_queue(&QueueConfig::new("idle")).unwrap();
        let got = client
            .next("idle", "idle", Duration::from_millis(50), 64)
            .unwrap();
        assert!(got.is_none());
    }

    #[test]
    fn remote_errors_carry_the_bus_message() {
        let (_bus, server) = served_bus(Duration::from_secs(5));
        let mut client = BusClient::connect(server.addr()).unwrap();
        let err = client
            .publish("nope", Payload::new(), BTreeMap::new())
            .unwrap_err();
        match err {
            SocketError::Remote(msg) => assert!(msg.contains("nope")),
            other => panic!("expected remote error, got {other:?}"),
        }
    }

    #[test]
    fn disconnect_mid_task_redelivers_to_the_next_worker() {
        let (_bus, server) = served_bus(Duration::from_millis(300));
        let mut admin = BusClient::connect(server.addr()).unwrap();
        admin.create_queue(&QueueConfig::new("work")).unwrap();
        admin
            .publish("work", Payload::new().with("task_id", "t-1"), BTreeMap::new())
            .unwrap();
        {
            let mut doomed = BusClient::connect(server.addr()).unwrap();
            let d = doomed
                .next("work", "work", Duration::from_secs(2), 64)
                .unwrap()
                .expect("first worker claims the task");
            assert_eq!(d.envelope.retry_count, 0);
            // The worker "crashes" here: connection drops, no ack.
        }
        let mut survivor = BusClient::connect(server.addr()).unwrap();
        let quick = survivor
            .next("work", "work", Duration::from_millis(100), 64)
            .unwrap();
        assert!(quick.is_none(), "lease still claimed right after the crash");
        let d = survivor
            .next("work", "work", Duration::from_secs(3), 64)
            .unwrap()
            .expect("lease expired and the task moved on");
        assert_eq!(d.envelope.retry_count, 1);
        assert_eq!(d.envelope.payload.task_id(), Some("t-1"));
        survivor.ack("work", "work", d.envelope.message_id).unwrap();
        assert_eq!(survivor.stream_state("work").unwrap().depth, 0);
    }

    #[test]
    fn heartbeat_over_the_wire_keeps_a_slow_task_alive() {
        let (_bus, server) = served_bus(Duration::from_millis(200));
        let mut client = BusClient::connect(server.addr()).unwrap();
        client.create_queue(&QueueConfig::new("slow")).unwrap();
        client
            .publish("slow", Payload::new().with("task_id", "s-1"), BTreeMap::new())
            .unwrap();
        let d = client
            .next("slow", "slow", Duration::from_secs(2), 64)
            .unwrap()
            .unwrap();
        for _ in 0..4 {
            std::thread::sleep(Duration::from_millis(120));
            client.heartbeat("slow", "slow", d.envelope.message_id).unwrap();
        }
        client.ack("slow", "slow", d.envelope.message_id).unwrap();
        let st = client.stream_state("slow").unwrap();
        assert_eq!(st.redelivered_total, 0, "heartbeats kept the lease alive");
        assert_eq!(st.depth, 0);
    }
}
