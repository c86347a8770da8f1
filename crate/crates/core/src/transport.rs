//! Topic-based pub/sub relay over TCP and the HTTP ingest client.
//!
//! Wire frame (all integers big-endian):
//!
//! ```text
//! +----------+--------+-----------+-------------+--------+
//! | len: u32 | op: u8 | tlen: u16 | topic bytes | body   |
//! +----------+--------+-----------+-------------+--------+
//!            '----------------- len bytes ----------------'
//! ```
//!
//! Delivery is at-most-once with no retained messages. Each subscriber has
//! its own outbound queue drained by a dedicated writer, so one publisher's
//! messages reach every subscriber in send order.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, SyncSender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::json;
use thiserror::Error;

use crate::log::EventLog;
use crate::MAX_PAYLOAD_BYTES;

/// Payload limit plus header slack.
pub const DEFAULT_MAX_FRAME: usize = MAX_PAYLOAD_BYTES + 4096;
pub const MAX_TOPIC_BYTES: usize = 256;
const HEADER_BYTES: usize = 4 + 1 + 2;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("frame of {declared} bytes exceeds the {limit}-byte limit")]
    Oversize { declared: usize, limit: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid topic {0:?}")]
    InvalidTopic(String),
    #[error("connection closed")]
    Closed,
    #[error("timed out")]
    Timeout,
    #[error("http: {0}")]
    Http(String),
}

pub type Result<T, E = TransportError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Subscribe = 0x01,
    Publish = 0x02,
    Message = 0x03,
    Ping = 0x04,
    Pong = 0x05,
}

impl TryFrom<u8> for Opcode {
    type Error = TransportError;

    fn try_from(b: u8) -> Result<Self> {
        Ok(match b {
            0x01 => Opcode::Subscribe,
            0x02 => Opcode::Publish,
            0x03 => Opcode::Message,
            0x04 => Opcode::Ping,
            0x05 => Opcode::Pong,
            other => return Err(TransportError::Protocol(format!("unknown opcode 0x{other:02x}"))),
        })
    }
}

/// `<site>/<unit>/<channel>`-style topic: nonempty, no whitespace, ≤ 256 bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.len() > MAX_TOPIC_BYTES || name.chars().any(char::is_whitespace) {
            return Err(TransportError::InvalidTopic(name));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `<site>/edge/spectra`
    pub fn spectra(site: &str) -> Result<Self> {
        Self::new(format!("{site}/edge/spectra"))
    }

    /// `<site>/playback/predictions`
    pub fn predictions(site: &str) -> Result<Self> {
        Self::new(format!("{site}/playback/predictions"))
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for TopicName {
    type Err = TransportError;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub opcode: Opcode,
    pub topic: String,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(opcode: Opcode, topic: &str, body: Vec<u8>) -> Self {
        Self {
            opcode,
            topic: topic.to_string(),
            body,
        }
    }

    pub fn ping() -> Self {
        Self::new(Opcode::Ping, "", Vec::new())
    }

    pub fn pong() -> Self {
        Self::new(Opcode::Pong, "", Vec::new())
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.topic.len() + self.body.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let len = (1 + 2 + self.topic.len() + self.body.len()) as u32;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&len.to_be_bytes());
        out.push(self.opcode as u8);
        out.extend_from_slice(&(self.topic.len() as u16).to_be_bytes());
        out.extend_from_slice(self.topic.as_bytes());
        out.extend_from_slice(&self.body);
        out
    }
}

/// Incremental frame parser that keeps partial input across read timeouts.
#[derive(Debug)]
pub struct FrameReader {
    buf: Vec<u8>,
    max_frame: usize,
}

impl FrameReader {
    pub fn new(max_frame: usize) -> Self {
        Self {
            buf: Vec::new(),
            max_frame,
        }
    }

    fn try_parse(&mut self) -> Result<Option<Frame>> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
        if len + 4 > self.max_frame {
            return Err(TransportError::Oversize {
                declared: len + 4,
                limit: self.max_frame,
            });
        }
        if len < 3 {
            return Err(TransportError::Protocol(format!("frame length {len} below header size")));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let opcode = Opcode::try_from(self.buf[4])?;
        let topic_len = u16::from_be_bytes([self.buf[5], self.buf[6]]) as usize;
        if topic_len > len - 3 {
            return Err(TransportError::Protocol(format!(
                "topic length {topic_len} overruns frame of {len} bytes"
            )));
        }
        let topic = std::str::from_utf8(&self.buf[7..7 + topic_len])
            .map_err(|_| TransportError::Protocol("topic is not UTF-8".into()))?
            .to_string();
        let body = self.buf[7 + topic_len..4 + len].to_vec();
        self.buf.drain(..4 + len);
        Ok(Some(Frame { opcode, topic, body }))
    }

    /// Reads until one complete frame is buffered. Read timeouts surface as
    /// [`TransportError::Timeout`] without losing buffered bytes.
    pub fn read_frame(&mut self, r: &mut impl Read) -> Result<Frame> {
        let mut chunk = [0u8; 16 * 1024];
        loop {
            if let Some(frame) = self.try_parse()? {
                return Ok(frame);
            }
            match r.read(&mut chunk) {
                Ok(0) => return Err(TransportError::Closed),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Err(TransportError::Timeout)
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()?;
    Ok(())
}

/// Exponential backoff: `attempts` tries, waiting `base · 2^i` after failure `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub attempts: u32,
    pub base: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            attempts: 3,
            base: Duration::from_millis(500),
        }
    }
}

impl Backoff {
    pub fn delay_after(&self, failed_attempt: u32) -> Duration {
        self.base.saturating_mul(1u32 << failed_attempt.min(16))
    }

    /// Runs `op` until it succeeds, `retryable` rejects its error, or the
    /// attempts are spent. Returns the last result and the attempt count.
    pub fn run<T, E>(
        &self,
        mut op: impl FnMut(u32) -> std::result::Result<T, E>,
        retryable: impl Fn(&E) -> bool,
    ) -> (std::result::Result<T, E>, u32) {
        let attempts = self.attempts.max(1);
        let mut i = 0;
        loop {
            let result = op(i);
            i += 1;
            match &result {
                Err(e) if i < attempts && retryable(e) => thread::sleep(self.delay_after(i - 1)),
                _ => return (result, i),
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RelayConfig {
    pub max_frame: usize,
    pub keepalive: Duration,
    /// Consecutive silent keepalive intervals before a connection is reaped.
    pub missed_keepalives: u32,
    /// Frames buffered per subscriber before publishers block.
    pub outbound_capacity: usize,
}

impl Default for RelayConfig {
    fn default() -> Self {
        Self {
            max_frame: DEFAULT_MAX_FRAME,
            keepalive: Duration::from_secs(30),
            missed_keepalives: 2,
            outbound_capacity: 4096,
        }
    }
}

struct Subscriber {
    conn_id: u64,
    tx: SyncSender<Arc<Vec<u8>>>,
}

struct RelayState {
    config: RelayConfig,
    topics: RwLock<HashMap<String, Vec<Subscriber>>>,
    connections: Mutex<HashMap<u64, TcpStream>>,
    next_id: AtomicU64,
    shutdown: AtomicBool,
    log: EventLog,
}

impl RelayState {
    fn subscribe(&self, conn_id: u64, topic: &str, tx: &SyncSender<Arc<Vec<u8>>>) {
        let mut topics = self.topics.write().unwrap_or_else(|e| e.into_inner());
        let subs = topics.entry(topic.to_string()).or_default();
        if !subs.iter().any(|s| s.conn_id == conn_id) {
            subs.push(Subscriber {
                conn_id,
                tx: tx.clone(),
            });
        }
    }

    fn unsubscribe_all(&self, conn_id: u64) {
        let mut topics = self.topics.write().unwrap_or_else(|e| e.into_inner());
        topics.retain(|_, subs| {
            subs.retain(|s| s.conn_id != conn_id);
            !subs.is_empty()
        });
    }

    fn route(&self, topic: &str, body: Vec<u8>) {
        let targets: Vec<SyncSender<Arc<Vec<u8>>>> = {
            let topics = self.topics.read().unwrap_or_else(|e| e.into_inner());
            match topics.get(topic) {
                Some(subs) => subs.iter().map(|s| s.tx.clone()).collect(),
                None => return,
            }
        };
        let frame = Arc::new(Frame { opcode: Opcode::Message, topic: topic.to_string(), body }.encode());
        for tx in targets {
            // A closed queue means the subscriber is going away; its reader cleans up.
            let _ = tx.send(Arc::clone(&frame));
        }
    }
}

/// Running relay; dropping it stops the listener and closes all connections.
pub struct Relay {
    local_addr: SocketAddr,
    state: Arc<RelayState>,
    accept: Option<JoinHandle<()>>,
}

impl Relay {
    pub fn bind(addr: impl ToSocketAddrs, config: RelayConfig, log: EventLog) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let state = Arc::new(RelayState {
            config,
            topics: RwLock::new(HashMap::new()),
            connections: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            shutdown: AtomicBool::new(false),
            log,
        });
        state.log.info("relay_listening", json!({"addr": local_addr.to_string(), "max_frame": config.max_frame}));
        let accept_state = Arc::clone(&state);
        let accept = thread::Builder::new()
            .name("relay-accept".into())
            .spawn(move || accept_loop(listener, accept_state))?;
        Ok(Self {
            local_addr,
            state,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn connection_count(&self) -> usize {
        self.state.connections.lock().map(|c| c.len()).unwrap_or(0)
    }

    pub fn subscriber_count(&self, topic: &str) -> usize {
        self.state
            .topics
            .read()
            .map(|t| t.get(topic).map_or(0, Vec::len))
            .unwrap_or(0)
    }

    pub fn shutdown(&mut self) {
        self.state.shutdown.store(true, Ordering::SeqCst);
        if let Ok(conns) = self.state.connections.lock() {
            for s in conns.values() {
                let _ = s.shutdown(Shutdown::Both);
            }
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks the calling thread until the relay is shut down elsewhere.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Relay {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, state: Arc<RelayState>) {
    while !state.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let id = state.next_id.fetch_add(1, Ordering::SeqCst);
                let conn_state = Arc::clone(&state);
                let spawned = thread::Builder::new()
                    .name(format!("relay-conn-{id}"))
                    .spawn(move || {
                        if let Err(e) = serve_connection(id, stream, &conn_state) {
                            conn_state.log.warn("relay_conn_error", json!({"conn": id, "peer": peer.to_string(), "error": e.to_string()}));
                        }
                        conn_state.unsubscribe_all(id);
                        if let Ok(mut conns) = conn_state.connections.lock() {
                            if let Some(s) = conns.remove(&id) {
                                let _ = s.shutdown(Shutdown::Both);
                            }
                        }
                    });
                if let Err(e) = spawned {
                    state.log.error("relay_spawn_failed", json!({"error": e.to_string()}));
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                state.log.error("relay_accept_failed", json!({"error": e.to_string()}));
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn serve_connection(id: u64, stream: TcpStream, state: &Arc<RelayState>) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(state.config.keepalive))?;
    stream.set_write_timeout(Some(state.config.keepalive.saturating_mul(2)))?;
    state
        .connections
        .lock()
        .map_err(|_| TransportError::Protocol("poisoned connection table".into()))?
        .insert(id, stream.try_clone()?);

    let (tx, rx) = mpsc::sync_channel::<Arc<Vec<u8>>>(state.config.outbound_capacity);
    let mut write_half = stream.try_clone()?;
    let writer = thread::Builder::new()
        .name(format!("relay-writer-{id}"))
        .spawn(move || {
            for frame in rx {
                if write_half.write_all(&frame).is_err() {
                    let _ = write_half.shutdown(Shutdown::Both);
                    break;
                }
            }
        })?;

    let result = read_loop(id, stream, state, &tx);
    drop(tx);
    state.unsubscribe_all(id);
    let _ = writer.join();
    result
}

fn read_loop(
    id: u64,
    mut stream: TcpStream,
    state: &Arc<RelayState>,
    tx: &SyncSender<Arc<Vec<u8>>>,
) -> Result<()> {
    let mut reader = FrameReader::new(state.config.max_frame);
    let mut missed = 0;
    loop {
        if state.shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        let frame = match reader.read_frame(&mut stream) {
            Ok(f) => f,
            Err(TransportError::Timeout) => {
                missed += 1;
                if missed >= state.config.missed_keepalives {
                    state.log.info("relay_conn_reaped", json!({"conn": id, "missed_keepalives": missed}));
                    return Ok(());
                }
                continue;
            }
            Err(TransportError::Closed) => return Ok(()),
            Err(e) => return Err(e),
        };
        missed = 0;
        match frame.opcode {
            Opcode::Subscribe => {
                TopicName::new(frame.topic.as_str())?;
                state.subscribe(id, &frame.topic, tx);
            }
            Opcode::Publish => {
                TopicName::new(frame.topic.as_str())?;
                state.route(&frame.topic, frame.body);
            }
            Opcode::Ping => {
                let _ = tx.send(Arc::new(Frame::pong().encode()));
            }
            Opcode::Pong => {}
            Opcode::Message => {
                return Err(TransportError::Protocol("clients may not send MESSAGE frames".into()))
            }
        }
    }
}

/// A message delivered to a subscriber.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: String,
    pub body: Vec<u8>,
}

/// Single-connection relay client with a background keepalive.
pub struct RelayClient {
    stream: TcpStream,
    writer: Arc<Mutex<TcpStream>>,
    reader: FrameReader,
    closed: Arc<AtomicBool>,
    keepalive: Option<JoinHandle<()>>,
}

impl RelayClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        Self::connect_with(addr, RelayConfig::default())
    }

    pub fn connect_with(addr: impl ToSocketAddrs, config: RelayConfig) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let writer = Arc::new(Mutex::new(stream.try_clone()?));
        let closed = Arc::new(AtomicBool::new(false));
        let ka_writer = Arc::clone(&writer);
        let ka_closed = Arc::clone(&closed);
        let interval = config.keepalive;
        let keepalive = thread::Builder::new()
            .name("relay-keepalive".into())
            .spawn(move || {
                let ping = Frame::ping().encode();
                let tick = Duration::from_millis(50).min(interval);
                let mut last = Instant::now();
                while !ka_closed.load(Ordering::SeqCst) {
                    thread::sleep(tick);
                    if last.elapsed() >= interval {
                        last = Instant::now();
                        let ok = ka_writer.lock().map(|mut w| w.write_all(&ping).is_ok()).unwrap_or(false);
                        if !ok {
                            break;
                        }
                    }
                }
            })?;
        Ok(Self {
            stream,
            writer,
            reader: FrameReader::new(config.max_frame),
            closed,
            keepalive: Some(keepalive),
        })
    }

    /// Retries the connection with exponential backoff.
    pub fn connect_with_backoff(addr: SocketAddr, backoff: &Backoff) -> Result<Self> {
        backoff.run(|_| Self::connect(addr), |_| true).0
    }

    fn send(&self, frame: &Frame) -> Result<()> {
        let mut w = self
            .writer
            .lock()
            .map_err(|_| TransportError::Protocol("poisoned writer".into()))?;
        write_frame(&mut *w, frame)
    }

    /// Returns once the frame is flushed to the socket.
    pub fn publish(&self, topic: &TopicName, body: &[u8]) -> Result<()> {
        self.send(&Frame::new(Opcode::Publish, topic.as_str(), body.to_vec()))
    }

    pub fn subscribe(&self, topic: &TopicName) -> Result<()> {
        self.send(&Frame::new(Opcode::Subscribe, topic.as_str(), Vec::new()))
    }

    pub fn ping(&self) -> Result<()> {
        self.send(&Frame::ping())
    }

    /// Blocks until the next MESSAGE frame.
    pub fn recv(&mut self) -> Result<Message> {
        self.stream.set_read_timeout(None)?;
        self.next_message()
    }

    /// Waits up to `timeout` for the next MESSAGE frame.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Message>> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Ok(None);
            }
            self.stream.set_read_timeout(Some(left))?;
            match self.reader.read_frame(&mut self.stream) {
                Ok(f) if f.opcode == Opcode::Message => return Ok(Some(Message { topic: f.topic, body: f.body })),
                Ok(_) => continue,
                Err(TransportError::Timeout) => return Ok(None),
                Err(e) => return Err(e),
            }
        }
    }

    fn next_message(&mut self) -> Result<Message> {
        loop {
            let f = self.reader.read_frame(&mut self.stream)?;
            if f.opcode == Opcode::Message {
                return Ok(Message { topic: f.topic, body: f.body });
            }
        }
    }

    pub fn close(&mut self) {
        self.closed.store(true, Ordering::SeqCst);
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(h) = self.keepalive.take() {
            let _ = h.join();
        }
    }
}

impl Drop for RelayClient {
    fn drop(&mut self) {
        self.close();
    }
}

/// Subscriber that reconnects with backoff and resubscribes after failures.
pub struct ResilientSubscriber {
    addr: SocketAddr,
    topics: Vec<TopicName>,
    backoff: Backoff,
    client: Option<RelayClient>,
}

impl ResilientSubscriber {
    pub fn new(addr: SocketAddr, topics: Vec<TopicName>, backoff: Backoff) -> Self {
        Self {
            addr,
            topics,
            backoff,
            client: None,
        }
    }

    pub fn is_connected(&self) -> bool {
        self.client.is_some()
    }

    fn ensure_connected(&mut self) -> Result<&mut RelayClient> {
        if self.client.is_none() {
            let client = RelayClient::connect_with_backoff(self.addr, &self.backoff)?;
            for t in &self.topics {
                client.subscribe(t)?;
            }
            self.client = Some(client);
        }
        Ok(self.client.as_mut().expect("connected above"))
    }

    /// Next message within `timeout`. A connection error drops the client
    /// and is returned; the following call reconnects.
    pub fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Message>> {
        let client = self.ensure_connected()?;
        match client.recv_timeout(timeout) {
            Ok(m) => Ok(m),
            Err(e) => {
                self.client = None;
                Err(e)
            }
        }
    }
}

/// Result of posting one payload to the ingest endpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestOutcome {
    /// The endpoint answered; `status` may still be an error code.
    Responded { status: u16, attempts: u32 },
    /// Every attempt failed at the network level.
    Dropped { attempts: u32, error: String },
}

/// HTTP client for `POST /v1/ingest`.
#[derive(Debug, Clone)]
pub struct IngestClient {
    agent: ureq::Agent,
    url: String,
    retry: Backoff,
}

impl IngestClient {
    pub fn new(url: impl Into<String>, retry: Backoff) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(2))
            .timeout(Duration::from_secs(30))
            .build();
        Self {
            agent,
            url: url.into(),
            retry,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// POSTs `payload`, retrying network failures; HTTP error statuses are
    /// returned as-is.
    pub fn post(&self, payload: &[u8]) -> IngestOutcome {
        let (result, attempts) = self.retry.run(
            |_| {
                match self
                    .agent
                    .post(&self.url)
                    .set("Content-Type", "application/octet-stream")
                    .send_bytes(payload)
                {
                    Ok(resp) => Ok(resp.status()),
                    Err(ureq::Error::Status(code, _)) => Ok(code),
                    Err(e) => Err(e.to_string()),
                }
            },
            |_| true,
        );
        match result {
            Ok(status) => IngestOutcome::Responded { status, attempts },
            Err(error) => IngestOutcome::Dropped { attempts, error },
        }
    }
}

/// One-shot ingest with the default retry policy (3 attempts, 500 ms base).
pub fn http_ingest_client(endpoint_url: &str, payload: &[u8]) -> Result<u16> {
    match IngestClient::new(endpoint_url, Backoff::default()).post(payload) {
        IngestOutcome::Responded { status, .. } => Ok(status),
        IngestOutcome::Dropped { error, .. } => Err(TransportError::Http(error)),
    }
}
