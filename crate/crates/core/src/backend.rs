//! Newline-delimited JSON client for external model processes.
//!
//! A backend is reached either by spawning a command and talking over its
//! stdin/stdout, or over a TCP socket. Every request carries a unique id; a
//! reader thread routes responses back to the waiting caller, so up to
//! `max_in_flight` requests may be outstanding at once.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT_SECS: f64 = 120.0;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// Where a backend lives: `tcp://host:port` or `exec:<program> [args...]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Endpoint {
    Tcp(String),
    Command(Vec<String>),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            if addr.is_empty() {
                return Err(Error::Config("empty tcp backend address".into()));
            }
            Ok(Self::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(Error::Config("empty backend command".into()));
            }
            Ok(Self::Command(argv))
        } else {
            Err(Error::Config(format!(
                "backend address {s:?} must start with tcp:// or exec:"
            )))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tcp(addr) => write!(f, "tcp://{addr}"),
            Self::Command(argv) => write!(f, "exec:{}", argv.join(" ")),
        }
    }
}

impl TryFrom<String> for Endpoint {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> String {
        e.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Segmenter,
    Embedder,
}

#[derive(Debug, Clone, Copy)]
pub struct ClientOptions {
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs_f64(DEFAULT_TIMEOUT_SECS),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

type Pending = Arc<Mutex<HashMap<String, Sender<Value>>>>;

pub struct WireClient {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Pending,
    closed: Arc<AtomicBool>,
    in_flight: Mutex<usize>,
    slot_free: Condvar,
    opts: ClientOptions,
    seq: AtomicU64,
    hello: Value,
    child: Option<Mutex<Child>>,
    socket: Option<TcpStream>,
}

struct Slot<'a>(&'a WireClient);

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("slot lock") -= 1;
        self.0.slot_free.notify_one();
    }
}

fn lock_poisoned<T>(_: T) -> Error {
    Error::Backend("client state lock poisoned".into())
}

impl WireClient {
    pub fn connect(endpoint: &Endpoint, opts: ClientOptions) -> Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)
                    .map_err(|e| Error::Backend(format!("cannot connect to {addr}: {e}")))?;
                let clone = || {
                    stream
                        .try_clone()
                        .map_err(|e| Error::Backend(format!("socket clone failed: {e}")))
                };
                let (reader, writer) = (clone()?, clone()?);
                Self::start(BufReader::new(reader), writer, opts, None, Some(stream))
            }
            Endpoint::Command(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| Error::Backend(format!("cannot start {:?}: {e}", argv[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Self::start(BufReader::new(stdout), stdin, opts, Some(child), None)
            }
        }
    }

    /// Client over arbitrary streams; used for in-process testing.
    pub fn from_streams(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
        opts: ClientOptions,
    ) -> Result<Self> {
        Self::start(reader, writer, opts, None, None)
    }

    fn start(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
        opts: ClientOptions,
        child: Option<Child>,
        socket: Option<TcpStream>,
    ) -> Result<Self> {
        if opts.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        let pending: Pending = Arc::default();
        let closed = Arc::new(AtomicBool::new(false));
        {
            let pending = Arc::clone(&pending);
            let closed = Arc::clone(&closed);
            thread::spawn(move || route_responses(reader, &pending, &closed));
        }
        let mut client = Self {
            writer: Mutex::new(Box::new(writer)),
            pending,
            closed,
            in_flight: Mutex::new(0),
            slot_free: Condvar::new(),
            opts,
            seq: AtomicU64::new(0),
            hello: Value::Null,
            child: child.map(Mutex::new),
            socket,
        };
        let hello = client.exchange(String::new(), json!({"op": "hello"}))?;
        if hello.get("op").and_then(Value::as_str) != Some("hello") {
            return Err(Error::Backend(format!("bad handshake reply: {hello}")));
        }
        client.hello = hello;
        Ok(client)
    }

    pub fn kind(&self) -> Option<BackendKind> {
        serde_json::from_value(self.hello.get("kind")?.clone()).ok()
    }

    pub fn dim(&self) -> Option<usize> {
        self.hello.get("dim")?.as_u64().map(|d| d as usize)
    }

    pub fn require_kind(&self, kind: BackendKind) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Backend(format!(
                "backend announced kind {other:?}, expected {kind:?}"
            ))),
        }
    }

    /// Send `msg` under a fresh id derived from `base_id` and wait for the
    /// matching response. Error responses become [`Error::Backend`].
    pub fn request(&self, base_id: &str, mut msg: Value) -> Result<Value> {
        let _slot = self.acquire()?;
        let id = format!("{base_id}#{}", self.seq.fetch_add(1, Ordering::Relaxed));
        msg["id"] = Value::String(id.clone());
        self.exchange(id, msg)
    }

    fn acquire(&self) -> Result<Slot<'_>> {
        let mut n = self.in_flight.lock().map_err(lock_poisoned)?;
        while *n >= self.opts.max_in_flight {
            n = self.slot_free.wait(n).map_err(lock_poisoned)?;
        }
        *n += 1;
        Ok(Slot(self))
    }

    fn exchange(&self, id: String, msg: Value) -> Result<Value> {
        let (tx, rx) = mpsc::channel();
        self.pending.lock().map_err(lock_poisoned)?.insert(id.clone(), tx);
        if self.closed.load(Ordering::SeqCst) {
            self.pending.lock().map_err(lock_poisoned)?.remove(&id);
            return Err(Error::Backend("backend connection is closed".into()));
        }
        {
            let mut w = self.writer.lock().map_err(lock_poisoned)?;
            let sent = writeln!(w, "{msg}").and_then(|_| w.flush());
            if let Err(e) = sent {
                drop(w);
                self.pending.lock().map_err(lock_poisoned)?.remove(&id);
                return Err(Error::Backend(format!("write to backend failed: {e}")));
            }
        }
        let reply = match rx.recv_timeout(self.opts.timeout) {
            Ok(v) => v,
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().map_err(lock_poisoned)?.remove(&id);
                return Err(Error::Timeout {
                    id,
                    seconds: self.opts.timeout.as_secs_f64(),
                });
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Backend("backend closed the connection".into()))
            }
        };
        if reply.get("op").and_then(Value::as_str) == Some("error") {
            let message = reply
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("unspecified error");
            return Err(Error::Backend(format!("request {id}: {message}")));
        }
        Ok(reply)
    }
}

fn route_responses(reader: impl BufRead, pending: &Pending, closed: &AtomicBool) {
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let msg: Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("ignoring malformed backend line ({e}): {line}");
                continue;
            }
        };
        let id = msg.get("id").and_then(Value::as_str).unwrap_or("").to_string();
        let waiter = pending.lock().ok().and_then(|mut p| p.remove(&id));
        match waiter {
            Some(tx) => {
                let _ = tx.send(msg);
            }
            None => log::warn!("unsolicited backend message for id {id:?}"),
        }
    }
    closed.store(true, Ordering::SeqCst);
    if let Ok(mut p) = pending.lock() {
        p.clear();
    }
}

impl Drop for WireClient {
    fn drop(&mut self) {
        if let Some(sock) = &self.socket {
            let _ = sock.shutdown(Shutdown::Both);
        }
        if let Some(child) = &self.child {
            if let Ok(mut c) = child.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

/// Self-contained backend used by tests and the hidden `backend-stub` CLI
/// command.
pub mod stub {
    use std::io::{BufRead, Write};
    use std::net::TcpListener;
    use std::path::{Path, PathBuf};

    use serde_json::{json, Value};

    use super::BackendKind;
    use crate::embed::embed_toy;
    use crate::error::{Error, Result};
    use crate::formats::read_logits;
    use crate::io::{load_image, save_mask};
    use crate::tensor::BinaryMask;

    #[derive(Debug, Clone, PartialEq)]
    pub enum StubSegment {
        /// Always answer with this mask file.
        FixedMask(PathBuf),
        /// Foreground where the mask-logit prompt is positive; the box when no
        /// logits are sent.
        LogitsThreshold,
        /// Fill the prompt box.
        Box,
    }

    #[derive(Debug, Clone)]
    pub struct StubConfig {
        pub kind: BackendKind,
        /// Fixed embedding to echo; the toy embedding of the image otherwise.
        pub vector: Option<Vec<f32>>,
        pub segment: StubSegment,
        /// Where result masks are written.
        pub out_dir: PathBuf,
    }

    /// Answer requests until the input ends.
    pub fn serve(reader: impl BufRead, mut writer: impl Write, cfg: &StubConfig) -> std::io::Result<()> {
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let reply = match serde_json::from_str::<Value>(&line) {
                Ok(msg) => {
                    let id = msg.get("id").cloned().unwrap_or(Value::Null);
                    handle(&msg, cfg).unwrap_or_else(|e| json!({"op": "error", "id": id, "message": e.to_string()}))
                }
                Err(e) => json!({"op": "error", "id": null, "message": format!("bad json: {e}")}),
            };
            writeln!(writer, "{reply}")?;
            writer.flush()?;
        }
        Ok(())
    }

    /// Serve a single TCP connection.
    pub fn serve_tcp(listener: TcpListener, cfg: &StubConfig) -> std::io::Result<()> {
        let (stream, _) = listener.accept()?;
        let reader = std::io::BufReader::new(stream.try_clone()?);
        serve(reader, stream, cfg)
    }

    fn field<'a>(msg: &'a Value, key: &str) -> Result<&'a Value> {
        msg.get(key)
            .ok_or_else(|| Error::Backend(format!("request lacks {key:?}")))
    }

    fn text<'a>(msg: &'a Value, key: &str) -> Result<&'a str> {
        field(msg, key)?
            .as_str()
            .ok_or_else(|| Error::Backend(format!("{key:?} must be a string")))
    }

    fn handle(msg: &Value, cfg: &StubConfig) -> Result<Value> {
        let id = msg.get("id").cloned().unwrap_or(Value::Null);
        match text(msg, "op")? {
            "hello" => {
                let mut reply = json!({"op": "hello", "kind": cfg.kind});
                if cfg.kind == BackendKind::Embedder {
                    reply["dim"] = json!(cfg.vector.as_ref().map_or(crate::embed::TOY_DIM, Vec::len));
                }
                Ok(reply)
            }
            "embed" => {
                let vector = match &cfg.vector {
                    Some(v) => v.clone(),
                    None => embed_toy(&load_image::<f32>(Path::new(text(msg, "image")?), None)?),
                };
                // NaN is serialized as null, which the client must reject.
                Ok(json!({"op": "result", "id": id, "vector": vector}))
            }
            "segment" => {
                let img = load_image::<f32>(Path::new(text(msg, "image")?), None)?;
                let (h, w) = img.dims();
                let b: Vec<usize> = serde_json::from_value(field(msg, "box")?.clone())
                    .map_err(|e| Error::Backend(format!("bad box: {e}")))?;
                if b.len() != 4 {
                    return Err(Error::Backend("box needs four numbers".into()));
                }
                let in_box = |x: usize, y: usize| x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3];
                let mask_path = match &cfg.segment {
                    StubSegment::FixedMask(p) => return Ok(json!({"op": "result", "id": id, "mask": p, "confidence": 1.0})),
                    StubSegment::Box => BinaryMask::from_fn(h, w, in_box),
                    StubSegment::LogitsThreshold => match msg.get("mask_logits").and_then(Value::as_str) {
                        Some(p) => {
                            let logits = read_logits(Path::new(p))?;
                            if (logits.height, logits.width) != (h, w) {
                                return Err(Error::Backend("logit grid does not match image".into()));
                            }
                            BinaryMask::from_fn(h, w, |x, y| logits.get(x, y) > 0.0)
                        }
                        None => BinaryMask::from_fn(h, w, in_box),
                    },
                };
                let name: String = id
                    .as_str()
                    .unwrap_or("anon")
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
                    .collect();
                let out = cfg.out_dir.join(format!("{name}.png"));
                save_mask(&mask_path, &out)?;
                Ok(json!({"op": "result", "id": id, "mask": out, "confidence": 0.9}))
            }
            other => Err(Error::Backend(format!("unknown op {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stub::{serve, StubConfig, StubSegment};
    use super::*;
    use std::io::{BufReader, Read};
    use std::net::TcpListener;

    fn embedder(vector: Vec<f32>) -> StubConfig {
        StubConfig {
            kind: BackendKind::Embedder,
            vector: Some(vector),
            segment: StubSegment::Box,
            out_dir: std::env::temp_dir(),
        }
    }

    fn tcp_stub(cfg: StubConfig) -> Endpoint {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || stub::serve_tcp(listener, &cfg));
        Endpoint::Tcp(addr.to_string())
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(Endpoint::parse("tcp://127.0.0.1:9").unwrap(), Endpoint::Tcp("127.0.0.1:9".into()));
        assert_eq!(
            Endpoint::parse("exec:python3 adapter.py --x").unwrap(),
            Endpoint::Command(vec!["python3".into(), "adapter.py".into(), "--x".into()])
        );
        assert!(Endpoint::parse("http://x").is_err());
        assert!(Endpoint::parse("exec:  ").is_err());
        let e = Endpoint::parse("exec:a b").unwrap();
        assert_eq!(Endpoint::parse(&e.to_string()).unwrap(), e);
    }

    #[test]
    fn tcp_handshake_and_echo() {
        let client = WireClient::connect(&tcp_stub(embedder(vec![0.5, 0.25])), ClientOptions::default()).unwrap();
        assert_eq!(client.kind(), Some(BackendKind::Embedder));
        assert_eq!(client.dim(), Some(2));
        let r = client.request("a", json!({"op": "embed", "image": "unused"})).unwrap();
        assert_eq!(r["vector"], json!([0.5, 0.25]));
        assert_eq!(r["id"], json!("a#0"));
        assert!(client.require_kind(BackendKind::Segmenter).is_err());
    }

    #[test]
    fn error_reply_surfaces() {
        let client = WireClient::connect(&tcp_stub(embedder(vec![1.0])), ClientOptions::default()).unwrap();
        let err = client.request("x", json!({"op": "fly"})).unwrap_err();
        assert!(err.to_string().contains("unknown op"), "{err}");
    }

    #[test]
    fn concurrent_requests_are_matched_by_id() {
        let client = Arc::new(WireClient::connect(&tcp_stub(embedder(vec![1.0, 2.0])), ClientOptions::default()).unwrap());
        let handles: Vec<_> = (0..16)
            .map(|i| {
                let c = Arc::clone(&client);
                thread::spawn(move || {
                    let r = c.request(&format!("q{i}"), json!({"op": "embed", "image": "-"})).unwrap();
                    assert!(r["id"].as_str().unwrap().starts_with(&format!("q{i}#")));
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
    }

    /// Reader that never yields a line.
    struct Silent(mpsc::Receiver<()>);

    impl Read for Silent {
        fn read(&mut self, _: &mut [u8]) -> std::io::Result<usize> {
            let _ = self.0.recv();
            Ok(0)
        }
    }

    #[test]
    fn silent_backend_times_out() {
        let (_keep, rx) = mpsc::channel();
        let opts = ClientOptions {
            timeout: Duration::from_millis(50),
            max_in_flight: 1,
        };
        let err = WireClient::from_streams(BufReader::new(Silent(rx)), std::io::sink(), opts).err().unwrap();
        assert!(matches!(err, Error::Timeout { .. }), "{err}");
    }

    #[test]
    fn closed_backend_errors_quickly() {
        let err = WireClient::from_streams(BufReader::new(std::io::empty()), std::io::sink(), ClientOptions::default())
            .err()
            .unwrap();
        assert!(matches!(err, Error::Backend(_)), "{err}");
    }

    #[test]
    fn stub_reports_bad_json() {
        let mut out = Vec::new();
        serve(&b"not json\n"[..], &mut out, &embedder(vec![1.0])).unwrap();
        let v: Value = serde_json::from_slice(&out).unwrap();
        assert_eq!(v["op"], "error");
    }
}
