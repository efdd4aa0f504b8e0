//! Line-based TCP layer for feeding a tissue and reading its responses.
//!
//! Every frame is one ASCII line:
//!
//! ```text
//! H <role>            # session hello: antigen | signal | response
//! A <syscall>         # ingest one antigen
//! S <index> <level>   # set one signal level
//! R <tick> <syscall>  # server -> client response record
//! E <text>            # server -> client error note
//! ```
//!
//! A session speaks exactly one role. Undecodable or invalid lines get
//! an `E` reply and the session carries on; a well-formed message of the
//! wrong kind for the role gets an `E` reply and the session is closed.
//! The server itself outlives any session failure.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::engine::{Engine, IngestHandle, ResponseHub};
use crate::model::Antigen;

/// Name of the environment variable holding the default server address.
pub const ADDR_ENV: &str = "TISSUE_ADDR";

/// Fallback server address when neither a flag nor [`ADDR_ENV`] is set.
pub const DEFAULT_ADDR: &str = "127.0.0.1:7878";

/// The address to use given an optional explicit flag value.
pub fn resolve_addr(flag: Option<&str>) -> String {
    match flag {
        Some(addr) => addr.to_string(),
        None => std::env::var(ADDR_ENV).unwrap_or_else(|_| DEFAULT_ADDR.to_string()),
    }
}

/// What a session is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Antigen,
    Signal,
    Response,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Antigen => "antigen",
            Role::Signal => "signal",
            Role::Response => "response",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "antigen" => Ok(Role::Antigen),
            "signal" => Ok(Role::Signal),
            "response" => Ok(Role::Response),
            _ => Err(()),
        }
    }
}

/// One wire frame.
#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello(Role),
    Antigen(u32),
    Signal { index: usize, level: f64 },
    Response { tick: u64, value: u32 },
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("empty line")]
    Empty,
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("{kind} message: expected {expected} field(s), got {got}")]
    FieldCount {
        kind: char,
        expected: usize,
        got: usize,
    },
    #[error("{kind} message: bad {field}: {reason}")]
    BadField {
        kind: char,
        field: &'static str,
        reason: String,
    },
    #[error("S message: level must be finite")]
    NonFinite,
}

/// Renders a frame as its wire line, trailing newline included. Error
/// text is flattened so it cannot break the line framing.
pub fn encode_message(message: &WireMessage) -> String {
    match message {
        WireMessage::Hello(role) => format!("H {}\n", role.as_str()),
        WireMessage::Antigen(value) => format!("A {value}\n"),
        WireMessage::Signal { index, level } => format!("S {index} {level}\n"),
        WireMessage::Response { tick, value } => format!("R {tick} {value}\n"),
        WireMessage::Error(text) => {
            let mut flat: String = text
                .chars()
                .map(|c| if c.is_control() { ' ' } else { c })
                .collect();
            if flat.len() > 200 {
                let mut cut = 200;
                while !flat.is_char_boundary(cut) {
                    cut -= 1;
                }
                flat.truncate(cut);
            }
            format!("E {flat}\n")
        }
    }
}

fn field_count(kind: char, expected: usize, got: usize) -> DecodeError {
    DecodeError::FieldCount {
        kind,
        expected,
        got,
    }
}

fn bad_field(kind: char, field: &'static str, reason: impl ToString) -> DecodeError {
    DecodeError::BadField {
        kind,
        field,
        reason: reason.to_string(),
    }
}

/// Parses one wire line (without its newline).
pub fn decode_message(line: &str) -> Result<WireMessage, DecodeError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let mut fields = line.split_whitespace();
    let kind = fields.next().ok_or(DecodeError::Empty)?;
    match kind {
        "H" => {
            let args: Vec<&str> = fields.collect();
            if args.len() != 1 {
                return Err(field_count('H', 1, args.len()));
            }
            args[0]
                .parse::<Role>()
                .map(WireMessage::Hello)
                .map_err(|_| bad_field('H', "role", format!("{:?} is not a role", args[0])))
        }
        "A" => {
            let args: Vec<&str> = fields.collect();
            if args.len() != 1 {
                return Err(field_count('A', 1, args.len()));
            }
            let value: u32 = args[0]
                .parse()
                .map_err(|e| bad_field('A', "syscall number", e))?;
            Ok(WireMessage::Antigen(value))
        }
        "S" => {
            let args: Vec<&str> = fields.collect();
            if args.len() != 2 {
                return Err(field_count('S', 2, args.len()));
            }
            let index: usize = args[0]
                .parse()
                .map_err(|e| bad_field('S', "signal index", e))?;
            let level: f64 = args[1]
                .parse()
                .map_err(|e| bad_field('S', "signal level", e))?;
            if !level.is_finite() {
                return Err(DecodeError::NonFinite);
            }
            Ok(WireMessage::Signal { index, level })
        }
        "R" => {
            let args: Vec<&str> = fields.collect();
            if args.len() != 2 {
                return Err(field_count('R', 2, args.len()));
            }
            let tick: u64 = args[0].parse().map_err(|e| bad_field('R', "tick", e))?;
            let value: u32 = args[1]
                .parse()
                .map_err(|e| bad_field('R', "syscall number", e))?;
            Ok(WireMessage::Response { tick, value })
        }
        "E" => {
            let text = line.splitn(2, char::is_whitespace).nth(1).unwrap_or("");
            Ok(WireMessage::Error(text.to_string()))
        }
        other => Err(DecodeError::UnknownKind(other.to_string())),
    }
}

/// Everything a server needs from an engine; cheap to clone around
/// session threads.
#[derive(Clone)]
pub struct ServerHandles {
    pub ingest: IngestHandle,
    pub responses: ResponseHub,
    pub alphabet: u32,
    pub signal_slots: usize,
}

impl ServerHandles {
    pub fn from_engine(engine: &Engine) -> Self {
        ServerHandles {
            ingest: engine.ingest_handle(),
            responses: engine.response_hub(),
            alphabet: engine.params().antigen_alphabet,
            signal_slots: engine.compartment().signals.len(),
        }
    }
}

const READ_POLL: Duration = Duration::from_millis(100);
const MAX_LINE: usize = 8192;

/// Reads newline-terminated lines from a stream with a poll timeout so
/// the stop flag stays responsive. Oversized garbage is surfaced as one
/// (undecodable) line instead of growing without bound.
struct LineReader {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl LineReader {
    fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_read_timeout(Some(READ_POLL))?;
        Ok(LineReader {
            stream,
            buf: Vec::new(),
        })
    }

    /// Next line, without its terminator. `Ok(None)` means EOF or stop.
    fn read_line(&mut self, stop: &AtomicBool) -> io::Result<Option<String>> {
        let mut chunk = [0u8; 1024];
        loop {
            if let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
                let mut line: Vec<u8> = self.buf.drain(..=pos).collect();
                line.pop();
                if line.last() == Some(&b'\r') {
                    line.pop();
                }
                return Ok(Some(String::from_utf8_lossy(&line).into_owned()));
            }
            if self.buf.len() > MAX_LINE {
                let oversized: Vec<u8> = self.buf.drain(..).collect();
                return Ok(Some(String::from_utf8_lossy(&oversized).into_owned()));
            }
            match self.stream.read(&mut chunk) {
                Ok(0) => return Ok(None),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock
                        || e.kind() == io::ErrorKind::TimedOut =>
                {
                    if stop.load(Ordering::Relaxed) {
                        return Ok(None);
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
    }
}

/// A listening tissue server. Dropping (or calling [`Server::shutdown`])
/// stops the accept loop and joins every session thread.
pub struct Server {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Binds `addr` and serves sessions until shutdown. Session failures are
/// contained: a broken or misbehaving client never takes the server (or
/// the engine feeding from the queue) down.
pub fn serve(addr: impl ToSocketAddrs, handles: ServerHandles) -> io::Result<Server> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let accept_stop = Arc::clone(&stop);
    let accept_thread = std::thread::spawn(move || {
        let mut sessions: Vec<JoinHandle<()>> = Vec::new();
        while !accept_stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    log::debug!("session from {peer}");
                    let handles = handles.clone();
                    let stop = Arc::clone(&accept_stop);
                    sessions.push(std::thread::spawn(move || {
                        if let Err(e) = run_session(stream, &handles, &stop) {
                            log::debug!("session from {peer} ended: {e}");
                        }
                    }));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(25));
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    std::thread::sleep(Duration::from_millis(25));
                }
            }
            sessions.retain(|h| !h.is_finished());
        }
        for handle in sessions {
            let _ = handle.join();
        }
    });
    Ok(Server {
        local_addr,
        stop,
        accept_thread: Some(accept_thread),
    })
}

fn send_error(writer: &mut TcpStream, text: impl Into<String>) -> io::Result<()> {
    writer.write_all(encode_message(&WireMessage::Error(text.into())).as_bytes())
}

fn run_session(stream: TcpStream, handles: &ServerHandles, stop: &AtomicBool) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = LineReader::new(stream)?;

    let Some(first) = reader.read_line(stop)? else {
        return Ok(());
    };
    let role = match decode_message(&first) {
        Ok(WireMessage::Hello(role)) => role,
        Ok(_) => {
            send_error(&mut writer, "expected a hello (H <role>) first")?;
            return Ok(());
        }
        Err(e) => {
            send_error(&mut writer, format!("bad hello: {e}"))?;
            return Ok(());
        }
    };

    match role {
        Role::Antigen | Role::Signal => input_session(role, reader, writer, handles, stop),
        Role::Response => response_session(writer, handles, stop),
    }
}

fn input_session(
    role: Role,
    mut reader: LineReader,
    mut writer: TcpStream,
    handles: &ServerHandles,
    stop: &AtomicBool,
) -> io::Result<()> {
    while let Some(line) = reader.read_line(stop)? {
        match decode_message(&line) {
            Ok(WireMessage::Antigen(value)) if role == Role::Antigen => {
                match Antigen::new(value, handles.alphabet) {
                    Ok(antigen) => handles.ingest.push_antigen(antigen),
                    Err(e) => send_error(&mut writer, e.to_string())?,
                }
            }
            Ok(WireMessage::Signal { index, level }) if role == Role::Signal => {
                if index < handles.signal_slots {
                    handles.ingest.push_signal(index, level);
                } else {
                    send_error(
                        &mut writer,
                        format!(
                            "signal index {index} is outside the signal store (0..{})",
                            handles.signal_slots
                        ),
                    )?;
                }
            }
            Ok(other) => {
                let kind = match other {
                    WireMessage::Hello(_) => "hello",
                    WireMessage::Antigen(_) => "antigen",
                    WireMessage::Signal { .. } => "signal",
                    WireMessage::Response { .. } => "response",
                    WireMessage::Error(_) => "error",
                };
                send_error(
                    &mut writer,
                    format!("{kind} message not allowed on a {} session", role.as_str()),
                )?;
                return Ok(());
            }
            Err(e) => send_error(&mut writer, e.to_string())?,
        }
    }
    Ok(())
}

fn response_session(
    mut writer: TcpStream,
    handles: &ServerHandles,
    stop: &AtomicBool,
) -> io::Result<()> {
    let receiver = handles.responses.subscribe();
    loop {
        match receiver.recv_timeout(READ_POLL) {
            Ok(record) => {
                let frame = encode_message(&WireMessage::Response {
                    tick: record.tick,
                    value: record.value,
                });
                writer.write_all(frame.as_bytes())?;
            }
            Err(std::sync::mpsc::RecvTimeoutError::Timeout) => {
                if stop.load(Ordering::Relaxed) {
                    return Ok(());
                }
            }
            Err(std::sync::mpsc::RecvTimeoutError::Disconnected) => return Ok(()),
        }
    }
}

/// Client for an antigen session.
pub struct AntigenClient {
    stream: TcpStream,
}

impl AntigenClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = hello(addr, Role::Antigen)?;
        Ok(AntigenClient { stream })
    }

    pub fn send(&mut self, value: u32) -> io::Result<()> {
        self.stream
            .write_all(encode_message(&WireMessage::Antigen(value)).as_bytes())
    }
}

/// Client for a signal session.
pub struct SignalClient {
    stream: TcpStream,
}

impl SignalClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = hello(addr, Role::Signal)?;
        Ok(SignalClient { stream })
    }

    pub fn send(&mut self, index: usize, level: f64) -> io::Result<()> {
        self.stream
            .write_all(encode_message(&WireMessage::Signal { index, level }).as_bytes())
    }
}

fn hello(addr: impl ToSocketAddrs, role: Role) -> io::Result<TcpStream> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    stream.write_all(encode_message(&WireMessage::Hello(role)).as_bytes())?;
    Ok(stream)
}

/// One response line read off a response session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseLine {
    pub tick: u64,
    pub value: u32,
}

/// Client for a response session: sends the hello and then reads `R`
/// lines as they arrive.
pub struct ResponseClient {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl ResponseClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = hello(addr, Role::Response)?;
        Ok(ResponseClient {
            stream,
            buf: Vec::new(),
        })
    }

    /// Optional read timeout for [`ResponseClient::next`]; with one set,
    /// a quiet wire returns `Ok(None)` at each timeout.
    pub fn set_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(timeout)
    }

    /// Next response, `Ok(None)` on EOF (or timeout when one is set).
    /// An `E` line from the server surfaces as an error.
    pub fn next(&mut self) -> io::Result<Option<ResponseLine>> {
        let mut chunk = [0u8; 1024];
        loop {
            if let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
                let mut line: Vec<u8> = self.buf.drain(..=pos).collect();
                line.pop();
                let text = String::from_utf8_lossy(&line).into_owned();
                return match decode_message(&text) {
                    Ok(WireMessage::Response { tick, value }) => {
                        Ok(Some(ResponseLine { tick, value }))
                    }
                    Ok(WireMessage::Error(text)) => {
                        Err(io::Error::new(io::ErrorKind::InvalidData, text))
                    }
                    Ok(_) | Err(_) => Err(io::Error::new(
                        io::ErrorKind::InvalidData,
                        format!("unexpected line on response session: {text:?}"),
                    )),
                };
            }
            match self.stream.read(&mut chunk) {
                Ok(0) => return Ok(None),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock
                        || e.kind() == io::ErrorKind::TimedOut =>
                {
                    return Ok(None)
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
    }
}
