//! Line protocol, retrying sender with an on-disk spool, and the receiver
//! daemon that logs, de-duplicates and prints announcements.
//!
//! Wire line:
//! `ANNOUNCE v1 seq=<n> ts=<iso8601> patient=<token> gesture=<id> conf=<d.ddd> msg="<escaped>"`
//! The receiver answers `ACK <seq>` or `ERR 0 BADMSG`.

use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};
use log::{debug, info, warn};
use thiserror::Error;

use crate::quoting::{quote, unquote};

pub const DEFAULT_PORT: u16 = 7460;
pub const MAX_PATIENT_LEN: usize = 64;
const TS_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";
const BAD_MESSAGE_REPLY: &str = "ERR 0 BADMSG";

#[derive(Debug, Error)]
pub enum AnnounceError {
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("malformed line: {0}")]
    Malformed(String),
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A confidence in thousandths, so that the 3-decimal wire form is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Confidence(u16);

impl Confidence {
    pub fn from_milli(milli: u16) -> Option<Self> {
        (milli <= 1000).then_some(Self(milli))
    }

    /// Rounds to the nearest thousandth; `None` outside [0, 1].
    pub fn from_fraction(f: f64) -> Option<Self> {
        if !(0.0..=1.0).contains(&f) {
            return None;
        }
        Some(Self((f * 1000.0).round() as u16))
    }

    pub fn milli(self) -> u16 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.0 / 1000, self.0 % 1000)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Announcement {
    pub seq: u64,
    /// Whole seconds, UTC.
    pub ts: DateTime<Utc>,
    pub patient: String,
    pub gesture: u32,
    pub conf: Confidence,
    pub msg: String,
}

/// Current time truncated to whole seconds.
pub fn now_seconds() -> DateTime<Utc> {
    Utc::now().with_nanosecond(0).expect("zero nanoseconds is valid")
}

pub fn valid_patient(p: &str) -> bool {
    !p.is_empty() && p.len() <= MAX_PATIENT_LEN && p.bytes().all(|b| b.is_ascii_graphic())
}

impl Announcement {
    pub fn validate(&self) -> Result<(), AnnounceError> {
        if !valid_patient(&self.patient) {
            return Err(AnnounceError::InvalidField(format!("patient {:?}", self.patient)));
        }
        if self.ts.nanosecond() != 0 {
            return Err(AnnounceError::InvalidField("timestamp has sub-second part".into()));
        }
        if !(0..=9999).contains(&chrono::Datelike::year(&self.ts)) {
            return Err(AnnounceError::InvalidField("timestamp year outside 0000-9999".into()));
        }
        Ok(())
    }
}

fn encode_unchecked(a: &Announcement) -> String {
    format!(
        "ANNOUNCE v1 seq={} ts={} patient={} gesture={} conf={} msg={}\n",
        a.seq,
        a.ts.format(TS_FORMAT),
        a.patient,
        a.gesture,
        a.conf,
        quote(&a.msg)
    )
}

/// The newline-terminated wire line.
pub fn encode_announcement(a: &Announcement) -> Result<String, AnnounceError> {
    a.validate()?;
    Ok(encode_unchecked(a))
}

fn field<'a>(rest: &'a str, key: &str) -> Result<(&'a str, &'a str), AnnounceError> {
    let missing = || AnnounceError::Malformed(format!("expected {key}="));
    let body = rest.strip_prefix(key).and_then(|r| r.strip_prefix('=')).ok_or_else(missing)?;
    body.split_once(' ').ok_or_else(missing)
}

fn parse_conf(s: &str) -> Option<Confidence> {
    let (int, frac) = s.split_once('.')?;
    if int.len() != 1 || frac.len() != 3 || !s.bytes().filter(|&b| b != b'.').all(|b| b.is_ascii_digit()) {
        return None;
    }
    Confidence::from_milli(int.parse::<u16>().ok()? * 1000 + frac.parse::<u16>().ok()?)
}

/// Strict inverse of [`encode_announcement`]. A single trailing newline is
/// optional; any other deviation from the canonical line is rejected.
pub fn decode_announcement(line: &[u8]) -> Result<Announcement, AnnounceError> {
    let bad = |m: &str| AnnounceError::Malformed(m.to_string());
    let text = std::str::from_utf8(line).map_err(|_| bad("not UTF-8"))?;
    let text = text.strip_suffix('\n').unwrap_or(text);
    let rest = text.strip_prefix("ANNOUNCE v1 ").ok_or_else(|| bad("expected 'ANNOUNCE v1'"))?;
    let (seq, rest) = field(rest, "seq")?;
    let (ts, rest) = field(rest, "ts")?;
    let (patient, rest) = field(rest, "patient")?;
    let (gesture, rest) = field(rest, "gesture")?;
    let (conf, rest) = field(rest, "conf")?;
    let quoted = rest.strip_prefix("msg=").ok_or_else(|| bad("expected msg="))?;
    let (msg, tail) = unquote(quoted).ok_or_else(|| bad("bad quoted msg"))?;
    if !tail.is_empty() {
        return Err(bad("trailing data after msg"));
    }
    let a = Announcement {
        seq: seq.parse().map_err(|_| bad("bad seq"))?,
        ts: NaiveDateTime::parse_from_str(ts, TS_FORMAT).map_err(|_| bad("bad ts"))?.and_utc(),
        patient: patient.to_string(),
        gesture: gesture.parse().map_err(|_| bad("bad gesture"))?,
        conf: parse_conf(conf).ok_or_else(|| bad("bad conf"))?,
        msg,
    };
    a.validate().map_err(|e| AnnounceError::Malformed(e.to_string()))?;
    // Rejects leading zeros, signs and other non-canonical spellings.
    if encode_unchecked(&a).trim_end_matches('\n') != text {
        return Err(bad("non-canonical field"));
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Sleep before attempt `i + 1` is `backoff[min(i, len - 1)]`.
    pub backoff: Vec<Duration>,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff: vec![Duration::from_millis(500), Duration::from_secs(1), Duration::from_secs(2)],
            timeout: Duration::from_secs(2),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, after_attempt: usize) -> Duration {
        match self.backoff.len() {
            0 => Duration::ZERO,
            n => self.backoff[after_attempt.min(n - 1)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureCause {
    Connect,
    Timeout,
    Protocol,
}

impl fmt::Display for FailureCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureCause::Connect => "connect",
            FailureCause::Timeout => "timeout",
            FailureCause::Protocol => "protocol",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendOutcome {
    Delivered { seq: u64, attempts: u32 },
    Failed { cause: FailureCause },
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

fn attempt_once(dest: &str, line: &str, seq: u64, timeout: Duration) -> Result<(), FailureCause> {
    let addrs: Vec<SocketAddr> = dest.to_socket_addrs().map_err(|_| FailureCause::Connect)?.collect();
    let mut stream = None;
    let mut cause = FailureCause::Connect;
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(s) => {
                stream = Some(s);
                break;
            }
            Err(e) if is_timeout(&e) => cause = FailureCause::Timeout,
            Err(_) => {}
        }
    }
    let stream = stream.ok_or(cause)?;
    let io_cause = |e: io::Error| if is_timeout(&e) { FailureCause::Timeout } else { FailureCause::Protocol };
    stream.set_read_timeout(Some(timeout)).map_err(io_cause)?;
    stream.set_write_timeout(Some(timeout)).map_err(io_cause)?;
    (&stream).write_all(line.as_bytes()).map_err(io_cause)?;
    let mut reply = String::new();
    BufReader::new(&stream).read_line(&mut reply).map_err(io_cause)?;
    if reply.trim_end_matches('\n') == format!("ACK {seq}") {
        Ok(())
    } else {
        debug!("unexpected reply {reply:?} for seq {seq}");
        Err(FailureCause::Protocol)
    }
}

/// Sends one encoded line with retries, without spooling.
pub fn send_line(dest: &str, line: &str, seq: u64, policy: &RetryPolicy) -> SendOutcome {
    let mut cause = FailureCause::Connect;
    for attempt in 0..policy.attempts.max(1) {
        if attempt > 0 {
            thread::sleep(policy.delay(attempt as usize - 1));
        }
        match attempt_once(dest, line, seq, policy.timeout) {
            Ok(()) => return SendOutcome::Delivered { seq, attempts: attempt + 1 },
            Err(c) => {
                debug!("attempt {} for seq {seq} failed: {c}", attempt + 1);
                cause = c;
            }
        }
    }
    SendOutcome::Failed { cause }
}

fn append_line(path: &Path, line: &str) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.sync_data()
}

/// Delivers `a` to `dest` (`host:port`). After the final failed attempt the
/// encoded line is appended to `spool`.
pub fn send_with_retry(
    dest: &str,
    a: &Announcement,
    policy: &RetryPolicy,
    spool: &Path,
) -> Result<SendOutcome, AnnounceError> {
    let line = encode_announcement(a)?;
    let outcome = send_line(dest, &line, a.seq, policy);
    if let SendOutcome::Failed { cause } = outcome {
        warn!("delivery of seq {} failed ({cause}); spooling to {}", a.seq, spool.display());
        append_line(spool, &line)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub delivered: usize,
    /// Lines still undelivered (left in the spool).
    pub remaining: usize,
    /// Lines that could not be decoded (dropped).
    pub discarded: usize,
}

/// Re-sends every spooled line in order. Undelivered lines stay in the
/// spool; the file is removed once it is empty.
pub fn replay_spool(dest: &str, spool: &Path, policy: &RetryPolicy) -> Result<ReplayReport, AnnounceError> {
    let text = match fs::read_to_string(spool) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(ReplayReport::default()),
        Err(e) => return Err(e.into()),
    };
    let mut report = ReplayReport::default();
    let mut keep = String::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let Ok(a) = decode_announcement(line.as_bytes()) else {
            warn!("discarding malformed spool line {line:?}");
            report.discarded += 1;
            continue;
        };
        let encoded = encode_unchecked(&a);
        match send_line(dest, &encoded, a.seq, policy) {
            SendOutcome::Delivered { .. } => report.delivered += 1,
            SendOutcome::Failed { .. } => {
                report.remaining += 1;
                keep.push_str(&encoded);
            }
        }
    }
    if keep.is_empty() {
        fs::remove_file(spool)?;
    } else {
        let tmp = spool.with_extension("tmp");
        fs::write(&tmp, &keep)?;
        fs::rename(&tmp, spool)?;
    }
    Ok(report)
}

/// One receiver log entry: `<received_at> NEW|DUP <original line>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceiverRecord {
    pub announcement: Announcement,
    pub received_at: DateTime<Utc>,
    pub duplicate: bool,
}

impl ReceiverRecord {
    pub fn to_log_line(&self) -> String {
        format!(
            "{} {} {}",
            self.received_at.format(TS_FORMAT),
            if self.duplicate { "DUP" } else { "NEW" },
            encode_unchecked(&self.announcement)
        )
    }

    pub fn parse_log_line(line: &str) -> Result<Self, AnnounceError> {
        let bad = || AnnounceError::Malformed(format!("log line {line:?}"));
        let (at, rest) = line.split_once(' ').ok_or_else(bad)?;
        let (flag, rest) = rest.split_once(' ').ok_or_else(bad)?;
        let duplicate = match flag {
            "NEW" => false,
            "DUP" => true,
            _ => return Err(bad()),
        };
        Ok(Self {
            announcement: decode_announcement(rest.as_bytes())?,
            received_at: NaiveDateTime::parse_from_str(at, TS_FORMAT).map_err(|_| bad())?.and_utc(),
            duplicate,
        })
    }
}

/// Where announcements go once accepted; defaults to standard output.
pub type AnnouncementSink = Arc<dyn Fn(&Announcement) + Send + Sync>;

pub fn stdout_sink() -> AnnouncementSink {
    Arc::new(|a: &Announcement| {
        let mut out = io::stdout().lock();
        let _ = writeln!(out, "{}: {}", a.patient, a.msg);
        let _ = out.flush();
    })
}

struct ReceiverShared {
    log: File,
    seen: HashSet<(String, u64)>,
}

/// A running receiver. Dropping the handle stops it.
pub struct ReceiverHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl ReceiverHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for the accept loop to exit.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    /// Serves until the process is terminated.
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ReceiverHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

pub struct Receiver {
    pub bind: String,
    pub log_path: PathBuf,
    pub sink: AnnouncementSink,
}

impl Receiver {
    pub fn new(port: u16, log_path: impl Into<PathBuf>) -> Self {
        Self { bind: format!("0.0.0.0:{port}"), log_path: log_path.into(), sink: stdout_sink() }
    }

    /// Binds and starts serving on background threads.
    pub fn start(self) -> Result<ReceiverHandle, AnnounceError> {
        let listener = TcpListener::bind(&self.bind).map_err(|e| {
            if e.kind() == io::ErrorKind::AddrInUse {
                let port = self.bind.rsplit(':').next().and_then(|p| p.parse().ok()).unwrap_or(0);
                AnnounceError::PortInUse(port)
            } else {
                AnnounceError::Io(e)
            }
        })?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let log = OpenOptions::new().create(true).append(true).open(&self.log_path)?;
        let shared = Arc::new(Mutex::new(ReceiverShared { log, seen: HashSet::new() }));
        let stop = Arc::new(AtomicBool::new(false));
        let sink = self.sink;
        let stop_flag = Arc::clone(&stop);
        info!("receiver listening on {addr}, log {}", self.log_path.display());
        let acceptor = thread::spawn(move || {
            while !stop_flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        debug!("connection from {peer}");
                        let shared = Arc::clone(&shared);
                        let sink = Arc::clone(&sink);
                        thread::spawn(move || {
                            if let Err(e) = serve_connection(stream, &shared, &sink) {
                                debug!("connection from {peer} ended: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                    Err(e) => {
                        warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(10));
                    }
                }
            }
        });
        Ok(ReceiverHandle { addr, stop, acceptor: Some(acceptor) })
    }
}

fn serve_connection(stream: TcpStream, shared: &Mutex<ReceiverShared>, sink: &AnnouncementSink) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    let mut reader = BufReader::new(&stream);
    let mut writer = &stream;
    let mut line = Vec::new();
    loop {
        line.clear();
        if reader.read_until(b'\n', &mut line)? == 0 {
            return Ok(());
        }
        let reply = match decode_announcement(&line) {
            Err(e) => {
                debug!("rejecting line: {e}");
                BAD_MESSAGE_REPLY.to_string()
            }
            Ok(a) => {
                let mut guard = shared.lock().unwrap_or_else(|p| p.into_inner());
                let duplicate = !guard.seen.insert((a.patient.clone(), a.seq));
                let record = ReceiverRecord { announcement: a, received_at: now_seconds(), duplicate };
                guard.log.write_all(record.to_log_line().as_bytes())?;
                guard.log.flush()?;
                if !duplicate {
                    sink(&record.announcement);
                }
                format!("ACK {}", record.announcement.seq)
            }
        };
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
    }
}
