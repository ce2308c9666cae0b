//! The `run` subcommand: frames are processed in one thread, emitted
//! events are handed over a bounded queue to a sender thread.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::Args;
use log::{error, info, warn};

use gestcall::announce::{
    now_seconds, replay_spool, send_with_retry, valid_patient, Announcement, Confidence, RetryPolicy, SendOutcome,
};
use gestcall::pipeline::{process_frame, FrameOutcome, PipelineState, Recognizer};

use crate::{read_image, read_model, read_registry, SkinArg};

pub const QUEUE_CAPACITY: usize = 16;

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    gestures: Option<PathBuf>,
    #[arg(long)]
    frames: PathBuf,
    /// Receiver address, `host:port`.
    #[arg(long)]
    dest: String,
    #[arg(long, value_parser = parse_patient)]
    patient: String,
    /// Pace frames at this rate; as fast as possible when omitted.
    #[arg(long)]
    fps: Option<f64>,
    /// Undeliverable events are appended here and re-sent on the next run.
    #[arg(long, default_value = "gestcall.spool")]
    spool: PathBuf,
    /// First sequence number; defaults to the current Unix time in ms.
    #[arg(long)]
    seq_start: Option<u64>,
    #[command(flatten)]
    skin: SkinArg,
}

fn parse_patient(s: &str) -> Result<String, String> {
    if valid_patient(s) {
        Ok(s.to_string())
    } else {
        Err("patient must be 1-64 printable characters without spaces".into())
    }
}

/// Bounded FIFO that drops its oldest entry instead of blocking the producer.
struct DropOldestQueue<T> {
    state: Mutex<(VecDeque<T>, bool)>,
    ready: Condvar,
    capacity: usize,
}

impl<T> DropOldestQueue<T> {
    fn new(capacity: usize) -> Self {
        Self { state: Mutex::new((VecDeque::with_capacity(capacity), false)), ready: Condvar::new(), capacity }
    }

    /// Returns the dropped entry, if any.
    fn push(&self, item: T) -> Option<T> {
        let mut g = self.state.lock().unwrap();
        let dropped = if g.0.len() == self.capacity { g.0.pop_front() } else { None };
        g.0.push_back(item);
        self.ready.notify_one();
        dropped
    }

    fn close(&self) {
        self.state.lock().unwrap().1 = true;
        self.ready.notify_all();
    }

    /// Blocks until an item arrives; `None` once closed and drained.
    fn pop(&self) -> Option<T> {
        let mut g = self.state.lock().unwrap();
        loop {
            if let Some(item) = g.0.pop_front() {
                return Some(item);
            }
            if g.1 {
                return None;
            }
            g = self.ready.wait(g).unwrap();
        }
    }
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm" | "pnm")))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Delivers queued events; returns how many ended up in the spool.
fn sender_loop(queue: &DropOldestQueue<Announcement>, dest: &str, spool: &Path, policy: &RetryPolicy) -> usize {
    let mut failed = 0;
    if spool.exists() {
        match replay_spool(dest, spool, policy) {
            Ok(r) => {
                info!("spool replay: {} delivered, {} remaining, {} discarded", r.delivered, r.remaining, r.discarded);
                failed += r.remaining;
            }
            Err(e) => {
                error!("spool replay failed: {e}");
                failed += 1;
            }
        }
    }
    while let Some(a) = queue.pop() {
        match send_with_retry(dest, &a, policy, spool) {
            Ok(SendOutcome::Delivered { seq, attempts }) => {
                info!("delivered seq={seq} gesture={} after {attempts} attempt(s)", a.gesture)
            }
            Ok(SendOutcome::Failed { cause }) => {
                warn!("seq={} failed ({cause}); spooled to {}", a.seq, spool.display());
                failed += 1;
            }
            Err(e) => {
                error!("seq={} could not be sent or spooled: {e}", a.seq);
                failed += 1;
            }
        }
    }
    failed
}

pub fn run(args: RunArgs) -> Result<ExitCode> {
    let recognizer =
        Recognizer::new(read_registry(args.gestures.as_deref())?, read_model(&args.model)?, args.skin.load()?);
    let files = frame_files(&args.frames)?;
    let mut seq = args
        .seq_start
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(1));

    let queue = Arc::new(DropOldestQueue::new(QUEUE_CAPACITY));
    let sender = {
        let queue = Arc::clone(&queue);
        let (dest, spool) = (args.dest.clone(), args.spool.clone());
        thread::spawn(move || sender_loop(&queue, &dest, &spool, &RetryPolicy::default()))
    };

    let interval = args.fps.filter(|f| *f > 0.0).map(|f| Duration::from_secs_f64(1.0 / f));
    let start = Instant::now();
    let mut state = PipelineState::default();
    let mut frame_errors = 0;
    let stdout = std::io::stdout();
    for (i, path) in files.iter().enumerate() {
        if let Some(iv) = interval {
            let due = start + iv * i as u32;
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                thread::sleep(wait);
            }
        }
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let outcome = read_image(path).and_then(|f| Ok(process_frame(&mut state, &recognizer, &f)?));
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                error!("{name}: {e:#}");
                frame_errors += 1;
                let _ = writeln!(stdout.lock(), "{name} error");
                continue;
            }
        };
        let _ = writeln!(stdout.lock(), "{name} {outcome}");
        match &outcome {
            FrameOutcome::Rejected { feedback, .. } => eprintln!("{feedback}"),
            FrameOutcome::Emitted(ev) => {
                let a = Announcement {
                    seq,
                    ts: now_seconds(),
                    patient: args.patient.clone(),
                    gesture: ev.gesture,
                    conf: Confidence::from_fraction(ev.confidence.clamp(0.0, 1.0)).expect("clamped"),
                    msg: ev.message.clone(),
                };
                seq += 1;
                if let Some(old) = queue.push(a) {
                    warn!("send queue full; dropped seq={}", old.seq);
                }
            }
            _ => {}
        }
    }
    queue.close();
    let spooled = sender.join().expect("sender thread panicked");
    if spooled > 0 || frame_errors > 0 {
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
