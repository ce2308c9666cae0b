use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use chrono::{TimeZone, Utc};
use gestcall::announce::*;

fn fast_policy() -> RetryPolicy {
    RetryPolicy { attempts: 3, backoff: vec![Duration::from_millis(10)], timeout: Duration::from_millis(500) }
}

fn announcement(seq: u64, msg: &str) -> Announcement {
    Announcement {
        seq,
        ts: Utc.with_ymd_and_hms(2012, 12, 7, 10, 0, 0).unwrap(),
        patient: "bed12".into(),
        gesture: 3,
        conf: Confidence::from_milli(910).unwrap(),
        msg: msg.into(),
    }
}

type Printed = Arc<Mutex<Vec<String>>>;

fn start_receiver(log: &std::path::Path) -> (ReceiverHandle, Printed) {
    let printed: Printed = Arc::default();
    let sink_store = Arc::clone(&printed);
    let rx = Receiver {
        bind: "127.0.0.1:0".into(),
        log_path: log.to_path_buf(),
        sink: Arc::new(move |a: &Announcement| sink_store.lock().unwrap().push(format!("{}: {}", a.patient, a.msg))),
    };
    (rx.start().unwrap(), printed)
}

fn log_records(path: &std::path::Path) -> Vec<ReceiverRecord> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(|l| ReceiverRecord::parse_log_line(l).unwrap())
        .collect()
}

fn dead_port() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    drop(l);
    addr
}

#[test]
fn delivered_on_first_attempt() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("rx.log");
    let (rx, printed) = start_receiver(&log);
    let spool = dir.path().join("spool");
    let out =
        send_with_retry(&rx.local_addr().to_string(), &announcement(5, "need water"), &fast_policy(), &spool).unwrap();
    assert_eq!(out, SendOutcome::Delivered { seq: 5, attempts: 1 });
    assert!(!spool.exists());
    let recs = log_records(&log);
    assert_eq!(recs.len(), 1);
    assert!(!recs[0].duplicate);
    assert_eq!(recs[0].announcement, announcement(5, "need water"));
    assert_eq!(*printed.lock().unwrap(), vec!["bed12: need water".to_string()]);
    rx.shutdown();
}

#[test]
fn receiver_down_spools_exact_line() {
    let dir = tempfile::tempdir().unwrap();
    let spool = dir.path().join("spool");
    let a = announcement(9, "call \"nurse\"");
    let out = send_with_retry(&dead_port(), &a, &fast_policy(), &spool).unwrap();
    assert_eq!(out, SendOutcome::Failed { cause: FailureCause::Connect });
    assert_eq!(std::fs::read_to_string(&spool).unwrap(), encode_announcement(&a).unwrap());
}

#[test]
fn mismatched_ack_is_retried() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = thread::spawn(move || {
        // Wrong seq first, then the correct one.
        for reply in ["ACK 999", "ACK 5"] {
            let (s, _) = listener.accept().unwrap();
            let mut line = String::new();
            BufReader::new(&s).read_line(&mut line).unwrap();
            (&s).write_all(format!("{reply}\n").as_bytes()).unwrap();
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let out = send_with_retry(&addr, &announcement(5, "x"), &fast_policy(), &dir.path().join("spool")).unwrap();
    assert_eq!(out, SendOutcome::Delivered { seq: 5, attempts: 2 });
    server.join().unwrap();
}

#[test]
fn silent_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let hold = thread::spawn(move || {
        let conns: Vec<_> = (0..2).map(|_| listener.accept().unwrap()).collect();
        thread::sleep(Duration::from_millis(300));
        drop(conns);
    });
    let policy = RetryPolicy { attempts: 2, backoff: vec![Duration::ZERO], timeout: Duration::from_millis(100) };
    let dir = tempfile::tempdir().unwrap();
    let out = send_with_retry(&addr, &announcement(1, "x"), &policy, &dir.path().join("spool")).unwrap();
    assert_eq!(out, SendOutcome::Failed { cause: FailureCause::Timeout });
    hold.join().unwrap();
}

#[test]
fn duplicates_logged_but_announced_once() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("rx.log");
    let (rx, printed) = start_receiver(&log);
    let dest = rx.local_addr().to_string();
    let spool = dir.path().join("spool");
    for _ in 0..2 {
        let out = send_with_retry(&dest, &announcement(7, "pain"), &fast_policy(), &spool).unwrap();
        assert!(matches!(out, SendOutcome::Delivered { seq: 7, .. }));
    }
    let flags: Vec<bool> = log_records(&log).iter().map(|r| r.duplicate).collect();
    assert_eq!(flags, vec![false, true]);
    assert_eq!(printed.lock().unwrap().len(), 1);
}

#[test]
fn concurrent_clients_all_acked() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("rx.log");
    let (rx, printed) = start_receiver(&log);
    let dest = rx.local_addr().to_string();
    let handles: Vec<_> = (0..8u64)
        .map(|i| {
            let dest = dest.clone();
            let spool = dir.path().join(format!("spool{i}"));
            thread::spawn(move || {
                send_with_retry(&dest, &announcement(100 + i, "need food"), &fast_policy(), &spool).unwrap()
            })
        })
        .collect();
    for h in handles {
        assert!(matches!(h.join().unwrap(), SendOutcome::Delivered { .. }));
    }
    let mut seqs: Vec<u64> = log_records(&log).iter().map(|r| r.announcement.seq).collect();
    seqs.sort();
    assert_eq!(seqs, (100..108).collect::<Vec<_>>());
    assert_eq!(printed.lock().unwrap().len(), 8);
}

#[test]
fn garbage_gets_err_and_connection_survives() {
    let dir = tempfile::tempdir().unwrap();
    let (rx, printed) = start_receiver(&dir.path().join("rx.log"));
    let s = TcpStream::connect(rx.local_addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
    let mut reader = BufReader::new(&s);
    let mut reply = String::new();
    (&s).write_all(b"hello\n").unwrap();
    reader.read_line(&mut reply).unwrap();
    assert_eq!(reply, "ERR 0 BADMSG\n");
    reply.clear();
    (&s).write_all(encode_announcement(&announcement(3, "emergency")).unwrap().as_bytes()).unwrap();
    reader.read_line(&mut reply).unwrap();
    assert_eq!(reply, "ACK 3\n");
    assert_eq!(printed.lock().unwrap().len(), 1);
}

#[test]
fn port_in_use() {
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let rx = Receiver { bind: format!("127.0.0.1:{port}"), ..Receiver::new(port, dir.path().join("log")) };
    assert!(matches!(rx.start(), Err(AnnounceError::PortInUse(p)) if p == port));
}

#[test]
fn spool_replay_delivers_everything_once() {
    let dir = tempfile::tempdir().unwrap();
    let spool = dir.path().join("spool");
    let down = dead_port();
    let policy = RetryPolicy { attempts: 1, ..fast_policy() };
    for seq in 1..=3 {
        send_with_retry(&down, &announcement(seq, "need toilet"), &policy, &spool).unwrap();
    }
    assert_eq!(std::fs::read_to_string(&spool).unwrap().lines().count(), 3);

    // Still down: nothing is lost.
    let report = replay_spool(&down, &spool, &policy).unwrap();
    assert_eq!(report, ReplayReport { delivered: 0, remaining: 3, discarded: 0 });

    let log = dir.path().join("rx.log");
    let (rx, printed) = start_receiver(&log);
    let report = replay_spool(&rx.local_addr().to_string(), &spool, &policy).unwrap();
    assert_eq!(report, ReplayReport { delivered: 3, remaining: 0, discarded: 0 });
    assert!(!spool.exists());
    assert_eq!(printed.lock().unwrap().len(), 3);
    assert_eq!(replay_spool(&rx.local_addr().to_string(), &spool, &policy).unwrap(), ReplayReport::default());
    assert_eq!(log_records(&log).len(), 3);
}
