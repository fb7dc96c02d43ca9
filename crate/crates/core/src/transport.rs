//! TCP transport: one server process, one process per client.
//!
//! Every connection starts with a `JOIN` frame naming the client. The server
//! waits until the whole cohort has joined, then drives the same state
//! machine as the in-process harness with real deadlines. A connection
//! closing mid-run is treated as that client going silent.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::client::{ClientNode, DropoutPolicy};
use crate::config::CohortConfig;
use crate::harness::report::{ClientSummary, RunReport};
use crate::harness::sim::{crash_and_restart, frame_round, round_record, simulation_ca, trace_phase};
use crate::id::DeviceId;
use crate::protocol::{byte_accounting, read_frame, write_frame, Direction, Frame, Message, MessageKind, TraceEntry};
use crate::server::ServerNode;

enum Inbound {
    Joined(DeviceId, TcpStream),
    Frame(DeviceId, Frame),
    Closed(DeviceId),
}

fn reader(stream: TcpStream, tx: mpsc::Sender<Inbound>) {
    let mut r = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let id = match read_frame(&mut r) {
        Ok(Some(f)) if f.kind == MessageKind::Join => f.sender,
        other => {
            warn!("connection without JOIN: {:?}", other.map(|f| f.map(|f| f.kind)));
            return;
        }
    };
    if tx.send(Inbound::Joined(id, stream)).is_err() {
        return;
    }
    loop {
        match read_frame(&mut r) {
            Ok(Some(f)) => {
                if tx.send(Inbound::Frame(id, f)).is_err() {
                    return;
                }
            }
            Ok(None) => break,
            Err(e) => {
                debug!("client {id}: {e}");
                break;
            }
        }
    }
    let _ = tx.send(Inbound::Closed(id));
}

struct Peers {
    writers: BTreeMap<DeviceId, BufWriter<TcpStream>>,
    trace: Vec<TraceEntry>,
}

impl Peers {
    fn send(&mut self, server: &ServerNode, cfg: &CohortConfig, out: Vec<(DeviceId, Frame)>) {
        for (to, f) in out {
            let round = frame_round(&f).unwrap_or_else(|| server.round_context());
            self.trace.push(TraceEntry::new(
                &f,
                trace_phase(cfg.mode, &f),
                Direction::Downlink,
                to,
                round,
            ));
            if let Some(w) = self.writers.get_mut(&to) {
                if let Err(e) = write_frame(w, &f) {
                    debug!("write to {to} failed: {e}");
                    self.writers.remove(&to);
                }
            }
        }
    }
}

/// Accepts the cohort on `listener` and runs the whole schedule.
pub fn serve(listener: TcpListener, cfg: &CohortConfig, join_timeout: Duration) -> io::Result<RunReport> {
    let t0 = Instant::now();
    let (tx, rx) = mpsc::channel();
    let accept_tx = tx.clone();
    let acceptor = listener.try_clone()?;
    thread::spawn(move || {
        for stream in acceptor.incoming() {
            let Ok(stream) = stream else { continue };
            let _ = stream.set_nodelay(true);
            let tx = accept_tx.clone();
            thread::spawn(move || reader(stream, tx));
        }
    });
    drop(tx);

    let mut peers = Peers {
        writers: BTreeMap::new(),
        trace: Vec::new(),
    };
    let mut early: Vec<(DeviceId, Frame)> = Vec::new();
    let join_deadline = Instant::now() + join_timeout;
    while peers.writers.len() < cfg.n {
        let left = join_deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok(Inbound::Joined(id, stream)) => {
                if peers.writers.contains_key(&id) {
                    warn!("duplicate JOIN from {id}; keeping the first connection");
                    let _ = stream.shutdown(Shutdown::Both);
                    continue;
                }
                info!("client {id} joined ({}/{})", peers.writers.len() + 1, cfg.n);
                peers.writers.insert(id, BufWriter::new(stream));
            }
            Ok(Inbound::Frame(id, f)) => early.push((id, f)),
            Ok(Inbound::Closed(id)) => {
                peers.writers.remove(&id);
            }
            Err(_) => {
                return Err(io::Error::new(
                    io::ErrorKind::TimedOut,
                    format!("{} of {} clients joined", peers.writers.len(), cfg.n),
                ))
            }
        }
    }

    let enrolled: Vec<DeviceId> = peers.writers.keys().copied().collect();
    let mut server = ServerNode::new(cfg, enrolled);
    let mut results = Vec::new();
    let out = server.start();
    peers.send(&server, cfg, out);
    let mut key = server.stage_key();
    let mut deadline = Instant::now() + server.timeout();
    let mut closed = BTreeSet::new();
    let mut pending = early.into_iter();

    while !server.is_finished() {
        let next = match pending.next() {
            Some((id, f)) => Ok(Inbound::Frame(id, f)),
            None => rx.recv_timeout(deadline.saturating_duration_since(Instant::now())),
        };
        let out = match next {
            Ok(Inbound::Frame(id, f)) => {
                let round = frame_round(&f).unwrap_or_else(|| server.round_context());
                peers.trace.push(TraceEntry::new(
                    &f,
                    trace_phase(cfg.mode, &f),
                    Direction::Uplink,
                    id,
                    round,
                ));
                server.handle(id, &f)
            }
            Ok(Inbound::Closed(id)) => {
                info!("client {id} disconnected");
                peers.writers.remove(&id);
                closed.insert(id);
                Vec::new()
            }
            Ok(Inbound::Joined(id, stream)) => {
                warn!("late JOIN from {id} ignored");
                let _ = stream.shutdown(Shutdown::Both);
                Vec::new()
            }
            Err(RecvTimeoutError::Timeout) => server.on_timeout(),
            Err(RecvTimeoutError::Disconnected) => server.on_timeout(),
        };
        peers.send(&server, cfg, out);
        results.extend(server.drain_results());
        if server.stage_key() != key {
            key = server.stage_key();
            deadline = Instant::now() + server.timeout();
        }
    }
    results.extend(server.drain_results());
    for (_, w) in std::mem::take(&mut peers.writers) {
        if let Ok(s) = w.into_inner() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    let rounds = results.iter().map(|r| round_record(cfg, r, &peers.trace)).collect();
    let clients = server
        .registry()
        .members
        .iter()
        .map(|id| ClientSummary::from_events(*id, &[]))
        .collect();
    Ok(RunReport::assemble(
        cfg,
        rounds,
        byte_accounting(&peers.trace),
        Vec::new(),
        crate::enclave::footprint_formula(cfg.n),
        clients,
        server.events().to_vec(),
        server.late_discarded(),
        Vec::new(),
        &peers.trace,
        t0.elapsed().as_secs_f64() * 1e3,
    ))
}

fn connect_with_retry(addr: &str, patience: Duration) -> io::Result<TcpStream> {
    let until = Instant::now() + patience;
    loop {
        let addrs: Vec<_> = addr.to_socket_addrs()?.collect();
        let mut last = None;
        for a in &addrs {
            match TcpStream::connect(a) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        if Instant::now() >= until {
            return Err(last.unwrap_or_else(|| io::Error::new(io::ErrorKind::NotFound, "no address")));
        }
        thread::sleep(Duration::from_millis(50));
    }
}

/// Runs one client daemon against `addr` until the server closes the
/// connection. The device directory is provisioned on first use.
pub fn run_client(
    addr: &str,
    cfg: &CohortConfig,
    id: DeviceId,
    dir: &Path,
    policy: DropoutPolicy,
    patience: Duration,
) -> io::Result<ClientSummary> {
    let provisioned = dir.join("huk.bin").exists();
    let node = if provisioned {
        ClientNode::open(cfg, id, dir, policy)
    } else {
        ClientNode::provision(cfg, id, dir, &simulation_ca(cfg.seed), policy)
    };
    let mut node = node.map_err(|e| io::Error::other(e.to_string()))?;

    let stream = connect_with_retry(addr, patience)?;
    stream.set_nodelay(true)?;
    let mut r = BufReader::new(stream.try_clone()?);
    let mut w = BufWriter::new(stream);
    write_frame(&mut w, &Message::Join.into_frame(0, id))?;
    info!("client {id} joined {addr}");
    loop {
        let f = match read_frame(&mut r) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                debug!("client {id}: {e}");
                break;
            }
        };
        let before = node.persisted_counter();
        let mut out = node.handle(&f);
        if node.is_crashed() {
            let rec = crash_and_restart(&mut node, before, &f, &mut out);
            warn!("client {id} crashed at {} and restarted", rec.point.slug());
        }
        for o in &out {
            write_frame(&mut w, o)?;
        }
    }
    Ok(ClientSummary::from_events(id, node.events()))
}
