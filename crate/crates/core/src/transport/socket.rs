//! Frames over TCP.
//!
//! A [`Server`] reads frames on one thread per connection and runs each
//! request on its own thread, so a slow request never blocks the ones behind
//! it. Replies are written whole under a per-connection lock.
//!
//! On the client side a [`Connection`] multiplexes concurrent calls over one
//! stream. Each call gets a fresh wire id; the caller's correlation id is
//! restored on the reply, so callers may reuse ids freely.

use std::collections::HashMap;
use std::io::{self, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tracing::{debug, warn};

use crate::interceptor::{Completion, Forwarder, Location, TargetBinding};
use crate::model::{EnvelopeKind, MessageEnvelope};
use crate::time::DurationMs;

use super::codec::{encode, FrameReader};

/// Identity of the remote end of a connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Peer {
    pub addr: String,
}

/// Request handler shared by all connections. `None` sends no reply.
pub type SharedHandler = Arc<dyn Fn(MessageEnvelope, &Peer) -> Option<MessageEnvelope> + Send + Sync>;

fn write_frame(stream: &Mutex<TcpStream>, env: &MessageEnvelope) -> io::Result<()> {
    let frame = encode(env).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    let mut s = stream.lock().unwrap_or_else(|p| p.into_inner());
    s.write_all(&frame)?;
    s.flush()
}

pub struct Server {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(addr: &str, handler: SharedHandler) -> io::Result<Server> {
        let listener = TcpListener::bind(addr)?;
        let local_addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let connections = Arc::new(Mutex::new(Vec::new()));
        let acceptor = {
            let stop = stop.clone();
            let connections = connections.clone();
            thread::spawn(move || accept_loop(listener, handler, stop, connections))
        };
        debug!(%local_addr, "listening");
        Ok(Server {
            local_addr,
            stop,
            connections,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    fn stop(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the acceptor
        let _ = TcpStream::connect(self.local_addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for conn in self.connections.lock().unwrap_or_else(|p| p.into_inner()).drain(..) {
            let _ = conn.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(
    listener: TcpListener,
    handler: SharedHandler,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!(error = %e, "accept failed");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if let Ok(clone) = stream.try_clone() {
            connections.lock().unwrap_or_else(|p| p.into_inner()).push(clone);
        }
        let handler = handler.clone();
        thread::spawn(move || serve_connection(stream, handler));
    }
}

fn serve_connection(stream: TcpStream, handler: SharedHandler) {
    let peer = Peer {
        addr: stream
            .peer_addr()
            .map(|a| a.to_string())
            .unwrap_or_else(|_| "unknown".into()),
    };
    let writer = match stream.try_clone() {
        Ok(w) => Arc::new(Mutex::new(w)),
        Err(_) => return,
    };
    let mut reader = FrameReader::new(BufReader::new(stream));
    while let Ok(Some(env)) = reader.next_envelope() {
        if env.kind != EnvelopeKind::Request {
            debug!(peer = %peer.addr, id = %env.correlation_id, "ignoring non-request frame");
            continue;
        }
        let handler = handler.clone();
        let writer = writer.clone();
        let peer = peer.clone();
        thread::spawn(move || {
            if let Some(reply) = handler(env, &peer) {
                if let Err(e) = write_frame(&writer, &reply) {
                    debug!(peer = %peer.addr, error = %e, "reply not delivered");
                }
            }
        });
    }
    debug!(peer = %peer.addr, skipped = reader.skipped(), "connection closed");
}

type Waiters = Arc<Mutex<HashMap<String, mpsc::Sender<MessageEnvelope>>>>;

/// Client end of one TCP connection.
pub struct Connection {
    writer: Mutex<TcpStream>,
    waiters: Waiters,
    next_id: AtomicU64,
    alive: Arc<AtomicBool>,
}

impl Connection {
    pub fn open(addr: &str, connect_timeout: Duration) -> io::Result<Arc<Connection>> {
        let sockaddr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("cannot resolve {addr}")))?;
        let stream = TcpStream::connect_timeout(&sockaddr, connect_timeout)?;
        stream.set_nodelay(true)?;
        let reader_stream = stream.try_clone()?;
        let waiters: Waiters = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        {
            let waiters = waiters.clone();
            let alive = alive.clone();
            thread::spawn(move || {
                let mut reader = FrameReader::new(BufReader::new(reader_stream));
                while let Ok(Some(env)) = reader.next_envelope() {
                    let waiter = waiters
                        .lock()
                        .unwrap_or_else(|p| p.into_inner())
                        .remove(&env.correlation_id);
                    match waiter {
                        Some(tx) => {
                            let _ = tx.send(env);
                        }
                        None => debug!(id = %env.correlation_id, "late or unknown reply dropped"),
                    }
                }
                alive.store(false, Ordering::SeqCst);
                // wake every caller still waiting
                waiters.lock().unwrap_or_else(|p| p.into_inner()).clear();
            });
        }
        Ok(Arc::new(Connection {
            writer: Mutex::new(stream),
            waiters,
            next_id: AtomicU64::new(1),
            alive,
        }))
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    /// Sends `request` and waits up to `budget_ms` for its reply.
    pub fn call(&self, request: &MessageEnvelope, budget_ms: DurationMs) -> Completion {
        let wire_id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let (tx, rx) = mpsc::channel();
        self.waiters
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(wire_id.clone(), tx);
        if !self.is_alive() {
            self.forget(&wire_id);
            return Completion::TransportError("connection closed".into());
        }
        let mut outgoing = request.clone();
        outgoing.correlation_id = wire_id.clone();
        if let Err(e) = write_frame(&self.writer, &outgoing) {
            self.forget(&wire_id);
            return Completion::TransportError(e.to_string());
        }
        match rx.recv_timeout(Duration::from_millis(budget_ms)) {
            Ok(mut reply) => {
                reply.correlation_id = request.correlation_id.clone();
                Completion::Reply(reply)
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                self.forget(&wire_id);
                Completion::DeadlineExpired
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                Completion::TransportError("connection closed before reply".into())
            }
        }
    }

    fn forget(&self, wire_id: &str) {
        self.waiters
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(wire_id);
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self
            .writer
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .shutdown(Shutdown::Both);
    }
}

/// Pool of connections keyed by address. Clones share the pool.
#[derive(Clone)]
pub struct SocketForwarder {
    pool: Arc<Mutex<HashMap<String, Arc<Connection>>>>,
    connect_timeout: Duration,
}

impl Default for SocketForwarder {
    fn default() -> Self {
        Self::new()
    }
}

impl SocketForwarder {
    pub fn new() -> Self {
        Self {
            pool: Arc::default(),
            connect_timeout: Duration::from_secs(2),
        }
    }

    fn connection(&self, addr: &str) -> io::Result<Arc<Connection>> {
        let mut pool = self.pool.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(conn) = pool.get(addr) {
            if conn.is_alive() {
                return Ok(conn.clone());
            }
        }
        let conn = Connection::open(addr, self.connect_timeout)?;
        pool.insert(addr.to_string(), conn.clone());
        Ok(conn)
    }

    /// One call to `addr` with a deadline of `budget_ms`.
    pub fn call(&self, addr: &str, request: &MessageEnvelope, budget_ms: DurationMs) -> Completion {
        match self.connection(addr) {
            Ok(conn) => conn.call(request, budget_ms),
            Err(e) => Completion::TransportError(format!("{addr}: {e}")),
        }
    }
}

impl Forwarder for SocketForwarder {
    fn forward(
        &mut self,
        target: &TargetBinding,
        request: &MessageEnvelope,
        budget_ms: DurationMs,
    ) -> Completion {
        match &target.location {
            Location::Socket(addr) => self.call(addr, request, budget_ms),
            Location::InProcess(name) => Completion::TransportError(format!(
                "{name} is an in-process target and cannot be reached over a socket"
            )),
        }
    }
}
