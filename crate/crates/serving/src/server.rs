//! Line-delimited JSON over TCP: each line in is a [`Request`], each line out
//! is the matching [`Response`] or `{"error": "..."}`.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::pool::WorkerPool;
use crate::request::{Request, Response};

const ACCEPT_POLL: Duration = Duration::from_millis(10);

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections. Open connections finish their requests.
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Binds `addr` and serves in the background.
pub fn spawn(engine: Arc<Engine>, addr: impl ToSocketAddrs) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let parallelism = engine.config().serving.parallelism;
    let pool = Arc::new(WorkerPool::new(engine, parallelism));
    let flag = stop.clone();
    let thread = std::thread::spawn(move || accept_loop(listener, pool, flag));
    Ok(ServerHandle {
        addr: local,
        stop,
        thread: Some(thread),
    })
}

fn accept_loop(listener: TcpListener, pool: Arc<WorkerPool>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let pool = pool.clone();
                std::thread::spawn(move || {
                    let _ = connection(stream, &pool);
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(ACCEPT_POLL),
            Err(_) => std::thread::sleep(ACCEPT_POLL),
        }
    }
}

fn connection(stream: TcpStream, pool: &WorkerPool) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    let mut out = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let arrival = Instant::now();
        let reply = match serde_json::from_str::<Request>(&line) {
            Ok(req) => match pool.submit_at(req, arrival).recv() {
                Ok(Ok(resp)) => serde_json::to_string(&resp).map_err(|e| e.to_string()),
                Ok(Err(e)) => Err(e.to_string()),
                Err(_) => Err("server is shutting down".to_string()),
            },
            Err(e) => Err(format!("malformed request: {e}")),
        };
        let text = reply.unwrap_or_else(|msg| serde_json::json!({ "error": msg }).to_string());
        out.write_all(text.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()?;
    }
    Ok(())
}

/// Sends one request and waits for its response.
pub fn send(addr: impl ToSocketAddrs, req: &Request) -> Result<Response> {
    let mut stream = TcpStream::connect(addr)?;
    let mut line = serde_json::to_string(req)?;
    line.push('\n');
    stream.write_all(line.as_bytes())?;
    let mut reply = String::new();
    BufReader::new(stream).read_line(&mut reply)?;
    let value: serde_json::Value = serde_json::from_str(&reply)?;
    if let Some(msg) = value.get("error").and_then(|e| e.as_str()) {
        return Err(Error::Request(msg.to_string()));
    }
    Ok(serde_json::from_value(value)?)
}
