//! FIFO worker pool. Requests are served in arrival order by a fixed number
//! of workers sharing one engine; there is no batching.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use crossbeam_channel::{unbounded, Receiver, Sender};

use crate::engine::Engine;
use crate::error::Result;
use crate::request::{Request, Response};

type Job = (Request, Instant, Sender<Result<Response>>);

pub struct WorkerPool {
    jobs: Option<Sender<Job>>,
    workers: Vec<JoinHandle<()>>,
    output_tokens: Arc<AtomicUsize>,
}

impl WorkerPool {
    pub fn new(engine: Arc<Engine>, parallelism: usize) -> Self {
        let (tx, rx) = unbounded::<Job>();
        let output_tokens = Arc::new(AtomicUsize::new(0));
        let workers = (0..parallelism.max(1))
            .map(|_| {
                let (rx, engine, counter) = (rx.clone(), engine.clone(), output_tokens.clone());
                std::thread::spawn(move || {
                    for (req, arrival, reply) in rx {
                        let res = engine.handle_at(&req, arrival);
                        if let Ok(r) = &res {
                            counter.fetch_add(r.output_ids.len(), Ordering::Relaxed);
                        }
                        // The submitter may have stopped listening.
                        let _ = reply.send(res);
                    }
                })
            })
            .collect();
        Self {
            jobs: Some(tx),
            workers,
            output_tokens,
        }
    }

    /// Queues `req`; TTFT is measured from `arrival`.
    pub fn submit_at(&self, req: Request, arrival: Instant) -> Receiver<Result<Response>> {
        let (tx, rx) = unbounded();
        self.jobs
            .as_ref()
            .expect("pool is running")
            .send((req, arrival, tx))
            .expect("workers outlive the pool handle");
        rx
    }

    pub fn submit(&self, req: Request) -> Receiver<Result<Response>> {
        self.submit_at(req, Instant::now())
    }

    /// Output tokens produced by every successful request so far.
    pub fn output_tokens(&self) -> usize {
        self.output_tokens.load(Ordering::Relaxed)
    }

    /// Stops accepting work and waits for queued requests to finish.
    pub fn shutdown(mut self) {
        self.join();
    }

    fn join(&mut self) {
        self.jobs.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.join();
    }
}
