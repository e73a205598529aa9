//! Fixed worker pool with over-provisioned batch collection and a
//! continuous-collection mode.

use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::sandbox::CancelToken;
use crate::config::StragglerAction;
use crate::error::{Error, Result};

type Task = Box<dyn FnOnce() + Send>;

/// A unit of work: returns `None` when it observed cancellation.
pub type Job<T> = Box<dyn FnOnce(&CancelToken) -> Option<T> + Send>;

const PENDING: u8 = 0;
const COLLECTED: u8 = 1;
const DROPPED: u8 = 2;

pub struct WorkerPool {
    tx: Option<Sender<Task>>,
    workers: Vec<JoinHandle<()>>,
    size: usize,
}

impl WorkerPool {
    pub fn new(size: usize) -> Self {
        let size = size.max(1);
        let (tx, rx) = mpsc::channel::<Task>();
        let rx = Arc::new(Mutex::new(rx));
        let workers = (0..size)
            .map(|i| {
                let rx = rx.clone();
                thread::Builder::new()
                    .name(format!("worker-{i}"))
                    .spawn(move || loop {
                        let task = {
                            let guard = rx.lock().unwrap_or_else(|e| e.into_inner());
                            guard.recv()
                        };
                        match task {
                            Ok(t) => t(),
                            Err(_) => return,
                        }
                    })
                    .expect("spawn worker")
            })
            .collect();
        Self {
            tx: Some(tx),
            workers,
            size,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    fn submit(&self, task: Task) {
        self.tx
            .as_ref()
            .expect("pool open")
            .send(task)
            .expect("workers alive");
    }

    /// Runs all jobs and returns the first `keep` results in completion
    /// order, tagged with their launch index. Remaining jobs are cancelled or
    /// left to finish and be discarded. A result is either collected or
    /// dropped, never both.
    pub fn collect_batch<T: Send + 'static>(
        &self,
        jobs: Vec<Job<T>>,
        keep: usize,
        straggler: StragglerAction,
    ) -> Result<Vec<(usize, T)>> {
        if keep > jobs.len() {
            return Err(Error::Liveness(format!(
                "cannot keep {keep} of {} launched jobs",
                jobs.len()
            )));
        }
        let (tx, rx) = mpsc::channel::<(usize, Option<T>)>();
        let mut tokens = Vec::with_capacity(jobs.len());
        let mut states = Vec::with_capacity(jobs.len());
        for (i, job) in jobs.into_iter().enumerate() {
            let token = CancelToken::new();
            let state = Arc::new(AtomicU8::new(PENDING));
            tokens.push(token.clone());
            states.push(state);
            let tx = tx.clone();
            self.submit(Box::new(move || {
                if token.is_cancelled() {
                    let _ = tx.send((i, None));
                    return;
                }
                let out = job(&token);
                let _ = tx.send((i, out));
            }));
        }
        drop(tx);
        let mut out = Vec::with_capacity(keep);
        let mut finished = 0;
        while out.len() < keep {
            match rx.recv() {
                Ok((i, Some(v))) => {
                    finished += 1;
                    if states[i]
                        .compare_exchange(PENDING, COLLECTED, Ordering::SeqCst, Ordering::SeqCst)
                        .is_ok()
                    {
                        out.push((i, v));
                    }
                }
                Ok((_, None)) => finished += 1,
                Err(_) => {
                    return Err(Error::Liveness(format!(
                        "only {} of {keep} executions completed ({finished} finished)",
                        out.len()
                    )))
                }
            }
        }
        for (i, s) in states.iter().enumerate() {
            if s.compare_exchange(PENDING, DROPPED, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
                && straggler == StragglerAction::Cancel
            {
                tokens[i].cancel();
            }
        }
        Ok(out)
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.tx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Workers that produce results back-to-back until stopped. Each worker
/// calls `produce(worker_id, cancel)` repeatedly; results stream into a
/// queue consumed with [`ContinuousCollector::next_batch`].
pub struct ContinuousCollector<T> {
    rx: Receiver<T>,
    stop: Arc<AtomicBool>,
    cancel: CancelToken,
    workers: Vec<JoinHandle<()>>,
}

impl<T: Send + 'static> ContinuousCollector<T> {
    pub fn start<F>(num_workers: usize, produce: F) -> Self
    where
        F: Fn(usize, &CancelToken) -> Option<T> + Send + Sync + 'static,
    {
        let produce = Arc::new(produce);
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let cancel = CancelToken::new();
        let workers = (0..num_workers.max(1))
            .map(|w| {
                let (produce, tx, stop, cancel) =
                    (produce.clone(), tx.clone(), stop.clone(), cancel.clone());
                thread::spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        match produce(w, &cancel) {
                            Some(item) => {
                                if stop.load(Ordering::SeqCst) || tx.send(item).is_err() {
                                    return;
                                }
                            }
                            None => {
                                if stop.load(Ordering::SeqCst) {
                                    return;
                                }
                            }
                        }
                    }
                })
            })
            .collect();
        Self {
            rx,
            stop,
            cancel,
            workers,
        }
    }

    /// Blocks until `n` results are available, or `timeout` elapses.
    pub fn next_batch(&self, n: usize, timeout: Option<Duration>) -> Result<Vec<T>> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let item = match deadline {
                Some(d) => self
                    .rx
                    .recv_timeout(d.saturating_duration_since(Instant::now()))
                    .map_err(|_| {
                        Error::Liveness(format!("collected {} of {n} before timeout", out.len()))
                    })?,
                None => self
                    .rx
                    .recv()
                    .map_err(|_| Error::Liveness("all continuous workers exited".into()))?,
            };
            out.push(item);
        }
        Ok(out)
    }

    /// Results already queued, without blocking.
    pub fn drain(&self) -> Vec<T> {
        self.rx.try_iter().collect()
    }

    /// Stops all workers, cancelling in-flight work, and joins them.
    pub fn stop(self) {
        drop(self);
    }
}

impl<T> Drop for ContinuousCollector<T> {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.cancel.cancel();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Sleeps in small steps so that cancellation is observed promptly.
/// Returns false when cancelled.
pub fn cancellable_sleep(d: Duration, cancel: &CancelToken) -> bool {
    let end = Instant::now() + d;
    loop {
        if cancel.is_cancelled() {
            return false;
        }
        let now = Instant::now();
        if now >= end {
            return true;
        }
        thread::sleep((end - now).min(Duration::from_millis(5)));
    }
}
