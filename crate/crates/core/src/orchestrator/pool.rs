//! Work queue: stateless workers pull jobs, the calling thread is the only
//! writer and sees every outcome.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};

use crossbeam_channel::unbounded;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolOptions {
    pub workers: usize,
    /// Extra attempts after a job panics or errors.
    pub max_retries: usize,
    /// Stop with [`Error::Interrupted`] after this many committed jobs.
    pub abort_after_jobs: Option<usize>,
}

impl Default for PoolOptions {
    fn default() -> Self {
        PoolOptions {
            workers: 1,
            max_retries: 2,
            abort_after_jobs: None,
        }
    }
}

#[derive(Debug)]
pub enum JobOutcome<R> {
    Done(R),
    /// Out of retries; carries the last error message.
    Failed(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub committed: usize,
    pub failed: usize,
    pub retried: usize,
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

/// Runs `work` on every job with `opts.workers` threads. `commit` receives
/// each final outcome on the calling thread, in completion order; an error
/// from `commit` stops the pool.
pub fn run_pool<J, R, W, C>(jobs: &[J], opts: PoolOptions, work: W, mut commit: C) -> Result<PoolStats>
where
    J: Sync,
    R: Send,
    W: Fn(&J) -> Result<R> + Sync,
    C: FnMut(usize, JobOutcome<R>) -> Result<()>,
{
    if opts.workers == 0 {
        return Err(Error::InvalidConfig("workers must be >= 1".into()));
    }
    let mut stats = PoolStats::default();
    if jobs.is_empty() {
        return Ok(stats);
    }
    let (job_tx, job_rx) = unbounded::<(usize, usize)>();
    let (out_tx, out_rx) = unbounded::<(usize, usize, std::result::Result<R, String>)>();
    for k in 0..jobs.len() {
        job_tx.send((k, 0)).expect("receiver alive");
    }
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| {
        for _ in 0..opts.workers.min(jobs.len()) {
            let (rx, tx, work, stop) = (job_rx.clone(), out_tx.clone(), &work, &stop);
            scope.spawn(move || {
                while let Ok((k, attempt)) = rx.recv() {
                    if stop.load(Ordering::Relaxed) {
                        break;
                    }
                    let out = match catch_unwind(AssertUnwindSafe(|| work(&jobs[k]))) {
                        Ok(Ok(r)) => Ok(r),
                        Ok(Err(e)) => Err(e.to_string()),
                        Err(p) => Err(panic_message(p)),
                    };
                    if tx.send((k, attempt, out)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(out_tx);
        let mut job_tx = Some(job_tx);
        let mut outstanding = jobs.len();
        let result = (|| {
            while outstanding > 0 {
                let (k, attempt, out) = out_rx.recv().expect("workers outlive outstanding jobs");
                let outcome = match out {
                    Ok(r) => JobOutcome::Done(r),
                    Err(msg) if attempt < opts.max_retries => {
                        log::warn!("job {k} attempt {} failed: {msg}; re-queueing", attempt + 1);
                        stats.retried += 1;
                        job_tx.as_ref().expect("open while jobs remain").send((k, attempt + 1)).expect("workers alive");
                        continue;
                    }
                    Err(msg) => {
                        log::error!("job {k} failed after {} attempts: {msg}", attempt + 1);
                        stats.failed += 1;
                        JobOutcome::Failed(msg)
                    }
                };
                outstanding -= 1;
                commit(k, outcome)?;
                stats.committed += 1;
                if opts.abort_after_jobs.is_some_and(|n| stats.committed >= n) && outstanding > 0 {
                    return Err(Error::Interrupted(stats.committed));
                }
            }
            Ok(())
        })();
        stop.store(true, Ordering::Relaxed);
        job_tx.take();
        drop(out_rx);
        result
    })?;
    Ok(stats)
}
