//! Fixed-size worker pool for independent slice jobs.
//!
//! Jobs are pure closures; results are collected by submission index, so the
//! outcome is identical for any worker count (per-slice seeding makes the
//! jobs themselves order-independent). A job failure flips a cancellation
//! flag: queued jobs are skipped and reported as cancelled, running jobs
//! finish normally.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::error::{Error, Result};

/// Wall-clock accounting for one pool run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleReport {
    /// Threads actually spawned (never more than the job count).
    pub workers: usize,
    /// Per-job wall milliseconds, by submission index; cancelled jobs hold 0.
    pub job_ms: Vec<f64>,
    /// Pool start to last job finished.
    pub makespan_ms: f64,
    /// Sum of executed job times: the serial-equivalent cost.
    pub serial_ms: f64,
    /// `serial_ms / makespan_ms`.
    pub speedup: f64,
    /// `speedup / workers`.
    pub efficiency: f64,
}

/// Runs the jobs on `workers` threads and reports timings. Results come
/// back in submission order. The first failure cancels every job that has
/// not started; their slots report [`Error::Cancelled`] with the index of
/// the failed job.
pub fn run_jobs<T, F>(jobs: Vec<F>, workers: usize) -> Result<(Vec<Result<T>>, ScheduleReport)>
where
    T: Send,
    F: FnOnce() -> Result<T> + Send,
{
    if workers == 0 {
        return Err(Error::InvalidConfig("worker count must be >= 1".into()));
    }
    let n = jobs.len();
    let spawn = workers.min(n.max(1));

    let slots: Vec<Mutex<Option<F>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<(Result<T>, f64)>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let cancelled = AtomicBool::new(false);
    let failed_at = AtomicUsize::new(usize::MAX);

    let started = Instant::now();
    std::thread::scope(|scope| {
        for _ in 0..spawn {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                if cancelled.load(Ordering::SeqCst) {
                    continue; // leave the slot empty; reported as cancelled
                }
                let job = slots[i]
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .take()
                    .expect("job taken twice");
                let t0 = Instant::now();
                let out = job();
                let ms = t0.elapsed().as_secs_f64() * 1e3;
                if out.is_err() {
                    let _ = failed_at.compare_exchange(
                        usize::MAX,
                        i,
                        Ordering::SeqCst,
                        Ordering::SeqCst,
                    );
                    cancelled.store(true, Ordering::SeqCst);
                }
                *results[i].lock().unwrap_or_else(|e| e.into_inner()) = Some((out, ms));
            });
        }
    });
    let makespan_ms = started.elapsed().as_secs_f64() * 1e3;

    let failed = failed_at.load(Ordering::SeqCst);
    let mut out = Vec::with_capacity(n);
    let mut job_ms = vec![0.0; n];
    let mut serial_ms = 0.0;
    for (i, slot) in results.into_iter().enumerate() {
        match slot.into_inner().unwrap_or_else(|e| e.into_inner()) {
            Some((res, ms)) => {
                job_ms[i] = ms;
                serial_ms += ms;
                out.push(res);
            }
            None => out.push(Err(Error::Cancelled(failed))),
        }
    }
    let speedup = if makespan_ms > 0.0 {
        serial_ms / makespan_ms
    } else {
        1.0
    };
    let report = ScheduleReport {
        workers: spawn,
        job_ms,
        makespan_ms,
        serial_ms,
        speedup,
        efficiency: speedup / spawn as f64,
    };
    Ok((out, report))
}

/// CSV comparison table over several pool runs (one row each).
pub fn timing_summary(reports: &[ScheduleReport]) -> String {
    let mut out = String::from("workers,jobs,makespan_ms,serial_ms,speedup,efficiency\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.3},{:.3},{:.4},{:.4}\n",
            r.workers,
            r.job_ms.len(),
            r.makespan_ms,
            r.serial_ms,
            r.speedup,
            r.efficiency
        ));
    }
    out
}
