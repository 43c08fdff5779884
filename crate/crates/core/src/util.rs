//! Shared plumbing: a tiny scoped thread pool for independent jobs,
//! stable file writing, and hashing.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Run independent jobs on up to `available_parallelism` worker threads.
/// Each job builds all of its own state, so nothing non-Send crosses
/// threads; results come back in input order.
pub fn run_parallel<T: Send>(jobs: Vec<Box<dyn FnOnce() -> T + Send>>) -> Vec<T> {
    let n = jobs.len();
    let workers = std::thread::available_parallelism()
        .map(|p| p.get())
        .unwrap_or(1)
        .min(n.max(1));
    if workers <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<(Option<Box<dyn FnOnce() -> T + Send>>, Option<T>)>> = jobs
        .into_iter()
        .map(|j| std::sync::Mutex::new((Some(j), None)))
        .collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let job = slots[i].lock().unwrap().0.take();
                if let Some(job) = job {
                    let out = job();
                    slots[i].lock().unwrap().1 = Some(out);
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().1.expect("job ran"))
        .collect()
}

/// First 8 hex chars of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

/// Create the parent directory chain and write the file.
pub fn write_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)
}

/// CSV cell formatting for f64: shortest round-trip representation,
/// deterministic across runs.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_results_keep_input_order() {
        let jobs: Vec<Box<dyn FnOnce() -> usize + Send>> = (0..17usize)
            .map(|i| Box::new(move || i * i) as Box<dyn FnOnce() -> usize + Send>)
            .collect();
        let out = run_parallel(jobs);
        assert_eq!(out, (0..17usize).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn short_hash_is_stable() {
        assert_eq!(short_hash(b"abc"), short_hash(b"abc"));
        assert_ne!(short_hash(b"abc"), short_hash(b"abd"));
        assert_eq!(short_hash(b"abc").len(), 8);
    }
}
