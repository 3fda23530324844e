//! Throughput comparison between the reference and chunked scans.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::KernelError;
use crate::kernel::{
    change_scan_fast_with_chunk, change_scan_ref, max_relative_error, ScanConfig, ScanDims, ScanParams,
    StreamPair,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    pub chunk: usize,
    pub threads: usize,
    pub repeats: usize,
    pub ref_seconds: f64,
    pub fast_seconds: f64,
    pub ref_tokens_per_sec: f64,
    pub fast_tokens_per_sec: f64,
    /// Fast time divided by reference time.
    pub time_ratio: f64,
    pub max_rel_error: f64,
}

/// Times both paths on seeded random inputs, best of `repeats`.
///
/// `threads` of 0 uses the global rayon pool.
pub fn scan_bench(
    dims: ScanDims,
    seed: u64,
    repeats: usize,
    chunk: usize,
    threads: usize,
) -> Result<BenchReport, KernelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ScanParams::random(dims, &mut rng);
    let pair = StreamPair::random(dims, &mut rng);
    let config = ScanConfig::default();
    let repeats = repeats.max(1);

    let run = || -> Result<(f64, f64, f64), KernelError> {
        let mut best_ref = f64::INFINITY;
        let mut best_fast = f64::INFINITY;
        let mut err = 0.0f64;
        for _ in 0..repeats {
            let t = Instant::now();
            let r = change_scan_ref(&pair, &params, &config)?;
            best_ref = best_ref.min(t.elapsed().as_secs_f64());
            let t = Instant::now();
            let f = change_scan_fast_with_chunk(&pair, &params, &config, chunk)?;
            best_fast = best_fast.min(t.elapsed().as_secs_f64());
            err = err
                .max(max_relative_error(&f.y, &r.y))
                .max(max_relative_error(&f.y_prime, &r.y_prime));
        }
        Ok((best_ref, best_fast, err))
    };

    let (ref_seconds, fast_seconds, max_rel_error, used) = if threads == 0 {
        let (a, b, c) = run()?;
        (a, b, c, rayon::current_num_threads())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        let (a, b, c) = pool.install(run)?;
        (a, b, c, threads)
    };
    let tokens = (dims.batch * dims.len) as f64;
    Ok(BenchReport {
        batch: dims.batch,
        len: dims.len,
        channels: dims.channels,
        state: dims.state,
        chunk,
        threads: used,
        repeats,
        ref_seconds,
        fast_seconds,
        ref_tokens_per_sec: tokens / ref_seconds.max(1e-12),
        fast_tokens_per_sec: tokens / fast_seconds.max(1e-12),
        time_ratio: fast_seconds / ref_seconds.max(1e-12),
        max_rel_error,
    })
}
