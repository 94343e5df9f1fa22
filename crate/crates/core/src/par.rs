//! Data-parallel helpers with a sequential fallback.
//!
//! Work is split into fixed-size chunks whose random streams are derived from
//! `(seed, chunk index)`, so the parallel and sequential paths produce
//! bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Trials per Monte-Carlo chunk.
pub const CHUNK: usize = 4096;

/// Execution strategy for batch work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    /// Rayon work-stealing; sequential when built without `parallel`.
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// SplitMix64 finalizer, used to decorrelate derived seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Runs `trials` Bernoulli/accumulator trials in seeded chunks and sums the
/// per-chunk results. `f(rng, count)` must process `count` trials.
pub fn chunked_sum<F>(exec: Exec, trials: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut ChaCha8Rng, usize) -> f64 + Sync + Send,
{
    let chunks = trials.div_ceil(CHUNK);
    let parts = map_indexed(exec, chunks, |c| {
        let count = CHUNK.min(trials - c * CHUNK);
        let mut rng = stream_rng(seed, c as u64);
        f(&mut rng, count)
    });
    // Fixed summation order keeps both paths bit-identical.
    parts.into_iter().sum()
}
