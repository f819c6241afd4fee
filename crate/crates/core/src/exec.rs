//! Work scheduling and random-stream derivation.
//!
//! Every stochastic routine splits its work into shards whose size does not
//! depend on the thread count. Each shard draws from its own ChaCha8 stream,
//! keyed by `(seed, stream)`, and partial results are reduced in shard order.
//! Results are therefore bit-identical between [`Execution::Sequential`] and
//! [`Execution::Parallel`] and for any number of worker threads.
//!
//! Seed derivation: a component seed is `splitmix64(root ^ fnv1a(tag))`,
//! further mixed with an index via [`derive_seed`]. The derived value seeds
//! `ChaCha8Rng::seed_from_u64`; shards then select `set_stream(shard)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// How data-parallel loops are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon work stealing. Falls back to sequential when the `parallel`
    /// feature is disabled.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Maps `f` over `0..len`, preserving index order in the output.
    pub fn map<R, F>(self, len: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..len).into_par_iter().map(f).collect()
            }
            _ => (0..len).map(f).collect(),
        }
    }
}

/// Configures the global worker pool. A no-op without the `parallel` feature
/// or when the pool was already initialised.
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

pub fn available_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

const fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Derives an independent seed for component `tag`, item `index`.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(tag)) ^ splitmix64(index.wrapping_add(1)))
}

/// A ChaCha8 generator on `stream` of the sequence keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Splits `total` items into shards of `shard` items (the last may be short).
pub(crate) fn shard_sizes(total: u64, shard: u64) -> Vec<u64> {
    let full = total / shard;
    let rest = total % shard;
    let mut sizes = vec![shard; full as usize];
    if rest > 0 {
        sizes.push(rest);
    }
    sizes
}
