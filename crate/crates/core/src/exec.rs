//! Execution policy for the data-parallel loops.
//!
//! Work is always split into the same fixed-size chunks whatever the policy,
//! and every chunk runs the same sequential loop nest, so sequential and
//! parallel runs produce bit-identical results. Only the scheduling differs.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Sequential,
    Parallel,
}

const SEQ: u8 = 0;
const PAR: u8 = 1;

static POLICY: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { PAR } else { SEQ });

/// Current process-wide policy. Without the `parallel` feature this is
/// always [`Policy::Sequential`].
pub fn policy() -> Policy {
    if cfg!(feature = "parallel") && POLICY.load(Ordering::Relaxed) == PAR {
        Policy::Parallel
    } else {
        Policy::Sequential
    }
}

pub fn set_policy(p: Policy) {
    POLICY.store(
        match p {
            Policy::Sequential => SEQ,
            Policy::Parallel => PAR,
        },
        Ordering::Relaxed,
    );
}

/// Runs `f(chunk_index, chunk)` over `data.chunks_mut(chunk)`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    match policy() {
        #[cfg(feature = "parallel")]
        Policy::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
        _ => data
            .chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

/// Evaluates `f(i)` for `i in 0..n`, results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match policy() {
        #[cfg(feature = "parallel")]
        Policy::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}
