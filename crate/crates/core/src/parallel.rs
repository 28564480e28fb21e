//! Data-parallel execution of independent output chunks.
//!
//! Every kernel in this crate writes its output as disjoint chunks, each
//! computed by a sequential loop with a fixed summation order. Running the
//! chunks on the rayon pool therefore produces bit-identical results to the
//! sequential path. With the `parallel` feature disabled, or after
//! [`set_parallel(false)`](set_parallel), chunks run on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Enables or disables the rayon path at runtime. No effect without the
/// `parallel` feature.
pub fn set_parallel(enabled: bool) {
    ENABLED.store(enabled, Ordering::SeqCst);
}

/// Whether chunked kernels currently dispatch to the rayon pool.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::SeqCst)
}

/// Runs `f` with the rayon path switched off, restoring the previous state.
pub fn with_sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = ENABLED.swap(false, Ordering::SeqCst);
    let out = f();
    ENABLED.store(prev, Ordering::SeqCst);
    out
}

/// Calls `f(chunk_index, chunk)` for every `chunk_len`-sized chunk of `out`.
pub fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk_len == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && out.len() > chunk_len {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_output_in_order() {
        let mut out = vec![0.0; 12];
        for_each_chunk(&mut out, 4, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 4 + j) as f64;
            }
        });
        assert_eq!(out, (0..12).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let run = || {
            let mut out = vec![0.0; 1000];
            for_each_chunk(&mut out, 7, |i, c| {
                let mut acc = i as f64;
                for v in c.iter_mut() {
                    acc = acc * 1.0001 + 0.1;
                    *v = acc;
                }
            });
            out
        };
        let par = run();
        let seq = with_sequential(run);
        assert_eq!(par, seq);
    }
}
