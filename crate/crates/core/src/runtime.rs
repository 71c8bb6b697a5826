use std::sync::OnceLock;

/// Worker-thread cap, resolved once per process.
///
/// `PFSEG_THREADS=0` (or `1`) forces the serial conformance path; unset
/// defaults to the machine's available parallelism. Parallel and serial
/// execution produce bitwise-identical tensors — workers only ever get
/// disjoint output planes and every per-element summation order is fixed —
/// so the cap is purely a scheduling knob.
pub fn thread_limit() -> usize {
    static LIMIT: OnceLock<usize> = OnceLock::new();
    *LIMIT.get_or_init(|| {
        match std::env::var("PFSEG_THREADS") {
            Ok(s) => match s.trim().parse::<usize>() {
                Ok(0) | Err(_) => 1,
                Ok(n) => n,
            },
            Err(_) => std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
        }
    })
}

pub(crate) fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = thread_limit();
        if n <= 1 {
            None
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .ok()
        }
    })
    .as_ref()
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len` slices of
/// `data`, in parallel when a pool is configured. Chunks are disjoint, so
/// results cannot depend on the schedule.
pub(crate) fn for_each_chunk_mut<S: Send, F>(data: &mut [S], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [S]) + Sync,
{
    debug_assert!(chunk_len > 0 && data.len() % chunk_len == 0);
    match pool() {
        Some(p) => p.install(|| {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
        }),
        None => {
            for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
                f(i, chunk);
            }
        }
    }
}
