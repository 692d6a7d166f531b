//! Order-fixed reductions.
//!
//! Index ranges are cut into chunks of [`CHUNK`] elements regardless of the
//! number of worker threads. Each chunk is summed sequentially and the chunk
//! partials are folded left to right, so results are bit-identical for any
//! thread count.

use rayon::prelude::*;

pub const CHUNK: usize = 4096;

fn chunk_count(n: usize) -> usize {
    n.div_ceil(CHUNK)
}

/// Sum of `f(i)` for `i in 0..n`.
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..chunk_count(n))
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            let mut acc = 0.0;
            for i in c * CHUNK..end {
                acc += f(i);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Elementwise sum of `width`-vectors; `f(i, acc)` adds row `i` into `acc`.
pub fn sum_vec_by<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<f64>> = (0..chunk_count(n))
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            let mut acc = vec![0.0; width];
            for i in c * CHUNK..end {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Count of indices satisfying `pred`.
pub fn count_by<F>(n: usize, pred: F) -> usize
where
    F: Fn(usize) -> bool + Sync,
{
    (0..n).into_par_iter().filter(|&i| pred(i)).count()
}
