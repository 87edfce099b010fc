//! Deterministic chunked reductions.
//!
//! Work is cut into fixed-size chunks independent of the thread count, each
//! chunk is reduced on its own, and partial results are merged pairwise in
//! chunk order. Results are therefore bit-identical for any pool size.

use rayon::prelude::*;

pub fn chunked_reduce<T, M, C>(n: usize, chunk: usize, map: M, combine: C) -> Option<T>
where
    T: Send,
    M: Fn(std::ops::Range<usize>) -> T + Sync,
    C: Fn(T, T) -> T + Sync,
{
    let chunks = n.div_ceil(chunk);
    let parts: Vec<T> = (0..chunks).into_par_iter().map(|c| map(c * chunk..((c + 1) * chunk).min(n))).collect();
    pairwise(parts, &combine)
}

fn pairwise<T, C: Fn(T, T) -> T>(mut parts: Vec<T>, combine: &C) -> Option<T> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

/// Element-wise sum of two equal-length vectors, reusing the first.
pub fn add_into(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_of_pool_size() {
        let f = |r: std::ops::Range<usize>| r.map(|i| (i as f64).sin()).sum::<f64>();
        let a = chunked_reduce(100_003, 1000, f, |x, y| x + y).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| chunked_reduce(100_003, 1000, f, |x, y| x + y).unwrap());
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(chunked_reduce(0, 10, f, |x, y| x + y).is_none());
    }
}
