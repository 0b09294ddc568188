//! Data-parallel helpers with a sequential fallback.
//!
//! The workloads that benefit from parallelism here are whole independent
//! tasks: sweep cells, test-set samples, distillation batch items, and Monte
//! Carlo batches. Individual latents are far too small to parallelize per
//! tensor op. With the `parallel` feature enabled (the default) `map` fans
//! out over rayon; without it, `map` is `map_seq`. Output order always
//! follows input order, so results are deterministic either way.

/// Map a function over items, in parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub fn map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

/// Map a function over items, in parallel when the `parallel` feature is on.
#[cfg(not(feature = "parallel"))]
pub fn map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    map_seq(items, f)
}

/// Always-sequential map, kept callable so benchmarks can compare modes.
pub fn map_seq<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let doubled = map(&items, |&x| x * 2);
        let doubled_seq = map_seq(&items, |&x| x * 2);
        assert_eq!(doubled, doubled_seq);
        assert_eq!(doubled[7], 14);
    }
}
