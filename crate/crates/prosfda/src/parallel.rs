//! Ordered map over a slice of work items, parallel when the `parallel`
//! feature is enabled and sequential otherwise.
//!
//! Every per-item closure in this crate is pure, and callers fold the
//! returned Vec in index order, so the parallel and sequential paths
//! produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order. Dispatches on the `parallel`
/// feature.
pub fn map_ordered<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_ordered_par(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_ordered_seq(items, f)
    }
}

/// Sequential path; always compiled so benchmarks can compare against it.
pub fn map_ordered_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Rayon path. Indexed collect preserves item order.
#[cfg(feature = "parallel")]
pub fn map_ordered_par<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_map_preserves_index_order() {
        let items: Vec<u64> = (0..64).collect();
        let out = map_ordered(&items, |&x| x * x);
        let expected: Vec<u64> = items.iter().map(|&x| x * x).collect();
        assert_eq!(out, expected);
        assert_eq!(map_ordered_seq(&items, |&x| x * x), expected);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let items: Vec<f64> = (0..257).map(|i| i as f64 * 0.7321).collect();
        let f = |x: &f64| (x.sin() * 1e6).mul_add(*x, x.cos());
        let par: Vec<f64> = map_ordered_par(&items, f);
        let seq: Vec<f64> = map_ordered_seq(&items, f);
        assert!(par.iter().zip(&seq).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
