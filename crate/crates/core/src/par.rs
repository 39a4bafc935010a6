//! Order-preserving data-parallel helpers.
//!
//! Every helper returns results in input order, so callers that reduce the
//! output sequentially get the same bits with or without the `parallel`
//! feature.

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fallible order-preserving map. Returns the lowest-index failure.
pub fn try_map<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, (usize, E)>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    let results = map_range(items.len(), |i| f(&items[i]));
    let mut out = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        out.push(r.map_err(|e| (i, e))?);
    }
    Ok(out)
}

/// Runs `f` on a single worker. Used where measurements must mirror a
/// single-core deployment.
pub fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v: Vec<u32> = (0..1000).collect();
        assert_eq!(map(&v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn try_map_reports_first_failure() {
        let v: Vec<i32> = vec![1, 2, -3, 4, -5];
        let err = try_map(&v, |&x| if x < 0 { Err(x) } else { Ok(x) }).unwrap_err();
        assert_eq!(err, (2, -3));
    }
}
