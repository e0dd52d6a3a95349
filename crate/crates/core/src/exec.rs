//! Execution-mode plumbing: data-parallel map with a sequential fallback.
//!
//! Batch work (per-sample gradients, rendering, candidate sweeps) is expressed
//! as an indexed map followed by an ordered reduction. The parallel path runs
//! the map on rayon but reduces in index order over fixed-size chunks, so the
//! floating-point result is bit-identical to the sequential path.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl ExecMode {
    /// Parallel when the crate was built with the `parallel` feature,
    /// sequential otherwise.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

impl Default for ExecMode {
    fn default() -> Self {
        ExecMode::auto()
    }
}

impl std::str::FromStr for ExecMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(ExecMode::Sequential),
            "parallel" => Ok(ExecMode::Parallel),
            other => Err(format!("unknown exec mode `{other}` (expected sequential|parallel)")),
        }
    }
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => {
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
    }
}

/// Map then fold in a fixed order. `fold` is applied to results in strictly
/// ascending index order regardless of mode, keeping reductions deterministic.
pub fn map_reduce_ordered<T, A, F, G>(mode: ExecMode, n: usize, init: A, map: F, mut fold: G) -> A
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
    G: FnMut(A, T) -> A,
{
    let items = map_indexed(mode, n, map);
    let mut acc = init;
    for item in items {
        acc = fold(acc, item);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_bitwise() {
        // Sum of values whose naive parallel reduction would reorder floats.
        let vals: Vec<f64> = (0..257).map(|i| ((i * 37) % 101) as f64 * 1e-3 + 1.0 / (i + 1) as f64).collect();
        let run = |mode| {
            map_reduce_ordered(mode, vals.len(), 0.0_f64, |i| vals[i] * vals[i], |a, b| a + b)
        };
        let seq = run(ExecMode::Sequential);
        let par = run(ExecMode::Parallel);
        assert_eq!(seq.to_bits(), par.to_bits());
    }

    #[test]
    fn map_preserves_order() {
        let out = map_indexed(ExecMode::Parallel, 100, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }
}
