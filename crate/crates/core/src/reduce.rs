//! Order-fixed summation so loss values are bitwise reproducible.

const LEAF: usize = 64;

/// Pairwise (tree) sum over a fixed tiling of the input.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= LEAF {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Pairwise sum of `f(i)` for `i in 0..n` without materialising the terms
/// for large inputs more than one leaf at a time.
pub fn pairwise_sum_by(n: usize, f: &impl Fn(usize) -> f64) -> f64 {
    fn rec(lo: usize, hi: usize, f: &impl Fn(usize) -> f64) -> f64 {
        if hi - lo <= LEAF {
            return (lo..hi).map(f).sum();
        }
        let mid = lo + (hi - lo) / 2;
        rec(lo, mid, f) + rec(mid, hi, f)
    }
    rec(0, n, f)
}
