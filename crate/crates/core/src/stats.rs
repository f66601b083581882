//! Order statistics with linear interpolation between closest ranks.

use num_traits::Float;

/// Percentile `p` (0..=100) of an ascending slice.
///
/// Uses rank `p / 100 * (n - 1)` with linear interpolation between the
/// two neighbouring order statistics. Returns `None` for an empty slice.
pub fn percentile_sorted<T: Float>(sorted: &[T], p: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let p = p.clamp(0.0, 100.0);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = T::from(rank - lo as f64)?;
    let a = sorted[lo];
    let b = sorted[hi];
    if lo == hi {
        Some(a)
    } else {
        Some(a + (b - a) * frac)
    }
}

/// Sorts a copy of `values` and evaluates every requested percentile.
pub fn percentiles<T: Float>(values: &[T], ps: &[f64]) -> Option<Vec<T>> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ps.iter().map(|&p| percentile_sorted(&sorted, p)).collect()
}
