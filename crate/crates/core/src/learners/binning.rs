//! Per-feature quantile bins for the histogram learner.

/// Split point between two consecutive distinct values, guaranteed to send
/// `lo` left and `hi` right under the `x <= t` rule.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m >= hi {
        lo
    } else {
        m
    }
}

/// Upper bin edges for one feature column. With at most `max_bins` distinct
/// values every value gets its own bin; otherwise cuts are placed at
/// approximately equal-count quantiles, never inside a run of equal values.
pub fn compute_bin_edges(column: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct: Vec<(f64, usize)> = Vec::new();
    for v in sorted {
        match distinct.last_mut() {
            Some((d, c)) if *d == v => *c += 1,
            _ => distinct.push((v, 1)),
        }
    }
    if distinct.len() <= max_bins {
        return distinct.windows(2).map(|w| midpoint(w[0].0, w[1].0)).collect();
    }
    let n = column.len() as f64;
    let per_bin = n / max_bins as f64;
    let mut edges = Vec::with_capacity(max_bins - 1);
    let mut cum = 0usize;
    let mut next = 1usize;
    for k in 0..distinct.len() - 1 {
        cum += distinct[k].1;
        if cum as f64 >= next as f64 * per_bin {
            edges.push(midpoint(distinct[k].0, distinct[k + 1].0));
            while next as f64 * per_bin <= cum as f64 {
                next += 1;
            }
            if edges.len() == max_bins - 1 {
                break;
            }
        }
    }
    edges
}

/// Bin index of `x`: the number of edges strictly below it.
pub fn bin_index(edges: &[f64], x: f64) -> u8 {
    edges.partition_point(|&e| e < x) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn distinct_values_get_own_bins() {
        let e = compute_bin_edges(&[3.0, 1.0, 2.0, 2.0, 1.0], 255);
        assert_eq!(e, vec![1.5, 2.5]);
        assert_eq!(bin_index(&e, 1.0), 0);
        assert_eq!(bin_index(&e, 2.0), 1);
        assert_eq!(bin_index(&e, 3.0), 2);
        assert!(compute_bin_edges(&[4.0; 10], 255).is_empty());
    }

    #[test]
    fn quantile_bins_capped() {
        let col: Vec<f64> = (0..10_000).map(|i| (i as f64).sqrt()).collect();
        let e = compute_bin_edges(&col, 255);
        assert!(e.len() <= 254 && e.len() > 200);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
        let mut counts = vec![0usize; e.len() + 1];
        for &v in &col {
            counts[bin_index(&e, v) as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0 && c < 100));
    }

    #[test]
    fn adjacent_floats_separate() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let m = midpoint(a, b);
        assert!(a <= m && m < b);
    }

    proptest! {
        #[test]
        fn bins_respect_order(values in prop::collection::vec(-1e3f64..1e3, 2..400), bins in 2usize..256) {
            let e = compute_bin_edges(&values, bins);
            prop_assert!(e.len() < bins);
            for &a in &values {
                for &b in values.iter().take(20) {
                    if a < b {
                        prop_assert!(bin_index(&e, a) <= bin_index(&e, b));
                    }
                }
            }
        }
    }
}
