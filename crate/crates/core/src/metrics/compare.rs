use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalised mean gap below which two samples count as equivalent.
pub const EQUIVALENCE_GAP: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistComparison {
    /// |mean_a − mean_b| / pooled standard deviation.
    pub mean_gap: f64,
    /// Probability that a draw from `a` exceeds one from `b` (ties count half).
    pub rank_statistic: f64,
    pub equivalent: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
    (m, v)
}

pub fn entropy_dist_compare(a: &[f64], b: &[f64]) -> Result<DistComparison> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("distribution comparison needs non-empty samples"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let pooled = ((va + vb) / 2.0).sqrt();
    let diff = (ma - mb).abs();
    let mean_gap = if diff == 0.0 {
        0.0
    } else if pooled == 0.0 {
        f64::INFINITY
    } else {
        diff / pooled
    };

    let mut sorted_b = b.to_vec();
    sorted_b.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &x in a {
        let below = sorted_b.partition_point(|&y| y < x);
        let not_above = sorted_b.partition_point(|&y| y <= x);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    let rank_statistic = wins / (a.len() as f64 * b.len() as f64);
    Ok(DistComparison { mean_gap, rank_statistic, equivalent: mean_gap < EQUIVALENCE_GAP })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorkit::RngStream;

    #[test]
    fn identical_samples() {
        let a = [0.1, 0.4, 0.2, 0.9];
        let c = entropy_dist_compare(&a, &a).unwrap();
        assert_eq!(c.mean_gap, 0.0);
        assert_eq!(c.rank_statistic, 0.5);
        assert!(c.equivalent);
    }

    #[test]
    fn shifted_normals_differ() {
        let mut r = RngStream::new(2);
        let a: Vec<f64> = (0..500).map(|_| r.normal()).collect();
        let b: Vec<f64> = (0..500).map(|_| 5.0 + r.normal()).collect();
        let c = entropy_dist_compare(&a, &b).unwrap();
        assert!(!c.equivalent);
        assert!(c.mean_gap > 4.0);
        assert!(c.rank_statistic < 0.01);
    }

    #[test]
    fn empty_input() {
        assert!(entropy_dist_compare(&[], &[1.0]).is_err());
    }
}
