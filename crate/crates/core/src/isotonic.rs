//! Weighted isotonic regression by pool-adjacent-violators.

use crate::error::{Error, Result};

/// Weighted least-squares projection of `values` onto nondecreasing sequences.
pub fn isotonic_means(values: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    if values.len() != weights.len() {
        return Err(Error::contract("values and weights must have equal length"));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::contract("isotonic weights must be positive and finite"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("isotonic values must be finite"));
    }

    // Stack of pooled blocks: (weighted mean, total weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        let mut cur = (v, w, 1usize);
        while let Some(&(pm, pw, pl)) = blocks.last() {
            if pm <= cur.0 {
                break;
            }
            blocks.pop();
            let tw = pw + cur.1;
            cur = ((pm * pw + cur.0 * cur.1) / tw, tw, pl + cur.2);
        }
        blocks.push(cur);
    }

    let mut out = Vec::with_capacity(values.len());
    for (mean, _, len) in blocks {
        out.extend(std::iter::repeat_n(mean, len));
    }
    Ok(out)
}

/// Convenience wrapper taking integer group sizes as weights.
pub fn isotonic_group_means(means: &[f64], n: &[usize]) -> Result<Vec<f64>> {
    let w: Vec<f64> = n.iter().map(|&v| v as f64).collect();
    isotonic_means(means, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive search over all partitions into contiguous blocks whose
    /// weighted block means are nondecreasing.
    fn brute_force(values: &[f64], weights: &[f64]) -> Vec<f64> {
        let k = values.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0u32..(1 << (k - 1)) {
            let mut fit = Vec::with_capacity(k);
            let mut start = 0;
            let mut ok = true;
            let mut last = f64::NEG_INFINITY;
            for end in 1..=k {
                let cut = end == k || mask & (1 << (end - 1)) != 0;
                if !cut {
                    continue;
                }
                let w: f64 = weights[start..end].iter().sum();
                let m = values[start..end].iter().zip(&weights[start..end]).map(|(v, w)| v * w).sum::<f64>() / w;
                if m < last - 1e-12 {
                    ok = false;
                    break;
                }
                last = m;
                fit.extend(std::iter::repeat_n(m, end - start));
                start = end;
            }
            if !ok {
                continue;
            }
            let sse: f64 = values.iter().zip(&fit).zip(weights).map(|((v, f), w)| w * (v - f) * (v - f)).sum();
            if best.as_ref().is_none_or(|(b, _)| sse < *b) {
                best = Some((sse, fit));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn monotone_input_is_unchanged() {
        let v = [0.52, 1.09, 1.70];
        assert_eq!(isotonic_means(&v, &[1.0; 3]).unwrap(), v.to_vec());
    }

    #[test]
    fn single_violator_is_pooled() {
        assert_eq!(isotonic_means(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn stage_one_means_match_exhaustive_search() {
        let v = [0.52, 0.47, 1.09, 1.70, 0.45];
        let w = [24.0; 5];
        let got = isotonic_means(&v, &w).unwrap();
        let want = brute_force(&v, &w);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!((got[0] - 0.495).abs() < 1e-12 && (got[4] - 1.08).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_weights() {
        assert!(isotonic_means(&[1.0, 2.0], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn equals_brute_force_for_small_k(
            data in prop::collection::vec((-5.0f64..5.0, 0.5f64..20.0), 2..=6)
        ) {
            let (v, w): (Vec<f64>, Vec<f64>) = data.into_iter().unzip();
            let got = isotonic_means(&v, &w).unwrap();
            let want = brute_force(&v, &w);
            for (g, e) in got.iter().zip(&want) {
                prop_assert!((g - e).abs() < 1e-9);
            }
        }

        #[test]
        fn monotone_mean_preserving_idempotent(
            data in prop::collection::vec((-5.0f64..5.0, 1usize..50), 2..12)
        ) {
            let (v, n): (Vec<f64>, Vec<usize>) = data.into_iter().unzip();
            let fit = isotonic_group_means(&v, &n).unwrap();
            prop_assert!(fit.windows(2).all(|p| p[0] <= p[1] + 1e-12));
            let tot: f64 = n.iter().map(|&x| x as f64).sum();
            let m0 = v.iter().zip(&n).map(|(a, &b)| a * b as f64).sum::<f64>() / tot;
            let m1 = fit.iter().zip(&n).map(|(a, &b)| a * b as f64).sum::<f64>() / tot;
            prop_assert!((m0 - m1).abs() < 1e-10);
            let again = isotonic_group_means(&fit, &n).unwrap();
            for (a, b) in fit.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
