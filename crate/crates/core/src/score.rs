//! Tabulated p-value scores of a t statistic.
//!
//! Fisher and inverse-normal combinations transform every contrast statistic
//! through `−2 ln P(T > t)` or `Φ⁻¹(1 − P(T > t))`. Calibrating them by Monte
//! Carlo evaluates these millions of times, so each (df, floor) pair gets a
//! cubic Hermite table built once and shared process-wide. Observed and
//! simulated statistics go through the same table, so p-values stay exact
//! for the tabulated statistic.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::mvdist::univariate::{norm_isf, norm_pdf, t_pdf, t_sf};
use crate::mvdist::Df;

/// Tabulated range `[-RANGE, RANGE]`; outside it scores are computed directly.
const RANGE: f64 = 40.0;
const STEPS_PER_UNIT: f64 = 128.0;

#[derive(Debug)]
pub struct ScoreTable {
    df: Df,
    floor: f64,
    /// `(value, derivative)` at each node for `−2 ln p`.
    fisher: Vec<(f64, f64)>,
    /// Same for `Φ⁻¹(1 − p)`.
    normal: Vec<(f64, f64)>,
}

type Key = (Option<u32>, u64);

fn cache() -> &'static Mutex<HashMap<Key, Arc<ScoreTable>>> {
    static TABLES: OnceLock<Mutex<HashMap<Key, Arc<ScoreTable>>>> = OnceLock::new();
    TABLES.get_or_init(|| Mutex::new(HashMap::new()))
}

impl ScoreTable {
    /// The shared table for `(df, floor)`, built on first use.
    pub fn shared(df: Df, floor: f64) -> Arc<ScoreTable> {
        let key = (
            match df {
                Df::Finite(nu) => Some(nu),
                Df::Infinite => None,
            },
            floor.to_bits(),
        );
        let mut map = cache().lock().unwrap_or_else(|e| e.into_inner());
        map.entry(key).or_insert_with(|| Arc::new(Self::build(df, floor))).clone()
    }

    fn build(df: Df, floor: f64) -> Self {
        let nodes = (2.0 * RANGE * STEPS_PER_UNIT) as usize + 1;
        let mut fisher = Vec::with_capacity(nodes);
        let mut normal = Vec::with_capacity(nodes);
        for i in 0..nodes {
            let t = -RANGE + i as f64 / STEPS_PER_UNIT;
            let dens = t_pdf(t, df);
            let sf = t_sf(t, df);
            fisher.push(if sf > floor {
                (-2.0 * sf.ln(), 2.0 * dens / sf)
            } else {
                (-2.0 * floor.ln(), 0.0)
            });
            let z = exact_normal(t, df, floor);
            let lower = t_sf(-t, df);
            normal.push(if sf > floor && lower > floor {
                (z, dens / norm_pdf(z))
            } else {
                (z, 0.0)
            });
        }
        Self { df, floor, fisher, normal }
    }

    pub fn fisher(&self, t: f64) -> f64 {
        interpolate(&self.fisher, t).unwrap_or_else(|| -2.0 * t_sf(t, self.df).max(self.floor).ln())
    }

    pub fn normal(&self, t: f64) -> f64 {
        interpolate(&self.normal, t).unwrap_or_else(|| exact_normal(t, self.df, self.floor))
    }
}

fn exact_normal(t: f64, df: Df, floor: f64) -> f64 {
    if t >= 0.0 {
        norm_isf(t_sf(t, df).max(floor))
    } else {
        -norm_isf(t_sf(-t, df).max(floor))
    }
}

fn interpolate(nodes: &[(f64, f64)], t: f64) -> Option<f64> {
    let x = (t + RANGE) * STEPS_PER_UNIT;
    if !(x >= 0.0) || x >= (nodes.len() - 1) as f64 {
        return None;
    }
    let i = x as usize;
    let u = x - i as f64;
    let h = 1.0 / STEPS_PER_UNIT;
    let ((y0, d0), (y1, d1)) = (nodes[i], nodes[i + 1]);
    let u2 = u * u;
    let u3 = u2 * u;
    Some(
        (2.0 * u3 - 3.0 * u2 + 1.0) * y0
            + (u3 - 2.0 * u2 + u) * h * d0
            + (-2.0 * u3 + 3.0 * u2) * y1
            + (u3 - u2) * h * d1,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_matches_direct_scores() {
        for df in [Df::Finite(2), Df::Finite(9), Df::Finite(115), Df::Infinite] {
            let table = ScoreTable::shared(df, 1e-12);
            // Away from the floor, where the clamped score has a kink.
            for i in 0..3001 {
                let t = -6.0 + i as f64 * 0.004 + 1e-4;
                let f = -2.0 * t_sf(t, df).max(1e-12).ln();
                let n = exact_normal(t, df, 1e-12);
                assert!((table.fisher(t) - f).abs() < 1e-7 * (1.0 + f), "{df:?} {t}");
                assert!((table.normal(t) - n).abs() < 1e-7, "{df:?} {t}");
            }
            assert_eq!(table.fisher(50.0), -2.0 * t_sf(50.0, df).max(1e-12).ln());
        }
    }
}
