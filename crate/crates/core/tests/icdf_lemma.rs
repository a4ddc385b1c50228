//! Numeric check of the aggregation lemma: blending depth-shifted inverse
//! CDFs keeps the density stationary point at the same transmittance level.
//!
//! For one surface type, per-pixel depth distributions are shifted copies of
//! each other, so their quantile curves (depth as a function of transmittance)
//! differ by a constant. Any convex blend of two such curves induces a depth
//! density whose stationary point sits at the same transmittance threshold,
//! which justifies detecting layers on per-view mean depths.

use statrs::distribution::{ContinuousCDF, Normal};

/// Quantile curve of the depth distribution as a function of transmittance:
/// T = 1 - CDF(d), so d(T) = Q(1 - T).
fn icdf(normal: &Normal, t: f64) -> f64 {
    normal.inverse_cdf(1.0 - t)
}

/// Density of the blended distribution at grid index i, via central
/// differences on the blended quantile curve: p = -dT/dd.
fn blended_density(ts: &[f64], ds: &[f64]) -> Vec<f64> {
    (1..ts.len() - 1)
        .map(|i| -(ts[i + 1] - ts[i - 1]) / (ds[i + 1] - ds[i - 1]))
        .collect()
}

#[test]
fn blended_icdf_keeps_stationary_threshold() {
    let normal = Normal::new(2.0, 0.3).unwrap();
    let shift = 0.85;
    let m = 4001;
    let ts: Vec<f64> = (1..m).map(|i| i as f64 / m as f64).collect();

    // The base density peaks at the mean, i.e. at T = 0.5.
    let t_star = 0.5;

    for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let ds: Vec<f64> = ts
            .iter()
            .map(|t| {
                let d0 = icdf(&normal, *t);
                let d1 = d0 + shift;
                a * d0 + (1.0 - a) * d1
            })
            .collect();
        let p = blended_density(&ts, &ds);

        // dp/dd by finite differences, evaluated at T*.
        let star_idx = ts.iter().position(|t| (*t - t_star).abs() < 0.5 / m as f64).unwrap() - 1;
        let dp_at = |i: usize| (p[i + 1] - p[i - 1]) / (ds[i + 2] - ds[i]);
        let slope_at_star = dp_at(star_idx);
        let max_slope = (10..p.len() - 10)
            .map(dp_at)
            .fold(0.0f64, |acc, s| acc.max(s.abs()));
        assert!(
            slope_at_star.abs() <= 1e-3 * max_slope,
            "a={a}: density slope {slope_at_star} at T* vs max {max_slope}"
        );

        // And the blended density's argmax sits at T* as well.
        let argmax = (0..p.len()).max_by(|x, y| p[*x].total_cmp(&p[*y])).unwrap();
        assert!(
            (ts[argmax + 1] - t_star).abs() < 2e-3,
            "a={a}: density peaks at T={}",
            ts[argmax + 1]
        );
    }
}

#[test]
fn blended_step_icdf_keeps_modal_band() {
    // Step quantile curves from two shifted three-surface profiles: the
    // dominant threshold band keeps its location under blending.
    let steps = |shift: f64| -> Vec<(f64, f64)> {
        vec![(2.0 + shift, 0.45), (3.0 + shift, 0.35), (4.0 + shift, 0.20)]
    };
    let quantile = |surfaces: &[(f64, f64)], t: f64| -> f64 {
        // Walk transmittance down from 1; surface g covers (T-alpha..T].
        let mut upper = 1.0;
        for (d, mass) in surfaces {
            if t > upper - mass {
                return *d;
            }
            upper -= mass;
        }
        surfaces.last().unwrap().0
    };
    let s0 = steps(0.0);
    let s1 = steps(0.5);
    let n = 512;
    for a in [0.0, 0.3, 0.7, 1.0] {
        // Histogram the blended quantile over uniform thresholds.
        let mut counts = std::collections::BTreeMap::<i64, usize>::new();
        for k in 1..=n {
            let t = k as f64 / n as f64;
            let d = a * quantile(&s0, t) + (1.0 - a) * quantile(&s1, t);
            *counts.entry((d * 1e6).round() as i64) .or_default() += 1;
        }
        // The heaviest atom must carry the weight of the top surface band
        // regardless of the blend.
        let (&at, &count) = counts.iter().max_by_key(|(_, c)| **c).unwrap();
        let d = at as f64 / 1e6;
        let expect = a * 2.0 + (1.0 - a) * 2.5;
        assert!((d - expect).abs() < 1e-9, "a={a}: modal depth {d} vs {expect}");
        assert!((count as f64 / n as f64 - 0.45).abs() < 0.01);
    }
}
