//! Hartigan–Hartigan dip statistic and a bootstrap unimodality test.
//!
//! The dip of an empirical CDF `F` is the smallest sup-norm distance from `F`
//! to any unimodal CDF: convex up to the mode, concave after it, with an atom
//! permitted at the mode. Feasibility of a fit at deviation `d` for a fixed
//! mode position decomposes into
//!
//! * a convex function threading the tube `[F_incl - d, F_before + d]` at the
//!   sample points left of the mode (feasible iff the greatest convex
//!   minorant of the ceilings clears the floors),
//! * the mirrored concave condition right of the mode,
//! * a junction condition: some feasible left fit must end no higher than
//!   some feasible right fit starts (the mode atom only jumps upward). The
//!   extremal end/start values follow from slope-chaining certificates over
//!   point pairs.
//!
//! The minimal `d` ignoring the junction is a closed form over convex hulls
//! of the ECDF staircase corners and is unimodal in the mode candidate, so a
//! binary search plus outward expansion with lower-bound pruning finds the
//! exact minimum; candidates that survive pruning are solved by bisection on
//! the full feasibility test.

use super::DepthDistError;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DipResult {
    pub dip: f64,
    pub p_value: f64,
    pub n_samples: usize,
    pub bootstrap: usize,
}

/// One distinct sample value with the ECDF just before and at it.
#[derive(Debug, Clone, Copy)]
struct Group {
    x: f64,
    /// ECDF left limit at x (fraction strictly below).
    before: f64,
    /// ECDF value at x (fraction at or below).
    incl: f64,
}

pub fn dip_statistic(samples: &[f64]) -> Result<f64, DepthDistError> {
    let mut xs: Vec<f64> = samples.iter().copied().filter(|x| x.is_finite()).collect();
    if xs.len() < 4 {
        return Err(DepthDistError::InsufficientData { needed: 4, got: xs.len() });
    }
    xs.sort_by(f64::total_cmp);
    Ok(dip_of_sorted(&xs))
}

pub(crate) fn dip_of_sorted(xs: &[f64]) -> f64 {
    let groups = group_sorted(xs);
    if groups.len() < 2 {
        return 0.0;
    }
    // Candidate c covers, in order: mode before all data (0), then per
    // distinct value t: mode at x_t (2t+1) and mode in the gap after x_t
    // (2t+2). The junction-free deviation is non-decreasing in c on the left
    // side and non-increasing on the right, so max(left, right) is
    // quasiconvex in c.
    let last = 2 * groups.len();
    let side_bound =
        |c: usize| 0.5 * left_deviation(&groups, c).max(right_deviation(&groups, c));
    let pred = |c: usize| left_deviation(&groups, c) >= right_deviation(&groups, c);
    let mut lo = 0usize;
    let mut hi = last;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let c0 = lo;

    // Expand outward from the side-optimal candidate; side bounds are valid
    // lower bounds on the full (junction-aware) per-candidate dip and grow
    // monotonically away from c0 on each flank, so each flank scan stops
    // once its bound reaches the incumbent. Candidates inside the window
    // cost one feasibility probe at the incumbent unless they improve it.
    let mut best = candidate_dip(&groups, c0, side_bound(c0));
    for flank in [false, true] {
        let mut c = c0;
        loop {
            let done = if flank { c >= last } else { c == 0 };
            if done {
                break;
            }
            c = if flank { c + 1 } else { c - 1 };
            let lb = side_bound(c);
            if lb >= best - 1e-12 {
                break;
            }
            let target = best - 1e-12;
            if full_feasible(&groups, c, target) {
                // This candidate beats the incumbent; pin it down.
                let mut lo = lb;
                let mut hi = target;
                for _ in 0..45 {
                    let mid = 0.5 * (lo + hi);
                    if full_feasible(&groups, c, mid) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                best = hi;
            }
        }
    }
    best
}

fn group_sorted(xs: &[f64]) -> Vec<Group> {
    let n = xs.len() as f64;
    let mut groups: Vec<Group> = Vec::new();
    let mut i = 0;
    while i < xs.len() {
        let mut j = i;
        while j + 1 < xs.len() && xs[j + 1] == xs[i] {
            j += 1;
        }
        groups.push(Group { x: xs[i], before: i as f64 / n, incl: (j + 1) as f64 / n });
        i = j + 1;
    }
    groups
}

// ---------------------------------------------------------------------------
// Junction-free closed forms (pruning bounds and search direction)
// ---------------------------------------------------------------------------

/// A staircase corner pair feeding the hull deviation: the hull hugs
/// `hull_y`, the fit must reach `target_y` within the deviation.
#[derive(Debug, Clone, Copy)]
struct DevPoint {
    x: f64,
    hull_y: f64,
    target_y: f64,
}

/// Convex-side deviation (twice the minimal sup-deviation) for candidate `c`.
fn left_deviation(groups: &[Group], c: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    let t = (c - 1) / 2;
    let mut pts: Vec<DevPoint> = Vec::with_capacity(t + 1);
    for g in &groups[..t] {
        pts.push(DevPoint { x: g.x, hull_y: g.before, target_y: g.incl });
    }
    let g = groups[t];
    if c % 2 == 1 {
        pts.push(DevPoint { x: g.x, hull_y: g.before, target_y: g.before });
    } else {
        pts.push(DevPoint { x: g.x, hull_y: g.before, target_y: g.incl });
    }
    convex_deviation(&pts)
}

/// Concave-side deviation for candidate `c`.
fn right_deviation(groups: &[Group], c: usize) -> f64 {
    let k = groups.len();
    let mut pts: Vec<DevPoint> = Vec::new();
    let start = if c == 0 {
        0
    } else {
        let t = (c - 1) / 2;
        if c % 2 == 1 {
            let g = groups[t];
            pts.push(DevPoint { x: g.x, hull_y: g.incl, target_y: g.incl });
        }
        t + 1
    };
    for g in &groups[start..k] {
        pts.push(DevPoint { x: g.x, hull_y: g.incl, target_y: g.before });
    }
    concave_deviation(&pts)
}

/// `max_j target_j - GCM(hull_y)(x_j)`.
fn convex_deviation(pts: &[DevPoint]) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    let hull = lower_hull(pts.len(), |i| (pts[i].x, pts[i].hull_y));
    let mut dev = 0.0f64;
    let mut seg = 0usize;
    for p in pts {
        while seg + 1 < hull.len() && pts[hull[seg + 1]].x <= p.x {
            seg += 1;
        }
        let hv = hull_value(&hull, seg, p.x, |i| (pts[i].x, pts[i].hull_y));
        dev = dev.max(p.target_y - hv);
    }
    dev
}

fn concave_deviation(pts: &[DevPoint]) -> f64 {
    let flipped: Vec<DevPoint> = pts
        .iter()
        .map(|p| DevPoint { x: p.x, hull_y: -p.hull_y, target_y: -p.target_y })
        .collect();
    convex_deviation(&flipped)
}

/// Indices of the lower convex hull (slopes non-decreasing).
fn lower_hull(n: usize, point: impl Fn(usize) -> (f64, f64)) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        let (xi, yi) = point(i);
        while hull.len() >= 2 {
            let (xa, ya) = point(hull[hull.len() - 2]);
            let (xb, yb) = point(hull[hull.len() - 1]);
            if (yb - ya) * (xi - xb) >= (yi - yb) * (xb - xa) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull
}

fn hull_value(
    hull: &[usize],
    seg: usize,
    x: f64,
    point: impl Fn(usize) -> (f64, f64),
) -> f64 {
    if seg + 1 < hull.len() {
        let (xa, ya) = point(hull[seg]);
        let (xb, yb) = point(hull[seg + 1]);
        if xb > xa {
            ya + (yb - ya) * (x - xa) / (xb - xa)
        } else {
            ya
        }
    } else {
        point(hull[seg]).1
    }
}

// ---------------------------------------------------------------------------
// Full per-candidate feasibility: capped tubes plus the junction bound
// ---------------------------------------------------------------------------

/// Tube constraints `lo <= g(x) <= hi` at sample points, clamped to [0, 1].
struct Tube {
    x: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn left_tube(groups: &[Group], c: usize, d: f64) -> Tube {
    let mut t = Tube { x: vec![], lo: vec![], hi: vec![] };
    if c == 0 {
        return t;
    }
    let tt = (c - 1) / 2;
    for g in &groups[..tt] {
        t.x.push(g.x);
        t.lo.push((g.incl - d).max(0.0));
        t.hi.push((g.before + d).min(1.0));
    }
    let g = groups[tt];
    t.x.push(g.x);
    if c % 2 == 1 {
        t.lo.push((g.before - d).max(0.0));
        t.hi.push((g.before + d).min(1.0));
    } else {
        t.lo.push((g.incl - d).max(0.0));
        t.hi.push((g.before + d).min(1.0));
    }
    t
}

fn right_tube(groups: &[Group], c: usize, d: f64) -> Tube {
    let mut t = Tube { x: vec![], lo: vec![], hi: vec![] };
    let start = if c == 0 {
        0
    } else {
        let tt = (c - 1) / 2;
        if c % 2 == 1 {
            let g = groups[tt];
            t.x.push(g.x);
            t.lo.push((g.incl - d).max(0.0));
            t.hi.push((g.incl + d).min(1.0));
        }
        tt + 1
    };
    for g in &groups[start..] {
        t.x.push(g.x);
        t.lo.push((g.incl - d).max(0.0));
        t.hi.push((g.before + d).min(1.0));
    }
    t
}

fn convex_tube_feasible(t: &Tube) -> bool {
    if t.x.is_empty() {
        return true;
    }
    if t.lo.iter().zip(&t.hi).any(|(l, h)| l > h) {
        return false;
    }
    let hull = lower_hull(t.x.len(), |i| (t.x[i], t.hi[i]));
    let mut seg = 0usize;
    for j in 0..t.x.len() {
        while seg + 1 < hull.len() && t.x[hull[seg + 1]] <= t.x[j] {
            seg += 1;
        }
        let hv = hull_value(&hull, seg, t.x[j], |i| (t.x[i], t.hi[i]));
        if hv + 1e-13 < t.lo[j] {
            return false;
        }
    }
    true
}

fn concave_tube_feasible(t: &Tube) -> bool {
    let flipped = Tube {
        x: t.x.clone(),
        lo: t.hi.iter().map(|v| -v).collect(),
        hi: t.lo.iter().map(|v| -v).collect(),
    };
    convex_tube_feasible(&flipped)
}

/// Minimal end value of a convex fit through the tube: the largest
/// slope-chaining certificate `lo_j + max_{i<j}((lo_j - hi_i)/(x_j - x_i))
/// * (x_end - x_j)`, with the tangent maximized over the lower hull of the
/// ceiling points.
fn min_convex_end(t: &Tube) -> f64 {
    let k = t.x.len() - 1;
    let mut a_min = t.lo[k];
    if k == 0 {
        return a_min;
    }
    let mut hull: Vec<usize> = Vec::with_capacity(k);
    for j in 1..=k {
        // Hull over ceiling points strictly left of j.
        let i = j - 1;
        let (xi, yi) = (t.x[i], t.hi[i]);
        while hull.len() >= 2 {
            let (xa, ya) = (t.x[hull[hull.len() - 2]], t.hi[hull[hull.len() - 2]]);
            let (xb, yb) = (t.x[hull[hull.len() - 1]], t.hi[hull[hull.len() - 1]]);
            if (yb - ya) * (xi - xb) >= (yi - yb) * (xb - xa) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
        let slope = max_slope_to(&hull, t, t.x[j], t.lo[j]);
        a_min = a_min.max(t.lo[j] + slope * (t.x[k] - t.x[j]));
    }
    a_min
}

/// Steepest slope from any hull ceiling point up to the query `(xq, yq)`;
/// slope over hull index is unimodal, so a local ternary scan suffices.
fn max_slope_to(hull: &[usize], t: &Tube, xq: f64, yq: f64) -> f64 {
    let slope_at = |h: usize| {
        let i = hull[h];
        (yq - t.hi[i]) / (xq - t.x[i])
    };
    let (mut lo, mut hi) = (0usize, hull.len() - 1);
    while hi - lo > 2 {
        let m1 = lo + (hi - lo) / 3;
        let m2 = hi - (hi - lo) / 3;
        if slope_at(m1) < slope_at(m2) {
            lo = m1 + 1;
        } else {
            hi = m2;
        }
    }
    (lo..=hi).map(slope_at).fold(f64::NEG_INFINITY, f64::max)
}

/// Maximal start value of a concave fit: mirror of `min_convex_end`.
fn max_concave_start(t: &Tube) -> f64 {
    let n = t.x.len();
    let mirrored = Tube {
        x: (0..n).map(|i| -t.x[n - 1 - i]).collect(),
        lo: (0..n).map(|i| -t.hi[n - 1 - i]).collect(),
        hi: (0..n).map(|i| -t.lo[n - 1 - i]).collect(),
    };
    -min_convex_end(&mirrored)
}

fn full_feasible(groups: &[Group], c: usize, d: f64) -> bool {
    let lt = left_tube(groups, c, d);
    let rt = right_tube(groups, c, d);
    if !convex_tube_feasible(&lt) || !concave_tube_feasible(&rt) {
        return false;
    }
    if lt.x.is_empty() || rt.x.is_empty() {
        return true;
    }
    min_convex_end(&lt) <= max_concave_start(&rt) + 1e-13
}

/// Exact minimal deviation for one mode candidate: the junction-free side
/// bound when it is already feasible, otherwise bisection on the full
/// feasibility test above it.
fn candidate_dip(groups: &[Group], c: usize, side_lb: f64) -> f64 {
    let probe = side_lb * (1.0 + 1e-12) + 1e-15;
    if full_feasible(groups, c, probe) {
        return probe;
    }
    let mut lo = side_lb;
    let mut hi = 0.5f64;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if full_feasible(groups, c, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

// ---------------------------------------------------------------------------
// Bootstrap test
// ---------------------------------------------------------------------------

/// Bootstrap dip test against the uniform null. The p-value is the fraction
/// of `bootstrap` uniform samples of the same size whose dip is at least the
/// observed one. Deterministic under `seed` and independent of scheduling.
pub fn dip_test(
    samples: &[f64],
    bootstrap: usize,
    seed: u64,
) -> Result<DipResult, DepthDistError> {
    if bootstrap < 100 {
        return Err(DepthDistError::BadParameter("bootstrap count must be at least 100".into()));
    }
    let observed = dip_statistic(samples)?;
    let n = samples.iter().filter(|x| x.is_finite()).count();

    let exceed: usize = (0..bootstrap)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut xs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            xs.sort_by(f64::total_cmp);
            usize::from(dip_of_sorted(&xs) >= observed)
        })
        .sum();

    Ok(DipResult {
        dip: observed,
        p_value: exceed as f64 / bootstrap as f64,
        n_samples: n,
        bootstrap,
    })
}
