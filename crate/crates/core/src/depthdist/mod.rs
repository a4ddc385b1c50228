//! Probability machinery over depth samples: kernel density estimation,
//! per-view aggregation of threshold depth maps, peak detection with a
//! prominence score, and Hartigan's dip test for unimodality.

mod dip;

pub use dip::{dip_statistic, dip_test, DipResult};

use crate::transmittance::{TStack, TransmittanceProfile, DEPTH_SENTINEL};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DepthDistError {
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("no threshold has any valid pixel")]
    EmptySequence,
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("validity mask requires per-pixel final transmittance, which the stack lacks")]
    MissingTFinal,
    #[error("degenerate profile: {0}")]
    DegenerateProfile(String),
}

// ---------------------------------------------------------------------------
// Kernel density estimation
// ---------------------------------------------------------------------------

/// Gaussian-kernel density on a uniform depth grid, renormalized so the
/// trapezoid integral over the grid is exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    grid_min: f64,
    grid_step: f64,
    density: Vec<f64>,
    bandwidth: f64,
}

impl DensityEstimate {
    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn grid_at(&self, i: usize) -> f64 {
        self.grid_min + self.grid_step * i as f64
    }

    pub fn grid_step(&self) -> f64 {
        self.grid_step
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.density, self.grid_step)
    }

    /// Cumulative distribution on the grid, non-decreasing in [0, 1].
    pub fn cdf(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.density.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in self.density.windows(2) {
            acc += 0.5 * (w[0] + w[1]) * self.grid_step;
            out.push(acc);
        }
        let total = acc.max(f64::MIN_POSITIVE);
        for v in &mut out {
            *v = (*v / total).clamp(0.0, 1.0);
        }
        out
    }

    /// Grid point of the global maximum.
    pub fn mode(&self) -> f64 {
        let mut best = 0;
        for (i, d) in self.density.iter().enumerate() {
            if *d > self.density[best] {
                best = i;
            }
        }
        self.grid_at(best)
    }
}

fn trapezoid(y: &[f64], step: f64) -> f64 {
    if y.len() < 2 {
        return 0.0;
    }
    let inner: f64 = y[1..y.len() - 1].iter().sum();
    (inner + 0.5 * (y[0] + y[y.len() - 1])) * step
}

/// Silverman's rule-of-thumb bandwidth for a Gaussian kernel.
fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let scale = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    0.9 * scale * n.powf(-0.2)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Gaussian KDE over depth samples. `bandwidth = None` uses Silverman's
/// rule; zero-variance samples fall back to a bandwidth of one grid step.
pub fn kde(
    samples: &[f64],
    bandwidth: Option<f64>,
    grid_size: usize,
) -> Result<DensityEstimate, DepthDistError> {
    if grid_size < 8 {
        return Err(DepthDistError::BadParameter("grid_size must be at least 8".into()));
    }
    let mut xs: Vec<f64> = samples.iter().copied().filter(|x| x.is_finite()).collect();
    if xs.len() < 2 {
        return Err(DepthDistError::InsufficientData { needed: 2, got: xs.len() });
    }
    xs.sort_by(f64::total_cmp);

    if let Some(h) = bandwidth {
        if !(h > 0.0 && h.is_finite()) {
            return Err(DepthDistError::BadParameter("bandwidth must be positive".into()));
        }
    }
    let mut h = bandwidth.unwrap_or_else(|| silverman_bandwidth(&xs));

    let (lo, hi);
    if h > 0.0 {
        lo = xs[0] - 4.0 * h;
        hi = xs[xs.len() - 1] + 4.0 * h;
    } else {
        // All samples identical: a sharp mode at that value.
        let v = xs[0];
        let half = (v.abs() * 1e-3).max(1e-6);
        lo = v - half;
        hi = v + half;
        h = (hi - lo) / (grid_size - 1) as f64;
    }
    let step = (hi - lo) / (grid_size - 1) as f64;

    let norm = 1.0 / (xs.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let mut density = vec![0.0f64; grid_size];
    for (i, d) in density.iter_mut().enumerate() {
        let g = lo + step * i as f64;
        let mut acc = 0.0;
        for x in &xs {
            let z = (g - x) / h;
            // Kernel support cut at 8 sigma; negligible mass, big speedup.
            if z.abs() < 8.0 {
                acc += (-0.5 * z * z).exp();
            }
        }
        *d = acc * norm;
    }

    let mut est = DensityEstimate { grid_min: lo, grid_step: step, density, bandwidth: h };
    let total = est.integral();
    if total > 0.0 {
        for d in &mut est.density {
            *d /= total;
        }
    }
    Ok(est)
}

/// Continuous-model depth density of a profile evaluated on a grid,
/// normalized by the captured opacity `1 - T_final`. Step discontinuities of
/// the transmittance curve (the first fragment, fully opaque fragments) are
/// Dirac-like and deposited as probability mass into their grid cell.
pub fn pdf_from_profile(
    profile: &TransmittanceProfile,
    grid_size: usize,
) -> Result<DensityEstimate, DepthDistError> {
    if grid_size < 8 {
        return Err(DepthDistError::BadParameter("grid_size must be at least 8".into()));
    }
    let entries = profile.entries();
    if entries.is_empty() {
        return Err(DepthDistError::DegenerateProfile("profile has no fragments".into()));
    }
    let captured = 1.0 - profile.t_final();
    if captured <= 0.0 {
        return Err(DepthDistError::DegenerateProfile("profile captures no opacity".into()));
    }
    let d_lo = entries[0].depth;
    let d_hi = entries[entries.len() - 1].depth;
    let pad = (0.05 * (d_hi - d_lo)).max(0.01 * d_hi).max(1e-9);
    let lo = (d_lo - pad).max(0.0);
    let hi = d_hi + pad;
    let step = (hi - lo) / (grid_size - 1) as f64;

    let mut density: Vec<f64> = (0..grid_size)
        .map(|i| profile.continuous_density(lo + step * i as f64) / captured)
        .collect();
    for (depth, mass) in profile.step_masses() {
        let idx = (((depth - lo) / step).round() as usize).clamp(1, grid_size - 2);
        density[idx] += mass / captured / step;
    }

    let mut est = DensityEstimate { grid_min: lo, grid_step: step, density, bandwidth: 0.0 };
    let total = est.integral();
    if total > 0.0 {
        for d in &mut est.density {
            *d /= total;
        }
    }
    Ok(est)
}

// ---------------------------------------------------------------------------
// Per-view aggregation
// ---------------------------------------------------------------------------

/// Which pixels contribute to aggregated mean depths.
#[derive(Debug, Clone)]
pub enum ValidityMask {
    All,
    /// Keep pixels whose final transmittance is below the bound (the ray hit
    /// substantial matter).
    TFinalBelow(f64),
    Explicit(Vec<bool>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatedPoint {
    /// 0-based threshold index into the stack.
    pub index: usize,
    pub threshold: f64,
    pub mean_depth: f64,
    pub count: usize,
}

/// Mean depth over valid pixels per transmittance threshold for one view.
/// Thresholds with zero valid pixels are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedSequence {
    pub camera_id: usize,
    pub entries: Vec<AggregatedPoint>,
}

impl AggregatedSequence {
    pub fn mean_depths(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.mean_depth).collect()
    }
}

pub fn aggregate_mean_depths(
    stack: &TStack,
    mask: &ValidityMask,
) -> Result<AggregatedSequence, DepthDistError> {
    let px = stack.width * stack.height;
    let valid: Vec<bool> = match mask {
        ValidityMask::All => vec![true; px],
        ValidityMask::TFinalBelow(bound) => {
            let tf = stack.t_final.as_ref().ok_or(DepthDistError::MissingTFinal)?;
            tf.iter().map(|t| (*t as f64) < *bound).collect()
        }
        ValidityMask::Explicit(m) => {
            if m.len() != px {
                return Err(DepthDistError::BadParameter(format!(
                    "mask has {} entries for {px} pixels",
                    m.len()
                )));
            }
            m.clone()
        }
    };

    let mut entries = Vec::with_capacity(stack.n);
    for k in 0..stack.n {
        let plane = stack.plane(k);
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (i, d) in plane.iter().enumerate() {
            if valid[i] && *d != DEPTH_SENTINEL {
                sum += *d as f64;
                count += 1;
            }
        }
        if count > 0 {
            entries.push(AggregatedPoint {
                index: k,
                threshold: stack.threshold(k),
                mean_depth: sum / count as f64,
                count,
            });
        }
    }
    if entries.is_empty() {
        return Err(DepthDistError::EmptySequence);
    }
    // Inverse-CDF shape: means should not increase with the threshold, up to
    // validity-set changes across thresholds.
    for w in entries.windows(2) {
        if w[1].mean_depth > w[0].mean_depth + 1e-9 && w[0].count == w[1].count {
            log::warn!(
                "aggregated mean depth not monotone at T'={:.4}: {:.6} -> {:.6}",
                w[1].threshold,
                w[0].mean_depth,
                w[1].mean_depth
            );
        }
    }
    Ok(AggregatedSequence { camera_id: stack.camera_id, entries })
}

// ---------------------------------------------------------------------------
// Peak detection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub depth: f64,
    /// Topographic prominence over the global maximum density, in [0, 1].
    pub score: f64,
    /// Matched transmittance threshold, filled by [`peaks_to_thresholds`].
    pub threshold: Option<f64>,
    /// 0-based stack plane index of the matched threshold.
    pub threshold_index: Option<usize>,
    /// Layer rank: 0 is the outermost (largest matched threshold).
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PeakSet {
    pub peaks: Vec<Peak>,
}

/// A peak that lost a threshold-assignment conflict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakConflict {
    pub dropped: Peak,
    pub threshold: f64,
}

/// Local maxima of the gridded density scored by relative prominence;
/// retains peaks scoring at least `score_threshold`.
pub fn detect_peaks(
    density: &DensityEstimate,
    score_threshold: f64,
) -> Result<PeakSet, DepthDistError> {
    if !(score_threshold > 0.0 && score_threshold < 1.0) {
        return Err(DepthDistError::BadParameter("score threshold must be in (0, 1)".into()));
    }
    let y = density.density();
    if y.len() < 3 {
        return Err(DepthDistError::BadParameter("density grid too small".into()));
    }
    let global_max = y.iter().copied().fold(0.0f64, f64::max);
    if global_max <= 0.0 {
        return Ok(PeakSet::default());
    }

    // Local maxima with plateau handling: a flat run higher than both sides
    // peaks at its center.
    let mut candidates: Vec<usize> = Vec::new();
    let m = y.len();
    let mut i = 0;
    while i < m {
        let mut j = i;
        while j + 1 < m && y[j + 1] == y[i] {
            j += 1;
        }
        let left_lower = i == 0 || y[i - 1] < y[i];
        let right_lower = j + 1 == m || y[j + 1] < y[i];
        if left_lower && right_lower && y[i] > 0.0 {
            candidates.push((i + j) / 2);
        }
        i = j + 1;
    }

    let mut peaks = Vec::new();
    for &p in &candidates {
        // Prominence: lowest point between the peak and the nearest higher
        // ground on each side (or the grid edge), take the higher of the two.
        let mut left_min = y[p];
        let mut k = p;
        while k > 0 {
            k -= 1;
            if y[k] > y[p] {
                break;
            }
            left_min = left_min.min(y[k]);
        }
        let mut right_min = y[p];
        let mut k = p;
        while k + 1 < m {
            k += 1;
            if y[k] > y[p] {
                break;
            }
            right_min = right_min.min(y[k]);
        }
        let prominence = y[p] - left_min.max(right_min);
        let score = prominence / global_max;
        if score >= score_threshold {
            peaks.push(Peak { depth: density.grid_at(p), score, threshold: None, threshold_index: None, rank: None });
        }
    }
    peaks.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    Ok(PeakSet { peaks })
}

/// Matches each peak to the threshold whose aggregated mean depth is nearest,
/// breaking ties toward the larger threshold. When two peaks claim the same
/// threshold only the higher-scoring one survives; losers are reported.
/// Retained peaks are ranked outermost-first by descending threshold.
pub fn peaks_to_thresholds(
    peaks: &PeakSet,
    sequence: &AggregatedSequence,
) -> Result<(PeakSet, Vec<PeakConflict>), DepthDistError> {
    if sequence.entries.is_empty() {
        return Err(DepthDistError::EmptySequence);
    }
    let mut assigned: Vec<(usize, Peak)> = Vec::new(); // (entry index, peak)
    let mut conflicts = Vec::new();

    for peak in &peaks.peaks {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (i, entry) in sequence.entries.iter().enumerate() {
            let dist = (entry.mean_depth - peak.depth).abs();
            let better = dist < best_dist
                || (dist == best_dist && entry.threshold > sequence.entries[best].threshold);
            if better {
                best = i;
                best_dist = dist;
            }
        }
        let threshold = sequence.entries[best].threshold;
        let candidate = Peak {
            threshold: Some(threshold),
            threshold_index: Some(sequence.entries[best].index),
            ..*peak
        };
        match assigned.iter_mut().find(|(i, _)| *i == best) {
            Some((_, existing)) => {
                if candidate.score > existing.score {
                    conflicts.push(PeakConflict { dropped: *existing, threshold });
                    *existing = candidate;
                } else {
                    conflicts.push(PeakConflict { dropped: candidate, threshold });
                }
            }
            None => assigned.push((best, candidate)),
        }
    }

    let mut retained: Vec<Peak> = assigned.into_iter().map(|(_, p)| p).collect();
    retained.sort_by(|a, b| b.threshold.unwrap().total_cmp(&a.threshold.unwrap()));
    for (rank, p) in retained.iter_mut().enumerate() {
        p.rank = Some(rank);
    }
    Ok((PeakSet { peaks: retained }, conflicts))
}
