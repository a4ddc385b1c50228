//! Front-to-back compositing and the per-pixel depth/transmittance mapping.
//!
//! For a fragment list along a ray, the transmittance entering fragment `g`
//! is `T_before(g) = prod_{k<g} (1 - alpha_k)`. Treating `1 - T` as a CDF of
//! depth gives a per-pixel depth distribution whose inverse is sampled at
//! uniform transmittance thresholds `T' = k/N` to build depth-map stacks.

use crate::scene::{cast_fragments, Camera, Fragment, FragmentList, SceneConfig, SceneError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Depth value marking "no crossing" in depth maps.
pub const DEPTH_SENTINEL: f32 = 0.0;

#[derive(Debug, Error)]
pub enum TransmittanceError {
    #[error("invalid fragment {index}: {message}")]
    InvalidFragment { index: usize, message: String },
    #[error("transmittance threshold {0} outside (0, 1]")]
    ThresholdOutOfRange(f64),
    #[error("threshold count must be at least 2, got {0}")]
    BadThresholdCount(usize),
    #[error("scene error: {0}")]
    Scene(#[from] SceneError),
    #[error("stack I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("stack manifest error: {0}")]
    Manifest(String),
}

/// One composited fragment with the transmittance entering and leaving it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileEntry {
    pub depth: f64,
    pub opacity: f64,
    pub t_before: f64,
    pub t_after: f64,
}

/// Per-pixel transmittance curve produced by front-to-back compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmittanceProfile {
    entries: Vec<ProfileEntry>,
    t_final: f64,
    color: [f64; 3],
    alpha: f64,
}

/// Front-to-back compositing. An opacity of exactly 1 terminates the ray;
/// trailing fragments are unreachable and dropped. Opacities outside (0, 1]
/// are invalid.
pub fn composite(
    fragments: &[Fragment],
    background: [f64; 3],
) -> Result<TransmittanceProfile, TransmittanceError> {
    let mut entries = Vec::with_capacity(fragments.len());
    let mut t = 1.0f64;
    let mut color = [0.0f64; 3];
    let mut prev_depth = 0.0f64;
    for (index, frag) in fragments.iter().enumerate() {
        if !(frag.opacity > 0.0 && frag.opacity <= 1.0) {
            return Err(TransmittanceError::InvalidFragment {
                index,
                message: format!("opacity {} outside (0, 1]", frag.opacity),
            });
        }
        if !(frag.depth > prev_depth) {
            return Err(TransmittanceError::InvalidFragment {
                index,
                message: "depths must be strictly increasing and positive".into(),
            });
        }
        prev_depth = frag.depth;
        let t_before = t;
        let t_after = t_before * (1.0 - frag.opacity);
        for c in 0..3 {
            color[c] += t_before * frag.opacity * frag.color[c];
        }
        entries.push(ProfileEntry { depth: frag.depth, opacity: frag.opacity, t_before, t_after });
        t = t_after;
        if frag.opacity >= 1.0 {
            break;
        }
    }
    for c in 0..3 {
        color[c] += t * background[c];
    }
    Ok(TransmittanceProfile { entries, t_final: t, color, alpha: 1.0 - t })
}

/// Drops fragments with opacity below `tau` before compositing. `tau = 0`
/// disables the filter.
pub fn filter_by_opacity(fragments: &FragmentList, tau: f64) -> Vec<Fragment> {
    fragments.iter().filter(|f| f.opacity >= tau).copied().collect()
}

impl TransmittanceProfile {
    pub fn entries(&self) -> &[ProfileEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn color(&self) -> [f64; 3] {
        self.color
    }

    pub fn accumulated_alpha(&self) -> f64 {
        self.alpha
    }

    /// Depth of the first fragment whose post-blend transmittance drops below
    /// `threshold`; `None` when the ray keeps at least `threshold`
    /// transmittance to infinity. `threshold` must be in (0, 1].
    pub fn depth_at_transmittance(
        &self,
        threshold: f64,
    ) -> Result<Option<f64>, TransmittanceError> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(TransmittanceError::ThresholdOutOfRange(threshold));
        }
        Ok(self.crossing_depth(threshold))
    }

    fn crossing_depth(&self, threshold: f64) -> Option<f64> {
        if self.t_final >= threshold {
            return None;
        }
        self.entries.iter().find(|e| e.t_after < threshold).map(|e| e.depth)
    }

    /// Unnormalized expected depth `sum_g (T_before - T_after) * d_g`; the
    /// residual transmittance past the last fragment contributes zero depth.
    pub fn expected_depth(&self) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        Some(self.entries.iter().map(|e| (e.t_before - e.t_after) * e.depth).sum())
    }

    /// Depth at which the depth CDF reaches one half.
    pub fn median_depth(&self) -> Option<f64> {
        self.crossing_depth(0.5)
    }

    /// Continuous transmittance model: T = 1 before the first fragment, then
    /// exponential interpolation of log-transmittance between fragment
    /// depths, agreeing with `t_after` at each fragment. A fully opaque
    /// fragment drops T to zero at its depth.
    pub fn continuous_transmittance(&self, d: f64) -> f64 {
        if self.entries.is_empty() || d < self.entries[0].depth {
            return 1.0;
        }
        let last = self.entries.len() - 1;
        if d >= self.entries[last].depth {
            return self.t_final;
        }
        // Span index: first entry with depth > d; entries[i-1].depth <= d.
        let i = self.entries.partition_point(|e| e.depth <= d);
        let lo = &self.entries[i - 1];
        let hi = &self.entries[i];
        if hi.opacity >= 1.0 {
            return lo.t_after;
        }
        let frac = (d - lo.depth) / (hi.depth - lo.depth);
        lo.t_after * ((1.0 - hi.opacity).ln() * frac).exp()
    }

    /// Density `-dT/dd` of the continuous model inside interpolation spans.
    /// Zero outside spans; step discontinuities (the first fragment and any
    /// opaque fragment) carry their mass as atoms, see [`Self::step_masses`].
    pub fn continuous_density(&self, d: f64) -> f64 {
        if self.entries.len() < 2 {
            return 0.0;
        }
        let last = self.entries.len() - 1;
        if d < self.entries[0].depth || d > self.entries[last].depth {
            return 0.0;
        }
        let i = self.entries.partition_point(|e| e.depth <= d).clamp(1, last);
        let lo = &self.entries[i - 1];
        let hi = &self.entries[i];
        if hi.opacity >= 1.0 {
            return 0.0;
        }
        let lambda = (1.0 - hi.opacity).ln() / (hi.depth - lo.depth);
        let frac = (d - lo.depth) / (hi.depth - lo.depth);
        let t = lo.t_after * ((1.0 - hi.opacity).ln() * frac).exp();
        -lambda * t
    }

    /// Probability atoms of the continuous model: the first fragment always
    /// carries its blended weight as a step; a fully opaque later fragment
    /// carries all remaining transmittance.
    pub fn step_masses(&self) -> Vec<(f64, f64)> {
        let mut steps = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            if i == 0 {
                steps.push((e.depth, e.t_before - e.t_after));
            } else if e.opacity >= 1.0 {
                steps.push((e.depth, e.t_before));
            }
        }
        steps
    }

    /// Depth for every uniform threshold `k/n`, `k = 1..=n`, in one
    /// front-to-back sweep. Equivalent to calling `depth_at_transmittance`
    /// per threshold; sentinel where there is no crossing.
    pub fn uniform_crossings(&self, n: usize) -> Vec<f32> {
        let mut out = vec![DEPTH_SENTINEL; n];
        let mut k = n;
        for e in &self.entries {
            while k >= 1 && (k as f64 / n as f64) > e.t_after {
                out[k - 1] = e.depth as f32;
                k -= 1;
            }
            if k == 0 {
                break;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Depth maps and stacks
// ---------------------------------------------------------------------------

/// Single-threshold depth map; 0.0 marks pixels with no crossing.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub camera_id: usize,
    /// Transmittance threshold the map was extracted at; NaN-free, in (0, 1].
    /// Maps built from median/expected depths use 0.5 / 0.0 labels.
    pub threshold: f64,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn at(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d != DEPTH_SENTINEL).count()
    }
}

/// Per-view stack of `n` depth maps at thresholds `k/n`, plane-major
/// (threshold outermost, then row-major pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct TStack {
    pub camera_id: usize,
    pub width: usize,
    pub height: usize,
    pub n: usize,
    pub planes: Vec<f32>,
    /// Per-pixel final transmittance, used for validity masking.
    pub t_final: Option<Vec<f32>>,
}

impl TStack {
    pub fn thresholds(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.n;
        (1..=n).map(move |k| k as f64 / n as f64)
    }

    pub fn threshold(&self, k: usize) -> f64 {
        (k + 1) as f64 / self.n as f64
    }

    /// Plane for threshold index `k` (0-based; threshold `(k+1)/n`).
    pub fn plane(&self, k: usize) -> &[f32] {
        let sz = self.width * self.height;
        &self.planes[k * sz..(k + 1) * sz]
    }

    pub fn extract_map(&self, k: usize, camera: &Camera) -> DepthMap {
        DepthMap {
            camera_id: camera.id(),
            threshold: self.threshold(k),
            width: self.width,
            height: self.height,
            data: self.plane(k).to_vec(),
        }
    }

    /// Depth at pixel `(u, v)` for threshold index `k`.
    pub fn at(&self, k: usize, u: usize, v: usize) -> f32 {
        self.planes[k * self.width * self.height + v * self.width + u]
    }
}

/// Which per-pixel depth statistic a rendered map carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthSelector {
    /// Stepwise inverse CDF at a transmittance threshold.
    Threshold(f64),
    Median,
    Expected,
}

/// Renders the full threshold stack for one camera. Pure per pixel and
/// deterministic regardless of worker count.
pub fn render_tstack(
    scene: &SceneConfig,
    camera: &Camera,
    n: usize,
    opacity_filter: f64,
) -> Result<TStack, TransmittanceError> {
    if n < 2 {
        return Err(TransmittanceError::BadThresholdCount(n));
    }
    let (w, h) = (camera.width(), camera.height());
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut row_planes = vec![DEPTH_SENTINEL; n * w];
            let mut row_tfinal = vec![1.0f32; w];
            for u in 0..w {
                let frags = cast_fragments(scene, camera, (u, v)).expect("pixel in bounds");
                let profile = profile_for(&frags, scene.background, opacity_filter)
                    .expect("cast fragments are valid");
                let crossings = profile.uniform_crossings(n);
                for (k, d) in crossings.iter().enumerate() {
                    row_planes[k * w + u] = *d;
                }
                row_tfinal[u] = profile.t_final() as f32;
            }
            (row_planes, row_tfinal)
        })
        .collect();

    let mut planes = vec![DEPTH_SENTINEL; n * w * h];
    let mut t_final = vec![1.0f32; w * h];
    for (v, (row_planes, row_tfinal)) in rows.into_iter().enumerate() {
        for k in 0..n {
            planes[k * w * h + v * w..k * w * h + v * w + w]
                .copy_from_slice(&row_planes[k * w..(k + 1) * w]);
        }
        t_final[v * w..(v + 1) * w].copy_from_slice(&row_tfinal);
    }
    Ok(TStack { camera_id: camera.id(), width: w, height: h, n, planes, t_final: Some(t_final) })
}

fn profile_for(
    frags: &FragmentList,
    background: [f64; 3],
    opacity_filter: f64,
) -> Result<TransmittanceProfile, TransmittanceError> {
    if opacity_filter > 0.0 {
        composite(&filter_by_opacity(frags, opacity_filter), background)
    } else {
        composite(frags.as_slice(), background)
    }
}

/// Renders a single per-pixel depth-statistic map (median/expected/threshold).
pub fn render_depth_map(
    scene: &SceneConfig,
    camera: &Camera,
    selector: DepthSelector,
    opacity_filter: f64,
) -> Result<DepthMap, TransmittanceError> {
    if let DepthSelector::Threshold(t) = selector {
        if !(t > 0.0 && t <= 1.0) {
            return Err(TransmittanceError::ThresholdOutOfRange(t));
        }
    }
    let (w, h) = (camera.width(), camera.height());
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut row = vec![DEPTH_SENTINEL; w];
            for u in 0..w {
                let frags = cast_fragments(scene, camera, (u, v)).expect("pixel in bounds");
                let profile = profile_for(&frags, scene.background, opacity_filter)
                    .expect("cast fragments are valid");
                let d = match selector {
                    DepthSelector::Threshold(t) => profile.crossing_depth(t),
                    DepthSelector::Median => profile.median_depth(),
                    DepthSelector::Expected => profile.expected_depth(),
                };
                row[u] = d.map_or(DEPTH_SENTINEL, |d| d as f32);
            }
            row
        })
        .collect();
    let mut data = vec![DEPTH_SENTINEL; w * h];
    for (v, row) in rows.into_iter().enumerate() {
        data[v * w..(v + 1) * w].copy_from_slice(&row);
    }
    let threshold = match selector {
        DepthSelector::Threshold(t) => t,
        DepthSelector::Median => 0.5,
        DepthSelector::Expected => 0.0,
    };
    Ok(DepthMap { camera_id: camera.id(), threshold, width: w, height: h, data })
}

// ---------------------------------------------------------------------------
// Stack serialization: JSON manifest + raw little-endian f32 planes
// ---------------------------------------------------------------------------

/// Serializable camera description stored in stack manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraDesc {
    pub id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major world-from-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
}

impl From<&Camera> for CameraDesc {
    fn from(c: &Camera) -> Self {
        let (fx, fy, cx, cy) = c.intrinsics();
        CameraDesc {
            id: c.id(),
            fx,
            fy,
            cx,
            cy,
            width: c.width(),
            height: c.height(),
            rotation: c.rotation().rows,
            position: c.position().to_array(),
        }
    }
}

impl CameraDesc {
    pub fn to_camera(&self) -> Result<Camera, SceneError> {
        Camera::new(
            self.id,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            crate::geom::Mat3 { rows: self.rotation },
            self.position.into(),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TStackManifest {
    pub camera: CameraDesc,
    pub width: usize,
    pub height: usize,
    pub n: usize,
    pub thresholds: Vec<f64>,
    pub raw_file: String,
    #[serde(default)]
    pub t_final_file: Option<String>,
}

/// Writes `<stem>.json`, `<stem>.raw`, and `<stem>.tfinal.raw`; returns the
/// manifest path.
pub fn save_tstack(
    stack: &TStack,
    camera: &Camera,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<PathBuf, TransmittanceError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let raw_name = format!("{stem}.raw");
    write_f32_le(&dir.join(&raw_name), &stack.planes)?;
    let t_final_file = match &stack.t_final {
        Some(tf) => {
            let name = format!("{stem}.tfinal.raw");
            write_f32_le(&dir.join(&name), tf)?;
            Some(name)
        }
        None => None,
    };
    let manifest = TStackManifest {
        camera: camera.into(),
        width: stack.width,
        height: stack.height,
        n: stack.n,
        thresholds: stack.thresholds().collect(),
        raw_file: raw_name,
        t_final_file,
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable"))?;
    Ok(path)
}

pub fn load_tstack(manifest_path: impl AsRef<Path>) -> Result<(TStack, Camera), TransmittanceError> {
    let manifest_path = manifest_path.as_ref();
    let manifest: TStackManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)
        .map_err(|e| TransmittanceError::Manifest(e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let planes = read_f32_le(&dir.join(&manifest.raw_file))?;
    let expected = manifest.n * manifest.width * manifest.height;
    if planes.len() != expected {
        return Err(TransmittanceError::Manifest(format!(
            "raw file holds {} floats, expected {expected}",
            planes.len()
        )));
    }
    let t_final = match &manifest.t_final_file {
        Some(name) => {
            let tf = read_f32_le(&dir.join(name))?;
            if tf.len() != manifest.width * manifest.height {
                return Err(TransmittanceError::Manifest("t_final size mismatch".into()));
            }
            Some(tf)
        }
        None => None,
    };
    let camera = manifest.camera.to_camera()?;
    Ok((
        TStack {
            camera_id: manifest.camera.id,
            width: manifest.width,
            height: manifest.height,
            n: manifest.n,
            planes,
            t_final,
        },
        camera,
    ))
}

fn write_f32_le(path: &Path, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)
}

fn read_f32_le(path: &Path) -> std::io::Result<Vec<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
