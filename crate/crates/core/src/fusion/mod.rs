//! Truncated signed distance volumes and progressive multi-layer fusion.
//!
//! Per-voxel contributions are clamped normalized distances rounded to f32
//! and accumulated into exact f64 sums with unit integer weights, so the
//! fused volume is bit-identical under any integration order or worker count.

mod io;
mod mesh;

pub use io::{load_volume, save_obj, save_ply, save_volume};
pub use mesh::{extract_mesh, TriangleMesh};

use crate::geom::Vec3;
use crate::scene::Camera;
use crate::transmittance::{DepthMap, DEPTH_SENTINEL};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("no depth maps to fuse")]
    NoMaps,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("volume sidecar error: {0}")]
    Sidecar(String),
}

/// Voxel grid of truncated signed distances with weights and frozen flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    origin: Vec3,
    voxel_size: f64,
    dims: [usize; 3],
    /// Exact sum of f32 contributions per voxel.
    sum: Vec<f64>,
    weight: Vec<u32>,
    frozen: Vec<bool>,
}

impl TsdfVolume {
    pub fn new(origin: Vec3, voxel_size: f64, dims: [usize; 3]) -> Result<Self, FusionError> {
        if !(voxel_size > 0.0) {
            return Err(FusionError::BadParameter("voxel size must be positive".into()));
        }
        if dims.iter().any(|d| *d == 0) {
            return Err(FusionError::BadParameter("dimensions must be non-zero".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(TsdfVolume {
            origin,
            voxel_size,
            dims,
            sum: vec![0.0; n],
            weight: vec![0; n],
            frozen: vec![false; n],
        })
    }

    /// Volume covering `bounds` padded by the truncation band.
    pub fn from_bounds(
        bounds: (Vec3, Vec3),
        voxel_size: f64,
        truncation: f64,
    ) -> Result<Self, FusionError> {
        let pad = truncation + 2.0 * voxel_size;
        let lo = bounds.0 - Vec3::new(pad, pad, pad);
        let hi = bounds.1 + Vec3::new(pad, pad, pad);
        let span = hi - lo;
        let dims = [
            (span.x / voxel_size).ceil() as usize + 1,
            (span.y / voxel_size).ceil() as usize + 1,
            (span.z / voxel_size).ceil() as usize + 1,
        ];
        TsdfVolume::new(lo, voxel_size, dims)
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                (x as f64 + 0.5) * self.voxel_size,
                (y as f64 + 0.5) * self.voxel_size,
                (z as f64 + 0.5) * self.voxel_size,
            )
    }

    /// Normalized signed distance in [-1, 1]; unobserved voxels read as +1.
    pub fn value(&self, idx: usize) -> f32 {
        if self.weight[idx] == 0 {
            1.0
        } else {
            (self.sum[idx] / self.weight[idx] as f64) as f32
        }
    }

    pub fn weight(&self, idx: usize) -> u32 {
        self.weight[idx]
    }

    pub fn is_frozen(&self, idx: usize) -> bool {
        self.frozen[idx]
    }

    pub fn frozen_flags(&self) -> &[bool] {
        &self.frozen
    }

    /// Overwrites a voxel; used when loading dumps and building analytic
    /// test volumes.
    pub fn set_voxel(&mut self, idx: usize, value: f32, weight: u32) {
        self.weight[idx] = weight;
        self.sum[idx] = if weight == 0 { 0.0 } else { value as f64 * weight as f64 };
    }

    pub fn adopt_frozen(&mut self, frozen: &[bool]) -> Result<(), FusionError> {
        if frozen.len() != self.frozen.len() {
            return Err(FusionError::ConfigMismatch("frozen mask size mismatch".into()));
        }
        self.frozen.copy_from_slice(frozen);
        Ok(())
    }

    /// Integrates one depth map. For every voxel projecting to a valid depth
    /// with `sdf = depth - voxel ray distance > -truncation`, the clamped
    /// normalized distance joins the voxel's running average with unit
    /// weight. Far-in-front voxels keep updating toward +1, which carves
    /// interior ghost mass. Frozen voxels are skipped.
    pub fn integrate(
        &mut self,
        map: &DepthMap,
        camera: &Camera,
        truncation: f64,
    ) -> Result<(), FusionError> {
        if map.camera_id != camera.id() {
            return Err(FusionError::ConfigMismatch(format!(
                "depth map from camera {} integrated with camera {}",
                map.camera_id,
                camera.id()
            )));
        }
        if map.width != camera.width() || map.height != camera.height() {
            return Err(FusionError::ConfigMismatch("depth map/camera size mismatch".into()));
        }
        if truncation < 2.0 * self.voxel_size {
            return Err(FusionError::BadParameter(format!(
                "truncation {truncation} below two voxel sizes"
            )));
        }

        let dims = self.dims;
        let origin = self.origin;
        let voxel_size = self.voxel_size;
        let plane = dims[0] * dims[1];
        let frozen = &self.frozen;
        let weights = &mut self.weight;
        let sums = &mut self.sum;

        sums.par_chunks_mut(plane)
            .zip(weights.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(z, (sum_slab, weight_slab))| {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let i = y * dims[0] + x;
                        if frozen[z * plane + i] {
                            continue;
                        }
                        let center = origin
                            + Vec3::new(
                                (x as f64 + 0.5) * voxel_size,
                                (y as f64 + 0.5) * voxel_size,
                                (z as f64 + 0.5) * voxel_size,
                            );
                        let Some(proj) = camera.project(center) else { continue };
                        let Some((u, v)) = camera.pixel_of(proj.px, proj.py) else { continue };
                        let depth = map.at(u, v);
                        if depth == DEPTH_SENTINEL {
                            continue;
                        }
                        let sdf = depth as f64 - proj.ray_distance;
                        if sdf > -truncation {
                            let contrib = ((sdf / truncation).clamp(-1.0, 1.0)) as f32;
                            sum_slab[i] += contrib as f64;
                            weight_slab[i] += 1;
                        }
                    }
                }
            });
        Ok(())
    }

    /// Integrates a set of maps in a canonical order (sorted by camera id and
    /// threshold). The sum representation already makes results independent
    /// of order; sorting keeps artifact hashes stable across callers.
    pub fn integrate_set(
        &mut self,
        maps: &[(&DepthMap, &Camera)],
        truncation: f64,
    ) -> Result<(), FusionError> {
        let mut order: Vec<usize> = (0..maps.len()).collect();
        order.sort_by(|&a, &b| {
            let (ma, mb) = (maps[a].0, maps[b].0);
            (ma.camera_id, ma.threshold.to_bits()).cmp(&(mb.camera_id, mb.threshold.to_bits()))
        });
        for i in order {
            self.integrate(maps[i].0, maps[i].1, truncation)?;
        }
        Ok(())
    }

    /// Flags voxels inside the truncation band (|V| < 1) whose weight has
    /// reached `weight_threshold`. Returns how many voxels were newly frozen.
    pub fn freeze(&mut self, weight_threshold: f64) -> Result<usize, FusionError> {
        if !(weight_threshold > 0.0) {
            return Err(FusionError::BadParameter("freeze weight must be positive".into()));
        }
        let mut count = 0;
        for idx in 0..self.sum.len() {
            if !self.frozen[idx]
                && (self.weight[idx] as f64) >= weight_threshold
                && self.value(idx).abs() < 1.0
            {
                self.frozen[idx] = true;
                count += 1;
            }
        }
        Ok(count)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub voxel_size: f64,
    pub truncation: f64,
    pub freeze_weight: f64,
}

#[derive(Debug)]
pub struct ProgressiveFusion {
    /// Single volume carrying all stages, outer layers frozen before inner
    /// integration.
    pub combined: TsdfVolume,
    /// One volume per layer rank so each layer yields its own mesh. The
    /// outer volume equals the combined stage-1 state; inner volumes hold
    /// only their stage's contributions, gated by the frozen mask.
    pub per_layer: Vec<TsdfVolume>,
    /// Voxels frozen after the outermost stage.
    pub frozen_count: usize,
}

/// Two-stage (generally per-rank) progressive fusion: integrate the
/// outermost maps, freeze their voxels, then integrate inner ranks with
/// frozen voxels protected.
pub fn progressive_fuse(
    layers: &[Vec<(&DepthMap, &Camera)>],
    bounds: (Vec3, Vec3),
    params: &FusionParams,
) -> Result<ProgressiveFusion, FusionError> {
    if layers.iter().all(|l| l.is_empty()) {
        return Err(FusionError::NoMaps);
    }
    if layers.first().is_none_or(|l| l.is_empty()) {
        log::warn!("outer layer has no depth maps; degenerating to single-stage fusion");
    }
    let mut combined = TsdfVolume::from_bounds(bounds, params.voxel_size, params.truncation)?;
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut frozen_count = 0usize;

    for (rank, maps) in layers.iter().enumerate() {
        let mut own = TsdfVolume::new(combined.origin, combined.voxel_size, combined.dims)?;
        own.adopt_frozen(&combined.frozen)?;
        own.integrate_set(maps, params.truncation)?;
        per_layer.push(own);

        combined.integrate_set(maps, params.truncation)?;
        let newly = combined.freeze(params.freeze_weight)?;
        if rank == 0 {
            frozen_count = newly;
        }
    }
    Ok(ProgressiveFusion { combined, per_layer, frozen_count })
}

/// All maps into one volume with no freezing; the baseline progressive
/// fusion is compared against.
pub fn naive_fuse(
    layers: &[Vec<(&DepthMap, &Camera)>],
    bounds: (Vec3, Vec3),
    params: &FusionParams,
) -> Result<TsdfVolume, FusionError> {
    if layers.iter().all(|l| l.is_empty()) {
        return Err(FusionError::NoMaps);
    }
    let mut volume = TsdfVolume::from_bounds(bounds, params.voxel_size, params.truncation)?;
    for maps in layers {
        volume.integrate_set(maps, params.truncation)?;
    }
    Ok(volume)
}
