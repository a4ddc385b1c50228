//! Ground-truth surface point clouds for metric evaluation.

use super::{LayerLabel, SceneConfig, SceneError, Shape};
use crate::geom::Vec3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Uniform surface samples per layer label, deterministic under `seed`.
/// Samples are distributed across a layer's primitives by surface area.
/// Planes are sampled on a square patch sized to the scene bounds.
pub fn ground_truth_layers(
    scene: &SceneConfig,
    samples_per_layer: usize,
    seed: u64,
) -> Result<BTreeMap<LayerLabel, Vec<Vec3>>, SceneError> {
    if samples_per_layer == 0 {
        return Err(SceneError::Validation {
            field: "samples_per_layer".into(),
            message: "must be at least 1".into(),
        });
    }
    let (lo, hi) = scene.bounds();
    let patch_half = ((hi - lo).norm() / 2.0).max(1.0);

    let mut out = BTreeMap::new();
    for layer in scene.layers() {
        let prims: Vec<_> = scene.primitives.iter().filter(|p| p.layer == layer).collect();
        let areas: Vec<f64> = prims.iter().map(|p| p.surface_area(patch_half)).collect();
        let total: f64 = areas.iter().sum();

        // Largest-remainder allocation so counts sum exactly.
        let mut counts: Vec<usize> = areas
            .iter()
            .map(|a| (samples_per_layer as f64 * a / total).floor() as usize)
            .collect();
        let mut assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..prims.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = samples_per_layer as f64 * areas[a] / total;
            let fb = samples_per_layer as f64 * areas[b] / total;
            (fb - fb.floor()).total_cmp(&(fa - fa.floor()))
        });
        for &i in order.iter().cycle().take(prims.len() * 2) {
            if assigned == samples_per_layer {
                break;
            }
            counts[i] += 1;
            assigned += 1;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (layer as u64).wrapping_mul(0x9E37));
        let mut points = Vec::with_capacity(samples_per_layer);
        for (prim, count) in prims.iter().zip(counts) {
            for _ in 0..count {
                points.push(sample_surface(&prim.shape, patch_half, &mut rng));
            }
        }
        out.insert(layer, points);
    }
    Ok(out)
}

fn sample_surface(shape: &Shape, patch_half: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    match *shape {
        Shape::Sphere { center, radius } => {
            let z: f64 = rng.gen_range(-1.0..=1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let r_xy = (1.0 - z * z).max(0.0).sqrt();
            center + Vec3::new(r_xy * phi.cos(), r_xy * phi.sin(), z) * radius
        }
        Shape::Box { center, half_extents: h } => {
            // Pick a face pair axis weighted by face area, then a side.
            let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut axis = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    axis = i;
                    break;
                }
                pick -= a;
            }
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let u: f64 = rng.gen_range(-1.0..=1.0);
            let v: f64 = rng.gen_range(-1.0..=1.0);
            let local = match axis {
                0 => Vec3::new(side * h.x, u * h.y, v * h.z),
                1 => Vec3::new(u * h.x, side * h.y, v * h.z),
                _ => Vec3::new(u * h.x, v * h.y, side * h.z),
            };
            center + local
        }
        Shape::Plane { normal, offset } => {
            let anchor = normal * offset;
            let mut t = Vec3::new(1.0, 0.0, 0.0);
            if normal.cross(t).norm() < 1e-9 {
                t = Vec3::new(0.0, 1.0, 0.0);
            }
            let e1 = normal.cross(t).normalized().expect("basis");
            let e2 = normal.cross(e1);
            let u: f64 = rng.gen_range(-patch_half..=patch_half);
            let v: f64 = rng.gen_range(-patch_half..=patch_half);
            anchor + e1 * u + e2 * v
        }
    }
}
