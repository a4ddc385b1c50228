//! Ray/primitive intersection producing per-pixel fragment lists.

use super::{Camera, Ray, SceneConfig, SceneError, Shape, SpreadParams};

/// Rays start slightly in front of the camera to avoid self-hits at t = 0.
const T_MIN: f64 = 1e-9;
/// Intersections closer than this along one ray are merged (tangent hits).
const MERGE_EPS: f64 = 1e-9;

/// One compositing event along a pixel ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    /// Euclidean distance from the camera center, > 0.
    pub depth: f64,
    /// Opacity in (0, 1].
    pub opacity: f64,
    pub color: [f64; 3],
}

/// Fragments sorted by strictly increasing depth. Nothing appears beyond the
/// first fully opaque fragment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FragmentList(Vec<Fragment>);

impl FragmentList {
    pub fn new(fragments: Vec<Fragment>) -> Result<Self, SceneError> {
        let mut prev = 0.0;
        for (i, f) in fragments.iter().enumerate() {
            if !(f.depth > prev) {
                return Err(SceneError::Validation {
                    field: format!("fragments[{i}].depth"),
                    message: "depths must be strictly increasing and positive".into(),
                });
            }
            if !(f.opacity > 0.0 && f.opacity <= 1.0) {
                return Err(SceneError::Validation {
                    field: format!("fragments[{i}].opacity"),
                    message: "opacity must be in (0, 1]".into(),
                });
            }
            if f.opacity == 1.0 && i + 1 != fragments.len() {
                return Err(SceneError::Validation {
                    field: format!("fragments[{i}]"),
                    message: "fragments behind an opaque fragment are unreachable".into(),
                });
            }
            prev = f.depth;
        }
        Ok(FragmentList(fragments))
    }

    pub fn as_slice(&self) -> &[Fragment] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Fragment> {
        self.0.iter()
    }
}

impl<'a> IntoIterator for &'a FragmentList {
    type Item = &'a Fragment;
    type IntoIter = std::slice::Iter<'a, Fragment>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Casts the center ray of pixel `(u, v)` and returns its fragment list.
pub fn cast_fragments(
    scene: &SceneConfig,
    camera: &Camera,
    pixel: (usize, usize),
) -> Result<FragmentList, SceneError> {
    let ray = camera.pixel_ray(pixel.0, pixel.1)?;
    let pixel_key = (camera.id() as u64) << 40 ^ (pixel.1 as u64) << 20 ^ pixel.0 as u64;
    Ok(cast_fragments_along(scene, &ray, pixel_key))
}

/// Casts an arbitrary ray. `pixel_key` seeds the deterministic per-pixel
/// spread jitter; rays with the same key produce identical fragments.
pub fn cast_fragments_along(scene: &SceneConfig, ray: &Ray, pixel_key: u64) -> FragmentList {
    let mut hits: Vec<(f64, usize)> = Vec::new();
    for (pi, prim) in scene.primitives.iter().enumerate() {
        let mut ts = [0.0f64; 2];
        let n = intersect(&prim.shape, ray, &mut ts);
        for &t in ts.iter().take(n) {
            if t > T_MIN {
                hits.push((t, pi));
            }
        }
    }
    hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    // Merge coincident hits (tangent rays report a double root).
    let mut fragments: Vec<Fragment> = Vec::with_capacity(hits.len());
    for (t, pi) in hits {
        let prim = &scene.primitives[pi];
        if let Some(last) = fragments.last() {
            if t - last.depth < MERGE_EPS {
                continue;
            }
        }
        fragments.push(Fragment { depth: t, opacity: prim.opacity, color: prim.color });
        if prim.opacity >= 1.0 {
            break;
        }
    }

    if let Some(spread) = &scene.spread {
        fragments = apply_spread(&fragments, spread, pixel_key);
    }

    FragmentList(fragments)
}

fn intersect(shape: &Shape, ray: &Ray, out: &mut [f64; 2]) -> usize {
    match *shape {
        Shape::Sphere { center, radius } => {
            let oc = ray.origin - center;
            let b = oc.dot(ray.dir);
            let disc = b * b - (oc.norm_sq() - radius * radius);
            if disc < 0.0 {
                return 0;
            }
            let sq = disc.sqrt();
            out[0] = -b - sq;
            out[1] = -b + sq;
            if out[1] - out[0] < MERGE_EPS {
                1
            } else {
                2
            }
        }
        Shape::Box { center, half_extents } => {
            // Slab test; both entry and exit are surface crossings.
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let o = ray.origin - center;
            let d = ray.dir;
            for (oc, dc, hc) in [
                (o.x, d.x, half_extents.x),
                (o.y, d.y, half_extents.y),
                (o.z, d.z, half_extents.z),
            ] {
                if dc.abs() < 1e-15 {
                    if oc.abs() > hc {
                        return 0;
                    }
                    continue;
                }
                let t0 = (-hc - oc) / dc;
                let t1 = (hc - oc) / dc;
                let (t0, t1) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
                t_near = t_near.max(t0);
                t_far = t_far.min(t1);
                if t_near > t_far {
                    return 0;
                }
            }
            out[0] = t_near;
            out[1] = t_far;
            if t_far - t_near < MERGE_EPS {
                1
            } else {
                2
            }
        }
        Shape::Plane { normal, offset } => {
            let denom = normal.dot(ray.dir);
            if denom.abs() < 1e-12 {
                return 0;
            }
            out[0] = (offset - normal.dot(ray.origin)) / denom;
            1
        }
    }
}

// ---------------------------------------------------------------------------
// Splat spread
// ---------------------------------------------------------------------------

/// Replaces each exact fragment with a cluster of sub-fragments whose
/// opacities composite to the original one. For an opaque fragment all but a
/// trace of the opacity is spread over the cluster and the final sub-fragment
/// stays fully opaque so occlusion semantics are preserved.
fn apply_spread(fragments: &[Fragment], spread: &SpreadParams, pixel_key: u64) -> Vec<Fragment> {
    let k = spread.count;
    let weights: Vec<f64> = match &spread.profile {
        Some(p) => {
            let total: f64 = p.iter().sum();
            p.iter().map(|w| w / total).collect()
        }
        None => vec![1.0 / k as f64; k],
    };

    let mut out: Vec<Fragment> = Vec::with_capacity(fragments.len() * k);
    for (fi, frag) in fragments.iter().enumerate() {
        let opaque = frag.opacity >= 1.0;
        // Opacity actually distributed over the cluster; opaque surfaces keep
        // a terminal alpha = 1 core.
        let spread_alpha = if opaque { 0.995 } else { frag.opacity };
        let log_keep = (1.0 - spread_alpha).ln();

        let mut subs: Vec<Fragment> = Vec::with_capacity(k);
        for (j, w) in weights.iter().enumerate() {
            let centered = (j as f64 + 0.5) / k as f64 - 0.5;
            let base = 3.0 * spread.sigma * centered;
            let jitter = spread.jitter
                * spread.sigma
                * gauss_hash(spread.seed, pixel_key, fi as u64, j as u64);
            let depth = (frag.depth + base + jitter).max(T_MIN * 2.0);
            let alpha = 1.0 - (log_keep * w).exp();
            if alpha > 1e-12 {
                subs.push(Fragment { depth, opacity: alpha.min(0.999_999), color: frag.color });
            }
        }
        subs.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        if opaque {
            let terminal_depth = subs.last().map_or(frag.depth, |f| f.depth + MERGE_EPS * 2.0);
            subs.push(Fragment {
                depth: terminal_depth.max(frag.depth),
                opacity: 1.0,
                color: frag.color,
            });
        }
        out.extend(subs);
    }

    out.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    // Re-impose strict ordering and the opaque cutoff.
    let mut cleaned: Vec<Fragment> = Vec::with_capacity(out.len());
    for f in out {
        if let Some(last) = cleaned.last() {
            if f.depth - last.depth < MERGE_EPS {
                continue;
            }
            if last.opacity >= 1.0 {
                break;
            }
        }
        cleaned.push(f);
    }
    cleaned
}

/// Deterministic standard normal from hashed indices (Box–Muller over a
/// splitmix64 stream).
fn gauss_hash(seed: u64, pixel_key: u64, fragment: u64, sub: u64) -> f64 {
    let mut state = seed ^ pixel_key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    state = state.wrapping_add(fragment.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    state = state.wrapping_add(sub.wrapping_mul(0x94D0_49BB_1331_11EB));
    let u1 = unit_f64(splitmix64(&mut state)).max(1e-12);
    let u2 = unit_f64(splitmix64(&mut state));
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Mat3, Vec3};
    use crate::scene::{LayerLabel, ScenePrimitive};

    fn camera_at_origin() -> Camera {
        Camera::new(0, 100.0, 100.0, 32.0, 32.0, 64, 64, Mat3::identity(), Vec3::ZERO).unwrap()
    }

    fn scene_with(primitives: Vec<ScenePrimitive>) -> SceneConfig {
        SceneConfig {
            primitives,
            cameras: vec![camera_at_origin()],
            background: [0.0; 3],
            spread: None,
        }
    }

    fn sphere(center_z: f64, radius: f64, opacity: f64) -> ScenePrimitive {
        ScenePrimitive {
            shape: Shape::Sphere { center: Vec3::new(0.0, 0.0, center_z), radius },
            opacity,
            layer: LayerLabel::Outer,
            color: [1.0, 1.0, 1.0],
        }
    }

    fn boxp(center_z: f64, he: f64, opacity: f64) -> ScenePrimitive {
        ScenePrimitive {
            shape: Shape::Box {
                center: Vec3::new(0.0, 0.0, center_z),
                half_extents: Vec3::new(he, he, he),
            },
            opacity,
            layer: LayerLabel::Inner,
            color: [1.0, 0.0, 0.0],
        }
    }

    fn plane_z(offset: f64, opacity: f64) -> ScenePrimitive {
        ScenePrimitive {
            shape: Shape::Plane { normal: Vec3::new(0.0, 0.0, 1.0), offset },
            opacity,
            layer: LayerLabel::Outer,
            color: [0.0, 1.0, 0.0],
        }
    }

    fn center_fragments(scene: &SceneConfig) -> FragmentList {
        // Ray exactly through the optical axis.
        let ray = scene.cameras[0].ray_through(32.0, 32.0).unwrap();
        cast_fragments_along(scene, &ray, 0)
    }

    #[test]
    fn opaque_plane_single_fragment() {
        let scene = scene_with(vec![plane_z(2.0, 1.0)]);
        let frags = center_fragments(&scene);
        assert_eq!(frags.len(), 1);
        assert!((frags.as_slice()[0].depth - 2.0).abs() < 1e-12);
        assert_eq!(frags.as_slice()[0].opacity, 1.0);
    }

    #[test]
    fn sphere_chord_two_fragments() {
        let scene = scene_with(vec![sphere(3.0, 1.0, 0.5)]);
        let frags = center_fragments(&scene);
        assert_eq!(frags.len(), 2);
        assert!((frags.as_slice()[0].depth - 2.0).abs() < 1e-12);
        assert!((frags.as_slice()[1].depth - 4.0).abs() < 1e-12);
        assert!(frags.iter().all(|f| f.opacity == 0.5));
    }

    #[test]
    fn opaque_inner_box_occludes_back_wall() {
        // Oracle: brute-force ray/primitive intersections with the occlusion
        // cutoff at the first opaque hit (expected depths 2.0 and 2.7; the
        // sphere back wall at 4.0 is dropped).
        let scene = scene_with(vec![sphere(3.0, 1.0, 0.5), boxp(3.0, 0.3, 1.0)]);
        let frags = center_fragments(&scene);
        assert_eq!(frags.len(), 2);
        assert!((frags.as_slice()[0].depth - 2.0).abs() < 1e-12);
        assert!((frags.as_slice()[0].opacity - 0.5).abs() < 1e-15);
        assert!((frags.as_slice()[1].depth - 2.7).abs() < 1e-12);
        assert_eq!(frags.as_slice()[1].opacity, 1.0);
    }

    #[test]
    fn miss_produces_empty_list() {
        let scene = scene_with(vec![sphere(3.0, 1.0, 0.5)]);
        let frags = cast_fragments(&scene, &scene.cameras[0], (0, 0)).unwrap();
        assert!(frags.is_empty());
    }

    #[test]
    fn fragments_deterministic_and_sorted() {
        let mut scene = scene_with(vec![sphere(3.0, 1.0, 0.5), boxp(3.0, 0.3, 1.0)]);
        scene.spread = Some(SpreadParams {
            sigma: 0.05,
            count: 4,
            profile: None,
            jitter: 0.3,
            seed: 7,
        });
        for v in [20usize, 32, 40] {
            let a = cast_fragments(&scene, &scene.cameras[0], (32, v)).unwrap();
            let b = cast_fragments(&scene, &scene.cameras[0], (32, v)).unwrap();
            assert_eq!(a, b);
            let mut prev = 0.0;
            for f in &a {
                assert!(f.depth > prev);
                prev = f.depth;
            }
            // No fragment beyond the first opaque one.
            if let Some(i) = a.iter().position(|f| f.opacity == 1.0) {
                assert_eq!(i, a.len() - 1);
            }
        }
    }

    #[test]
    fn out_of_bounds_pixel_is_an_error() {
        let scene = scene_with(vec![plane_z(2.0, 1.0)]);
        assert!(cast_fragments(&scene, &scene.cameras[0], (64, 0)).is_err());
    }

    #[test]
    fn spread_preserves_total_opacity() {
        let mut scene = scene_with(vec![sphere(3.0, 1.0, 0.5)]);
        scene.spread =
            Some(SpreadParams { sigma: 0.03, count: 6, profile: None, jitter: 0.2, seed: 1 });
        let frags = center_fragments(&scene);
        // Two walls, each compositing to 0.5: total transmittance 0.25.
        let t: f64 = frags.iter().map(|f| 1.0 - f.opacity).product();
        assert!((t - 0.25).abs() < 1e-9, "residual transmittance {t}");
    }
}
