//! Analytic scene description and loading.
//!
//! A scene is a set of analytic primitives (spheres, axis-aligned boxes,
//! planes), each carrying a surface opacity, a layer label, and a flat color,
//! observed by a set of pinhole cameras. Ray casting a scene produces the
//! per-pixel fragment lists an ideal converged splat model would produce.

mod camera;
mod raycast;
mod sampling;

pub use camera::{Camera, ProjectedPoint, Ray};
pub use raycast::{cast_fragments, cast_fragments_along, Fragment, FragmentList};
pub use sampling::ground_truth_layers;

use crate::geom::{Mat3, Vec3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read scene file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse scene JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scene field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("pixel ({0}, {1}) outside image bounds")]
    PixelOutOfBounds(usize, usize),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::Validation { field: field.into(), message: message.into() }
}

/// Which reconstruction layer a primitive belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerLabel {
    Outer,
    Inner,
}

impl fmt::Display for LayerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerLabel::Outer => write!(f, "outer"),
            LayerLabel::Inner => write!(f, "inner"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Axis-aligned box given by center and half-extents.
    Box { center: Vec3, half_extents: Vec3 },
    /// Plane `normal . x = offset` with unit normal.
    Plane { normal: Vec3, offset: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePrimitive {
    pub shape: Shape,
    /// Surface opacity in (0, 1]; exactly 1 means opaque (rays terminate).
    pub opacity: f64,
    pub layer: LayerLabel,
    pub color: [f64; 3],
}

impl ScenePrimitive {
    /// Axis-aligned bounds; `None` for unbounded shapes (planes).
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        match self.shape {
            Shape::Sphere { center, radius } => {
                let r = Vec3::new(radius, radius, radius);
                Some((center - r, center + r))
            }
            Shape::Box { center, half_extents } => {
                Some((center - half_extents, center + half_extents))
            }
            Shape::Plane { .. } => None,
        }
    }

    pub fn surface_area(&self, plane_patch_half: f64) -> f64 {
        match self.shape {
            Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Shape::Box { half_extents: h, .. } => {
                8.0 * (h.x * h.y + h.y * h.z + h.z * h.x)
            }
            Shape::Plane { .. } => (2.0 * plane_patch_half).powi(2),
        }
    }
}

/// Controls the optional splat-spread model: each exact surface fragment is
/// replaced by a small cluster of sub-fragments spanning the surface's fitted
/// thickness, mimicking how a converged splat field distributes opacity along
/// the ray instead of concentrating it at one depth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpreadParams {
    /// Cluster half-width scale in world units.
    pub sigma: f64,
    /// Sub-fragments per surface crossing.
    pub count: usize,
    /// Per-sub opacity weights front-to-back; normalized internally.
    /// Defaults to uniform weights.
    #[serde(default)]
    pub profile: Option<Vec<f64>>,
    /// Per-pixel jitter of sub-fragment depths, as a fraction of sigma.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_jitter() -> f64 {
    0.25
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub primitives: Vec<ScenePrimitive>,
    pub cameras: Vec<Camera>,
    pub background: [f64; 3],
    pub spread: Option<SpreadParams>,
}

impl SceneConfig {
    /// Bounding box of finite primitives; a unit cube fallback when the scene
    /// has only planes.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = -lo;
        let mut any = false;
        for p in &self.primitives {
            if let Some((a, b)) = p.bounds() {
                lo = lo.min_elem(a);
                hi = hi.max_elem(b);
                any = true;
            }
        }
        if !any {
            let anchor = self
                .primitives
                .iter()
                .find_map(|p| match p.shape {
                    Shape::Plane { normal, offset } => Some(normal * offset),
                    _ => None,
                })
                .unwrap_or(Vec3::ZERO);
            let one = Vec3::new(1.0, 1.0, 1.0);
            return (anchor - one, anchor + one);
        }
        (lo, hi)
    }

    pub fn center(&self) -> Vec3 {
        let (lo, hi) = self.bounds();
        (lo + hi) * 0.5
    }

    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    pub fn layers(&self) -> Vec<LayerLabel> {
        let mut seen = BTreeMap::new();
        for p in &self.primitives {
            seen.entry(p.layer).or_insert(());
        }
        seen.into_keys().collect()
    }
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
struct RawScene {
    primitives: Vec<RawPrimitive>,
    cameras: RawCameras,
    image: RawImage,
    #[serde(default)]
    background: Option<[f64; 3]>,
    #[serde(default)]
    spread: Option<SpreadParams>,
}

#[derive(Debug, Deserialize)]
struct RawPrimitive {
    kind: String,
    #[serde(default)]
    center: Option<[f64; 3]>,
    #[serde(default)]
    radius: Option<f64>,
    #[serde(default)]
    half_extents: Option<[f64; 3]>,
    #[serde(default)]
    normal: Option<[f64; 3]>,
    #[serde(default)]
    offset: Option<f64>,
    opacity: f64,
    layer: LayerLabel,
    #[serde(default)]
    color: Option<[f64; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawCameras {
    List(Vec<RawCamera>),
    Orbit { orbit: OrbitSpec },
}

#[derive(Debug, Deserialize)]
struct RawCamera {
    position: [f64; 3],
    #[serde(default)]
    rotation: Option<[[f64; 3]; 3]>,
    #[serde(default)]
    look_at: Option<[f64; 3]>,
}

#[derive(Debug, Deserialize)]
pub struct OrbitSpec {
    pub count: usize,
    pub radius: f64,
    pub elevation_deg: ElevationSpec,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum ElevationSpec {
    Single(f64),
    Rings(Vec<f64>),
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct RawImage {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    #[serde(default)]
    cx: Option<f64>,
    #[serde(default)]
    cy: Option<f64>,
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneConfig, SceneError> {
    let text = std::fs::read_to_string(path)?;
    scene_from_json(&text)
}

pub fn scene_from_json(text: &str) -> Result<SceneConfig, SceneError> {
    let raw: RawScene = serde_json::from_str(text)?;
    validate_scene(raw)
}

fn validate_scene(raw: RawScene) -> Result<SceneConfig, SceneError> {
    let mut primitives = Vec::with_capacity(raw.primitives.len());
    for (i, p) in raw.primitives.iter().enumerate() {
        primitives.push(validate_primitive(i, p)?);
    }
    if primitives.is_empty() {
        return Err(invalid("primitives", "scene must contain at least one primitive"));
    }

    if let Some(spread) = &raw.spread {
        if spread.sigma <= 0.0 || !spread.sigma.is_finite() {
            return Err(invalid("spread.sigma", "must be positive"));
        }
        if spread.count < 2 {
            return Err(invalid("spread.count", "must be at least 2"));
        }
        if let Some(profile) = &spread.profile {
            if profile.len() != spread.count {
                return Err(invalid("spread.profile", "length must equal spread.count"));
            }
            if profile.iter().any(|w| *w <= 0.0) {
                return Err(invalid("spread.profile", "weights must be positive"));
            }
        }
    }

    let image = raw.image;
    if image.width == 0 || image.height == 0 {
        return Err(invalid("image", "width and height must be positive"));
    }
    if !(image.fx > 0.0 && image.fy > 0.0) {
        return Err(invalid("image", "fx and fy must be positive"));
    }
    let cx = image.cx.unwrap_or(image.width as f64 / 2.0);
    let cy = image.cy.unwrap_or(image.height as f64 / 2.0);

    let center = {
        // Pre-validate bounds without the full config.
        let tmp = SceneConfig {
            primitives: primitives.clone(),
            cameras: Vec::new(),
            background: [0.0; 3],
            spread: None,
        };
        tmp.center()
    };

    let cameras = match raw.cameras {
        RawCameras::List(list) => {
            if list.is_empty() {
                return Err(invalid("cameras", "camera list must not be empty"));
            }
            let mut cams = Vec::with_capacity(list.len());
            for (i, rc) in list.iter().enumerate() {
                let position = Vec3::from(rc.position);
                let rotation = match (&rc.rotation, &rc.look_at) {
                    (Some(rows), _) => Mat3 { rows: *rows },
                    (None, Some(target)) => {
                        Camera::look_at_rotation(position, Vec3::from(*target)).ok_or_else(
                            || invalid(format!("cameras[{i}]"), "degenerate look_at direction"),
                        )?
                    }
                    (None, None) => {
                        return Err(invalid(
                            format!("cameras[{i}]"),
                            "camera needs `rotation` or `look_at`",
                        ))
                    }
                };
                let cam = Camera::new(
                    i,
                    image.fx,
                    image.fy,
                    cx,
                    cy,
                    image.width,
                    image.height,
                    rotation,
                    position,
                )?;
                cams.push(cam);
            }
            cams
        }
        RawCameras::Orbit { orbit } => {
            orbit_cameras(&orbit, image.fx, image.fy, cx, cy, image.width, image.height, center)?
        }
    };

    Ok(SceneConfig {
        primitives,
        cameras,
        background: raw.background.unwrap_or([0.0; 3]),
        spread: raw.spread,
    })
}

fn validate_primitive(i: usize, p: &RawPrimitive) -> Result<ScenePrimitive, SceneError> {
    let field = |name: &str| format!("primitives[{i}].{name}");
    if !(p.opacity > 0.0 && p.opacity <= 1.0) {
        return Err(invalid(field("opacity"), format!("{} is outside (0, 1]", p.opacity)));
    }
    let color = p.color.unwrap_or([0.5, 0.5, 0.5]);
    let shape = match p.kind.as_str() {
        "sphere" => {
            let center = p.center.ok_or_else(|| invalid(field("center"), "missing"))?;
            let radius = p.radius.ok_or_else(|| invalid(field("radius"), "missing"))?;
            if !(radius > 0.0) {
                return Err(invalid(field("radius"), "must be positive"));
            }
            Shape::Sphere { center: center.into(), radius }
        }
        "box" => {
            let center = p.center.ok_or_else(|| invalid(field("center"), "missing"))?;
            let he = p
                .half_extents
                .ok_or_else(|| invalid(field("half_extents"), "missing"))?;
            if he.iter().any(|v| !(*v > 0.0)) {
                return Err(invalid(field("half_extents"), "must be positive"));
            }
            Shape::Box { center: center.into(), half_extents: he.into() }
        }
        "plane" => {
            let normal = Vec3::from(p.normal.ok_or_else(|| invalid(field("normal"), "missing"))?);
            let offset = p.offset.ok_or_else(|| invalid(field("offset"), "missing"))?;
            let normal = normal
                .normalized()
                .ok_or_else(|| invalid(field("normal"), "must be non-zero"))?;
            Shape::Plane { normal, offset }
        }
        other => return Err(invalid(field("kind"), format!("unknown primitive kind `{other}`"))),
    };
    Ok(ScenePrimitive { shape, opacity: p.opacity, layer: p.layer, color })
}

/// Ring(s) of cameras at fixed elevation looking at the scene center, so
/// tests and fixtures never hand-author poses. `count` is split evenly
/// across rings; azimuths are staggered between rings.
#[allow(clippy::too_many_arguments)]
pub fn orbit_cameras(
    orbit: &OrbitSpec,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    center: Vec3,
) -> Result<Vec<Camera>, SceneError> {
    if orbit.count == 0 {
        return Err(invalid("cameras.orbit.count", "must be positive"));
    }
    if !(orbit.radius > 0.0) {
        return Err(invalid("cameras.orbit.radius", "must be positive"));
    }
    let elevations = match &orbit.elevation_deg {
        ElevationSpec::Single(e) => vec![*e],
        ElevationSpec::Rings(es) => es.clone(),
    };
    if elevations.is_empty() {
        return Err(invalid("cameras.orbit.elevation_deg", "must not be empty"));
    }

    let rings = elevations.len();
    let mut cameras = Vec::with_capacity(orbit.count);
    let mut id = 0;
    for (r, elev) in elevations.iter().enumerate() {
        let per_ring = orbit.count / rings + usize::from(r < orbit.count % rings);
        let el = elev.to_radians();
        for k in 0..per_ring {
            let phi = 2.0 * std::f64::consts::PI * (k as f64 + 0.5 * r as f64) / per_ring as f64;
            let dir = Vec3::new(el.cos() * phi.cos(), el.cos() * phi.sin(), el.sin());
            let position = center + dir * orbit.radius;
            let rotation = Camera::look_at_rotation(position, center).ok_or_else(|| {
                invalid("cameras.orbit", "camera coincides with scene center")
            })?;
            cameras.push(Camera::new(id, fx, fy, cx, cy, width, height, rotation, position)?);
            id += 1;
        }
    }
    Ok(cameras)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_PRIM: &str = r#"{
        "primitives": [
            {"kind": "sphere", "center": [0,0,0], "radius": 1.0, "opacity": 0.5,
             "layer": "outer", "color": [0.2, 0.4, 0.9]},
            {"kind": "box", "center": [0,0,0], "half_extents": [0.3,0.3,0.3],
             "opacity": 1.0, "layer": "inner"}
        ],
        "cameras": {"orbit": {"count": 4, "radius": 3.0, "elevation_deg": 20.0}},
        "image": {"width": 64, "height": 64, "fx": 80.0, "fy": 80.0}
    }"#;

    #[test]
    fn loads_two_primitive_scene() {
        let scene = scene_from_json(TWO_PRIM).unwrap();
        assert_eq!(scene.primitives.len(), 2);
        assert_eq!(scene.cameras.len(), 4);
        assert_eq!(scene.layers(), vec![LayerLabel::Outer, LayerLabel::Inner]);
    }

    #[test]
    fn rejects_out_of_range_opacity() {
        let bad = TWO_PRIM.replace("\"opacity\": 0.5", "\"opacity\": 1.5");
        let err = scene_from_json(&bad).unwrap_err();
        match err {
            SceneError::Validation { field, .. } => {
                assert_eq!(field, "primitives[0].opacity");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_cameras() {
        let mut v: serde_json::Value = serde_json::from_str(TWO_PRIM).unwrap();
        v.as_object_mut().unwrap().remove("cameras");
        let err = scene_from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, SceneError::Parse(_)));
    }

    #[test]
    fn rejects_non_positive_radius() {
        let bad = TWO_PRIM.replace("\"radius\": 1.0", "\"radius\": -2.0");
        let err = scene_from_json(&bad).unwrap_err();
        match err {
            SceneError::Validation { field, .. } => assert_eq!(field, "primitives[0].radius"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn orbit_cameras_look_at_center() {
        let scene = scene_from_json(TWO_PRIM).unwrap();
        for cam in &scene.cameras {
            let fwd = cam.rotation().col(2);
            let to_center = (scene.center() - cam.position()).normalized().unwrap();
            assert!(fwd.dot(to_center) > 1.0 - 1e-9);
            assert!(cam.rotation().is_rotation(1e-9));
        }
    }
}
