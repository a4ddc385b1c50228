//! Geometric metrics and the peak/median/expected strategy comparison.

use crate::depthdist::{
    aggregate_mean_depths, detect_peaks, kde, peaks_to_thresholds, AggregatedSequence,
    DensityEstimate, DepthDistError, PeakSet, ValidityMask,
};
use crate::fusion::{
    extract_mesh, naive_fuse, progressive_fuse, FusionError, FusionParams, ProgressiveFusion,
    TriangleMesh, TsdfVolume,
};
use crate::geom::Vec3;
use crate::scene::{ground_truth_layers, Camera, LayerLabel, SceneConfig, SceneError};
use crate::transmittance::{
    render_depth_map, render_tstack, DepthMap, DepthSelector, TStack, TransmittanceError,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("mesh has no area to sample")]
    ZeroAreaMesh,
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Transmittance(#[from] TransmittanceError),
    #[error(transparent)]
    DepthDist(#[from] DepthDistError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("pipeline produced no layers for strategy {0}")]
    NoLayers(String),
}

// ---------------------------------------------------------------------------
// Nearest neighbors
// ---------------------------------------------------------------------------

/// Static median-split kd-tree over 3D points.
pub struct KdTree {
    points: Vec<Vec3>,
    // Heap layout: node i splits `points[range]` at its median.
    nodes: Vec<KdNode>,
    root: usize,
}

struct KdNode {
    point: usize,
    axis: usize,
    left: usize,
    right: usize,
}

const NIL: usize = usize::MAX;

impl KdTree {
    pub fn build(points: &[Vec3]) -> Result<Self, EvalError> {
        if points.is_empty() {
            return Err(EvalError::EmptyCloud);
        }
        let mut tree = KdTree { points: points.to_vec(), nodes: Vec::with_capacity(points.len()), root: NIL };
        let mut index: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build_range(&mut index, 0);
        Ok(tree)
    }

    fn build_range(&mut self, index: &mut [usize], depth: usize) -> usize {
        if index.is_empty() {
            return NIL;
        }
        let axis = depth % 3;
        let mid = index.len() / 2;
        index.select_nth_unstable_by(mid, |&a, &b| {
            axis_val(self.points[a], axis).total_cmp(&axis_val(self.points[b], axis))
        });
        let point = index[mid];
        let node_idx = self.nodes.len();
        self.nodes.push(KdNode { point, axis, left: NIL, right: NIL });
        let (lo, rest) = index.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_range(lo, depth + 1);
        let right = self.build_range(hi, depth + 1);
        self.nodes[node_idx].left = left;
        self.nodes[node_idx].right = right;
        node_idx
    }

    /// Squared distance to the nearest point.
    pub fn nearest_sq(&self, query: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(self.root, query, &mut best);
        best
    }

    fn search(&self, node: usize, query: Vec3, best: &mut f64) {
        if node == NIL {
            return;
        }
        let n = &self.nodes[node];
        let d2 = (self.points[n.point] - query).norm_sq();
        if d2 < *best {
            *best = d2;
        }
        let delta = axis_val(query, n.axis) - axis_val(self.points[n.point], n.axis);
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.search(near, query, best);
        if delta * delta < *best {
            self.search(far, query, best);
        }
    }
}

fn axis_val(v: Vec3, axis: usize) -> f64 {
    match axis {
        0 => v.x,
        1 => v.y,
        _ => v.z,
    }
}

/// Symmetric mean nearest-neighbor distance between two clouds.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    Ok(0.5 * (directed_mean(a, b)? + directed_mean(b, a)?))
}

fn directed_mean(from: &[Vec3], to: &[Vec3]) -> Result<f64, EvalError> {
    let tree = KdTree::build(to)?;
    // Fixed-size chunks summed in order keep the result deterministic under
    // any worker count.
    let partials: Vec<f64> = from
        .par_chunks(2048)
        .map(|chunk| chunk.iter().map(|p| tree.nearest_sq(*p).sqrt()).sum::<f64>())
        .collect();
    Ok(partials.iter().sum::<f64>() / from.len() as f64)
}

/// Fraction of `cloud` within `tau` of `ground_truth`.
pub fn precision(cloud: &[Vec3], ground_truth: &[Vec3], tau: f64) -> Result<f64, EvalError> {
    if !(tau > 0.0) {
        return Err(EvalError::BadParameter("precision threshold must be positive".into()));
    }
    if cloud.is_empty() || ground_truth.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    let tree = KdTree::build(ground_truth)?;
    let tau_sq = tau * tau;
    let hits: usize = cloud
        .par_chunks(2048)
        .map(|chunk| chunk.iter().filter(|p| tree.nearest_sq(**p) <= tau_sq).count())
        .sum();
    Ok(hits as f64 / cloud.len() as f64)
}

/// Area-weighted uniform surface samples, deterministic under `seed`.
pub fn sample_mesh(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Vec3>, EvalError> {
    if mesh.triangles.is_empty() {
        return Err(EvalError::ZeroAreaMesh);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0f64;
    for t in &mesh.triangles {
        let (a, b, c) = (
            mesh.vertices[t[0] as usize],
            mesh.vertices[t[1] as usize],
            mesh.vertices[t[2] as usize],
        );
        total += 0.5 * (b - a).cross(c - a).norm();
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(EvalError::ZeroAreaMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pick: f64 = rng.gen_range(0.0..total);
        let ti = cumulative.partition_point(|c| *c <= pick).min(mesh.triangles.len() - 1);
        let t = mesh.triangles[ti];
        let (a, b, c) = (
            mesh.vertices[t[0] as usize],
            mesh.vertices[t[1] as usize],
            mesh.vertices[t[2] as usize],
        );
        let mut u: f64 = rng.gen();
        let mut v: f64 = rng.gen();
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        out.push(a + (b - a) * u + (c - a) * v);
    }
    Ok(out)
}

/// Back-projects valid depth-map pixels into world points.
pub fn depth_map_to_points(map: &DepthMap, camera: &Camera) -> Vec<Vec3> {
    let mut out = Vec::new();
    for v in 0..map.height {
        for u in 0..map.width {
            let d = map.at(u, v);
            if d != crate::transmittance::DEPTH_SENTINEL {
                let ray = camera.pixel_ray(u, v).expect("pixel in bounds");
                out.push(ray.at(d as f64));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Reconstruction pipeline
// ---------------------------------------------------------------------------

/// Knobs shared by the pipeline stages; mirrors the CLI configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconParams {
    /// Transmittance threshold count N.
    pub n_thresholds: usize,
    /// KDE evaluation grid size.
    pub grid_size: usize,
    /// KDE bandwidth override; Silverman's rule when absent.
    pub bandwidth: Option<f64>,
    /// Peak score threshold.
    pub peak_threshold: f64,
    /// Pixels aggregate only when their final transmittance is below this.
    pub mask_t_final: f64,
    /// Fragment opacity pre-filter; 0 disables.
    pub opacity_filter: f64,
    /// Voxel size; scene diameter / 128 when absent.
    pub voxel_size: Option<f64>,
    /// Truncation band in voxel units.
    pub truncation_voxels: f64,
    /// Freeze weight threshold.
    pub freeze_weight: f64,
    pub seed: u64,
    /// Ground-truth samples per layer.
    pub gt_samples: usize,
    /// Samples per reconstructed mesh.
    pub mesh_samples: usize,
    /// Precision threshold in voxel units.
    pub precision_tau_voxels: f64,
}

impl Default for ReconParams {
    fn default() -> Self {
        ReconParams {
            n_thresholds: 64,
            grid_size: 512,
            bandwidth: None,
            peak_threshold: 0.15,
            mask_t_final: 0.5,
            opacity_filter: 0.0,
            voxel_size: None,
            truncation_voxels: 4.0,
            freeze_weight: 1.0,
            seed: 0,
            gt_samples: 100_000,
            mesh_samples: 100_000,
            precision_tau_voxels: 2.0,
        }
    }
}

impl ReconParams {
    pub fn resolve_voxel_size(&self, scene: &SceneConfig) -> f64 {
        self.voxel_size.unwrap_or(scene.diameter() / 128.0)
    }

    pub fn fusion_params(&self, scene: &SceneConfig) -> FusionParams {
        let voxel_size = self.resolve_voxel_size(scene);
        FusionParams {
            voxel_size,
            truncation: self.truncation_voxels * voxel_size,
            freeze_weight: self.freeze_weight,
        }
    }
}

/// Per-view analysis artifacts.
#[derive(Debug)]
pub struct ViewAnalysis {
    pub camera_id: usize,
    pub sequence: AggregatedSequence,
    pub density: DensityEstimate,
    pub peaks: PeakSet,
}

#[derive(Debug)]
pub struct Reconstruction {
    pub views: Vec<ViewAnalysis>,
    /// Depth maps grouped by layer rank (0 outermost), one per view that
    /// detected the rank.
    pub layer_maps: Vec<Vec<(DepthMap, Camera)>>,
    pub fusion: ProgressiveFusion,
    pub meshes: Vec<TriangleMesh>,
    pub voxel_size: f64,
}

/// Renders stacks for every camera, detects per-view layers, and fuses them
/// progressively into per-layer meshes.
pub fn run_reconstruction(
    scene: &SceneConfig,
    params: &ReconParams,
) -> Result<Reconstruction, EvalError> {
    let stacks: Vec<TStack> = scene
        .cameras
        .iter()
        .map(|cam| render_tstack(scene, cam, params.n_thresholds, params.opacity_filter))
        .collect::<Result<_, _>>()?;
    analyze_and_fuse(scene, &stacks, params)
}

/// Same as [`run_reconstruction`] but starting from pre-rendered stacks
/// (the file-based pipeline boundary).
pub fn analyze_and_fuse(
    scene: &SceneConfig,
    stacks: &[TStack],
    params: &ReconParams,
) -> Result<Reconstruction, EvalError> {
    let mut views = Vec::with_capacity(stacks.len());
    for stack in stacks {
        let sequence = aggregate_mean_depths(stack, &ValidityMask::TFinalBelow(params.mask_t_final))?;
        let density = kde(&sequence.mean_depths(), params.bandwidth, params.grid_size)?;
        let raw_peaks = detect_peaks(&density, params.peak_threshold)?;
        let (peaks, conflicts) = peaks_to_thresholds(&raw_peaks, &sequence)?;
        for c in &conflicts {
            log::warn!(
                "view {}: dropped peak at depth {:.4} contending for T'={:.4}",
                stack.camera_id,
                c.dropped.depth,
                c.threshold
            );
        }
        views.push(ViewAnalysis { camera_id: stack.camera_id, sequence, density, peaks });
    }

    let max_ranks = views.iter().map(|v| v.peaks.peaks.len()).max().unwrap_or(0);
    if max_ranks == 0 {
        return Err(EvalError::NoLayers("peaks".into()));
    }
    let mut layer_maps: Vec<Vec<(DepthMap, Camera)>> = vec![Vec::new(); max_ranks];
    for (view, stack) in views.iter().zip(stacks) {
        let camera = scene
            .cameras
            .iter()
            .find(|c| c.id() == stack.camera_id)
            .expect("stack camera belongs to scene");
        for peak in &view.peaks.peaks {
            let rank = peak.rank.expect("ranked");
            let index = peak.threshold_index.expect("assigned");
            layer_maps[rank].push((stack.extract_map(index, camera), *camera));
        }
    }

    let fusion_params = params.fusion_params(scene);
    let layer_refs: Vec<Vec<(&DepthMap, &Camera)>> = layer_maps
        .iter()
        .map(|maps| maps.iter().map(|(m, c)| (m, c)).collect())
        .collect();
    let fusion = progressive_fuse(&layer_refs, scene.bounds(), &fusion_params)?;
    let meshes: Vec<TriangleMesh> = fusion.per_layer.iter().map(extract_mesh).collect();
    Ok(Reconstruction {
        views,
        layer_maps,
        fusion,
        meshes,
        voxel_size: fusion_params.voxel_size,
    })
}

// ---------------------------------------------------------------------------
// Strategy comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Peak,
    Median,
    Expected,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strategy::Peak => write!(f, "peak"),
            Strategy::Median => write!(f, "median"),
            Strategy::Expected => write!(f, "expected"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub strategy: Strategy,
    pub layer: String,
    pub chamfer: f64,
    /// Fraction of reconstructed samples within the precision threshold of
    /// the union of ground-truth layers.
    pub precision: f64,
    pub recon_points: usize,
    pub gt_points: usize,
}

/// Runs the pipeline with peak, median-only, and expected-only depth
/// extraction and reports Chamfer and precision per layer for each.
pub fn compare_strategies(
    scene: &SceneConfig,
    params: &ReconParams,
) -> Result<Vec<MetricReport>, EvalError> {
    let gt = ground_truth_layers(scene, params.gt_samples, params.seed)?;
    let gt_union: Vec<Vec3> = gt.values().flatten().copied().collect();
    let voxel = params.resolve_voxel_size(scene);
    let tau = params.precision_tau_voxels * voxel;
    let layer_names: Vec<LayerLabel> = gt.keys().copied().collect();

    let mut reports = Vec::new();

    // Peak strategy: per-layer meshes from progressive fusion.
    let recon = run_reconstruction(scene, params)?;
    let peak_clouds: Vec<Vec<Vec3>> = recon
        .meshes
        .iter()
        .enumerate()
        .map(|(i, mesh)| {
            sample_mesh(mesh, params.mesh_samples, params.seed.wrapping_add(i as u64 + 1))
        })
        .collect::<Result<_, _>>()?;
    let peak_union: Vec<Vec3> = peak_clouds.iter().flatten().copied().collect();
    let peak_precision = precision(&peak_union, &gt_union, tau)?;
    for (i, layer) in layer_names.iter().enumerate() {
        let cloud = peak_clouds.get(i).unwrap_or(&peak_union);
        reports.push(MetricReport {
            strategy: Strategy::Peak,
            layer: layer.to_string(),
            chamfer: chamfer(cloud, &gt[layer])?,
            precision: peak_precision,
            recon_points: cloud.len(),
            gt_points: gt[layer].len(),
        });
    }

    for (strategy, selector) in [
        (Strategy::Median, DepthSelector::Median),
        (Strategy::Expected, DepthSelector::Expected),
    ] {
        let maps: Vec<(DepthMap, Camera)> = scene
            .cameras
            .par_iter()
            .map(|cam| {
                render_depth_map(scene, cam, selector, params.opacity_filter).map(|m| (m, *cam))
            })
            .collect::<Result<_, _>>()?;
        let refs: Vec<Vec<(&DepthMap, &Camera)>> =
            vec![maps.iter().map(|(m, c)| (m, c)).collect()];
        let fusion_params = params.fusion_params(scene);
        let volume = naive_fuse(&refs, scene.bounds(), &fusion_params)?;
        let mesh = extract_mesh(&volume);
        if mesh.is_empty() {
            return Err(EvalError::NoLayers(strategy.to_string()));
        }
        let cloud = sample_mesh(&mesh, params.mesh_samples, params.seed.wrapping_add(77))?;
        let prec = precision(&cloud, &gt_union, tau)?;
        for layer in &layer_names {
            reports.push(MetricReport {
                strategy,
                layer: layer.to_string(),
                chamfer: chamfer(&cloud, &gt[layer])?,
                precision: prec,
                recon_points: cloud.len(),
                gt_points: gt[layer].len(),
            });
        }
    }
    Ok(reports)
}

/// Naive all-at-once fusion of the peak-derived layer maps; the Appendix-style
/// baseline progressive fusion is compared against.
pub fn naive_counterpart(
    scene: &SceneConfig,
    recon: &Reconstruction,
    params: &ReconParams,
) -> Result<TsdfVolume, EvalError> {
    let layer_refs: Vec<Vec<(&DepthMap, &Camera)>> = recon
        .layer_maps
        .iter()
        .map(|maps| maps.iter().map(|(m, c)| (m, c)).collect())
        .collect();
    Ok(naive_fuse(&layer_refs, scene.bounds(), &params.fusion_params(scene))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[[f64; 3]]) -> Vec<Vec3> {
        points.iter().map(|p| Vec3::from(*p)).collect()
    }

    #[test]
    fn chamfer_identical_clouds_zero() {
        let a = cloud(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_single_pair() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert!((chamfer(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn chamfer_empty_is_error() {
        let a = cloud(&[[0.0; 3]]);
        assert!(matches!(chamfer(&a, &[]), Err(EvalError::EmptyCloud)));
        assert!(matches!(chamfer(&[], &a), Err(EvalError::EmptyCloud)));
    }

    fn random_cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            })
            .collect()
    }

    fn brute_force_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
        let dir = |from: &[Vec3], to: &[Vec3]| {
            from.iter()
                .map(|p| to.iter().map(|q| (*p - *q).norm()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / from.len() as f64
        };
        0.5 * (dir(a, b) + dir(b, a))
    }

    #[test]
    fn kdtree_chamfer_equals_brute_force() {
        let a = random_cloud(500, 1);
        let b = random_cloud(400, 2);
        let fast = chamfer(&a, &b).unwrap();
        let brute = brute_force_chamfer(&a, &b);
        assert!((fast - brute).abs() < 1e-9, "fast {fast} brute {brute}");
    }

    #[test]
    fn chamfer_symmetric_translation_invariant() {
        let a = random_cloud(200, 3);
        let b = random_cloud(150, 4);
        let ab = chamfer(&a, &b).unwrap();
        let ba = chamfer(&b, &a).unwrap();
        assert_eq!(ab, ba);
        let shift = Vec3::new(10.0, -4.0, 2.5);
        let a2: Vec<Vec3> = a.iter().map(|p| *p + shift).collect();
        let b2: Vec<Vec3> = b.iter().map(|p| *p + shift).collect();
        assert!((chamfer(&a2, &b2).unwrap() - ab).abs() < 1e-9);
    }

    #[test]
    fn precision_split_set() {
        let gt = cloud(&[[0.0, 0.0, 0.0]]);
        let half: Vec<Vec3> = cloud(&[
            [0.05, 0.0, 0.0],
            [0.0, 0.05, 0.0],
            [5.0, 0.0, 0.0],
            [0.0, 5.0, 0.0],
        ]);
        assert!((precision(&half, &gt, 0.1).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(precision(&gt, &gt, 0.1).unwrap(), 1.0);
        let far = cloud(&[[9.0, 9.0, 9.0]]);
        assert_eq!(precision(&far, &gt, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn precision_monotone_in_tau() {
        let c = random_cloud(300, 9);
        let gt = random_cloud(100, 10);
        let mut last = 0.0;
        for tau in [0.05, 0.1, 0.2, 0.4, 1.0, 3.0] {
            let p = precision(&c, &gt, tau).unwrap();
            assert!(p >= last);
            last = p;
        }
        assert_eq!(last, 1.0);
    }

    fn unit_square_mesh() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        }
    }

    #[test]
    fn sample_mesh_inside_square() {
        let pts = sample_mesh(&unit_square_mesh(), 4, 5).unwrap();
        assert_eq!(pts.len(), 4);
        for p in &pts {
            assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
            assert_eq!(p.z, 0.0);
        }
        assert_eq!(pts, sample_mesh(&unit_square_mesh(), 4, 5).unwrap());
        assert_ne!(pts, sample_mesh(&unit_square_mesh(), 4, 6).unwrap());
    }

    #[test]
    fn sample_mesh_area_weighted() {
        // One triangle has 4x the area of the other; counts follow.
        let mesh = TriangleMesh {
            vertices: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(10.0, 0.0, 0.0),
                Vec3::new(12.0, 0.0, 0.0),
                Vec3::new(10.0, 2.0, 0.0),
            ],
            triangles: vec![[0, 1, 2], [3, 4, 5]],
        };
        let pts = sample_mesh(&mesh, 20_000, 8).unwrap();
        let big = pts.iter().filter(|p| p.x > 5.0).count() as f64;
        let frac = big / pts.len() as f64;
        // Binomial noise around 0.8.
        assert!((frac - 0.8).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn zero_area_mesh_is_error() {
        let mesh = TriangleMesh {
            vertices: vec![Vec3::ZERO, Vec3::ZERO, Vec3::ZERO],
            triangles: vec![[0, 1, 2]],
        };
        assert!(matches!(sample_mesh(&mesh, 10, 0), Err(EvalError::ZeroAreaMesh)));
    }
}
