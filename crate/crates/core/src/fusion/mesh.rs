//! Isosurface extraction at V = 0 by marching tetrahedra.
//!
//! Each cell of eight voxel centers splits into six tetrahedra around its
//! main diagonal; crossings are linearly interpolated along tetrahedron
//! edges and shared through an edge cache, so the sheet is watertight
//! wherever the volume is observed. Cells touching any unobserved voxel
//! (weight 0) produce no faces.

use super::TsdfVolume;
use crate::geom::Vec3;
use std::collections::HashMap;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Index bounds and NaN-freedom.
    pub fn validate(&self) -> bool {
        let n = self.vertices.len() as u32;
        self.triangles.iter().all(|t| t.iter().all(|i| *i < n))
            && self
                .vertices
                .iter()
                .all(|v| v.x.is_finite() && v.y.is_finite() && v.z.is_finite())
    }
}

/// Cube corner offsets, index = bit pattern order used by `CUBE_TETS`.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Six tetrahedra around the 0-6 diagonal; the same split in every cell makes
/// face diagonals agree between neighboring cells.
const CUBE_TETS: [[usize; 4]; 6] = [
    [0, 5, 1, 6],
    [0, 1, 2, 6],
    [0, 2, 3, 6],
    [0, 3, 7, 6],
    [0, 7, 4, 6],
    [0, 4, 5, 6],
];

pub fn extract_mesh(volume: &TsdfVolume) -> TriangleMesh {
    let [nx, ny, nz] = volume.dims();
    let mut mesh = TriangleMesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let mut edge_cache: HashMap<(u64, u64), u32> = HashMap::new();

    let mut corner_ids = [0u64; 8];
    let mut corner_pos = [Vec3::ZERO; 8];
    let mut corner_val = [0.0f64; 8];

    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let mut observed = true;
                let mut all_pos = true;
                let mut all_neg = true;
                for (c, off) in CORNERS.iter().enumerate() {
                    let (cx, cy, cz) = (x + off[0], y + off[1], z + off[2]);
                    let idx = volume.index(cx, cy, cz);
                    if volume.weight(idx) == 0 {
                        observed = false;
                        break;
                    }
                    let v = volume.value(idx) as f64;
                    corner_ids[c] = idx as u64;
                    corner_pos[c] = volume.voxel_center(cx, cy, cz);
                    corner_val[c] = v;
                    all_pos &= v >= 0.0;
                    all_neg &= v < 0.0;
                }
                if !observed || all_pos || all_neg {
                    continue;
                }
                for tet in &CUBE_TETS {
                    polygonize_tet(
                        tet.map(|c| corner_ids[c]),
                        tet.map(|c| corner_pos[c]),
                        tet.map(|c| corner_val[c]),
                        &mut edge_cache,
                        &mut mesh,
                    );
                }
            }
        }
    }
    mesh
}

fn polygonize_tet(
    ids: [u64; 4],
    pos: [Vec3; 4],
    val: [f64; 4],
    cache: &mut HashMap<(u64, u64), u32>,
    mesh: &mut TriangleMesh,
) {
    let inside: Vec<usize> = (0..4).filter(|&i| val[i] < 0.0).collect();
    let outside: Vec<usize> = (0..4).filter(|&i| val[i] >= 0.0).collect();

    let mut edge_vertex = |a: usize, b: usize| -> u32 {
        let key = (ids[a].min(ids[b]), ids[a].max(ids[b]));
        if let Some(&v) = cache.get(&key) {
            return v;
        }
        let (va, vb) = (val[a], val[b]);
        let t = if (va - vb).abs() < 1e-12 { 0.5 } else { (va / (va - vb)).clamp(0.0, 1.0) };
        let p = pos[a] + (pos[b] - pos[a]) * t;
        mesh.vertices.push(p);
        let idx = (mesh.vertices.len() - 1) as u32;
        cache.insert(key, idx);
        idx
    };

    match inside.len() {
        1 => {
            let i = inside[0];
            let v0 = edge_vertex(i, outside[0]);
            let v1 = edge_vertex(i, outside[1]);
            let v2 = edge_vertex(i, outside[2]);
            mesh.triangles.push([v0, v1, v2]);
        }
        3 => {
            let o = outside[0];
            let v0 = edge_vertex(o, inside[0]);
            let v1 = edge_vertex(o, inside[1]);
            let v2 = edge_vertex(o, inside[2]);
            mesh.triangles.push([v0, v2, v1]);
        }
        2 => {
            let (i0, i1) = (inside[0], inside[1]);
            let (o0, o1) = (outside[0], outside[1]);
            let a = edge_vertex(i0, o0);
            let b = edge_vertex(i0, o1);
            let c = edge_vertex(i1, o1);
            let d = edge_vertex(i1, o0);
            mesh.triangles.push([a, b, c]);
            mesh.triangles.push([a, c, d]);
        }
        _ => {}
    }
}
