//! Mesh export (ASCII OBJ, binary little-endian PLY) and debug volume dumps.

use super::{FusionError, TriangleMesh, TsdfVolume};
use crate::geom::Vec3;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub fn save_obj(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<(), FusionError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

pub fn save_ply(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<(), FusionError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         element face {}\nproperty list uchar uint vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for v in &mesh.vertices {
        w.write_all(&(v.x as f32).to_le_bytes())?;
        w.write_all(&(v.y as f32).to_le_bytes())?;
        w.write_all(&(v.z as f32).to_le_bytes())?;
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for i in t {
            w.write_all(&i.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub raw_file: String,
}

/// Writes `<stem>.json` and `<stem>.raw` (all V values as f32 plane-major,
/// then all W values); returns the sidecar path.
pub fn save_volume(
    volume: &TsdfVolume,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<PathBuf, FusionError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let raw_name = format!("{stem}.raw");
    {
        let mut w = BufWriter::new(std::fs::File::create(dir.join(&raw_name))?);
        for idx in 0..volume.len() {
            w.write_all(&volume.value(idx).to_le_bytes())?;
        }
        for idx in 0..volume.len() {
            w.write_all(&(volume.weight(idx) as f32).to_le_bytes())?;
        }
    }
    let sidecar = VolumeSidecar {
        origin: volume.origin().to_array(),
        voxel_size: volume.voxel_size(),
        dims: volume.dims(),
        raw_file: raw_name,
    };
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar).expect("serializable"))?;
    Ok(path)
}

pub fn load_volume(sidecar_path: impl AsRef<Path>) -> Result<TsdfVolume, FusionError> {
    let sidecar_path = sidecar_path.as_ref();
    let sidecar: VolumeSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)
        .map_err(|e| FusionError::Sidecar(e.to_string()))?;
    let dir = sidecar_path.parent().unwrap_or_else(|| Path::new("."));
    let mut bytes = Vec::new();
    std::fs::File::open(dir.join(&sidecar.raw_file))?.read_to_end(&mut bytes)?;
    let n = sidecar.dims[0] * sidecar.dims[1] * sidecar.dims[2];
    if bytes.len() != n * 8 {
        return Err(FusionError::Sidecar(format!(
            "raw file holds {} bytes, expected {}",
            bytes.len(),
            n * 8
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut volume = TsdfVolume::new(Vec3::from(sidecar.origin), sidecar.voxel_size, sidecar.dims)?;
    for idx in 0..n {
        let w = floats[n + idx].round().max(0.0) as u32;
        volume.set_voxel(idx, floats[idx], w);
    }
    Ok(volume)
}
