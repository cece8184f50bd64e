//! Isosurface extraction from the fused distance volume via marching
//! cubes.
//!
//! Cells are the unit cubes between eight neighboring grid samples. A
//! cell participates only when all eight corners have been observed
//! (weight > 0), which confines the mesh to scanned space. Vertices on
//! shared cell edges are emitted once and reused, so the resulting mesh
//! is crack-free and watertight wherever the isosurface closes inside
//! the observed region. Interpolation parameters within `SNAP_EPS` of a
//! corner snap onto it, preventing near-degenerate slivers; triangles
//! that collapse to fewer than three distinct vertices are dropped.

use nalgebra::Point3;
use std::collections::HashMap;

use crate::geometry::TriangleMesh;
use crate::mc_tables::{EDGE_CORNERS, EDGE_TABLE, TRI_TABLE};
use crate::tsdf::TsdfVolume;
use crate::{Error, Result};

/// Interpolation parameter below which an edge vertex merges with the
/// cell corner.
const SNAP_EPS: f64 = 1e-9;

/// Identity of an emitted vertex: either exactly at a grid sample or on
/// the edge leaving a grid sample along one axis. Keys dedupe vertices
/// across neighboring cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum VertexKey {
    Corner(usize),
    Edge(usize, u8),
}

/// Extracts the `iso` level set of the volume as a triangle mesh in
/// world coordinates.
pub fn marching_cubes(volume: &TsdfVolume, iso: f64) -> Result<TriangleMesh> {
    if !iso.is_finite() {
        return Err(Error::InvalidInput(format!("iso level must be finite, got {iso}")));
    }
    let [rx, ry, rz] = volume.resolution;
    let values = volume.values();
    let weights = volume.weights();

    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut index_of: HashMap<VertexKey, usize> = HashMap::new();

    // Per-corner offsets matching the table numbering.
    const CORNER_OFFSETS: [(usize, usize, usize); 8] = [
        (0, 0, 0),
        (1, 0, 0),
        (1, 1, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
    ];

    for k in 0..rz - 1 {
        for j in 0..ry - 1 {
            for i in 0..rx - 1 {
                let mut corner_idx = [0usize; 8];
                let mut corner_val = [0.0f64; 8];
                let mut observed = true;
                for (c, &(dx, dy, dz)) in CORNER_OFFSETS.iter().enumerate() {
                    let idx = volume.voxel_index(i + dx, j + dy, k + dz);
                    if weights[idx] <= 0.0 {
                        observed = false;
                        break;
                    }
                    corner_idx[c] = idx;
                    corner_val[c] = values[idx];
                }
                if !observed {
                    continue;
                }
                let mut case = 0usize;
                for (c, &v) in corner_val.iter().enumerate() {
                    if v < iso {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }

                // Mesh vertex for each intersected edge of this cell.
                let mut edge_vertex = [usize::MAX; 12];
                for (e, &(ca, cb)) in EDGE_CORNERS.iter().enumerate() {
                    if EDGE_TABLE[case] & (1 << e) == 0 {
                        continue;
                    }
                    let (va, vb) = (corner_val[ca], corner_val[cb]);
                    let mut t = (iso - va) / (vb - va);
                    if !t.is_finite() {
                        t = 0.5;
                    }
                    let key = if t <= SNAP_EPS {
                        VertexKey::Corner(corner_idx[ca])
                    } else if t >= 1.0 - SNAP_EPS {
                        VertexKey::Corner(corner_idx[cb])
                    } else {
                        // Canonical form: measured from the lower grid
                        // index along the edge axis, so both adjacent
                        // cells compute the identical key and parameter.
                        let (lo, axis, forward) = canonical_edge(i, j, k, ca, cb, volume);
                        if !forward {
                            t = 1.0 - t;
                        }
                        VertexKey::Edge(lo, axis)
                    };
                    let next_index = vertices.len();
                    let entry = *index_of.entry(key).or_insert(next_index);
                    if entry == next_index {
                        let position = match key {
                            VertexKey::Corner(idx) => grid_point(volume, idx),
                            VertexKey::Edge(lo_idx, axis) => {
                                let p0 = grid_point(volume, lo_idx);
                                let mut p = p0;
                                p[axis as usize] += t * volume.voxel_size;
                                p
                            }
                        };
                        vertices.push(position);
                    }
                    edge_vertex[e] = entry;
                }

                let tri_row = &TRI_TABLE[case];
                let mut t_idx = 0;
                while tri_row[t_idx] >= 0 {
                    let a = edge_vertex[tri_row[t_idx] as usize];
                    let b = edge_vertex[tri_row[t_idx + 1] as usize];
                    let c = edge_vertex[tri_row[t_idx + 2] as usize];
                    t_idx += 3;
                    if a == b || b == c || a == c {
                        continue;
                    }
                    faces.push([a, c, b]);
                }
            }
        }
    }

    TriangleMesh::new(vertices, faces)
}

fn grid_point(volume: &TsdfVolume, linear: usize) -> Point3<f64> {
    let rx = volume.resolution[0];
    let ry = volume.resolution[1];
    let i = linear % rx;
    let j = (linear / rx) % ry;
    let k = linear / (rx * ry);
    volume.voxel_point(i, j, k)
}

/// Lower-corner linear index and axis of the cell edge (ca, cb); also
/// whether (ca → cb) runs in the +axis direction.
fn canonical_edge(
    i: usize,
    j: usize,
    k: usize,
    ca: usize,
    cb: usize,
    volume: &TsdfVolume,
) -> (usize, u8, bool) {
    let ga = corner_coords(i, j, k, ca);
    let gb = corner_coords(i, j, k, cb);
    for axis in 0..3 {
        if ga[axis] != gb[axis] {
            let forward = gb[axis] > ga[axis];
            let lo = if forward { ga } else { gb };
            return (
                volume.voxel_index(lo[0], lo[1], lo[2]),
                axis as u8,
                forward,
            );
        }
    }
    unreachable!("edge endpoints coincide");
}

fn corner_coords(i: usize, j: usize, k: usize, corner: usize) -> [usize; 3] {
    const OFF: [(usize, usize, usize); 8] = [
        (0, 0, 0),
        (1, 0, 0),
        (1, 1, 0),
        (0, 1, 0),
        (0, 0, 1),
        (1, 0, 1),
        (1, 1, 1),
        (0, 1, 1),
    ];
    let (dx, dy, dz) = OFF[corner];
    [i + dx, j + dy, k + dz]
}

/// Edge-manifoldness summary of a triangle mesh. A closed 2-manifold has
/// zero boundary and zero over-shared edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryStats {
    /// Edges used by exactly one triangle.
    pub boundary_edges: usize,
    /// Edges used by more than two triangles.
    pub non_manifold_edges: usize,
    /// Total distinct undirected edges.
    pub edges: usize,
}

pub fn boundary_stats(mesh: &TriangleMesh) -> BoundaryStats {
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for f in &mesh.faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            let key = (a.min(b), a.max(b));
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    BoundaryStats {
        boundary_edges: counts.values().filter(|&&c| c == 1).count(),
        non_manifold_edges: counts.values().filter(|&&c| c > 2).count(),
        edges: counts.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use std::collections::HashSet;

    fn sphere_volume(res: usize, voxel: f64, radius: f64) -> (TsdfVolume, Point3<f64>) {
        let span = voxel * (res - 1) as f64;
        let origin = Point3::new(0.0, 0.0, 0.0);
        let center = origin + Vector3::new(span / 2.0, span / 2.0, span / 2.0);
        let trunc = 4.0 * voxel;
        let mut vol = TsdfVolume::new([res, res, res], voxel, origin, trunc, 64.0).unwrap();
        vol.fill_with(|p| {
            let sd = (p - center).norm() - radius;
            ((sd / trunc).clamp(-1.0, 1.0), 1.0)
        });
        (vol, center)
    }

    #[test]
    fn all_positive_field_yields_empty_mesh() {
        let mut vol =
            TsdfVolume::new([8, 8, 8], 0.01, Point3::origin(), 0.04, 64.0).unwrap();
        vol.fill_with(|_| (1.0, 1.0));
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        assert!(mesh.is_empty());
    }

    #[test]
    fn unobserved_cells_are_skipped() {
        // A sphere field whose weights are all zero: the level set exists
        // numerically but was never observed, so no geometry may appear.
        let voxel = 0.01;
        let res = 32;
        let span = voxel * (res - 1) as f64;
        let center = Point3::new(span / 2.0, span / 2.0, span / 2.0);
        let trunc = 4.0 * voxel;
        let mut vol =
            TsdfVolume::new([res, res, res], voxel, Point3::origin(), trunc, 64.0).unwrap();
        vol.fill_with(|p| ((((p - center).norm() - 0.1) / trunc).clamp(-1.0, 1.0), 0.0));
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        assert!(mesh.is_empty());
    }

    #[test]
    fn sphere_vertices_lie_on_the_surface() {
        let radius = 0.2;
        let (vol, center) = sphere_volume(64, 0.01, radius);
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        assert!(mesh.vertices.len() > 1000, "only {} vertices", mesh.vertices.len());
        for v in &mesh.vertices {
            let d = (v - center).norm();
            assert!(
                (d - radius).abs() <= vol.voxel_size / 2.0,
                "vertex at radius {d} vs {radius}"
            );
        }
    }

    #[test]
    fn sphere_mesh_is_watertight_manifold_with_correct_volume() {
        let radius = 0.2;
        let (vol, _) = sphere_volume(64, 0.01, radius);
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        let stats = boundary_stats(&mesh);
        assert_eq!(stats.boundary_edges, 0, "open edges in sphere mesh");
        assert_eq!(stats.non_manifold_edges, 0);
        // Closed genus-0 surface: V − E + F = 2.
        let euler =
            mesh.vertices.len() as i64 - stats.edges as i64 + mesh.faces.len() as i64;
        assert_eq!(euler, 2);
        let expected = 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3);
        let volume = mesh.signed_volume();
        assert!(
            volume > 0.0,
            "negative signed volume: faces wound inward ({volume})"
        );
        assert!(
            (volume - expected).abs() / expected < 0.03,
            "volume {volume} vs {expected}"
        );
    }

    #[test]
    fn vertices_are_deduplicated() {
        let (vol, _) = sphere_volume(48, 0.01, 0.15);
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        let unique: HashSet<[u64; 3]> = mesh
            .vertices
            .iter()
            .map(|v| [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()])
            .collect();
        assert_eq!(unique.len(), mesh.vertices.len(), "duplicate vertex positions");
        // Every vertex must actually be referenced by some face.
        let mut used = vec![false; mesh.vertices.len()];
        for f in &mesh.faces {
            for &i in f {
                used[i] = true;
            }
        }
        assert!(used.iter().all(|&u| u), "orphan vertices present");
    }

    #[test]
    fn corner_exactly_on_iso_snaps_to_grid_point() {
        let mut vol =
            TsdfVolume::new([2, 2, 2], 0.01, Point3::origin(), 0.04, 64.0).unwrap();
        // Corner 0 sits exactly on the level set; its opposite corners are
        // inside. The snapped vertex must equal the grid point bit-for-bit.
        vol.fill_with(|p| {
            if p == Point3::origin() {
                (0.0, 1.0)
            } else if p.z > 0.005 {
                (-0.5, 1.0)
            } else {
                (0.25, 1.0)
            }
        });
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        assert!(!mesh.is_empty());
        assert!(
            mesh.vertices.iter().any(|v| *v == Point3::origin()),
            "no vertex snapped to the corner"
        );
    }

    #[test]
    fn open_sheet_reports_boundary_edges() {
        // A plane cutting the whole volume produces a sheet that ends at
        // the volume walls.
        let mut vol =
            TsdfVolume::new([16, 16, 16], 0.01, Point3::origin(), 0.04, 64.0).unwrap();
        vol.fill_with(|p| (p.z - 0.071, 1.0));
        let mesh = marching_cubes(&vol, 0.0).unwrap();
        assert!(!mesh.is_empty());
        let stats = boundary_stats(&mesh);
        assert!(stats.boundary_edges > 0);
        assert_eq!(stats.non_manifold_edges, 0);
    }

    #[test]
    fn rejects_non_finite_iso() {
        let (vol, _) = sphere_volume(8, 0.01, 0.02);
        assert!(marching_cubes(&vol, f64::NAN).is_err());
    }
}
