//! Synthetic meshes for tests, examples and the toy pipeline.

use std::collections::HashMap;

use super::{BoundaryFace, HexMesh, Patch, SurfaceMesh, Vec3, CELL_FACES};

/// Structured `n[0] x n[1] x n[2]` hex grid whose lattice node `(i, j, k)` is
/// placed at `map(i, j, k)`. `label` picks the patch of the boundary side
/// `(axis, is_max)`. The map must be orientation preserving.
pub fn structured_hex_mesh(
    n: [usize; 3],
    map: impl Fn(usize, usize, usize) -> Vec3,
    label: impl Fn(usize, bool) -> Patch,
) -> HexMesh {
    let [nx, ny, nz] = n;
    let id = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(map(i, j, k));
            }
        }
    }
    let mut cells = Vec::with_capacity(nx * ny * nz);
    let mut boundary_faces = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let cell: [usize; 8] = std::array::from_fn(|a| id(i + (a & 1), j + ((a >> 1) & 1), k + ((a >> 2) & 1)));
                let on_side = [(i == 0, i + 1 == nx), (j == 0, j + 1 == ny), (k == 0, k + 1 == nz)];
                for (axis, &(lo, hi)) in on_side.iter().enumerate() {
                    if lo {
                        let q = CELL_FACES[2 * axis].map(|a| cell[a]);
                        boundary_faces.push(BoundaryFace { vertices: q, patch: label(axis, false) });
                    }
                    if hi {
                        let q = CELL_FACES[2 * axis + 1].map(|a| cell[a]);
                        boundary_faces.push(BoundaryFace { vertices: q, patch: label(axis, true) });
                    }
                }
                cells.push(cell);
            }
        }
    }
    HexMesh { vertices, cells, boundary_faces }
}

/// Axis-aligned box grid. The `z = min` side is the inlet, `z = max` is
/// `outlet_1`, all other sides are wall.
pub fn box_hex_mesh(n: [usize; 3], min: Vec3, max: Vec3) -> HexMesh {
    let h = (max - min).component_div(&Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64));
    structured_hex_mesh(
        n,
        |i, j, k| {
            let p = min + Vec3::new(i as f64 * h.x, j as f64 * h.y, k as f64 * h.z);
            // Pin the far faces exactly to `max`.
            Vec3::new(
                if i == n[0] { max.x } else { p.x },
                if j == n[1] { max.y } else { p.y },
                if k == n[2] { max.z } else { p.z },
            )
        },
        axial_labels,
    )
}

fn axial_labels(axis: usize, is_max: bool) -> Patch {
    match (axis, is_max) {
        (2, false) => Patch::Inlet,
        (2, true) => Patch::Outlet(1),
        _ => Patch::Wall,
    }
}

/// Square-to-disc map: the square ring of half-width `s` is blended toward
/// the circle of radius `s` with weight `s`, so the outer ring is a circle.
fn square_to_disc(x: f64, y: f64) -> (f64, f64) {
    let s = x.abs().max(y.abs());
    let r = x.hypot(y);
    if r == 0.0 {
        return (0.0, 0.0);
    }
    let w = s;
    let scale = (1.0 - w) + w * s / r;
    (x * scale, y * scale)
}

/// Hex cylinder along `z` with radius `radius`, `z ∈ [0, length]`; `n_cross`
/// cells across the square cross-section, `n_axial` along the axis. The
/// lateral surface is wall, `z = 0` inlet and `z = length` `outlet_1`.
pub fn cylinder_hex_mesh(radius: f64, length: f64, n_cross: usize, n_axial: usize) -> HexMesh {
    let n = n_cross;
    structured_hex_mesh(
        [n, n, n_axial],
        |i, j, k| {
            let x = -1.0 + 2.0 * i as f64 / n as f64;
            let y = -1.0 + 2.0 * j as f64 / n as f64;
            let (u, v) = if i == 0 || j == 0 || i == n || j == n {
                // Exactly on the circle.
                let r = x.hypot(y);
                (x / r, y / r)
            } else {
                square_to_disc(x, y)
            };
            let z = if k == n_axial { length } else { length * k as f64 / n_axial as f64 };
            Vec3::new(radius * u, radius * v, z)
        },
        axial_labels,
    )
}

/// Geodesic sphere from a subdivided icosahedron: 12, 42, 162, 642, ... vertices.
pub fn icosphere(subdivisions: usize, radius: f64) -> SurfaceMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3::from(*p).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>| {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vertices.push(((vertices[a] + vertices[b]) * 0.5).normalize());
                vertices.len() - 1
            })
        };
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = vertices.into_iter().map(|v| v * radius).collect();
    SurfaceMesh::new(vertices, faces).expect("icosphere is well formed")
}

/// Icosphere scaled by `axes` along x, y, z.
pub fn ellipsoid(subdivisions: usize, axes: Vec3) -> SurfaceMesh {
    let s = icosphere(subdivisions, 1.0);
    let v = s.vertices.iter().map(|p| p.component_mul(&axes)).collect();
    s.with_vertices(v).expect("same vertex count")
}
