//! Mesh and field data structures with the geometric kernels shared by the
//! registration, interpolant, transport and analysis modules.
//!
//! Coordinates are plain `f64` triples in millimetres by convention. Hexahedral
//! cells use the bit-ordered reference cube: local vertex `a` sits at
//! `(a & 1, (a >> 1) & 1, (a >> 2) & 1)`.

pub mod generate;
pub mod hex;
pub mod io;
pub mod kdtree;
pub mod section;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use hex::{
    approx_aspect_ratio, detect_inverted_cells, min_jacobian_det, trilinear_jacobian, SampleSet,
};
pub use kdtree::{knn_graph, KdTree};
pub use section::{cross_section, Section};

pub type Vec3 = Vector3<f64>;

/// Triangles with area below this are rejected as degenerate (mm²).
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Boundary patch label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Patch {
    Wall,
    Inlet,
    Outlet(u8),
}

impl fmt::Display for Patch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Patch::Wall => write!(f, "wall"),
            Patch::Inlet => write!(f, "inlet"),
            Patch::Outlet(i) => write!(f, "outlet_{i}"),
        }
    }
}

impl FromStr for Patch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wall" => Ok(Patch::Wall),
            "inlet" => Ok(Patch::Inlet),
            _ => s
                .strip_prefix("outlet_")
                .and_then(|n| n.parse::<u8>().ok())
                .map(Patch::Outlet)
                .ok_or_else(|| Error::invalid(format!("unknown patch label \"{s}\""))),
        }
    }
}

impl Serialize for Patch {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Patch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Triangulated boundary surface.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// One label per triangle.
    pub patches: Vec<Patch>,
    pub normals: Option<Vec<Vec3>>,
}

impl SurfaceMesh {
    /// Builds a mesh with every triangle labelled as wall.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let patches = vec![Patch::Wall; triangles.len()];
        Self::with_patches(vertices, triangles, patches)
    }

    pub fn with_patches(
        vertices: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
        patches: Vec<Patch>,
    ) -> Result<Self> {
        let mesh = SurfaceMesh { vertices, triangles, patches, normals: None };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches.len() != self.triangles.len() {
            return Err(Error::invalid(format!(
                "{} patch labels for {} triangles",
                self.patches.len(),
                self.triangles.len()
            )));
        }
        let n = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::invalid(format!("triangle {t} references a missing vertex")));
            }
            if self.triangle_area(t) <= DEGENERATE_AREA {
                return Err(Error::invalid(format!("triangle {t} is degenerate")));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(Error::invalid("normal count differs from vertex count"));
            }
        }
        Ok(())
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    /// Area-weighted vertex normals from triangle orientation.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut normals = vec![Vec3::zeros(); self.vertices.len()];
        for &[a, b, c] in &self.triangles {
            let n = (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]));
            for i in [a, b, c] {
                normals[i] += n;
            }
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::from_points(&self.vertices)
    }

    /// Vertex indices touched by triangles carrying one of `patches`.
    pub fn patch_vertices(&self, patches: &[Patch]) -> Vec<usize> {
        let mut used = vec![false; self.vertices.len()];
        for (tri, p) in self.triangles.iter().zip(&self.patches) {
            if patches.contains(p) {
                for &i in tri {
                    used[i] = true;
                }
            }
        }
        (0..used.len()).filter(|&i| used[i]).collect()
    }

    /// Returns a copy with vertices replaced; connectivity and labels unchanged.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::invalid("vertex count mismatch"));
        }
        Ok(SurfaceMesh {
            vertices,
            triangles: self.triangles.clone(),
            patches: self.patches.clone(),
            normals: None,
        })
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoundingBox {
    pub fn from_points(points: &[Vec3]) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            for k in 0..3 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        BoundingBox { min, max }
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }
}

/// Quadrilateral boundary face of a hexahedral mesh, listed counter-clockwise
/// when seen from outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryFace {
    pub vertices: [usize; 4],
    pub patch: Patch,
}

/// Local vertex quadruples of the six cube faces, oriented outward.
pub const CELL_FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2], // x = 0
    [1, 3, 7, 5], // x = 1
    [0, 1, 5, 4], // y = 0
    [2, 6, 7, 3], // y = 1
    [0, 2, 3, 1], // z = 0
    [4, 5, 7, 6], // z = 1
];

/// The twelve cube edges as local vertex pairs.
pub const CELL_EDGES: [[usize; 2]; 12] = [
    [0, 1], [2, 3], [4, 5], [6, 7],
    [0, 2], [1, 3], [4, 6], [5, 7],
    [0, 4], [1, 5], [2, 6], [3, 7],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HexMesh {
    pub vertices: Vec<Vec3>,
    pub cells: Vec<[usize; 8]>,
    pub boundary_faces: Vec<BoundaryFace>,
}

impl HexMesh {
    pub fn cell_vertices(&self, c: usize) -> [Vec3; 8] {
        let cell = &self.cells[c];
        std::array::from_fn(|a| self.vertices[cell[a]])
    }

    pub fn validate_indices(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.cells.iter().flatten().any(|&i| i >= n) {
            return Err(Error::invalid("hex cell references a missing vertex"));
        }
        if self.boundary_faces.iter().flat_map(|f| f.vertices).any(|i| i >= n) {
            return Err(Error::invalid("boundary face references a missing vertex"));
        }
        Ok(())
    }

    pub fn boundary_vertex_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.vertices.len()];
        for f in &self.boundary_faces {
            for &v in &f.vertices {
                flags[v] = true;
            }
        }
        flags
    }

    pub fn boundary_vertices(&self) -> Vec<usize> {
        let flags = self.boundary_vertex_flags();
        (0..flags.len()).filter(|&i| flags[i]).collect()
    }

    /// Sorted, deduplicated edge neighbours of every vertex.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nbrs = vec![Vec::new(); self.vertices.len()];
        for cell in &self.cells {
            for [a, b] in CELL_EDGES {
                nbrs[cell[a]].push(cell[b]);
                nbrs[cell[b]].push(cell[a]);
            }
        }
        for n in &mut nbrs {
            n.sort_unstable();
            n.dedup();
        }
        nbrs
    }

    /// Cells incident to each vertex, ascending.
    pub fn vertex_cells(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.vertices.len()];
        for (c, cell) in self.cells.iter().enumerate() {
            for &v in cell {
                if out[v].last() != Some(&c) {
                    out[v].push(c);
                }
            }
        }
        out
    }

    /// Triangulated boundary surface, reusing the hex vertex indices (all hex
    /// vertices are kept so indices line up; interior ones are unreferenced).
    pub fn boundary_surface(&self) -> SurfaceMesh {
        let mut triangles = Vec::with_capacity(2 * self.boundary_faces.len());
        let mut patches = Vec::with_capacity(2 * self.boundary_faces.len());
        for f in &self.boundary_faces {
            let [a, b, c, d] = f.vertices;
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
            patches.push(f.patch.clone());
            patches.push(f.patch.clone());
        }
        SurfaceMesh { vertices: self.vertices.clone(), triangles, patches, normals: None }
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::from_points(&self.vertices)
    }

    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> HexMesh {
        HexMesh {
            vertices,
            cells: self.cells.clone(),
            boundary_faces: self.boundary_faces.clone(),
        }
    }

    /// Uniform refinement: every cell splits into eight children. Coarse
    /// vertices keep their indices; new vertices are appended in cell order.
    /// Returns the refined mesh and the child-to-parent cell map.
    pub fn refine(&self) -> (HexMesh, Vec<usize>) {
        let mut vertices = self.vertices.clone();
        let mut edge_mid: HashMap<[usize; 2], usize> = HashMap::new();
        let mut face_mid: HashMap<[usize; 4], usize> = HashMap::new();
        let mut cells = Vec::with_capacity(8 * self.cells.len());
        let mut parents = Vec::with_capacity(8 * self.cells.len());

        let sorted4 = |q: [usize; 4]| {
            let mut k = q;
            k.sort_unstable();
            k
        };

        for (c, cell) in self.cells.iter().enumerate() {
            let corners = self.cell_vertices(c);
            // 3x3x3 lattice of local node ids, index (i, j, k) in {0,1,2}^3.
            let mut lattice = [0usize; 27];
            for k in 0..3 {
                for j in 0..3 {
                    for i in 0..3 {
                        let idx = i + 3 * j + 9 * k;
                        let odd = [i == 1, j == 1, k == 1];
                        let n_mid = odd.iter().filter(|&&b| b).count();
                        let corner = |ii: usize, jj: usize, kk: usize| {
                            cell[(ii / 2) | ((jj / 2) << 1) | ((kk / 2) << 2)]
                        };
                        let xi = Vec3::new(i as f64, j as f64, k as f64) * 0.5;
                        let id = match n_mid {
                            0 => corner(i, j, k),
                            1 => {
                                let (a, b) = if odd[0] {
                                    (corner(0, j, k), corner(2, j, k))
                                } else if odd[1] {
                                    (corner(i, 0, k), corner(i, 2, k))
                                } else {
                                    (corner(i, j, 0), corner(i, j, 2))
                                };
                                let key = [a.min(b), a.max(b)];
                                *edge_mid.entry(key).or_insert_with(|| {
                                    vertices.push(hex::trilinear_map(&corners, &xi));
                                    vertices.len() - 1
                                })
                            }
                            2 => {
                                let q = if !odd[0] {
                                    [corner(i, 0, 0), corner(i, 2, 0), corner(i, 0, 2), corner(i, 2, 2)]
                                } else if !odd[1] {
                                    [corner(0, j, 0), corner(2, j, 0), corner(0, j, 2), corner(2, j, 2)]
                                } else {
                                    [corner(0, 0, k), corner(2, 0, k), corner(0, 2, k), corner(2, 2, k)]
                                };
                                *face_mid.entry(sorted4(q)).or_insert_with(|| {
                                    vertices.push(hex::trilinear_map(&corners, &xi));
                                    vertices.len() - 1
                                })
                            }
                            _ => {
                                vertices.push(hex::trilinear_map(&corners, &xi));
                                vertices.len() - 1
                            }
                        };
                        lattice[idx] = id;
                    }
                }
            }
            for ck in 0..2 {
                for cj in 0..2 {
                    for ci in 0..2 {
                        let child: [usize; 8] = std::array::from_fn(|a| {
                            let (di, dj, dk) = (a & 1, (a >> 1) & 1, (a >> 2) & 1);
                            lattice[(ci + di) + 3 * (cj + dj) + 9 * (ck + dk)]
                        });
                        cells.push(child);
                        parents.push(c);
                    }
                }
            }
        }

        let mut boundary_faces = Vec::with_capacity(4 * self.boundary_faces.len());
        for f in &self.boundary_faces {
            let [a, b, c, d] = f.vertices;
            let e = |x: usize, y: usize| edge_mid[&[x.min(y), x.max(y)]];
            let (ab, bc, cd, da) = (e(a, b), e(b, c), e(c, d), e(d, a));
            let m = face_mid[&sorted4(f.vertices)];
            for q in [[a, ab, m, da], [ab, b, bc, m], [m, bc, c, cd], [da, m, cd, d]] {
                boundary_faces.push(BoundaryFace { vertices: q, patch: f.patch.clone() });
            }
        }
        (HexMesh { vertices, cells, boundary_faces }, parents)
    }
}

/// Nested hexahedral meshes, coarsest first. Level `k` vertices are the first
/// `levels[k].vertices.len()` vertices of level `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct HexHierarchy {
    pub levels: Vec<HexMesh>,
    /// `parent_maps[k][child]` is the level-`k` parent of a level-`k + 1` cell.
    pub parent_maps: Vec<Vec<usize>>,
    pub boundary_flags: Vec<Vec<bool>>,
}

impl HexHierarchy {
    /// Builds `n_levels` nested levels by uniform refinement of `base`.
    pub fn from_base(base: HexMesh, n_levels: usize) -> Self {
        let mut levels = vec![base];
        let mut parent_maps = Vec::new();
        for _ in 1..n_levels.max(1) {
            let (fine, parents) = levels.last().unwrap().refine();
            levels.push(fine);
            parent_maps.push(parents);
        }
        let boundary_flags = levels.iter().map(HexMesh::boundary_vertex_flags).collect();
        HexHierarchy { levels, parent_maps, boundary_flags }
    }

    pub fn finest(&self) -> &HexMesh {
        self.levels.last().expect("hierarchy has at least one level")
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::invalid("hierarchy has no levels"));
        }
        if self.parent_maps.len() + 1 != self.levels.len()
            || self.boundary_flags.len() != self.levels.len()
        {
            return Err(Error::invalid("hierarchy map counts do not match level count"));
        }
        for (k, level) in self.levels.iter().enumerate() {
            level.validate_indices()?;
            if self.boundary_flags[k].len() != level.vertices.len() {
                return Err(Error::invalid(format!("level {k}: boundary flag count mismatch")));
            }
        }
        for (k, parents) in self.parent_maps.iter().enumerate() {
            let (coarse, fine) = (&self.levels[k], &self.levels[k + 1]);
            if parents.len() != fine.cells.len() || fine.cells.len() != 8 * coarse.cells.len() {
                return Err(Error::invalid(format!("level {}: not a uniform refinement", k + 1)));
            }
            let mut counts = vec![0usize; coarse.cells.len()];
            for &p in parents {
                if p >= counts.len() {
                    return Err(Error::invalid("parent map references a missing cell"));
                }
                counts[p] += 1;
            }
            if counts.iter().any(|&c| c != 8) {
                return Err(Error::invalid(format!("level {}: parent without 8 children", k + 1)));
            }
        }
        self.check_shared_vertices()
    }

    /// Inherited vertices must agree bit-for-bit across levels.
    pub fn check_shared_vertices(&self) -> Result<()> {
        for k in 0..self.levels.len().saturating_sub(1) {
            let (coarse, fine) = (&self.levels[k], &self.levels[k + 1]);
            if fine.vertices.len() < coarse.vertices.len() {
                return Err(Error::invalid(format!("level {} has fewer vertices than level {k}", k + 1)));
            }
            if let Some(i) = (0..coarse.vertices.len()).find(|&i| coarse.vertices[i] != fine.vertices[i]) {
                return Err(Error::invalid(format!(
                    "shared vertex {i} differs between levels {k} and {}",
                    k + 1
                )));
            }
        }
        Ok(())
    }
}

/// Conditioning variable: ordered centerline control points with inscribed radii.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterlineEncoding {
    pub points: Vec<Vec3>,
    pub radii: Vec<f64>,
}

impl CenterlineEncoding {
    pub fn new(points: Vec<Vec3>, radii: Vec<f64>) -> Result<Self> {
        let c = CenterlineEncoding { points, radii };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.radii.len() {
            return Err(Error::invalid("centerline points and radii differ in length"));
        }
        if self.radii.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::invalid("centerline radii must be strictly positive"));
        }
        Ok(())
    }

    pub fn n_cntrl(&self) -> usize {
        self.points.len()
    }

    /// `[x, y, z, r]` per control point.
    pub fn flatten(&self) -> Vec<f64> {
        self.points
            .iter()
            .zip(&self.radii)
            .flat_map(|(p, &r)| [p.x, p.y, p.z, r])
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    #[serde(rename = "m/s")]
    MetersPerSecond,
    #[serde(rename = "Pa")]
    Pascal,
    #[serde(rename = "mm")]
    Millimeter,
    #[serde(rename = "1")]
    Dimensionless,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshKind {
    Surface,
    Hex,
}

/// Identifies the mesh a field lives on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshRef {
    pub kind: MeshKind,
    pub vertex_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "lowercase")]
pub enum FieldValues {
    Scalar(Vec<f64>),
    Vector(Vec<Vec3>),
}

impl FieldValues {
    pub fn len(&self) -> usize {
        match self {
            FieldValues::Scalar(v) => v.len(),
            FieldValues::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn collect(kind_of: &FieldValues, values: Vec<FieldValue>) -> FieldValues {
        match kind_of {
            FieldValues::Scalar(_) => FieldValues::Scalar(values.into_iter().map(|v| v.scalar()).collect()),
            FieldValues::Vector(_) => FieldValues::Vector(values.into_iter().map(|v| v.vector()).collect()),
        }
    }
}

/// A single interpolated field value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FieldValue {
    Scalar(f64),
    Vector(Vec3),
}

impl FieldValue {
    pub fn scalar(self) -> f64 {
        match self {
            FieldValue::Scalar(s) => s,
            FieldValue::Vector(v) => v.norm(),
        }
    }

    pub fn vector(self) -> Vec3 {
        match self {
            FieldValue::Vector(v) => v,
            FieldValue::Scalar(s) => Vec3::new(s, 0.0, 0.0),
        }
    }
}

/// Per-vertex scalar or vector field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodalField {
    pub mesh: MeshRef,
    pub units: Units,
    pub values: FieldValues,
}

impl NodalField {
    pub fn new(mesh: MeshRef, units: Units, values: FieldValues) -> Result<Self> {
        if values.len() != mesh.vertex_count {
            return Err(Error::invalid(format!(
                "field has {} values for {} vertices",
                values.len(),
                mesh.vertex_count
            )));
        }
        Ok(NodalField { mesh, units, values })
    }

    pub fn on_hex(mesh: &HexMesh, units: Units, values: FieldValues) -> Result<Self> {
        let r = MeshRef { kind: MeshKind::Hex, vertex_count: mesh.vertices.len(), id: None };
        Self::new(r, units, values)
    }

    pub fn on_surface(mesh: &SurfaceMesh, units: Units, values: FieldValues) -> Result<Self> {
        let r = MeshRef { kind: MeshKind::Surface, vertex_count: mesh.vertices.len(), id: None };
        Self::new(r, units, values)
    }
}
