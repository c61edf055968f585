//! Point location, field interpolation and planar cross-sections.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::hex::{shape_values, trilinear_jacobian, trilinear_map};
use super::{BoundingBox, FieldValue, FieldValues, HexMesh, NodalField, SurfaceMesh, Vec3};
use crate::error::{Error, Result};

/// Interpolation stencil: `(vertex, weight)` pairs with weights summing to one.
pub type Stencil = Vec<(usize, f64)>;

/// Evaluates a stencil so that constant data is reproduced exactly.
pub fn apply_stencil(values: &FieldValues, stencil: &[(usize, f64)]) -> FieldValue {
    let anchor = stencil[0].0;
    match values {
        FieldValues::Scalar(v) => {
            let base = v[anchor];
            FieldValue::Scalar(base + stencil[1..].iter().map(|&(i, w)| w * (v[i] - base)).sum::<f64>())
        }
        FieldValues::Vector(v) => {
            let base = v[anchor];
            FieldValue::Vector(base + stencil[1..].iter().fold(Vec3::zeros(), |acc, &(i, w)| acc + w * (v[i] - base)))
        }
    }
}

/// Cell search over a hex mesh via a uniform bucket grid of cell boxes.
#[derive(Debug, Clone)]
pub struct HexLocator {
    bbox: BoundingBox,
    dims: [usize; 3],
    buckets: Vec<Vec<usize>>,
    cell_boxes: Vec<BoundingBox>,
}

const LOCATE_TOL: f64 = 1e-9;

impl HexLocator {
    pub fn new(mesh: &HexMesh) -> Self {
        let bbox = mesh.bounding_box();
        let n = (mesh.cells.len() as f64).cbrt().ceil().max(1.0) as usize;
        let dims = [n, n, n];
        let mut buckets = vec![Vec::new(); n * n * n];
        let scale = bbox.diagonal().max(1e-300);
        let cell_boxes: Vec<BoundingBox> = (0..mesh.cells.len())
            .map(|c| {
                let mut b = BoundingBox::from_points(&mesh.cell_vertices(c));
                b.min -= Vec3::repeat(LOCATE_TOL * scale);
                b.max += Vec3::repeat(LOCATE_TOL * scale);
                b
            })
            .collect();
        let mut loc = HexLocator { bbox, dims, buckets: Vec::new(), cell_boxes };
        for (c, b) in loc.cell_boxes.iter().enumerate() {
            let lo = loc.bucket_coords(&b.min);
            let hi = loc.bucket_coords(&b.max);
            for k in lo[2]..=hi[2] {
                for j in lo[1]..=hi[1] {
                    for i in lo[0]..=hi[0] {
                        buckets[i + n * (j + n * k)].push(c);
                    }
                }
            }
        }
        loc.buckets = buckets;
        loc
    }

    fn bucket_coords(&self, p: &Vec3) -> [usize; 3] {
        std::array::from_fn(|k| {
            let ext = self.bbox.max[k] - self.bbox.min[k];
            if ext <= 0.0 {
                return 0;
            }
            let t = ((p[k] - self.bbox.min[k]) / ext * self.dims[k] as f64).floor();
            (t.max(0.0) as usize).min(self.dims[k] - 1)
        })
    }

    /// First cell (by index) containing `p`, with its reference coordinates.
    pub fn locate(&self, mesh: &HexMesh, p: &Vec3) -> Option<(usize, Vec3)> {
        if !self.bbox.contains(p, LOCATE_TOL * self.bbox.diagonal()) {
            return None;
        }
        let [i, j, k] = self.bucket_coords(p);
        let n = self.dims[0];
        for &c in &self.buckets[i + n * (j + n * k)] {
            if !self.cell_boxes[c].contains(p, 0.0) {
                continue;
            }
            if let Some(xi) = invert_trilinear(&mesh.cell_vertices(c), p) {
                return Some((c, xi));
            }
        }
        None
    }

    pub fn stencil(&self, mesh: &HexMesh, p: &Vec3) -> Option<Stencil> {
        self.locate(mesh, p).map(|(c, xi)| {
            let n = shape_values(&xi);
            (0..8).map(|a| (mesh.cells[c][a], n[a])).collect()
        })
    }
}

/// Newton inversion of the trilinear map; `Some(ξ)` (clamped to the cube)
/// when `p` lies in the cell up to a small tolerance.
pub fn invert_trilinear(cell: &[Vec3; 8], p: &Vec3) -> Option<Vec3> {
    let mut xi = Vec3::repeat(0.5);
    let scale = (cell[7] - cell[0]).norm().max(1e-300);
    for _ in 0..50 {
        let r = trilinear_map(cell, &xi) - p;
        let j: Matrix3<f64> = trilinear_jacobian(cell, &xi);
        let step = j.lu().solve(&r)?;
        xi -= step;
        if !xi.iter().all(|v| v.is_finite()) || xi.amax() > 10.0 {
            return None;
        }
        if step.norm() < 1e-14 || r.norm() < 1e-14 * scale {
            break;
        }
    }
    if (trilinear_map(cell, &xi) - p).norm() > 1e-9 * scale {
        return None;
    }
    if xi.iter().all(|&v| (-LOCATE_TOL..=1.0 + LOCATE_TOL).contains(&v)) {
        Some(xi.map(|v| v.clamp(0.0, 1.0)))
    } else {
        None
    }
}

/// Closest point on triangle `abc` to `p`, as barycentric weights.
pub fn closest_point_barycentric(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> [f64; 3] {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

/// Deterministic jittered ray directions for parity tests.
fn ray_directions() -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    (0..8)
        .map(|_| {
            let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            v.normalize()
        })
        .collect()
}

enum Hit {
    Miss,
    Hit,
    Ambiguous,
}

fn ray_triangle(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Hit {
    const EPS: f64 = 1e-10;
    let e1 = b - a;
    let e2 = c - a;
    let pv = d.cross(&e2);
    let det = e1.dot(&pv);
    let scale = e1.norm() * e2.norm();
    if det.abs() < 1e-14 * scale {
        return Hit::Miss;
    }
    let inv = 1.0 / det;
    let tv = o - a;
    let u = tv.dot(&pv) * inv;
    let qv = tv.cross(&e1);
    let v = d.dot(&qv) * inv;
    let t = e2.dot(&qv) * inv;
    if u < -EPS || v < -EPS || u + v > 1.0 + EPS {
        return Hit::Miss;
    }
    let len = scale.sqrt();
    if t.abs() < EPS * len {
        return Hit::Ambiguous;
    }
    if t < 0.0 {
        return Hit::Miss;
    }
    if u < EPS || v < EPS || u + v > 1.0 - EPS {
        return Hit::Ambiguous;
    }
    Hit::Hit
}

/// Ray-casting parity test against a closed, consistently oriented surface.
pub fn point_in_surface(surface: &SurfaceMesh, bbox: &BoundingBox, p: &Vec3) -> bool {
    if !bbox.contains(p, 0.0) {
        return false;
    }
    'dirs: for d in ray_directions() {
        let mut count = 0usize;
        for &[a, b, c] in &surface.triangles {
            match ray_triangle(p, &d, &surface.vertices[a], &surface.vertices[b], &surface.vertices[c]) {
                Hit::Miss => {}
                Hit::Hit => count += 1,
                Hit::Ambiguous => continue 'dirs,
            }
        }
        return count % 2 == 1;
    }
    false
}

/// A mesh prepared for point queries.
pub enum Domain<'a> {
    Hex { mesh: &'a HexMesh, surface: SurfaceMesh, locator: HexLocator, bbox: BoundingBox },
    Surface { mesh: &'a SurfaceMesh, bbox: BoundingBox },
}

impl<'a> Domain<'a> {
    pub fn hex(mesh: &'a HexMesh) -> Self {
        Domain::Hex {
            mesh,
            surface: mesh.boundary_surface(),
            locator: HexLocator::new(mesh),
            bbox: mesh.bounding_box(),
        }
    }

    pub fn surface(mesh: &'a SurfaceMesh) -> Self {
        Domain::Surface { mesh, bbox: mesh.bounding_box() }
    }

    pub fn boundary(&self) -> &SurfaceMesh {
        match self {
            Domain::Hex { surface, .. } => surface,
            Domain::Surface { mesh, .. } => mesh,
        }
    }

    pub fn vertex_count(&self) -> usize {
        match self {
            Domain::Hex { mesh, .. } => mesh.vertices.len(),
            Domain::Surface { mesh, .. } => mesh.vertices.len(),
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        match self {
            Domain::Hex { mesh, .. } => &mesh.vertices,
            Domain::Surface { mesh, .. } => &mesh.vertices,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Domain::Hex { surface, bbox, .. } => point_in_surface(surface, bbox, p),
            Domain::Surface { mesh, bbox } => point_in_surface(mesh, bbox, p),
        }
    }

    /// Interpolation stencil at `p`: trilinear in the containing hex cell, or
    /// barycentric at the closest surface point. `None` when `p` is outside
    /// every hex cell.
    pub fn stencil(&self, p: &Vec3) -> Option<Stencil> {
        match self {
            Domain::Hex { mesh, locator, .. } => locator.stencil(mesh, p),
            Domain::Surface { mesh, .. } => Some(surface_stencil(mesh, p).0),
        }
    }

    /// Index of the vertex closest to `p`.
    pub fn nearest_vertex(&self, p: &Vec3) -> usize {
        let v = self.vertices();
        (0..v.len())
            .min_by(|&a, &b| (v[a] - p).norm_squared().total_cmp(&(v[b] - p).norm_squared()))
            .expect("mesh has vertices")
    }
}

/// Barycentric stencil of the closest surface point and its distance.
pub fn surface_stencil(mesh: &SurfaceMesh, p: &Vec3) -> (Stencil, f64) {
    let mut best = (f64::INFINITY, 0usize, [1.0, 0.0, 0.0]);
    for (t, &[a, b, c]) in mesh.triangles.iter().enumerate() {
        let (va, vb, vc) = (&mesh.vertices[a], &mesh.vertices[b], &mesh.vertices[c]);
        let w = closest_point_barycentric(p, va, vb, vc);
        let q = w[0] * va + w[1] * vb + w[2] * vc;
        let d = (q - p).norm_squared();
        if d < best.0 {
            best = (d, t, w);
        }
    }
    let tri = mesh.triangles[best.1];
    ((0..3).map(|k| (tri[k], best.2[k])).collect(), best.0.sqrt())
}

/// Quadrature on a planar cut through a mesh.
#[derive(Clone, Debug)]
pub struct Section {
    pub center: Vec3,
    pub normal: Vec3,
    pub points: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub stencils: Vec<Stencil>,
    pub values: FieldValues,
}

/// Orthonormal in-plane basis for a unit normal.
pub fn plane_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vec3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// Samples `field` on the cut of `domain` by the plane through `plane_point`
/// with normal `plane_normal`, on an `(n_r, n_θ)` midpoint polar grid
/// centred at `plane_point`. Only the in-lumen component connected to the
/// centre is kept when the centre itself is inside.
pub fn cross_section(
    domain: &Domain<'_>,
    field: &NodalField,
    plane_point: &Vec3,
    plane_normal: &Vec3,
    polar_grid: (usize, usize),
) -> Result<Section> {
    if field.values.len() != domain.vertex_count() {
        return Err(Error::invalid("field does not match the section mesh"));
    }
    let len = plane_normal.norm();
    if !(len > 0.0) {
        return Err(Error::invalid("plane normal must be nonzero"));
    }
    let (n_r, n_t) = polar_grid;
    if n_r == 0 || n_t == 0 {
        return Err(Error::invalid("polar grid must be nonempty"));
    }
    let n = plane_normal / len;
    let surface = domain.boundary();

    // Radius reaching the farthest boundary-plane intersection.
    let mut r_max = 0.0f64;
    for &[a, b, c] in &surface.triangles {
        for (i, j) in [(a, b), (b, c), (c, a)] {
            let (pi, pj) = (surface.vertices[i], surface.vertices[j]);
            let (di, dj) = ((pi - plane_point).dot(&n), (pj - plane_point).dot(&n));
            if (di <= 0.0 && dj >= 0.0) || (di >= 0.0 && dj <= 0.0) {
                let q = if di == dj { pi } else { pi + (pj - pi) * (di / (di - dj)) };
                let rel = q - plane_point;
                r_max = r_max.max((rel - rel.dot(&n) * n).norm());
            }
        }
    }
    if !(r_max > 0.0) {
        return Err(Error::EmptySection);
    }

    let (e1, e2) = plane_basis(&n);
    let dr = r_max / n_r as f64;
    let dt = 2.0 * PI / n_t as f64;
    let idx = |i: usize, j: usize| i * n_t + j;
    let mut inside = vec![false; n_r * n_t];
    let mut pts = vec![Vec3::zeros(); n_r * n_t];
    for i in 0..n_r {
        let r = (i as f64 + 0.5) * dr;
        for j in 0..n_t {
            let th = (j as f64 + 0.5) * dt;
            let p = plane_point + r * (th.cos() * e1 + th.sin() * e2);
            pts[idx(i, j)] = p;
            inside[idx(i, j)] = domain.contains(&p);
        }
    }

    let keep = if (0..n_t).any(|j| inside[idx(0, j)]) {
        let mut seen = vec![false; n_r * n_t];
        let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
        for j in 0..n_t {
            if inside[idx(0, j)] {
                seen[idx(0, j)] = true;
                queue.push_back((0, j));
            }
        }
        while let Some((i, j)) = queue.pop_front() {
            let mut nbrs = vec![(i, (j + 1) % n_t), (i, (j + n_t - 1) % n_t)];
            if i + 1 < n_r {
                nbrs.push((i + 1, j));
            }
            if i > 0 {
                nbrs.push((i - 1, j));
            }
            for (a, b) in nbrs {
                if inside[idx(a, b)] && !seen[idx(a, b)] {
                    seen[idx(a, b)] = true;
                    queue.push_back((a, b));
                }
            }
        }
        seen
    } else {
        inside
    };

    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut stencils = Vec::new();
    for i in 0..n_r {
        let r = (i as f64 + 0.5) * dr;
        for j in 0..n_t {
            if !keep[idx(i, j)] {
                continue;
            }
            let p = pts[idx(i, j)];
            let stencil = domain.stencil(&p).unwrap_or_else(|| vec![(domain.nearest_vertex(&p), 1.0)]);
            points.push(p);
            weights.push(r * dr * dt);
            stencils.push(stencil);
        }
    }
    if points.is_empty() {
        return Err(Error::EmptySection);
    }
    let values = sample_stencils(&field.values, &stencils);
    Ok(Section { center: *plane_point, normal: n, points, weights, stencils, values })
}

pub(crate) fn sample_stencils(values: &FieldValues, stencils: &[Stencil]) -> FieldValues {
    let sampled = stencils.iter().map(|s| apply_stencil(values, s)).collect();
    FieldValues::collect(values, sampled)
}

impl Section {
    pub fn area(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Same quadrature points, different field.
    pub fn resample(&self, field: &NodalField) -> Section {
        Section { values: sample_stencils(&field.values, &self.stencils), ..self.clone() }
    }

    /// Area-weighted mean of a scalar section field; exact for constants.
    pub fn mean_scalar(&self) -> Option<f64> {
        match &self.values {
            FieldValues::Scalar(v) => Some(weighted_mean(&self.weights, v)),
            FieldValues::Vector(_) => None,
        }
    }

    pub fn mean_vector(&self) -> Option<Vec3> {
        match &self.values {
            FieldValues::Vector(v) => {
                let w_tot = self.area();
                let base = v[0];
                Some(base + self.weights.iter().zip(v).fold(Vec3::zeros(), |acc, (w, x)| acc + (w / w_tot) * (x - base)))
            }
            FieldValues::Scalar(_) => None,
        }
    }

    /// Geometric centroid `∫x / ∫1`.
    pub fn centroid(&self) -> Vec3 {
        let w_tot = self.area();
        self.weights.iter().zip(&self.points).fold(Vec3::zeros(), |acc, (w, p)| acc + (w / w_tot) * p)
    }

    pub fn vector_values(&self) -> Option<&[Vec3]> {
        match &self.values {
            FieldValues::Vector(v) => Some(v),
            FieldValues::Scalar(_) => None,
        }
    }
}

/// `Σ w v / Σ w`, written around the first value so constants are exact.
pub fn weighted_mean(weights: &[f64], values: &[f64]) -> f64 {
    let w_tot: f64 = weights.iter().sum();
    let base = values[0];
    base + weights.iter().zip(values).map(|(w, v)| (w / w_tot) * (v - base)).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate::{box_hex_mesh, cylinder_hex_mesh};
    use crate::mesh::Units;

    fn scalar_field(mesh: &HexMesh, f: impl Fn(&Vec3) -> f64) -> NodalField {
        let v = mesh.vertices.iter().map(f).collect();
        NodalField::on_hex(mesh, Units::Pascal, FieldValues::Scalar(v)).unwrap()
    }

    #[test]
    fn cylinder_section_area_within_one_percent() {
        let r = 1.5;
        let mesh = cylinder_hex_mesh(r, 3.0, 16, 6);
        let dom = Domain::hex(&mesh);
        let f = scalar_field(&mesh, |_| 1.0);
        let s = cross_section(&dom, &f, &Vec3::new(0.0, 0.0, 1.3), &Vec3::z(), (64, 128)).unwrap();
        let exact = PI * r * r;
        assert!((s.area() - exact).abs() / exact < 0.01, "area {} vs {}", s.area(), exact);
    }

    #[test]
    fn area_error_decreases_under_refinement() {
        let n = 4;
        let mesh = cylinder_hex_mesh(1.0, 2.0, n, 2);
        let dom = Domain::hex(&mesh);
        let f = scalar_field(&mesh, |_| 1.0);
        // The cut is the polygon through the boundary ring; shoelace area.
        let mut ring: Vec<f64> = mesh
            .boundary_vertices()
            .into_iter()
            .map(|i| mesh.vertices[i])
            .filter(|p| p.z == 0.0 && (p.x.hypot(p.y) - 1.0).abs() < 1e-12)
            .map(|p| p.y.atan2(p.x))
            .collect();
        ring.sort_by(f64::total_cmp);
        assert_eq!(ring.len(), 4 * n);
        let exact: f64 = (0..ring.len())
            .map(|k| 0.5 * (ring[(k + 1) % ring.len()] - ring[k]).rem_euclid(2.0 * PI).sin())
            .sum();
        let errs: Vec<f64> = [(16, 64), (32, 128), (64, 256), (128, 512)]
            .iter()
            .map(|&g| (cross_section(&dom, &f, &Vec3::new(0.0, 0.0, 1.1), &Vec3::z(), g).unwrap().area() - exact).abs())
            .collect();
        // First order: the error shrinks at least like the radial step.
        let rate = (errs[0] / errs[3]).log2() / 3.0;
        assert!(rate >= 1.0, "{errs:?} rate {rate}");
    }

    #[test]
    fn plane_outside_mesh_is_empty() {
        let mesh = box_hex_mesh([2, 2, 2], Vec3::zeros(), Vec3::repeat(1.0));
        let dom = Domain::hex(&mesh);
        let f = scalar_field(&mesh, |_| 1.0);
        let r = cross_section(&dom, &f, &Vec3::new(0.5, 0.5, 5.0), &Vec3::z(), (8, 16));
        assert!(matches!(r, Err(Error::EmptySection)));
    }

    #[test]
    fn constant_field_mean_is_exact() {
        let mesh = cylinder_hex_mesh(1.0, 2.0, 8, 4);
        let dom = Domain::hex(&mesh);
        let v = 0.1 + 0.2;
        let f = scalar_field(&mesh, |_| v);
        let s = cross_section(&dom, &f, &Vec3::new(0.0, 0.0, 0.77), &Vec3::z(), (16, 32)).unwrap();
        assert_eq!(s.mean_scalar().unwrap(), v);
    }

    #[test]
    fn trilinear_interpolation_reproduces_linear_fields() {
        let mesh = cylinder_hex_mesh(1.0, 2.0, 8, 4);
        let dom = Domain::hex(&mesh);
        let lin = |p: &Vec3| 2.0 * p.x - p.y + 0.5 * p.z + 1.0;
        let f = scalar_field(&mesh, lin);
        let s = cross_section(&dom, &f, &Vec3::new(0.0, 0.0, 0.9), &Vec3::z(), (8, 16)).unwrap();
        if let FieldValues::Scalar(v) = &s.values {
            for (p, val) in s.points.iter().zip(v) {
                assert!((val - lin(p)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn surface_point_inside_test() {
        let s = crate::mesh::generate::icosphere(2, 1.0);
        let b = s.bounding_box();
        assert!(point_in_surface(&s, &b, &Vec3::zeros()));
        assert!(point_in_surface(&s, &b, &Vec3::new(0.5, 0.2, -0.3)));
        assert!(!point_in_surface(&s, &b, &Vec3::new(0.99, 0.5, 0.0)));
        assert!(!point_in_surface(&s, &b, &Vec3::new(3.0, 0.0, 0.0)));
    }

    #[test]
    fn newton_inverse_recovers_reference_point() {
        let mesh = cylinder_hex_mesh(1.0, 1.0, 4, 2);
        let cell = mesh.cell_vertices(3);
        let xi = Vec3::new(0.3, 0.8, 0.1);
        let p = trilinear_map(&cell, &xi);
        let back = invert_trilinear(&cell, &p).unwrap();
        assert!((back - xi).norm() < 1e-12);
    }
}
