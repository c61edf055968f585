//! Wall and cross-sectional hemodynamic biomarkers.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TimeSeries;
use crate::error::{Error, Result};
use crate::mesh::hex::{shape_values, trilinear_jacobian};
use crate::mesh::section::{apply_stencil, plane_basis, Domain, HexLocator};
use crate::mesh::{cross_section, FieldValues, HexMesh, NodalField, Patch, Section, Units, Vec3, CELL_EDGES};

/// Dynamic viscosity of blood (Pa·s), the default WSS coefficient.
pub const BLOOD_VISCOSITY: f64 = 3.5e-3;

/// Wall vertices of a hex mesh with outward unit normals and default probe
/// spacings.
#[derive(Clone, Debug, PartialEq)]
pub struct WallPoints {
    pub vertices: Vec<usize>,
    pub normals: Vec<Vec3>,
    /// Half the mean length of the cell edges meeting at the vertex.
    pub spacing: Vec<f64>,
}

/// Collects the vertices of boundary faces labelled with one of `patches`.
/// Normals sum the area vectors of those faces, each face counted once.
pub fn wall_points(mesh: &HexMesh, patches: &[Patch]) -> WallPoints {
    let n = mesh.vertices.len();
    let mut acc = vec![Vec3::zeros(); n];
    let mut on = vec![false; n];
    for f in mesh.boundary_faces.iter().filter(|f| patches.contains(&f.patch)) {
        let [a, b, c, d] = f.vertices.map(|i| mesh.vertices[i]);
        let area = 0.5 * (c - a).cross(&(d - b));
        for &v in &f.vertices {
            acc[v] += area;
            on[v] = true;
        }
    }
    let (mut len, mut cnt) = (vec![0.0; n], vec![0usize; n]);
    for cell in &mesh.cells {
        for [a, b] in CELL_EDGES {
            let l = (mesh.vertices[cell[a]] - mesh.vertices[cell[b]]).norm();
            for v in [cell[a], cell[b]] {
                if on[v] {
                    len[v] += l;
                    cnt[v] += 1;
                }
            }
        }
    }
    let vertices: Vec<usize> = (0..n).filter(|&v| on[v] && acc[v].norm() > 0.0).collect();
    WallPoints {
        normals: vertices.iter().map(|&v| acc[v].normalize()).collect(),
        spacing: vertices.iter().map(|&v| 0.5 * len[v] / cnt[v] as f64).collect(),
        vertices,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WallShearStress {
    /// `None` where no inward probe lies inside the mesh.
    pub values: Vec<Option<Vec3>>,
    /// Vertices where only one probe fitted and a one-sided first-order
    /// difference was used.
    pub first_order: Vec<bool>,
}

impl WallShearStress {
    pub fn magnitudes(&self) -> Vec<Option<f64>> {
        self.values.iter().map(|v| v.map(|t| t.norm())).collect()
    }
}

fn tangential(u: &Vec3, n: &Vec3) -> Vec3 {
    u - u.dot(n) * n
}

/// `τ_w = coeff · ∂/∂n (u − (u·n)n)` at each wall vertex, from probes at
/// `x − h n` and `x − 2h n`:
/// `∂u_t/∂n ≈ (3u_t(x) − 4u_t(x − hn) + u_t(x − 2hn)) / 2h`.
/// The wall value is the nodal velocity itself, so no-slip is not assumed.
/// `spacing` overrides the per-vertex default probe distance.
pub fn wall_shear_stress(
    mesh: &HexMesh,
    locator: &HexLocator,
    velocity: &NodalField,
    wall: &WallPoints,
    coeff: f64,
    spacing: Option<f64>,
) -> Result<WallShearStress> {
    let FieldValues::Vector(u) = &velocity.values else {
        return Err(Error::invalid("wall shear stress needs a vector velocity field"));
    };
    if u.len() != mesh.vertices.len() {
        return Err(Error::invalid("velocity field does not match the mesh"));
    }
    let eval = |p: &Vec3| locator.stencil(mesh, p).map(|s| apply_stencil(&velocity.values, &s).vector());
    let out: Vec<(Option<Vec3>, bool)> = (0..wall.vertices.len())
        .into_par_iter()
        .map(|k| {
            let v = wall.vertices[k];
            let n = wall.normals[k];
            let h = spacing.unwrap_or(wall.spacing[k]);
            let x = mesh.vertices[v];
            let u0 = tangential(&u[v], &n);
            match (eval(&(x - h * n)), eval(&(x - 2.0 * h * n))) {
                (Some(u1), Some(u2)) => {
                    let d = (3.0 * u0 - 4.0 * tangential(&u1, &n) + tangential(&u2, &n)) / (2.0 * h);
                    (Some(coeff * d), false)
                }
                (Some(u1), None) => (Some(coeff * (u0 - tangential(&u1, &n)) / h), true),
                _ => (None, false),
            }
        })
        .collect();
    let (values, first_order) = out.into_iter().unzip();
    Ok(WallShearStress { values, first_order })
}

/// Piecewise-linear samples of `s` on `[a, b]`, reusing sample values at
/// window ends that coincide with sample times.
fn window_nodes(s: &TimeSeries<Vec3>, a: f64, b: f64) -> Vec<(f64, Vec3)> {
    let interp = |t: f64| {
        let i = s.times.partition_point(|&x| x <= t).clamp(1, s.len() - 1);
        let (t0, t1) = (s.times[i - 1], s.times[i]);
        if t == t0 {
            return s.values[i - 1];
        }
        if t == t1 {
            return s.values[i];
        }
        let w = (t - t0) / (t1 - t0);
        (1.0 - w) * s.values[i - 1] + w * s.values[i]
    };
    let mut nodes = vec![(a, interp(a))];
    nodes.extend(s.times.iter().zip(&s.values).filter(|(&t, _)| t > a && t < b).map(|(&t, &v)| (t, v)));
    nodes.push((b, interp(b)));
    nodes
}

/// Oscillatory shear index `½(1 − |∫τ_w| / ∫|τ_w|)` over `window` (the full
/// series by default), with trapezoidal integrals. `None` when `∫|τ_w| = 0`.
pub fn osi(series: &TimeSeries<Vec3>, window: Option<(f64, f64)>) -> Result<Option<f64>> {
    series.validate()?;
    if series.len() < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: series.len() });
    }
    let (t0, t1) = (series.times[0], *series.times.last().unwrap());
    let (a, b) = window.unwrap_or((t0, t1));
    if !(a < b && a >= t0 && b <= t1) {
        return Err(Error::invalid(format!("OSI window [{a}, {b}] not covered by the series [{t0}, {t1}]")));
    }
    let nodes = window_nodes(series, a, b);
    let mut vec_int = Vec3::zeros();
    let mut mag_int = 0.0;
    for w in nodes.windows(2) {
        let h = w[1].0 - w[0].0;
        vec_int += 0.5 * h * (w[0].1 + w[1].1);
        mag_int += 0.5 * h * (w[0].1.norm() + w[1].1.norm());
    }
    if !(mag_int > 0.0) {
        return Ok(None);
    }
    // A unidirectional signal has |∫τ| = ∫|τ| exactly; detect it directly so
    // rounding cannot produce a spurious positive index.
    let nonzero: Vec<Vec3> = nodes.iter().map(|n| n.1).filter(|v| v.norm() > 0.0).collect();
    let dir = nonzero[0] / nonzero[0].norm();
    if nonzero.iter().all(|v| v / v.norm() == dir) {
        return Ok(Some(0.0));
    }
    let ratio = (vec_int.norm() / mag_int).min(1.0);
    Ok(Some(0.5 * (1.0 - ratio)))
}

fn section_velocity(section: &Section) -> Result<&[Vec3]> {
    section.vector_values().ok_or_else(|| Error::invalid("section carries no velocity field"))
}

/// Secondary flow degree `∫|u − (u·n)n| / ∫|u·n|`; `None` for zero flux.
pub fn sfd(section: &Section) -> Result<Option<f64>> {
    let u = section_velocity(section)?;
    let n = section.normal;
    let (mut tan, mut nor) = (0.0, 0.0);
    for (w, v) in section.weights.iter().zip(u) {
        tan += w * tangential(v, &n).norm();
        nor += w * v.dot(&n).abs();
    }
    Ok((nor > 0.0).then(|| tan / nor))
}

/// `r_H = ¾ ∫|x − x_G| / ∫1`, which equals `R/2` on a disc.
pub fn hydraulic_radius(section: &Section) -> f64 {
    let g = section.centroid();
    let area = section.area();
    0.75 * section.weights.iter().zip(&section.points).map(|(w, p)| w * (p - g).norm()).sum::<f64>() / area
}

/// Normalised flow displacement `|x_n − x_G| / r_H` with `x_n` the
/// `|u·n|`-weighted centroid; `None` for zero flux.
pub fn nfd(section: &Section) -> Result<Option<f64>> {
    let u = section_velocity(section)?;
    let g = section.centroid();
    let mut flux = 0.0;
    let mut moment = Vec3::zeros();
    for ((w, v), p) in section.weights.iter().zip(u).zip(&section.points) {
        let f = w * v.dot(&section.normal).abs();
        flux += f;
        moment += f * (p - g);
    }
    if !(flux > 0.0) {
        return Ok(None);
    }
    let r_h = hydraulic_radius(section);
    if !(r_h > 0.0) {
        return Err(Error::EmptySection);
    }
    Ok(Some((moment / flux).norm() / r_h))
}

/// Volume flux `∫u·n` through a section.
pub fn section_flux(section: &Section) -> Result<f64> {
    let u = section_velocity(section)?;
    Ok(section.weights.iter().zip(u).map(|(w, v)| w * v.dot(&section.normal)).sum())
}

/// Midpoint polar quadrature of a disc carrying a field `f`.
pub fn disc_section(center: Vec3, normal: Vec3, radius: f64, grid: (usize, usize), f: impl Fn(&Vec3) -> Vec3) -> Section {
    let n = normal.normalize();
    let (e1, e2) = plane_basis(&n);
    let (n_r, n_t) = grid;
    let (dr, dt) = (radius / n_r as f64, 2.0 * PI / n_t as f64);
    let mut points = Vec::with_capacity(n_r * n_t);
    let mut weights = Vec::with_capacity(n_r * n_t);
    for i in 0..n_r {
        let r = (i as f64 + 0.5) * dr;
        for j in 0..n_t {
            let th = (j as f64 + 0.5) * dt;
            points.push(center + r * (th.cos() * e1 + th.sin() * e2));
            weights.push(r * dr * dt);
        }
    }
    let values = FieldValues::Vector(points.iter().map(f).collect());
    Section { center, normal: n, points, weights, stencils: Vec::new(), values }
}

/// Cutting plane with its polar sampling grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionPlane {
    pub point: Vec3,
    pub normal: Vec3,
    pub polar_grid: (usize, usize),
}

/// Pressure and flow QoIs at one time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureQois {
    /// Volume mean pressure.
    pub mean_pressure: f64,
    /// Mean pressure on the descending outlet section minus the inlet one.
    pub pressure_drop: f64,
    /// `∫u·n` through each flow section.
    pub outflows: Vec<f64>,
}

/// `∫p / ∫1` over a hex mesh with 2×2×2 Gauss quadrature; exact for
/// constants.
pub fn volume_mean(mesh: &HexMesh, p: &[f64]) -> f64 {
    const G: [f64; 2] = [0.5 - 0.288_675_134_594_812_9, 0.5 + 0.288_675_134_594_812_9];
    let base = p[0];
    let (mut vol, mut acc) = (0.0, 0.0);
    for (c, cell) in mesh.cells.iter().enumerate() {
        let x = mesh.cell_vertices(c);
        for a in G {
            for b in G {
                for g in G {
                    let xi = Vec3::new(a, b, g);
                    let w = trilinear_jacobian(&x, &xi).determinant().abs() / 8.0;
                    let n = shape_values(&xi);
                    vol += w;
                    acc += w * (0..8).map(|k| n[k] * (p[cell[k]] - base)).sum::<f64>();
                }
            }
        }
    }
    base + acc / vol
}

/// Mean pressure, pressure drop and section fluxes along a time series of
/// nodal pressure and velocity fields on one mesh.
pub fn pressure_qois(
    mesh: &HexMesh,
    times: &[f64],
    pressure: &[Vec<f64>],
    velocity: &[Vec<Vec3>],
    inlet: &SectionPlane,
    descending: &SectionPlane,
    flow_sections: &[SectionPlane],
) -> Result<TimeSeries<PressureQois>> {
    if pressure.len() != times.len() || velocity.len() != times.len() {
        return Err(Error::invalid("one pressure and velocity field per time"));
    }
    let nv = mesh.vertices.len();
    if pressure.iter().any(|p| p.len() != nv) || velocity.iter().any(|v| v.len() != nv) {
        return Err(Error::invalid("field does not match the mesh"));
    }
    let domain = Domain::hex(mesh);
    let dummy = NodalField::on_hex(mesh, Units::Pascal, FieldValues::Scalar(vec![0.0; nv]))?;
    let cut = |s: &SectionPlane| cross_section(&domain, &dummy, &s.point, &s.normal, s.polar_grid);
    let (s_in, s_desc) = (cut(inlet)?, cut(descending)?);
    let flows: Vec<Section> = flow_sections.iter().map(cut).collect::<Result<_>>()?;
    let rows: Vec<PressureQois> = (0..times.len())
        .into_par_iter()
        .map(|k| {
            let pf = NodalField::on_hex(mesh, Units::Pascal, FieldValues::Scalar(pressure[k].clone()))?;
            let uf = NodalField::on_hex(mesh, Units::MetersPerSecond, FieldValues::Vector(velocity[k].clone()))?;
            let mean = |s: &Section| s.resample(&pf).mean_scalar().expect("scalar field");
            let outflows = flows.iter().map(|s| section_flux(&s.resample(&uf))).collect::<Result<_>>()?;
            Ok(PressureQois {
                mean_pressure: volume_mean(mesh, &pressure[k]),
                pressure_drop: mean(&s_desc) - mean(&s_in),
                outflows,
            })
        })
        .collect::<Result<_>>()?;
    TimeSeries::new(times.to_vec(), rows, Units::Pascal)
}
