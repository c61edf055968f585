//! Trilinear hexahedron kernels: reference map, Jacobian, sampled aspect
//! ratio and orientation checks.

use nalgebra::{Matrix3, SymmetricEigen};

use super::{HexMesh, Vec3};
use crate::error::{Error, Result};

/// Reference-cube coordinates of the eight local vertices.
pub const REF_CORNERS: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
];

/// Trilinear shape function values at `xi`.
pub fn shape_values(xi: &Vec3) -> [f64; 8] {
    std::array::from_fn(|a| {
        let c = REF_CORNERS[a];
        (0..3).map(|k| if c[k] == 1.0 { xi[k] } else { 1.0 - xi[k] }).product()
    })
}

/// Shape function gradients with respect to the reference coordinates.
pub fn shape_gradients(xi: &Vec3) -> [Vec3; 8] {
    std::array::from_fn(|a| {
        let c = REF_CORNERS[a];
        let f = |k: usize| if c[k] == 1.0 { xi[k] } else { 1.0 - xi[k] };
        let df = |k: usize| if c[k] == 1.0 { 1.0 } else { -1.0 };
        Vec3::new(df(0) * f(1) * f(2), f(0) * df(1) * f(2), f(0) * f(1) * df(2))
    })
}

pub fn trilinear_map(cell: &[Vec3; 8], xi: &Vec3) -> Vec3 {
    shape_values(xi).iter().zip(cell).fold(Vec3::zeros(), |acc, (&n, x)| acc + n * x)
}

/// Jacobian `∂F/∂ξ` of the trilinear map (column `j` is `∂F/∂ξ_j`).
pub fn trilinear_jacobian(cell: &[Vec3; 8], xi: &Vec3) -> Matrix3<f64> {
    jacobian_from_gradients(cell, &shape_gradients(xi))
}

pub(crate) fn jacobian_from_gradients(cell: &[Vec3; 8], grads: &[Vec3; 8]) -> Matrix3<f64> {
    let mut j = Matrix3::zeros();
    for (x, g) in cell.iter().zip(grads) {
        j += x * g.transpose();
    }
    j
}

/// Reference points at which cell quality is sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    points: Vec<Vec3>,
    grads: Vec<[Vec3; 8]>,
}

impl Default for SampleSet {
    /// The 125-point lattice `{0, 1/4, 1/2, 3/4, 1}^3`.
    fn default() -> Self {
        Self::uniform(5)
    }
}

impl SampleSet {
    /// `n^3` uniformly spaced points including the cube corners (`n >= 2`).
    pub fn uniform(n: usize) -> Self {
        let n = n.max(2);
        let h = 1.0 / (n - 1) as f64;
        let mut pts = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    pts.push(Vec3::new(i as f64 * h, j as f64 * h, k as f64 * h));
                }
            }
        }
        Self::from_points(pts)
    }

    pub fn from_points(points: Vec<Vec3>) -> Self {
        let grads = points.iter().map(shape_gradients).collect();
        SampleSet { points, grads }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub(crate) fn gradients(&self) -> &[[Vec3; 8]] {
        &self.grads
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `σ_max / σ_min` of `j` via the eigenvalues of `JᵀJ`; infinite when singular.
pub fn singular_value_ratio(j: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(j.transpose() * j);
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).sqrt()
    }
}

pub fn min_jacobian_det(cell: &[Vec3; 8], samples: &SampleSet) -> f64 {
    samples
        .gradients()
        .iter()
        .map(|g| jacobian_from_gradients(cell, g).determinant())
        .fold(f64::INFINITY, f64::min)
}

/// Sampled aspect ratio: max over samples of `σ₃/σ₁`.
pub fn approx_aspect_ratio(cell: &[Vec3; 8], samples: &SampleSet) -> Result<f64> {
    let mut worst = 1.0f64;
    for g in samples.gradients() {
        let j = jacobian_from_gradients(cell, g);
        let det = j.determinant();
        if !(det > 0.0) {
            return Err(Error::InvertedCell { min_det: det });
        }
        worst = worst.max(singular_value_ratio(&j));
    }
    Ok(worst)
}

/// Aspect ratio ignoring orientation; used where a cell may be temporarily
/// folded (Young's modulus during extension). Capped at `cap`.
pub fn aspect_ratio_unsigned(cell: &[Vec3; 8], samples: &SampleSet, cap: f64) -> f64 {
    samples
        .gradients()
        .iter()
        .map(|g| singular_value_ratio(&jacobian_from_gradients(cell, g)).min(cap))
        .fold(1.0, f64::max)
}

/// Cells whose minimum sampled Jacobian determinant is `<= 0`.
pub fn detect_inverted_cells(mesh: &HexMesh, samples: &SampleSet) -> Vec<usize> {
    (0..mesh.cells.len())
        .filter(|&c| !(min_jacobian_det(&mesh.cell_vertices(c), samples) > 0.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_cube() -> [Vec3; 8] {
        std::array::from_fn(|a| Vec3::from(REF_CORNERS[a]))
    }

    fn affine_cell(m: &Matrix3<f64>, t: Vec3) -> [Vec3; 8] {
        unit_cube().map(|x| m * x + t)
    }

    #[test]
    fn unit_cube_jacobian_is_identity() {
        let j = trilinear_jacobian(&unit_cube(), &Vec3::repeat(0.5));
        assert_eq!(j, Matrix3::identity());
    }

    #[test]
    fn scaled_cube_has_constant_jacobian() {
        let m = Matrix3::from_diagonal(&Vec3::new(2.0, 1.0, 1.0));
        let cell = affine_cell(&m, Vec3::zeros());
        for xi in SampleSet::uniform(3).points() {
            assert_eq!(trilinear_jacobian(&cell, xi), m);
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cell = unit_cube().map(|x| x + 0.2 * Vec3::new(rng.random(), rng.random(), rng.random()));
        let h = 1e-5;
        for _ in 0..10 {
            let xi = Vec3::new(rng.random(), rng.random(), rng.random());
            let j = trilinear_jacobian(&cell, &xi);
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                let fd = (trilinear_map(&cell, &(xi + e)) - trilinear_map(&cell, &(xi - e))) / (2.0 * h);
                for i in 0..3 {
                    assert!((fd[i] - j[(i, k)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn aspect_ratio_examples() {
        let s = SampleSet::default();
        assert_eq!(s.len(), 125);
        assert_eq!(approx_aspect_ratio(&unit_cube(), &s).unwrap(), 1.0);
        let stretched = affine_cell(&Matrix3::from_diagonal(&Vec3::new(3.0, 1.0, 1.0)), Vec3::zeros());
        assert!((approx_aspect_ratio(&stretched, &s).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn flat_cell_is_rejected() {
        let mut cell = unit_cube();
        for a in 4..8 {
            cell[a].z = 0.0;
        }
        assert!(matches!(approx_aspect_ratio(&cell, &SampleSet::default()), Err(Error::InvertedCell { .. })));
    }

    #[test]
    fn mirrored_cell_is_inverted() {
        let cell = unit_cube().map(|x| Vec3::new(-x.x, x.y, x.z));
        assert!(min_jacobian_det(&cell, &SampleSet::default()) < 0.0);
        assert!(approx_aspect_ratio(&cell, &SampleSet::default()).is_err());
    }

    proptest! {
        #[test]
        fn affine_ratio_is_stretch_ratio(a in 0.2f64..5.0, b in 0.2f64..5.0, c in 0.2f64..5.0,
                                         ax in 0.0f64..6.3, ay in 0.0f64..6.3, az in 0.0f64..6.3) {
            let rot = Rotation3::from_euler_angles(ax, ay, az);
            let m = rot.matrix() * Matrix3::from_diagonal(&Vec3::new(a, b, c));
            let cell = affine_cell(&m, Vec3::new(1.0, -2.0, 3.0));
            let r = approx_aspect_ratio(&cell, &SampleSet::default()).unwrap();
            let exact = a.max(b).max(c) / a.min(b).min(c);
            prop_assert!((r - exact).abs() <= 1e-12 * exact);
        }

        #[test]
        fn ratio_invariant_under_rigid_motion(seed in 0u64..1000, ax in 0.0f64..6.3, ay in 0.0f64..6.3, az in 0.0f64..6.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cell = unit_cube().map(|x| x + 0.15 * Vec3::new(rng.random(), rng.random(), rng.random()));
            let rot = Rotation3::from_euler_angles(ax, ay, az);
            let t = Vec3::new(rng.random(), rng.random(), rng.random()) * 10.0;
            let moved = cell.map(|x| rot * x + t);
            let s = SampleSet::default();
            let r0 = approx_aspect_ratio(&cell, &s).unwrap();
            let r1 = approx_aspect_ratio(&moved, &s).unwrap();
            prop_assert!((r0 - r1).abs() <= 1e-9 * r0);
        }
    }
}
