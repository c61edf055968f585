use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{CenterlineEncoding, Vec3};

/// Diagonal jitter added to the unit-amplitude RBF covariance.
const JITTER: f64 = 1e-10;

/// Zero-mean Gaussian random field with covariance
/// `a²·exp(−‖p−q‖²/2ℓ²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianField {
    pub length_scale: f64,
    pub amplitude: f64,
    pub seed: u64,
}

/// Lower Cholesky factor of `exp(−‖p_i−p_j‖²/2ℓ²) + 1e-10·I`.
pub fn rbf_cholesky(points: &[Vec3], length_scale: f64) -> Result<DMatrix<f64>> {
    if !(length_scale > 0.0 && length_scale.is_finite()) {
        return Err(Error::invalid("RBF length scale must be positive"));
    }
    let n = points.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let d2 = (points[i] - points[j]).norm_squared();
        (-d2 / (2.0 * length_scale * length_scale)).exp() + if i == j { JITTER } else { 0.0 }
    });
    k.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Singular("RBF covariance is not positive definite after jitter".into()))
}

/// One field sample per point, each coordinate independent: `a·L z`.
pub(crate) fn correlated_sample(chol: &DMatrix<f64>, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let n = chol.nrows();
    let z = DMatrix::<f64>::from_fn(n, 3, |_, _| StandardNormal.sample(rng));
    let x = chol * z;
    (0..n).map(|i| amplitude * Vec3::new(x[(i, 0)], x[(i, 1)], x[(i, 2)])).collect()
}

/// Scales all radii by `alpha_r` and displaces the control points by one
/// draw of `field`.
pub fn perturb_condition(c: &CenterlineEncoding, alpha_r: f64, field: &GaussianField) -> Result<CenterlineEncoding> {
    if !(alpha_r > 0.0 && alpha_r.is_finite()) {
        return Err(Error::invalid("radius factor must be positive"));
    }
    if !(field.amplitude >= 0.0 && field.amplitude.is_finite()) {
        return Err(Error::invalid("field amplitude must be non-negative"));
    }
    let radii = c.radii.iter().map(|r| r * alpha_r).collect();
    let points = if field.amplitude == 0.0 {
        c.points.clone()
    } else {
        let chol = rbf_cholesky(&c.points, field.length_scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(field.seed);
        let disp = correlated_sample(&chol, field.amplitude, &mut rng);
        c.points.iter().zip(disp).map(|(p, d)| p + d).collect()
    };
    CenterlineEncoding::new(points, radii)
}

/// `Σ w_i c_i` over points and radii. Evaluated as `c_a + Σ_{i≠a} w_i (c_i − c_a)`
/// around the heaviest condition `a`, so one-hot weights and identical
/// conditions reproduce their input exactly.
pub fn convex_blend(conditions: &[CenterlineEncoding], weights: &[f64]) -> Result<CenterlineEncoding> {
    if conditions.is_empty() || conditions.len() != weights.len() {
        return Err(Error::invalid("need one weight per condition"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid("blend weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("blend weights sum to {total}, not 1")));
    }
    let n = conditions[0].n_cntrl();
    if conditions.iter().any(|c| c.n_cntrl() != n) {
        return Err(Error::invalid("blended conditions differ in control-point count"));
    }
    let a = (0..weights.len()).fold(0, |best, i| if weights[i] > weights[best] { i } else { best });
    let base = &conditions[a];
    let mut points = base.points.clone();
    let mut radii = base.radii.clone();
    for (i, (c, &w)) in conditions.iter().zip(weights).enumerate() {
        if i == a || w == 0.0 {
            continue;
        }
        for j in 0..n {
            points[j] += w * (c.points[j] - base.points[j]);
            radii[j] += w * (c.radii[j] - base.radii[j]);
        }
    }
    CenterlineEncoding::new(points, radii)
}
