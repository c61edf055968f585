//! Scalar statistics over batches of generated geometries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Vec3;
use crate::registration::chamfer;

/// Sample mean, `(n−1)`-denominator standard deviation and standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub n: usize,
    pub mean: f64,
    /// `None` for a single sample.
    pub std: Option<f64>,
    pub std_error: Option<f64>,
}

/// Plain Monte Carlo estimate of `E[Q]`, accumulated with Welford's update.
pub fn monte_carlo_estimate(values: &[f64]) -> Result<MonteCarloEstimate> {
    if values.is_empty() {
        return Err(Error::invalid("Monte Carlo estimate of an empty sample"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("QoI sample {v}")));
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in values.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (x - mean);
    }
    let n = values.len();
    let std = (n > 1).then(|| (m2 / (n - 1) as f64).sqrt());
    Ok(MonteCarloEstimate { n, mean, std, std_error: std.map(|s| s / (n as f64).sqrt()) })
}

fn sorted(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("Wasserstein distance needs nonempty samples"));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("NaN in Wasserstein sample".into()));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Wasserstein-1 distance `∫|F_a − F_b|` between two empirical distributions,
/// computed as the L¹ distance of their quantile functions.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = (sorted(a)?, sorted(b)?);
    let (n, m) = (a.len(), b.len());
    if n == m {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64);
    }
    // Quantile breakpoints on the common grid of step 1/(nm): a jumps every
    // m units, b every n.
    let (mut i, mut j, mut pos) = (0usize, 0usize, 0usize);
    let mut acc = 0.0;
    while i < n && j < m {
        let next = ((i + 1) * m).min((j + 1) * n);
        acc += (next - pos) as f64 * (a[i] - b[j]).abs();
        pos = next;
        if pos == (i + 1) * m {
            i += 1;
        }
        if pos == (j + 1) * n {
            j += 1;
        }
    }
    Ok(acc / (n * m) as f64)
}

/// Shape variability of one batch of generated geometries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub n_shapes: usize,
    /// Mean over unordered pairs of the rooted per-point Chamfer distance
    /// `√(chamfer / (n + m))`, in mesh length units.
    pub mean_chamfer: f64,
    /// Mean over pairs of the raw squared Chamfer sum.
    pub mean_chamfer_squared: f64,
    /// RMS over vertices and coordinates of the per-vertex sample std, or
    /// `None` when the clouds are not in vertex correspondence.
    pub vertex_std: Option<f64>,
}

/// Pairwise Chamfer statistics and, when all clouds have equal size,
/// the RMS vertex-coordinate sample standard deviation.
pub fn batch_shape_stats(clouds: &[Vec<Vec3>]) -> Result<BatchStats> {
    if clouds.len() < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: clouds.len() });
    }
    let pairs: Vec<(usize, usize)> = (0..clouds.len()).flat_map(|i| (i + 1..clouds.len()).map(move |j| (i, j))).collect();
    let sums: Vec<f64> = pairs.par_iter().map(|&(i, j)| chamfer(&clouds[i], &clouds[j])).collect::<Result<_>>()?;
    let (mut root, mut raw) = (0.0, 0.0);
    for (s, &(i, j)) in sums.iter().zip(&pairs) {
        raw += s;
        root += (s / (clouds[i].len() + clouds[j].len()) as f64).sqrt();
    }
    let np = pairs.len() as f64;
    Ok(BatchStats {
        n_shapes: clouds.len(),
        mean_chamfer: root / np,
        mean_chamfer_squared: raw / np,
        vertex_std: vertex_coordinate_std(clouds).ok(),
    })
}

/// `σ̄ = √(mean_{v,k} s²_{v,k})` with `s_{v,k}` the `(n−1)`-denominator std
/// of coordinate `k` of vertex `v` across the batch.
pub fn vertex_coordinate_std(clouds: &[Vec<Vec3>]) -> Result<f64> {
    if clouds.len() < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: clouds.len() });
    }
    let nv = clouds[0].len();
    if nv == 0 || clouds.iter().any(|c| c.len() != nv) {
        return Err(Error::invalid("vertex standard deviation needs clouds in vertex correspondence"));
    }
    let n = clouds.len() as f64;
    let mut total = 0.0;
    for v in 0..nv {
        // Offsets from the first cloud, so identical clouds give exactly zero.
        let base = clouds[0][v];
        let mean = clouds.iter().fold(Vec3::zeros(), |acc, c| acc + (c[v] - base)) / n;
        let ss = clouds.iter().fold(Vec3::zeros(), |acc, c| acc + (c[v] - base - mean).map(|d| d * d));
        total += ss.sum() / (n - 1.0);
    }
    Ok((total / (3 * nv) as f64).sqrt())
}

/// Mean of the defined entries of a flagged biomarker, with coverage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlaggedMean {
    pub mean: Option<f64>,
    pub defined: usize,
    pub total: usize,
}

pub fn flagged_mean(values: &[Option<f64>]) -> FlaggedMean {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    FlaggedMean { mean, defined: defined.len(), total: values.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate::icosphere;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn two_pass(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    }

    #[test]
    fn monte_carlo_small_cases() {
        let c = monte_carlo_estimate(&[3.25; 17]).unwrap();
        assert_eq!((c.mean, c.std, c.std_error), (3.25, Some(0.0), Some(0.0)));
        let e = monte_carlo_estimate(&[0.0, 2.0]).unwrap();
        assert_eq!(e.mean, 1.0);
        assert!((e.std.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(monte_carlo_estimate(&[4.0]).unwrap().std, None);
        assert!(monte_carlo_estimate(&[]).is_err());
    }

    #[test]
    fn monte_carlo_normal_mean_within_four_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = monte_carlo_estimate(&v).unwrap();
        assert!(e.mean.abs() < 4.0 * e.std_error.unwrap());
        assert!((e.std.unwrap() - 1.0).abs() < 0.01);
    }

    #[test]
    fn wasserstein_examples() {
        let a = [0.3, -1.0, 2.5, 0.0];
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        assert_eq!(wasserstein1(&[1.75], &[-0.5]).unwrap(), 2.25);
        assert_eq!(wasserstein1(&[0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.0);
        // Point mass against a two-point law.
        assert_eq!(wasserstein1(&[0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert!(wasserstein1(&[], &[1.0]).is_err());
    }

    #[test]
    fn wasserstein_matches_cdf_integral() {
        let a = [0.1, 0.7, 0.2, 1.9, -0.4];
        let b = [0.0, 1.0, 0.5];
        // ∫|F_a − F_b| on a fine grid.
        let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        let (lo, hi, n) = (-1.0, 2.5, 350_000);
        let h = (hi - lo) / n as f64;
        let num: f64 = (0..n).map(|k| lo + (k as f64 + 0.5) * h).map(|x| (cdf(&a, x) - cdf(&b, x)).abs() * h).sum();
        assert!((wasserstein1(&a, &b).unwrap() - num).abs() < 1e-4);
    }

    #[test]
    fn scaling_by_powers_of_two_is_exact() {
        let a = [0.1, 0.73, -2.2];
        let b = [5.0, 0.3, 0.31, 1.1];
        let w = wasserstein1(&a, &b).unwrap();
        for c in [0.25, 2.0, 1024.0] {
            let (ca, cb): (Vec<f64>, Vec<f64>) = (a.iter().map(|x| c * x).collect(), b.iter().map(|x| c * x).collect());
            assert_eq!(wasserstein1(&ca, &cb).unwrap(), c * w);
        }
    }

    proptest! {
        #[test]
        fn wasserstein_is_a_metric(
            a in prop::collection::vec(-10.0f64..10.0, 1..30),
            b in prop::collection::vec(-10.0f64..10.0, 1..30),
            c in prop::collection::vec(-10.0f64..10.0, 1..30),
        ) {
            let ab = wasserstein1(&a, &b).unwrap();
            prop_assert_eq!(ab, wasserstein1(&b, &a).unwrap());
            prop_assert!(ab >= 0.0);
            let ac = wasserstein1(&a, &c).unwrap();
            let cb = wasserstein1(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-12);
        }

        #[test]
        fn wasserstein_positive_homogeneity(
            a in prop::collection::vec(-10.0f64..10.0, 1..30),
            b in prop::collection::vec(-10.0f64..10.0, 1..30),
            c in 0.01f64..100.0,
        ) {
            let w = wasserstein1(&a, &b).unwrap();
            let ca: Vec<f64> = a.iter().map(|x| c * x).collect();
            let cb: Vec<f64> = b.iter().map(|x| c * x).collect();
            let cw = wasserstein1(&ca, &cb).unwrap();
            prop_assert!((cw - c * w).abs() <= 1e-13 * c * (1.0 + w));
        }

        #[test]
        fn welford_matches_two_pass(v in prop::collection::vec(-1e3f64..1e3, 2..2000)) {
            let e = monte_carlo_estimate(&v).unwrap();
            let (m, s) = two_pass(&v);
            prop_assert!((e.mean - m).abs() <= 1e-12 * m.abs().max(1.0));
            prop_assert!((e.std.unwrap() - s).abs() <= 1e-12 * s.max(1.0));
        }
    }

    #[test]
    fn welford_matches_two_pass_on_ten_thousand() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..10_000).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 3.0 + 0.5 * z }).collect();
        let e = monte_carlo_estimate(&v).unwrap();
        let (m, s) = two_pass(&v);
        assert!((e.mean - m).abs() <= 1e-12 * m.abs());
        assert!((e.std.unwrap() - s).abs() <= 1e-12 * s);
    }

    #[test]
    fn identical_batch_has_zero_spread() {
        let s = icosphere(2, 1.0).vertices;
        let st = batch_shape_stats(&[s.clone(), s.clone(), s]).unwrap();
        assert_eq!((st.mean_chamfer, st.mean_chamfer_squared, st.vertex_std), (0.0, 0.0, Some(0.0)));
    }

    #[test]
    fn two_sample_vertex_std_oracle() {
        let base = icosphere(1, 2.0).vertices;
        let v = Vec3::new(0.3, -0.4, 1.2);
        let a: Vec<Vec3> = base.iter().map(|p| p + v / 2.0).collect();
        let b: Vec<Vec3> = base.iter().map(|p| p - v / 2.0).collect();
        // Each coordinate has values ±v_k/2, so s² = v_k²/2 and σ̄ = ‖v‖/√6.
        let st = batch_shape_stats(&[a, b]).unwrap();
        assert!((st.vertex_std.unwrap() - v.norm() / 6f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn translated_dense_spheres() {
        // Dense clouds approach the continuous surfaces, where the distance
        // from x to the shifted unit sphere is ||x − v| − 1|.
        let s = icosphere(5, 1.0).vertices;
        let v = Vec3::new(0.18, 0.24, 0.0);
        let t: Vec<Vec3> = s.iter().map(|p| p + v).collect();
        let expect = (s.iter().map(|x| ((x - v).norm() - 1.0).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        let st = batch_shape_stats(&[s, t]).unwrap();
        assert!((st.mean_chamfer - expect).abs() / expect < 0.02, "{} vs {}", st.mean_chamfer, expect);
        // And to first order in ‖v‖ that is ‖v‖/√3.
        assert!((st.mean_chamfer - v.norm() / 3f64.sqrt()).abs() / st.mean_chamfer < 0.1);
    }

    #[test]
    fn mismatched_clouds_keep_chamfer_but_not_std() {
        let a = icosphere(1, 1.0).vertices;
        let b = icosphere(2, 1.0).vertices;
        let st = batch_shape_stats(&[a.clone(), b.clone()]).unwrap();
        assert!(st.vertex_std.is_none() && st.mean_chamfer > 0.0);
        assert!(vertex_coordinate_std(&[a, b]).is_err());
        assert!(batch_shape_stats(&[icosphere(0, 1.0).vertices]).is_err());
    }

    #[test]
    fn flagged_mean_reports_coverage() {
        let f = flagged_mean(&[Some(1.0), None, Some(3.0)]);
        assert_eq!(f, FlaggedMean { mean: Some(2.0), defined: 2, total: 3 });
        assert_eq!(flagged_mean(&[None]).mean, None);
    }
}
