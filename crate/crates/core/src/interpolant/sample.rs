use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::condition::{correlated_sample, rbf_cholesky};
use super::{DriftNet, SigmaSchedule};
use crate::error::{Error, Result};
use crate::mesh::{CenterlineEncoding, Vec3};
use crate::registration::TimeFlow;

/// A drift `b(x, t, c)` that the sampler can integrate.
pub trait DriftField: Sync {
    fn drift(&self, points: &[Vec3], t: f64, cond: &CenterlineEncoding) -> Result<Vec<Vec3>>;
}

impl DriftField for DriftNet {
    fn drift(&self, points: &[Vec3], t: f64, cond: &CenterlineEncoding) -> Result<Vec<Vec3>> {
        DriftNet::drift(self, points, t, cond)
    }
}

/// The same velocity everywhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantDrift(pub Vec3);

impl DriftField for ConstantDrift {
    fn drift(&self, points: &[Vec3], _t: f64, _cond: &CenterlineEncoding) -> Result<Vec<Vec3>> {
        Ok(vec![self.0; points.len()])
    }
}

/// Step velocities of a registered flow, `b(x, t) = v_l(x)` on step `l`
/// containing `t`; the condition is ignored.
#[derive(Clone, Copy, Debug)]
pub struct FlowDrift<'a>(pub &'a TimeFlow);

impl DriftField for FlowDrift<'_> {
    fn drift(&self, points: &[Vec3], t: f64, _cond: &CenterlineEncoding) -> Result<Vec<Vec3>> {
        let (l, _) = self.0.split_time(t);
        Ok(self.0.step_velocity(l.min(self.0.n_steps() - 1), points))
    }
}

impl<F> DriftField for F
where
    F: Fn(&[Vec3], f64) -> Vec<Vec3> + Sync,
{
    fn drift(&self, points: &[Vec3], t: f64, _cond: &CenterlineEncoding) -> Result<Vec<Vec3>> {
        Ok(self(points, t))
    }
}

/// Spatial structure of the increments `ξ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseModel {
    /// `ξ ~ N(0, I)` per node and coordinate.
    Independent,
    /// Per coordinate, nodes correlated by the RBF kernel of the template.
    Rbf { length_scale: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n_samples: usize,
    pub time_grid: Vec<f64>,
    pub schedule: SigmaSchedule,
    pub seed: u64,
    pub noise: NoiseModel,
}

impl SampleConfig {
    pub fn new(n_samples: usize, n_steps: usize, schedule: SigmaSchedule, seed: u64) -> Self {
        SampleConfig { n_samples, time_grid: uniform_time_grid(n_steps), schedule, seed, noise: NoiseModel::Independent }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.time_grid;
        if self.n_samples == 0 {
            return Err(Error::invalid("need at least one sample"));
        }
        if g.len() < 2 || g[0] != 0.0 || *g.last().unwrap() != 1.0 {
            return Err(Error::invalid("time grid must run from 0 to 1"));
        }
        if g.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("time grid must be strictly increasing"));
        }
        self.schedule.validate()
    }
}

/// `0, 1/n, ..., 1` with both ends exact.
pub fn uniform_time_grid(n_steps: usize) -> Vec<f64> {
    let n = n_steps.max(1);
    (0..=n).map(|k| if k == n { 1.0 } else { k as f64 / n as f64 }).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// `(1/N) Σ_s I₁^{(s)}`.
    pub mean: Vec<Vec3>,
    pub endpoints: Vec<Vec<Vec3>>,
}

/// Euler–Maruyama for `dI = b dt + σ_t dW` from the template, `N`
/// independent trajectories averaged at `t = 1`. Trajectory `s` draws from
/// its own stream of the seeded generator, so results do not depend on the
/// thread count.
pub fn sample(drift: &dyn DriftField, template: &[Vec3], cond: &CenterlineEncoding, cfg: &SampleConfig) -> Result<SampleOutput> {
    cfg.validate()?;
    let sigmas: Vec<f64> = cfg.time_grid.iter().map(|&t| cfg.schedule.sigma(t)).collect::<Result<_>>()?;
    let chol = match cfg.noise {
        NoiseModel::Independent => None,
        NoiseModel::Rbf { length_scale } => Some(rbf_cholesky(template, length_scale)?),
    };
    let endpoints: Vec<Vec<Vec3>> = (0..cfg.n_samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(s as u64);
            let mut x = template.to_vec();
            for k in 0..cfg.time_grid.len() - 1 {
                let (t, dt) = (cfg.time_grid[k], cfg.time_grid[k + 1] - cfg.time_grid[k]);
                let b = drift.drift(&x, t, cond)?;
                if b.len() != x.len() {
                    return Err(Error::invalid("drift returned the wrong number of points"));
                }
                let xi: Vec<Vec3> = match &chol {
                    None => (0..x.len())
                        .map(|_| {
                            Vec3::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng))
                        })
                        .collect(),
                    Some(l) => correlated_sample(l, 1.0, &mut rng),
                };
                let c = sigmas[k] * dt.sqrt();
                for ((p, v), e) in x.iter_mut().zip(&b).zip(&xi) {
                    *p += v * dt + c * e;
                }
                if x.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
                    return Err(Error::NonFinite(format!("sample {s} at time {t}")));
                }
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;
    // Running mean: identical endpoints average to themselves exactly.
    let mut mean = endpoints[0].clone();
    for (k, e) in endpoints.iter().enumerate().skip(1) {
        let w = 1.0 / (k + 1) as f64;
        for (m, p) in mean.iter_mut().zip(e) {
            *m += (p - *m) * w;
        }
    }
    Ok(SampleOutput { mean, endpoints })
}
