//! Conditional LDDMM stochastic interpolant: a drift network `b(I_t, t, c)`
//! regressed onto registration velocities along each template flow, and an
//! Euler–Maruyama sampler for `dI_t = b dt + σ_t dW_t`.

mod condition;
mod net;
mod sample;
mod train;

use serde::{Deserialize, Serialize};

pub use condition::{convex_blend, perturb_condition, rbf_cholesky, GaussianField};
pub use net::{fourier_features, time_encoding, DriftNet, DriftNetConfig};
pub use sample::{sample, uniform_time_grid, ConstantDrift, DriftField, FlowDrift, NoiseModel, SampleConfig, SampleOutput};
pub use train::{finetune, train, TrainingPair};

use crate::error::{Error, Result};
use crate::mesh::Vec3;
use crate::registration::TimeFlow;

/// Diffusion coefficient `σ_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SigmaSchedule {
    /// `σ_t = (σ_max^{1/ρ} + t(σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ`.
    Karras { sigma_max: f64, sigma_min: f64, rho: f64 },
    /// `σ_t = σ√(t(1−t))`, vanishing at both ends.
    Bridge { sigma: f64 },
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        SigmaSchedule::Karras { sigma_max: 0.002, sigma_min: 0.001, rho: 1.0 }
    }
}

impl SigmaSchedule {
    /// `σ_t ≡ σ`.
    pub fn constant(sigma: f64) -> Self {
        SigmaSchedule::Karras { sigma_max: sigma, sigma_min: sigma, rho: 1.0 }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            SigmaSchedule::Karras { sigma_max, sigma_min, rho } => {
                sigma_max >= 0.0 && sigma_min >= 0.0 && rho > 0.0 && sigma_max.is_finite() && sigma_min.is_finite() && rho.is_finite()
            }
            SigmaSchedule::Bridge { sigma } => sigma >= 0.0 && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid sigma schedule {self:?}")))
        }
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("schedule time {t} outside [0, 1]")));
        }
        Ok(match *self {
            SigmaSchedule::Karras { sigma_max, .. } if t == 0.0 => sigma_max,
            SigmaSchedule::Karras { sigma_min, .. } if t == 1.0 => sigma_min,
            SigmaSchedule::Karras { sigma_max, sigma_min, rho } if rho == 1.0 => sigma_max + t * (sigma_min - sigma_max),
            SigmaSchedule::Karras { sigma_max, sigma_min, rho } => {
                let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
                (a + t * (b - a)).powf(rho)
            }
            SigmaSchedule::Bridge { sigma } => sigma * (t * (1.0 - t)).sqrt(),
        })
    }
}

/// Optimisation settings shared by [`train`] and [`finetune`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    pub decay: f64,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub schedule: SigmaSchedule,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 4,
            epochs: 2750,
            lr: 1e-4,
            patience: 100,
            decay: 0.5,
            finetune_epochs: 1750,
            seed: 0,
            schedule: SigmaSchedule::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::invalid("batch size and patience must be positive"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::invalid("learning-rate decay must lie in (0, 1)"));
        }
        // A zero rate is accepted: it freezes the weights.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        self.schedule.validate()
    }
}

/// Regression target for one template flow at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftTarget {
    /// `I_t = φ_t(x₀)`.
    pub state: Vec<Vec3>,
    /// Step velocity `v_t(I_t)`.
    pub velocity: Vec<Vec3>,
    /// `σ_t ε`.
    pub noise: Vec<Vec3>,
    /// `u = v_t(I_t) + σ_t ε`.
    pub target: Vec<Vec3>,
}

/// `u_t(x₀, x_i) = v_t(φ_t(x₀)) + σ_t ε` for a registered template flow.
pub fn conditional_drift_target(
    flow: &TimeFlow,
    template_points: &[Vec3],
    t: f64,
    noise: &[Vec3],
    schedule: &SigmaSchedule,
) -> Result<DriftTarget> {
    let (full, _) = flow.split_time(t);
    let states = flow.trajectory(&template_points[..]);
    target_from_states(flow, &states[..=full.min(flow.n_steps())], t, noise, schedule)
}

/// As [`conditional_drift_target`] but from precomputed grid states
/// `x_0, ..., x_l` (at least up to the step containing `t`).
pub(crate) fn target_from_states(
    flow: &TimeFlow,
    states: &[Vec<Vec3>],
    t: f64,
    noise: &[Vec3],
    schedule: &SigmaSchedule,
) -> Result<DriftTarget> {
    let sigma = schedule.sigma(t)?;
    let (full, frac) = flow.split_time(t);
    if noise.len() != states[0].len() {
        return Err(Error::invalid("noise must have one 3-vector per template point"));
    }
    let state = if frac > 0.0 { flow.step_phys(full, &states[full], frac) } else { states[full].clone() };
    let velocity = flow.step_velocity(full.min(flow.n_steps() - 1), &state);
    let noise: Vec<Vec3> = noise.iter().map(|e| sigma * e).collect();
    let target = velocity.iter().zip(&noise).map(|(v, e)| v + e).collect();
    Ok(DriftTarget { state, velocity, noise, target })
}
