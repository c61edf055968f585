//! Monte Carlo statistics over generated geometries, Wasserstein-1
//! comparisons, the RCR Windkessel outlet model and hemodynamic biomarkers.

mod biomarkers;
mod stats;
mod windkessel;

use serde::{Deserialize, Serialize};

pub use biomarkers::{
    disc_section, hydraulic_radius, nfd, osi, pressure_qois, section_flux, sfd, volume_mean, wall_points, wall_shear_stress,
    PressureQois, SectionPlane, WallPoints, WallShearStress, BLOOD_VISCOSITY,
};
pub use stats::{batch_shape_stats, flagged_mean, monte_carlo_estimate, vertex_coordinate_std, wasserstein1, BatchStats, FlaggedMean, MonteCarloEstimate};
pub use windkessel::{windkessel_interval, windkessel_step, WindkesselParams};

use crate::error::{Error, Result};
use crate::mesh::Units;

/// Values sampled at strictly increasing times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries<T> {
    pub times: Vec<f64>,
    pub values: Vec<T>,
    pub units: Units,
}

impl<T> TimeSeries<T> {
    pub fn new(times: Vec<f64>, values: Vec<T>, units: Units) -> Result<Self> {
        let s = TimeSeries { times, values, units };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() {
            return Err(Error::invalid(format!("{} times for {} values", self.times.len(), self.values.len())));
        }
        if self.times.iter().any(|t| !t.is_finite()) || self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("time series times must be finite and strictly increasing"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}
