//! Three-element (RCR) Windkessel outlet model
//! `C_d dπ/dt + π/R_d = Q`, `P = R_p Q + π`.

use serde::{Deserialize, Serialize};

use super::TimeSeries;
use crate::error::{Error, Result};
use crate::mesh::Units;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindkesselParams {
    /// Proximal resistance.
    pub r_p: f64,
    /// Distal resistance.
    pub r_d: f64,
    /// Distal capacitance.
    pub c_d: f64,
    /// Initial distal pressure `π₀`.
    pub pi0: f64,
}

impl WindkesselParams {
    pub fn validate(&self) -> Result<()> {
        // R_p = 0 is allowed: the model degenerates to a two-element RC.
        let ok = self.r_p >= 0.0 && self.r_d > 0.0 && self.c_d > 0.0 && self.r_p.is_finite() && self.r_d.is_finite() && self.c_d.is_finite() && self.pi0.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Windkessel parameters {self:?}")))
        }
    }

    pub fn time_constant(&self) -> f64 {
        self.r_d * self.c_d
    }
}

/// Distal pressure after one interval of length `h` with `Q` linear from
/// `q0` to `q1`.
///
/// With slope `s`, `π_p(t) = R_d (Q(t) − τ s)` solves the ODE, so
/// `π(h) = π_p(h) + (π(0) − π_p(0)) e^{−h/τ}` is exact for linear `Q`.
pub fn windkessel_interval(params: &WindkesselParams, pi: f64, q0: f64, q1: f64, h: f64) -> f64 {
    let tau = params.time_constant();
    let s = (q1 - q0) / h;
    let p0 = params.r_d * (q0 - tau * s);
    let p1 = params.r_d * (q1 - tau * s);
    p1 + (pi - p0) * (-h / tau).exp()
}

/// Outlet pressure `P(t_i)` for a flow-rate series, with `Q` taken as
/// piecewise linear between samples.
pub fn windkessel_step(params: &WindkesselParams, q: &TimeSeries<f64>) -> Result<TimeSeries<f64>> {
    params.validate()?;
    q.validate()?;
    let mut pi = params.pi0;
    let mut out = Vec::with_capacity(q.len());
    for (i, &qi) in q.values.iter().enumerate() {
        if i > 0 {
            pi = windkessel_interval(params, pi, q.values[i - 1], qi, q.times[i] - q.times[i - 1]);
        }
        out.push(params.r_p * qi + pi);
    }
    TimeSeries::new(q.times.clone(), out, Units::Pascal)
}
