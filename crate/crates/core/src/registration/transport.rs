use serde::{Deserialize, Serialize};

use super::TimeFlow;
use crate::error::{Error, Result};
use crate::mesh::section::{apply_stencil, surface_stencil, Domain};
use crate::mesh::{FieldValues, NodalField};

/// Relative distance (to the box diagonal) below which a point counts as on
/// a surface mesh.
const ON_SURFACE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `φ_#(f) = f ∘ φ_t⁻¹`.
    Pushforward,
    /// `φ^#(f) = f ∘ φ_t`.
    Pullback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportedField {
    pub field: NodalField,
    /// Vertices whose evaluation point fell outside the mesh and took the
    /// nearest vertex value instead.
    pub extrapolated: Vec<bool>,
}

/// Transports a nodal field on `domain` across the flow at time `t`.
pub fn transport_field(
    flow: &TimeFlow,
    domain: &Domain<'_>,
    field: &NodalField,
    direction: Direction,
    t: f64,
) -> Result<TransportedField> {
    if field.values.len() != domain.vertex_count() {
        return Err(Error::invalid("field does not match the mesh"));
    }
    let verts = domain.vertices();
    let eval_at = match direction {
        Direction::Pullback => flow.forward(verts, t),
        Direction::Pushforward => flow.backward(verts, t),
    };
    let mut extrapolated = vec![false; verts.len()];
    let stencils: Vec<_> = eval_at
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let found = match domain {
                Domain::Hex { .. } => domain.stencil(p),
                Domain::Surface { mesh, bbox } => {
                    let (s, dist) = surface_stencil(mesh, p);
                    (dist <= ON_SURFACE_TOL * bbox.diagonal()).then_some(s)
                }
            };
            found.unwrap_or_else(|| {
                extrapolated[i] = true;
                vec![(domain.nearest_vertex(p), 1.0)]
            })
        })
        .collect();
    let sampled = stencils.iter().map(|s| apply_stencil(&field.values, s)).collect();
    let values = FieldValues::collect(&field.values, sampled);
    Ok(TransportedField {
        field: NodalField { mesh: field.mesh.clone(), units: field.units, values },
        extrapolated,
    })
}
