//! Collapses a cluster of cells into one equivalent model.
//!
//! Members of a cluster are treated as a parallel combination behind their
//! converters. Charge adds, so capacity and current limits sum; chain
//! resistances combine in parallel; the equivalent open-circuit voltage is
//! the conductance-weighted mean, which is the exact terminal OCV of a
//! parallel source network. The aggregate OCV coefficients `(alpha, beta)`
//! are arithmetic means of the members' active segments, a local
//! linearization valid as long as clustering keeps member SoCs close, which
//! is exactly what the balancing constraints enforce.
//!
//! On the aggregate curve the stored energy is the quadratic
//! `E = 1/2 C u^2 - e0` with `C = capacity / beta`, anchored so the current
//! operating point has `E = 0`; the receding-horizon program works in this
//! energy coordinate.

use crate::cell::{CellParams, CellState};
use crate::cluster::Clustering;
use crate::par;

/// Equivalent single-cell model of one cluster.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub n_members: usize,
    /// Summed capacity in coulombs.
    pub capacity_c: f64,
    /// Charge-weighted mean SoC.
    pub q: f64,
    /// Unweighted mean temperature.
    pub temp_k: f64,
    /// Mean active-segment OCV intercept.
    pub alpha: f64,
    /// Mean active-segment OCV slope.
    pub beta: f64,
    /// Conductance-weighted open-circuit voltage of the parallel network.
    pub u: f64,
    /// Parallel combination of member chain resistances (battery plus
    /// converter), in ohms.
    pub chain_resistance_ohm: f64,
    /// Parallel combination of the battery resistances alone, in ohms.
    /// The ratio to `chain_resistance_ohm` is the fraction of chain loss
    /// dissipated inside the cells, which is what heats them.
    pub battery_resistance_ohm: f64,
    /// Summed current limits, discharge positive.
    pub i_min: f64,
    pub i_max: f64,
    /// Tightest member SoC window.
    pub q_min: f64,
    pub q_max: f64,
    /// Tightest member temperature window in kelvin.
    pub temp_min_k: f64,
    pub temp_max_k: f64,
    /// Summed heat capacity in J/K.
    pub heat_capacity: f64,
    /// Parallel convective resistance `1 / sum(h A)` in K/W.
    pub r_conv: f64,
    /// Equivalent capacitance `capacity / beta` in farads.
    pub capacitance: f64,
    /// Energy offset anchoring `E = 0` at the current operating point.
    pub e0: f64,
}

impl ClusterModel {
    /// Aggregate OCV at aggregate SoC `q`.
    pub fn ocv_at(&self, q: f64) -> f64 {
        self.alpha + self.beta * q
    }

    /// Stored energy on the aggregate curve at SoC `q`, relative to the
    /// anchor point.
    pub fn energy_at(&self, q: f64) -> f64 {
        let u = self.ocv_at(q);
        0.5 * self.capacitance * u * u - self.e0
    }
}

/// Builds the equivalent model of the cluster listing `members`.
pub fn aggregate_cluster(
    params: &[CellParams],
    states: &[CellState],
    members: &[usize],
) -> ClusterModel {
    assert!(!members.is_empty(), "cannot aggregate an empty cluster");
    let n = members.len() as f64;

    let mut capacity = 0.0;
    let mut charge = 0.0;
    let mut temp = 0.0;
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut conductance = 0.0;
    let mut battery_conductance = 0.0;
    let mut weighted_u = 0.0;
    let mut i_min = 0.0;
    let mut i_max = 0.0;
    let mut q_min = f64::NEG_INFINITY;
    let mut q_max = f64::INFINITY;
    let mut temp_min = f64::NEG_INFINITY;
    let mut temp_max = f64::INFINITY;
    let mut heat_capacity = 0.0;
    let mut ha = 0.0;

    for &cell in members {
        let p = &params[cell];
        let s = &states[cell];
        capacity += p.capacity_c;
        charge += p.capacity_c * s.q;
        temp += s.temp_k;

        let seg_idx = p
            .ocv
            .segment_index(s.q)
            .expect("cell SoC stays inside the curve domain");
        let seg = p.ocv.segments()[seg_idx];
        alpha += seg.alpha;
        beta += seg.beta;

        let g = 1.0 / p.chain_resistance();
        conductance += g;
        battery_conductance += 1.0 / p.resistance_ohm;
        weighted_u += g * (seg.alpha + seg.beta * s.q);

        i_min += p.i_min;
        i_max += p.i_max;
        q_min = q_min.max(p.q_min);
        q_max = q_max.min(p.q_max);
        temp_min = temp_min.max(p.temp_min_k);
        temp_max = temp_max.min(p.temp_max_k);
        heat_capacity += p.heat_capacity();
        ha += p.h_conv * p.area_m2;
    }

    let q = charge / capacity;
    alpha /= n;
    beta /= n;
    let capacitance = capacity / beta;
    let u_anchor = alpha + beta * q;

    ClusterModel {
        n_members: members.len(),
        capacity_c: capacity,
        q,
        temp_k: temp / n,
        alpha,
        beta,
        u: weighted_u / conductance,
        chain_resistance_ohm: 1.0 / conductance,
        battery_resistance_ohm: 1.0 / battery_conductance,
        i_min,
        i_max,
        q_min,
        q_max,
        temp_min_k: temp_min,
        temp_max_k: temp_max,
        heat_capacity,
        r_conv: 1.0 / ha,
        capacitance,
        e0: 0.5 * capacitance * u_anchor * u_anchor,
    }
}

/// Aggregates every cluster of a partition, in parallel when enabled.
pub fn aggregate_all(
    params: &[CellParams],
    states: &[CellState],
    clustering: &Clustering,
) -> Vec<ClusterModel> {
    par::map_indexed(clustering.k, |c| {
        aggregate_cluster(params, states, &clustering.members[c])
    })
}
