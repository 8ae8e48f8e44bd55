//! Single-cell electro-thermal model.
//!
//! Each cell is an internal-resistance equivalent circuit on a piecewise
//! linear open-circuit voltage curve `u(q) = alpha + beta * q`, discharged
//! with positive current:
//!
//! ```text
//!   dq/dt = -i / Q                 (coulomb counting)
//!   v     = u(q) - R * i           (terminal voltage)
//!   P_b   = u(q) * i               (internal battery power)
//!   P     = P_b - (R + R_C) * i^2  (module output after converter)
//! ```
//!
//! Thermally the cell is a single lumped mass heated by `R * i^2` and cooled
//! by convection with `R_conv = 1 / (h * A)`:
//!
//! ```text
//!   m * C_th * dT/dt = R * i^2 - (T - T_env) / R_conv
//! ```
//!
//! Both dynamics advance by forward Euler; the simulation step is short
//! relative to every time constant involved, so no implicit scheme is needed.
//!
//! The energy picture used by the convex optimization layers is segment
//! local: within one OCV segment, stored energy maps to `E = 1/2 C u^2 - E0`
//! with `C = Q / beta`. Across segments the quadratic constants change but the
//! physical energy `E(q) = Q * integral(u dq)` is continuous; [`EnergyDatum`]
//! carries the active-segment constants and re-bases them on crossings.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CellError {
    #[error("OCV curve needs at least two breakpoints, got {0}")]
    TooFewBreakpoints(usize),
    #[error("OCV breakpoints must start at q=0 and end at q=1, got [{0}, {1}]")]
    BadDomain(f64, f64),
    #[error("OCV breakpoints must be strictly increasing in q at index {0}")]
    NonMonotonicSoc(usize),
    #[error("OCV voltage must be strictly increasing at index {0}")]
    NonMonotonicVoltage(usize),
    #[error("SoC {0} outside curve domain [0, 1]")]
    SocOutOfRange(f64),
}

/// One linear OCV piece `u(q) = alpha + beta * q` on `[q_lo, q_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcvSegment {
    pub q_lo: f64,
    pub q_hi: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Piecewise linear open-circuit voltage over `q` in `[0, 1]`.
///
/// Voltage is strictly increasing, so `beta > 0` on every segment and the
/// per-segment energy map is invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct OcvCurve {
    segments: Vec<OcvSegment>,
}

impl OcvCurve {
    /// Builds a curve from `(q, u)` breakpoints spanning `[0, 1]`.
    pub fn from_breakpoints(points: &[(f64, f64)]) -> Result<Self, CellError> {
        if points.len() < 2 {
            return Err(CellError::TooFewBreakpoints(points.len()));
        }
        let first = points[0].0;
        let last = points[points.len() - 1].0;
        if first != 0.0 || last != 1.0 {
            return Err(CellError::BadDomain(first, last));
        }
        let mut segments = Vec::with_capacity(points.len() - 1);
        for (idx, pair) in points.windows(2).enumerate() {
            let (q0, u0) = pair[0];
            let (q1, u1) = pair[1];
            if q1 <= q0 {
                return Err(CellError::NonMonotonicSoc(idx + 1));
            }
            if u1 <= u0 {
                return Err(CellError::NonMonotonicVoltage(idx + 1));
            }
            let beta = (u1 - u0) / (q1 - q0);
            let alpha = u0 - beta * q0;
            segments.push(OcvSegment {
                q_lo: q0,
                q_hi: q1,
                alpha,
                beta,
            });
        }
        Ok(Self { segments })
    }

    /// Default curve: 3.0 V at empty to 4.2 V at full in three segments, with
    /// steeper knees at both ends and a flat-ish middle, roughly the shape of
    /// a commodity NMC 18650.
    pub fn default_three_segment() -> Self {
        Self::from_breakpoints(&[(0.0, 3.0), (0.1, 3.45), (0.9, 4.05), (1.0, 4.2)])
            .expect("default curve is valid")
    }

    pub fn segments(&self) -> &[OcvSegment] {
        &self.segments
    }

    /// Index of the segment containing `q`; boundaries belong to the upper
    /// segment except q = 1.
    pub fn segment_index(&self, q: f64) -> Result<usize, CellError> {
        if !(0.0..=1.0).contains(&q) {
            return Err(CellError::SocOutOfRange(q));
        }
        let idx = self
            .segments
            .iter()
            .position(|s| q < s.q_hi)
            .unwrap_or(self.segments.len() - 1);
        Ok(idx)
    }

    /// Open-circuit voltage at `q`.
    pub fn voltage(&self, q: f64) -> Result<f64, CellError> {
        let seg = &self.segments[self.segment_index(q)?];
        Ok(seg.alpha + seg.beta * q)
    }

    /// Integral of `u` over `[q0, q1]`, exact on the piecewise linear curve.
    /// Antisymmetric in its arguments.
    pub fn voltage_integral(&self, q0: f64, q1: f64) -> Result<f64, CellError> {
        if q1 < q0 {
            return Ok(-self.voltage_integral(q1, q0)?);
        }
        self.segment_index(q0)?;
        self.segment_index(q1)?;
        let mut acc = 0.0;
        for seg in &self.segments {
            let lo = q0.max(seg.q_lo);
            let hi = q1.min(seg.q_hi);
            if hi > lo {
                let u_lo = seg.alpha + seg.beta * lo;
                let u_hi = seg.alpha + seg.beta * hi;
                acc += 0.5 * (u_lo + u_hi) * (hi - lo);
            }
        }
        Ok(acc)
    }
}

/// Static parameters of one cell and its converter.
#[derive(Debug, Clone)]
pub struct CellParams {
    /// Capacity in coulombs.
    pub capacity_c: f64,
    /// Internal resistance in ohms.
    pub resistance_ohm: f64,
    /// Converter series resistance in ohms.
    pub converter_resistance_ohm: f64,
    pub ocv: OcvCurve,
    pub q_min: f64,
    pub q_max: f64,
    /// Discharge positive, amperes.
    pub i_min: f64,
    pub i_max: f64,
    pub temp_min_k: f64,
    pub temp_max_k: f64,
    pub mass_kg: f64,
    /// Specific heat in J/(kg K).
    pub specific_heat: f64,
    /// Convective surface area in m^2.
    pub area_m2: f64,
    /// Convection coefficient in W/(K m^2).
    pub h_conv: f64,
}

impl CellParams {
    /// Series resistance seen by the power path, battery plus converter.
    pub fn chain_resistance(&self) -> f64 {
        self.resistance_ohm + self.converter_resistance_ohm
    }

    /// Convective thermal resistance `1 / (h A)` in K/W.
    pub fn r_conv(&self) -> f64 {
        1.0 / (self.h_conv * self.area_m2)
    }

    /// Lumped heat capacity `m * C_th` in J/K.
    pub fn heat_capacity(&self) -> f64 {
        self.mass_kg * self.specific_heat
    }
}

/// Dynamic state of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState {
    pub q: f64,
    pub temp_k: f64,
}

/// Result of one electrical step; `saturated` reports SoC clipping at the
/// configured window, which the caller is expected to surface as a warning.
#[derive(Debug, Clone, Copy)]
pub struct ElectricalStep {
    pub q: f64,
    pub saturated: bool,
}

/// Instantaneous power bookkeeping of one module at current `i`.
#[derive(Debug, Clone, Copy)]
pub struct ModulePower {
    /// Internal battery power `u * i`.
    pub internal_w: f64,
    /// Power delivered downstream of the converter.
    pub output_w: f64,
    /// Resistive dissipation `(R + R_C) * i^2`.
    pub loss_w: f64,
}

/// Terminal voltage `u(q) - R * i`.
pub fn terminal_voltage(params: &CellParams, state: &CellState, i: f64) -> Result<f64, CellError> {
    Ok(params.ocv.voltage(state.q)? - params.resistance_ohm * i)
}

/// Internal, output and loss power of one module at current `i`.
pub fn module_power(params: &CellParams, state: &CellState, i: f64) -> Result<ModulePower, CellError> {
    let u = params.ocv.voltage(state.q)?;
    let internal = u * i;
    let loss = params.chain_resistance() * i * i;
    Ok(ModulePower {
        internal_w: internal,
        output_w: internal - loss,
        loss_w: loss,
    })
}

/// Advances SoC one step of forward Euler coulomb counting, clipping into the
/// configured SoC window.
pub fn electrical_step(params: &CellParams, state: &CellState, i: f64, dt: f64) -> ElectricalStep {
    let q_raw = state.q - i * dt / params.capacity_c;
    let q = q_raw.clamp(params.q_min, params.q_max);
    ElectricalStep {
        q,
        saturated: q != q_raw,
    }
}

/// Advances temperature one step of forward Euler with joule heating
/// `R * i^2` (battery resistance only; converter heat is dumped outboard)
/// and convective cooling toward `t_env`.
pub fn thermal_step(params: &CellParams, state: &CellState, i: f64, t_env_k: f64, dt: f64) -> f64 {
    let heat = params.resistance_ohm * i * i;
    let cooling = (state.temp_k - t_env_k) / params.r_conv();
    state.temp_k + dt * (heat - cooling) / params.heat_capacity()
}

/// Segment-local energy constants anchored at a reference SoC.
///
/// `energy(q)` is the physical stored-energy change from the anchor,
/// `Q * integral(u dq)`, continuous across segment boundaries. The quadratic
/// constants `(c, e0)` satisfy `energy(q) = 1/2 c u(q)^2 - e0` exactly while
/// `q` stays on the anchor's segment; after a crossing the identity holds
/// again with the re-based constants from [`EnergyDatum::rebased_at`].
#[derive(Debug, Clone, Copy)]
pub struct EnergyDatum {
    /// Equivalent capacitance `Q / beta` of the anchor segment, in farads.
    pub c: f64,
    /// Energy offset making the anchor's energy zero, in joules.
    pub e0: f64,
    pub segment: usize,
    anchor_q: f64,
}

impl EnergyDatum {
    /// Anchors the datum at `q0`: `energy(q0) = 0`.
    pub fn new(params: &CellParams, q0: f64) -> Result<Self, CellError> {
        let seg_idx = params.ocv.segment_index(q0)?;
        let seg = params.ocv.segments()[seg_idx];
        let c = params.capacity_c / seg.beta;
        let u0 = seg.alpha + seg.beta * q0;
        Ok(Self {
            c,
            e0: 0.5 * c * u0 * u0,
            segment: seg_idx,
            anchor_q: q0,
        })
    }

    /// Stored-energy change from the anchor to `q`.
    pub fn energy(&self, params: &CellParams, q: f64) -> Result<f64, CellError> {
        Ok(params.capacity_c * params.ocv.voltage_integral(self.anchor_q, q)?)
    }

    /// Constants valid on the segment containing `q`, re-based so the energy
    /// value is continuous through the crossing.
    pub fn rebased_at(&self, params: &CellParams, q: f64) -> Result<Self, CellError> {
        let seg_idx = params.ocv.segment_index(q)?;
        if seg_idx == self.segment {
            return Ok(*self);
        }
        let seg = params.ocv.segments()[seg_idx];
        let c = params.capacity_c / seg.beta;
        let u = seg.alpha + seg.beta * q;
        let e_here = self.energy(params, q)?;
        Ok(Self {
            c,
            e0: 0.5 * c * u * u - e_here,
            segment: seg_idx,
            anchor_q: self.anchor_q,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn single_segment_params() -> CellParams {
        CellParams {
            capacity_c: 9000.0,
            resistance_ohm: 0.0313,
            converter_resistance_ohm: 0.010,
            ocv: OcvCurve::from_breakpoints(&[(0.0, 3.0), (1.0, 4.2)]).unwrap(),
            q_min: 0.05,
            q_max: 0.95,
            i_min: -7.5,
            i_max: 7.5,
            temp_min_k: 273.15,
            temp_max_k: 333.15,
            mass_kg: 0.0438,
            specific_heat: 918.49,
            area_m2: 0.0042,
            h_conv: 5.8,
        }
    }

    #[test]
    fn curve_rejects_bad_breakpoints() {
        assert!(OcvCurve::from_breakpoints(&[(0.0, 3.0)]).is_err());
        assert!(OcvCurve::from_breakpoints(&[(0.1, 3.0), (1.0, 4.2)]).is_err());
        assert!(OcvCurve::from_breakpoints(&[(0.0, 3.0), (0.5, 2.9), (1.0, 4.2)]).is_err());
        assert!(OcvCurve::from_breakpoints(&[(0.0, 3.0), (0.0, 3.1), (1.0, 4.2)]).is_err());
    }

    #[test]
    fn default_curve_is_continuous_and_monotone() {
        let curve = OcvCurve::default_three_segment();
        assert_eq!(curve.segments().len(), 3);
        for pair in curve.segments().windows(2) {
            let left = pair[0].alpha + pair[0].beta * pair[0].q_hi;
            let right = pair[1].alpha + pair[1].beta * pair[1].q_lo;
            assert_abs_diff_eq!(left, right, epsilon = 1e-12);
            assert!(pair[0].beta > 0.0 && pair[1].beta > 0.0);
        }
        assert_abs_diff_eq!(curve.voltage(0.0).unwrap(), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(curve.voltage(1.0).unwrap(), 4.2, epsilon = 1e-12);
    }

    #[test]
    fn terminal_voltage_drops_with_discharge_current() {
        // u = 3.6 V at the matching SoC of the single-segment curve, R = 31.3 mOhm.
        let params = single_segment_params();
        let state = CellState {
            q: 0.5,
            temp_k: 298.0,
        };
        assert_abs_diff_eq!(params.ocv.voltage(0.5).unwrap(), 3.6, epsilon = 1e-12);
        let v_dis = terminal_voltage(&params, &state, 5.0).unwrap();
        let v_chg = terminal_voltage(&params, &state, -5.0).unwrap();
        assert_abs_diff_eq!(v_dis, 3.4435, epsilon = 1e-12);
        assert_abs_diff_eq!(v_chg, 3.7565, epsilon = 1e-12);
    }

    #[test]
    fn module_power_splits_into_output_plus_loss() {
        let params = single_segment_params();
        let state = CellState {
            q: 0.5,
            temp_k: 298.0,
        };
        let p = module_power(&params, &state, 5.0).unwrap();
        assert_abs_diff_eq!(p.internal_w, 18.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.loss_w, 0.0413 * 25.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.output_w, p.internal_w - p.loss_w, epsilon = 1e-12);
    }

    #[test]
    fn electrical_step_counts_coulombs_and_saturates() {
        let params = single_segment_params();
        let state = CellState {
            q: 0.5,
            temp_k: 298.0,
        };
        let step = electrical_step(&params, &state, 4.5, 2.0);
        assert_relative_eq!(step.q, 0.5 - 9.0 / 9000.0, max_relative = 1e-12);
        assert!(!step.saturated);

        let near_empty = CellState {
            q: 0.051,
            temp_k: 298.0,
        };
        let clipped = electrical_step(&params, &near_empty, 7.5, 100.0);
        assert_eq!(clipped.q, params.q_min);
        assert!(clipped.saturated);
    }

    #[test]
    fn thermal_step_matches_hand_value_at_zero_current() {
        // T = 305 K relaxing toward 298 K: one 1 s step loses
        // (7 / 41.05) / (0.0438 * 918.49) K, landing at 304.99576 K.
        let params = single_segment_params();
        assert_relative_eq!(params.r_conv(), 41.05, max_relative = 2e-3);
        let state = CellState {
            q: 0.5,
            temp_k: 305.0,
        };
        let t1 = thermal_step(&params, &state, 0.0, 298.0, 1.0);
        assert_abs_diff_eq!(t1, 304.99576, epsilon = 5e-6);
    }

    #[test]
    fn thermal_decay_factor_is_exact_at_zero_current() {
        let params = single_segment_params();
        let t_env = 298.0;
        let factor = 1.0 - 1.0 / (params.heat_capacity() * params.r_conv());
        let mut state = CellState {
            q: 0.5,
            temp_k: 309.3,
        };
        for _ in 0..50 {
            let next = thermal_step(&params, &state, 0.0, t_env, 1.0);
            let expected = t_env + (state.temp_k - t_env) * factor;
            assert_abs_diff_eq!(next, expected, epsilon = 1e-12);
            state.temp_k = next;
        }
    }

    #[test]
    fn energy_matches_segment_quadratic() {
        // Single segment alpha = 3.0, beta = 1.2: C = 7500 F and the move
        // 0.75 -> 0.70 releases 1/2 * 7500 * (3.84^2 - 3.90^2) = -1741.5 J.
        let params = single_segment_params();
        let datum = EnergyDatum::new(&params, 0.75).unwrap();
        assert_abs_diff_eq!(datum.c, 7500.0, epsilon = 1e-9);
        let e = datum.energy(&params, 0.70).unwrap();
        assert_abs_diff_eq!(e, -1741.5, epsilon = 1e-9);
        // Quadratic identity on the same segment.
        let u = params.ocv.voltage(0.70).unwrap();
        assert_abs_diff_eq!(0.5 * datum.c * u * u - datum.e0, e, epsilon = 1e-9);
    }

    #[test]
    fn energy_is_continuous_across_segment_crossing() {
        let mut params = single_segment_params();
        params.ocv = OcvCurve::default_three_segment();
        let datum = EnergyDatum::new(&params, 0.5).unwrap();
        // Walk across the 0.9 knee in fine steps; energy must stay continuous
        // and the re-based constants must reproduce it exactly.
        let mut prev = datum.energy(&params, 0.8999).unwrap();
        let mut q = 0.8999;
        // One 1e-4 step moves at most Q * u_max * dq = 3.78 J; anything much
        // beyond that would be a discontinuity at the knee.
        let step_bound = params.capacity_c * 4.2 * 1.1e-4;
        while q < 0.9102 {
            q += 1e-4;
            let e = datum.energy(&params, q).unwrap();
            assert!((e - prev).abs() < step_bound, "jump at q={q}: {prev} -> {e}");
            let rebased = datum.rebased_at(&params, q).unwrap();
            let u = params.ocv.voltage(q).unwrap();
            assert_relative_eq!(0.5 * rebased.c * u * u - rebased.e0, e, epsilon = 1e-9);
            prev = e;
        }
    }

    #[test]
    fn rebasing_across_a_boundary_and_back_is_identity() {
        let mut params = single_segment_params();
        params.ocv = OcvCurve::default_three_segment();
        let datum = EnergyDatum::new(&params, 0.85).unwrap();
        let across = datum.rebased_at(&params, 0.95).unwrap();
        let back = across.rebased_at(&params, 0.85).unwrap();
        assert_relative_eq!(back.c, datum.c, max_relative = 1e-12);
        assert_relative_eq!(back.e0, datum.e0, max_relative = 1e-12);
        assert_eq!(back.segment, datum.segment);
    }
}
