//! Receding-horizon power allocation as a conic program.
//!
//! One program covers both levels of the hierarchy. At the top level each
//! unit is a cluster's equivalent model and the demand series is the pack
//! demand; inside a cluster each unit is a single cell (aggregated over a
//! singleton member list) and the demand series is the output the cluster
//! was just told to produce. The only structural difference is that the
//! per-cell form carries a temperature balancing slack for the terminal
//! step as well, which `Layout::terminal_temp_slack` selects.
//!
//! Per unit `j` and step `t` the variables are the internal battery-side
//! power `ps` (positive discharging), the chain conversion loss `pl`, the
//! stored-energy deviation `e` from the measured starting point, the
//! temperature `T`, and the balancing slacks. Energy and temperature obey
//! linear step dynamics; the loss is tied to the power through a rotated
//! cone relaxing `pl >= R C ps^2 / (2 (e + e0))`, which is exact Joule loss
//! when the cone is tight, and minimizing total loss keeps it tight.
//! Balancing constrains each unit's squared-voltage level (energy scaled by
//! `2/C`) and temperature to a corridor around the fleet average; the
//! averages enter through shared expressions so every row stays local to
//! its unit's variable block and the interior-point solver can factor the
//! program block by block.

use crate::aggregate::ClusterModel;
use crate::conic::{
    BlockStructure, ConicProblem, LinExpr, RotatedCone, SharedExpr, VarBound,
};

/// Settings shared by every program built over one control step.
#[derive(Debug, Clone)]
pub struct HorizonConfig {
    /// Number of lookahead steps.
    pub horizon: usize,
    /// Step length in seconds.
    pub dt: f64,
    /// Ambient temperature in kelvin.
    pub t_env_k: f64,
    /// Penalty weight on balancing slack.
    pub lambda: f64,
}

/// Half-widths of the balancing corridors.
#[derive(Debug, Clone, Copy)]
pub struct BalancingDeltas {
    /// SoC half-width as a fraction; converted per unit into the
    /// squared-voltage level coordinate the energy corridor lives in.
    pub soc: f64,
    /// Temperature half-width in kelvin.
    pub temp_k: f64,
}

/// Variable indexing for one horizon program.
///
/// Each unit owns one contiguous block: `ps[0..h)`, `pl[0..h)`, `e[1..=h]`,
/// `T[1..=h]`, `xe[1..=h]`, then `xt`. The step-0 energy deviation is zero
/// by construction and the step-0 temperature is measured, so neither is a
/// variable.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub h: usize,
    pub k: usize,
    /// Whether temperature balancing extends to the terminal step.
    pub terminal_temp_slack: bool,
}

impl Layout {
    pub fn per_unit(&self) -> usize {
        5 * self.h + self.num_temp_slacks()
    }

    pub fn num_vars(&self) -> usize {
        self.k * self.per_unit()
    }

    /// Temperature balancing steps: `1..=h-1`, plus the terminal step in
    /// the per-cell form.
    pub fn num_temp_slacks(&self) -> usize {
        self.h - 1 + self.terminal_temp_slack as usize
    }

    fn base(&self, j: usize) -> usize {
        j * self.per_unit()
    }

    /// Internal power over step `t`, `t < h`.
    pub fn ps(&self, j: usize, t: usize) -> usize {
        debug_assert!(t < self.h);
        self.base(j) + t
    }

    /// Conversion loss over step `t`, `t < h`.
    pub fn pl(&self, j: usize, t: usize) -> usize {
        debug_assert!(t < self.h);
        self.base(j) + self.h + t
    }

    /// Energy deviation at the end of step `t-1`, `1 <= t <= h`.
    pub fn e(&self, j: usize, t: usize) -> usize {
        debug_assert!(t >= 1 && t <= self.h);
        self.base(j) + 2 * self.h + (t - 1)
    }

    /// Temperature at the end of step `t-1`, `1 <= t <= h`.
    pub fn temp(&self, j: usize, t: usize) -> usize {
        debug_assert!(t >= 1 && t <= self.h);
        self.base(j) + 3 * self.h + (t - 1)
    }

    /// Energy balancing slack for step `t`, `1 <= t <= h`.
    pub fn slack_e(&self, j: usize, t: usize) -> usize {
        debug_assert!(t >= 1 && t <= self.h);
        self.base(j) + 4 * self.h + (t - 1)
    }

    /// Temperature balancing slack for step `t`, `1 <= t <= num_temp_slacks`.
    pub fn slack_t(&self, j: usize, t: usize) -> usize {
        debug_assert!(t >= 1 && t <= self.num_temp_slacks());
        self.base(j) + 5 * self.h + (t - 1)
    }
}

/// Book count of the top-level program's constraints: `11 h k + 5 k + h`.
///
/// The convention counts, per unit and step, the two sides of the three
/// safety windows (power, energy, temperature), the two balancing
/// absolute-value constraints (temperature only through step `h - 1`), the
/// loss cone, and the two dynamics equalities; per unit, the four sign
/// conditions (`pl >= 0`, both slacks `>= 0`, stored energy above empty)
/// and the two initial-condition pins; plus one demand row per step.
/// Sides of a window count separately, a declaration like `pl >= 0` counts
/// once per unit, and the pins count even though the implementation bakes
/// them in as constants rather than rows.
pub fn constraint_tally(h: usize, k: usize) -> usize {
    let per_unit_step = 6 + 2 + 1 + 2; // windows, balancing, cone, dynamics
    let per_unit = 4 + 2; // sign conditions and initial pins
    per_unit_step * h * k - k // temperature balancing skips the terminal step
        + per_unit * k
        + h
}

/// First-step command extracted for one unit.
#[derive(Debug, Clone, Copy)]
pub struct UnitCommand {
    /// Internal battery-side power in watts, positive discharging.
    pub internal_w: f64,
    /// Chain conversion loss in watts.
    pub loss_w: f64,
}

impl UnitCommand {
    /// Power delivered at the unit's output terminals.
    pub fn output_w(&self) -> f64 {
        self.internal_w - self.loss_w
    }
}

/// Reads the step-0 command for every unit out of a solution vector.
pub fn first_step(x: &[f64], layout: &Layout) -> Vec<UnitCommand> {
    (0..layout.k)
        .map(|j| UnitCommand {
            internal_w: x[layout.ps(j, 0)],
            loss_w: x[layout.pl(j, 0)],
        })
        .collect()
}

/// Builds the horizon program for `models` against the `demand` series.
///
/// `demand` is the required total output power per step, length
/// `cfg.horizon`. Temperatures in `models` are the measured starting
/// values; energy deviations start at zero by choice of anchor.
pub fn build_horizon(
    models: &[ClusterModel],
    demand: &[f64],
    cfg: &HorizonConfig,
    deltas: BalancingDeltas,
    terminal_temp_slack: bool,
) -> (ConicProblem, Layout) {
    let h = cfg.horizon;
    let k = models.len();
    assert!(h >= 1, "horizon must cover at least one step");
    assert_eq!(demand.len(), h, "demand series must match the horizon");
    assert!(k >= 1, "need at least one unit");

    let layout = Layout {
        h,
        k,
        terminal_temp_slack,
    };
    let mut p = ConicProblem::new(layout.num_vars());

    // Fleet-average levels as shared expressions: one per energy step, then
    // one per temperature balancing step. The constant part of the energy
    // level average is folded into each row's constant below.
    let kf = k as f64;
    for t in 1..=h {
        let terms = models
            .iter()
            .enumerate()
            .map(|(l, m)| (layout.e(l, t), 2.0 / (m.capacitance * kf)))
            .collect();
        p.shared_exprs.push(SharedExpr { terms });
    }
    for t in 1..=layout.num_temp_slacks() {
        let terms = (0..k).map(|l| (layout.temp(l, t), 1.0 / kf)).collect();
        p.shared_exprs.push(SharedExpr { terms });
    }
    let avg_e_expr = |t: usize| t - 1;
    let avg_t_expr = |t: usize| h + (t - 1);
    let avg_level_const = models
        .iter()
        .map(|m| 2.0 * m.e0 / (m.capacitance * kf))
        .sum::<f64>();

    let mut objective = LinExpr::default();
    for j in 0..k {
        for t in 0..h {
            objective = objective.term(layout.pl(j, t), 1.0);
        }
        for t in 1..=h {
            objective = objective.term(layout.slack_e(j, t), cfg.lambda);
        }
        for t in 1..=layout.num_temp_slacks() {
            objective = objective.term(layout.slack_t(j, t), cfg.lambda);
        }
    }
    p.minimize = objective;

    for (j, m) in models.iter().enumerate() {
        // Safety windows and sign conditions as native bounds.
        let e_lo = m.energy_at(m.q_min).max(-m.e0);
        let e_hi = m.energy_at(m.q_max);
        for t in 0..h {
            p.bounds.push((
                layout.ps(j, t),
                VarBound {
                    lower: Some(m.u * m.i_min),
                    upper: Some(m.u * m.i_max),
                },
            ));
            p.bounds.push((
                layout.pl(j, t),
                VarBound {
                    lower: Some(0.0),
                    upper: None,
                },
            ));
        }
        for t in 1..=h {
            p.bounds.push((
                layout.e(j, t),
                VarBound {
                    lower: Some(e_lo),
                    upper: Some(e_hi),
                },
            ));
            p.bounds.push((
                layout.temp(j, t),
                VarBound {
                    lower: Some(m.temp_min_k),
                    upper: Some(m.temp_max_k),
                },
            ));
            p.bounds.push((
                layout.slack_e(j, t),
                VarBound {
                    lower: Some(0.0),
                    upper: None,
                },
            ));
        }
        for t in 1..=layout.num_temp_slacks() {
            p.bounds.push((
                layout.slack_t(j, t),
                VarBound {
                    lower: Some(0.0),
                    upper: None,
                },
            ));
        }

        // Energy steps: internal power drains the store exactly.
        p.eq_rows
            .push(LinExpr::default().term(layout.e(j, 1), 1.0).term(
                layout.ps(j, 0),
                cfg.dt,
            ));
        for t in 1..h {
            p.eq_rows.push(
                LinExpr::default()
                    .term(layout.e(j, t + 1), 1.0)
                    .term(layout.e(j, t), -1.0)
                    .term(layout.ps(j, t), cfg.dt),
            );
        }

        // Temperature steps: only the in-cell share of the chain loss heats
        // the unit; convection pulls toward ambient.
        let cool = cfg.dt / (m.heat_capacity * m.r_conv);
        let heat =
            cfg.dt * (m.battery_resistance_ohm / m.chain_resistance_ohm) / m.heat_capacity;
        p.eq_rows.push(
            LinExpr::constant(-((1.0 - cool) * m.temp_k + cool * cfg.t_env_k))
                .term(layout.temp(j, 1), 1.0)
                .term(layout.pl(j, 0), -heat),
        );
        for t in 1..h {
            p.eq_rows.push(
                LinExpr::constant(-cool * cfg.t_env_k)
                    .term(layout.temp(j, t + 1), 1.0)
                    .term(layout.temp(j, t), -(1.0 - cool))
                    .term(layout.pl(j, t), -heat),
            );
        }

        // Loss cones on the energy at the start of each step. The entries
        // are normalized to order one by the unit's nominal current: power
        // in units of `u i_nom`, loss in units of the matching Joule loss,
        // energy relative to the anchor level. A rotated cone is invariant
        // under such opposite rescalings of its first two entries, so this
        // is the same constraint in better units.
        let i_nom = m.i_max.max(-m.i_min);
        // The anchor satisfies e0 = C ocv(q)^2 / 2, so with the power unit
        // built from the same voltage the scaled cone reproduces
        // pl >= R C ps^2 / (2 (e + e0)) exactly.
        let p_nom = m.ocv_at(m.q) * i_nom;
        let loss_nom = 2.0 * m.chain_resistance_ohm * i_nom * i_nom;
        for t in 0..h {
            let v = if t == 0 {
                LinExpr::constant(1.0)
            } else {
                LinExpr::constant(1.0).term(layout.e(j, t), 1.0 / m.e0)
            };
            p.cones.push(RotatedCone {
                u: LinExpr::default().term(layout.pl(j, t), 1.0 / loss_nom),
                v,
                w: LinExpr::default().term(layout.ps(j, t), 1.0 / p_nom),
            });
        }

        // Balancing corridors. Energy balances in the squared-voltage level
        // `(2/C)(e + e0)`, whose half-width for a SoC half-width `dq` is
        // `2 u beta dq` at the operating point.
        let delta_level = 2.0 * m.ocv_at(m.q) * m.beta * deltas.soc;
        let level_coef = 2.0 / m.capacitance;
        for t in 1..=h {
            let xe = layout.slack_e(j, t);
            p.nonneg_rows.push(
                LinExpr::constant(delta_level + avg_level_const - level_coef * m.e0)
                    .term(xe, 1.0)
                    .shared(avg_e_expr(t), 1.0)
                    .term(layout.e(j, t), -level_coef),
            );
            p.nonneg_rows.push(
                LinExpr::constant(delta_level - avg_level_const + level_coef * m.e0)
                    .term(xe, 1.0)
                    .shared(avg_e_expr(t), -1.0)
                    .term(layout.e(j, t), level_coef),
            );
        }
        for t in 1..=layout.num_temp_slacks() {
            let xt = layout.slack_t(j, t);
            p.nonneg_rows.push(
                LinExpr::constant(deltas.temp_k)
                    .term(xt, 1.0)
                    .shared(avg_t_expr(t), 1.0)
                    .term(layout.temp(j, t), -1.0),
            );
            p.nonneg_rows.push(
                LinExpr::constant(deltas.temp_k)
                    .term(xt, 1.0)
                    .shared(avg_t_expr(t), -1.0)
                    .term(layout.temp(j, t), 1.0),
            );
        }
    }

    // Output meets demand at every step.
    for (t, &d) in demand.iter().enumerate() {
        let mut row = LinExpr::constant(-d);
        for j in 0..k {
            row = row.term(layout.ps(j, t), 1.0).term(layout.pl(j, t), -1.0);
        }
        p.eq_rows.push(row);
    }

    p.blocks = Some(BlockStructure {
        var_blocks: (0..k)
            .map(|j| layout.base(j)..layout.base(j) + layout.per_unit())
            .collect(),
    });
    debug_assert!(p.validate().is_ok());

    (p, layout)
}
