//! Divides a cluster's optimal power among its member cells.
//!
//! The receding-horizon layer hands each cluster an internal power target
//! and the matching loss estimate. Three rules map that to member powers:
//! an equal share, a share proportional to each member's conductance, and a
//! small per-cluster convex program that re-runs the horizon machinery over
//! singleton units for one step, minimizing true member losses under the
//! same safety and balancing corridors. The program's supply row asks the
//! members' net output to meet the cluster's net output `P*_S - P*_l`; the
//! inter-cluster loss estimate fixes that right-hand side even though member
//! losses need not sum to it exactly, so the result can differ from the
//! cluster plan by the aggregation error, which the closed loop re-measures
//! away at the next step.
//!
//! Powers here are internal battery-side watts, so the current command is
//! plain division by the open-circuit voltage. Clamping to the cell's
//! current window happens at this boundary rather than in the plant: a
//! clamped command is a controller artifact worth surfacing, not a plant
//! behavior.

use crate::aggregate::aggregate_cluster;
use crate::cell::{CellError, CellParams, CellState};
use crate::conic::{solve, SolverOptions, Status};
use crate::horizon::{build_horizon, BalancingDeltas, HorizonConfig};

/// Which rule divides a cluster's power among members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitScheme {
    /// Every member gets the same share.
    Equal,
    /// Shares proportional to member conductance.
    Resistance,
    /// Per-cluster one-step convex program over singleton units.
    Optimal,
}

impl std::str::FromStr for SplitScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "equal" => Ok(SplitScheme::Equal),
            "resistance" => Ok(SplitScheme::Resistance),
            "optimal" => Ok(SplitScheme::Optimal),
            other => Err(format!(
                "unknown split scheme {other:?} (expected equal, resistance or optimal)"
            )),
        }
    }
}

impl std::fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitScheme::Equal => "equal",
            SplitScheme::Resistance => "resistance",
            SplitScheme::Optimal => "optimal",
        })
    }
}

/// Settings for one cluster's split.
#[derive(Debug, Clone)]
pub struct SplitOptions {
    pub scheme: SplitScheme,
    /// The conductance rule weighs by the bare cell resistance; this folds
    /// the converter resistance in as well, which matches what the chain
    /// actually dissipates.
    pub weight_includes_converter: bool,
    /// Balancing corridors of the per-cluster program.
    pub deltas: BalancingDeltas,
    /// Slack penalty of the per-cluster program.
    pub lambda: f64,
    pub dt: f64,
    pub t_env_k: f64,
    pub solver: SolverOptions,
}

/// One member's current command.
#[derive(Debug, Clone, Copy)]
pub struct CurrentCommand {
    pub i_a: f64,
    /// The raw command left the cell's current window and was clamped.
    pub clamped: bool,
}

/// Split outcome for one cluster, indexed like the member list.
#[derive(Debug, Clone)]
pub struct SplitResult {
    pub scheme: SplitScheme,
    /// Internal battery-side power per member, watts.
    pub p_b_w: Vec<f64>,
    pub commands: Vec<CurrentCommand>,
    /// The convex program did not reach optimality and the conductance
    /// rule stood in.
    pub fallback: bool,
}

/// Equal share of `p_star_w` over `n` members.
pub fn split_equal(p_star_w: f64, n: usize) -> Vec<f64> {
    assert!(n >= 1, "cannot split over zero members");
    vec![p_star_w / n as f64; n]
}

/// Shares proportional to `1 / R` for the given member resistances.
pub fn split_resistance(p_star_w: f64, resistances_ohm: &[f64]) -> Vec<f64> {
    assert!(!resistances_ohm.is_empty(), "cannot split over zero members");
    let mut conductance_sum = 0.0;
    for &r in resistances_ohm {
        assert!(r > 0.0, "member resistance must be positive, got {r}");
        conductance_sum += 1.0 / r;
    }
    resistances_ohm
        .iter()
        .map(|&r| p_star_w / (r * conductance_sum))
        .collect()
}

/// Converts an internal power to a current command through `i = P_b / u(q)`,
/// clamped into the cell's current window.
pub fn power_to_current(
    params: &CellParams,
    state: &CellState,
    p_b_w: f64,
) -> Result<CurrentCommand, CellError> {
    let u = params.ocv.voltage(state.q)?;
    let raw = p_b_w / u;
    let i = raw.clamp(params.i_min, params.i_max);
    Ok(CurrentCommand {
        i_a: i,
        clamped: i != raw,
    })
}

/// Minimum-loss split via a one-step program over singleton units.
///
/// Returns `None` when the solve does not reach optimality; the caller
/// picks the stand-in rule.
pub fn split_optimal(
    params: &[CellParams],
    states: &[CellState],
    members: &[usize],
    p_star_w: f64,
    p_loss_star_w: f64,
    opts: &SplitOptions,
) -> Option<Vec<f64>> {
    let models: Vec<_> = members
        .iter()
        .map(|&cell| aggregate_cluster(params, states, std::slice::from_ref(&cell)))
        .collect();
    let cfg = HorizonConfig {
        horizon: 1,
        dt: opts.dt,
        t_env_k: opts.t_env_k,
        lambda: opts.lambda,
    };
    let demand = vec![p_star_w - p_loss_star_w];
    let (problem, layout) = build_horizon(&models, &demand, &cfg, opts.deltas, true);
    let sol = solve(&problem, &opts.solver, None);
    if sol.status != Status::Optimal {
        return None;
    }
    Some((0..members.len()).map(|j| sol.x[layout.ps(j, 0)]).collect())
}

/// Runs the configured scheme for one cluster and converts the member
/// powers to current commands.
pub fn split_cluster(
    params: &[CellParams],
    states: &[CellState],
    members: &[usize],
    p_star_w: f64,
    p_loss_star_w: f64,
    opts: &SplitOptions,
) -> Result<SplitResult, CellError> {
    let resistances = |include_converter: bool| -> Vec<f64> {
        members
            .iter()
            .map(|&cell| {
                let p = &params[cell];
                if include_converter {
                    p.chain_resistance()
                } else {
                    p.resistance_ohm
                }
            })
            .collect()
    };

    let mut fallback = false;
    let p_b_w = match opts.scheme {
        SplitScheme::Equal => split_equal(p_star_w, members.len()),
        SplitScheme::Resistance => {
            split_resistance(p_star_w, &resistances(opts.weight_includes_converter))
        }
        SplitScheme::Optimal => {
            match split_optimal(params, states, members, p_star_w, p_loss_star_w, opts) {
                Some(p) => p,
                None => {
                    fallback = true;
                    split_resistance(p_star_w, &resistances(opts.weight_includes_converter))
                }
            }
        }
    };

    let mut commands = Vec::with_capacity(members.len());
    for (&cell, &p) in members.iter().zip(&p_b_w) {
        commands.push(power_to_current(&params[cell], &states[cell], p)?);
    }
    Ok(SplitResult {
        scheme: opts.scheme,
        p_b_w,
        commands,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::OcvCurve;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn cell_with(resistance: f64) -> CellParams {
        CellParams {
            capacity_c: 9000.0,
            resistance_ohm: resistance,
            converter_resistance_ohm: 0.010,
            ocv: OcvCurve::default_three_segment(),
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

    fn opts(scheme: SplitScheme) -> SplitOptions {
        SplitOptions {
            scheme,
            weight_includes_converter: false,
            deltas: BalancingDeltas {
                soc: 0.5,
                temp_k: 50.0,
            },
            lambda: 1e3,
            dt: 1.0,
            t_env_k: 298.0,
            solver: SolverOptions::default(),
        }
    }

    #[test]
    fn equal_split_divides_evenly() {
        assert_eq!(split_equal(100.0, 4), vec![25.0; 4]);
        assert_eq!(split_equal(0.0, 3), vec![0.0; 3]);
        assert_eq!(split_equal(42.0, 1), vec![42.0]);
    }

    #[test]
    fn resistance_split_weighs_by_conductance() {
        let shares = split_resistance(90.0, &[0.030, 0.060]);
        assert_abs_diff_eq!(shares[0], 60.0, epsilon = 1e-12);
        assert_abs_diff_eq!(shares[1], 30.0, epsilon = 1e-12);

        let even = split_resistance(90.0, &[0.040, 0.040, 0.040]);
        for s in even {
            assert_abs_diff_eq!(s, 30.0, epsilon = 1e-12);
        }

        assert_abs_diff_eq!(split_resistance(17.0, &[0.033])[0], 17.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_splits_conserve_and_scale() {
        let rs = [0.0313, 0.0357, 0.0391, 0.0402, 0.0413];
        for p in [250.0, -120.0, 0.0] {
            let eq = split_equal(p, rs.len());
            let rw = split_resistance(p, &rs);
            assert_relative_eq!(eq.iter().sum::<f64>(), p, max_relative = 1e-12);
            assert_relative_eq!(rw.iter().sum::<f64>(), p, max_relative = 1e-12);
            // Doubling is exact in binary floating point.
            let eq2 = split_equal(2.0 * p, rs.len());
            let rw2 = split_resistance(2.0 * p, &rs);
            for i in 0..rs.len() {
                assert_eq!(eq2[i], 2.0 * eq[i]);
                assert_eq!(rw2[i], 2.0 * rw[i]);
            }
        }
    }

    #[test]
    fn current_is_power_over_ocv_with_clamping() {
        // The default curve passes 3.6 V at q = 0.3.
        let params = cell_with(0.035);
        let state = CellState {
            q: 0.3,
            temp_k: 300.0,
        };
        let cmd = power_to_current(&params, &state, 18.0).unwrap();
        assert_abs_diff_eq!(cmd.i_a, 5.0, epsilon = 1e-12);
        assert!(!cmd.clamped);

        let zero = power_to_current(&params, &state, 0.0).unwrap();
        assert_eq!(zero.i_a, 0.0);
        assert!(!zero.clamped);

        let hot = power_to_current(&params, &state, 36.0).unwrap();
        assert_eq!(hot.i_a, 7.5);
        assert!(hot.clamped);
    }

    /// Solver inputs consistent with asking the whole cluster for
    /// `p_star_w`: the loss estimate the inter-cluster layer would carry.
    fn cluster_target(
        params: &[CellParams],
        states: &[CellState],
        members: &[usize],
        p_star_w: f64,
    ) -> (f64, f64) {
        let m = aggregate_cluster(params, states, members);
        let loss = m.chain_resistance_ohm * (p_star_w / m.u) * (p_star_w / m.u);
        (p_star_w, loss)
    }

    #[test]
    fn optimal_split_of_identical_members_is_equal() {
        let params: Vec<_> = (0..4).map(|_| cell_with(0.035)).collect();
        let states = vec![
            CellState {
                q: 0.7,
                temp_k: 302.0
            };
            4
        ];
        let members = [0, 1, 2, 3];
        let (p_star, p_loss) = cluster_target(&params, &states, &members, 60.0);
        let shares =
            split_optimal(&params, &states, &members, p_star, p_loss, &opts(SplitScheme::Optimal))
                .unwrap();
        for s in &shares {
            assert_abs_diff_eq!(*s, shares[0], epsilon = 1e-3);
        }
        let delivered: f64 = shares
            .iter()
            .zip(&params)
            .zip(&states)
            .map(|((&p, c), s)| {
                let u = c.ocv.voltage(s.q).unwrap();
                p - c.chain_resistance() * (p / u) * (p / u)
            })
            .sum();
        assert_relative_eq!(delivered, p_star - p_loss, max_relative = 1e-6);
    }

    /// Grid search over the first member's power with the second recovered
    /// from the net-output row, minimizing true chain loss.
    fn brute_force_two_way(
        params: &[CellParams],
        states: &[CellState],
        net_w: f64,
    ) -> (f64, f64) {
        let u0 = params[0].ocv.voltage(states[0].q).unwrap();
        let u1 = params[1].ocv.voltage(states[1].q).unwrap();
        let (a0, a1) = (
            params[0].chain_resistance() / (u0 * u0),
            params[1].chain_resistance() / (u1 * u1),
        );
        let cap0 = u0 * params[0].i_max;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let steps = 40_000;
        for k in 0..=steps {
            let p0 = cap0 * k as f64 / steps as f64;
            // p1 - a1 p1^2 = net - (p0 - a0 p0^2), smaller root of the
            // deliverability quadratic.
            let rhs = net_w - (p0 - a0 * p0 * p0);
            let disc = 1.0 - 4.0 * a1 * rhs;
            if disc < 0.0 {
                continue;
            }
            let p1 = (1.0 - disc.sqrt()) / (2.0 * a1);
            if p1 < 0.0 || p1 > u1 * params[1].i_max {
                continue;
            }
            let loss = a0 * p0 * p0 + a1 * p1 * p1;
            if loss < best.0 {
                best = (loss, p0, p1);
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn optimal_split_matches_a_grid_search() {
        // Chain resistances 30 and 60 mOhm; conductance says 2:1.
        let params = vec![cell_with(0.020), cell_with(0.050)];
        let states = vec![
            CellState {
                q: 0.7,
                temp_k: 302.0
            };
            2
        ];
        let members = [0, 1];
        let (p_star, p_loss) = cluster_target(&params, &states, &members, 30.0);
        let shares =
            split_optimal(&params, &states, &members, p_star, p_loss, &opts(SplitScheme::Optimal))
                .unwrap();
        let (b0, b1) = brute_force_two_way(&params, &states, p_star - p_loss);
        assert_relative_eq!(shares[0], b0, max_relative = 2e-2);
        assert_relative_eq!(shares[1], b1, max_relative = 2e-2);
        assert_relative_eq!(shares[0] / shares[1], 2.0, max_relative = 2e-2);
    }

    #[test]
    fn tight_soc_corridor_shifts_power_toward_the_fuller_cell() {
        let params = vec![cell_with(0.035), cell_with(0.035)];
        let states = vec![
            CellState {
                q: 0.66,
                temp_k: 302.0,
            },
            CellState {
                q: 0.74,
                temp_k: 302.0,
            },
        ];
        let members = [0, 1];
        let (p_star, p_loss) = cluster_target(&params, &states, &members, 40.0);

        let loose = split_optimal(
            &params,
            &states,
            &members,
            p_star,
            p_loss,
            &opts(SplitScheme::Optimal),
        )
        .unwrap();
        let mut tight_opts = opts(SplitScheme::Optimal);
        tight_opts.deltas.soc = 1e-5;
        let tight =
            split_optimal(&params, &states, &members, p_star, p_loss, &tight_opts).unwrap();

        // Equal resistances make the loose split symmetric; the corridor
        // penalty can only move discharge toward the fuller cell.
        assert!(
            tight[1] - tight[0] > loose[1] - loose[0] + 0.1,
            "tight {tight:?} vs loose {loose:?}"
        );
    }

    #[test]
    fn cluster_dispatch_converts_and_falls_back() {
        let params = vec![cell_with(0.031), cell_with(0.041)];
        let states = vec![
            CellState {
                q: 0.7,
                temp_k: 302.0
            };
            2
        ];
        let members = [0, 1];

        let res = split_cluster(&params, &states, &members, 20.0, 0.4, &opts(SplitScheme::Equal))
            .unwrap();
        assert_eq!(res.p_b_w, vec![10.0, 10.0]);
        assert!(!res.fallback);
        let u = params[0].ocv.voltage(0.7).unwrap();
        assert_abs_diff_eq!(res.commands[0].i_a, 10.0 / u, epsilon = 1e-12);

        // A one-iteration budget cannot reach optimality, so the
        // conductance rule stands in.
        let mut crippled = opts(SplitScheme::Optimal);
        crippled.solver.max_iter = 1;
        let res = split_cluster(&params, &states, &members, 20.0, 0.4, &crippled).unwrap();
        assert!(res.fallback);
        let direct = split_resistance(20.0, &[0.031, 0.041]);
        assert_eq!(res.p_b_w, direct);
    }
}
