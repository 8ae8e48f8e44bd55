//! Run configuration: defaults, file parsing and validation.
//!
//! A config file is sectioned key-value text (`[cells]`, `[bounds]`,
//! `[solver]`, `[simulation]`) layered on top of built-in defaults, so an
//! empty file is a complete, runnable configuration. Parsing is strict:
//! unknown keys and sections, duplicates and type mismatches are errors
//! with line numbers, because a silently ignored override is worse than a
//! failed run. Command-line flags are applied by the caller after parsing
//! and therefore win over the file, which wins over the defaults.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::cell::{CellParams, CellState, OcvCurve};
use crate::conic::SolverOptions;
use crate::horizon::BalancingDeltas;
use crate::rng::{self, DOMAIN_PACK_INIT};
use crate::split::SplitScheme;

/// Config file schema revision accepted by this build.
pub const CONFIG_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("unknown keys: {}", list_keys(.keys))]
    UnknownKeys { keys: Vec<(String, usize)> },
    #[error("line {line}: duplicate key {key}")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: {key}: expected {expected}, got {got:?}")]
    Type {
        line: usize,
        key: String,
        expected: &'static str,
        got: String,
    },
    #[error("line {line}: schema_version {got} not supported (this build reads {CONFIG_SCHEMA_VERSION})")]
    SchemaVersion { line: usize, got: u64 },
    #[error("invalid configuration: {msg}")]
    Validation { msg: String },
}

fn list_keys(keys: &[(String, usize)]) -> String {
    keys.iter()
        .map(|(k, line)| format!("{k} (line {line})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Cell population given as sampling ranges. Each cell draws its
/// resistance and initial state from an independent seeded stream, so the
/// population is reproducible and insensitive to sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPopulation {
    pub n: usize,
    pub capacity_c: f64,
    pub resistance_range_ohm: (f64, f64),
    pub converter_resistance_ohm: f64,
    pub mass_kg: f64,
    pub specific_heat: f64,
    pub area_m2: f64,
    pub h_conv: f64,
    pub current_range_a: (f64, f64),
    pub q_range: (f64, f64),
    pub temp_range_k: (f64, f64),
    pub soc_init_range: (f64, f64),
    pub temp_init_range_k: (f64, f64),
    pub ocv: OcvCurve,
}

impl Default for SampledPopulation {
    fn default() -> Self {
        Self {
            n: 400,
            capacity_c: 9000.0,
            resistance_range_ohm: (0.0313, 0.0413),
            converter_resistance_ohm: 0.010,
            mass_kg: 0.0438,
            specific_heat: 918.49,
            area_m2: 0.0042,
            h_conv: 5.8,
            current_range_a: (-7.5, 7.5),
            q_range: (0.05, 0.95),
            temp_range_k: (273.15, 333.15),
            soc_init_range: (0.70, 0.75),
            temp_init_range_k: (301.0, 305.0),
            ocv: OcvCurve::default_three_segment(),
        }
    }
}

fn draw(r: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        r.gen_range(range.0..range.1)
    }
}

impl SampledPopulation {
    /// Materializes the population for a given seed.
    pub fn sample(&self, seed: u64) -> (Vec<CellParams>, Vec<CellState>) {
        let mut params = Vec::with_capacity(self.n);
        let mut states = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut r = rng::stream(seed, DOMAIN_PACK_INIT, &[i as u64]);
            let resistance = draw(&mut r, self.resistance_range_ohm);
            let q0 = draw(&mut r, self.soc_init_range);
            let t0 = draw(&mut r, self.temp_init_range_k);
            params.push(CellParams {
                capacity_c: self.capacity_c,
                resistance_ohm: resistance,
                converter_resistance_ohm: self.converter_resistance_ohm,
                ocv: self.ocv.clone(),
                q_min: self.q_range.0,
                q_max: self.q_range.1,
                i_min: self.current_range_a.0,
                i_max: self.current_range_a.1,
                temp_min_k: self.temp_range_k.0,
                temp_max_k: self.temp_range_k.1,
                mass_kg: self.mass_kg,
                specific_heat: self.specific_heat,
                area_m2: self.area_m2,
                h_conv: self.h_conv,
            });
            states.push(CellState { q: q0, temp_k: t0 });
        }
        (params, states)
    }
}

/// Where the cells come from: sampled from ranges, or handed in directly
/// by library callers.
#[derive(Debug, Clone)]
pub enum PopulationSpec {
    Sampled(SampledPopulation),
    Explicit(Vec<(CellParams, CellState)>),
}

impl PopulationSpec {
    pub fn len(&self) -> usize {
        match self {
            PopulationSpec::Sampled(s) => s.n,
            PopulationSpec::Explicit(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn build(&self, seed: u64) -> (Vec<CellParams>, Vec<CellState>) {
        match self {
            PopulationSpec::Sampled(s) => s.sample(seed),
            PopulationSpec::Explicit(v) => v.iter().cloned().unzip(),
        }
    }
}

/// Everything a closed-loop run needs besides the demand profile.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub population: PopulationSpec,
    pub seed: u64,
    pub dt_s: f64,
    pub horizon: usize,
    pub duration_s: f64,
    pub scheme: SplitScheme,
    /// Per-cell balancing corridor, used for the balanced flags and the
    /// per-cluster split program.
    pub cell_deltas: BalancingDeltas,
    /// Cluster-level corridor for the fleet program; adaptively tightened
    /// during a run, never below `bound_floor` times these values.
    pub cluster_deltas: BalancingDeltas,
    pub lambda_cell: f64,
    pub lambda_cluster: f64,
    pub t_env_k: f64,
    pub recluster_period: usize,
    pub k_max: usize,
    pub bound_floor: f64,
    /// Include converter resistance in the inverse-resistance split
    /// weights. Off matches the published weighting; on matches the power
    /// path physically.
    pub weight_includes_converter: bool,
    pub solver: SolverOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            population: PopulationSpec::Sampled(SampledPopulation::default()),
            seed: 42,
            dt_s: 1.0,
            horizon: 10,
            duration_s: 2400.0,
            scheme: SplitScheme::Optimal,
            cell_deltas: BalancingDeltas {
                soc: 0.005,
                temp_k: 0.5,
            },
            cluster_deltas: BalancingDeltas {
                soc: 0.005,
                temp_k: 0.5,
            },
            lambda_cell: 1e3,
            lambda_cluster: 1e3,
            t_env_k: 298.0,
            recluster_period: 1,
            k_max: 20,
            bound_floor: 0.2,
            weight_includes_converter: false,
            solver: SolverOptions::default(),
        }
    }
}

impl SimConfig {
    /// Number of simulation steps.
    pub fn steps(&self) -> usize {
        (self.duration_s / self.dt_s).round() as usize
    }

    /// Checks cross-field consistency. Callers that mutate a parsed config
    /// (command-line overrides) should re-validate before running.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Validation { msg });
        if self.population.is_empty() {
            return fail("cell count must be at least 1".into());
        }
        if self.horizon == 0 {
            return fail("horizon must be at least 1".into());
        }
        if !(self.dt_s > 0.0) {
            return fail(format!("dt_s must be positive, got {}", self.dt_s));
        }
        if !(self.duration_s > 0.0) {
            return fail(format!("duration_s must be positive, got {}", self.duration_s));
        }
        let steps = self.duration_s / self.dt_s;
        if (steps - steps.round()).abs() > 1e-9 {
            return fail(format!(
                "duration_s ({}) must be a whole number of dt_s ({}) steps",
                self.duration_s, self.dt_s
            ));
        }
        if self.recluster_period == 0 {
            return fail("recluster_period must be at least 1".into());
        }
        if self.k_max == 0 {
            return fail("k_max must be at least 1".into());
        }
        if !(self.bound_floor > 0.0 && self.bound_floor <= 1.0) {
            return fail(format!(
                "bound_floor must be in (0, 1], got {}",
                self.bound_floor
            ));
        }
        for (name, v) in [
            ("delta_soc_cell", self.cell_deltas.soc),
            ("delta_temp_cell_k", self.cell_deltas.temp_k),
            ("delta_soc_cluster", self.cluster_deltas.soc),
            ("delta_temp_cluster_k", self.cluster_deltas.temp_k),
            ("lambda_cell", self.lambda_cell),
            ("lambda_cluster", self.lambda_cluster),
        ] {
            if !(v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.solver.max_iter == 0 {
            return fail("solver max_iter must be at least 1".into());
        }
        for (name, v) in [
            ("tol_feas", self.solver.tol_feas),
            ("tol_gap", self.solver.tol_gap),
            ("static_reg", self.solver.static_reg),
        ] {
            if !(v > 0.0) {
                return fail(format!("solver {name} must be positive, got {v}"));
            }
        }
        if let PopulationSpec::Sampled(p) = &self.population {
            if !(p.capacity_c > 0.0) {
                return fail(format!("capacity_c must be positive, got {}", p.capacity_c));
            }
            let (r_lo, r_hi) = p.resistance_range_ohm;
            if !(r_lo > 0.0 && r_hi >= r_lo) {
                return fail(format!(
                    "resistance range must satisfy 0 < min <= max, got [{r_lo}, {r_hi}]"
                ));
            }
            if p.converter_resistance_ohm < 0.0 {
                return fail(format!(
                    "converter_r_ohm must be non-negative, got {}",
                    p.converter_resistance_ohm
                ));
            }
            for (name, v) in [
                ("mass_kg", p.mass_kg),
                ("specific_heat", p.specific_heat),
                ("area_m2", p.area_m2),
                ("h_conv", p.h_conv),
            ] {
                if !(v > 0.0) {
                    return fail(format!("{name} must be positive, got {v}"));
                }
            }
            let (i_lo, i_hi) = p.current_range_a;
            if !(i_lo <= 0.0 && i_hi >= 0.0 && i_lo < i_hi) {
                return fail(format!(
                    "current range must straddle zero with min < max, got [{i_lo}, {i_hi}]"
                ));
            }
            let (q_lo, q_hi) = p.q_range;
            if !(0.0 <= q_lo && q_lo < q_hi && q_hi <= 1.0) {
                return fail(format!(
                    "SoC window must satisfy 0 <= min < max <= 1, got [{q_lo}, {q_hi}]"
                ));
            }
            let (s_lo, s_hi) = p.soc_init_range;
            if !(q_lo <= s_lo && s_lo <= s_hi && s_hi <= q_hi) {
                return fail(format!(
                    "initial SoC range [{s_lo}, {s_hi}] must sit inside the SoC window [{q_lo}, {q_hi}]"
                ));
            }
            let (t_lo, t_hi) = p.temp_range_k;
            if !(t_lo < t_hi) {
                return fail(format!(
                    "temperature limits must satisfy min < max, got [{t_lo}, {t_hi}]"
                ));
            }
            let (ti_lo, ti_hi) = p.temp_init_range_k;
            if !(t_lo <= ti_lo && ti_lo <= ti_hi && ti_hi <= t_hi) {
                return fail(format!(
                    "initial temperature range [{ti_lo}, {ti_hi}] must sit inside the limits [{t_lo}, {t_hi}]"
                ));
            }
            if !(t_lo <= self.t_env_k && self.t_env_k <= t_hi) {
                return fail(format!(
                    "t_env_k ({}) must sit inside the temperature limits [{t_lo}, {t_hi}]",
                    self.t_env_k
                ));
            }
        }
        Ok(())
    }
}

struct Entry {
    key: String,
    value: String,
    line: usize,
    taken: bool,
}

struct Entries(Vec<Entry>);

impl Entries {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        let e = self.0.iter_mut().find(|e| e.key == key)?;
        e.taken = true;
        Some((e.value.clone(), e.line))
    }

    fn leftovers(&self) -> Vec<(String, usize)> {
        self.0
            .iter()
            .filter(|e| !e.taken)
            .map(|e| (e.key.clone(), e.line))
            .collect()
    }
}

fn parse_entries(text: &str) -> Result<Entries, ConfigError> {
    const SECTIONS: [&str; 4] = ["cells", "bounds", "solver", "simulation"];
    let mut entries: Vec<Entry> = Vec::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("unterminated section header {content:?}"),
            })?;
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(ConfigError::UnknownSection {
                    line,
                    name: name.to_string(),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            msg: format!("expected `key = value`, got {content:?}"),
        })?;
        let key = key.trim();
        let value = value.trim().to_string();
        let qualified = match &section {
            Some(s) => format!("{s}.{key}"),
            // schema_version is the one key allowed before any section.
            None if key == "schema_version" => key.to_string(),
            None => {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("key {key:?} appears before any section header"),
                })
            }
        };
        if let Some(first) = entries.iter().find(|e| e.key == qualified) {
            let _ = first;
            return Err(ConfigError::Duplicate {
                line,
                key: qualified,
            });
        }
        entries.push(Entry {
            key: qualified,
            value,
            line,
            taken: false,
        });
    }
    Ok(Entries(entries))
}

fn parse_value<T: std::str::FromStr>(
    key: &str,
    value: &str,
    line: usize,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Type {
        line,
        key: key.to_string(),
        expected,
        got: value.to_string(),
    })
}

macro_rules! set {
    ($entries:expr, $key:expr, $target:expr, $expected:expr) => {
        if let Some((value, line)) = $entries.take($key) {
            $target = parse_value($key, &value, line, $expected)?;
        }
    };
}

fn parse_breakpoints(key: &str, value: &str, line: usize) -> Result<OcvCurve, ConfigError> {
    let type_err = || ConfigError::Type {
        line,
        key: key.to_string(),
        expected: "whitespace-separated q:volts pairs",
        got: value.to_string(),
    };
    let mut points = Vec::new();
    for pair in value.split_whitespace() {
        let (q, u) = pair.split_once(':').ok_or_else(type_err)?;
        let q: f64 = q.parse().map_err(|_| type_err())?;
        let u: f64 = u.parse().map_err(|_| type_err())?;
        points.push((q, u));
    }
    OcvCurve::from_breakpoints(&points).map_err(|e| ConfigError::Validation {
        msg: format!("{key} (line {line}): {e}"),
    })
}

/// Parses config text into a validated [`SimConfig`].
pub fn parse_config_text(text: &str) -> Result<SimConfig, ConfigError> {
    let mut entries = parse_entries(text)?;
    if let Some((value, line)) = entries.take("schema_version") {
        let got: u64 = parse_value("schema_version", &value, line, "integer")?;
        if got != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion { line, got });
        }
    }

    let mut cfg = SimConfig::default();
    let mut pop = SampledPopulation::default();

    set!(entries, "cells.n", pop.n, "integer");
    set!(entries, "cells.capacity_c", pop.capacity_c, "number");
    set!(entries, "cells.r_min_ohm", pop.resistance_range_ohm.0, "number");
    set!(entries, "cells.r_max_ohm", pop.resistance_range_ohm.1, "number");
    set!(entries, "cells.converter_r_ohm", pop.converter_resistance_ohm, "number");
    set!(entries, "cells.mass_kg", pop.mass_kg, "number");
    set!(entries, "cells.specific_heat", pop.specific_heat, "number");
    set!(entries, "cells.area_m2", pop.area_m2, "number");
    set!(entries, "cells.h_conv", pop.h_conv, "number");
    set!(entries, "cells.i_min_a", pop.current_range_a.0, "number");
    set!(entries, "cells.i_max_a", pop.current_range_a.1, "number");
    set!(entries, "cells.q_min", pop.q_range.0, "number");
    set!(entries, "cells.q_max", pop.q_range.1, "number");
    set!(entries, "cells.temp_min_k", pop.temp_range_k.0, "number");
    set!(entries, "cells.temp_max_k", pop.temp_range_k.1, "number");
    set!(entries, "cells.soc_init_min", pop.soc_init_range.0, "number");
    set!(entries, "cells.soc_init_max", pop.soc_init_range.1, "number");
    set!(entries, "cells.temp_init_min_k", pop.temp_init_range_k.0, "number");
    set!(entries, "cells.temp_init_max_k", pop.temp_init_range_k.1, "number");
    if let Some((value, line)) = entries.take("cells.ocv_breakpoints") {
        pop.ocv = parse_breakpoints("cells.ocv_breakpoints", &value, line)?;
    }

    set!(entries, "bounds.delta_soc_cell", cfg.cell_deltas.soc, "number");
    set!(entries, "bounds.delta_temp_cell_k", cfg.cell_deltas.temp_k, "number");
    set!(entries, "bounds.delta_soc_cluster", cfg.cluster_deltas.soc, "number");
    set!(entries, "bounds.delta_temp_cluster_k", cfg.cluster_deltas.temp_k, "number");
    set!(entries, "bounds.lambda_cell", cfg.lambda_cell, "number");
    set!(entries, "bounds.lambda_cluster", cfg.lambda_cluster, "number");
    set!(entries, "bounds.bound_floor", cfg.bound_floor, "number");

    set!(entries, "solver.max_iter", cfg.solver.max_iter, "integer");
    set!(entries, "solver.tol_feas", cfg.solver.tol_feas, "number");
    set!(entries, "solver.tol_gap", cfg.solver.tol_gap, "number");
    set!(entries, "solver.static_reg", cfg.solver.static_reg, "number");
    set!(entries, "solver.refine_rounds", cfg.solver.refine_rounds, "integer");

    set!(entries, "simulation.seed", cfg.seed, "integer");
    set!(entries, "simulation.dt_s", cfg.dt_s, "number");
    set!(entries, "simulation.horizon", cfg.horizon, "integer");
    set!(entries, "simulation.duration_s", cfg.duration_s, "number");
    set!(entries, "simulation.scheme", cfg.scheme, "one of equal | resistance | optimal");
    set!(entries, "simulation.t_env_k", cfg.t_env_k, "number");
    set!(entries, "simulation.recluster_period", cfg.recluster_period, "integer");
    set!(entries, "simulation.k_max", cfg.k_max, "integer");
    set!(
        entries,
        "simulation.weight_includes_converter",
        cfg.weight_includes_converter,
        "true or false"
    );

    let leftovers = entries.leftovers();
    if !leftovers.is_empty() {
        return Err(ConfigError::UnknownKeys { keys: leftovers });
    }

    cfg.population = PopulationSpec::Sampled(pop);
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file.
pub fn parse_config(path: &Path) -> Result<SimConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_the_builtin_defaults() {
        let cfg = parse_config_text("").unwrap();
        assert_eq!(cfg.dt_s, 1.0);
        assert_eq!(cfg.horizon, 10);
        assert_eq!(cfg.duration_s, 2400.0);
        assert_eq!(cfg.t_env_k, 298.0);
        assert_eq!(cfg.scheme, SplitScheme::Optimal);
        assert_eq!(cfg.cluster_deltas.soc, 0.005);
        assert_eq!(cfg.cluster_deltas.temp_k, 0.5);
        match &cfg.population {
            PopulationSpec::Sampled(p) => {
                assert_eq!(p.n, 400);
                // 2.5 Ah in coulombs.
                assert_eq!(p.capacity_c, 9000.0);
                assert_eq!(p.resistance_range_ohm, (0.0313, 0.0413));
                assert_eq!(p.converter_resistance_ohm, 0.010);
            }
            _ => panic!("defaults sample a population"),
        }
    }

    #[test]
    fn overrides_apply_and_comments_are_ignored() {
        let cfg = parse_config_text(
            "schema_version = 1\n\
             [simulation]\n\
             horizon = 4  # shorter preview\n\
             scheme = resistance\n\
             seed = 7\n\
             [cells]\n\
             n = 10\n\
             r_min_ohm = 0.03\n\
             r_max_ohm = 0.03\n",
        )
        .unwrap();
        assert_eq!(cfg.horizon, 4);
        assert_eq!(cfg.scheme, SplitScheme::Resistance);
        assert_eq!(cfg.seed, 7);
        match &cfg.population {
            PopulationSpec::Sampled(p) => {
                assert_eq!(p.n, 10);
                assert_eq!(p.resistance_range_ohm, (0.03, 0.03));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn zero_horizon_fails_validation() {
        let err = parse_config_text("[simulation]\nhorizon = 0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Validation { .. }), "{err}");
        assert!(err.to_string().contains("horizon"));
    }

    #[test]
    fn duplicate_key_is_named() {
        let err = parse_config_text("[simulation]\nseed = 1\nseed = 2\n").unwrap_err();
        match err {
            ConfigError::Duplicate { line, key } => {
                assert_eq!(line, 3);
                assert_eq!(key, "simulation.seed");
            }
            other => panic!("expected duplicate error, got {other}"),
        }
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = parse_config_text(
            "[cells]\nfoo = 1\n[simulation]\nseed = 3\nbar = 2\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cells.foo (line 2)"), "{msg}");
        assert!(msg.contains("simulation.bar (line 5)"), "{msg}");
    }

    #[test]
    fn type_mismatch_is_line_anchored() {
        let err = parse_config_text("[simulation]\nseed = soon\n").unwrap_err();
        match err {
            ConfigError::Type { line, ref key, .. } => {
                assert_eq!(line, 2);
                assert_eq!(key, "simulation.seed");
            }
            ref other => panic!("expected type error, got {other}"),
        }
    }

    #[test]
    fn structural_errors_are_rejected() {
        assert!(matches!(
            parse_config_text("[gearbox]\n").unwrap_err(),
            ConfigError::UnknownSection { line: 1, .. }
        ));
        assert!(matches!(
            parse_config_text("seed = 1\n").unwrap_err(),
            ConfigError::Syntax { line: 1, .. }
        ));
        assert!(matches!(
            parse_config_text("[simulation]\nseed\n").unwrap_err(),
            ConfigError::Syntax { line: 2, .. }
        ));
        assert!(matches!(
            parse_config_text("schema_version = 9\n").unwrap_err(),
            ConfigError::SchemaVersion { line: 1, got: 9 }
        ));
    }

    #[test]
    fn ocv_breakpoints_override_parses() {
        let cfg = parse_config_text(
            "[cells]\nocv_breakpoints = 0:3.1 0.5:3.7 1:4.1\n",
        )
        .unwrap();
        match &cfg.population {
            PopulationSpec::Sampled(p) => {
                assert_eq!(p.ocv.voltage(0.0).unwrap(), 3.1);
                assert_eq!(p.ocv.voltage(1.0).unwrap(), 4.1);
            }
            _ => unreachable!(),
        }
        assert!(matches!(
            parse_config_text("[cells]\nocv_breakpoints = 0:3.1 1\n").unwrap_err(),
            ConfigError::Type { line: 2, .. }
        ));
        // Structurally fine pairs that violate curve monotonicity.
        assert!(matches!(
            parse_config_text("[cells]\nocv_breakpoints = 0:4.0 1:3.0\n").unwrap_err(),
            ConfigError::Validation { .. }
        ));
    }

    #[test]
    fn duration_must_divide_into_steps() {
        let err = parse_config_text("[simulation]\ndt_s = 7\nduration_s = 10\n").unwrap_err();
        assert!(matches!(err, ConfigError::Validation { .. }), "{err}");
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let pop = SampledPopulation {
            n: 50,
            ..SampledPopulation::default()
        };
        let (pa, sa) = pop.sample(9);
        let (pb, sb) = pop.sample(9);
        assert_eq!(pa.len(), 50);
        assert!(pa
            .iter()
            .zip(&pb)
            .all(|(a, b)| a.resistance_ohm == b.resistance_ohm));
        assert!(sa.iter().zip(&sb).all(|(a, b)| a.q == b.q && a.temp_k == b.temp_k));
        for (p, s) in pa.iter().zip(&sa) {
            assert!(p.resistance_ohm >= 0.0313 && p.resistance_ohm < 0.0413);
            assert!(s.q >= 0.70 && s.q < 0.75);
            assert!(s.temp_k >= 301.0 && s.temp_k < 305.0);
        }
        let (pc, _) = pop.sample(10);
        assert!(pa
            .iter()
            .zip(&pc)
            .any(|(a, c)| a.resistance_ohm != c.resistance_ohm));
    }
}
