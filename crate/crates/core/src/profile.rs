//! Demand profiles: loading, synthesis and resampling.
//!
//! A profile is a power demand sampled on a uniform time grid, positive
//! when the pack discharges. Files carry an explicit time column so a
//! profile recorded at a different rate than the simulation step can be
//! detected and resampled by linear interpolation; anything non-uniform or
//! non-monotone is rejected rather than silently reinterpreted.
//!
//! The synthesizer produces a drive-cycle-shaped series from repeated
//! accelerate / cruise / brake / idle segments, then scales it affinely so
//! the extremes hit the requested charge and discharge peaks exactly. One
//! fixed synthesized profile is bundled into the crate as the reference
//! demand for regression runs.

use std::fmt;
use std::io::{self, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::rng::{self, DOMAIN_PROFILE};

/// Tolerance for calling two grid spacings the same.
const SPACING_TOL: f64 = 1e-9;

/// Profile CSV schema revision written and accepted by this build.
pub const PROFILE_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: expected header \"t,p_out\", got {got:?}")]
    BadHeader { line: usize, got: String },
    #[error("line {line}: expected two numeric columns, got {got:?}")]
    BadRow { line: usize, got: String },
    #[error("line {line}: time goes backwards")]
    NonMonotone { line: usize },
    #[error("line {line}: spacing {got} differs from the file's {expected}")]
    NonUniform {
        line: usize,
        got: f64,
        expected: f64,
    },
    #[error("profile needs at least one sample")]
    Empty,
    #[error("line {line}: schema_version {got} not supported (this build reads {PROFILE_SCHEMA_VERSION})")]
    SchemaVersion { line: usize, got: String },
}

/// Uniformly sampled power demand, discharge positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    start_s: f64,
    dt_s: f64,
    power_w: Vec<f64>,
}

impl LoadProfile {
    pub fn from_samples(start_s: f64, dt_s: f64, power_w: Vec<f64>) -> Self {
        assert!(dt_s > 0.0, "profile step must be positive");
        assert!(!power_w.is_empty(), "profile needs at least one sample");
        Self {
            start_s,
            dt_s,
            power_w,
        }
    }

    pub fn len(&self) -> usize {
        self.power_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.power_w.is_empty()
    }

    pub fn dt_s(&self) -> f64 {
        self.dt_s
    }

    pub fn start_s(&self) -> f64 {
        self.start_s
    }

    pub fn power_w(&self) -> &[f64] {
        &self.power_w
    }

    pub fn time_at(&self, i: usize) -> f64 {
        self.start_s + i as f64 * self.dt_s
    }

    /// Demand over simulation step `step`, held at the last sample once
    /// the profile runs out.
    pub fn demand_at(&self, step: usize) -> f64 {
        let i = step.min(self.power_w.len() - 1);
        self.power_w[i]
    }

    /// Demand forecast for steps `step..step + h`, held constant past the
    /// end of the profile.
    pub fn forecast(&self, step: usize, h: usize) -> Vec<f64> {
        (step..step + h).map(|t| self.demand_at(t)).collect()
    }

    /// Linear interpolation onto a grid with step `dt_s`, endpoints
    /// preserved. Returns `self` unchanged when the spacing already
    /// matches.
    pub fn resample(&self, dt_s: f64) -> LoadProfile {
        assert!(dt_s > 0.0, "profile step must be positive");
        if (self.dt_s - dt_s).abs() <= SPACING_TOL || self.power_w.len() == 1 {
            let mut out = self.clone();
            out.dt_s = dt_s;
            return out;
        }
        let span = (self.power_w.len() - 1) as f64 * self.dt_s;
        let n_out = (span / dt_s + SPACING_TOL).floor() as usize + 1;
        let power_w = (0..n_out)
            .map(|i| {
                let t = i as f64 * dt_s;
                let pos = t / self.dt_s;
                let lo = (pos.floor() as usize).min(self.power_w.len() - 1);
                if lo + 1 == self.power_w.len() {
                    return self.power_w[lo];
                }
                let frac = pos - lo as f64;
                self.power_w[lo] * (1.0 - frac) + self.power_w[lo + 1] * frac
            })
            .collect();
        LoadProfile {
            start_s: self.start_s,
            dt_s,
            power_w,
        }
    }
}

fn check_schema_comment(raw: &str, line: usize) -> Result<(), ProfileError> {
    let body = raw.trim_start().trim_start_matches('#').trim();
    if let Some(version) = body.strip_prefix("schema_version") {
        let got = version.trim_start_matches(['=', ' ']).trim();
        if got.parse::<u64>() != Ok(PROFILE_SCHEMA_VERSION) {
            return Err(ProfileError::SchemaVersion {
                line,
                got: got.to_string(),
            });
        }
    }
    Ok(())
}

/// Parses the `t,p_out` CSV text and resamples it to `dt_s`. Comment lines
/// starting with `#` are skipped; a `# schema_version=N` comment is
/// checked against the supported revision.
pub fn parse_profile_csv(text: &str, dt_s: f64) -> Result<LoadProfile, ProfileError> {
    let mut lines = text.lines().enumerate();
    let (header_line, header) = loop {
        match lines.next() {
            Some((i, l)) if l.trim().is_empty() => {
                let _ = i;
                continue;
            }
            Some((i, l)) if l.trim_start().starts_with('#') => {
                check_schema_comment(l, i + 1)?;
                continue;
            }
            Some((i, l)) => break (i + 1, l),
            None => return Err(ProfileError::Empty),
        }
    };
    let mut cols = header.split(',').map(str::trim);
    if cols.next() != Some("t") || cols.next() != Some("p_out") || cols.next().is_some() {
        return Err(ProfileError::BadHeader {
            line: header_line,
            got: header.to_string(),
        });
    }

    let mut times = Vec::new();
    let mut power = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut cols = trimmed.split(',').map(str::trim);
        let (t, p) = match (cols.next(), cols.next(), cols.next()) {
            (Some(t), Some(p), None) => (t, p),
            _ => {
                return Err(ProfileError::BadRow {
                    line,
                    got: raw.to_string(),
                })
            }
        };
        let t: f64 = t.parse().map_err(|_| ProfileError::BadRow {
            line,
            got: raw.to_string(),
        })?;
        let p: f64 = p.parse().map_err(|_| ProfileError::BadRow {
            line,
            got: raw.to_string(),
        })?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(ProfileError::NonMonotone { line });
            }
            let spacing = times[1..]
                .first()
                .map(|&second: &f64| second - times[0])
                .unwrap_or(t - prev);
            let got = t - prev;
            if (got - spacing).abs() > SPACING_TOL {
                return Err(ProfileError::NonUniform {
                    line,
                    got,
                    expected: spacing,
                });
            }
        }
        times.push(t);
        power.push(p);
    }
    if power.is_empty() {
        return Err(ProfileError::Empty);
    }
    let file_dt = if times.len() >= 2 {
        times[1] - times[0]
    } else {
        dt_s
    };
    Ok(LoadProfile::from_samples(times[0], file_dt, power).resample(dt_s))
}

/// Loads a profile CSV from disk, resampled to `dt_s`.
pub fn load_profile_csv(path: &Path, dt_s: f64) -> Result<LoadProfile, ProfileError> {
    let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_profile_csv(&text, dt_s)
}

/// Writes a profile in the `t,p_out` schema with full-precision floats.
pub fn write_profile_csv(profile: &LoadProfile, mut w: impl Write) -> io::Result<()> {
    writeln!(w, "# schema_version={PROFILE_SCHEMA_VERSION}")?;
    writeln!(w, "t,p_out")?;
    for (i, &p) in profile.power_w().iter().enumerate() {
        writeln!(w, "{:.16e},{:.16e}", profile.time_at(i), p)?;
    }
    Ok(())
}

impl fmt::Display for LoadProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} samples at {} s from t={} s",
            self.len(),
            self.dt_s,
            self.start_s
        )
    }
}

/// Synthesizes a drive-cycle-shaped demand of `duration_s` seconds whose
/// minimum is exactly `-peak_charge_w` and maximum exactly
/// `peak_discharge_w`.
pub fn synth_udds_like(
    duration_s: f64,
    peak_charge_w: f64,
    peak_discharge_w: f64,
    dt_s: f64,
    seed: u64,
) -> LoadProfile {
    assert!(peak_charge_w > 0.0 && peak_discharge_w > 0.0, "peaks must be positive");
    assert!(dt_s > 0.0 && duration_s >= dt_s, "need at least one step");
    let n = (duration_s / dt_s).round() as usize;
    let mut r = rng::stream(seed, DOMAIN_PROFILE, &[]);

    // Raw shape in arbitrary units: cruise power is positive (road load),
    // acceleration ramps above it, braking dips below zero (regeneration),
    // idle hovers near zero. Smoothing with a short exponential filter
    // keeps step-to-step changes plausible for a vehicle.
    let mut raw = Vec::with_capacity(n);
    let mut level: f64 = 0.0;
    while raw.len() < n {
        let phase = r.gen_range(0..4u32);
        let (target, hold): (f64, usize) = match phase {
            0 => (r.gen_range(0.6..1.0), r.gen_range(8..30)),   // accelerate
            1 => (r.gen_range(0.2..0.5), r.gen_range(15..60)),  // cruise
            2 => (r.gen_range(-1.0..-0.4), r.gen_range(5..18)), // brake
            _ => (r.gen_range(-0.05..0.05), r.gen_range(5..25)), // idle
        };
        for _ in 0..hold {
            if raw.len() == n {
                break;
            }
            level += 0.25 * (target - level) + r.gen_range(-0.02..0.02);
            raw.push(level);
        }
    }

    let (mut lo, mut hi) = (0usize, 0usize);
    for (i, &v) in raw.iter().enumerate() {
        if v < raw[lo] {
            lo = i;
        }
        if v > raw[hi] {
            hi = i;
        }
    }
    assert!(raw[hi] > raw[lo], "synthesized shape must not be flat");
    let scale = (peak_discharge_w + peak_charge_w) / (raw[hi] - raw[lo]);
    let offset = peak_discharge_w - scale * raw[hi];
    let mut power: Vec<f64> = raw.into_iter().map(|v| scale * v + offset).collect();
    // Pin the extremes so the contract holds to the last bit.
    power[lo] = -peak_charge_w;
    power[hi] = peak_discharge_w;
    LoadProfile::from_samples(0.0, dt_s, power)
}

/// The bundled reference demand: 2,400 s at 1 s, 6 kW peak charge, 10 kW
/// peak discharge, fixed seed. Regression runs compare against this exact
/// series.
pub fn reference_profile() -> LoadProfile {
    parse_profile_csv(include_str!("../data/reference_profile.csv"), 1.0)
        .expect("bundled profile parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn parses_a_small_file() {
        let p = parse_profile_csv("t,p_out\n0,100\n1,200\n2,150\n", 1.0).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.power_w(), &[100.0, 200.0, 150.0]);
        assert_eq!(p.time_at(2), 2.0);
    }

    #[test]
    fn resampling_interpolates_and_preserves_endpoints() {
        let p = parse_profile_csv("t,p_out\n0,0\n10,100\n20,50\n", 1.0).unwrap();
        assert_eq!(p.len(), 21);
        assert_eq!(p.power_w()[0], 0.0);
        assert_abs_diff_eq!(p.power_w()[5], 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.power_w()[15], 75.0, epsilon = 1e-12);
        assert_eq!(p.power_w()[20], 50.0);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(
            parse_profile_csv("time,power\n0,1\n", 1.0),
            Err(ProfileError::BadHeader { line: 1, .. })
        ));
        assert!(matches!(
            parse_profile_csv("t,p_out\n0,1\n2,x\n", 1.0),
            Err(ProfileError::BadRow { line: 3, .. })
        ));
        assert!(matches!(
            parse_profile_csv("t,p_out\n5,1\n3,2\n", 1.0),
            Err(ProfileError::NonMonotone { line: 3 })
        ));
        assert!(matches!(
            parse_profile_csv("t,p_out\n0,1\n1,2\n3,3\n", 1.0),
            Err(ProfileError::NonUniform { line: 4, .. })
        ));
        assert!(matches!(
            parse_profile_csv("t,p_out\n", 1.0),
            Err(ProfileError::Empty)
        ));
        assert!(matches!(
            parse_profile_csv("# schema_version=3\nt,p_out\n0,1\n", 1.0),
            Err(ProfileError::SchemaVersion { line: 1, .. })
        ));
    }

    #[test]
    fn forecast_holds_the_last_sample() {
        let p = LoadProfile::from_samples(0.0, 1.0, vec![1.0, 2.0, 3.0]);
        assert_eq!(p.forecast(1, 4), vec![2.0, 3.0, 3.0, 3.0]);
        assert_eq!(p.demand_at(99), 3.0);
    }

    #[test]
    fn synthesis_hits_the_peaks_exactly_and_repeats() {
        let a = synth_udds_like(600.0, 6e3, 10e3, 1.0, 42);
        assert_eq!(a.len(), 600);
        let min = a.power_w().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = a
            .power_w()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, -6e3);
        assert_eq!(max, 10e3);

        let b = synth_udds_like(600.0, 6e3, 10e3, 1.0, 42);
        assert_eq!(a, b);
        let c = synth_udds_like(600.0, 6e3, 10e3, 1.0, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn profile_csv_round_trips_bitwise() {
        let a = synth_udds_like(120.0, 6e3, 10e3, 1.0, 7);
        let mut buf = Vec::new();
        write_profile_csv(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let b = parse_profile_csv(&text, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bundled_reference_has_the_contract_shape() {
        let p = reference_profile();
        assert_eq!(p.len(), 2400);
        assert_eq!(p.dt_s(), 1.0);
        let min = p.power_w().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = p
            .power_w()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, -6e3);
        assert_eq!(max, 10e3);
    }
}
