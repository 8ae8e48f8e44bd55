//! Scalable power management for large battery packs.
//!
//! A pack of heterogeneous cells, each behind its own DC/DC converter, has to
//! track a power demand profile while keeping state of charge and temperature
//! balanced and resistive losses low. Optimizing every cell individually does
//! not scale, so this crate implements a cluster-then-optimize pipeline:
//!
//! 1. [`cluster`] groups cells by (SoC, temperature, resistance) with k-means,
//!    picking the cluster count online.
//! 2. [`aggregate`] collapses each cluster into a single equivalent model.
//! 3. [`horizon`] builds a convex receding-horizon program over the cluster
//!    models (losses as rotated-cone epigraphs), solved by the interior-point
//!    method in [`conic`].
//! 4. [`split`] maps each cluster's optimal power back to member cells, either
//!    by a closed-form rule or by a small per-cluster convex program.
//! 5. [`sim`] closes the loop against the cell-level plant truth and logs
//!    metrics; [`profile`], [`config`] and [`trace`] cover file I/O.
//!
//! All randomness is seeded and every parallel reduction runs in a fixed
//! order, so a given configuration reproduces its trace bit for bit. The
//! `parallel` feature (on by default) enables rayon data parallelism across
//! clusters and cells; without it the same code paths run sequentially.

pub mod aggregate;
pub mod cell;
pub mod cluster;
pub mod conic;
pub mod config;
pub mod horizon;
pub mod par;
pub mod profile;
pub mod rng;
pub mod sim;
pub mod split;
pub mod trace;

pub use cell::{CellParams, CellState, OcvCurve};
pub use config::{parse_config, ConfigError, PopulationSpec, SampledPopulation, SimConfig};
pub use profile::{load_profile_csv, write_profile_csv, LoadProfile, ProfileError};
pub use sim::{baseline_cell_level, baseline_uniform, run, run_with_snapshots};
pub use split::SplitScheme;
pub use trace::{save_report, save_trace_csv, RunReport, SimTrace};
