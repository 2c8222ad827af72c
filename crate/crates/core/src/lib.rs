//! Cooperative localization of wireless sensors from single-bounce multipath
//! measurements.
//!
//! Each link between two sensors carries a few line-of-sight or
//! single-bounce paths, each observed as a total path length plus the bearing
//! at both ends. Every path pins the position difference of the two sensors
//! to a line; two or more paths pin it to a point. Sensors fuse these
//! relative constraints with Gaussian belief propagation so that the whole
//! network localizes against a single anchor.
//!
//! Modules:
//! - [`geometry`]: steering vectors, path classification and edge constraints.
//! - [`bp`]: closed-form Gaussian messages, fusion and the synchronous driver.
//! - [`sim`]: mirror-reflection scenario generator, noise and pairwise baseline.
//! - [`oracle`]: joint least-squares and grid-search reference solvers.
//! - [`transport`]: frame codec and agents over channels or UDP.
//! - [`config`]: JSON scenario files.
//! - [`experiments`]: Monte-Carlo runs, CDFs, tables and CSV output.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bp;
pub mod config;
pub mod experiments;
pub mod geometry;
pub mod network;
pub mod oracle;
pub mod sim;
pub mod transport;

pub use bp::{run_sync_rounds, BeliefMessage, BpConfig, BpError, BpRun, GaussianBelief};
pub use config::ScenarioConfig;
pub use geometry::{build_edge_constraint, EdgeConstraint, GeometryTolerances, PathClass, PathMeasurement, Position};
pub use network::{NetworkConstraints, NodeId};
pub use oracle::{joint_ls_solve, JointSolution};
pub use sim::{build_scenario, pairwise_baseline, NetworkScenario, NoiseModel, ScatterFamily, ScenarioSpec};
