//! Stochastic proximal point method with arbitrary client sampling (SPPM-AS)
//! for cross-device federated learning.
//!
//! The crate is a deterministic single-process simulator. It covers:
//!
//! * [`data`]: LibSVM parsing, synthetic instances and K-means non-IID client splits.
//! * [`objectives`]: client losses (regularized logistic, quadratic) and
//!   cohort-reweighted composites `f_C = sum_{i in C} f_i / (n p_i)`.
//! * [`sampling`]: client sampling distributions, exact and closed-form
//!   `mu_AS` / `sigma^2_AS` constants, stratified-clustering search.
//! * [`prox`]: exact and inexact proximal solvers (GD, nonlinear CG, BFGS)
//!   with certified inexactness and local-round accounting.
//! * [`algorithms`]: SPPM-AS, FedProx-SPPM-AS, FedAvg-SPPM-AS and the
//!   LocalGD / MB-GD / MB-LocalGD baselines.
//! * [`theory`]: executable convergence bounds and the exact minimizer.
//! * [`cost`]: flat and hierarchical communication cost, `(gamma, K)` sweeps.
//! * [`experiments`]: JSON configs, reproducible artifacts and the `verify` suite.

pub mod algorithms;
pub mod cost;
pub mod data;
pub mod experiments;
pub mod objectives;
pub mod prox;
pub mod rng;
pub mod sampling;
pub mod theory;

mod error;

pub use error::{Error, Result};

/// Dense real vector used for iterates, gradients and centroids.
pub type Vector = nalgebra::DVector<f64>;
/// Dense real matrix.
pub type Matrix = nalgebra::DMatrix<f64>;

pub use algorithms::{AlgorithmKind, RunConfig, StopReport, TrajectoryRecord, TrajectoryRow};
pub use cost::{CostParams, SweepResult};
pub use data::{ClientShard, ClusterAssignment, DataPoint, FederatedDataset, QuadraticSpec};
pub use objectives::{
    ClientObjective, CohortObjective, Federation, LogisticObjective, QuadraticObjective,
};
pub use prox::{ProxProblem, ProxResult, SolverKind, SolverSpec, StopRule};
pub use sampling::{Cohort, SamplingConstants, SamplingDistribution, SamplingScheme};
pub use theory::{FedProxConstants, IterationPlan, StepsizeChoice};
