//! Shared fixtures for the criterion benches.

use sppm_core::data::{partition_noniid, synthetic_classification, synthetic_quadratic, SyntheticClassification};
use sppm_core::theory::{solve_xstar, XSTAR_TOL};
use sppm_core::{Federation, Vector};

/// Quadratic federation with its minimizer.
pub fn quadratic_fixture(n: usize, d: usize) -> (Federation, Vector) {
    let fed = Federation::from_quadratics(&synthetic_quadratic(n, d, 1, 1.0)).expect("valid quadratics");
    let (x, _) = solve_xstar(&fed, XSTAR_TOL).expect("minimizer");
    (fed, x)
}

/// Logistic federation on a clustered synthetic split (`q` clusters of `m` clients).
pub fn logistic_fixture(points: usize, dim: usize, q: usize, m: usize) -> (Federation, Vector) {
    let data = synthetic_classification(&SyntheticClassification {
        points,
        dim,
        groups: q,
        ..Default::default()
    });
    let (ds, _) = partition_noniid(&data, q, m, 0).expect("enough points");
    let fed = Federation::logistic(&ds, 1e-2).expect("valid shards");
    let (x, _) = solve_xstar(&fed, XSTAR_TOL).expect("minimizer");
    (fed, x)
}
