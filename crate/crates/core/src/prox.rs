//! Proximal-point subproblem solvers.
//!
//! Each solver minimizes `phi(z) = f_C(z) + ||z - x||^2 / (2 gamma)` starting
//! from `z_0 = x`. One outer iteration is one local communication round; the
//! function evaluations of a line search belong to the round that runs it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::{exact_prox_quadratic, ClientObjective, ObjectiveError};
use crate::{Matrix, Vector};

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;
/// Upper bound on rounds for residual-targeted solves.
pub const DEFAULT_MAX_ROUNDS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("line search stalled at iteration {iteration} (|grad phi| = {grad_norm:.3e})")]
    LineSearchStall { iteration: usize, grad_norm: f64 },
    #[error("residual {residual:.3e} still above target after {rounds} rounds")]
    MaxRounds { rounds: usize, residual: f64 },
    #[error("non-finite iterate at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

impl SolverError {
    /// Everything but a malformed spec is a numerical failure.
    pub fn is_numeric(&self) -> bool {
        !matches!(self, SolverError::InvalidSpec(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverKind {
    /// Fixed-step gradient descent; `None` means `1 / (L_C + 1/gamma)`.
    Gd { alpha: Option<f64> },
    /// Polak-Ribiere+ nonlinear conjugate gradient.
    Ncg,
    /// Full-memory BFGS.
    Bfgs,
    /// Closed form (quadratics only).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Exactly `K` outer iterations.
    Rounds(usize),
    /// Until `|grad phi| <= eps`, at most `max_rounds` iterations.
    Residual { eps: f64, max_rounds: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SolverSpecRepr", into = "SolverSpecRepr")]
pub struct SolverSpec {
    pub kind: SolverKind,
    pub stop: StopRule,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SolverName {
    Gd,
    Ncg,
    Bfgs,
    Exact,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSpecRepr {
    solver: SolverName,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps_prox: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_rounds: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

impl TryFrom<SolverSpecRepr> for SolverSpec {
    type Error = SolverError;

    fn try_from(r: SolverSpecRepr) -> Result<Self, SolverError> {
        let kind = match r.solver {
            SolverName::Gd => SolverKind::Gd { alpha: r.alpha },
            SolverName::Ncg => SolverKind::Ncg,
            SolverName::Bfgs => SolverKind::Bfgs,
            SolverName::Exact => SolverKind::Exact,
        };
        if r.alpha.is_some() && !matches!(kind, SolverKind::Gd { .. }) {
            return Err(SolverError::InvalidSpec("alpha applies only to the gd solver".into()));
        }
        let stop = match (r.k, r.eps_prox) {
            (Some(k), None) => StopRule::Rounds(k),
            (None, Some(eps)) => StopRule::Residual {
                eps,
                max_rounds: r.max_rounds.unwrap_or(DEFAULT_MAX_ROUNDS),
            },
            (None, None) if kind == SolverKind::Exact => StopRule::Rounds(1),
            _ => {
                return Err(SolverError::InvalidSpec(
                    "set exactly one of K and eps_prox".into(),
                ))
            }
        };
        let spec = SolverSpec { kind, stop };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<SolverSpec> for SolverSpecRepr {
    fn from(s: SolverSpec) -> Self {
        let (solver, alpha) = match s.kind {
            SolverKind::Gd { alpha } => (SolverName::Gd, alpha),
            SolverKind::Ncg => (SolverName::Ncg, None),
            SolverKind::Bfgs => (SolverName::Bfgs, None),
            SolverKind::Exact => (SolverName::Exact, None),
        };
        let (k, eps_prox, max_rounds) = match s.stop {
            StopRule::Rounds(k) => (Some(k), None, None),
            StopRule::Residual { eps, max_rounds } => (None, Some(eps), Some(max_rounds)),
        };
        SolverSpecRepr {
            solver,
            k,
            eps_prox,
            max_rounds,
            alpha,
        }
    }
}

impl SolverSpec {
    pub fn exact() -> Self {
        Self {
            kind: SolverKind::Exact,
            stop: StopRule::Rounds(1),
        }
    }

    pub fn with_rounds(kind: SolverKind, k: usize) -> Self {
        Self {
            kind,
            stop: StopRule::Rounds(k),
        }
    }

    pub fn with_residual(kind: SolverKind, eps: f64) -> Self {
        Self {
            kind,
            stop: StopRule::Residual {
                eps,
                max_rounds: DEFAULT_MAX_ROUNDS,
            },
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if let SolverKind::Gd { alpha: Some(a) } = self.kind {
            if !(a > 0.0 && a.is_finite()) {
                return Err(SolverError::InvalidSpec(format!("alpha must be positive, got {a}")));
            }
        }
        match self.stop {
            StopRule::Rounds(0) => Err(SolverError::InvalidSpec("K must be at least 1".into())),
            StopRule::Residual { eps, max_rounds } if !(eps > 0.0) || max_rounds == 0 => Err(
                SolverError::InvalidSpec(format!("eps_prox must be positive, got {eps}")),
            ),
            _ => Ok(()),
        }
    }

    /// Fixed number of rounds, if the spec has one.
    pub fn rounds(&self) -> Option<usize> {
        match self.stop {
            StopRule::Rounds(k) => Some(k),
            StopRule::Residual { .. } => None,
        }
    }
}

/// `argmin_z f(z) + ||z - center||^2 / (2 gamma)`.
#[derive(Debug, Clone)]
pub struct ProxProblem<'a> {
    pub objective: &'a dyn ClientObjective,
    pub center: Vector,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxResult {
    pub z: Vector,
    pub rounds_used: usize,
    /// Certified bound on `||z - prox||^2`.
    pub inexactness_b: f64,
}

impl<'a> ProxProblem<'a> {
    pub fn new(objective: &'a dyn ClientObjective, center: Vector, gamma: f64) -> Result<Self, SolverError> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(SolverError::InvalidSpec(format!(
                "gamma must be positive and finite, got {gamma}"
            )));
        }
        if center.len() != objective.dim() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: objective.dim(),
                got: center.len(),
            }
            .into());
        }
        Ok(Self {
            objective,
            center,
            gamma,
        })
    }

    /// `phi(z)` and `grad phi(z)`.
    pub fn phi(&self, z: &Vector) -> (f64, Vector) {
        let (v, mut g) = self.objective.value_grad(z);
        let diff = z - &self.center;
        g.axpy(1.0 / self.gamma, &diff, 1.0);
        (v + diff.norm_squared() / (2.0 * self.gamma), g)
    }

    /// Strong-convexity constant of `phi`.
    pub fn modulus(&self) -> f64 {
        self.objective.strong_convexity() + 1.0 / self.gamma
    }

    /// Smoothness constant of `phi`.
    pub fn lipschitz(&self) -> f64 {
        self.objective.smoothness() + 1.0 / self.gamma
    }
}

/// `(|grad phi(z)| / (mu_C + 1/gamma))^2`, a bound on `||z - prox||^2`.
pub fn certify_inexactness(problem: &ProxProblem<'_>, z: &Vector) -> f64 {
    (problem.phi(z).1.norm() / problem.modulus()).powi(2)
}

struct LineSearch {
    z: Vector,
    value: f64,
    grad: Vector,
}

/// Backtracking Armijo search along `dir` from step 1, with a secant
/// refinement that makes the step exact on quadratics.
fn armijo(
    problem: &ProxProblem<'_>,
    z: &Vector,
    value: f64,
    grad: &Vector,
    dir: &Vector,
) -> Option<LineSearch> {
    let slope = grad.dot(dir);
    if !(slope < 0.0) {
        return None;
    }
    let mut t = 1.0;
    for _ in 0..=MAX_BACKTRACKS {
        let zt = z + dir * t;
        let (vt, gt) = problem.phi(&zt);
        let armijo_ok = |v: f64, step: f64| v.is_finite() && v <= value + ARMIJO_C * step * slope;
        let curvature = gt.dot(dir) - slope;
        if curvature > 0.0 {
            let ts = -t * slope / curvature;
            if ts.is_finite() && ts > 0.0 {
                let zs = z + dir * ts;
                let (vs, gs) = problem.phi(&zs);
                if armijo_ok(vs, ts) && (!armijo_ok(vt, t) || vs <= vt) {
                    return Some(LineSearch {
                        z: zs,
                        value: vs,
                        grad: gs,
                    });
                }
            }
        }
        if armijo_ok(vt, t) {
            return Some(LineSearch {
                z: zt,
                value: vt,
                grad: gt,
            });
        }
        t *= BACKTRACK;
    }
    None
}

/// Solve the prox subproblem.
pub fn solve_prox(problem: &ProxProblem<'_>, spec: &SolverSpec) -> Result<ProxResult, SolverError> {
    spec.validate()?;
    if spec.kind == SolverKind::Exact {
        let z = exact_prox_quadratic(problem.objective, &problem.center, problem.gamma).map_err(
            |e| match e {
                ObjectiveError::NotQuadratic => SolverError::Unsupported(
                    "the exact solver needs quadratic client objectives".into(),
                ),
                other => SolverError::Objective(other),
            },
        )?;
        let inexactness_b = certify_inexactness(problem, &z);
        return Ok(ProxResult {
            z,
            rounds_used: 1,
            inexactness_b,
        });
    }

    let (budget, eps) = match spec.stop {
        StopRule::Rounds(k) => (k, None),
        StopRule::Residual { eps, max_rounds } => (max_rounds, Some(eps)),
    };
    let d = problem.center.len();
    let lip = problem.lipschitz();
    let mut z = problem.center.clone();
    let (mut value, mut grad) = problem.phi(&z);
    let g0 = grad.norm();
    // Below this the iterate is at the solution to working precision.
    let floor = 1e-8 * (1.0 + g0);
    let tiny = 1e-15 * (1.0 + g0);

    let mut dir = -&grad;
    let mut h_inv = Matrix::identity(d, d) / lip;
    if spec.kind == SolverKind::Bfgs {
        dir = -(&h_inv * &grad);
    }
    let mut ncg_since_restart = 0usize;

    let mut rounds = 0usize;
    while rounds < budget {
        let gnorm = grad.norm();
        if let Some(eps) = eps {
            if gnorm <= eps {
                break;
            }
        }
        if gnorm <= tiny {
            break;
        }
        rounds += 1;
        match spec.kind {
            SolverKind::Gd { alpha } => {
                let step = alpha.unwrap_or(1.0 / lip);
                z.axpy(-step, &grad, 1.0);
                (value, grad) = problem.phi(&z);
            }
            SolverKind::Ncg | SolverKind::Bfgs => {
                if grad.dot(&dir) >= 0.0 {
                    // Not a descent direction: restart.
                    h_inv = Matrix::identity(d, d) / lip;
                    dir = if spec.kind == SolverKind::Bfgs {
                        -(&h_inv * &grad)
                    } else {
                        -&grad
                    };
                    ncg_since_restart = 0;
                }
                let Some(ls) = armijo(problem, &z, value, &grad, &dir) else {
                    if gnorm <= floor {
                        break;
                    }
                    return Err(SolverError::LineSearchStall {
                        iteration: rounds,
                        grad_norm: gnorm,
                    });
                };
                let s = &ls.z - &z;
                let y = &ls.grad - &grad;
                if spec.kind == SolverKind::Bfgs {
                    let sy = s.dot(&y);
                    if sy > 1e-12 * s.norm() * y.norm() {
                        let rho = 1.0 / sy;
                        let hy = &h_inv * &y;
                        let yhy = y.dot(&hy);
                        // H+ = H - rho (s hy^T + hy s^T) + (rho^2 y^T H y + rho) s s^T
                        h_inv -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
                        h_inv += (&s * s.transpose()) * (rho * rho * yhy + rho);
                    }
                    dir = -(&h_inv * &ls.grad);
                } else {
                    ncg_since_restart += 1;
                    let beta = if ncg_since_restart >= d {
                        ncg_since_restart = 0;
                        0.0
                    } else {
                        (ls.grad.dot(&y) / grad.norm_squared()).max(0.0)
                    };
                    dir = -&ls.grad + &dir * beta;
                }
                z = ls.z;
                value = ls.value;
                grad = ls.grad;
            }
            SolverKind::Exact => unreachable!(),
        }
        if !value.is_finite() || z.iter().any(|c| !c.is_finite()) {
            return Err(SolverError::NonFinite { iteration: rounds });
        }
    }
    if let Some(eps) = eps {
        let residual = grad.norm();
        if residual > eps {
            return Err(SolverError::MaxRounds {
                rounds,
                residual,
            });
        }
    } else {
        rounds = budget;
    }
    let inexactness_b = (grad.norm() / problem.modulus()).powi(2);
    Ok(ProxResult {
        z,
        rounds_used: rounds,
        inexactness_b,
    })
}
