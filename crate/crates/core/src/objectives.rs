//! Client objectives and cohort-reweighted composites.

use std::fmt;

use thiserror::Error;

use crate::data::{ClientShard, DataPoint, FederatedDataset, QuadraticSpec};
use crate::sampling::Cohort;
use crate::{Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("system is not positive definite")]
    NotPositiveDefinite,
    #[error("objective is not quadratic; closed-form prox unavailable")]
    NotQuadratic,
    #[error("client shard is empty")]
    EmptyShard,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A differentiable, strongly convex client loss `f_i`.
///
/// `value_grad` does not check dimensions; use [`ClientObjective::checked_value_grad`]
/// at API boundaries.
pub trait ClientObjective: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn value_grad(&self, x: &Vector) -> (f64, Vector);

    fn hessian(&self, x: &Vector) -> Matrix;

    /// Strong-convexity constant `mu_i`.
    fn strong_convexity(&self) -> f64;

    /// Smoothness constant `L_i`.
    fn smoothness(&self) -> f64;

    /// `(A, b)` with `f(x) = 1/2 x^T A x - b^T x + const` when the loss is quadratic.
    fn quadratic_parts(&self) -> Option<(Matrix, Vector)> {
        None
    }

    fn value(&self, x: &Vector) -> f64 {
        self.value_grad(x).0
    }

    fn gradient(&self, x: &Vector) -> Vector {
        self.value_grad(x).1
    }

    fn checked_value_grad(&self, x: &Vector) -> Result<(f64, Vector), ObjectiveError> {
        if x.len() != self.dim() {
            return Err(ObjectiveError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.value_grad(x))
    }
}

// ---------------------------------------------------------------------------
// Logistic regression

/// `log(1 + exp(t))` without overflow.
pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// `1 / (1 + exp(-t))` without overflow.
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `f_i(x) = (1/n_i) sum_j log(1 + exp(-b_j a_j^T x)) + (mu/2) ||x||^2`.
#[derive(Debug, Clone)]
pub struct LogisticObjective {
    points: Vec<DataPoint>,
    dim: usize,
    mu: f64,
    smoothness: f64,
}

impl LogisticObjective {
    pub fn new(points: Vec<DataPoint>, dim: usize, mu: f64) -> Result<Self, ObjectiveError> {
        if points.is_empty() {
            return Err(ObjectiveError::EmptyShard);
        }
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(ObjectiveError::InvalidParameter(format!(
                "regularization mu must be positive, got {mu}"
            )));
        }
        if let Some(p) = points.iter().find(|p| p.min_dimension() > dim) {
            return Err(ObjectiveError::DimensionMismatch {
                expected: dim,
                got: p.min_dimension(),
            });
        }
        let n = points.len() as f64;
        let smoothness = points.iter().map(DataPoint::norm_squared).sum::<f64>() / (4.0 * n) + mu;
        Ok(Self {
            points,
            dim,
            mu,
            smoothness,
        })
    }

    pub fn from_shard(shard: &ClientShard, dim: usize, mu: f64) -> Result<Self, ObjectiveError> {
        Self::new(shard.points.clone(), dim, mu)
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }
}

impl ClientObjective for LogisticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, x: &Vector) -> (f64, Vector) {
        let n = self.points.len() as f64;
        let mut loss = 0.0;
        let mut grad = Vector::zeros(self.dim);
        for p in &self.points {
            let b = f64::from(p.label());
            let margin = b * p.dot(x);
            loss += softplus(-margin);
            let coef = -b * sigmoid(-margin) / n;
            for &(j, v) in p.features() {
                grad[j] += coef * v;
            }
        }
        grad.axpy(self.mu, x, 1.0);
        (loss / n + 0.5 * self.mu * x.norm_squared(), grad)
    }

    fn hessian(&self, x: &Vector) -> Matrix {
        let n = self.points.len() as f64;
        let mut h = Matrix::identity(self.dim, self.dim) * self.mu;
        for p in &self.points {
            let s = sigmoid(p.dot(x));
            let w = s * (1.0 - s) / n;
            for &(i, vi) in p.features() {
                for &(j, vj) in p.features() {
                    h[(i, j)] += w * vi * vj;
                }
            }
        }
        h
    }

    fn strong_convexity(&self) -> f64 {
        self.mu
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }
}

/// Value and gradient of a logistic client with a dimension check.
pub fn logistic_value_grad(
    obj: &LogisticObjective,
    x: &Vector,
) -> Result<(f64, Vector), ObjectiveError> {
    obj.checked_value_grad(x)
}

// ---------------------------------------------------------------------------
// Quadratic

/// `f(x) = 1/2 x^T A x - b^T x` with symmetric positive-definite `A`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    a: Matrix,
    b: Vector,
    mu: f64,
    smoothness: f64,
}

impl QuadraticObjective {
    pub fn new(a: Matrix, b: Vector) -> Result<Self, ObjectiveError> {
        let d = b.len();
        if a.nrows() != d || a.ncols() != d {
            return Err(ObjectiveError::DimensionMismatch {
                expected: d,
                got: a.nrows(),
            });
        }
        let scale = a.amax().max(1.0);
        if (&a - a.transpose()).amax() > 1e-12 * scale {
            return Err(ObjectiveError::NotSymmetric);
        }
        let eig = a.clone().symmetric_eigen();
        let mu = eig.eigenvalues.min();
        let smoothness = eig.eigenvalues.max();
        if mu <= 0.0 {
            return Err(ObjectiveError::NotPositiveDefinite);
        }
        Ok(Self {
            a,
            b,
            mu,
            smoothness,
        })
    }

    pub fn from_spec(spec: &QuadraticSpec) -> Result<Self, ObjectiveError> {
        Self::new(spec.a.clone(), spec.b.clone())
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }
}

impl ClientObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value_grad(&self, x: &Vector) -> (f64, Vector) {
        let ax = &self.a * x;
        let value = 0.5 * x.dot(&ax) - self.b.dot(x);
        (value, ax - &self.b)
    }

    fn hessian(&self, _x: &Vector) -> Matrix {
        self.a.clone()
    }

    fn strong_convexity(&self) -> f64 {
        self.mu
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn quadratic_parts(&self) -> Option<(Matrix, Vector)> {
        Some((self.a.clone(), self.b.clone()))
    }
}

// ---------------------------------------------------------------------------
// Shifted objective

/// `f(x) + ||x - center||^2 / (2 gamma)`: the per-client objective a
/// FedAvg-style cohort approximates while the global center is frozen.
#[derive(Debug)]
pub struct ShiftedObjective<'a> {
    inner: &'a dyn ClientObjective,
    center: Vector,
    gamma: f64,
}

impl<'a> ShiftedObjective<'a> {
    pub fn new(inner: &'a dyn ClientObjective, center: Vector, gamma: f64) -> Self {
        assert!(gamma > 0.0, "shift stepsize must be positive");
        Self {
            inner,
            center,
            gamma,
        }
    }
}

impl ClientObjective for ShiftedObjective<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value_grad(&self, x: &Vector) -> (f64, Vector) {
        let (v, mut g) = self.inner.value_grad(x);
        let diff = x - &self.center;
        g.axpy(1.0 / self.gamma, &diff, 1.0);
        (v + diff.norm_squared() / (2.0 * self.gamma), g)
    }

    fn hessian(&self, x: &Vector) -> Matrix {
        let d = self.dim();
        self.inner.hessian(x) + Matrix::identity(d, d) / self.gamma
    }

    fn strong_convexity(&self) -> f64 {
        self.inner.strong_convexity() + 1.0 / self.gamma
    }

    fn smoothness(&self) -> f64 {
        self.inner.smoothness() + 1.0 / self.gamma
    }

    fn quadratic_parts(&self) -> Option<(Matrix, Vector)> {
        let (a, b) = self.inner.quadratic_parts()?;
        let d = self.dim();
        Some((
            a + Matrix::identity(d, d) / self.gamma,
            b + &self.center / self.gamma,
        ))
    }
}

// ---------------------------------------------------------------------------
// Cohorts

#[derive(Debug, Clone, Copy)]
pub struct CohortMember<'a> {
    pub client: usize,
    pub weight: f64,
    pub objective: &'a dyn ClientObjective,
}

/// `f_C(x) = sum_{i in C} w_i f_i(x)` with `w_i = 1 / (n p_i)`.
///
/// Members are kept in ascending client order and always reduced in that
/// order, so results do not depend on how the cohort was assembled.
#[derive(Debug, Clone)]
pub struct CohortObjective<'a> {
    members: Vec<CohortMember<'a>>,
    dim: usize,
}

impl<'a> CohortObjective<'a> {
    pub fn new(mut members: Vec<CohortMember<'a>>) -> Result<Self, ObjectiveError> {
        let first = members
            .first()
            .ok_or_else(|| ObjectiveError::InvalidParameter("cohort is empty".into()))?;
        let dim = first.objective.dim();
        for m in &members {
            if !(m.weight > 0.0 && m.weight.is_finite()) {
                return Err(ObjectiveError::InvalidParameter(format!(
                    "weight of client {} must be finite and positive, got {}",
                    m.client, m.weight
                )));
            }
            if m.objective.dim() != dim {
                return Err(ObjectiveError::DimensionMismatch {
                    expected: dim,
                    got: m.objective.dim(),
                });
            }
        }
        members.sort_by_key(|m| m.client);
        if members.windows(2).any(|w| w[0].client == w[1].client) {
            return Err(ObjectiveError::InvalidParameter(
                "cohort lists a client twice".into(),
            ));
        }
        Ok(Self { members, dim })
    }

    /// A single client with unit weight (its own prox).
    pub fn single(client: usize, objective: &'a dyn ClientObjective) -> Self {
        Self {
            members: vec![CohortMember {
                client,
                weight: 1.0,
                objective,
            }],
            dim: objective.dim(),
        }
    }

    pub fn members(&self) -> &[CohortMember<'a>] {
        &self.members
    }

    /// Checked evaluation of `f_C` and its gradient.
    pub fn cohort_value_grad(&self, x: &Vector) -> Result<(f64, Vector), ObjectiveError> {
        self.checked_value_grad(x)
    }
}

impl ClientObjective for CohortObjective<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, x: &Vector) -> (f64, Vector) {
        let mut value = 0.0;
        let mut grad = Vector::zeros(self.dim);
        for m in &self.members {
            let (v, g) = m.objective.value_grad(x);
            value += m.weight * v;
            grad.axpy(m.weight, &g, 1.0);
        }
        (value, grad)
    }

    fn hessian(&self, x: &Vector) -> Matrix {
        let mut h = Matrix::zeros(self.dim, self.dim);
        for m in &self.members {
            h += m.objective.hessian(x) * m.weight;
        }
        h
    }

    /// `mu_C = sum_{i in C} w_i mu_i`.
    fn strong_convexity(&self) -> f64 {
        self.members
            .iter()
            .map(|m| m.weight * m.objective.strong_convexity())
            .sum()
    }

    fn smoothness(&self) -> f64 {
        self.members
            .iter()
            .map(|m| m.weight * m.objective.smoothness())
            .sum()
    }

    fn quadratic_parts(&self) -> Option<(Matrix, Vector)> {
        let mut a = Matrix::zeros(self.dim, self.dim);
        let mut b = Vector::zeros(self.dim);
        for m in &self.members {
            let (ai, bi) = m.objective.quadratic_parts()?;
            a += ai * m.weight;
            b.axpy(m.weight, &bi, 1.0);
        }
        Some((a, b))
    }
}

/// Closed-form prox of a quadratic (or quadratic cohort):
/// `(I + gamma A)^{-1} (x + gamma b)` by Cholesky.
pub fn exact_prox_quadratic(
    objective: &dyn ClientObjective,
    x: &Vector,
    gamma: f64,
) -> Result<Vector, ObjectiveError> {
    if !(gamma > 0.0) {
        return Err(ObjectiveError::InvalidParameter(format!(
            "prox stepsize must be positive, got {gamma}"
        )));
    }
    if x.len() != objective.dim() {
        return Err(ObjectiveError::DimensionMismatch {
            expected: objective.dim(),
            got: x.len(),
        });
    }
    let (a, b) = objective
        .quadratic_parts()
        .ok_or(ObjectiveError::NotQuadratic)?;
    let d = x.len();
    let system = Matrix::identity(d, d) + a * gamma;
    let rhs = x + b * gamma;
    let chol = system
        .cholesky()
        .ok_or(ObjectiveError::NotPositiveDefinite)?;
    Ok(chol.solve(&rhs))
}

// ---------------------------------------------------------------------------
// Federation

/// The `n` client objectives of a federated problem; `f = (1/n) sum_i f_i`.
#[derive(Debug)]
pub struct Federation {
    clients: Vec<Box<dyn ClientObjective>>,
    dim: usize,
}

impl Federation {
    pub fn new(clients: Vec<Box<dyn ClientObjective>>) -> Result<Self, ObjectiveError> {
        let dim = clients
            .first()
            .ok_or_else(|| ObjectiveError::InvalidParameter("no clients".into()))?
            .dim();
        if let Some(c) = clients.iter().find(|c| c.dim() != dim) {
            return Err(ObjectiveError::DimensionMismatch {
                expected: dim,
                got: c.dim(),
            });
        }
        Ok(Self { clients, dim })
    }

    pub fn from_quadratics(specs: &[QuadraticSpec]) -> Result<Self, ObjectiveError> {
        let clients = specs
            .iter()
            .map(|s| QuadraticObjective::from_spec(s).map(|q| Box::new(q) as Box<dyn ClientObjective>))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(clients)
    }

    /// One regularized logistic client per shard.
    pub fn logistic(dataset: &FederatedDataset, mu: f64) -> Result<Self, ObjectiveError> {
        let dim = dataset.dim.max(1);
        let clients = dataset
            .shards
            .iter()
            .map(|s| {
                LogisticObjective::from_shard(s, dim, mu)
                    .map(|l| Box::new(l) as Box<dyn ClientObjective>)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(clients)
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn client(&self, i: usize) -> &dyn ClientObjective {
        self.clients[i].as_ref()
    }

    pub fn clients(&self) -> impl Iterator<Item = &dyn ClientObjective> {
        self.clients.iter().map(|c| c.as_ref())
    }

    pub fn strong_convexities(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.strong_convexity()).collect()
    }

    pub fn smoothness_max(&self) -> f64 {
        self.clients
            .iter()
            .map(|c| c.smoothness())
            .fold(0.0, f64::max)
    }

    /// Value and gradient of the plain average `f`.
    pub fn value_grad(&self, x: &Vector) -> (f64, Vector) {
        let n = self.clients.len() as f64;
        let mut value = 0.0;
        let mut grad = Vector::zeros(self.dim);
        for c in &self.clients {
            let (v, g) = c.value_grad(x);
            value += v;
            grad += g;
        }
        (value / n, grad / n)
    }

    pub fn hessian(&self, x: &Vector) -> Matrix {
        let n = self.clients.len() as f64;
        let mut h = Matrix::zeros(self.dim, self.dim);
        for c in &self.clients {
            h += c.hessian(x);
        }
        h / n
    }

    /// Per-client gradients `grad f_i(x)`.
    pub fn gradients(&self, x: &Vector) -> Vec<Vector> {
        self.clients.iter().map(|c| c.gradient(x)).collect()
    }

    /// The reweighted composite for a sampled cohort.
    pub fn cohort_objective(&self, cohort: &Cohort) -> Result<CohortObjective<'_>, ObjectiveError> {
        let members = cohort
            .indices()
            .iter()
            .zip(cohort.weights())
            .map(|(&client, &weight)| {
                if client >= self.clients.len() {
                    return Err(ObjectiveError::InvalidParameter(format!(
                        "client {client} is out of range"
                    )));
                }
                Ok(CohortMember {
                    client,
                    weight,
                    objective: self.clients[client].as_ref(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        CohortObjective::new(members)
    }
}
