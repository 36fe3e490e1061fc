//! Closed-form convergence bounds and the exact minimizer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::Federation;
use crate::sampling::{SamplingDistribution, SamplingError};
use crate::{Matrix, Vector};

/// Gradient-norm tolerance for the minimizer.
pub const XSTAR_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("s = {s} must lie in (0, {upper})")]
    SOutOfRange { s: f64, upper: f64 },
    #[error("Newton did not converge after {iterations} iterations (|grad f| = {grad_norm:.3e})")]
    NotConverged { iterations: usize, grad_norm: f64 },
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// `gamma sigma^2 / (gamma mu^2 + 2 mu)`, the radius SPPM-AS settles in.
pub fn neighborhood(gamma: f64, mu: f64, sigma_sq: f64) -> f64 {
    if gamma.is_infinite() {
        return sigma_sq / (mu * mu);
    }
    gamma * sigma_sq / (gamma * mu * mu + 2.0 * mu)
}

/// `(1/(1+gamma mu))^{2t} R0^2 + gamma sigma^2 / (gamma mu^2 + 2 mu)`.
pub fn convergence_bound(gamma: f64, mu: f64, sigma_sq: f64, r0_sq: f64, t: usize) -> f64 {
    let rate = (1.0 / (1.0 + gamma * mu)).powi(2);
    rate.powi(t as i32) * r0_sq + neighborhood(gamma, mu, sigma_sq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum StepsizeChoice {
    Finite(f64),
    /// Interpolation: any stepsize works and larger is faster.
    Unbounded,
}

impl StepsizeChoice {
    pub fn value(&self) -> f64 {
        match self {
            StepsizeChoice::Finite(g) => *g,
            StepsizeChoice::Unbounded => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub gamma: StepsizeChoice,
    pub t_min: usize,
}

/// Stepsize `gamma = eps mu / sigma^2` and the round count
/// `t >= (sigma^2/(2 eps mu^2) + 1/2) log(2 R0^2 / eps)` reaching accuracy `eps`.
pub fn iteration_complexity(eps: f64, mu: f64, sigma_sq: f64, r0_sq: f64) -> Result<IterationPlan, TheoryError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TheoryError::Argument(format!("epsilon must be positive, got {eps}")));
    }
    if !(mu > 0.0) || sigma_sq < 0.0 || r0_sq < 0.0 {
        return Err(TheoryError::Argument("need mu > 0, sigma^2 >= 0, R0^2 >= 0".into()));
    }
    let log_term = (2.0 * r0_sq / eps).ln();
    let (gamma, factor) = if sigma_sq == 0.0 {
        (StepsizeChoice::Unbounded, 0.5)
    } else {
        (
            StepsizeChoice::Finite(eps * mu / sigma_sq),
            sigma_sq / (2.0 * eps * mu * mu) + 0.5,
        )
    };
    let t = (factor * log_term).ceil();
    let t_min = if t > 0.0 { t as usize } else { 0 };
    Ok(IterationPlan { gamma, t_min })
}

/// Default Young parameter for [`inexact_bound`]: `min(gamma mu, (gamma^2 mu^2 + 2 gamma mu)/2)`.
pub fn default_s(gamma: f64, mu: f64) -> f64 {
    let gm = gamma * mu;
    gm.min(0.5 * (gm * gm + 2.0 * gm))
}

/// Bound for SPPM-AS with prox errors `||~prox - prox||^2 <= b`:
/// `((1+s)/(1+gamma mu)^2)^t R0^2 + (1+s)(gamma^2 sigma^2 + b (1+gamma mu)^2 / s) / (gamma^2 mu^2 + 2 gamma mu - s)`.
pub fn inexact_bound(
    gamma: f64,
    mu: f64,
    sigma_sq: f64,
    b: f64,
    s: f64,
    r0_sq: f64,
    t: usize,
) -> Result<f64, TheoryError> {
    let gm = gamma * mu;
    let upper = gm * gm + 2.0 * gm;
    if !(s > 0.0 && s < upper) {
        return Err(TheoryError::SOutOfRange { s, upper });
    }
    let rate = (1.0 + s) / (1.0 + gm).powi(2);
    let floor = (1.0 + s) * (gamma * gamma * sigma_sq + b * (1.0 + gm).powi(2) / s) / (upper - s);
    Ok(rate.powi(t as i32) * r0_sq + floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FedProxConstants {
    pub a_s: f64,
    pub b_s: f64,
}

impl FedProxConstants {
    /// `A_S^t R0^2 + B_S / (1 - A_S)`.
    pub fn bound(&self, r0_sq: f64, t: usize) -> f64 {
        self.a_s.powi(t as i32) * r0_sq + self.b_s / (1.0 - self.a_s)
    }
}

/// `A_S = E[(1/|S|) sum 1/(1+gamma mu_i)]`,
/// `B_S = E[(1/|S|) sum gamma ||g_i||^2 / ((1+gamma mu_i) mu_i)]` by enumeration.
pub fn fedprox_constants(
    dist: &SamplingDistribution,
    mu: &[f64],
    grads: &[Vector],
    gamma: f64,
) -> Result<FedProxConstants, TheoryError> {
    if mu.len() != dist.n() || grads.len() != dist.n() {
        return Err(TheoryError::Argument("need one mu_i and one gradient per client".into()));
    }
    let mut a_s = 0.0;
    let mut b_s = 0.0;
    dist.visit_support(|c, pc| {
        let k = c.len() as f64;
        for &i in c {
            let shrink = 1.0 / (1.0 + gamma * mu[i]);
            a_s += pc * shrink / k;
            b_s += pc * gamma * shrink * grads[i].norm_squared() / (mu[i] * k);
        }
    })?;
    Ok(FedProxConstants { a_s, b_s })
}

/// Closed form of the recurrence bound `a^t s0 + b min(t, 1/(1-a))`.
pub fn recurrence_bound(a: f64, b: f64, s0: f64, t: usize) -> f64 {
    a.powi(t as i32) * s0 + b * (t as f64).min(1.0 / (1.0 - a))
}

/// Minimizer of the federation's average loss by damped Newton.
///
/// Returns `x*` and the achieved `|grad f(x*)|`.
pub fn solve_xstar(fed: &Federation, tol: f64) -> Result<(Vector, f64), TheoryError> {
    let d = fed.dim();
    let mut x = Vector::zeros(d);
    let (mut value, mut grad) = fed.value_grad(&x);
    for iteration in 0..NEWTON_MAX_ITERS {
        let gnorm = grad.norm();
        if gnorm <= tol {
            return Ok((x, gnorm));
        }
        let h: Matrix = fed.hessian(&x);
        let step = h
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or(TheoryError::NotConverged {
                iterations: iteration,
                grad_norm: gnorm,
            })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &x - &step * t;
            let (v, g) = fed.value_grad(&trial);
            // Near the optimum values stop resolving; accept on gradient decrease.
            if v <= value - 1e-4 * t * grad.dot(&step) || g.norm() < gnorm {
                x = trial;
                value = v;
                grad = g;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(TheoryError::NotConverged {
                iterations: iteration,
                grad_norm: gnorm,
            });
        }
    }
    let gnorm = grad.norm();
    if gnorm <= tol {
        Ok((x, gnorm))
    } else {
        Err(TheoryError::NotConverged {
            iterations: NEWTON_MAX_ITERS,
            grad_norm: gnorm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partition_noniid, synthetic_classification, synthetic_quadratic, SyntheticClassification};
    use crate::objectives::QuadraticObjective;
    use crate::sampling::SamplingScheme;
    use proptest::prelude::*;

    #[test]
    fn convergence_bound_examples() {
        assert_eq!(convergence_bound(2.0, 0.5, 3.0, 7.0, 0), 7.0 + neighborhood(2.0, 0.5, 3.0));
        let mu = 0.4;
        let sigma = 2.0;
        assert!((neighborhood(1.0 / mu, mu, sigma) - sigma / (3.0 * mu * mu)).abs() < 1e-12);
        assert!((convergence_bound(1.0, 1.0, 0.0, 5.0, 5) - 5.0 / 4f64.powi(5)).abs() < 1e-15);
    }

    #[test]
    fn iteration_complexity_examples() {
        let plan = iteration_complexity(1e-3, 0.5, 0.0, 4.0).unwrap();
        assert_eq!(plan.gamma, StepsizeChoice::Unbounded);
        assert_eq!(plan.t_min, (0.5 * (8.0f64 / 1e-3).ln()).ceil() as usize);
        let (mu, sigma, r0) = (0.5, 2.0, 10.0);
        let eps = sigma / (mu * mu);
        let plan = iteration_complexity(eps, mu, sigma, r0).unwrap();
        assert_eq!(plan.t_min, (2.0 * r0 / eps).ln().ceil() as usize);
        assert!(iteration_complexity(0.0, mu, sigma, r0).is_err());
        // Target looser than the start: nothing to do.
        assert_eq!(iteration_complexity(100.0, 1.0, 0.0, 1.0).unwrap().t_min, 0);
    }

    #[test]
    fn inexact_examples() {
        let (g, mu, sig, r0) = (0.7, 0.9, 1.3, 4.0);
        for t in [0, 1, 5, 50] {
            let a = inexact_bound(g, mu, sig, 0.0, 1e-12, r0, t).unwrap();
            let b = convergence_bound(g, mu, sig, r0, t);
            assert!((a - b).abs() <= 1e-6 * b, "{a} vs {b}");
        }
        let s = default_s(g, mu);
        let gm = g * mu;
        let floor = (1.0 + s) * (g * g * sig + 0.01 * (1.0 + gm).powi(2) / s) / (gm * gm + 2.0 * gm - s);
        let far = inexact_bound(g, mu, sig, 0.01, s, r0, 100_000).unwrap();
        assert!((far - floor).abs() <= 1e-12 * floor);
        assert!(inexact_bound(g, mu, sig, 0.0, gm * gm + 2.0 * gm, r0, 1).is_err());
        assert!(inexact_bound(g, mu, sig, 0.0, 0.0, r0, 1).is_err());
    }

    #[test]
    fn fedprox_examples() {
        let g = vec![Vector::from_vec(vec![1.0]), Vector::from_vec(vec![-1.0])];
        let us = SamplingDistribution::new(&SamplingScheme::Nice { tau: 1 }, 2, None).unwrap();
        let c = fedprox_constants(&us, &[1.0, 3.0], &g, 0.5).unwrap();
        assert!((c.a_s - 0.5 * (1.0 / 1.5 + 1.0 / 2.5)).abs() < 1e-15);
        let nice = SamplingDistribution::new(&SamplingScheme::Nice { tau: 2 }, 3, None).unwrap();
        let g3 = vec![Vector::zeros(2); 3];
        let c = fedprox_constants(&nice, &[0.3; 3], &g3, 2.0).unwrap();
        assert!((c.a_s - 1.0 / 1.6).abs() < 1e-15);
        assert_eq!(c.b_s, 0.0);
    }

    #[test]
    fn xstar_of_shifted_identity() {
        let c = Vector::from_vec(vec![1.0, -2.0, 3.0]);
        let q = QuadraticObjective::new(Matrix::identity(3, 3), c.clone()).unwrap();
        let fed = Federation::new(vec![Box::new(q)]).unwrap();
        let (x, g) = solve_xstar(&fed, XSTAR_TOL).unwrap();
        assert!((x - c).norm() < 1e-14);
        assert!(g <= XSTAR_TOL);
    }

    #[test]
    fn xstar_single_quadratic_client() {
        let spec = synthetic_quadratic(1, 4, 3, 1.0);
        let fed = Federation::from_quadratics(&spec).unwrap();
        let (x, _) = solve_xstar(&fed, XSTAR_TOL).unwrap();
        let direct = spec[0].a.clone().cholesky().unwrap().solve(&spec[0].b);
        assert!((x - direct).norm() < 1e-12);
    }

    #[test]
    fn quadratic_gradients_at_xstar_cancel() {
        let spec = synthetic_quadratic(4, 2, 11, 1.0);
        let fed = Federation::from_quadratics(&spec).unwrap();
        let (x, _) = solve_xstar(&fed, XSTAR_TOL).unwrap();
        let sum = fed.gradients(&x).iter().fold(Vector::zeros(2), |a, g| a + g);
        assert!(sum.norm() <= 4.0 * XSTAR_TOL);
    }

    #[test]
    fn xstar_on_logistic_split() {
        let data = synthetic_classification(&SyntheticClassification {
            points: 600,
            dim: 20,
            ..Default::default()
        });
        let (fds, _) = partition_noniid(&data, 5, 4, 1).unwrap();
        let fed = Federation::logistic(&fds, 0.1).unwrap();
        let (x, gnorm) = solve_xstar(&fed, XSTAR_TOL).unwrap();
        assert!(gnorm <= XSTAR_TOL);
        let n = fed.num_clients() as f64;
        let sum = fed.gradients(&x).iter().fold(Vector::zeros(fed.dim()), |a, g| a + g);
        assert!(sum.norm() / n <= XSTAR_TOL * 1.01);
        assert!(fed.client(0).strong_convexity() == 0.1);
    }

    proptest! {
        #[test]
        fn neighborhood_is_capped(gamma in 1e-4f64..1e4, mu in 1e-3f64..10.0, sigma in 0.0f64..100.0) {
            let nb = neighborhood(gamma, mu, sigma);
            prop_assert!(nb <= (sigma / (mu * mu)).min(gamma * sigma / mu) * (1.0 + 1e-12));
        }

        #[test]
        fn convergence_bound_is_nonincreasing(gamma in 1e-3f64..1e3, mu in 1e-3f64..10.0, sigma in 0.0f64..10.0, r0 in 0.0f64..100.0, t in 0usize..200) {
            prop_assert!(convergence_bound(gamma, mu, sigma, r0, t + 1) <= convergence_bound(gamma, mu, sigma, r0, t));
        }

        #[test]
        fn plan_round_trips(mu in 0.01f64..5.0, sigma in 1e-3f64..10.0, r0 in 0.01f64..100.0, frac in 0.01f64..1.0) {
            let eps = frac * sigma / (mu * mu);
            let plan = iteration_complexity(eps, mu, sigma, r0).unwrap();
            let bound = convergence_bound(plan.gamma.value(), mu, sigma, r0, plan.t_min);
            prop_assert!(bound <= eps * (1.0 + 1e-12), "{} > {}", bound, eps);
        }

        #[test]
        fn recurrence_fact(a in 0.0f64..0.999, b in 0.0f64..10.0, s0 in 0.0f64..100.0, t in 0usize..300, slack in proptest::collection::vec(prop_oneof![Just(1.0f64), 0.0f64..1.0], 300)) {
            // any sequence with s_{k+1} <= a s_k + b
            let mut s = s0;
            for &shrink in &slack[..t] {
                s = (a * s + b) * shrink;
            }
            prop_assert!(s <= recurrence_bound(a, b, s0, t) * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn fedprox_a_decreases_with_gamma(mu in proptest::collection::vec(0.01f64..5.0, 2..6), g1 in 0.01f64..10.0, ratio in 1.01f64..10.0) {
            let n = mu.len();
            let d = SamplingDistribution::new(&SamplingScheme::Nice { tau: 1 }, n, None).unwrap();
            let grads: Vec<Vector> = (0..n).map(|i| Vector::from_vec(vec![i as f64 - 1.0])).collect();
            let a = fedprox_constants(&d, &mu, &grads, g1).unwrap();
            let b = fedprox_constants(&d, &mu, &grads, g1 * ratio).unwrap();
            prop_assert!(b.a_s < a.a_s);
            prop_assert!(a.a_s < 1.0);
            let tiny = fedprox_constants(&d, &mu, &grads, 1e-12).unwrap();
            prop_assert!(tiny.b_s < 1e-9);
        }
    }
}
