//! Global optimization drivers and trajectory records.
//!
//! A run is a [`Simulation`] state machine advanced one global round at a
//! time. Cohorts come from [`crate::rng::round_stream`], so two algorithms
//! run with the same seed see the same cohorts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::{ClientObjective, Federation, ObjectiveError, ShiftedObjective};
use crate::prox::{solve_prox, ProxProblem, SolverError, SolverSpec};
use crate::rng;
use crate::sampling::{SamplingDistribution, SamplingError, SamplingScheme};
use crate::Vector;

/// Divergence is declared once `||x_t - x*||^2` exceeds this multiple of `max(R0^2, 1)`.
pub const DIVERGENCE_FACTOR: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("run config: {0}")]
    Config(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("round {round}: {source}")]
    Solver {
        round: usize,
        #[source]
        source: SolverError,
    },
    #[error("diverged at round {round} (squared distance {sq_dist:.3e})")]
    Diverged { round: usize, sq_dist: f64 },
}

impl RunError {
    pub fn is_numeric(&self) -> bool {
        match self {
            RunError::Solver { source, .. } => source.is_numeric(),
            RunError::Diverged { .. } => true,
            RunError::Objective(ObjectiveError::NotPositiveDefinite) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    /// `x_{t+1} = prox_{gamma f_S}(x_t)`.
    SppmAs,
    /// Average of per-member proxes, repeated `K` times per cohort.
    FedproxSppmAs,
    /// Average of per-member proxes of the shifted objectives with stepsize `alpha`.
    FedavgSppmAs,
    /// Local gradient steps per member, then a plain average.
    Localgd,
    /// One step on the unbiased cohort gradient.
    MbGd,
    /// Local gradient steps per member, then an unbiased reweighted average.
    MbLocalgd,
}

impl AlgorithmKind {
    pub fn is_prox(self) -> bool {
        matches!(
            self,
            AlgorithmKind::SppmAs | AlgorithmKind::FedproxSppmAs | AlgorithmKind::FedavgSppmAs
        )
    }
}

fn default_gamma() -> f64 {
    1.0
}

fn default_solver() -> SolverSpec {
    SolverSpec::exact()
}

fn default_sampling() -> SamplingScheme {
    SamplingScheme::Full
}

fn default_epsilon() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: AlgorithmKind,
    /// Global prox stepsize.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Local stepsize (FedAvg inner prox, GD baselines). GD baselines default to `1/(2 L_max)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Inner rounds: averaging rounds (FedProx/FedAvg) or local GD steps
    /// (LocalGD, MB-LocalGD). Defaults to 5 for MB-LocalGD, 1 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_rounds: Option<usize>,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingScheme,
    #[serde(default = "default_solver")]
    pub solver: SolverSpec,
    /// Number of global rounds `T`.
    pub rounds: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    /// Starting point; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn new(algorithm: AlgorithmKind, sampling: SamplingScheme, rounds: usize) -> Self {
        Self {
            algorithm,
            gamma: default_gamma(),
            alpha: None,
            local_rounds: None,
            sampling,
            solver: default_solver(),
            rounds,
            epsilon: default_epsilon(),
            seed: 0,
            x0: None,
        }
    }

    pub fn resolved_local_rounds(&self) -> usize {
        self.local_rounds.unwrap_or(match self.algorithm {
            AlgorithmKind::MbLocalgd => 5,
            _ => 1,
        })
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive and finite, got {}", self.gamma));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("alpha must be positive and finite, got {a}"));
            }
        }
        if self.algorithm == AlgorithmKind::FedavgSppmAs && self.alpha.is_none() {
            return bad("alpha is required for fedavg_sppm_as".into());
        }
        if self.local_rounds == Some(0) {
            return bad("local_rounds must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        self.solver
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))
    }
}

/// One line of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub sq_dist: f64,
    /// Local communication rounds spent in this global round.
    pub rounds_local: usize,
    pub cum_local: usize,
    pub cum_global: usize,
    /// Largest certified prox inexactness seen so far.
    pub certified_b: f64,
}

pub const TRAJECTORY_HEADER: &str = "t,sq_dist,rounds_local,cum_local,cum_global,certified_b";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub rows: Vec<TrajectoryRow>,
    pub final_x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopReport {
    pub reached: bool,
    /// First round with `sq_dist <= epsilon`.
    pub t_eps: Option<usize>,
    /// Cumulative local rounds at `t_eps` (`T K` for fixed-`K` runs).
    pub tk: Option<usize>,
}

impl TrajectoryRecord {
    pub fn stop_report(&self, epsilon: f64) -> StopReport {
        match self.rows.iter().find(|r| r.sq_dist <= epsilon) {
            Some(r) => StopReport {
                reached: true,
                t_eps: Some(r.t),
                tk: Some(r.cum_local),
            },
            None => StopReport {
                reached: false,
                t_eps: None,
                tk: None,
            },
        }
    }

    /// CSV with 17 significant digits for every real.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(TRAJECTORY_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.16e},{},{},{},{:.16e}",
                r.t, r.sq_dist, r.rounds_local, r.cum_local, r.cum_global, r.certified_b
            );
        }
        out
    }

    pub fn sq_dists(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.sq_dist).collect()
    }
}

/// Stepsize used by the gradient baselines when none is configured.
pub fn default_gd_stepsize(fed: &Federation) -> f64 {
    1.0 / (2.0 * fed.smoothness_max())
}

/// A run in progress.
pub struct Simulation<'a> {
    fed: &'a Federation,
    cfg: RunConfig,
    dist: SamplingDistribution,
    xstar: Vector,
    x: Vector,
    alpha: f64,
    local_rounds: usize,
    r0_sq: f64,
    rows: Vec<TrajectoryRow>,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: &RunConfig, fed: &'a Federation, xstar: &Vector) -> Result<Self, RunError> {
        cfg.validate()?;
        let d = fed.dim();
        if xstar.len() != d {
            return Err(RunError::Config(format!(
                "x* has dimension {}, problem has {d}",
                xstar.len()
            )));
        }
        let x = match &cfg.x0 {
            Some(v) if v.len() != d => {
                return Err(RunError::Config(format!("x0 has dimension {}, problem has {d}", v.len())))
            }
            Some(v) => Vector::from_vec(v.clone()),
            None => Vector::zeros(d),
        };
        let mus = fed.strong_convexities();
        let dist = SamplingDistribution::new(&cfg.sampling, fed.num_clients(), Some(&mus))?;
        let alpha = cfg.alpha.unwrap_or_else(|| default_gd_stepsize(fed));
        let r0_sq = (&x - xstar).norm_squared();
        let rows = vec![TrajectoryRow {
            t: 0,
            sq_dist: r0_sq,
            rounds_local: 0,
            cum_local: 0,
            cum_global: 0,
            certified_b: 0.0,
        }];
        Ok(Self {
            fed,
            local_rounds: cfg.resolved_local_rounds(),
            cfg: cfg.clone(),
            dist,
            xstar: xstar.clone(),
            x,
            alpha,
            r0_sq,
            rows,
        })
    }

    pub fn x(&self) -> &Vector {
        &self.x
    }

    pub fn round(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn last(&self) -> &TrajectoryRow {
        self.rows.last().expect("row 0 always present")
    }

    pub fn distribution(&self) -> &SamplingDistribution {
        &self.dist
    }

    fn prox(&self, objective: &dyn ClientObjective, center: &Vector, gamma: f64, round: usize) -> Result<(Vector, usize, f64), RunError> {
        let wrap = |source| RunError::Solver { round, source };
        let problem = ProxProblem::new(objective, center.clone(), gamma).map_err(wrap)?;
        let r = solve_prox(&problem, &self.cfg.solver).map_err(wrap)?;
        Ok((r.z, r.rounds_used, r.inexactness_b))
    }

    fn local_gd(&self, i: usize) -> Vector {
        let f = self.fed.client(i);
        let mut z = self.x.clone();
        for _ in 0..self.local_rounds {
            let g = f.gradient(&z);
            z.axpy(-self.alpha, &g, 1.0);
        }
        z
    }

    /// Advance one global round.
    pub fn step(&mut self) -> Result<TrajectoryRow, RunError> {
        let round = self.round() + 1;
        let mut stream = rng::round_stream(self.cfg.seed, round as u64);
        let cohort = self.dist.draw(&mut stream);
        let members = cohort.indices();
        let size = members.len() as f64;
        let mut b = 0.0f64;

        let (next, rounds_local) = match self.cfg.algorithm {
            AlgorithmKind::SppmAs => {
                let fc = self.fed.cohort_objective(&cohort)?;
                let (z, used, bi) = self.prox(&fc, &self.x, self.cfg.gamma, round)?;
                b = bi;
                (z, used)
            }
            AlgorithmKind::FedproxSppmAs => {
                let mut z = self.x.clone();
                for _ in 0..self.local_rounds {
                    let mut acc = Vector::zeros(z.len());
                    for &i in members {
                        let (zi, _, bi) = self.prox(self.fed.client(i), &z, self.cfg.gamma, round)?;
                        acc += zi;
                        b = b.max(bi);
                    }
                    z = acc / size;
                }
                (z, self.local_rounds)
            }
            AlgorithmKind::FedavgSppmAs => {
                let shifted: Vec<ShiftedObjective<'_>> = members
                    .iter()
                    .map(|&i| ShiftedObjective::new(self.fed.client(i), self.x.clone(), self.cfg.gamma))
                    .collect();
                let mut z = self.x.clone();
                for _ in 0..self.local_rounds {
                    let mut acc = Vector::zeros(z.len());
                    for s in &shifted {
                        let (zi, _, bi) = self.prox(s, &z, self.alpha, round)?;
                        acc += zi;
                        b = b.max(bi);
                    }
                    z = acc / size;
                }
                (z, self.local_rounds)
            }
            AlgorithmKind::Localgd => {
                let mut acc = Vector::zeros(self.x.len());
                for &i in members {
                    acc += self.local_gd(i);
                }
                (acc / size, 1)
            }
            AlgorithmKind::MbGd => {
                let mut g = Vector::zeros(self.x.len());
                for (&i, &w) in members.iter().zip(cohort.weights()) {
                    g.axpy(w, &self.fed.client(i).gradient(&self.x), 1.0);
                }
                (&self.x - g * self.alpha, 1)
            }
            AlgorithmKind::MbLocalgd => {
                let mut delta = Vector::zeros(self.x.len());
                for (&i, &w) in members.iter().zip(cohort.weights()) {
                    delta.axpy(w, &(self.local_gd(i) - &self.x), 1.0);
                }
                (&self.x + delta, 1)
            }
        };

        let sq_dist = (&next - &self.xstar).norm_squared();
        if !sq_dist.is_finite() || sq_dist > DIVERGENCE_FACTOR * self.r0_sq.max(1.0) {
            return Err(RunError::Diverged { round, sq_dist });
        }
        self.x = next;
        let prev = *self.last();
        let row = TrajectoryRow {
            t: round,
            sq_dist,
            rounds_local,
            cum_local: prev.cum_local + rounds_local,
            cum_global: round,
            certified_b: prev.certified_b.max(b),
        };
        self.rows.push(row);
        Ok(row)
    }

    pub fn finish(self) -> TrajectoryRecord {
        TrajectoryRecord {
            rows: self.rows,
            final_x: self.x.iter().copied().collect(),
        }
    }
}

/// Run `cfg.rounds` global rounds.
pub fn run(cfg: &RunConfig, fed: &Federation, xstar: &Vector) -> Result<TrajectoryRecord, RunError> {
    let mut sim = Simulation::new(cfg, fed, xstar)?;
    for _ in 0..cfg.rounds {
        sim.step()?;
    }
    Ok(sim.finish())
}

/// Run the same config for several seeds on up to `jobs` threads. Results
/// come back in seed order.
pub fn run_seeds(
    cfg: &RunConfig,
    fed: &Federation,
    xstar: &Vector,
    seeds: &[u64],
    jobs: usize,
) -> Vec<Result<TrajectoryRecord, RunError>> {
    use rayon::prelude::*;
    let one = |&seed: &u64| {
        let mut c = cfg.clone();
        c.seed = seed;
        run(&c, fed, xstar)
    };
    if jobs <= 1 {
        return seeds.iter().map(one).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| seeds.par_iter().map(one).collect()),
        Err(_) => seeds.iter().map(one).collect(),
    }
}
