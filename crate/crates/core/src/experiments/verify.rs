//! Self-check suite behind `verify`.
//!
//! Each property is checked on a list of seeded random instances. A failure
//! records the module, the property and the seed that produced the
//! counterexample. The NICE closed form is injectable so the suite itself can
//! be mutation-tested.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::algorithms::{run, AlgorithmKind, RunConfig};
use crate::data::synthetic_quadratic;
use crate::objectives::{exact_prox_quadratic, Federation, QuadraticObjective};
use crate::prox::{certify_inexactness, solve_prox, ProxProblem, SolverKind, SolverSpec};
use crate::rng::{self, standard_normal, Rng};
use crate::sampling::{
    cluster_max_deviation, optimal_ss_clustering, sigma_nice_closed_form, ss_variance_upper_bound,
    SamplingDistribution, SamplingScheme,
};
use crate::theory::{neighborhood, solve_xstar, convergence_bound, XSTAR_TOL};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "quick" => Ok(Level::Quick),
            "full" => Ok(Level::Full),
            other => Err(format!("unknown level {other:?}, expected quick or full")),
        }
    }
}

/// Replaceable pieces under test.
#[derive(Clone, Copy)]
pub struct Hooks {
    /// `(sigma^2(1), n, tau) -> sigma^2_NICE(tau)`.
    pub nice_closed_form: fn(f64, usize, usize) -> f64,
}

impl Default for Hooks {
    fn default() -> Self {
        Self {
            nice_closed_form: sigma_nice_closed_form,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub module: &'static str,
    pub property: &'static str,
    pub seed: u64,
    pub detail: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FAIL {}::{} (seed {}): {}",
            self.module, self.property, self.seed, self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub module: &'static str,
    pub property: &'static str,
    pub cases: usize,
    pub failure: Option<Failure>,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<Check>,
    /// Human-readable tables produced along the way.
    pub tables: Vec<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.failure.is_none())
    }

    pub fn failures(&self) -> impl Iterator<Item = &Failure> {
        self.checks.iter().filter_map(|c| c.failure.as_ref())
    }

    fn check(
        &mut self,
        module: &'static str,
        property: &'static str,
        seeds: std::ops::Range<u64>,
        mut case: impl FnMut(u64) -> Result<(), String>,
    ) {
        let cases = seeds.end.saturating_sub(seeds.start) as usize;
        let failure = seeds.into_iter().find_map(|seed| {
            case(seed).err().map(|detail| Failure {
                module,
                property,
                seed,
                detail,
            })
        });
        self.checks.push(Check {
            module,
            property,
            cases,
            failure,
        });
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            match &c.failure {
                None => writeln!(f, "ok   {}::{} ({} case{})", c.module, c.property, c.cases, if c.cases == 1 { "" } else { "s" })?,
                Some(fail) => writeln!(f, "{fail}")?,
            }
        }
        for t in &self.tables {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300) || a == b
}

fn gaussian_vectors(rng: &mut Rng, n: usize, d: usize) -> Vec<Vector> {
    (0..n)
        .map(|_| Vector::from_fn(d, |_, _| standard_normal(rng)))
        .collect()
}

/// Random vectors shifted to mean zero, as gradients at the optimum are.
pub fn centered_vectors(rng: &mut Rng, n: usize, d: usize) -> Vec<Vector> {
    let mut g = gaussian_vectors(rng, n, d);
    let mean = g.iter().fold(Vector::zeros(d), |a, x| a + x) / n as f64;
    for x in &mut g {
        *x -= &mean;
    }
    g
}

/// Random partition of `0..n` into `b` nonempty blocks.
pub fn random_partition(rng: &mut Rng, n: usize, b: usize) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut cuts: Vec<usize> = (1..n).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(b - 1).collect();
    cuts.sort_unstable();
    let mut blocks = Vec::with_capacity(b);
    let mut start = 0;
    for &c in cuts.iter().chain(std::iter::once(&n)) {
        let mut block = perm[start..c].to_vec();
        block.sort_unstable();
        blocks.push(block);
        start = c;
    }
    blocks
}

fn random_simplex(rng: &mut Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| 0.05 + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// One instance of every scheme on `n` clients.
pub fn all_schemes(rng: &mut Rng, n: usize) -> Vec<SamplingScheme> {
    let b = rng.random_range(1..=n);
    let tau = rng.random_range(1..=n);
    let partition = random_partition(rng, n, b);
    let q = random_simplex(rng, b);
    vec![
        SamplingScheme::Full,
        SamplingScheme::Nonuniform {
            p: random_simplex(rng, n),
        },
        SamplingScheme::Importance,
        SamplingScheme::Nice { tau },
        SamplingScheme::Block {
            partition: partition.clone(),
            q,
        },
        SamplingScheme::Stratified { partition },
    ]
}

fn random_mu(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 0.1 + 2.0 * rng.random::<f64>()).collect()
}

fn err<E: fmt::Display>(e: E) -> String {
    e.to_string()
}

fn sampling_checks(report: &mut Report, hooks: &Hooks, cases: u64) {
    report.check("sampling", "closed_form_matches_enumeration", 0..cases, |seed| {
        let mut rng = rng::seeded(seed);
        let n = rng.random_range(1..=6);
        let grads = centered_vectors(&mut rng, n, 3);
        let mu = random_mu(&mut rng, n);
        // Full participation has sigma = 0 exactly; compare against the gradient scale.
        let floor = 1e-14 * grads.iter().map(|g| g.norm_squared()).sum::<f64>() / n as f64;
        for scheme in all_schemes(&mut rng, n) {
            let dist = SamplingDistribution::new(&scheme, n, Some(&mu)).map_err(err)?;
            let (m_e, m_c) = (dist.mu_as(&mu).map_err(err)?, dist.mu_as_closed_form(&mu).map_err(err)?);
            let (s_e, s_c) = (
                dist.sigma_star_as(&grads).map_err(err)?,
                dist.sigma_star_closed_form(&grads).map_err(err)?,
            );
            if !close(m_e, m_c, 1e-10) || !(close(s_e, s_c, 1e-10) || (s_e - s_c).abs() <= floor) {
                return Err(format!(
                    "{}: mu {m_e} vs {m_c}, sigma {s_e} vs {s_c}",
                    scheme.name()
                ));
            }
        }
        Ok(())
    });

    report.check("sampling", "weighted_cohort_sum_is_unbiased", 0..cases, |seed| {
        let mut rng = rng::seeded(seed);
        let n = rng.random_range(1..=6);
        let a = gaussian_vectors(&mut rng, n, 2);
        let mean = a.iter().fold(Vector::zeros(2), |s, x| s + x) / n as f64;
        let mu = random_mu(&mut rng, n);
        for scheme in all_schemes(&mut rng, n) {
            let dist = SamplingDistribution::new(&scheme, n, Some(&mu)).map_err(err)?;
            let mut acc = Vector::zeros(2);
            dist.visit_support(|c, p| {
                for &i in c {
                    acc += &a[i] * (p * dist.weight(i));
                }
            })
            .map_err(err)?;
            // The weights carry 1/n: E[sum w_i a_i] = (1/n) sum a_i.
            if (&acc - &mean).norm() > 1e-10 * (1.0 + mean.norm()) {
                return Err(format!("{}: E = {acc:?}, mean = {mean:?}", scheme.name()));
            }
        }
        Ok(())
    });

    report.check("sampling", "nice_variance_closed_form", 0..cases, |seed| {
        let mut rng = rng::seeded(seed);
        let n = rng.random_range(2..=7);
        let grads = centered_vectors(&mut rng, n, 3);
        let sigma1 = SamplingDistribution::new(&SamplingScheme::Nice { tau: 1 }, n, None)
            .and_then(|d| d.sigma_star_as(&grads))
            .map_err(err)?;
        for tau in 1..=n {
            let exact = SamplingDistribution::new(&SamplingScheme::Nice { tau }, n, None)
                .and_then(|d| d.sigma_star_as(&grads))
                .map_err(err)?;
            let closed = (hooks.nice_closed_form)(sigma1, n, tau);
            if (exact - closed).abs() > 1e-10 * exact.abs().max(closed.abs()) + 1e-14 * sigma1 {
                return Err(format!("n={n}, tau={tau}: enumerated {exact}, closed form {closed}"));
            }
        }
        Ok(())
    });

    report.check("sampling", "extreme_partitions_collapse", 0..cases, |seed| {
        let mut rng = rng::seeded(seed);
        let n = rng.random_range(2..=6);
        let grads = centered_vectors(&mut rng, n, 2);
        let mu = random_mu(&mut rng, n);
        let p = random_simplex(&mut rng, n);
        let one: Vec<Vec<usize>> = vec![(0..n).collect()];
        let singles: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        let pairs = [
            (
                SamplingScheme::Block { partition: one.clone(), q: vec![1.0] },
                SamplingScheme::Full,
            ),
            (
                SamplingScheme::Block { partition: singles.clone(), q: p.clone() },
                SamplingScheme::Nonuniform { p },
            ),
            (
                SamplingScheme::Stratified { partition: one },
                SamplingScheme::uniform_single(),
            ),
            (
                SamplingScheme::Stratified { partition: singles },
                SamplingScheme::Full,
            ),
        ];
        for (a, b) in pairs {
            let da = SamplingDistribution::new(&a, n, None).map_err(err)?;
            let db = SamplingDistribution::new(&b, n, None).map_err(err)?;
            let ca = da.constants(&mu, &grads).map_err(err)?;
            let cb = db.constants(&mu, &grads).map_err(err)?;
            if !close(ca.mu_as, cb.mu_as, 1e-12) || !close(ca.sigma_star_as_sq, cb.sigma_star_as_sq, 1e-12) {
                return Err(format!("{} vs {}: {ca:?} vs {cb:?}", a.name(), b.name()));
            }
        }
        Ok(())
    });

    report.check("sampling", "stratified_variance_bounds", 0..cases, |seed| {
        let mut rng = rng::seeded(seed);
        let n = rng.random_range(2..=9);
        let b = rng.random_range(1..=n);
        let grads = centered_vectors(&mut rng, n, 3);
        let partition = random_partition(&mut rng, n, b);
        let ss = SamplingDistribution::new(&SamplingScheme::Stratified { partition: partition.clone() }, n, None)
            .and_then(|d| d.sigma_star_as(&grads))
            .map_err(err)?;
        let (b1, b2) = ss_variance_upper_bound(&partition, &cluster_max_deviation(&partition, &grads));
        let slack = 1e-12 * (1.0 + b2);
        if ss <= b1 + slack && b1 <= b2 + slack {
            Ok(())
        } else {
            Err(format!("{ss} <= {b1} <= {b2} violated for {partition:?}"))
        }
    });

    report.check("sampling", "counterexample_values", 0..1, |_| {
        let (ss, nice, bs) = counterexample_values().map_err(err)?;
        if ss == 0.5 && nice == 1.0 / 3.0 && bs == 0.0 {
            Ok(())
        } else {
            Err(format!("got SS={ss}, NICE={nice}, BS={bs}"))
        }
    });
}

/// The four compass vectors `(0,1), (1,0), (0,-1), (-1,0)`.
pub fn compass() -> Vec<Vector> {
    [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)]
        .iter()
        .map(|&(a, b)| Vector::from_vec(vec![a, b]))
        .collect()
}

/// Stratified, NICE(2) and block variances of the compass instance, all with
/// the clustering `{0, 2}, {1, 3}` (opposite vectors together).
pub fn counterexample_values() -> Result<(f64, f64, f64), crate::sampling::SamplingError> {
    let g = compass();
    let partition = vec![vec![0, 2], vec![1, 3]];
    let ss = SamplingDistribution::new(&SamplingScheme::Stratified { partition: partition.clone() }, 4, None)?
        .sigma_star_as(&g)?;
    let nice = SamplingDistribution::new(&SamplingScheme::Nice { tau: 2 }, 4, None)?.sigma_star_as(&g)?;
    let bs = SamplingDistribution::new(
        &SamplingScheme::Block {
            partition,
            q: vec![0.5, 0.5],
        },
        4,
        None,
    )?
    .sigma_star_as(&g)?;
    Ok((ss, nice, bs))
}

fn counterexample_table() -> String {
    let (ss, nice, bs) = counterexample_values().unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    format!(
        "compass counterexample, clusters {{0,2}},{{1,3}}\n  scheme      sigma^2\n  stratified  {ss:.17}\n  nice(2)     {nice:.17}\n  block       {bs:.17}"
    )
}

fn random_spd(rng: &mut Rng, d: usize, floor: f64) -> Matrix {
    let m = Matrix::from_fn(d, d, |_, _| standard_normal(rng));
    &m * m.transpose() / d as f64 + Matrix::identity(d, d) * floor
}

fn prox_checks(report: &mut Report, cases: u64) {
    report.check("prox", "bfgs_terminates_on_quadratics", 0..cases, |seed| {
        let mut rng = rng::seeded(seed);
        let d = rng.random_range(1..=6);
        let obj = QuadraticObjective::new(
            random_spd(&mut rng, d, 0.1),
            Vector::from_fn(d, |_, _| standard_normal(&mut rng)),
        )
        .map_err(err)?;
        let x = Vector::from_fn(d, |_, _| standard_normal(&mut rng));
        let gamma = 10f64.powf(rng.random_range(-1.0..3.0));
        let exact = exact_prox_quadratic(&obj, &x, gamma).map_err(err)?;
        let p = ProxProblem::new(&obj, x, gamma).map_err(err)?;
        let z = solve_prox(&p, &SolverSpec::with_rounds(SolverKind::Bfgs, d + 1))
            .map_err(err)?
            .z;
        let e = (&z - &exact).norm();
        if e <= 1e-8 * (1.0 + exact.norm()) {
            Ok(())
        } else {
            Err(format!("d={d}, gamma={gamma}: error {e}"))
        }
    });

    report.check("prox", "certificate_bounds_error", 0..cases, |seed| {
        let mut rng = rng::seeded(seed);
        let d = rng.random_range(1..=5);
        let obj = QuadraticObjective::new(
            random_spd(&mut rng, d, 0.2),
            Vector::from_fn(d, |_, _| standard_normal(&mut rng)),
        )
        .map_err(err)?;
        let x = Vector::from_fn(d, |_, _| standard_normal(&mut rng));
        let gamma = 10f64.powf(rng.random_range(-1.0..2.0));
        let exact = exact_prox_quadratic(&obj, &x, gamma).map_err(err)?;
        let p = ProxProblem::new(&obj, x, gamma).map_err(err)?;
        let k = rng.random_range(1..5);
        let z = solve_prox(&p, &SolverSpec::with_rounds(SolverKind::Gd { alpha: None }, k))
            .map_err(err)?
            .z;
        let b = certify_inexactness(&p, &z);
        let e = (&z - &exact).norm_squared();
        if e <= b * (1.0 + 1e-9) + 1e-24 {
            Ok(())
        } else {
            Err(format!("true error {e} above certificate {b}"))
        }
    });
}

fn theory_checks(report: &mut Report, cases: u64) {
    report.check("theory", "bound_decreasing_to_neighborhood", 0..cases, |seed| {
        let mut rng = rng::seeded(seed);
        let gamma = 10f64.powf(rng.random_range(-2.0..3.0));
        let mu = 10f64.powf(rng.random_range(-2.0..1.0));
        let sigma = rng.random_range(0.0..5.0);
        let r0 = rng.random_range(0.0..10.0);
        let nb = neighborhood(gamma, mu, sigma);
        if nb > sigma / (mu * mu) * (1.0 + 1e-12) {
            return Err(format!("neighborhood {nb} above sigma^2/mu^2"));
        }
        let mut prev = f64::INFINITY;
        for t in 0..30 {
            let b = convergence_bound(gamma, mu, sigma, r0, t);
            if b > prev * (1.0 + 1e-15) || b < nb * (1.0 - 1e-12) {
                return Err(format!("t={t}: bound {b}, previous {prev}, floor {nb}"));
            }
            prev = b;
        }
        Ok(())
    });
}

fn algorithm_checks(report: &mut Report, cases: u64) {
    report.check("algorithms", "same_seed_same_trajectory", 0..cases, |seed| {
        let fed = Federation::from_quadratics(&synthetic_quadratic(5, 3, seed, 1.0)).map_err(err)?;
        let (xs, _) = solve_xstar(&fed, XSTAR_TOL).map_err(err)?;
        let mut cfg = RunConfig::new(AlgorithmKind::SppmAs, SamplingScheme::Nice { tau: 2 }, 8);
        cfg.seed = seed;
        cfg.x0 = Some(vec![1.0; 3]);
        let a = run(&cfg, &fed, &xs).map_err(err)?.to_csv();
        let b = run(&cfg, &fed, &xs).map_err(err)?.to_csv();
        if a == b {
            Ok(())
        } else {
            Err("two runs of one config differ".into())
        }
    });
}

fn full_checks(report: &mut Report) {
    report.check("sampling", "optimal_clustering_beats_nice", 0..40, |seed| {
        let mut rng = rng::seeded(seed);
        let b = if seed % 2 == 0 { 2 } else { 3 };
        let n = b * b;
        let grads = centered_vectors(&mut rng, n, 3);
        let (_, best) = optimal_ss_clustering(&grads, b).map_err(err)?;
        let nice = SamplingDistribution::new(&SamplingScheme::Nice { tau: b }, n, None)
            .and_then(|d| d.sigma_star_as(&grads))
            .map_err(err)?;
        if best <= nice * (1.0 + 1e-12) {
            Ok(())
        } else {
            Err(format!("n={n}: optimal stratified {best} > nice {nice}"))
        }
    });

    report.check("theory", "convergence_bound_monte_carlo", 0..3, |seed| {
        let fed = Federation::from_quadratics(&synthetic_quadratic(8, 5, seed, 1.0)).map_err(err)?;
        let (xs, _) = solve_xstar(&fed, XSTAR_TOL).map_err(err)?;
        let scheme = SamplingScheme::Nice { tau: 2 };
        let dist = SamplingDistribution::new(&scheme, 8, None).map_err(err)?;
        let c = dist
            .constants(&fed.strong_convexities(), &fed.gradients(&xs))
            .map_err(err)?;
        let mut cfg = RunConfig::new(AlgorithmKind::SppmAs, scheme, 15);
        cfg.gamma = 1.0;
        cfg.x0 = Some(vec![1.0; 5]);
        let r0 = (Vector::from_vec(vec![1.0; 5]) - &xs).norm_squared();
        let runs = 300;
        let mut sum = vec![0.0; 16];
        let mut sq = vec![0.0; 16];
        for s in 0..runs {
            cfg.seed = 1000 * seed + s;
            for (t, v) in run(&cfg, &fed, &xs).map_err(err)?.sq_dists().into_iter().enumerate() {
                sum[t] += v;
                sq[t] += v * v;
            }
        }
        for t in 0..16 {
            let m = sum[t] / runs as f64;
            let se = ((sq[t] / runs as f64 - m * m).max(0.0) / runs as f64).sqrt();
            let bound = convergence_bound(1.0, c.mu_as, c.sigma_star_as_sq, r0, t);
            if m > bound + 3.0 * se + 1e-12 {
                return Err(format!("t={t}: mean {m} > bound {bound} + 3 SE ({se})"));
            }
        }
        Ok(())
    });
    report.tables.push(counterexample_table());
}

/// Run the suite.
pub fn verify(level: Level, hooks: &Hooks) -> Report {
    let mut report = Report::default();
    let cases = match level {
        Level::Quick => 60,
        Level::Full => 400,
    };
    sampling_checks(&mut report, hooks, cases);
    prox_checks(&mut report, cases);
    theory_checks(&mut report, cases);
    algorithm_checks(&mut report, cases.min(20));
    if level == Level::Full {
        full_checks(&mut report);
    }
    report
}
