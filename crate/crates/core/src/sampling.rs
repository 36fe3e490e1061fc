//! Client sampling distributions and their convergence constants.
//!
//! A distribution is stored structurally (scheme plus marginals) and its
//! support is enumerated lazily, so draws never need the support even when it
//! is astronomically large. Constants are computed by exact enumeration when
//! the support fits under [`ENUMERATION_CAP`] and by closed forms otherwise.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::Vector;

/// Largest support enumerated explicitly.
pub const ENUMERATION_CAP: usize = 2_000_000;

/// Tolerance on probability sums.
pub const PROB_TOL: f64 = 1e-12;

/// Largest population searched exhaustively for the optimal stratified clustering.
pub const CLUSTERING_SEARCH_MAX_N: usize = 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("sampling.{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("support has {size:.3e} atoms, above the enumeration cap of {cap}")]
    CapExceeded { size: f64, cap: usize },
    #[error("expected {expected} client vectors, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

fn invalid(field: &'static str, message: impl Into<String>) -> SamplingError {
    SamplingError::Invalid {
        field,
        message: message.into(),
    }
}

/// How clients are selected each round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingScheme {
    /// Every client participates.
    Full,
    /// One client, drawn with probability `p_i`.
    Nonuniform { p: Vec<f64> },
    /// One client, drawn with probability proportional to `mu_i`.
    Importance,
    /// A uniformly random subset of size `tau`.
    Nice { tau: usize },
    /// Block `C_j` as a whole with probability `q_j`.
    Block { partition: Vec<Vec<usize>>, q: Vec<f64> },
    /// One uniformly random client from every block.
    Stratified { partition: Vec<Vec<usize>> },
}

impl SamplingScheme {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingScheme::Full => "full",
            SamplingScheme::Nonuniform { .. } => "nonuniform",
            SamplingScheme::Importance => "importance",
            SamplingScheme::Nice { .. } => "nice",
            SamplingScheme::Block { .. } => "block",
            SamplingScheme::Stratified { .. } => "stratified",
        }
    }

    /// Uniform single-client sampling (`tau = 1` nice sampling).
    pub fn uniform_single() -> Self {
        SamplingScheme::Nice { tau: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Law {
    Full,
    Single { p: Vec<f64>, cdf: Vec<f64> },
    Nice { tau: usize },
    Block { blocks: Vec<Vec<usize>>, q: Vec<f64>, cdf: Vec<f64> },
    Stratified { blocks: Vec<Vec<usize>> },
}

/// A sampled cohort with its unbiasing weights `w_i = 1 / (n p_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl Cohort {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `sum_i w_i v_i` over the cohort, in ascending client order.
    pub fn weighted_sum(&self, vectors: &[Vector]) -> Vector {
        let mut acc = Vector::zeros(vectors[self.indices[0]].len());
        for (&i, &w) in self.indices.iter().zip(&self.weights) {
            acc.axpy(w, &vectors[i], 1.0);
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstantsMethod {
    ExactEnumeration,
    ClosedForm,
    MonteCarlo { se: f64 },
}

/// `mu_AS` and `sigma^2_{*,AS}` for a distribution at a given optimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConstants {
    pub mu_as: f64,
    pub sigma_star_as_sq: f64,
    pub method: ConstantsMethod,
}

/// A proper, nonvacuous sampling over `n` clients.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    n: usize,
    law: Law,
    marginals: Vec<f64>,
    scheme: SamplingScheme,
}

fn check_probabilities(field: &'static str, p: &[f64], len: usize) -> Result<(), SamplingError> {
    if p.len() != len {
        return Err(invalid(
            field,
            format!("expected {len} probabilities, got {}", p.len()),
        ));
    }
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
        return Err(invalid(
            field,
            format!("entry {i} is {v}; every probability must be positive"),
        ));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(invalid(field, format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

fn check_partition(partition: &[Vec<usize>], n: usize) -> Result<Vec<Vec<usize>>, SamplingError> {
    if partition.is_empty() {
        return Err(invalid("partition", "partition has no blocks"));
    }
    let mut seen = vec![false; n];
    let mut blocks = Vec::with_capacity(partition.len());
    for (j, block) in partition.iter().enumerate() {
        if block.is_empty() {
            return Err(invalid("partition", format!("block {j} is empty")));
        }
        for &i in block {
            if i >= n {
                return Err(invalid(
                    "partition",
                    format!("block {j} names client {i}, but n = {n}"),
                ));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(invalid("partition", format!("client {i} appears twice")));
            }
        }
        let mut b = block.clone();
        b.sort_unstable();
        blocks.push(b);
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(invalid("partition", format!("client {i} is not covered")));
    }
    Ok(blocks)
}

fn cumulative(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, &v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

fn categorical(cdf: &[f64], rng: &mut Rng) -> usize {
    let u = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// `C(n, k)` as a float (exact for the sizes we enumerate).
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Advance `idx` to the next k-combination of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    for pos in (0..k).rev() {
        if idx[pos] < n - k + pos {
            idx[pos] += 1;
            for q in pos + 1..k {
                idx[q] = idx[q - 1] + 1;
            }
            return true;
        }
    }
    false
}

impl SamplingDistribution {
    /// Validate `scheme` for `n` clients. `mu` is required for importance sampling.
    pub fn new(scheme: &SamplingScheme, n: usize, mu: Option<&[f64]>) -> Result<Self, SamplingError> {
        if n == 0 {
            return Err(invalid("n", "population is empty"));
        }
        let (law, marginals) = match scheme {
            SamplingScheme::Full => (Law::Full, vec![1.0; n]),
            SamplingScheme::Nonuniform { p } => {
                check_probabilities("p", p, n)?;
                (
                    Law::Single {
                        p: p.clone(),
                        cdf: cumulative(p),
                    },
                    p.clone(),
                )
            }
            SamplingScheme::Importance => {
                let mu = mu.ok_or_else(|| {
                    invalid("type", "importance sampling needs the clients' strong-convexity constants")
                })?;
                if mu.len() != n {
                    return Err(SamplingError::LengthMismatch {
                        expected: n,
                        got: mu.len(),
                    });
                }
                if mu.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
                    return Err(invalid("type", "importance weights mu_i must be positive"));
                }
                let total: f64 = mu.iter().sum();
                let p: Vec<f64> = mu.iter().map(|m| m / total).collect();
                (
                    Law::Single {
                        cdf: cumulative(&p),
                        p: p.clone(),
                    },
                    p,
                )
            }
            SamplingScheme::Nice { tau } => {
                if *tau == 0 || *tau > n {
                    return Err(invalid("tau", format!("tau must lie in 1..={n}, got {tau}")));
                }
                (Law::Nice { tau: *tau }, vec![*tau as f64 / n as f64; n])
            }
            SamplingScheme::Block { partition, q } => {
                let blocks = check_partition(partition, n)?;
                check_probabilities("q", q, blocks.len())?;
                let mut marginals = vec![0.0; n];
                for (block, &qj) in blocks.iter().zip(q) {
                    for &i in block {
                        marginals[i] = qj;
                    }
                }
                (
                    Law::Block {
                        blocks,
                        cdf: cumulative(q),
                        q: q.clone(),
                    },
                    marginals,
                )
            }
            SamplingScheme::Stratified { partition } => {
                let blocks = check_partition(partition, n)?;
                let mut marginals = vec![0.0; n];
                for block in &blocks {
                    for &i in block {
                        marginals[i] = 1.0 / block.len() as f64;
                    }
                }
                (Law::Stratified { blocks }, marginals)
            }
        };
        Ok(Self {
            n,
            law,
            marginals,
            scheme: scheme.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn scheme(&self) -> &SamplingScheme {
        &self.scheme
    }

    /// `p_i = P(i in S)`.
    pub fn marginals(&self) -> &[f64] {
        &self.marginals
    }

    /// `w_i = 1 / (n p_i)`.
    pub fn weight(&self, i: usize) -> f64 {
        1.0 / (self.n as f64 * self.marginals[i])
    }

    /// Number of atoms in the support (as a float; may exceed `usize`).
    pub fn support_size(&self) -> f64 {
        match &self.law {
            Law::Full => 1.0,
            Law::Single { p, .. } => p.len() as f64,
            Law::Nice { tau } => binomial(self.n, *tau),
            Law::Block { blocks, .. } => blocks.len() as f64,
            Law::Stratified { blocks } => blocks.iter().map(|b| b.len() as f64).product(),
        }
    }

    pub fn within_cap(&self) -> bool {
        self.support_size() <= ENUMERATION_CAP as f64
    }

    fn require_cap(&self) -> Result<(), SamplingError> {
        if self.within_cap() {
            Ok(())
        } else {
            Err(SamplingError::CapExceeded {
                size: self.support_size(),
                cap: ENUMERATION_CAP,
            })
        }
    }

    /// Attach weights to a set of client indices.
    pub fn cohort_for(&self, mut indices: Vec<usize>) -> Cohort {
        indices.sort_unstable();
        let weights = indices.iter().map(|&i| self.weight(i)).collect();
        Cohort { indices, weights }
    }

    /// Visit every support atom `(C, p_C)`.
    pub fn visit_support(&self, mut f: impl FnMut(&[usize], f64)) -> Result<(), SamplingError> {
        self.require_cap()?;
        match &self.law {
            Law::Full => f(&(0..self.n).collect::<Vec<_>>(), 1.0),
            Law::Single { p, .. } => {
                for (i, &pi) in p.iter().enumerate() {
                    f(&[i], pi);
                }
            }
            Law::Nice { tau } => {
                let pc = 1.0 / binomial(self.n, *tau);
                let mut idx: Vec<usize> = (0..*tau).collect();
                loop {
                    f(&idx, pc);
                    if !next_combination(&mut idx, self.n) {
                        break;
                    }
                }
            }
            Law::Block { blocks, q, .. } => {
                for (block, &qj) in blocks.iter().zip(q) {
                    f(block, qj);
                }
            }
            Law::Stratified { blocks } => {
                let pc: f64 = blocks.iter().map(|b| 1.0 / b.len() as f64).product();
                let mut pos = vec![0usize; blocks.len()];
                let mut cohort = vec![0usize; blocks.len()];
                loop {
                    for (j, block) in blocks.iter().enumerate() {
                        cohort[j] = block[pos[j]];
                    }
                    let mut sorted = cohort.clone();
                    sorted.sort_unstable();
                    f(&sorted, pc);
                    let mut j = blocks.len();
                    loop {
                        if j == 0 {
                            return Ok(());
                        }
                        j -= 1;
                        pos[j] += 1;
                        if pos[j] < blocks[j].len() {
                            break;
                        }
                        pos[j] = 0;
                    }
                }
            }
        }
        Ok(())
    }

    /// The explicit support `{(C, p_C)}`.
    pub fn support(&self) -> Result<Vec<(Vec<usize>, f64)>, SamplingError> {
        let mut out = Vec::new();
        self.visit_support(|c, p| out.push((c.to_vec(), p)))?;
        Ok(out)
    }

    /// Draw a cohort. The support is never materialized.
    pub fn draw(&self, rng: &mut Rng) -> Cohort {
        let indices = match &self.law {
            Law::Full => (0..self.n).collect(),
            Law::Single { cdf, .. } => vec![categorical(cdf, rng)],
            Law::Nice { tau } => rand::seq::index::sample(rng, self.n, *tau).into_vec(),
            Law::Block { blocks, cdf, .. } => blocks[categorical(cdf, rng)].clone(),
            Law::Stratified { blocks } => blocks
                .iter()
                .map(|b| b[rng.random_range(0..b.len())])
                .collect(),
        };
        self.cohort_for(indices)
    }

    fn check_len<T>(&self, v: &[T]) -> Result<(), SamplingError> {
        if v.len() != self.n {
            return Err(SamplingError::LengthMismatch {
                expected: self.n,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `mu_AS = min_C sum_{i in C} mu_i / (n p_i)` by enumeration, with the
    /// minimizing cohort (lexicographically smallest among ties).
    pub fn mu_as_argmin(&self, mu: &[f64]) -> Result<(f64, Vec<usize>), SamplingError> {
        self.check_len(mu)?;
        let mut best = (f64::INFINITY, Vec::new());
        self.visit_support(|c, _| {
            let v: f64 = c.iter().map(|&i| mu[i] * self.weight(i)).sum();
            if v < best.0 || (v == best.0 && c < best.1.as_slice()) {
                best = (v, c.to_vec());
            }
        })?;
        Ok(best)
    }

    pub fn mu_as(&self, mu: &[f64]) -> Result<f64, SamplingError> {
        self.mu_as_argmin(mu).map(|(v, _)| v)
    }

    /// `mu_AS` without enumeration. Every scheme has a closed form.
    pub fn mu_as_closed_form(&self, mu: &[f64]) -> Result<f64, SamplingError> {
        self.check_len(mu)?;
        let n = self.n as f64;
        Ok(match &self.law {
            Law::Full => mu.iter().sum::<f64>() / n,
            Law::Single { p, .. } => mu
                .iter()
                .zip(p)
                .map(|(m, pi)| m / (n * pi))
                .fold(f64::INFINITY, f64::min),
            Law::Nice { tau } => {
                let mut sorted = mu.to_vec();
                sorted.sort_by(f64::total_cmp);
                sorted[..*tau].iter().sum::<f64>() / *tau as f64
            }
            Law::Block { blocks, q, .. } => blocks
                .iter()
                .zip(q)
                .map(|(b, qj)| b.iter().map(|&i| mu[i]).sum::<f64>() / (n * qj))
                .fold(f64::INFINITY, f64::min),
            Law::Stratified { blocks } => blocks
                .iter()
                .map(|b| {
                    let min = b.iter().map(|&i| mu[i]).fold(f64::INFINITY, f64::min);
                    b.len() as f64 / n * min
                })
                .sum(),
        })
    }

    fn warn_if_not_stationary(&self, grads: &[Vector]) {
        let mut mean = Vector::zeros(grads[0].len());
        for g in grads {
            mean += g;
        }
        mean /= grads.len() as f64;
        let scale = grads.iter().map(|g| g.norm()).fold(0.0, f64::max);
        if mean.norm() > 1e-6 * scale {
            log::warn!(
                "client gradients do not average to zero (|mean| = {:.3e}, max |g_i| = {:.3e}); \
                 the point is not a minimizer",
                mean.norm(),
                scale
            );
        }
    }

    /// `sigma^2_{*,AS} = sum_C p_C || sum_{i in C} g_i / (n p_i) ||^2` by enumeration.
    pub fn sigma_star_as(&self, grads: &[Vector]) -> Result<f64, SamplingError> {
        self.check_len(grads)?;
        self.warn_if_not_stationary(grads);
        let d = grads[0].len();
        let mut total = 0.0;
        let mut acc = Vector::zeros(d);
        self.visit_support(|c, pc| {
            acc.fill(0.0);
            for &i in c {
                acc.axpy(self.weight(i), &grads[i], 1.0);
            }
            total += pc * acc.norm_squared();
        })?;
        Ok(total)
    }

    /// `sigma^2_{*,AS}` without enumeration.
    pub fn sigma_star_closed_form(&self, grads: &[Vector]) -> Result<f64, SamplingError> {
        self.check_len(grads)?;
        let n = self.n as f64;
        let d = grads[0].len();
        let mut mean = Vector::zeros(d);
        for g in grads {
            mean += g;
        }
        mean /= n;
        Ok(match &self.law {
            Law::Full => mean.norm_squared(),
            Law::Single { p, .. } => grads
                .iter()
                .zip(p)
                .map(|(g, pi)| g.norm_squared() / (n * n * pi))
                .sum(),
            Law::Nice { tau } => {
                let spread = grads.iter().map(|g| (g - &mean).norm_squared()).sum::<f64>() / n;
                nice_variance(mean.norm_squared(), spread, self.n, *tau)
            }
            Law::Block { blocks, q, .. } => blocks
                .iter()
                .zip(q)
                .map(|(b, qj)| {
                    let mut s = Vector::zeros(d);
                    for &i in b {
                        s += &grads[i];
                    }
                    qj * (s / (n * qj)).norm_squared()
                })
                .sum(),
            Law::Stratified { blocks } => {
                let within: f64 = blocks
                    .iter()
                    .map(|b| {
                        let m = b.len() as f64;
                        let mut cm = Vector::zeros(d);
                        for &i in b {
                            cm += &grads[i];
                        }
                        cm /= m;
                        let var = b.iter().map(|&i| (&grads[i] - &cm).norm_squared()).sum::<f64>() / m;
                        (m / n).powi(2) * var
                    })
                    .sum();
                mean.norm_squared() + within
            }
        })
    }

    /// Monte-Carlo estimate of `sigma^2_{*,AS}` and its standard error.
    pub fn sigma_star_monte_carlo(&self, grads: &[Vector], draws: usize, rng: &mut Rng) -> Result<(f64, f64), SamplingError> {
        self.check_len(grads)?;
        if draws < 2 {
            return Err(invalid("draws", "need at least two Monte-Carlo draws"));
        }
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..draws {
            let v = self.draw(rng).weighted_sum(grads).norm_squared();
            sum += v;
            sum_sq += v * v;
        }
        let k = draws as f64;
        let mean = sum / k;
        let var = ((sum_sq - k * mean * mean) / (k - 1.0)).max(0.0);
        Ok((mean, (var / k).sqrt()))
    }

    /// Both constants: exact enumeration when the support fits, closed form otherwise.
    pub fn constants(&self, mu: &[f64], grads: &[Vector]) -> Result<SamplingConstants, SamplingError> {
        if self.within_cap() {
            Ok(SamplingConstants {
                mu_as: self.mu_as(mu)?,
                sigma_star_as_sq: self.sigma_star_as(grads)?,
                method: ConstantsMethod::ExactEnumeration,
            })
        } else {
            self.warn_if_not_stationary(grads);
            Ok(SamplingConstants {
                mu_as: self.mu_as_closed_form(mu)?,
                sigma_star_as_sq: self.sigma_star_closed_form(grads)?,
                method: ConstantsMethod::ClosedForm,
            })
        }
    }

    /// Constants with `sigma^2` estimated by simulation.
    pub fn constants_monte_carlo(
        &self,
        mu: &[f64],
        grads: &[Vector],
        draws: usize,
        rng: &mut Rng,
    ) -> Result<SamplingConstants, SamplingError> {
        let (sigma, se) = self.sigma_star_monte_carlo(grads, draws, rng)?;
        Ok(SamplingConstants {
            mu_as: self.mu_as_closed_form(mu)?,
            sigma_star_as_sq: sigma,
            method: ConstantsMethod::MonteCarlo { se },
        })
    }
}

/// `E|| (1/tau) sum_{i in S} a_i ||^2` for uniform tau-subsets, given
/// `|mean|^2` and the spread `(1/n) sum |a_i - mean|^2`.
fn nice_variance(mean_sq: f64, spread: f64, n: usize, tau: usize) -> f64 {
    if n == 1 {
        return mean_sq;
    }
    let (n, tau) = (n as f64, tau as f64);
    mean_sq + (n - tau) / (tau * (n - 1.0)) * spread
}

/// `sigma^2_NICE(tau) = ((n/tau - 1) / (n - 1)) sigma^2_NICE(1)`.
pub fn sigma_nice_closed_form(sigma1: f64, n: usize, tau: usize) -> f64 {
    assert!(n >= 2 && (1..=n).contains(&tau), "need n >= 2 and 1 <= tau <= n");
    let (n, tau) = (n as f64, tau as f64);
    (n / tau - 1.0) / (n - 1.0) * sigma1
}

/// `sigma_j^2 = max_{i in C_j} ||g_i - mean_{C_j} g||^2` for every block.
pub fn cluster_max_deviation(partition: &[Vec<usize>], grads: &[Vector]) -> Vec<f64> {
    partition
        .iter()
        .map(|b| {
            let mut mean = Vector::zeros(grads[b[0]].len());
            for &i in b {
                mean += &grads[i];
            }
            mean /= b.len() as f64;
            b.iter()
                .map(|&i| (&grads[i] - &mean).norm_squared())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Upper bounds on the stratified variance:
/// `((b/n^2) sum_j |C_j|^2 sigma_j^2, b max_j sigma_j^2)`.
pub fn ss_variance_upper_bound(partition: &[Vec<usize>], per_cluster_sigma_sq: &[f64]) -> (f64, f64) {
    assert_eq!(partition.len(), per_cluster_sigma_sq.len());
    let b = partition.len() as f64;
    let n: usize = partition.iter().map(Vec::len).sum();
    let n = n as f64;
    let weighted: f64 = partition
        .iter()
        .zip(per_cluster_sigma_sq)
        .map(|(c, s)| (c.len() as f64).powi(2) * s)
        .sum();
    let max = per_cluster_sigma_sq.iter().copied().fold(0.0, f64::max);
    (b / (n * n) * weighted, b * max)
}

/// All partitions of `0..n` into `n / size` blocks of `size`, in canonical
/// form (sorted blocks, ordered by first element), lexicographically.
pub fn uniform_partitions(n: usize, size: usize) -> Vec<Vec<Vec<usize>>> {
    fn rec(rest: &[usize], size: usize, current: &mut Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>) {
        if rest.is_empty() {
            out.push(current.clone());
            return;
        }
        let head = rest[0];
        let tail = &rest[1..];
        let k = size - 1;
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let mut block = vec![head];
            block.extend(idx.iter().map(|&j| tail[j]));
            let remaining: Vec<usize> = tail
                .iter()
                .enumerate()
                .filter(|(j, _)| !idx.contains(j))
                .map(|(_, &v)| v)
                .collect();
            current.push(block);
            rec(&remaining, size, current, out);
            current.pop();
            if k == 0 || !next_combination(&mut idx, tail.len()) {
                break;
            }
        }
    }
    assert!(size > 0 && n % size == 0, "size must divide n");
    let mut out = Vec::new();
    rec(&(0..n).collect::<Vec<_>>(), size, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive search for the clustering into `b` blocks of size `b` that
/// minimizes the stratified variance. Ties go to the lexicographically
/// smallest partition.
pub fn optimal_ss_clustering(grads: &[Vector], b: usize) -> Result<(Vec<Vec<usize>>, f64), SamplingError> {
    let n = grads.len();
    if b == 0 || b * b != n {
        return Err(invalid(
            "partition",
            format!("uniform clustering needs n = b^2, got n = {n}, b = {b}"),
        ));
    }
    if n > CLUSTERING_SEARCH_MAX_N {
        return Err(SamplingError::CapExceeded {
            size: uniform_partitions_count(n, b),
            cap: CLUSTERING_SEARCH_MAX_N,
        });
    }
    let mut best: Option<(Vec<Vec<usize>>, f64)> = None;
    for partition in uniform_partitions(n, b) {
        let dist = SamplingDistribution::new(
            &SamplingScheme::Stratified {
                partition: partition.clone(),
            },
            n,
            None,
        )?;
        let v = dist.sigma_star_as(grads)?;
        if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
            best = Some((partition, v));
        }
    }
    Ok(best.expect("at least one partition"))
}

/// Number of partitions of `n` items into blocks of `size`.
pub fn uniform_partitions_count(n: usize, size: usize) -> f64 {
    let blocks = n / size;
    let mut count = 1.0;
    let mut left = n;
    for _ in 0..blocks {
        count *= binomial(left - 1, size - 1);
        left -= size;
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, standard_normal};
    use proptest::prelude::*;

    fn v2(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    /// The four unit vectors of the counterexample; mean zero.
    fn compass() -> Vec<Vector> {
        vec![v2(0.0, 1.0), v2(1.0, 0.0), v2(0.0, -1.0), v2(-1.0, 0.0)]
    }

    fn dist(scheme: SamplingScheme, n: usize) -> SamplingDistribution {
        SamplingDistribution::new(&scheme, n, None).unwrap()
    }

    fn centered(n: usize, d: usize, seed: u64) -> Vec<Vector> {
        let mut rng = rng::seeded(seed);
        let mut g: Vec<Vector> = (0..n)
            .map(|_| Vector::from_fn(d, |_, _| standard_normal(&mut rng)))
            .collect();
        let mean = g.iter().fold(Vector::zeros(d), |a, x| a + x) / n as f64;
        for x in &mut g {
            *x -= &mean;
        }
        g
    }

    fn check_marginals(d: &SamplingDistribution) {
        let mut p = vec![0.0; d.n()];
        let mut total = 0.0;
        d.visit_support(|c, pc| {
            assert!(!c.is_empty());
            total += pc;
            for &i in c {
                p[i] += pc;
            }
        })
        .unwrap();
        assert!((total - 1.0).abs() <= PROB_TOL, "{total}");
        for (a, b) in p.iter().zip(d.marginals()) {
            assert!((a - b).abs() <= PROB_TOL, "{a} vs {b}");
        }
    }

    #[test]
    fn full_support() {
        let d = dist(SamplingScheme::Full, 3);
        assert_eq!(d.support().unwrap(), vec![(vec![0, 1, 2], 1.0)]);
        assert_eq!(d.marginals(), &[1.0, 1.0, 1.0]);
        assert_eq!(d.draw(&mut rng::seeded(0)).indices(), &[0, 1, 2]);
    }

    #[test]
    fn nice_support() {
        let d = dist(SamplingScheme::Nice { tau: 2 }, 3);
        let s = d.support().unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|(_, p)| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(d.marginals().iter().all(|p| (p - 2.0 / 3.0).abs() < 1e-15));
        check_marginals(&d);
    }

    #[test]
    fn stratified_support_is_cross_product() {
        let d = dist(
            SamplingScheme::Stratified {
                partition: vec![vec![0, 1], vec![2, 3]],
            },
            4,
        );
        let mut cohorts: Vec<Vec<usize>> = d.support().unwrap().into_iter().map(|(c, p)| {
            assert_eq!(p, 0.25);
            c
        }).collect();
        cohorts.sort();
        assert_eq!(cohorts, vec![vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3]]);
        assert_eq!(d.marginals(), &[0.5; 4]);
    }

    #[test]
    fn invalid_schemes_are_rejected_with_field() {
        let bad_q = SamplingDistribution::new(
            &SamplingScheme::Block {
                partition: vec![vec![0], vec![1]],
                q: vec![1.0, 0.0],
            },
            2,
            None,
        )
        .unwrap_err();
        assert!(matches!(bad_q, SamplingError::Invalid { field: "q", .. }));
        let bad_tau = SamplingDistribution::new(&SamplingScheme::Nice { tau: 4 }, 3, None).unwrap_err();
        assert!(matches!(bad_tau, SamplingError::Invalid { field: "tau", .. }));
        let bad_p = SamplingDistribution::new(&SamplingScheme::Nonuniform { p: vec![0.5, 0.4] }, 2, None)
            .unwrap_err();
        assert!(matches!(bad_p, SamplingError::Invalid { field: "p", .. }));
        let overlap = SamplingDistribution::new(
            &SamplingScheme::Stratified {
                partition: vec![vec![0, 1], vec![1]],
            },
            2,
            None,
        )
        .unwrap_err();
        assert!(matches!(overlap, SamplingError::Invalid { field: "partition", .. }));
        let uncovered = SamplingDistribution::new(
            &SamplingScheme::Stratified {
                partition: vec![vec![0]],
            },
            2,
            None,
        )
        .unwrap_err();
        assert!(matches!(uncovered, SamplingError::Invalid { field: "partition", .. }));
        assert!(SamplingDistribution::new(&SamplingScheme::Importance, 2, None).is_err());
    }

    #[test]
    fn scheme_json_shape() {
        let s: SamplingScheme = serde_json::from_str(r#"{"type":"nice","tau":3}"#).unwrap();
        assert_eq!(s, SamplingScheme::Nice { tau: 3 });
        let s: SamplingScheme =
            serde_json::from_str(r#"{"type":"block","partition":[[0],[1]],"q":[0.5,0.5]}"#).unwrap();
        assert!(matches!(s, SamplingScheme::Block { .. }));
        assert!(serde_json::from_str::<SamplingScheme>(r#"{"type":"nice","tau":3,"x":1}"#).is_err());
    }

    #[test]
    fn nice_single_draw_frequency() {
        let d = dist(SamplingScheme::Nice { tau: 1 }, 2);
        let mut rng = rng::seeded(42);
        let hits = (0..100_000).filter(|_| d.draw(&mut rng).indices() == [0]).count();
        let freq = hits as f64 / 1e5;
        assert!((freq - 0.5).abs() < 0.01, "{freq}");
    }

    #[test]
    fn draws_follow_support_law() {
        let d = dist(
            SamplingScheme::Block {
                partition: vec![vec![0, 2], vec![1], vec![3]],
                q: vec![0.2, 0.5, 0.3],
            },
            4,
        );
        let mut rng = rng::seeded(3);
        let mut counts = [0usize; 3];
        for _ in 0..60_000 {
            match d.draw(&mut rng).indices() {
                [0, 2] => counts[0] += 1,
                [1] => counts[1] += 1,
                [3] => counts[2] += 1,
                other => panic!("unexpected cohort {other:?}"),
            }
        }
        for (c, q) in counts.iter().zip([0.2, 0.5, 0.3]) {
            let f = *c as f64 / 60_000.0;
            let se = (q * (1.0 - q) / 60_000.0f64).sqrt();
            assert!((f - q).abs() < 5.0 * se, "{f} vs {q}");
        }
    }

    #[test]
    fn mu_as_examples() {
        assert!((dist(SamplingScheme::Full, 4).mu_as(&[0.1; 4]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(dist(SamplingScheme::Nice { tau: 1 }, 2).mu_as(&[1.0, 3.0]).unwrap(), 1.0);
        let (v, c) = dist(SamplingScheme::Nice { tau: 2 }, 3)
            .mu_as_argmin(&[1.0, 2.0, 6.0])
            .unwrap();
        assert_eq!(v, 1.5);
        assert_eq!(c, vec![0, 1]);
    }

    #[test]
    fn mu_as_ties_pick_smallest_cohort() {
        let (_, c) = dist(SamplingScheme::Nice { tau: 2 }, 4)
            .mu_as_argmin(&[1.0; 4])
            .unwrap();
        assert_eq!(c, vec![0, 1]);
    }

    #[test]
    fn sigma_examples() {
        let g = vec![v2(1.0, 0.0), v2(-1.0, 0.0)];
        assert_eq!(dist(SamplingScheme::Nice { tau: 1 }, 2).sigma_star_as(&g).unwrap(), 1.0);
        let g = centered(5, 3, 1);
        assert!(dist(SamplingScheme::Full, 5).sigma_star_as(&g).unwrap() < 1e-28);
        assert!(dist(SamplingScheme::Nice { tau: 5 }, 5).sigma_star_as(&g).unwrap() < 1e-28);
    }

    #[test]
    fn compass_counterexample() {
        let g = compass();
        let clusters = vec![vec![0, 2], vec![1, 3]];
        let ss = dist(SamplingScheme::Stratified { partition: clusters.clone() }, 4);
        let bs = dist(
            SamplingScheme::Block {
                partition: clusters.clone(),
                q: vec![0.5, 0.5],
            },
            4,
        );
        let nice = dist(SamplingScheme::Nice { tau: 2 }, 4);
        let ss_v = ss.sigma_star_as(&g).unwrap();
        assert!((ss_v - 0.5).abs() < 1e-15);
        assert_eq!(bs.sigma_star_as(&g).unwrap(), 0.0);
        assert!((nice.sigma_star_as(&g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let sig = cluster_max_deviation(&clusters, &g);
        let (b1, b2) = ss_variance_upper_bound(&clusters, &sig);
        assert!(ss_v <= b1 && b1 <= b2);
    }

    #[test]
    fn nice_closed_form_examples() {
        assert_eq!(sigma_nice_closed_form(2.5, 7, 7), 0.0);
        assert_eq!(sigma_nice_closed_form(2.5, 7, 1), 2.5);
        let sigma1 = dist(SamplingScheme::Nice { tau: 1 }, 4).sigma_star_as(&compass()).unwrap();
        assert_eq!(sigma1, 1.0);
        assert!((sigma_nice_closed_form(sigma1, 4, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stratified_bounds_edge_cases() {
        let zero = vec![Vector::zeros(2); 4];
        let part = vec![vec![0, 1], vec![2, 3]];
        let sig = cluster_max_deviation(&part, &zero);
        assert_eq!(ss_variance_upper_bound(&part, &sig), (0.0, 0.0));
        assert_eq!(
            dist(SamplingScheme::Stratified { partition: part }, 4).sigma_star_as(&zero).unwrap(),
            0.0
        );
        let single = vec![vec![0, 1, 2]];
        let (b1, b2) = ss_variance_upper_bound(&single, &[0.7]);
        assert!((b1 - 0.7).abs() < 1e-15 && (b2 - 0.7).abs() < 1e-15);
    }

    #[test]
    fn uniform_partition_enumeration() {
        let p4 = uniform_partitions(4, 2);
        assert_eq!(
            p4,
            vec![
                vec![vec![0, 1], vec![2, 3]],
                vec![vec![0, 2], vec![1, 3]],
                vec![vec![0, 3], vec![1, 2]],
            ]
        );
        assert_eq!(uniform_partitions(9, 3).len(), 280);
        assert_eq!(uniform_partitions_count(9, 3), 280.0);
    }

    #[test]
    fn optimal_clustering_compass() {
        let (part, v) = optimal_ss_clustering(&compass(), 2).unwrap();
        assert!(v <= 1.0 / 3.0);
        // Pairing opposite vectors is worst; the optimum pairs neighbours.
        assert_eq!(part, vec![vec![0, 1], vec![2, 3]]);
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn optimal_clustering_on_zero_gradients() {
        let (part, v) = optimal_ss_clustering(&vec![Vector::zeros(3); 4], 2).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(part, vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn clustering_average_equals_nice() {
        let g = centered(9, 4, 77);
        let parts = uniform_partitions(9, 3);
        let mean = parts
            .iter()
            .map(|p| {
                dist(SamplingScheme::Stratified { partition: p.clone() }, 9)
                    .sigma_star_as(&g)
                    .unwrap()
            })
            .sum::<f64>()
            / parts.len() as f64;
        let nice = dist(SamplingScheme::Nice { tau: 3 }, 9).sigma_star_as(&g).unwrap();
        assert!((mean - nice).abs() <= 1e-12 * nice);
        let (_, opt) = optimal_ss_clustering(&g, 3).unwrap();
        assert!(opt <= nice);
    }

    #[test]
    fn clustering_search_rejects_large_or_nonsquare() {
        assert!(matches!(
            optimal_ss_clustering(&vec![Vector::zeros(1); 16], 4),
            Err(SamplingError::CapExceeded { .. })
        ));
        assert!(optimal_ss_clustering(&vec![Vector::zeros(1); 6], 2).is_err());
    }

    #[test]
    fn cap_is_enforced_and_closed_form_takes_over() {
        let n = 40;
        let d = dist(SamplingScheme::Nice { tau: 20 }, n);
        assert!(matches!(d.support(), Err(SamplingError::CapExceeded { .. })));
        let g = centered(n, 2, 9);
        let mu: Vec<f64> = (0..n).map(|i| 0.1 + i as f64 * 0.01).collect();
        let c = d.constants(&mu, &g).unwrap();
        assert_eq!(c.method, ConstantsMethod::ClosedForm);
        let sigma1 = dist(SamplingScheme::Nice { tau: 1 }, n).sigma_star_as(&g).unwrap();
        assert!((c.sigma_star_as_sq - sigma_nice_closed_form(sigma1, n, 20)).abs() <= 1e-12 * sigma1);
        let mut rng = rng::seeded(5);
        let (mc, se) = d.sigma_star_monte_carlo(&g, 20_000, &mut rng).unwrap();
        assert!((mc - c.sigma_star_as_sq).abs() < 5.0 * se, "{mc} vs {} (se {se})", c.sigma_star_as_sq);
        // Drawing still works without the support.
        assert_eq!(d.draw(&mut rng).len(), 20);
    }

    #[test]
    fn importance_sampling_marginals() {
        let mu = [1.0, 3.0];
        let d = SamplingDistribution::new(&SamplingScheme::Importance, 2, Some(&mu)).unwrap();
        assert_eq!(d.marginals(), &[0.25, 0.75]);
        // mu_i / (n p_i) = sum(mu)/n for every client.
        assert_eq!(d.mu_as(&mu).unwrap(), 2.0);
    }

    fn arb_partition(n: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
        (Just((0..n).collect::<Vec<_>>()).prop_shuffle(), 1..=n).prop_flat_map(move |(perm, b)| {
            proptest::collection::vec(0..b, n).prop_map(move |labels| {
                let mut blocks = vec![Vec::new(); b];
                for (k, &l) in labels.iter().enumerate() {
                    blocks[l].push(perm[k]);
                }
                // make sure every block is nonempty
                for j in 0..b {
                    if blocks[j].is_empty() {
                        let donor = (0..b).find(|&k| blocks[k].len() > 1).unwrap();
                        let x = blocks[donor].pop().unwrap();
                        blocks[j].push(x);
                    }
                }
                blocks
            })
        })
    }

    fn arb_probs(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.05f64..1.0, len).prop_map(|w| {
            let s: f64 = w.iter().sum();
            let mut p: Vec<f64> = w.iter().map(|x| x / s).collect();
            let rest: f64 = p[1..].iter().sum();
            p[0] = 1.0 - rest;
            p
        })
    }

    fn arb_scheme(n: usize) -> impl Strategy<Value = SamplingScheme> {
        prop_oneof![
            Just(SamplingScheme::Full),
            arb_probs(n).prop_map(|p| SamplingScheme::Nonuniform { p }),
            (1..=n).prop_map(|tau| SamplingScheme::Nice { tau }),
            arb_partition(n).prop_flat_map(|partition| {
                let b = partition.len();
                arb_probs(b).prop_map(move |q| SamplingScheme::Block {
                    partition: partition.clone(),
                    q,
                })
            }),
            arb_partition(n).prop_map(|partition| SamplingScheme::Stratified { partition }),
        ]
    }

    fn arb_case() -> impl Strategy<Value = (usize, SamplingScheme, u64)> {
        (2usize..=7).prop_flat_map(|n| (Just(n), arb_scheme(n), any::<u64>()))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]

        #[test]
        fn marginals_match_support((n, scheme, _) in arb_case()) {
            check_marginals(&dist(scheme, n));
        }

        #[test]
        fn cohort_estimator_is_unbiased((n, scheme, seed) in arb_case()) {
            let d = dist(scheme, n);
            let vals: Vec<Vector> = centered(n, 2, seed).into_iter()
                .enumerate().map(|(i, v)| v.add_scalar(i as f64)).collect();
            let mut expect = Vector::zeros(2);
            for v in &vals { expect += v; }
            expect /= n as f64;
            let mut acc = Vector::zeros(2);
            d.visit_support(|c, pc| {
                for &i in c { acc.axpy(pc * d.weight(i), &vals[i], 1.0); }
            }).unwrap();
            prop_assert!((acc - &expect).norm() <= 1e-12 * expect.norm().max(1.0));
        }

        #[test]
        fn closed_forms_match_enumeration((n, scheme, seed) in arb_case()) {
            let d = dist(scheme, n);
            let g = centered(n, 3, seed);
            let mu: Vec<f64> = centered(n, 1, seed ^ 1).iter().map(|v| 0.1 + v[0].abs()).collect();
            let exact = d.sigma_star_as(&g).unwrap();
            let closed = d.sigma_star_closed_form(&g).unwrap();
            prop_assert!((exact - closed).abs() <= 1e-10 * exact.max(1e-12), "{} vs {}", exact, closed);
            let m1 = d.mu_as(&mu).unwrap();
            let m2 = d.mu_as_closed_form(&mu).unwrap();
            prop_assert!((m1 - m2).abs() <= 1e-12 * m1);
        }

        #[test]
        fn nice_mu_is_monotone_in_tau(mu in proptest::collection::vec(0.01f64..10.0, 2..=8)) {
            let n = mu.len();
            let mut prev = 0.0;
            for tau in 1..=n {
                let m = dist(SamplingScheme::Nice { tau }, n).mu_as(&mu).unwrap();
                prop_assert!(m >= prev - 1e-15);
                prev = m;
            }
        }

        #[test]
        fn nice_sigma_enumeration_matches_closed_form(n in 2usize..=8, seed in any::<u64>()) {
            let g = centered(n, 3, seed);
            let s1 = dist(SamplingScheme::Nice { tau: 1 }, n).sigma_star_as(&g).unwrap();
            for tau in 1..=n {
                let e = dist(SamplingScheme::Nice { tau }, n).sigma_star_as(&g).unwrap();
                let c = sigma_nice_closed_form(s1, n, tau);
                prop_assert!((e - c).abs() <= 1e-10 * s1.max(1e-300), "tau={} {} vs {}", tau, e, c);
            }
        }

        #[test]
        fn block_and_stratified_extremes(n in 2usize..=7, seed in any::<u64>(), p in arb_probs(7)) {
            let p: Vec<f64> = {
                let s: f64 = p[..n].iter().sum();
                let mut q: Vec<f64> = p[..n].iter().map(|x| x / s).collect();
                let rest: f64 = q[1..].iter().sum();
                q[0] = 1.0 - rest;
                q
            };
            let g = centered(n, 2, seed);
            let mu: Vec<f64> = (0..n).map(|i| 0.2 + 0.1 * i as f64).collect();
            let all = vec![(0..n).collect::<Vec<_>>()];
            let singles: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
            let full = dist(SamplingScheme::Full, n);
            let block1 = dist(SamplingScheme::Block { partition: all.clone(), q: vec![1.0] }, n);
            prop_assert!((block1.mu_as(&mu).unwrap() - full.mu_as(&mu).unwrap()).abs() < 1e-14);
            prop_assert!(block1.sigma_star_as(&g).unwrap() < 1e-24);
            let blockn = dist(SamplingScheme::Block { partition: singles.clone(), q: p.clone() }, n);
            let nonu = dist(SamplingScheme::Nonuniform { p }, n);
            prop_assert!((blockn.mu_as(&mu).unwrap() - nonu.mu_as(&mu).unwrap()).abs() < 1e-12);
            prop_assert!((blockn.sigma_star_as(&g).unwrap() - nonu.sigma_star_as(&g).unwrap()).abs() < 1e-12);
            let ss1 = dist(SamplingScheme::Stratified { partition: all }, n);
            let us = dist(SamplingScheme::Nice { tau: 1 }, n);
            prop_assert!((ss1.mu_as(&mu).unwrap() - us.mu_as(&mu).unwrap()).abs() < 1e-12);
            prop_assert!((ss1.sigma_star_as(&g).unwrap() - us.sigma_star_as(&g).unwrap()).abs() < 1e-12);
            let ssn = dist(SamplingScheme::Stratified { partition: singles }, n);
            prop_assert!((ssn.mu_as(&mu).unwrap() - full.mu_as(&mu).unwrap()).abs() < 1e-12);
            prop_assert!(ssn.sigma_star_as(&g).unwrap() < 1e-24);
        }

        #[test]
        fn stratified_bounds_dominate(n in 2usize..=7, seed in any::<u64>(), part in arb_partition(7)) {
            let _ = n;
            let g = centered(7, 3, seed);
            let d = dist(SamplingScheme::Stratified { partition: part.clone() }, 7);
            let exact = d.sigma_star_as(&g).unwrap();
            let sig = cluster_max_deviation(&part, &g);
            let (b1, b2) = ss_variance_upper_bound(&part, &sig);
            prop_assert!(exact <= b1 * (1.0 + 1e-12) + 1e-15);
            prop_assert!(b1 <= b2 * (1.0 + 1e-12));
        }
    }
}
