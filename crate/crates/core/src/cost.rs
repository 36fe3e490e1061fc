//! Communication cost accounting and `(gamma, K)` sweeps.

use serde::{Deserialize, Serialize};

use crate::algorithms::{AlgorithmKind, RunConfig, RunError, Simulation};
use crate::objectives::Federation;
use crate::prox::StopRule;
use crate::Vector;

/// Per-round costs: `c1` per local (client-hub) round, `c2` per global (hub-server) round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub c1: f64,
    pub c2: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self::flat()
    }
}

impl CostParams {
    /// Total cost `T K`.
    pub fn flat() -> Self {
        Self { c1: 1.0, c2: 0.0 }
    }

    /// Server-hub-client topology where global rounds dominate.
    pub fn hierarchical() -> Self {
        Self { c1: 0.1, c2: 1.0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.c1 >= 0.0 && self.c2 >= 0.0 && self.c1.is_finite() && self.c2.is_finite()) {
            return Err(format!("costs must be finite and nonnegative, got c1={}, c2={}", self.c1, self.c2));
        }
        if self.c1 == 0.0 && self.c2 == 0.0 {
            return Err("c1 and c2 cannot both be zero".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `(c1 K + c2) T`.
    Prox,
    /// `(c1 + c2) T`: one exchange per round whatever the local work.
    Localgd,
}

pub fn total_cost(t: usize, k: usize, params: CostParams, kind: CostKind) -> f64 {
    let t = t as f64;
    match kind {
        CostKind::Prox => (params.c1 * k as f64 + params.c2) * t,
        CostKind::Localgd => (params.c1 + params.c2) * t,
    }
}

/// Rounds to accuracy for one grid cell, aggregated over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    /// First round at which the median over seeds of `||x_t - x*||^2` is `<= eps`.
    pub t_eps: Option<usize>,
    /// Same for the mean over seeds.
    pub t_eps_mean: Option<usize>,
    /// Rounds simulated.
    pub rounds_run: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Run `cfg` for every seed in lockstep until the median and mean squared
/// distances reach `eps`, or `t_max` rounds pass. Diverged seeds count as
/// infinitely far.
pub fn rounds_to_accuracy(
    cfg: &RunConfig,
    fed: &Federation,
    xstar: &Vector,
    seeds: &[u64],
    eps: f64,
    t_max: usize,
) -> Result<CellOutcome, RunError> {
    assert!(!seeds.is_empty(), "need at least one seed");
    let mut sims: Vec<Option<Simulation<'_>>> = seeds
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            Simulation::new(&c, fed, xstar).map(Some)
        })
        .collect::<Result<_, _>>()?;
    let mut dists: Vec<f64> = sims
        .iter()
        .map(|s| s.as_ref().map_or(f64::INFINITY, |s| s.last().sq_dist))
        .collect();
    let mut t_eps = None;
    let mut t_eps_mean = None;
    let mut t = 0;
    loop {
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        if t_eps.is_none() && median(&mut dists.clone()) <= eps {
            t_eps = Some(t);
        }
        if t_eps_mean.is_none() && mean <= eps {
            t_eps_mean = Some(t);
        }
        if (t_eps.is_some() && t_eps_mean.is_some()) || t >= t_max {
            break;
        }
        t += 1;
        for (slot, d) in sims.iter_mut().zip(dists.iter_mut()) {
            if let Some(sim) = slot {
                match sim.step() {
                    Ok(row) => *d = row.sq_dist,
                    Err(RunError::Diverged { .. }) => {
                        *slot = None;
                        *d = f64::INFINITY;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(CellOutcome {
        t_eps,
        t_eps_mean,
        rounds_run: t,
    })
}

/// Apply grid value `k` to a config: solver rounds for SPPM-AS, inner rounds otherwise.
pub fn with_k(cfg: &RunConfig, k: usize) -> RunConfig {
    let mut c = cfg.clone();
    match c.algorithm {
        AlgorithmKind::SppmAs => {
            if let StopRule::Rounds(_) = c.solver.stop {
                c.solver.stop = StopRule::Rounds(k);
            }
        }
        _ => c.local_rounds = Some(k),
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub gamma: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub t_eps: Option<usize>,
    pub t_eps_mean: Option<usize>,
    pub total_cost: Option<f64>,
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCell {
    pub kind: AlgorithmKind,
    /// Local stepsize; `None` for the default `1/(2 L_max)`.
    pub alpha: Option<f64>,
    /// Local steps per round.
    #[serde(rename = "K")]
    pub k: usize,
    pub t_eps: Option<usize>,
    pub t_eps_mean: Option<usize>,
    pub total_cost: Option<f64>,
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaOptimum {
    pub gamma: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub t_eps: usize,
    pub total_cost: f64,
    /// Cost of the `K = 1` cell, when that cell is in the grid and reached.
    pub cost_k1: Option<f64>,
    /// `100 (1 - cost / baseline minimum)`.
    pub reduction_vs_baseline_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub params: CostParams,
    pub epsilon: f64,
    pub t_max: usize,
    pub cells: Vec<SweepCell>,
    pub baseline: Vec<BaselineCell>,
    pub optima: Vec<GammaOptimum>,
    pub baseline_optimum: Option<BaselineCell>,
}

impl SweepResult {
    /// Assemble costs and optima from raw round counts.
    pub fn from_outcomes(
        params: CostParams,
        epsilon: f64,
        t_max: usize,
        cells: &[(f64, usize, CellOutcome)],
        baseline: &[(AlgorithmKind, Option<f64>, usize, CellOutcome)],
    ) -> Self {
        let cells: Vec<SweepCell> = cells
            .iter()
            .map(|&(gamma, k, o)| SweepCell {
                gamma,
                k,
                t_eps: o.t_eps,
                t_eps_mean: o.t_eps_mean,
                total_cost: o.t_eps.map(|t| total_cost(t, k, params, CostKind::Prox)),
                reached: o.t_eps.is_some(),
            })
            .collect();
        let baseline: Vec<BaselineCell> = baseline
            .iter()
            .map(|&(kind, alpha, k, o)| BaselineCell {
                kind,
                alpha,
                k,
                t_eps: o.t_eps,
                t_eps_mean: o.t_eps_mean,
                total_cost: o.t_eps.map(|t| total_cost(t, k, params, CostKind::Localgd)),
                reached: o.t_eps.is_some(),
            })
            .collect();
        let baseline_optimum = baseline
            .iter()
            .filter(|b| b.reached)
            .min_by(|a, b| {
                a.total_cost
                    .unwrap()
                    .total_cmp(&b.total_cost.unwrap())
                    .then(a.k.cmp(&b.k))
            })
            .cloned();
        let mut gammas: Vec<f64> = cells.iter().map(|c| c.gamma).collect();
        gammas.sort_by(f64::total_cmp);
        gammas.dedup();
        let optima = gammas
            .iter()
            .filter_map(|&g| {
                let row: Vec<&SweepCell> = cells.iter().filter(|c| c.gamma == g).collect();
                let best = row
                    .iter()
                    .filter(|c| c.reached)
                    .min_by(|a, b| {
                        a.total_cost
                            .unwrap()
                            .total_cmp(&b.total_cost.unwrap())
                            .then(a.k.cmp(&b.k))
                    })?;
                let cost = best.total_cost.unwrap();
                Some(GammaOptimum {
                    gamma: g,
                    k: best.k,
                    t_eps: best.t_eps.unwrap(),
                    total_cost: cost,
                    cost_k1: row.iter().find(|c| c.k == 1).and_then(|c| c.total_cost),
                    reduction_vs_baseline_pct: baseline_optimum
                        .as_ref()
                        .map(|b| 100.0 * (1.0 - cost / b.total_cost.unwrap())),
                })
            })
            .collect();
        Self {
            params,
            epsilon,
            t_max,
            cells,
            baseline,
            optima,
            baseline_optimum,
        }
    }

    /// The same round counts re-priced under other cost parameters.
    pub fn repriced(&self, params: CostParams) -> Self {
        let cells: Vec<(f64, usize, CellOutcome)> = self
            .cells
            .iter()
            .map(|c| (c.gamma, c.k, CellOutcome { t_eps: c.t_eps, t_eps_mean: c.t_eps_mean, rounds_run: 0 }))
            .collect();
        let baseline: Vec<(AlgorithmKind, Option<f64>, usize, CellOutcome)> = self
            .baseline
            .iter()
            .map(|b| (b.kind, b.alpha, b.k, CellOutcome { t_eps: b.t_eps, t_eps_mean: b.t_eps_mean, rounds_run: 0 }))
            .collect();
        Self::from_outcomes(params, self.epsilon, self.t_max, &cells, &baseline)
    }

    pub fn optimum(&self, gamma: f64) -> Option<&GammaOptimum> {
        self.optima.iter().find(|o| o.gamma == gamma)
    }

    /// `gamma,K,T_eps,total_cost,reached`.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("gamma,K,T_eps,total_cost,reached\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{:.16e},{},{},{},{}\n",
                c.gamma,
                c.k,
                c.t_eps.map_or(String::new(), |t| t.to_string()),
                c.total_cost.map_or(String::new(), |v| format!("{v:.16e}")),
                c.reached
            ));
        }
        out
    }

    /// `kind,alpha,K,T_eps,total_cost,reached`; an empty alpha is the default stepsize.
    pub fn baseline_csv(&self) -> String {
        let mut out = String::from("kind,alpha,K,T_eps,total_cost,reached\n");
        for b in &self.baseline {
            let kind = serde_json::to_value(b.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                kind,
                b.alpha.map_or(String::new(), |a| format!("{a:.16e}")),
                b.k,
                b.t_eps.map_or(String::new(), |t| t.to_string()),
                b.total_cost.map_or(String::new(), |v| format!("{v:.16e}")),
                b.reached
            ));
        }
        out
    }

    /// Gnuplot data: one `(K, total_cost)` block per gamma, blocks separated
    /// by two blank lines, then the baseline block.
    pub fn gnuplot_data(&self) -> String {
        let mut out = String::new();
        for o in self.optima.iter().map(|o| o.gamma).chain(
            self.cells
                .iter()
                .map(|c| c.gamma)
                .filter(|g| self.optimum(*g).is_none()),
        ) {
            if out.contains(&format!("# gamma = {o:.16e}\n")) {
                continue;
            }
            out.push_str(&format!("# gamma = {o:.16e}\n"));
            for c in self.cells.iter().filter(|c| c.gamma == o) {
                if let Some(v) = c.total_cost {
                    out.push_str(&format!("{} {:.16e}\n", c.k, v));
                }
            }
            out.push_str("\n\n");
        }
        out.push_str("# baseline localgd\n");
        for b in &self.baseline {
            if let Some(v) = b.total_cost {
                out.push_str(&format!("{} {:.16e}\n", b.k, v));
            }
        }
        out
    }
}

/// Grid of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub gammas: Vec<f64>,
    #[serde(rename = "K")]
    pub ks: Vec<usize>,
    /// Round limit per cell.
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    /// Local-step counts tried for the LocalGD baseline; empty skips it.
    #[serde(default)]
    pub baseline_ks: Vec<usize>,
    /// LocalGD stepsizes tried; `[1/(2 L_max)]` when empty. The baseline
    /// optimum is taken over every `(alpha, K)` pair.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baseline_alphas: Vec<f64>,
}

fn default_t_max() -> usize {
    500
}

/// Run every `(gamma, K)` cell and the LocalGD baseline on up to `jobs` threads.
pub fn sweep(
    base: &RunConfig,
    grid: &SweepGrid,
    fed: &Federation,
    xstar: &Vector,
    seeds: &[u64],
    params: CostParams,
    jobs: usize,
) -> Result<SweepResult, RunError> {
    use rayon::prelude::*;
    let eps = base.epsilon;
    // (baseline stepsize, gamma, K, config); the outer option marks baseline tasks.
    type Task = (Option<Option<f64>>, f64, usize, RunConfig);
    let mut tasks: Vec<Task> = Vec::new();
    for &g in &grid.gammas {
        for &k in &grid.ks {
            let mut c = with_k(base, k);
            c.gamma = g;
            tasks.push((None, g, k, c));
        }
    }
    let alphas: Vec<Option<f64>> = if grid.baseline_alphas.is_empty() {
        vec![None]
    } else {
        grid.baseline_alphas.iter().copied().map(Some).collect()
    };
    for &alpha in &alphas {
        for &k in &grid.baseline_ks {
            let mut c = base.clone();
            c.algorithm = AlgorithmKind::Localgd;
            c.alpha = alpha;
            c.local_rounds = Some(k);
            tasks.push((Some(alpha), 0.0, k, c));
        }
    }
    let eval = |(_, _, _, c): &Task| {
        rounds_to_accuracy(c, fed, xstar, seeds, eps, grid.t_max)
    };
    let outcomes: Vec<Result<CellOutcome, RunError>> = if jobs <= 1 {
        tasks.iter().map(eval).collect()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| tasks.par_iter().map(eval).collect()),
            Err(_) => tasks.iter().map(eval).collect(),
        }
    };
    let mut cells = Vec::new();
    let mut baseline = Vec::new();
    for (task, outcome) in tasks.iter().zip(outcomes) {
        let o = outcome?;
        match task.0 {
            None => cells.push((task.1, task.2, o)),
            Some(alpha) => baseline.push((AlgorithmKind::Localgd, alpha, task.2, o)),
        }
    }
    Ok(SweepResult::from_outcomes(params, eps, grid.t_max, &cells, &baseline))
}
