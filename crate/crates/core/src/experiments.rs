//! JSON experiment configs, reproducible artifacts and the self-check suite.
//!
//! A config names a dataset, an optional non-IID split, a [`RunConfig`], the
//! seeds, cost parameters and an output directory. Every artifact is written
//! once, from the calling thread, with fixed 17-significant-digit formatting,
//! so rerunning a config (or the manifest it produced) reproduces the CSVs
//! byte for byte.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::algorithms::{run_seeds, RunConfig};
use crate::cost::{sweep, CostParams, SweepGrid, SweepResult};
use crate::data::{
    max_abs_scale, partition_noniid, read_libsvm, synthetic_classification, synthetic_quadratic,
    PartitionManifest, SyntheticClassification,
};
use crate::objectives::Federation;
use crate::sampling::{SamplingDistribution, SamplingScheme};
use crate::theory::{solve_xstar, XSTAR_TOL};
use crate::{Error, Result, Vector};

pub mod verify;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that replaces the config's seed list with one seed.
pub const SEED_ENV: &str = "FEDPROX_SIM_SEED";

/// Invalid configuration; `field` is a dotted path into the JSON document.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("config.{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

fn default_l2() -> f64 {
    1e-2
}

/// Where the client losses come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// LibSVM file; relative paths resolve against the config file's directory.
    Libsvm {
        path: PathBuf,
        /// Max-abs feature scaling.
        #[serde(default)]
        scale: bool,
        #[serde(default = "default_l2")]
        l2: f64,
    },
    /// Generated LibSVM-like classification data.
    SyntheticClassification {
        points: usize,
        dim: usize,
        groups: usize,
        active: f64,
        #[serde(default)]
        label_noise: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_l2")]
        l2: f64,
    },
    /// Random strongly convex quadratics, one per client.
    Quadratic {
        n: usize,
        d: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_spread")]
        spread: f64,
    },
}

fn default_spread() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub q: usize,
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Sampling derived from the split's feature clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSampling {
    /// One client from every cluster.
    Stratified,
    /// One whole cluster, uniformly.
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    /// Required for classification data, ignored for quadratics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
    pub run: RunConfig,
    /// Replaces `run.sampling` with a scheme built on the split's clusters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_sampling: Option<ClusterSampling>,
    /// Seeds to run; `[run.seed]` when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub cost: CostParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parse and validate. Errors name the offending field.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            ConfigError::new(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file, or the config embedded in a run manifest. Relative
    /// dataset and output paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| ConfigError::new("<root>", e.to_string()))?;
        let mut cfg = if value.get("config_hash").is_some() {
            let manifest: RunManifest = serde_json::from_value(value)
                .map_err(|e| ConfigError::new("<manifest>", e.to_string()))?;
            manifest.to_config()?
        } else {
            Self::from_json_str(&text)?
        };
        if let Some(dir) = path.parent() {
            cfg.resolve_relative(dir);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, dir: &Path) {
        if let DatasetSpec::Libsvm { path, .. } = &mut self.dataset {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = dir.join(&self.output_dir);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::new(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.run
            .validate()
            .map_err(|e| ConfigError::new("run", e.to_string()))?;
        self.cost
            .validate()
            .map_err(|m| ConfigError::new("cost", m))?;
        match &self.dataset {
            DatasetSpec::Quadratic { n, d, spread, .. } => {
                if *n == 0 || *d == 0 {
                    return Err(ConfigError::new("dataset", "n and d must be positive"));
                }
                if !(spread.is_finite() && *spread >= 0.0) {
                    return Err(ConfigError::new("dataset.spread", "must be finite and nonnegative"));
                }
            }
            DatasetSpec::Libsvm { l2, .. } | DatasetSpec::SyntheticClassification { l2, .. } => {
                if !(l2.is_finite() && *l2 > 0.0) {
                    return Err(ConfigError::new("dataset.l2", "must be positive"));
                }
                if self.partition.is_none() {
                    return Err(ConfigError::new(
                        "partition",
                        "classification data needs a partition {q, m}",
                    ));
                }
            }
        }
        if self.cluster_sampling.is_some() && self.partition.is_none() {
            return Err(ConfigError::new("cluster_sampling", "requires a partition"));
        }
        if let Some(g) = &self.sweep {
            if g.gammas.is_empty() || g.ks.is_empty() {
                return Err(ConfigError::new("sweep", "gammas and K must be nonempty"));
            }
            if let Some(bad) = g.gammas.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(ConfigError::new("sweep.gammas", format!("invalid stepsize {bad}")));
            }
            if g.ks.contains(&0) || g.baseline_ks.contains(&0) {
                return Err(ConfigError::new("sweep.K", "K must be at least 1"));
            }
        }
        Ok(())
    }

    /// Seeds after applying an override value (normally from [`SEED_ENV`]).
    pub fn effective_seeds(&self, overridden: Option<&str>) -> Result<Vec<u64>, ConfigError> {
        if let Some(s) = overridden {
            let seed = s
                .trim()
                .parse::<u64>()
                .map_err(|e| ConfigError::new(SEED_ENV, format!("not a u64 seed: {e}")))?;
            return Ok(vec![seed]);
        }
        Ok(if self.seeds.is_empty() {
            vec![self.run.seed]
        } else {
            self.seeds.clone()
        })
    }

    /// SHA-256 of the canonical JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// A built federation together with its minimizer.
pub struct Prepared {
    pub federation: Federation,
    pub xstar: Vector,
    /// `run` with cluster sampling resolved.
    pub run: RunConfig,
    pub partition: Option<PartitionManifest>,
}

/// Load data, split it and solve for `x*`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (federation, partition) = match &cfg.dataset {
        DatasetSpec::Quadratic { n, d, seed, spread } => {
            (Federation::from_quadratics(&synthetic_quadratic(*n, *d, *seed, *spread))?, None)
        }
        DatasetSpec::Libsvm { path, scale, l2 } => {
            let mut points = read_libsvm(path)?;
            if *scale {
                points = max_abs_scale(&points);
            }
            let p = cfg.partition.expect("validated");
            let (ds, manifest) = partition_noniid(&points, p.q, p.m, p.seed)?;
            (Federation::logistic(&ds, *l2)?, Some(manifest))
        }
        DatasetSpec::SyntheticClassification {
            points,
            dim,
            groups,
            active,
            label_noise,
            seed,
            l2,
        } => {
            let data = synthetic_classification(&SyntheticClassification {
                points: *points,
                dim: *dim,
                groups: *groups,
                active: *active,
                label_noise: *label_noise,
                seed: *seed,
            });
            let p = cfg.partition.expect("validated");
            let (ds, manifest) = partition_noniid(&data, p.q, p.m, p.seed)?;
            (Federation::logistic(&ds, *l2)?, Some(manifest))
        }
    };
    let mut run = cfg.run.clone();
    if let (Some(kind), Some(pm)) = (cfg.cluster_sampling, &partition) {
        let mut blocks = vec![Vec::new(); pm.q];
        for (client, &c) in pm.cluster_of.iter().enumerate() {
            blocks[c].push(client);
        }
        run.sampling = match kind {
            ClusterSampling::Stratified => SamplingScheme::Stratified { partition: blocks },
            ClusterSampling::Block => {
                let q = vec![1.0 / pm.q as f64; pm.q];
                SamplingScheme::Block { partition: blocks, q }
            }
        };
    }
    let n = federation.num_clients();
    let mu = federation.strong_convexities();
    SamplingDistribution::new(&run.sampling, n, Some(&mu)).map_err(|e| {
        match &e {
            crate::sampling::SamplingError::Invalid { field, message } => {
                ConfigError::new(format!("run.sampling.{field}"), message.clone())
            }
            _ => ConfigError::new("run.sampling", e.to_string()),
        }
    })?;
    if let Some(x0) = &run.x0 {
        if x0.len() != federation.dim() {
            return Err(ConfigError::new(
                "run.x0",
                format!("length {} does not match dimension {}", x0.len(), federation.dim()),
            )
            .into());
        }
    }
    let (xstar, _) = solve_xstar(&federation, XSTAR_TOL)?;
    Ok(Prepared {
        federation,
        xstar,
        run,
        partition,
    })
}

/// Metadata sidecar written next to every run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    /// The config exactly as it was run.
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    /// Artifact file names, relative to the output directory.
    pub artifacts: Vec<String>,
    pub software_version: String,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    /// A config that reruns exactly this manifest's seeds.
    pub fn to_config(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = self.config.clone();
        cfg.seeds = self.seeds.clone();
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

pub fn trajectory_file_name(seed: u64) -> String {
    format!("trajectory_seed{seed}.csv")
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn finish_manifest(
    cfg: &ExperimentConfig,
    seeds: Vec<u64>,
    mut artifacts: Vec<String>,
    prepared: &Prepared,
    started: Instant,
) -> Result<RunManifest> {
    let dir = &cfg.output_dir;
    if let Some(pm) = &prepared.partition {
        write(dir, "partition.json", &serde_json::to_string_pretty(pm)?)?;
        artifacts.push("partition.json".into());
    }
    artifacts.push(MANIFEST_FILE.into());
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        seeds,
        artifacts,
        software_version: env!("CARGO_PKG_VERSION").into(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write(dir, MANIFEST_FILE, &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// One run per seed: `trajectory_seed{seed}.csv` with `T + 1` rows each.
pub fn run_experiment(cfg: &ExperimentConfig, seeds: &[u64], jobs: usize) -> Result<RunManifest> {
    let started = Instant::now();
    let prepared = prepare(cfg)?;
    create_dir(&cfg.output_dir)?;
    let results = run_seeds(&prepared.run, &prepared.federation, &prepared.xstar, seeds, jobs);
    let mut artifacts = Vec::new();
    for (&seed, record) in seeds.iter().zip(results) {
        let record = record?;
        let name = trajectory_file_name(seed);
        write(&cfg.output_dir, &name, &record.to_csv())?;
        artifacts.push(name);
    }
    finish_manifest(cfg, seeds.to_vec(), artifacts, &prepared, started)
}

/// Sweep summary written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub configured: SweepResult,
    pub flat: SweepResult,
    pub hierarchical: SweepResult,
}

/// Run the config's `(gamma, K)` grid; writes `sweep.csv`, `baseline.csv`,
/// `summary.json` and the gnuplot file `sweep.dat`.
pub fn sweep_experiment(cfg: &ExperimentConfig, seeds: &[u64], jobs: usize) -> Result<(SweepSummary, RunManifest)> {
    let started = Instant::now();
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| ConfigError::new("sweep", "missing sweep grid"))?;
    let prepared = prepare(cfg)?;
    create_dir(&cfg.output_dir)?;
    let result = sweep(
        &prepared.run,
        grid,
        &prepared.federation,
        &prepared.xstar,
        seeds,
        cfg.cost,
        jobs,
    )?;
    let summary = SweepSummary {
        flat: result.repriced(CostParams::flat()),
        hierarchical: result.repriced(CostParams::hierarchical()),
        configured: result,
    };
    let dir = &cfg.output_dir;
    write(dir, "sweep.csv", &summary.configured.cells_csv())?;
    write(dir, "baseline.csv", &summary.configured.baseline_csv())?;
    write(dir, "summary.json", &serde_json::to_string_pretty(&summary)?)?;
    write(dir, "sweep.dat", &summary.configured.gnuplot_data())?;
    let artifacts = ["sweep.csv", "baseline.csv", "summary.json", "sweep.dat"]
        .map(String::from)
        .to_vec();
    let manifest = finish_manifest(cfg, seeds.to_vec(), artifacts, &prepared, started)?;
    Ok((summary, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(dir: &Path) -> String {
        format!(
            r#"{{
  "schema_version": 1,
  "dataset": {{"source": "quadratic", "n": 5, "d": 3, "seed": 7}},
  "run": {{"algorithm": "sppm_as", "gamma": 2.0, "rounds": 6,
           "sampling": {{"type": "nice", "tau": 2}}, "seed": 11}},
  "output_dir": "{}"
}}"#,
            dir.display()
        )
    }

    #[test]
    fn minimal_config_writes_t_plus_one_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json_str(&minimal(tmp.path())).unwrap();
        let seeds = cfg.effective_seeds(None).unwrap();
        assert_eq!(seeds, vec![11]);
        let m = run_experiment(&cfg, &seeds, 1).unwrap();
        let csv = std::fs::read_to_string(tmp.path().join("trajectory_seed11.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 7);
        assert_eq!(m.config_hash.len(), 64);
        assert!(m.artifacts.contains(&"manifest.json".to_string()));
    }

    #[test]
    fn invalid_sampling_names_field() {
        let tmp = tempfile::tempdir().unwrap();
        let text = minimal(tmp.path()).replace("\"tau\": 2", "\"tau\": 9");
        let cfg = ExperimentConfig::from_json_str(&text).unwrap();
        let err = prepare(&cfg).err().unwrap();
        assert!(err.is_config());
        assert!(err.to_string().contains("tau"), "{err}");

        let text = minimal(tmp.path()).replace("\"tau\": 2", "\"tua\": 2");
        let err = ExperimentConfig::from_json_str(&text).unwrap_err();
        assert!(err.field.starts_with("run.sampling"), "{err}");
    }

    #[test]
    fn unknown_field_and_version_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let text = minimal(tmp.path()).replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert_eq!(ExperimentConfig::from_json_str(&text).unwrap_err().field, "schema_version");
        let text = minimal(tmp.path()).replace("\"rounds\": 6", "\"rounds\": 6, \"bogus\": 1");
        assert_eq!(ExperimentConfig::from_json_str(&text).unwrap_err().field, "run.bogus");
    }

    #[test]
    fn seed_override() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json_str(&minimal(tmp.path())).unwrap();
        assert_eq!(cfg.effective_seeds(Some(" 42 ")).unwrap(), vec![42]);
        assert_eq!(cfg.effective_seeds(Some("x")).unwrap_err().field, SEED_ENV);
    }

    #[test]
    fn manifest_rerun_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json_str(&minimal(tmp.path())).unwrap();
        run_experiment(&cfg, &[3, 4], 2).unwrap();
        let first = std::fs::read(tmp.path().join("trajectory_seed4.csv")).unwrap();
        let again = ExperimentConfig::load(tmp.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(again.seeds, vec![3, 4]);
        let m = run_experiment(&again, &again.effective_seeds(None).unwrap(), 1).unwrap();
        assert_eq!(std::fs::read(tmp.path().join("trajectory_seed4.csv")).unwrap(), first);
        assert_eq!(m.seeds, vec![3, 4]);
    }

    #[test]
    fn config_roundtrips_through_manifest_verbatim() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json_str(&minimal(tmp.path())).unwrap();
        let m = run_experiment(&cfg, &[11], 1).unwrap();
        let text = std::fs::read_to_string(tmp.path().join(MANIFEST_FILE)).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.config_hash, m.config_hash);
        assert_eq!(back.config.hash(), cfg.hash());
    }

    #[test]
    fn classification_needs_partition() {
        let text = r#"{"schema_version": 1,
            "dataset": {"source": "synthetic_classification", "points": 50, "dim": 4, "groups": 2, "active": 2.0},
            "run": {"algorithm": "sppm_as", "rounds": 1}, "output_dir": "out"}"#;
        assert_eq!(ExperimentConfig::from_json_str(text).unwrap_err().field, "partition");
    }
}
