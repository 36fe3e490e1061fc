//! Data ingest: LibSVM parsing, synthetic instances and non-IID client splits.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, standard_normal};
use crate::{Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("libsvm parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("cluster {cluster} holds {size} points, fewer than the {needed} clients it must feed")]
    Partition {
        cluster: usize,
        size: usize,
        needed: usize,
    },
}

/// One labeled example with a sparse feature vector.
///
/// Feature indices are 0-based and strictly increasing; the label is -1 or +1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    features: Vec<(usize, f64)>,
    label: i8,
}

impl DataPoint {
    pub fn new(features: Vec<(usize, f64)>, label: i8) -> Result<Self, DataError> {
        if label != 1 && label != -1 {
            return Err(DataError::Argument(format!("label {label} is not -1 or +1")));
        }
        if features.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(DataError::Argument(
                "feature indices must be strictly increasing".into(),
            ));
        }
        Ok(Self { features, label })
    }

    pub fn features(&self) -> &[(usize, f64)] {
        &self.features
    }

    pub fn label(&self) -> i8 {
        self.label
    }

    /// One past the largest feature index (0 for an empty vector).
    pub fn min_dimension(&self) -> usize {
        self.features.last().map_or(0, |&(j, _)| j + 1)
    }

    pub fn dot(&self, x: &Vector) -> f64 {
        self.features.iter().map(|&(j, v)| v * x[j]).sum()
    }

    pub fn norm_squared(&self) -> f64 {
        self.features.iter().map(|&(_, v)| v * v).sum()
    }

    pub fn to_dense(&self, dim: usize) -> Vector {
        let mut v = Vector::zeros(dim);
        for &(j, val) in &self.features {
            v[j] = val;
        }
        v
    }
}

fn map_label(token: &str) -> Option<i8> {
    let v: f64 = token.parse().ok()?;
    if v == 1.0 {
        Some(1)
    } else if v == 0.0 || v == -1.0 {
        Some(-1)
    } else {
        None
    }
}

/// Parses LibSVM text: one `<label> [<idx>:<val>]*` record per nonempty line.
///
/// File indices are 1-based and become 0-based. Labels `0`/`-1` map to -1 and
/// `1`/`+1` map to +1; anything else is rejected.
pub fn parse_libsvm(text: &str) -> Result<Vec<DataPoint>, DataError> {
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let err = |message: String| DataError::Parse { line, message };
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut tokens = body.split_whitespace();
        let label_tok = tokens.next().expect("nonempty line has a token");
        let label =
            map_label(label_tok).ok_or_else(|| err(format!("unmappable label {label_tok:?}")))?;
        let mut features: Vec<(usize, f64)> = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("malformed token {tok:?}")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| err(format!("bad feature index in {tok:?}")))?;
            if idx == 0 {
                return Err(err(format!("feature index must be >= 1 in {tok:?}")));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| err(format!("bad feature value in {tok:?}")))?;
            if !val.is_finite() {
                return Err(err(format!("non-finite feature value in {tok:?}")));
            }
            let j = idx - 1;
            if features.last().is_some_and(|&(prev, _)| prev >= j) {
                return Err(err(format!("feature indices not increasing at {tok:?}")));
            }
            features.push((j, val));
        }
        points.push(DataPoint { features, label });
    }
    Ok(points)
}

pub fn read_libsvm(path: impl AsRef<Path>) -> crate::Result<Vec<DataPoint>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| crate::Error::io(&path, e))?;
    Ok(parse_libsvm(&text)?)
}

/// Serializes points back to LibSVM text (1-based indices, shortest
/// round-trip float formatting).
pub fn to_libsvm(points: &[DataPoint]) -> String {
    let mut out = String::new();
    for p in points {
        out.push_str(if p.label > 0 { "+1" } else { "-1" });
        for &(j, v) in &p.features {
            write!(out, " {}:{}", j + 1, v).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Smallest dimension covering every feature index.
pub fn dimension(points: &[DataPoint]) -> usize {
    points.iter().map(DataPoint::min_dimension).max().unwrap_or(0)
}

/// Per-coordinate max-abs scaling: every feature column lands in [-1, 1].
pub fn max_abs_scale(points: &[DataPoint]) -> Vec<DataPoint> {
    let d = dimension(points);
    let mut scale = vec![0.0f64; d];
    for p in points {
        for &(j, v) in &p.features {
            scale[j] = scale[j].max(v.abs());
        }
    }
    points
        .iter()
        .map(|p| DataPoint {
            features: p
                .features
                .iter()
                .map(|&(j, v)| (j, if scale[j] > 0.0 { v / scale[j] } else { v }))
                .collect(),
            label: p.label,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// K-means

#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Cluster index of every input point, labeled in order of first appearance.
    pub assign: Vec<usize>,
    pub centroids: Vec<Vector>,
    /// Within-cluster sum of squares after every assignment step, then at the end.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterAssignment {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assign.len())
            .filter(|&i| self.assign[i] == cluster)
            .collect()
    }
}

fn sq_dist(a: &Vector, b: &Vector) -> f64 {
    (a - b).norm_squared()
}

fn nearest(p: &Vector, centroids: &[Vector]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(p, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp_init(points: &[Vector], k: usize, rng: &mut rng::Rng) -> Vec<Vector> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining points coincide with a center.
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn centroid_means(points: &[Vector], assign: &[usize], k: usize) -> Vec<Vector> {
    let dim = points[0].len();
    let mut sums = vec![Vector::zeros(dim); k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assign) {
        sums[c] += p;
        counts[c] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| s / c as f64)
        .collect()
}

fn inertia(points: &[Vector], assign: &[usize], centroids: &[Vector]) -> f64 {
    points
        .iter()
        .zip(assign)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// Lloyd's K-means with k-means++ seeding.
///
/// Iterates until the assignment is a fixed point or `max_iters` is hit. An
/// empty cluster takes over the point farthest from its own centroid (among
/// clusters that can spare one), so every returned cluster is nonempty.
pub fn kmeans(
    points: &[Vector],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<ClusterAssignment, DataError> {
    if k == 0 {
        return Err(DataError::Argument("k must be at least 1".into()));
    }
    if k > points.len() {
        return Err(DataError::Argument(format!(
            "k = {k} exceeds the number of points ({})",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(DataError::Argument("points have mixed dimensions".into()));
    }

    let mut rng = rng::seeded(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut assign: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut next: Vec<usize> = Vec::with_capacity(points.len());
        let mut dist: Vec<f64> = Vec::with_capacity(points.len());
        for p in points {
            let (c, d) = nearest(p, &centroids);
            next.push(c);
            dist.push(d);
        }
        let mut counts = vec![0usize; k];
        for &c in &next {
            counts[c] += 1;
        }
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let mut far: Option<(usize, f64)> = None;
            for i in 0..points.len() {
                if counts[next[i]] > 1 && far.is_none_or(|(_, d)| dist[i] > d) {
                    far = Some((i, dist[i]));
                }
            }
            let (i, _) = far.expect("k <= n leaves a cluster with a spare point");
            counts[next[i]] -= 1;
            next[i] = empty;
            counts[empty] = 1;
            dist[i] = 0.0;
            centroids[empty] = points[i].clone();
        }
        history.push(dist.iter().sum());
        let converged = next == assign;
        assign = next;
        if converged {
            break;
        }
        centroids = centroid_means(points, &assign, k);
    }
    centroids = centroid_means(points, &assign, k);
    history.push(inertia(points, &assign, &centroids));

    // Canonical labels: clusters numbered by their first member.
    let mut relabel = vec![usize::MAX; k];
    let mut next_label = 0;
    for &c in &assign {
        if relabel[c] == usize::MAX {
            relabel[c] = next_label;
            next_label += 1;
        }
    }
    let assign: Vec<usize> = assign.iter().map(|&c| relabel[c]).collect();
    let mut ordered = vec![Vector::zeros(dim); k];
    for (c, cen) in centroids.into_iter().enumerate() {
        ordered[relabel[c]] = cen;
    }

    Ok(ClusterAssignment {
        k,
        assign,
        centroids: ordered,
        inertia_history: history,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Federated splits

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub points: Vec<DataPoint>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub shards: Vec<ClientShard>,
    pub dim: usize,
    /// Cluster of each client when the split came from clustering.
    pub cluster_of: Option<Vec<usize>>,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    /// Clients grouped by cluster, each group ascending. `None` without metadata.
    pub fn clusters(&self) -> Option<Vec<Vec<usize>>> {
        let cluster_of = self.cluster_of.as_ref()?;
        let q = cluster_of.iter().copied().max().map_or(0, |c| c + 1);
        let mut groups = vec![Vec::new(); q];
        for (client, &c) in cluster_of.iter().enumerate() {
            groups[c].push(client);
        }
        Some(groups)
    }
}

/// JSON manifest describing a non-IID split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub n: usize,
    pub d: usize,
    pub q: usize,
    pub m: usize,
    pub seed: u64,
    pub cluster_of: Vec<usize>,
}

/// Feature-wise non-IID split: K-means with `q` clusters on the feature
/// vectors, then each cluster's points (in input order) dealt round-robin to
/// `m` clients. Client `c * m + j` is the `j`-th client of cluster `c`.
pub fn partition_noniid(
    points: &[DataPoint],
    q: usize,
    m: usize,
    seed: u64,
) -> Result<(FederatedDataset, PartitionManifest), DataError> {
    if q == 0 || m == 0 {
        return Err(DataError::Argument("q and m must be positive".into()));
    }
    if points.len() < q * m {
        return Err(DataError::Argument(format!(
            "{} points cannot fill {} clients",
            points.len(),
            q * m
        )));
    }
    let dim = dimension(points);
    let dense: Vec<Vector> = points.iter().map(|p| p.to_dense(dim.max(1))).collect();
    let clusters = kmeans(&dense, q, seed, 300)?;

    let mut shards: Vec<ClientShard> = (0..q * m)
        .map(|client_id| ClientShard {
            client_id,
            points: Vec::new(),
        })
        .collect();
    for c in 0..q {
        let members = clusters.members(c);
        if members.len() < m {
            return Err(DataError::Partition {
                cluster: c,
                size: members.len(),
                needed: m,
            });
        }
        for (r, &i) in members.iter().enumerate() {
            shards[c * m + r % m].points.push(points[i].clone());
        }
    }
    let cluster_of: Vec<usize> = (0..q * m).map(|client| client / m).collect();
    let manifest = PartitionManifest {
        n: q * m,
        d: dim,
        q,
        m,
        seed,
        cluster_of: cluster_of.clone(),
    };
    Ok((
        FederatedDataset {
            shards,
            dim,
            cluster_of: Some(cluster_of),
        },
        manifest,
    ))
}

// ---------------------------------------------------------------------------
// Synthetic instances

/// Data of one quadratic client `f(x) = 1/2 x^T A x - b^T x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "QuadraticSpecRepr", try_from = "QuadraticSpecRepr")]
pub struct QuadraticSpec {
    pub a: Matrix,
    pub b: Vector,
}

#[derive(Serialize, Deserialize)]
struct QuadraticSpecRepr {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl From<QuadraticSpec> for QuadraticSpecRepr {
    fn from(q: QuadraticSpec) -> Self {
        QuadraticSpecRepr {
            a: q.a.row_iter().map(|r| r.iter().copied().collect()).collect(),
            b: q.b.iter().copied().collect(),
        }
    }
}

impl TryFrom<QuadraticSpecRepr> for QuadraticSpec {
    type Error = String;

    fn try_from(r: QuadraticSpecRepr) -> Result<Self, String> {
        let d = r.b.len();
        if r.a.len() != d || r.a.iter().any(|row| row.len() != d) {
            return Err(format!("matrix must be {d}x{d}"));
        }
        Ok(QuadraticSpec {
            a: Matrix::from_fn(d, d, |i, j| r.a[i][j]),
            b: Vector::from_vec(r.b),
        })
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut rng::Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| standard_normal(rng))
}

fn gaussian_vector(len: usize, rng: &mut rng::Rng) -> Vector {
    Vector::from_fn(len, |_, _| standard_normal(rng))
}

/// Random strongly convex quadratic clients.
///
/// `A_i = 0.1 I + G G^T / d + spread * M_i M_i^T / d` and
/// `b_i = b + spread * e_i` with Gaussian `G, M_i, b, e_i`, so every `A_i`
/// has smallest eigenvalue at least 0.1 and `spread = 0` makes all clients
/// identical.
pub fn synthetic_quadratic(n: usize, d: usize, seed: u64, spread: f64) -> Vec<QuadraticSpec> {
    assert!(n >= 1 && d >= 1, "synthetic_quadratic needs n, d >= 1");
    assert!(spread >= 0.0, "spread must be nonnegative");
    let mut rng = rng::seeded(seed);
    let g = gaussian_matrix(d, d, &mut rng);
    let base_a = Matrix::identity(d, d) * 0.1 + &g * g.transpose() / d as f64;
    let base_b = gaussian_vector(d, &mut rng);
    (0..n)
        .map(|_| {
            let m = gaussian_matrix(d, d, &mut rng);
            let e = gaussian_vector(d, &mut rng);
            let mut a = &base_a + (&m * m.transpose()) * (spread / d as f64);
            // Exact symmetry, independent of the product's rounding.
            a = (&a + a.transpose()) * 0.5;
            QuadraticSpec {
                a,
                b: &base_b + e * spread,
            }
        })
        .collect()
}

/// Shape of a synthetic binary-feature classification set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClassification {
    pub points: usize,
    pub dim: usize,
    /// Number of feature prototypes; points of one prototype share a sparsity pattern.
    pub groups: usize,
    /// Expected number of active features per point.
    pub active: f64,
    /// Probability that a label is flipped away from the shared linear rule.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticClassification {
    fn default() -> Self {
        Self {
            points: 2000,
            dim: 40,
            groups: 10,
            active: 8.0,
            label_noise: 0.1,
            seed: 0,
        }
    }
}

/// LibSVM-like data with binary sparse features drawn around `groups`
/// prototypes (feature-wise heterogeneity) and labels from one shared linear
/// rule plus noise.
pub fn synthetic_classification(spec: &SyntheticClassification) -> Vec<DataPoint> {
    assert!(spec.dim >= 1 && spec.groups >= 1);
    let mut rng = rng::seeded(spec.seed);
    let d = spec.dim;
    let base = (spec.active / d as f64).clamp(0.01, 0.9);
    let prototypes: Vec<Vec<f64>> = (0..spec.groups)
        .map(|_| {
            (0..d)
                .map(|_| {
                    if rng.random::<f64>() < base {
                        0.9
                    } else {
                        0.3 * base
                    }
                })
                .collect()
        })
        .collect();
    let w = gaussian_vector(d, &mut rng);
    (0..spec.points)
        .map(|i| {
            let proto = &prototypes[i % spec.groups];
            let features: Vec<(usize, f64)> = (0..d)
                .filter(|&j| rng.random::<f64>() < proto[j])
                .map(|j| (j, 1.0))
                .collect();
            let score: f64 = features.iter().map(|&(j, v)| v * w[j]).sum();
            let mut label: i8 = if score >= 0.0 { 1 } else { -1 };
            if rng.random::<f64>() < spec.label_noise {
                label = -label;
            }
            DataPoint { features, label }
        })
        .collect()
}
