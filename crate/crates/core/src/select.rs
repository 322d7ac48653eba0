//! Point-entity selection.
//!
//! The clustering route embeds a type's entity pool, runs K-Means with `a`
//! centers, and decodes each center to the untaken pool member with the
//! highest cosine similarity. Random, restricted-pool, top-τ and random
//! extension variants share the same [`PointSelection`] output.

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{unique_from_mentions, Demonstration, EntityPool, Pools, Schema};
use crate::embed::{cosine, squared_distance, EmbedError, EmbeddedEntity, Embedder};
use crate::exec::Execution;
use crate::seed;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("point count must be at least 1")]
    ZeroCount,
    #[error("tau must be at least 1")]
    ZeroTau,
    #[error("no vectors to cluster")]
    NoVectors,
    #[error("vector {index} has length {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("vector {0} has a non-finite component")]
    NonFinite(usize),
    #[error("every pool member is already taken")]
    Exhausted,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub type Result<T> = std::result::Result<T, SelectError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCenter {
    pub vector: Vec<f64>,
    pub member_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final SSE wins.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self { seed: 0, max_iter: 100, tol: 1e-6, restarts: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<ClusterCenter>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    /// Index of the winning restart.
    pub best_restart: usize,
    /// Per restart: SSE after every assignment step, then the final SSE.
    pub traces: Vec<Vec<f64>>,
}

fn validate<V: AsRef<[f64]>>(vectors: &[V]) -> Result<usize> {
    let dim = vectors.first().ok_or(SelectError::NoVectors)?.as_ref().len();
    for (index, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(SelectError::DimensionMismatch { index, expected: dim, got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(SelectError::NonFinite(index));
        }
    }
    Ok(dim)
}

fn bit_key(v: &[f64]) -> Vec<u64> {
    // +0.0 folds -0.0 into 0.0
    v.iter().map(|x| (x + 0.0).to_bits()).collect()
}

/// Euclidean K-Means.
///
/// Seeding is k-means++ drawn from a ChaCha8 stream: seed `params.seed`,
/// stream number = restart index. Lloyd iterations stop when no center moves
/// by `tol` or more, or after `max_iter` rounds. A cluster left empty after
/// assignment takes the point farthest from its own center. When `k` is at
/// least the number of distinct vectors, every distinct vector becomes its
/// own center.
pub fn kmeans<V>(vectors: &[V], k: usize, params: &KMeansParams) -> Result<KMeansResult>
where
    V: AsRef<[f64]> + Sync,
{
    kmeans_with(vectors, k, params, Execution::Sequential)
}

/// [`kmeans`] with restarts spread according to `exec`. Each restart owns
/// its random stream, so the result is the same in both modes.
pub fn kmeans_with<V>(vectors: &[V], k: usize, params: &KMeansParams, exec: Execution) -> Result<KMeansResult>
where
    V: AsRef<[f64]> + Sync,
{
    if k == 0 {
        return Err(SelectError::ZeroClusters);
    }
    validate(vectors)?;
    let points: Vec<&[f64]> = vectors.iter().map(AsRef::as_ref).collect();

    let mut distinct: Vec<usize> = Vec::new();
    let mut slot_of: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut assignments = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let slot = *slot_of.entry(bit_key(p)).or_insert_with(|| {
            distinct.push(i);
            distinct.len() - 1
        });
        assignments.push(slot);
    }
    if k >= distinct.len() {
        let mut centers: Vec<ClusterCenter> = distinct
            .iter()
            .map(|&i| ClusterCenter { vector: points[i].to_vec(), member_count: 0 })
            .collect();
        for &a in &assignments {
            centers[a].member_count += 1;
        }
        return Ok(KMeansResult { centers, assignments, sse: 0.0, best_restart: 0, traces: vec![vec![0.0]] });
    }

    let restarts: Vec<usize> = (0..params.restarts.max(1)).collect();
    let runs = exec.map(&restarts, |&r| {
        let mut rng = seed::rng(params.seed);
        rng.set_stream(r as u64);
        lloyd(&points, k, &mut rng, params)
    });
    let (best_restart, best) = runs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.sse.total_cmp(&b.sse))
        .expect("at least one restart");
    let mut counts = vec![0usize; k];
    for &a in &best.assignments {
        counts[a] += 1;
    }
    Ok(KMeansResult {
        centers: best
            .centers
            .iter()
            .zip(counts)
            .map(|(c, member_count)| ClusterCenter { vector: c.clone(), member_count })
            .collect(),
        assignments: best.assignments.clone(),
        sse: best.sse,
        best_restart,
        traces: runs.iter().map(|r| r.trace.clone()).collect(),
    })
}

struct LloydRun {
    centers: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    sse: f64,
    trace: Vec<f64>,
}

fn plus_plus(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, w) in d2.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        // total > 0 while fewer than `distinct` centers are placed
        let next = points[pick.expect("positive weight available")].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &next));
        }
        centers.push(next);
    }
    centers
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = squared_distance(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Assign every point, then give each empty cluster the point farthest from
/// its own center (taken from a cluster with more than one member).
fn assign(points: &[&[f64]], centers: &mut [Vec<f64>]) -> Vec<usize> {
    let k = centers.len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, centers).0).collect();
    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let d = squared_distance(p, &centers[a]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((i, _)) = far else { break };
        counts[assignments[i]] -= 1;
        counts[empty] = 1;
        assignments[i] = empty;
        centers[empty] = points[i].to_vec();
    }
    assignments
}

fn sse(points: &[&[f64]], centers: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centers[a]))
        .sum()
}

fn means(points: &[&[f64]], assignments: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, c), prev)| {
            if c == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|x| x / c as f64).collect()
            }
        })
        .collect()
}

fn lloyd(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng, params: &KMeansParams) -> LloydRun {
    let mut centers = plus_plus(points, k, rng);
    let mut trace = Vec::new();
    for _ in 0..params.max_iter {
        let assignments = assign(points, &mut centers);
        trace.push(sse(points, &centers, &assignments));
        let updated = means(points, &assignments, &centers);
        let shift = centers
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = updated;
        if shift < params.tol {
            break;
        }
    }
    let assignments = assign(points, &mut centers);
    let centers = means(points, &assignments, &centers);
    let final_sse = sse(points, &centers, &assignments);
    trace.push(final_sse);
    debug_assert!(
        trace.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].max(1.0)),
        "Lloyd SSE increased: {trace:?}"
    );
    LloydRun { centers, assignments, sse: final_sse, trace }
}

/// The untaken candidate most cosine-similar to `center`; ties go to the
/// lexicographically smallest surface.
pub fn decode_center(
    center: &[f64],
    candidates: &[EmbeddedEntity],
    taken: &HashSet<String>,
) -> Result<String> {
    let mut best: Option<(f64, &str)> = None;
    for c in candidates {
        if taken.contains(&c.surface) {
            continue;
        }
        let sim = cosine(&c.vector, center)?;
        let better = match best {
            None => true,
            Some((s, name)) => sim > s || (sim == s && c.surface.as_str() < name),
        };
        if better {
            best = Some((sim, &c.surface));
        }
    }
    best.map(|(_, s)| s.to_string()).ok_or(SelectError::Exhausted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Cluster,
    Random,
    Restricted,
    Tau,
    Extend,
}

impl SelectionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMethod::Cluster => "cluster",
            SelectionMethod::Random => "random",
            SelectionMethod::Restricted => "restricted",
            SelectionMethod::Tau => "tau",
            SelectionMethod::Extend => "extend",
        }
    }
}

/// Chosen point entities of one type, with provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSelection {
    #[serde(rename = "type")]
    pub etype: String,
    pub method: SelectionMethod,
    pub seed: u64,
    pub encoder_id: Option<String>,
    pub tau: usize,
    pub points: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PointSelection {
    fn new(pool: &EntityPool, method: SelectionMethod, seed: u64, encoder_id: Option<String>, tau: usize) -> Self {
        Self { etype: pool.etype.clone(), method, seed, encoder_id, tau, points: Vec::new(), warnings: Vec::new() }
    }

    fn warn(&mut self, msg: String) {
        tracing::warn!("{}: {msg}", self.etype);
        self.warnings.push(msg);
    }
}

/// Knobs for the clustering route.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOptions {
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub exec: Execution,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        let km = KMeansParams::default();
        Self { seed: 0, restarts: km.restarts, max_iter: km.max_iter, tol: km.tol, exec: Execution::Sequential }
    }
}

impl ClusterOptions {
    pub fn seeded(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    fn kmeans_params(&self) -> KMeansParams {
        KMeansParams { seed: self.seed, max_iter: self.max_iter, tol: self.tol, restarts: self.restarts }
    }
}

/// K-Means selection of `a` point entities, ordered largest cluster first.
pub fn select_points(pool: &EntityPool, embedder: &Embedder, a: usize, opts: &ClusterOptions) -> Result<PointSelection> {
    clustered(pool, embedder, a, 1, opts, SelectionMethod::Cluster)
}

/// Top-τ variant: every center contributes its τ most similar untaken
/// members, for `min(τ·a, |pool|)` points in total.
pub fn select_points_tau(
    pool: &EntityPool,
    embedder: &Embedder,
    a: usize,
    tau: usize,
    opts: &ClusterOptions,
) -> Result<PointSelection> {
    clustered(pool, embedder, a, tau, opts, SelectionMethod::Tau)
}

/// Clustering selection over a pool built from demonstration labels.
pub fn select_points_restricted(
    pool: &EntityPool,
    embedder: &Embedder,
    a: usize,
    opts: &ClusterOptions,
) -> Result<PointSelection> {
    clustered(pool, embedder, a, 1, opts, SelectionMethod::Restricted)
}

fn clustered(
    pool: &EntityPool,
    embedder: &Embedder,
    a: usize,
    tau: usize,
    opts: &ClusterOptions,
    method: SelectionMethod,
) -> Result<PointSelection> {
    if a == 0 {
        return Err(SelectError::ZeroCount);
    }
    if tau == 0 {
        return Err(SelectError::ZeroTau);
    }
    let mut sel = PointSelection::new(pool, method, opts.seed, Some(embedder.encoder_id().to_string()), tau);
    let wanted = tau * a;
    let target = wanted.min(pool.len());
    if target < wanted {
        sel.warn(format!("pool has {} entities, {wanted} requested", pool.len()));
    }
    if target == 0 {
        return Ok(sel);
    }
    let surfaces: Vec<String> = pool.iter().map(str::to_string).collect();
    let embedded = embedder.embed_batch(&surfaces)?;
    let vectors: Vec<&[f64]> = embedded.iter().map(|e| &*e.vector).collect();
    let km = kmeans_with(&vectors, a, &opts.kmeans_params(), opts.exec)?;

    let mut order: Vec<usize> = (0..km.centers.len()).collect();
    order.sort_by(|&x, &y| km.centers[y].member_count.cmp(&km.centers[x].member_count).then(x.cmp(&y)));

    let mut taken = HashSet::new();
    for &c in &order {
        for _ in 0..tau {
            if sel.points.len() == target {
                break;
            }
            let p = decode_center(&km.centers[c].vector, &embedded, &taken)?;
            taken.insert(p.clone());
            sel.points.push(p);
        }
    }
    // fewer centers than requested (duplicate vectors): keep cycling
    while sel.points.len() < target {
        for &c in &order {
            if sel.points.len() == target {
                break;
            }
            let p = decode_center(&km.centers[c].vector, &embedded, &taken)?;
            taken.insert(p.clone());
            sel.points.push(p);
        }
    }
    Ok(sel)
}

/// Uniform sample of `a` pool members without replacement.
pub fn select_points_random(pool: &EntityPool, a: usize, seed: u64) -> Result<PointSelection> {
    if a == 0 {
        return Err(SelectError::ZeroCount);
    }
    let mut sel = PointSelection::new(pool, SelectionMethod::Random, seed, None, 1);
    let n = a.min(pool.len());
    if n < a {
        sel.warn(format!("pool has {} entities, {a} requested", pool.len()));
    }
    let mut rng = seed::rng(seed);
    sel.points = index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool.entities[i].clone())
        .collect();
    Ok(sel)
}

/// Pools built only from the gold labels of `demos`.
pub fn restrict_pool(demos: &[Demonstration], schema: &Schema) -> Pools {
    unique_from_mentions(demos.iter().flat_map(|d| d.gold.iter()), schema)
}

/// Append `extra` random pool members not already in `base`.
pub fn extend_random(base: &PointSelection, pool: &EntityPool, extra: usize, seed: u64) -> PointSelection {
    let chosen: HashSet<&str> = base.points.iter().map(String::as_str).collect();
    let rest: Vec<&String> = pool.entities.iter().filter(|e| !chosen.contains(e.as_str())).collect();
    let mut sel = base.clone();
    sel.method = SelectionMethod::Extend;
    sel.seed = seed;
    let n = extra.min(rest.len());
    if n < extra {
        sel.warn(format!("only {} entities left to extend with, {extra} requested", rest.len()));
    }
    let mut rng = seed::rng(seed);
    sel.points
        .extend(index::sample(&mut rng, rest.len(), n).into_iter().map(|i| rest[i].clone()));
    sel
}
