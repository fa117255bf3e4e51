//! Encoded concept discovery.
//!
//! Two algorithms partition a layer's word vectors into K clusters:
//!
//! - [`kmeans`]: Lloyd iterations from k-means++ seeding. This is the default.
//! - [`ward_agglomerative`]: exact Ward linkage, for small inputs.
//!
//! Distances are squared Euclidean on the raw vectors unless the caller asks
//! for unit-normalized rows.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{EmbeddingMatrix, TokenIndex, TokenOccurrence};

/// Rows per work unit. Partial sums are reduced in chunk order, so results
/// do not depend on the thread count.
const CHUNK_ROWS: usize = 512;

pub const DEFAULT_WARD_CEILING: usize = 20_000;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot form {k} clusters from {count} points")]
    TooFewPoints { k: usize, count: usize },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },
    #[error("{count} points exceed the exact Ward ceiling of {ceiling}; use kmeans for inputs this large")]
    WardTooLarge { count: usize, ceiling: usize },
    #[error("assignment has {labels} labels but the token index has {occurrences} entries")]
    LengthMismatch { labels: usize, occurrences: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    MalformedClusterFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Kmeans,
    Ward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Move the farthest point into each cluster that empties out.
    pub repair_empty: bool,
    /// Scale rows to unit length before clustering.
    pub normalize: bool,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            rel_tol: 1e-6,
            repair_empty: true,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Cluster id per input row.
    pub labels: Vec<usize>,
    /// `k * dim`, row-major member means (the last Lloyd centroids for K-means).
    pub centroids: Vec<f64>,
    pub dim: usize,
    /// Within-cluster sum of squared distances.
    pub objective: f64,
    pub iterations: usize,
    /// Objective after each assignment step, ending with the objective at the
    /// final centroids.
    pub objective_history: Vec<f64>,
    pub repairs: usize,
    /// Ids left without members (only when repair is off).
    pub empty_clusters: Vec<usize>,
}

impl ClusterAssignment {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn to_f64_rows(matrix: &EmbeddingMatrix, normalize: bool) -> Result<Vec<f64>, ClusterError> {
    let d = matrix.dim as usize;
    let mut out: Vec<f64> = Vec::with_capacity(matrix.values.len());
    for (r, row) in matrix.rows().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ClusterError::NonFinite { row: r });
        }
        let start = out.len();
        out.extend(row.iter().map(|&v| v as f64));
        if normalize {
            let norm = out[start..start + d].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                out[start..start + d].iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    Ok(out)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn ordered_sum(values: &[f64]) -> f64 {
    let partial: Vec<f64> = values.par_chunks(CHUNK_ROWS).map(|c| c.iter().sum()).collect();
    partial.iter().sum()
}

fn kmeans_plus_plus(x: &[f64], n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * d);
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut d2: Vec<f64> = x.par_chunks(d).map(|p| sq_dist(p, &x[first * d..(first + 1) * d])).collect();

    for _ in 1..k {
        let total = ordered_sum(&d2);
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total has a positive weight")
        } else {
            // Every remaining point coincides with a centroid.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = &x[pick * d..(pick + 1) * d];
        centroids.extend_from_slice(c);
        d2.par_chunks_mut(CHUNK_ROWS)
            .zip(x.par_chunks(CHUNK_ROWS * d))
            .for_each(|(dc, xc)| {
                for (w, p) in dc.iter_mut().zip(xc.chunks_exact(d)) {
                    let nd = sq_dist(p, c);
                    if nd < *w {
                        *w = nd;
                    }
                }
            });
    }
    centroids
}

/// Assigns each point to its nearest centroid, keeping the current label on
/// ties and otherwise preferring the smallest id. Returns whether any label
/// changed.
fn assign(x: &[f64], d: usize, centroids: &[f64], labels: &mut [usize], dists: &mut [f64]) -> bool {
    labels
        .par_chunks_mut(CHUNK_ROWS)
        .zip(dists.par_chunks_mut(CHUNK_ROWS))
        .zip(x.par_chunks(CHUNK_ROWS * d))
        .map(|((lc, dc), xc)| {
            let mut changed = false;
            for ((l, dist), p) in lc.iter_mut().zip(dc.iter_mut()).zip(xc.chunks_exact(d)) {
                let mut best = usize::MAX;
                let mut best_d = f64::INFINITY;
                for (c, cent) in centroids.chunks_exact(d).enumerate() {
                    let cd = sq_dist(p, cent);
                    if cd < best_d {
                        best_d = cd;
                        best = c;
                    }
                }
                if *l != usize::MAX && *l != best {
                    let cur = sq_dist(p, &centroids[*l * d..(*l + 1) * d]);
                    if cur <= best_d {
                        best = *l;
                        best_d = cur;
                    }
                }
                if *l != best {
                    changed = true;
                    *l = best;
                }
                *dist = best_d;
            }
            changed
        })
        .reduce(|| false, |a, b| a || b)
}

/// Member means; clusters without members keep their previous centroid.
fn update_centroids(x: &[f64], d: usize, k: usize, labels: &[usize], centroids: &mut [f64]) {
    let partials: Vec<(Vec<f64>, Vec<usize>)> = labels
        .par_chunks(CHUNK_ROWS)
        .zip(x.par_chunks(CHUNK_ROWS * d))
        .map(|(lc, xc)| {
            let mut sums = vec![0.0; k * d];
            let mut counts = vec![0usize; k];
            for (&l, p) in lc.iter().zip(xc.chunks_exact(d)) {
                counts[l] += 1;
                for (s, v) in sums[l * d..(l + 1) * d].iter_mut().zip(p) {
                    *s += v;
                }
            }
            (sums, counts)
        })
        .collect();
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (ps, pc) in partials {
        sums.iter_mut().zip(&ps).for_each(|(s, v)| *s += v);
        counts.iter_mut().zip(&pc).for_each(|(c, v)| *c += v);
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            for j in 0..d {
                centroids[c * d + j] = sums[c * d + j] / n;
            }
        }
    }
}

/// Moves, for each empty cluster in id order, the point farthest from its
/// centroid (among clusters with more than one member) into it.
fn repair_empty(labels: &mut [usize], dists: &mut [f64], k: usize) -> usize {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    let mut repairs = 0;
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for (i, &l) in labels.iter().enumerate() {
            if counts[l] > 1 && far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let Some(p) = far else { break };
        counts[labels[p]] -= 1;
        counts[c] += 1;
        labels[p] = c;
        dists[p] = 0.0;
        repairs += 1;
    }
    repairs
}

/// Lloyd's algorithm from k-means++ seeding.
///
/// Stops when the relative objective improvement falls below `rel_tol`, when
/// no label changes, or after `max_iter` assignment steps.
pub fn kmeans(matrix: &EmbeddingMatrix, params: &KMeansParams) -> Result<ClusterAssignment, ClusterError> {
    let n = matrix.count as usize;
    let d = matrix.dim as usize;
    let k = params.k;
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if n < k {
        return Err(ClusterError::TooFewPoints { k, count: n });
    }
    let x = to_f64_rows(matrix, params.normalize)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_plus_plus(&x, n, d, k, &mut rng);

    let mut labels = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut history: Vec<f64> = Vec::new();
    let mut repairs = 0;
    let mut iterations = 0;
    for _ in 0..params.max_iter.max(1) {
        iterations += 1;
        let changed = assign(&x, d, &centroids, &mut labels, &mut dists);
        let repaired = if params.repair_empty {
            repair_empty(&mut labels, &mut dists, k)
        } else {
            0
        };
        repairs += repaired;
        let objective = ordered_sum(&dists);
        let prev = history.last().copied();
        history.push(objective);
        update_centroids(&x, d, k, &labels, &mut centroids);
        if let Some(prev) = prev {
            if !changed && repaired == 0 {
                break;
            }
            if prev <= 0.0 || (prev - objective) <= params.rel_tol * prev {
                break;
            }
        }
    }
    if repairs > 0 {
        log::info!("k-means repaired {repairs} empty cluster(s)");
    }

    // Objective at the final centroids.
    let final_dists: Vec<f64> = x
        .par_chunks(d)
        .zip(labels.par_iter())
        .map(|(p, &l)| sq_dist(p, &centroids[l * d..(l + 1) * d]))
        .collect();
    let objective = ordered_sum(&final_dists);
    history.push(objective);

    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let empty_clusters = (0..k).filter(|&c| sizes[c] == 0).collect();
    Ok(ClusterAssignment {
        k,
        labels,
        centroids,
        dim: d,
        objective,
        iterations,
        objective_history: history,
        repairs,
        empty_clusters,
    })
}

/// Index of pair `(i, j)`, `i < j`, in a condensed upper-triangular matrix.
#[inline]
fn condensed(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Exact Ward agglomerative clustering cut at `k` clusters.
///
/// The merge cost of clusters A and B is the increase in within-cluster sum
/// of squares, `|A||B| / (|A|+|B|) * ||mean(A) - mean(B)||^2`, updated with
/// the Lance-Williams recurrence. Each cluster is identified by its smallest
/// member index; among equal costs the lexicographically smallest pair is
/// merged. Cluster labels are ordered by smallest member index.
pub fn ward_agglomerative(matrix: &EmbeddingMatrix, k: usize, ceiling: usize) -> Result<ClusterAssignment, ClusterError> {
    let n = matrix.count as usize;
    let d = matrix.dim as usize;
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if n < k {
        return Err(ClusterError::TooFewPoints { k, count: n });
    }
    if n > ceiling {
        return Err(ClusterError::WardTooLarge { count: n, ceiling });
    }
    let x = to_f64_rows(matrix, false)?;

    let mut cost = vec![0.0f64; n * n.saturating_sub(1) / 2];
    cost.par_chunks_mut(CHUNK_ROWS).enumerate().for_each(|(ci, chunk)| {
        // Recover (i, j) for the first entry of the chunk, then walk.
        let start = ci * CHUNK_ROWS;
        let (mut i, mut j) = {
            let mut i = 0;
            let mut base = 0;
            while base + (n - i - 1) <= start {
                base += n - i - 1;
                i += 1;
            }
            (i, i + 1 + (start - base))
        };
        for c in chunk.iter_mut() {
            *c = 0.5 * sq_dist(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
            j += 1;
            if j == n {
                i += 1;
                j = i + 1;
            }
        }
    });

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut parent: Vec<usize> = (0..n).collect();
    // Nearest later neighbour of each row: smallest cost, then smallest index.
    let mut nn = vec![usize::MAX; n];
    let mut nnd = vec![f64::INFINITY; n];

    let rescan = |i: usize, active: &[bool], cost: &[f64]| -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in i + 1..n {
            if active[j] {
                let c = cost[condensed(n, i, j)];
                if c < best.1 {
                    best = (j, c);
                }
            }
        }
        best
    };
    for i in 0..n {
        (nn[i], nnd[i]) = rescan(i, &active, &cost);
    }

    let mut clusters = n;
    while clusters > k {
        let mut a = usize::MAX;
        for i in 0..n {
            if active[i] && nn[i] != usize::MAX && (a == usize::MAX || nnd[i] < nnd[a]) {
                a = i;
            }
        }
        let b = nn[a];
        let ab = cost[condensed(n, a, b)];
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for m in 0..n {
            if !active[m] || m == a || m == b {
                continue;
            }
            let nm = size[m] as f64;
            let ma = cost[condensed(n, a.min(m), a.max(m))];
            let mb = cost[condensed(n, b.min(m), b.max(m))];
            cost[condensed(n, a.min(m), a.max(m))] = ((nm + na) * ma + (nm + nb) * mb - nm * ab) / (nm + na + nb);
        }
        active[b] = false;
        size[a] += size[b];
        parent[b] = a;
        clusters -= 1;

        (nn[a], nnd[a]) = rescan(a, &active, &cost);
        nn[b] = usize::MAX;
        nnd[b] = f64::INFINITY;
        for m in 0..b {
            if !active[m] || m == a {
                continue;
            }
            if nn[m] == b || (m < a && nn[m] == a) {
                (nn[m], nnd[m]) = rescan(m, &active, &cost);
            } else if m < a {
                let c = cost[condensed(n, m, a)];
                if c < nnd[m] || (c == nnd[m] && a < nn[m]) {
                    nn[m] = a;
                    nnd[m] = c;
                }
            }
        }
    }

    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let r = root(i);
        if label_of_root[r] == usize::MAX {
            label_of_root[r] = next;
            next += 1;
        }
        labels.push(label_of_root[r]);
    }
    let (centroids, objective) = means_and_wcss(&x, d, k, &labels);
    Ok(ClusterAssignment {
        k,
        labels,
        centroids,
        dim: d,
        objective,
        iterations: n - k,
        objective_history: vec![objective],
        repairs: 0,
        empty_clusters: Vec::new(),
    })
}

fn means_and_wcss(x: &[f64], d: usize, k: usize, labels: &[usize]) -> (Vec<f64>, f64) {
    let mut centroids = vec![0.0; k * d];
    update_centroids(x, d, k, labels, &mut centroids);
    let wcss = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(&x[i * d..(i + 1) * d], &centroids[l * d..(l + 1) * d]))
        .sum();
    (centroids, wcss)
}

/// A cluster of occurrences discovered in one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedConcept {
    pub layer: u32,
    pub cluster_id: usize,
    pub members: Vec<TokenOccurrence>,
}

impl EncodedConcept {
    pub fn id(&self) -> (u32, usize) {
        (self.layer, self.cluster_id)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// One concept per non-empty cluster; `labels[i]` belongs to `index.entries[i]`.
pub fn clusters_to_concepts(labels: &[usize], index: &TokenIndex, layer: u32) -> Result<Vec<EncodedConcept>, ClusterError> {
    if labels.len() != index.len() {
        return Err(ClusterError::LengthMismatch {
            labels: labels.len(),
            occurrences: index.len(),
        });
    }
    let mut groups: BTreeMap<usize, Vec<TokenOccurrence>> = BTreeMap::new();
    for (&l, occ) in labels.iter().zip(index.iter()) {
        groups.entry(l).or_default().push(occ.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(cluster_id, members)| EncodedConcept {
            layer,
            cluster_id,
            members,
        })
        .collect())
}

/// Copies the rows referenced by `index` into a new matrix, in index order.
pub fn gather_rows(matrix: &EmbeddingMatrix, index: &TokenIndex) -> EmbeddingMatrix {
    let d = matrix.dim as usize;
    let mut values = Vec::with_capacity(index.len() * d);
    for occ in index.iter() {
        values.extend_from_slice(matrix.row(occ.row as usize));
    }
    EmbeddingMatrix {
        layer: matrix.layer,
        dim: matrix.dim,
        count: index.len() as u64,
        values,
        level: matrix.level,
        stride_seconds: matrix.stride_seconds,
    }
}

/// Metadata written next to each cluster file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetadata {
    pub layer: u32,
    pub algorithm: Algorithm,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub iterations: usize,
    pub objective: f64,
    pub repairs: usize,
    pub empty_clusters: Vec<usize>,
    pub num_points: usize,
    pub normalized: bool,
}

/// Writes `cluster_id\trow,row,...` lines, rows being matrix rows.
pub fn write_cluster_file(path: &Path, concepts: &[EncodedConcept]) -> Result<(), ClusterError> {
    let io = |source| ClusterError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for c in concepts {
        let rows: Vec<String> = c.members.iter().map(|o| o.row.to_string()).collect();
        writeln!(out, "{}\t{}", c.cluster_id, rows.join(",")).map_err(io)?;
    }
    fs::write(path, out).map_err(io)
}

/// Reads a cluster file back into `cluster_id -> rows`.
pub fn read_cluster_file(path: &Path) -> Result<BTreeMap<usize, Vec<u64>>, ClusterError> {
    let text = fs::read_to_string(path).map_err(|source| ClusterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| ClusterError::MalformedClusterFile {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (id, rows) = line.split_once('\t').ok_or_else(|| bad("missing tab".into()))?;
        let id: usize = id.parse().map_err(|_| bad(format!("bad cluster id {id:?}")))?;
        let rows = rows
            .split(',')
            .map(|r| r.parse::<u64>().map_err(|_| bad(format!("bad row {r:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if out.insert(id, rows).is_some() {
            return Err(bad(format!("cluster {id} listed twice")));
        }
    }
    Ok(out)
}

/// Rebuilds concepts from a cluster file and the layer's token index.
pub fn concepts_from_rows(
    clusters: &BTreeMap<usize, Vec<u64>>,
    index: &TokenIndex,
    layer: u32,
) -> Result<Vec<EncodedConcept>, ClusterError> {
    let by_row: BTreeMap<u64, &TokenOccurrence> = index.iter().map(|o| (o.row, o)).collect();
    clusters
        .iter()
        .map(|(&cluster_id, rows)| {
            let members = rows
                .iter()
                .map(|r| {
                    by_row.get(r).map(|o| (*o).clone()).ok_or(ClusterError::LengthMismatch {
                        labels: *r as usize,
                        occurrences: index.len(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(EncodedConcept {
                layer,
                cluster_id,
                members,
            })
        })
        .collect()
}
