//! Spherical k-means, silhouette scores and silhouette-based choice of K.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TpbError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansOptions {
    pub n_init: usize,
    pub max_iter: usize,
    /// Stop once an assignment lowers inertia by at most this fraction.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            n_init: 10,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    /// Sum of cosine distances to the assigned centroid.
    pub inertia: f64,
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// Unit-norm centroids `[K, d]` the final labels were assigned against.
    pub centroids: Array2<f64>,
    pub assignment: ClusterAssignment,
    /// Inertia after every assignment step of the winning restart.
    pub trace: Vec<f64>,
    pub restart: usize,
}

/// Copy of `x` with unit-norm rows; fails on a zero row.
pub fn normalize_rows(x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = x.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(TpbError::InvalidArgument(format!("embedding row {i} has norm {norm}")));
        }
        row /= norm;
    }
    Ok(out)
}

/// Nearest centroid of every row (ties to the lower index) and the summed distance.
fn assign(x: &Array2<f64>, c: &Array2<f64>) -> (Vec<usize>, Vec<f64>) {
    let sims = x.dot(&c.t());
    let mut labels = Vec::with_capacity(x.nrows());
    let mut dist = Vec::with_capacity(x.nrows());
    for row in sims.rows() {
        let (mut best, mut best_sim) = (0, f64::NEG_INFINITY);
        for (k, &s) in row.iter().enumerate() {
            if s > best_sim {
                best = k;
                best_sim = s;
            }
        }
        labels.push(best);
        dist.push((1.0 - best_sim).max(0.0));
    }
    (labels, dist)
}

/// Label every row of `x` with its nearest unit-norm centroid by cosine distance.
pub fn assign_to(x: &Array2<f64>, centroids: &Array2<f64>) -> Result<ClusterAssignment> {
    if x.ncols() != centroids.ncols() {
        return Err(TpbError::Shape(format!(
            "{} embedding columns vs {} centroid columns",
            x.ncols(),
            centroids.ncols()
        )));
    }
    let (labels, dist) = assign(&normalize_rows(x)?, centroids);
    Ok(ClusterAssignment {
        labels,
        inertia: dist.iter().sum(),
    })
}

/// k-means++ seeding: a random first point, then each further centroid drawn
/// with probability proportional to its distance from the nearest chosen one.
/// On unit vectors `1 − cos` is half the squared Euclidean distance, so this
/// is the usual D² weighting.
fn seed_centroids<R: Rng + ?Sized>(x: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = x.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = x.row(*chosen.last().expect("non-empty"));
        for (i, row) in x.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min((1.0 - row.dot(&last)).max(0.0));
        }
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("a positive weight exists")
        } else {
            // Every point coincides with a chosen centroid.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    x.select(Axis(0), &chosen)
}

fn update_centroids(x: &Array2<f64>, labels: &[usize], old: &Array2<f64>) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros(old.dim());
    for (row, &l) in x.rows().into_iter().zip(labels) {
        let mut s = sums.row_mut(l);
        s += &row;
    }
    for (k, mut row) in sums.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm > 1e-12 {
            row /= norm;
        } else {
            row.assign(&old.row(k));
        }
    }
    sums
}

/// Give each empty cluster the point farthest from its own centroid among
/// clusters that can spare one. Returns whether anything moved.
fn repair_empty(x: &Array2<f64>, labels: &mut [usize], dist: &mut [f64], c: &mut Array2<f64>) -> bool {
    let k = c.nrows();
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    let mut repaired = false;
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let donor = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            })
            .expect("n ≥ K leaves a cluster with two points");
        counts[labels[donor]] -= 1;
        labels[donor] = empty;
        counts[empty] = 1;
        dist[donor] = 0.0;
        c.row_mut(empty).assign(&x.row(donor));
        repaired = true;
    }
    repaired
}

/// Lloyd iterations from `centroids` until the labels settle, the relative
/// gain drops below `tol` or the shared iteration budget runs out.
fn lloyd_phase(
    x: &Array2<f64>,
    mut centroids: Array2<f64>,
    opts: &KMeansOptions,
    trace: &mut Vec<f64>,
    iter: &mut usize,
) -> (Array2<f64>, Vec<usize>) {
    let mut previous: Option<Vec<usize>> = None;
    loop {
        let (mut labels, mut dist) = assign(x, &centroids);
        let inertia: f64 = dist.iter().sum();
        let gain = previous.as_ref().and(trace.last()).map(|&p| p - inertia);
        trace.push(inertia);
        *iter += 1;
        let settled = previous.as_ref() == Some(&labels);
        let small = gain.is_some_and(|g| g <= opts.tol * inertia.max(f64::MIN_POSITIVE));
        let mut c_next = centroids.clone();
        let repaired = repair_empty(x, &mut labels, &mut dist, &mut c_next);
        if !repaired && (settled || small || *iter >= opts.max_iter) {
            return (centroids, labels);
        }
        if repaired {
            trace.push(dist.iter().sum());
        }
        centroids = update_centroids(x, &labels, &c_next);
        previous = Some(labels);
    }
}

/// One sweep of single-point moves. A cluster's inertia is `n_c − ‖S_c‖`
/// with `S_c` the sum of its unit members, so each move is scored exactly.
/// Returns the improved labels, or `None` at a local optimum.
fn single_moves(x: &Array2<f64>, labels: &[usize], k: usize) -> Option<Vec<usize>> {
    let mut labels = labels.to_vec();
    let mut sums = Array2::<f64>::zeros((k, x.ncols()));
    let mut counts = vec![0usize; k];
    for (row, &l) in x.rows().into_iter().zip(&labels) {
        let mut s = sums.row_mut(l);
        s += &row;
        counts[l] += 1;
    }
    let norm = |v: ndarray::ArrayView1<f64>| v.dot(&v).sqrt();
    let mut moved = false;
    for (i, row) in x.rows().into_iter().enumerate() {
        let a = labels[i];
        if counts[a] < 2 {
            continue;
        }
        let leave = norm(sums.row(a)) - norm((&sums.row(a) - &row).view());
        let mut best = (a, 0.0);
        for b in (0..k).filter(|&b| b != a) {
            let delta = leave + norm(sums.row(b)) - norm((&sums.row(b) + &row).view());
            if delta < best.1 - 1e-12 {
                best = (b, delta);
            }
        }
        if best.0 != a {
            let b = best.0;
            let mut sa = sums.row_mut(a);
            sa -= &row;
            let mut sb = sums.row_mut(b);
            sb += &row;
            counts[a] -= 1;
            counts[b] += 1;
            labels[i] = b;
            moved = true;
        }
    }
    moved.then_some(labels)
}

/// Lloyd to convergence, then single-point moves wherever they lower the
/// inertia, alternating until neither changes anything. The result is still
/// a Lloyd fixed point.
fn lloyd<R: Rng + ?Sized>(
    x: &Array2<f64>,
    k: usize,
    opts: &KMeansOptions,
    rng: &mut R,
) -> (Array2<f64>, Vec<usize>, Vec<f64>) {
    let mut centroids = seed_centroids(x, k, rng);
    let mut trace = Vec::new();
    let mut iter = 0;
    loop {
        let (c, labels) = lloyd_phase(x, centroids, opts, &mut trace, &mut iter);
        if iter >= opts.max_iter {
            return (c, labels, trace);
        }
        match single_moves(x, &labels, k) {
            Some(better) => centroids = update_centroids(x, &better, &c),
            None => return (c, labels, trace),
        }
    }
}

/// Cosine k-means with `n_init` k-means++ seeded restarts; the restart
/// with the lowest inertia wins, earlier restarts winning ties.
pub fn kmeans_cosine<R: Rng + ?Sized>(
    embeddings: &Array2<f64>,
    k: usize,
    opts: &KMeansOptions,
    rng: &mut R,
) -> Result<KMeansFit> {
    if k < 2 {
        return Err(TpbError::InvalidArgument(format!("K = {k}, need at least 2 clusters")));
    }
    if embeddings.nrows() < k {
        return Err(TpbError::InvalidArgument(format!(
            "K = {k} exceeds the {} points",
            embeddings.nrows()
        )));
    }
    if opts.n_init == 0 || opts.max_iter == 0 {
        return Err(TpbError::Config("n_init and max_iter must be positive".into()));
    }
    let x = normalize_rows(embeddings)?;
    let mut best: Option<KMeansFit> = None;
    for restart in 0..opts.n_init {
        let (centroids, labels, trace) = lloyd(&x, k, opts, rng);
        let inertia = *trace.last().expect("at least one assignment");
        if best.as_ref().is_none_or(|b| inertia < b.assignment.inertia) {
            best = Some(KMeansFit {
                centroids,
                assignment: ClusterAssignment { labels, inertia },
                trace,
                restart,
            });
        }
    }
    Ok(best.expect("n_init ≥ 1"))
}

/// Per-point silhouette values with cosine distance; points alone in their
/// cluster score 0.
pub fn silhouette_samples(embeddings: &Array2<f64>, labels: &[usize]) -> Result<Vec<f64>> {
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(TpbError::Shape(format!("{} labels for {n} points", labels.len())));
    }
    if n < 3 {
        return Err(TpbError::InvalidArgument(format!("silhouette needs 3 points, got {n}")));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(TpbError::InvalidArgument(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let x = normalize_rows(embeddings)?;
    let mut dist = x.dot(&x.t());
    dist.mapv_inplace(|s| 1.0 - s);
    dist.diag_mut().fill(0.0);
    let mut onehot = Array2::<f64>::zeros((n, k));
    for (i, &l) in labels.iter().enumerate() {
        onehot[[i, l]] = 1.0;
    }
    let sums = dist.dot(&onehot);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let own = labels[i];
        if counts[own] == 1 {
            out.push(0.0);
            continue;
        }
        let a = sums[[i, own]] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[[i, c]] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        out.push(if denom > 0.0 { (b - a) / denom } else { 0.0 });
    }
    Ok(out)
}

/// Mean silhouette over all points.
pub fn silhouette(embeddings: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let s = silhouette_samples(embeddings, labels)?;
    Ok(Array1::from(s).mean().expect("non-empty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub silhouette: f64,
    pub inertia: f64,
}

/// Cluster at every K of the grid and keep the best silhouette, ties going to
/// the smaller K.
pub fn select_k<R: Rng + ?Sized>(
    embeddings: &Array2<f64>,
    k_grid: &[usize],
    opts: &KMeansOptions,
    rng: &mut R,
) -> Result<(usize, Vec<KScore>)> {
    if k_grid.is_empty() {
        return Err(TpbError::InvalidArgument("empty K grid".into()));
    }
    let mut grid = k_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut scores = Vec::with_capacity(grid.len());
    for &k in &grid {
        let fit = kmeans_cosine(embeddings, k, opts, rng)?;
        let s = silhouette(embeddings, &fit.assignment.labels)?;
        scores.push(KScore {
            k,
            silhouette: s,
            inertia: fit.assignment.inertia,
        });
    }
    let best = scores
        .iter()
        .fold(None, |best: Option<&KScore>, s| match best {
            Some(b) if b.silhouette >= s.silhouette => Some(b),
            _ => Some(s),
        })
        .expect("non-empty grid");
    Ok((best.k, scores))
}
