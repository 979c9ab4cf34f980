//! Generator clustering: the mass-derived weight, the clustering-based
//! projection, the Psi embedding read off the low-rank Gramian factor, the
//! weighted k-means objective with Lloyd's algorithm, and the xi evaluators.

use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgram::LowRankGramian;

/// A partition of the generators with the orthonormal-row projection it
/// induces. Cluster members are 0-based indices.
#[derive(Debug, Clone)]
pub struct ClusterPlan {
    pub clusters: Vec<Vec<usize>>,
    pub w: Array1<f64>,
    pub p: Array2<f64>,
}

impl ClusterPlan {
    pub fn r(&self) -> usize {
        self.clusters.len()
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    /// Apply the stacked projection I4 (x) P to a 4n-row matrix.
    pub fn project_stacked(&self, x: &Array2<f64>) -> Array2<f64> {
        let n = self.n();
        let r = self.r();
        assert_eq!(x.nrows(), 4 * n, "stacked operand must have 4n rows");
        let mut out = Array2::<f64>::zeros((4 * r, x.ncols()));
        for blk in 0..4 {
            let xb = x.slice(s![blk * n..(blk + 1) * n, ..]);
            out.slice_mut(s![blk * r..(blk + 1) * r, ..])
                .assign(&self.p.dot(&xb));
        }
        out
    }

    /// Apply I4 (x) P to a 4n vector.
    pub fn project_stacked_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        let n = self.n();
        let r = self.r();
        assert_eq!(x.len(), 4 * n);
        let mut out = Array1::<f64>::zeros(4 * r);
        for blk in 0..4 {
            let xb = x.slice(s![blk * n..(blk + 1) * n]).to_owned();
            out.slice_mut(s![blk * r..(blk + 1) * r]).assign(&self.p.dot(&xb));
        }
        out
    }
}

/// Row embedding of the generators built from the Gramian factor.
#[derive(Debug, Clone)]
pub struct PsiMatrix {
    pub psi: Array2<f64>,
    pub w: Array1<f64>,
}

/// Mass-derived clustering weight w = M^{1/2} 1 / sqrt(tr M), unit norm.
pub fn clustering_weight(m_diag: &Array1<f64>) -> Result<Array1<f64>> {
    if m_diag.is_empty() {
        return Err(Error::Parameter("empty inertia vector".into()));
    }
    if m_diag.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::Parameter("inertias must be positive".into()));
    }
    let tr: f64 = m_diag.sum();
    Ok(m_diag.mapv(|m| (m / tr).sqrt()))
}

/// Build the projection P for a partition: P_ij = w_j / |w_{I_i}| on the
/// members of cluster i, zero elsewhere.
pub fn build_projection(clusters: Vec<Vec<usize>>, w: &Array1<f64>) -> Result<ClusterPlan> {
    let n = w.len();
    let r = clusters.len();
    if r == 0 || r > n {
        return Err(Error::Plan(format!("need 1..={n} clusters, got {r}")));
    }
    let mut seen = vec![false; n];
    for (i, cl) in clusters.iter().enumerate() {
        if cl.is_empty() {
            return Err(Error::Plan(format!("cluster {} is empty", i + 1)));
        }
        for &j in cl {
            if j >= n {
                return Err(Error::Plan(format!("cluster {} contains index {} >= n", i + 1, j)));
            }
            if seen[j] {
                return Err(Error::Plan(format!(
                    "generator {} appears in more than one cluster",
                    j + 1
                )));
            }
            seen[j] = true;
        }
    }
    if seen.iter().any(|&s| !s) {
        let missing = seen.iter().position(|&s| !s).unwrap();
        return Err(Error::Plan(format!("generator {} is unassigned", missing + 1)));
    }
    let mut p = Array2::<f64>::zeros((r, n));
    for (i, cl) in clusters.iter().enumerate() {
        let norm = cl.iter().map(|&j| w[j] * w[j]).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::Plan(format!("cluster {} has zero weight", i + 1)));
        }
        for &j in cl {
            p[[i, j]] = w[j] / norm;
        }
    }
    Ok(ClusterPlan { clusters, w: w.clone(), p })
}

/// Stack the four state blocks of the Gramian factor side by side and
/// unweight the rows: Psi = W^{-1} [F_delta F_omega F_eq F_efd].
pub fn build_psi(gram: &LowRankGramian, w: &Array1<f64>) -> Result<PsiMatrix> {
    let rows = gram.factor.nrows();
    if rows % 4 != 0 {
        return Err(Error::Dimension(format!("factor has {rows} rows, expected a multiple of 4")));
    }
    let n = rows / 4;
    if w.len() != n {
        return Err(Error::Dimension(format!(
            "weight has {} entries for a {n}-generator factor",
            w.len()
        )));
    }
    if w.iter().any(|&x| x == 0.0) {
        return Err(Error::Plan("weight vector must be nonsingular".into()));
    }
    let m = gram.factor.ncols();
    let mut psi = Array2::<f64>::zeros((n, 4 * m));
    for blk in 0..4 {
        let fb = gram.factor.slice(s![blk * n..(blk + 1) * n, ..]);
        for i in 0..n {
            for j in 0..m {
                psi[[i, blk * m + j]] = fb[[i, j]] / w[i];
            }
        }
    }
    Ok(PsiMatrix { psi, w: w.clone() })
}

/// The weighted k-means objective sum_j w_j^2 |psi_j - c_{i(j)}|^2 with
/// weighted centroids.
pub fn kmeans_objective(psi: &PsiMatrix, clusters: &[Vec<usize>]) -> f64 {
    let dim = psi.psi.ncols();
    let mut obj = 0.0;
    for cl in clusters {
        let mut centroid = vec![0.0; dim];
        let mut wsum = 0.0;
        for &j in cl {
            let wj2 = psi.w[j] * psi.w[j];
            wsum += wj2;
            for (d, c) in centroid.iter_mut().enumerate() {
                *c += wj2 * psi.psi[[j, d]];
            }
        }
        for c in centroid.iter_mut() {
            *c /= wsum;
        }
        for &j in cl {
            let wj2 = psi.w[j] * psi.w[j];
            let dist2: f64 = (0..dim).map(|d| (psi.psi[[j, d]] - centroid[d]).powi(2)).sum();
            obj += wj2 * dist2;
        }
    }
    obj
}

/// Frobenius mismatch |(I - Pi' Pi) F| for a stacked 4n-row factor. With the
/// exact factor this is xi, with the truncated factor it is xi_kappa.
pub fn xi_frobenius(plan: &ClusterPlan, factor: &Array2<f64>) -> f64 {
    let n = plan.n();
    assert_eq!(factor.nrows(), 4 * n, "factor must have 4n rows");
    let mut acc = 0.0;
    for blk in 0..4 {
        let fb = factor.slice(s![blk * n..(blk + 1) * n, ..]);
        let proj = plan.p.t().dot(&plan.p.dot(&fb));
        let diff = &fb - &proj;
        acc += diff.iter().map(|x| x * x).sum::<f64>();
    }
    acc.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMethod {
    /// distance-squared weighted seeding
    PlusPlus,
    /// r distinct uniformly random rows, as in the reference procedure
    RandomRows,
}

#[derive(Debug, Clone)]
pub struct LloydOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub init: InitMethod,
}

impl Default for LloydOptions {
    fn default() -> Self {
        LloydOptions { restarts: 10, max_iter: 100, seed: 0, init: InitMethod::PlusPlus }
    }
}

#[derive(Debug, Clone)]
pub struct LloydOutcome {
    pub clusters: Vec<Vec<usize>>,
    pub objective: f64,
    /// objective after every iteration of the winning restart
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub restarts_run: usize,
}

/// Lloyd's algorithm on the weighted embedding, best of `restarts` seeded
/// starts. Deterministic for a fixed seed.
pub fn lloyd_cluster(psi: &PsiMatrix, r: usize, opts: &LloydOptions) -> Result<LloydOutcome> {
    let n = psi.psi.nrows();
    if r == 0 || r > n {
        return Err(Error::Parameter(format!("cluster count must be in 1..={n}, got {r}")));
    }
    if opts.max_iter == 0 {
        return Err(Error::Parameter("max_iter must be at least 1".into()));
    }
    // a uniform row translation lies in the kernel of every valid plan's
    // (I - P'P) W, so centering changes no objective but keeps the
    // embedding numerically identical across shift choices
    let dim = psi.psi.ncols();
    let w2: Vec<f64> = psi.w.iter().map(|x| x * x).collect();
    let wsum: f64 = w2.iter().sum();
    let mut centered = psi.psi.clone();
    for d in 0..dim {
        let mean: f64 = (0..n).map(|j| w2[j] * psi.psi[[j, d]]).sum::<f64>() / wsum;
        for j in 0..n {
            centered[[j, d]] -= mean;
        }
    }

    let mut best: Option<(f64, Vec<Vec<usize>>, Vec<f64>, usize)> = None;
    for restart in 0..opts.restarts.max(1) {
        let seed = crate::seed::child_seed(opts.seed, "lloyd-restart", restart as u64);
        let (clusters, trace, iters) = lloyd_once(&centered, &w2, r, seed, opts)?;
        let obj = *trace.last().expect("at least one iteration");
        let better = match &best {
            None => true,
            Some((bo, ..)) => obj < *bo,
        };
        if better {
            best = Some((obj, clusters, trace, iters));
        }
    }
    let (_, clusters, trace, iterations) = best.expect("at least one restart");
    // report the objective evaluated on the original, uncentered embedding
    let objective = kmeans_objective(psi, &clusters);
    Ok(LloydOutcome {
        clusters,
        objective,
        trace,
        iterations,
        restarts_run: opts.restarts.max(1),
    })
}

fn lloyd_once(
    points: &Array2<f64>,
    w2: &[f64],
    r: usize,
    seed: u64,
    opts: &LloydOptions,
) -> Result<(Vec<Vec<usize>>, Vec<f64>, usize)> {
    let n = points.nrows();
    let dim = points.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let dist2 = |p: ArrayView1<f64>, c: &[f64]| -> f64 {
        p.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    };

    // --- seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(r);
    match opts.init {
        InitMethod::RandomRows => {
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            for &j in idx.iter().take(r) {
                centroids.push(points.row(j).to_vec());
            }
        }
        InitMethod::PlusPlus => {
            let total_w: f64 = w2.iter().sum();
            let mut pick = rng.gen_range(0.0..total_w);
            let mut first = 0;
            for (j, &wj) in w2.iter().enumerate() {
                if pick < wj {
                    first = j;
                    break;
                }
                pick -= wj;
            }
            centroids.push(points.row(first).to_vec());
            let mut min_d2: Vec<f64> = (0..n)
                .map(|j| dist2(points.row(j), &centroids[0]))
                .collect();
            while centroids.len() < r {
                let weights: Vec<f64> = (0..n).map(|j| w2[j] * min_d2[j]).collect();
                let total: f64 = weights.iter().sum();
                let chosen = if total <= 0.0 {
                    // duplicate rows: fall back to the first point farthest
                    // from being a centroid already
                    (0..n)
                        .find(|&j| {
                            centroids.iter().all(|c| dist2(points.row(j), c) > 0.0)
                        })
                        .unwrap_or(centroids.len() % n)
                } else {
                    let mut pick = rng.gen_range(0.0..total);
                    let mut chosen = n - 1;
                    for (j, &wj) in weights.iter().enumerate() {
                        if pick < wj {
                            chosen = j;
                            break;
                        }
                        pick -= wj;
                    }
                    chosen
                };
                centroids.push(points.row(chosen).to_vec());
                for j in 0..n {
                    let d = dist2(points.row(j), centroids.last().unwrap());
                    if d < min_d2[j] {
                        min_d2[j] = d;
                    }
                }
            }
        }
    }

    let assign = |centroids: &[Vec<f64>], assignment: &mut Vec<usize>| {
        for j in 0..n {
            let mut best_i = 0;
            let mut best_d = f64::INFINITY;
            for (i, c) in centroids.iter().enumerate() {
                let d = dist2(points.row(j), c);
                if d < best_d {
                    best_d = d;
                    best_i = i; // ties keep the smallest cluster index
                }
            }
            assignment[j] = best_i;
        }
    };
    let update = |assignment: &[usize], centroids: &mut [Vec<f64>]| {
        for (i, c) in centroids.iter_mut().enumerate() {
            let mut wsum = 0.0;
            c.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..n {
                if assignment[j] == i {
                    wsum += w2[j];
                    for d in 0..dim {
                        c[d] += w2[j] * points[[j, d]];
                    }
                }
            }
            if wsum > 0.0 {
                c.iter_mut().for_each(|x| *x /= wsum);
            }
        }
    };
    let objective = |assignment: &[usize], centroids: &[Vec<f64>]| -> f64 {
        (0..n).map(|j| w2[j] * dist2(points.row(j), &centroids[assignment[j]])).sum()
    };

    let mut assignment = vec![0usize; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let prev = assignment.clone();
        assign(&centroids, &mut assignment);

        // keep exactly r nonempty clusters: reseed an empty cluster at the
        // point with the largest weighted distance to its centroid
        loop {
            let mut counts = vec![0usize; r];
            for &a in &assignment {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let donor = (0..n)
                .filter(|&j| counts[assignment[j]] > 1)
                .max_by(|&a, &b| {
                    let da = w2[a] * dist2(points.row(a), &centroids[assignment[a]]);
                    let db = w2[b] * dist2(points.row(b), &centroids[assignment[b]]);
                    da.partial_cmp(&db).unwrap()
                })
                .ok_or_else(|| Error::Plan("cannot repair empty cluster".into()))?;
            centroids[empty] = points.row(donor).to_vec();
            assignment[donor] = empty;
        }

        update(&assignment, &mut centroids);
        trace.push(objective(&assignment, &centroids));
        if iter > 0 && assignment == prev {
            break;
        }
    }

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); r];
    for (j, &a) in assignment.iter().enumerate() {
        clusters[a].push(j);
    }
    Ok((clusters, trace, iterations))
}

/// Serializable record of a clustering outcome (1-based member indices).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanRecord {
    pub clusters: Vec<Vec<usize>>,
    pub w: Vec<f64>,
    pub r: usize,
    pub objective: f64,
    pub seed: u64,
    pub iterations: usize,
}

impl PlanRecord {
    pub fn new(plan: &ClusterPlan, objective: f64, seed: u64, iterations: usize) -> Self {
        PlanRecord {
            clusters: plan
                .clusters
                .iter()
                .map(|cl| cl.iter().map(|&j| j + 1).collect())
                .collect(),
            w: plan.w.to_vec(),
            r: plan.r(),
            objective,
            seed,
            iterations,
        }
    }

    pub fn to_plan(&self) -> Result<ClusterPlan> {
        let clusters: Vec<Vec<usize>> = self
            .clusters
            .iter()
            .map(|cl| {
                cl.iter()
                    .map(|&j| {
                        if j == 0 {
                            Err(Error::Plan("cluster members are 1-based".into()))
                        } else {
                            Ok(j - 1)
                        }
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        build_projection(clusters, &Array1::from(self.w.clone()))
    }
}
