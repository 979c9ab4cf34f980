//! Consensus-preserving LQR: rank-one shift of the consensus mode, the
//! algebraic Riccati solve through the Hamiltonian stable eigenspace, and
//! the PBH controllability test.

use ndarray::prelude::*;
use ndarray_linalg::SVD;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fgram::{self, SpectrumMethod};
use crate::linalg::{self, C64};
use crate::sysmodel::{zero_tolerance, LinearModel};

/// Right/left eigenvector pair of the structural zero eigenvalue,
/// normalized so that w0' v0 = 1 and |v0| = 1.
#[derive(Debug, Clone)]
pub struct ConsensusEigenpair {
    pub v0: Array1<f64>,
    pub w0: Array1<f64>,
}

/// LQR design matrices. Q must be PSD with its only null direction along
/// the consensus eigenvector; R must be symmetric positive definite.
#[derive(Debug, Clone)]
pub struct LqrWeights {
    pub q: Array2<f64>,
    pub r: Array2<f64>,
}

impl LqrWeights {
    /// Reference weights: penalize angle spread around the mean and all
    /// remaining states one-to-one, expressed in the mass-scaled basis,
    /// with unit input weight.
    pub fn angle_consensus_default(model: &LinearModel) -> Self {
        let n = model.n;
        let minv = model.m_diag.mapv(|m| 1.0 / m);
        let mhalf_inv = model.m_diag.mapv(|m| 1.0 / m.sqrt());
        let mut q = Array2::<f64>::zeros((4 * n, 4 * n));
        for i in 0..n {
            for j in 0..n {
                let delta = if i == j { 1.0 } else { 0.0 };
                q[[i, j]] = mhalf_inv[i] * (delta - 1.0 / n as f64) * mhalf_inv[j];
            }
        }
        for k in 1..4 {
            for i in 0..n {
                q[[k * n + i, k * n + i]] = minv[i];
            }
        }
        LqrWeights { q, r: Array2::eye(n) }
    }

    pub fn validate(&self, v0: &Array1<f64>) -> Result<()> {
        let qn = linalg::frob(&self.q).max(1e-300);
        if linalg::frob(&(&self.q - &self.q.t().to_owned())) > 1e-10 * qn {
            return Err(Error::Parameter("Q must be symmetric".into()));
        }
        let rn = linalg::frob(&self.r).max(1e-300);
        if linalg::frob(&(&self.r - &self.r.t().to_owned())) > 1e-10 * rn {
            return Err(Error::Parameter("R must be symmetric".into()));
        }
        let (qe, _) = linalg::eigh_sym(&self.q)?;
        if qe.iter().cloned().fold(f64::INFINITY, f64::min) < -1e-10 * qn {
            return Err(Error::Parameter("Q must be positive semidefinite".into()));
        }
        let (re, _) = linalg::eigh_sym(&self.r)?;
        if re.iter().cloned().fold(f64::INFINITY, f64::min) <= 0.0 {
            return Err(Error::Parameter("R must be positive definite".into()));
        }
        let qv = self.q.dot(v0);
        let qv_norm = qv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if qv_norm > 1e-9 * qn {
            return Err(Error::Parameter(format!(
                "Q does not annihilate the consensus direction (|Q v0| = {qv_norm:.3e})"
            )));
        }
        Ok(())
    }
}

/// Stabilizing solution of the consensus-shifted ARE together with the
/// feedback gain it induces.
#[derive(Debug, Clone, Serialize)]
pub struct RiccatiSolution {
    #[serde(serialize_with = "crate::io::ser_mat")]
    pub x: Array2<f64>,
    #[serde(serialize_with = "crate::io::ser_mat")]
    pub k: Array2<f64>,
    pub epsilon: f64,
    pub residual: f64,
    #[serde(serialize_with = "crate::io::ser_eigs")]
    pub closed_loop_eigs: Vec<C64>,
}

/// Compute the consensus eigenpair of a consensus-stable state matrix.
/// Small problems use the SVD directly; large ones use shifted inverse
/// iteration on one LU factorization with an SVD fallback.
pub fn consensus_pair(a: &Array2<f64>) -> Result<ConsensusEigenpair> {
    let m = a.nrows();
    if a.ncols() != m {
        return Err(Error::Dimension("state matrix must be square".into()));
    }
    let scale = linalg::frob(a).max(1.0);
    let res_tol = 1e-9 * scale;

    let (mut v0, mut w0) = if m <= 600 {
        svd_null_pair(a)?
    } else {
        match inverse_iteration_pair(a, res_tol) {
            Ok(pair) => pair,
            Err(_) => svd_null_pair(a)?,
        }
    };

    let rv = a.dot(&v0).iter().map(|x| x * x).sum::<f64>().sqrt();
    let rw = a.t().dot(&w0).iter().map(|x| x * x).sum::<f64>().sqrt();
    if rv > res_tol || rw > res_tol {
        return Err(Error::ConsensusStructure(format!(
            "null-vector residuals too large: |A v0| = {rv:.3e}, |A' w0| = {rw:.3e} (tol {res_tol:.3e})"
        )));
    }

    // multiplicity check on problems small enough for a dense eigensolve
    if m <= 600 {
        let ev = linalg::eigvals(a)?;
        let tol = zero_tolerance(a);
        let zeros = ev.iter().filter(|l| l.norm() < tol).count();
        if zeros != 1 {
            return Err(Error::ConsensusStructure(format!(
                "zero eigenvalue multiplicity is {zeros}, expected 1"
            )));
        }
    }

    // canonical sign: angle-block entries of v0 mostly positive
    let quarter = m / 4;
    if v0.slice(s![..quarter.max(1)]).sum() < 0.0 {
        v0.mapv_inplace(|x| -x);
    }
    let beta = w0.dot(&v0);
    if beta.abs() < 1e-10 {
        return Err(Error::ConsensusStructure(
            "left and right null vectors are numerically orthogonal".into(),
        ));
    }
    w0.mapv_inplace(|x| x / beta);
    Ok(ConsensusEigenpair { v0, w0 })
}

fn svd_null_pair(a: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let (u, _s, vt) = a.svd(true, true)?;
    let u = u.expect("requested");
    let vt = vt.expect("requested");
    let last = a.nrows() - 1;
    let v0 = vt.row(last).to_owned();
    let w0 = u.column(last).to_owned();
    Ok((v0, w0))
}

fn inverse_iteration_pair(a: &Array2<f64>, res_tol: f64) -> Result<(Array1<f64>, Array1<f64>)> {
    use ndarray_linalg::{Factorize, Solve};
    let m = a.nrows();
    let shift = 1e-10 * linalg::frob(a).max(1.0);
    let mut shifted = a.clone();
    for i in 0..m {
        shifted[[i, i]] -= shift;
    }
    let lu = shifted.factorize()?;
    let normalize = |v: &mut Array1<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.mapv_inplace(|x| x / n);
    };
    let mut v = Array1::<f64>::ones(m);
    normalize(&mut v);
    let mut w = v.clone();
    for _ in 0..8 {
        v = lu.solve(&v)?;
        normalize(&mut v);
        let res = a.dot(&v).iter().map(|x| x * x).sum::<f64>().sqrt();
        if res <= res_tol {
            break;
        }
    }
    for _ in 0..8 {
        w = lu.solve_t(&w)?;
        normalize(&mut w);
        let res = a.t().dot(&w).iter().map(|x| x * x).sum::<f64>().sqrt();
        if res <= res_tol {
            break;
        }
    }
    Ok((v, w))
}

/// Rank-one spectral shift of the consensus mode: A - eps v0 w0'.
pub fn shift_consensus(
    a: &Array2<f64>,
    pair: &ConsensusEigenpair,
    epsilon: f64,
) -> Result<Array2<f64>> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Parameter(format!("epsilon must be positive and finite, got {epsilon}")));
    }
    let m = a.nrows();
    let mut out = a.clone();
    for i in 0..m {
        for j in 0..m {
            out[[i, j]] -= epsilon * pair.v0[i] * pair.w0[j];
        }
    }
    Ok(out)
}

/// Stabilizing CARE solution for (A_eps, G, Q) through the Hamiltonian
/// stable eigenspace, with one Newton refinement step if the residual is
/// above tolerance. Returns (X, residual).
pub fn solve_care(
    a_eps: &Array2<f64>,
    g: &Array2<f64>,
    q: &Array2<f64>,
) -> Result<(Array2<f64>, f64)> {
    let spectrum = fgram::hamiltonian_spectrum(a_eps, g, q, a_eps.nrows(), SpectrumMethod::Dense)
        .map_err(|e| Error::Riccati(format!("ill-posed ARE: {e}")))?;
    let x = fgram::riccati_from_spectrum(&spectrum)?;
    finish_care(a_eps, g, q, x)
}

/// Residual check with one Newton refinement step on a candidate solution.
pub fn finish_care(
    a_eps: &Array2<f64>,
    g: &Array2<f64>,
    q: &Array2<f64>,
    mut x: Array2<f64>,
) -> Result<(Array2<f64>, f64)> {
    let tol = 1e-8 * linalg::frob(q).max(1e-300);
    let mut residual = care_residual(a_eps, g, q, &x);
    if residual > tol {
        let a_cl = a_eps - &g.dot(&x);
        let resid_mat = a_eps.t().dot(&x) + x.dot(a_eps) + q - &x.dot(g).dot(&x);
        let delta = linalg::lyap(&a_cl.t().to_owned(), &resid_mat)?;
        x = linalg::symmetrize(&(&x + &delta));
        residual = care_residual(a_eps, g, q, &x);
        if residual > tol {
            return Err(Error::Riccati(format!(
                "residual {residual:.3e} above tolerance {tol:.3e} after refinement"
            )));
        }
    }
    Ok((x, residual))
}

pub fn care_residual(
    a_eps: &Array2<f64>,
    g: &Array2<f64>,
    q: &Array2<f64>,
    x: &Array2<f64>,
) -> f64 {
    let resid = a_eps.t().dot(x) + x.dot(a_eps) + q - &x.dot(g).dot(x);
    linalg::frob(&resid)
}

/// Full consensus-preserving LQR: consensus pair, rank-one shift, ARE solve
/// and the solution-quality checks on the way out.
pub fn solve_cplqr(
    a: &Array2<f64>,
    b: &Array2<f64>,
    weights: &LqrWeights,
    epsilon: f64,
) -> Result<RiccatiSolution> {
    let pair = consensus_pair(a)?;
    solve_cplqr_with_pair(a, b, weights, epsilon, &pair)
}

/// Same as [`solve_cplqr`] with a precomputed consensus pair.
pub fn solve_cplqr_with_pair(
    a: &Array2<f64>,
    b: &Array2<f64>,
    weights: &LqrWeights,
    epsilon: f64,
    pair: &ConsensusEigenpair,
) -> Result<RiccatiSolution> {
    weights.validate(&pair.v0)?;
    let a_eps = shift_consensus(a, pair, epsilon)?;
    let r_inv_bt = linalg::solve_multi(&weights.r, &b.t().to_owned())?;
    let g = b.dot(&r_inv_bt);
    let (x, residual) = solve_care(&a_eps, &g, &weights.q)?;

    let x_norm = linalg::frob(&x).max(1e-300);
    let (xe, _) = linalg::eigh_sym(&x)?;
    let min_eig = xe.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-10 * x_norm {
        return Err(Error::Riccati(format!(
            "solution is indefinite (min eigenvalue {min_eig:.3e})"
        )));
    }
    let xv = x.dot(&pair.v0);
    let xv_norm = xv.iter().map(|z| z * z).sum::<f64>().sqrt();
    if xv_norm > 1e-8 * x_norm {
        return Err(Error::Riccati(format!(
            "solution does not annihilate the consensus direction (|X v0|/|X| = {:.3e})",
            xv_norm / x_norm
        )));
    }

    let k = r_inv_bt.t().dot(&x);
    Ok(RiccatiSolution { x, k, epsilon, residual, closed_loop_eigs: Vec::new() })
}

impl RiccatiSolution {
    /// Fill in the closed-loop spectrum of A - B K.
    pub fn with_closed_loop(mut self, a: &Array2<f64>, b: &Array2<f64>) -> Result<Self> {
        let a_cl = a - &b.dot(&self.k);
        self.closed_loop_eigs = linalg::eigvals(&a_cl)?.to_vec();
        Ok(self)
    }
}

/// PBH controllability report: the minimum singular value of [A - lambda I, B]
/// for every eigenvalue of A, against a scale-aware threshold.
#[derive(Debug, Clone)]
pub struct PbhReport {
    pub tests: Vec<(C64, f64)>,
    pub threshold: f64,
    pub controllable: bool,
}

pub fn pbh_check(a: &Array2<f64>, b: &Array2<f64>) -> Result<PbhReport> {
    let m = a.nrows();
    let p = b.ncols();
    if b.nrows() != m {
        return Err(Error::Dimension("B row count must match A".into()));
    }
    let scale = (linalg::frob(a).powi(2) + linalg::frob(b).powi(2)).sqrt();
    let threshold = 1e-8 * scale;
    let evs = linalg::eigvals(a)?;
    let mut tests = Vec::with_capacity(m);
    for &lam in evs.iter() {
        let mut pencil = Array2::<C64>::zeros((m, m + p));
        for i in 0..m {
            for j in 0..m {
                pencil[[i, j]] = C64::new(a[[i, j]], 0.0);
            }
            pencil[[i, i]] -= lam;
            for j in 0..p {
                pencil[[i, m + j]] = C64::new(b[[i, j]], 0.0);
            }
        }
        let s = linalg::singular_values_c(&pencil)?;
        let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
        tests.push((lam, smin));
    }
    let controllable = tests.iter().all(|&(_, s)| s > threshold);
    Ok(PbhReport { tests, threshold, controllable })
}
