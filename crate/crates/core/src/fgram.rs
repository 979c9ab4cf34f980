//! Frequency-limited Gramian machinery: the band correction matrix S,
//! the Lyapunov route, the Hamiltonian eigenstructure with its Cauchy-kernel
//! closed form, rank-kappa truncation with conjugate closure, and the
//! truncation error bound.

use ndarray::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{self, C64};

/// Positive, finite band edge in rad/s. The norm and Gramians integrate
/// over [-omega, omega].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqBand(f64);

impl FreqBand {
    pub fn new(omega: f64) -> Result<Self> {
        if !(omega > 0.0) || !omega.is_finite() {
            return Err(Error::Parameter(format!(
                "band edge must be positive and finite, got {omega}"
            )));
        }
        Ok(FreqBand(omega))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

/// How to obtain the stable Hamiltonian eigenpairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumMethod {
    /// Dense eigendecomposition of the full Hamiltonian.
    Dense,
    /// Shift-invert Arnoldi at the origin for the smallest-magnitude pairs.
    ShiftInvert,
}

/// Everything retained from the dense basis: needed to recover the Riccati
/// solution and the exact Gramian.
#[derive(Debug, Clone)]
pub struct FullBasis {
    pub z: Array2<C64>,
    pub zbar: Array2<C64>,
    pub zinv: Array2<C64>,
}

/// Stable Hamiltonian eigenstructure, sorted by ascending eigenvalue
/// magnitude with conjugate pairs adjacent (positive imaginary part first).
#[derive(Debug, Clone)]
pub struct HamiltonianSpectrum {
    /// state dimension (4n)
    pub dim: usize,
    /// stable eigenvalues: all of them on the dense path, only the retained
    /// ones on the iterative path
    pub eigenvalues: Vec<C64>,
    /// number of retained eigenpairs (conjugate-closed)
    pub retained: usize,
    /// top halves of the retained eigenvectors, dim x retained
    pub z: Array2<C64>,
    /// retained rows of the eigenvector inverse: exact on the dense path,
    /// pseudo-inverse of the retained columns otherwise
    pub zinv: Array2<C64>,
    pub full_basis: Option<FullBasis>,
}

impl HamiltonianSpectrum {
    pub fn is_full(&self) -> bool {
        self.full_basis.is_some()
    }

    /// Eigenvalues beyond the retained set (empty on the iterative path).
    pub fn tail(&self) -> &[C64] {
        &self.eigenvalues[self.retained.min(self.eigenvalues.len())..]
    }
}

/// Low-rank band Gramian factor with its bookkeeping.
#[derive(Debug, Clone)]
pub struct LowRankGramian {
    /// real factor, dim x kappa_eff, with factor * factor' = Phi_kappa
    pub factor: Array2<f64>,
    pub retained: Vec<C64>,
    pub kappa: usize,
    pub kappa_eff: usize,
    /// condition estimate from the pseudo-inverse of the retained columns
    pub eta_pinv: f64,
    /// exact condition number of the full eigenvector matrix, when known
    pub eta_exact: Option<f64>,
    /// Theorem-style worst-case gap bound; requires the tail spectrum
    pub bound: Option<f64>,
    /// column norms of B_d used to rescale the bound to unit columns
    pub bd_col_norms: Vec<f64>,
}

fn sort_key(l: &C64) -> (f64, f64, f64, i8) {
    // conjugate pairs share the first three keys; +Im comes first
    (l.norm(), l.re, l.im.abs(), if l.im >= 0.0 { 0 } else { 1 })
}

fn sort_indices(values: &[C64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| {
        let a = sort_key(&values[i]);
        let b = sort_key(&values[j]);
        a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

/// Extend a cut to keep conjugate pairs together.
fn conjugate_closed_count(values: &[C64], kappa: usize) -> usize {
    let mut k = kappa.min(values.len());
    let complex_count = values[..k].iter().filter(|l| l.im != 0.0).count();
    if complex_count % 2 == 1 {
        k += 1;
    }
    k.min(values.len())
}

/// Stable eigenpairs of the Hamiltonian [[A_eps, -G], [-Q, -A_eps']].
/// The dense path computes everything and keeps the full basis; the
/// shift-invert path computes only the requested smallest-magnitude pairs.
pub fn hamiltonian_spectrum(
    a_eps: &Array2<f64>,
    g: &Array2<f64>,
    q: &Array2<f64>,
    kappa: usize,
    method: SpectrumMethod,
) -> Result<HamiltonianSpectrum> {
    let d = a_eps.nrows();
    if a_eps.ncols() != d || g.dim() != (d, d) || q.dim() != (d, d) {
        return Err(Error::Dimension("Hamiltonian blocks must all be d x d".into()));
    }
    if kappa == 0 || kappa > d {
        return Err(Error::Parameter(format!("kappa must be in 1..={d}")));
    }
    let mut h = Array2::<f64>::zeros((2 * d, 2 * d));
    h.slice_mut(s![..d, ..d]).assign(a_eps);
    h.slice_mut(s![..d, d..]).assign(&(-g));
    h.slice_mut(s![d.., ..d]).assign(&(-q));
    h.slice_mut(s![d.., d..]).assign(&(-&a_eps.t()));

    match method {
        SpectrumMethod::Dense => dense_spectrum(&h, d, kappa),
        SpectrumMethod::ShiftInvert => shift_invert_spectrum(&h, d, kappa),
    }
}

fn dense_spectrum(h: &Array2<f64>, d: usize, kappa: usize) -> Result<HamiltonianSpectrum> {
    let (ev, vecs) = linalg::eig(h)?;
    let axis_tol = 1e-10 * (linalg::frob(h) / (2 * d) as f64).max(1.0);
    let stable: Vec<usize> = (0..2 * d).filter(|&i| ev[i].re < 0.0).collect();
    if stable.len() != d {
        return Err(Error::Spectrum(format!(
            "expected {d} stable Hamiltonian eigenvalues, found {}",
            stable.len()
        )));
    }
    if ev.iter().any(|l| l.re.abs() < axis_tol) {
        return Err(Error::Spectrum(
            "Hamiltonian eigenvalue on the imaginary axis; the shifted ARE is ill posed".into(),
        ));
    }
    let values: Vec<C64> = stable.iter().map(|&i| ev[i]).collect();
    let order = sort_indices(&values);
    let mut z = Array2::<C64>::zeros((d, d));
    let mut zbar = Array2::<C64>::zeros((d, d));
    let mut sorted_vals = Vec::with_capacity(d);
    for (col, &oi) in order.iter().enumerate() {
        let src = vecs.column(stable[oi]);
        z.column_mut(col).assign(&src.slice(s![..d]));
        zbar.column_mut(col).assign(&src.slice(s![d..]));
        sorted_vals.push(values[oi]);
    }
    let zinv = linalg::inv_c(&z)
        .map_err(|_| Error::Spectrum("stable eigenvector top block is singular".into()))?;
    let retained = conjugate_closed_count(&sorted_vals, kappa);
    Ok(HamiltonianSpectrum {
        dim: d,
        z: z.slice(s![.., ..retained]).to_owned(),
        zinv: zinv.slice(s![..retained, ..]).to_owned(),
        eigenvalues: sorted_vals,
        retained,
        full_basis: Some(FullBasis { z, zbar, zinv }),
    })
}

fn shift_invert_spectrum(h: &Array2<f64>, d: usize, kappa: usize) -> Result<HamiltonianSpectrum> {
    use ndarray_linalg::{Factorize, Solve};
    let two_d = 2 * d;
    let lu = h
        .factorize()
        .map_err(|_| Error::Spectrum("Hamiltonian is singular; cannot shift-invert at 0".into()))?;
    let h_scale = linalg::frob(h).max(1.0);

    let mut subspace = (8 * kappa + 24).clamp(32, two_d);
    for attempt in 0..2 {
        // Arnoldi with full re-orthogonalization on v -> H^{-1} v
        let m = subspace;
        let mut basis: Vec<Array1<f64>> = Vec::with_capacity(m + 1);
        let mut hess = Array2::<f64>::zeros((m + 1, m));
        let mut v0 = Array1::<f64>::ones(two_d);
        let n0 = (two_d as f64).sqrt();
        v0.mapv_inplace(|x| x / n0);
        basis.push(v0);
        let mut steps = m;
        for j in 0..m {
            let mut w = lu.solve(&basis[j])?;
            // classical Gram-Schmidt with one re-orthogonalization pass
            for _pass in 0..2 {
                for (i, vb) in basis.iter().enumerate() {
                    let proj = vb.dot(&w);
                    hess[[i, j]] += proj;
                    w = w - &vb.mapv(|x| x * proj);
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            hess[[j + 1, j]] = norm;
            if norm < 1e-14 {
                steps = j + 1;
                break;
            }
            basis.push(w.mapv(|x| x / norm));
        }
        let k = steps;
        let hk = hess.slice(s![..k, ..k]).to_owned();
        let (mu, y) = linalg::eig(&hk)?;

        // Ritz values of H^{-1} map to eigenvalues 1/mu of H
        let mut cands: Vec<(C64, usize)> = (0..k)
            .filter(|&i| mu[i].norm() > 1e-14)
            .map(|i| (1.0 / mu[i], i))
            .filter(|(l, _)| l.re < 0.0)
            .collect();
        cands.sort_by(|a, b| {
            sort_key(&a.0)
                .partial_cmp(&sort_key(&b.0))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let vals: Vec<C64> = cands.iter().map(|c| c.0).collect();
        let keep = conjugate_closed_count(&vals, kappa);
        if keep > cands.len() {
            subspace = (subspace * 2).min(two_d);
            continue;
        }

        // assemble Ritz vectors and check residuals against H itself
        let mut z = Array2::<C64>::zeros((d, keep));
        let mut ok = true;
        let mut kept_vals = Vec::with_capacity(keep);
        for (col, &(lam, yi)) in cands[..keep].iter().enumerate() {
            let mut full = Array1::<C64>::zeros(two_d);
            for (i, vb) in basis.iter().take(k).enumerate() {
                let coef = y[[i, yi]];
                for r in 0..two_d {
                    full[r] += coef * vb[r];
                }
            }
            let nrm = full.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            full.mapv_inplace(|x| x / nrm);
            // residual |H z - lambda z|
            let hz = {
                let re = h.dot(&full.mapv(|x| x.re));
                let im = h.dot(&full.mapv(|x| x.im));
                Array1::from_shape_fn(two_d, |r| C64::new(re[r], im[r]))
            };
            let res: f64 = (0..two_d)
                .map(|r| (hz[r] - lam * full[r]).norm_sqr())
                .sum::<f64>()
                .sqrt();
            if res > 1e-9 * h_scale {
                ok = false;
                break;
            }
            z.column_mut(col).assign(&full.slice(s![..d]));
            kept_vals.push(lam);
        }
        if !ok {
            if attempt == 0 && subspace < two_d {
                subspace = (subspace * 2).min(two_d);
                continue;
            }
            return Err(Error::Spectrum(format!(
                "shift-invert Arnoldi did not converge with subspace {subspace}"
            )));
        }

        let zinv = pinv_tall(&z)?;
        return Ok(HamiltonianSpectrum {
            dim: d,
            eigenvalues: kept_vals,
            retained: keep,
            z,
            zinv,
            full_basis: None,
        });
    }
    Err(Error::Spectrum("shift-invert Arnoldi exhausted its subspace growth".into()))
}

/// Pseudo-inverse of a tall matrix with few columns via normal equations.
fn pinv_tall(z: &Array2<C64>) -> Result<Array2<C64>> {
    let zh = z.mapv(|x| x.conj()).t().to_owned();
    let gram = zh.dot(z);
    let ginv = linalg::inv_c(&gram)
        .map_err(|_| Error::Spectrum("retained eigenvector columns are rank deficient".into()))?;
    Ok(ginv.dot(&zh))
}

/// Recover the stabilizing Riccati solution X = Re(Zbar Z^{-1}) from the
/// full stable basis.
pub fn riccati_from_spectrum(spec: &HamiltonianSpectrum) -> Result<Array2<f64>> {
    let basis = spec
        .full_basis
        .as_ref()
        .ok_or_else(|| Error::Spectrum("Riccati recovery needs the full stable basis".into()))?;
    let x_c = basis.zbar.dot(&basis.zinv);
    let x = linalg::real_part_checked(&x_c, 1e-7, "Riccati solution")?;
    Ok(linalg::symmetrize(&x))
}

/// Angular range of the band perturbation around an eigenvalue a + ib.
pub fn theta_c(lambda: C64, band: FreqBand) -> f64 {
    let (a, b) = (lambda.re, lambda.im);
    let w = band.value();
    ((b - w) / a).atan() - ((b + w) / a).atan()
}

/// Scalar band resolvent integral (1/2pi) int_{-w}^{w} (i nu - lambda)^{-1} d nu.
/// Its real part is theta_c / 2pi.
pub fn band_resolvent_scalar(lambda: C64, band: FreqBand) -> C64 {
    let (a, b) = (lambda.re, lambda.im);
    let w = band.value();
    let theta = theta_c(lambda, band);
    let ratio = (a * a + (b - w) * (b - w)) / (a * a + (b + w) * (b + w));
    C64::new(theta, -0.5 * ratio.ln()) / (2.0 * std::f64::consts::PI)
}

/// Band correction matrix S = (1/2pi) int (i w I - A_cl)^{-1} dw through the
/// eigendecomposition of A_cl with principal-branch scalar logarithms.
pub fn s_matrix(a_cl: &Array2<f64>, band: FreqBand) -> Result<Array2<f64>> {
    let d = a_cl.nrows();
    let (ev, vecs) = linalg::eig(a_cl)?;
    let scale = (linalg::frob(a_cl) / d as f64).max(1.0);
    for l in ev.iter() {
        if l.re.abs() < 1e-12 * scale {
            return Err(Error::Stability(format!(
                "eigenvalue {l} on the imaginary axis makes the band resolvent singular"
            )));
        }
        if l.re > 0.0 {
            return Err(Error::Stability(format!(
                "matrix is not Hurwitz (eigenvalue {l}); shift the consensus mode first"
            )));
        }
    }
    let svals = Array1::from_shape_fn(d, |i| band_resolvent_scalar(ev[i], band));
    let mut vs = vecs.clone();
    for (j, s) in svals.iter().enumerate() {
        vs.column_mut(j).mapv_inplace(|x| x * s);
    }
    let s_c = linalg::solve_multi_c(&vecs.t().to_owned(), &vs.t().to_owned())?
        .t()
        .to_owned();
    linalg::real_part_checked(&s_c, 1e-9, "band correction matrix")
        .map_err(|e| Error::Spectrum(format!("principal branch failure: {e}")))
}

/// Band Gramian by the Lyapunov route:
/// A_cl Phi + Phi A_cl' + S W + W S' = 0 with W = B_d B_d'.
pub fn gramian_lyap(a_cl: &Array2<f64>, b_d: &Array2<f64>, band: FreqBand) -> Result<Array2<f64>> {
    if b_d.nrows() != a_cl.nrows() {
        return Err(Error::Dimension("B_d rows must match the closed-loop dimension".into()));
    }
    let s = s_matrix(a_cl, band)?;
    let w = b_d.dot(&b_d.t());
    let rhs = s.dot(&w) + w.dot(&s.t());
    let phi = linalg::lyap(a_cl, &rhs)?;
    let resid = a_cl.dot(&phi) + phi.dot(&a_cl.t()) + &rhs;
    let w_norm = linalg::frob(&w).max(1e-300);
    if linalg::frob(&resid) > 1e-8 * w_norm {
        return Err(Error::Lyapunov(format!(
            "band Gramian residual {:.3e} above 1e-8 x |W| = {:.3e}",
            linalg::frob(&resid),
            1e-8 * w_norm
        )));
    }
    Ok(linalg::symmetrize(&phi))
}

/// Cauchy kernel matrix for the retained block: C_ij =
/// -(Z^{-1} B_d B_d* Z^{-*})_ij (c_i + c_j*) / (lambda_i + lambda_j*).
fn cauchy_kernel(
    values: &[C64],
    zinv_rows: &Array2<C64>,
    b_d: &Array2<f64>,
    band: FreqBand,
) -> Result<Array2<C64>> {
    let m = values.len();
    let bd_c = linalg::to_complex(b_d);
    let zb = zinv_rows.dot(&bd_c);
    let cs: Vec<C64> = values.iter().map(|&l| band_resolvent_scalar(l, band)).collect();
    let max_mag = values.iter().map(|l| l.norm()).fold(1e-300, f64::max);
    let mut kernel = Array2::<C64>::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            let denom = values[i] + values[j].conj();
            if denom.norm() < 1e-13 * max_mag {
                return Err(Error::Spectrum(format!(
                    "Cauchy denominator vanished for eigenvalue pair ({}, {})",
                    values[i], values[j]
                )));
            }
            let wij: C64 = (0..zb.ncols()).map(|k| zb[[i, k]] * zb[[j, k]].conj()).sum();
            kernel[[i, j]] = -wij * (cs[i] + cs[j].conj()) / denom;
        }
    }
    Ok(kernel)
}

/// Exact band Gramian from the full Hamiltonian eigenstructure.
pub fn cauchy_gramian(
    spec: &HamiltonianSpectrum,
    b_d: &Array2<f64>,
    band: FreqBand,
) -> Result<Array2<f64>> {
    let basis = spec
        .full_basis
        .as_ref()
        .ok_or_else(|| Error::Spectrum("exact Gramian needs the full stable spectrum".into()))?;
    let kernel = cauchy_kernel(&spec.eigenvalues, &basis.zinv, b_d, band)?;
    let zk = basis.z.dot(&kernel);
    let zh = basis.z.mapv(|x| x.conj()).t().to_owned();
    let phi_c = zk.dot(&zh);
    let phi = linalg::real_part_checked(&phi_c, 1e-9, "Cauchy Gramian")?;
    Ok(linalg::symmetrize(&phi))
}

/// Block-unitary transform that maps adjacent conjugate eigenvector pairs
/// (z, conj z) to (sqrt2 Re z, sqrt2 Im z) and leaves real columns alone.
fn realifying_transform(values: &[C64]) -> Result<Array2<C64>> {
    let m = values.len();
    let mut u = Array2::<C64>::zeros((m, m));
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    let mut i = 0;
    while i < m {
        if values[i].im == 0.0 {
            u[[i, i]] = C64::new(1.0, 0.0);
            i += 1;
        } else {
            if i + 1 >= m || (values[i + 1] - values[i].conj()).norm() > 1e-9 * values[i].norm() {
                return Err(Error::Truncation(format!(
                    "eigenvalue {} has no adjacent conjugate partner",
                    values[i]
                )));
            }
            u[[i, i]] = C64::new(inv_sqrt2, 0.0);
            u[[i + 1, i]] = C64::new(inv_sqrt2, 0.0);
            u[[i, i + 1]] = C64::new(0.0, -inv_sqrt2);
            u[[i + 1, i + 1]] = C64::new(0.0, inv_sqrt2);
            i += 2;
        }
    }
    Ok(u)
}

/// Rank-kappa truncation of the band Gramian: the kappa smallest-magnitude
/// stable eigenpairs, conjugate-closed and realified into a real factor.
pub fn lowrank_gramian(
    spec: &HamiltonianSpectrum,
    b_d: &Array2<f64>,
    band: FreqBand,
    kappa: usize,
) -> Result<LowRankGramian> {
    if kappa == 0 || kappa > spec.dim {
        return Err(Error::Parameter(format!("kappa must be in 1..={}", spec.dim)));
    }
    let available = if spec.is_full() { spec.dim } else { spec.retained };
    let keep = conjugate_closed_count(&spec.eigenvalues[..available.min(spec.eigenvalues.len())], kappa);
    if keep > available {
        return Err(Error::Parameter(format!(
            "kappa={kappa} needs {keep} conjugate-closed eigenpairs but only {available} are retained"
        )));
    }
    let (z_cols, zinv_rows) = if let Some(basis) = &spec.full_basis {
        (
            basis.z.slice(s![.., ..keep]).to_owned(),
            basis.zinv.slice(s![..keep, ..]).to_owned(),
        )
    } else {
        (
            spec.z.slice(s![.., ..keep]).to_owned(),
            spec.zinv.slice(s![..keep, ..]).to_owned(),
        )
    };
    let values = &spec.eigenvalues[..keep];
    let kernel = cauchy_kernel(values, &zinv_rows, b_d, band)?;

    let u = realifying_transform(values)?;
    let uh = u.mapv(|x| x.conj()).t().to_owned();
    let z_r = linalg::real_part_checked(&z_cols.dot(&u), 1e-9, "realified eigenvectors")?;
    let kernel_r =
        linalg::real_part_checked(&uh.dot(&kernel).dot(&u), 1e-9, "realified Cauchy kernel")?;

    // eigenvalue-clipped symmetric factor of the leading kernel block
    let (vals, vecs) = linalg::eigh_sym(&kernel_r)?;
    let vmax = vals.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut droot = Array1::<f64>::zeros(keep);
    for (i, &v) in vals.iter().enumerate() {
        if v < -1e-12 * vmax {
            return Err(Error::Truncation(format!(
                "leading Cauchy block is indefinite (eigenvalue {v:.3e}) over the window ending at {}",
                values[keep - 1]
            )));
        }
        droot[i] = v.max(0.0).sqrt();
    }
    let mut half = vecs;
    for (j, d) in droot.iter().enumerate() {
        half.column_mut(j).mapv_inplace(|x| x * d);
    }
    let factor = z_r.dot(&half);

    // condition estimates
    let gram = zinv_rows_gram(&z_cols);
    let eta_pinv = gram?;
    let eta_exact = match &spec.full_basis {
        Some(basis) if spec.dim <= 400 => Some(linalg::cond2_c(&basis.z)?),
        _ => None,
    };

    let bd_col_norms: Vec<f64> = (0..b_d.ncols())
        .map(|j| b_d.column(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let bound = if spec.is_full() {
        let eta = eta_exact.unwrap_or(eta_pinv);
        let nd_eff: f64 = bd_col_norms.iter().map(|s| s * s).sum();
        Some(truncation_bound(&spec.eigenvalues[keep..], eta, nd_eff, band))
    } else {
        None
    };

    Ok(LowRankGramian {
        factor,
        retained: values.to_vec(),
        kappa,
        kappa_eff: keep,
        eta_pinv,
        eta_exact,
        bound,
        bd_col_norms,
    })
}

/// Condition number of the retained eigenvector columns from the Hermitian
/// Gram matrix Z* Z.
fn zinv_rows_gram(z_cols: &Array2<C64>) -> Result<f64> {
    use ndarray_linalg::{Eigh, UPLO};
    let zh = z_cols.mapv(|x| x.conj()).t().to_owned();
    let gram = zh.dot(z_cols);
    let (vals, _) = gram.eigh(UPLO::Lower)?;
    let max = vals.iter().cloned().fold(0.0, f64::max);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((max / min).sqrt())
}

/// Worst-case gap bound sqrt(eta^2 n_d sum_{tail} -theta_ci / (2 pi a_i)).
/// `nd_effective` is the sum of squared B_d column norms, which reduces to
/// n_d for unit columns.
pub fn truncation_bound(tail: &[C64], eta: f64, nd_effective: f64, band: FreqBand) -> f64 {
    let sum: f64 = tail
        .iter()
        .map(|&l| (-theta_c(l, band) / (2.0 * std::f64::consts::PI * l.re)).max(0.0))
        .sum();
    (eta * eta * nd_effective * sum).sqrt()
}

/// CSV rows (a_i, b_i, |lambda_i|, theta_ci) for the spectrum export.
pub fn spectrum_csv(spec: &HamiltonianSpectrum, band: FreqBand) -> String {
    let mut out = String::from("a,b,magnitude,theta_c\n");
    for &l in &spec.eigenvalues {
        out.push_str(&format!("{},{},{},{}\n", l.re, l.im, l.norm(), theta_c(l, band)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray_linalg::Solve;
    use rand::{Rng, SeedableRng};

    fn band(w: f64) -> FreqBand {
        FreqBand::new(w).unwrap()
    }

    /// composite-Simpson oracle for the band Gramian, refined until the
    /// Frobenius change is below rel_tol
    fn gramian_quadrature(a_cl: &Array2<f64>, b_d: &Array2<f64>, w: f64, rel_tol: f64) -> Array2<f64> {
        let d = a_cl.nrows();
        let eval = |omega: f64| -> Array2<f64> {
            let mut m = Array2::<C64>::zeros((d, d));
            for i in 0..d {
                for j in 0..d {
                    m[[i, j]] = C64::new(-a_cl[[i, j]], 0.0);
                }
                m[[i, i]] += C64::new(0.0, omega);
            }
            let bd_c = linalg::to_complex(b_d);
            let r = linalg::solve_multi_c(&m, &bd_c).unwrap();
            let rh = r.mapv(|x| x.conj()).t().to_owned();
            r.dot(&rh).mapv(|x| x.re)
        };
        let mut panels = 32;
        let mut prev: Option<Array2<f64>> = None;
        loop {
            let h = 2.0 * w / panels as f64;
            let mut acc = eval(-w) + eval(w);
            for k in 1..panels {
                let weight = if k % 2 == 1 { 4.0 } else { 2.0 };
                acc = acc + eval(-w + k as f64 * h) * weight;
            }
            let integral = acc * (h / 3.0 / (2.0 * std::f64::consts::PI));
            if let Some(p) = prev {
                if linalg::frob(&(&integral - &p)) <= rel_tol * linalg::frob(&integral) {
                    return integral;
                }
            }
            prev = Some(integral);
            panels *= 2;
            assert!(panels <= 1 << 14, "quadrature oracle did not converge");
        }
    }

    #[test]
    fn s_matrix_scalar_quarter() {
        let s = s_matrix(&array![[-1.0]], band(1.0)).unwrap();
        assert_relative_eq!(s[[0, 0]], 1f64.atan() / std::f64::consts::PI, epsilon = 1e-14);
        assert_relative_eq!(s[[0, 0]], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn s_matrix_full_band_limit() {
        let s = s_matrix(&array![[-1.0]], band(1e6)).unwrap();
        assert_relative_eq!(s[[0, 0]], 0.5, epsilon = 1e-5);
    }

    #[test]
    fn s_matrix_diagonal_decouples() {
        let a = array![[-1.0, 0.0], [0.0, -3.0]];
        let s = s_matrix(&a, band(2.0)).unwrap();
        for (i, &ai) in [-1.0f64, -3.0].iter().enumerate() {
            let expect = (2.0 / -ai).atan() / std::f64::consts::PI;
            assert_relative_eq!(s[[i, i]], expect, epsilon = 1e-12);
        }
        assert!(s[[0, 1]].abs() < 1e-14 && s[[1, 0]].abs() < 1e-14);
    }

    #[test]
    fn s_matrix_rejects_unstable() {
        assert!(matches!(s_matrix(&array![[1.0]], band(1.0)), Err(Error::Stability(_))));
    }

    #[test]
    fn gramian_lyap_scalar() {
        let phi = gramian_lyap(&array![[-1.0]], &array![[1.0]], band(1.0)).unwrap();
        assert_relative_eq!(phi[[0, 0]], 0.25, epsilon = 1e-12);
        let phi_inf = gramian_lyap(&array![[-1.0]], &array![[1.0]], band(1e6)).unwrap();
        assert_relative_eq!(phi_inf[[0, 0]], 0.5, epsilon = 1e-5);
    }

    #[test]
    fn gramian_lyap_matches_quadrature() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let mut a = Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.0..1.0));
        for i in 0..d {
            a[[i, i]] -= 2.5;
        }
        let b_d = Array2::from_shape_fn((d, 2), |_| rng.gen_range(-1.0..1.0));
        let w = 1.5;
        let phi = gramian_lyap(&a, &b_d, band(w)).unwrap();
        let oracle = gramian_quadrature(&a, &b_d, w, 1e-9);
        let rel = linalg::frob(&(&phi - &oracle)) / linalg::frob(&oracle);
        assert!(rel < 1e-6, "relative gap {rel}");
    }

    #[test]
    fn hamiltonian_scalar_pm_sqrt2() {
        let spec = hamiltonian_spectrum(
            &array![[-1.0]],
            &array![[1.0]],
            &array![[1.0]],
            1,
            SpectrumMethod::Dense,
        )
        .unwrap();
        assert_eq!(spec.eigenvalues.len(), 1);
        assert_relative_eq!(spec.eigenvalues[0].re, -2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(spec.eigenvalues[0].im, 0.0);
    }

    #[test]
    fn cauchy_scalar_quarter() {
        let lam = C64::new(-1.0, 0.0);
        let w = band(1.0);
        assert_relative_eq!(theta_c(lam, w), std::f64::consts::FRAC_PI_2, epsilon = 1e-14);
        let c = band_resolvent_scalar(lam, w);
        assert_relative_eq!(c.re, 0.25, epsilon = 1e-14);
        assert_relative_eq!(c.im, 0.0, epsilon = 1e-14);

        // one real stable mode with unit disturbance: Phi = 1/4
        let spec = HamiltonianSpectrum {
            dim: 1,
            eigenvalues: vec![lam],
            retained: 1,
            z: array![[C64::new(1.0, 0.0)]],
            zinv: array![[C64::new(1.0, 0.0)]],
            full_basis: Some(FullBasis {
                z: array![[C64::new(1.0, 0.0)]],
                zbar: array![[C64::new(0.0, 0.0)]],
                zinv: array![[C64::new(1.0, 0.0)]],
            }),
        };
        let phi = cauchy_gramian(&spec, &array![[1.0]], w).unwrap();
        assert_relative_eq!(phi[[0, 0]], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn cauchy_real_modes_give_real_kernel() {
        let vals = [C64::new(-1.0, 0.0), C64::new(-2.0, 0.0)];
        let zinv = array![
            [C64::new(1.0, 0.0), C64::new(0.2, 0.0)],
            [C64::new(0.0, 0.0), C64::new(1.0, 0.0)]
        ];
        let kernel = cauchy_kernel(&vals, &zinv, &array![[1.0], [0.5]], band(1.0)).unwrap();
        for k in kernel.iter() {
            assert!(k.im.abs() < 1e-15);
        }
    }

    #[test]
    fn cauchy_matches_lyapunov_random() {
        // random consensus-free closed loop built from a stable ARE
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let d = 8;
        let mut a = Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.0..1.0));
        for i in 0..d {
            a[[i, i]] -= 3.0;
        }
        let b = Array2::from_shape_fn((d, 2), |_| rng.gen_range(-1.0..1.0));
        let g = b.dot(&b.t());
        let q = Array2::<f64>::eye(d);
        let spec = hamiltonian_spectrum(&a, &g, &q, d, SpectrumMethod::Dense).unwrap();
        let x = riccati_from_spectrum(&spec).unwrap();
        let a_cl = &a - &g.dot(&x);
        let b_d = Array2::from_shape_fn((d, 2), |_| rng.gen_range(-1.0..1.0));
        let w = band(2.0);
        let phi_c = cauchy_gramian(&spec, &b_d, w).unwrap();
        let phi_l = gramian_lyap(&a_cl, &b_d, w).unwrap();
        let rel = linalg::frob(&(&phi_c - &phi_l)) / linalg::frob(&phi_l);
        assert!(rel < 1e-6, "route disagreement {rel}");
    }

    #[test]
    fn lowrank_full_kappa_reproduces_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let mut a = Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.0..1.0));
        for i in 0..d {
            a[[i, i]] -= 3.0;
        }
        let b = Array2::from_shape_fn((d, 2), |_| rng.gen_range(-1.0..1.0));
        let g = b.dot(&b.t());
        let q = Array2::<f64>::eye(d);
        let spec = hamiltonian_spectrum(&a, &g, &q, d, SpectrumMethod::Dense).unwrap();
        let b_d = Array2::from_shape_fn((d, 1), |_| rng.gen_range(-1.0..1.0));
        let w = band(1.5);
        let full = cauchy_gramian(&spec, &b_d, w).unwrap();
        let lr = lowrank_gramian(&spec, &b_d, w, d).unwrap();
        let phik = lr.factor.dot(&lr.factor.t());
        let rel = linalg::frob(&(&phik - &full)) / linalg::frob(&full);
        assert!(rel < 1e-8, "factor gap {rel}");
        assert!(lr.bound.unwrap() < 1e-10); // empty tail
    }

    #[test]
    fn lowrank_closes_conjugate_pairs() {
        // oscillatory closed loop: smallest pair is complex, kappa = 1 must widen to 2
        let a = array![[-0.1, 1.0], [-1.0, -0.1]];
        let g = Array2::<f64>::eye(2) * 0.1;
        let q = Array2::<f64>::eye(2);
        let spec = hamiltonian_spectrum(&a, &g, &q, 2, SpectrumMethod::Dense).unwrap();
        let lr = lowrank_gramian(&spec, &array![[1.0], [0.0]], band(1.0), 1).unwrap();
        assert_eq!(lr.kappa, 1);
        assert_eq!(lr.kappa_eff, 2);
        assert_eq!(lr.factor.ncols(), 2);
    }

    #[test]
    fn truncation_bound_single_mode_and_monotonicity() {
        let w = band(2.0);
        let lam = C64::new(-10.0, 100.0);
        let e = truncation_bound(&[lam], 1.0, 1.0, w);
        // independent recomputation from the two arctangents
        let t = ((100.0 - 2.0) / -10.0f64).atan() - ((100.0 + 2.0) / -10.0f64).atan();
        let expect = (-t / (2.0 * std::f64::consts::PI * -10.0)).sqrt();
        assert_relative_eq!(e, expect, max_relative = 1e-12);
        // widening |b| shrinks the bound
        let mut prev = f64::INFINITY;
        for b in [20.0, 50.0, 100.0, 400.0] {
            let e = truncation_bound(&[C64::new(-10.0, b)], 1.0, 1.0, w);
            assert!(e < prev, "bound must decrease with |b|");
            prev = e;
        }
        assert_eq!(truncation_bound(&[], 1.0, 1.0, w), 0.0);
    }

    #[test]
    fn shift_invert_matches_dense_smallest() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let d = 12;
        let mut a = Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.5..0.5));
        for i in 0..d {
            a[[i, i]] -= 1.0 + 2.0 * (i as f64);
        }
        let b = Array2::from_shape_fn((d, 2), |_| rng.gen_range(-1.0..1.0));
        let g = b.dot(&b.t());
        let q = Array2::<f64>::eye(d);
        let dense = hamiltonian_spectrum(&a, &g, &q, 4, SpectrumMethod::Dense).unwrap();
        let arn = hamiltonian_spectrum(&a, &g, &q, 4, SpectrumMethod::ShiftInvert).unwrap();
        assert_eq!(arn.retained, dense.retained);
        for (x, y) in arn.eigenvalues.iter().zip(dense.eigenvalues.iter()) {
            assert!((x - y).norm() < 1e-8 * y.norm().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn band_rejects_bad_edge() {
        assert!(FreqBand::new(0.0).is_err());
        assert!(FreqBand::new(f64::NAN).is_err());
        assert!(FreqBand::new(-2.0).is_err());
    }

    #[test]
    fn hamiltonian_spectrum_checks_dimensions() {
        let a = Array2::<f64>::zeros((2, 2));
        let g = Array2::<f64>::zeros((3, 3));
        assert!(matches!(
            hamiltonian_spectrum(&a, &g, &Array2::zeros((2, 2)), 1, SpectrumMethod::Dense),
            Err(Error::Dimension(_))
        ));
    }

}
