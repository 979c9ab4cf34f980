//! Dense linear-algebra utilities shared across the crate: eigen wrappers,
//! a Bartels-Stewart Lyapunov solver, matrix exponential, symmetric factors
//! and a small adaptive quadrature routine.

use ndarray::prelude::*;
use ndarray_linalg::{Eig, EigVals, Eigh, Inverse, Solve, SVD, UPLO};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Frobenius norm.
pub fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn frob_c(a: &Array2<C64>) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Eigenvalues and right eigenvectors of a real square matrix.
pub fn eig(a: &Array2<f64>) -> Result<(Array1<C64>, Array2<C64>)> {
    Ok(a.eig()?)
}

/// Eigenvalues only.
pub fn eigvals(a: &Array2<f64>) -> Result<Array1<C64>> {
    Ok(a.eigvals()?)
}

/// Eigendecomposition of a symmetric matrix (ascending eigenvalues).
pub fn eigh_sym(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let sym = symmetrize(a);
    Ok(sym.eigh(UPLO::Lower)?)
}

pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    (a + &a.t()) * 0.5
}

/// Singular values, descending.
pub fn singular_values(a: &Array2<f64>) -> Result<Array1<f64>> {
    let (_, s, _) = a.svd(false, false)?;
    Ok(s)
}

pub fn singular_values_c(a: &Array2<C64>) -> Result<Array1<f64>> {
    let (_, s, _) = a.svd(false, false)?;
    Ok(s)
}

pub fn sigma_max(a: &Array2<f64>) -> Result<f64> {
    let s = singular_values(a)?;
    Ok(s.iter().cloned().fold(0.0, f64::max))
}

pub fn sigma_min(a: &Array2<f64>) -> Result<f64> {
    let s = singular_values(a)?;
    Ok(s.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Spectral condition number.
pub fn cond2_c(a: &Array2<C64>) -> Result<f64> {
    let s = singular_values_c(a)?;
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

pub fn to_complex(a: &Array2<f64>) -> Array2<C64> {
    a.mapv(|x| C64::new(x, 0.0))
}

/// Real part of a complex matrix, erroring if the imaginary residue exceeds
/// `tol` relative to the real part's Frobenius norm.
pub fn real_part_checked(a: &Array2<C64>, tol: f64, what: &str) -> Result<Array2<f64>> {
    let re = a.mapv(|x| x.re);
    let im_norm = a.iter().map(|x| x.im * x.im).sum::<f64>().sqrt();
    let scale = frob(&re).max(1e-300);
    if im_norm > tol * scale {
        return Err(Error::Spectrum(format!(
            "{what}: imaginary residue {:.3e} exceeds {:.1e} of scale {:.3e}",
            im_norm, tol, scale
        )));
    }
    Ok(re)
}

/// Solve the continuous Lyapunov equation  A X + X A^T + C = 0  by
/// Bartels-Stewart on the real Schur form of A. C need not be symmetric;
/// the result is symmetrized only when C is.
pub fn lyap(a: &Array2<f64>, c: &Array2<f64>) -> Result<Array2<f64>> {
    let m = a.nrows();
    if a.ncols() != m || c.nrows() != m || c.ncols() != m {
        return Err(Error::Dimension(format!(
            "lyap: A is {}x{}, C is {}x{}",
            a.nrows(),
            a.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    let na_a = nalgebra::DMatrix::from_row_iterator(m, m, a.iter().cloned());
    let schur = nalgebra::linalg::Schur::try_new(na_a, f64::EPSILON, 1_000_000)
        .ok_or_else(|| Error::Lyapunov("real Schur iteration did not converge".into()))?;
    let (q_na, t_na) = schur.unpack();
    let q = Array2::from_shape_fn((m, m), |(i, j)| q_na[(i, j)]);
    let t = Array2::from_shape_fn((m, m), |(i, j)| t_na[(i, j)]);

    // C' = Q^T C Q, then solve T Y + Y T^T + C' = 0 blockwise.
    let cp = q.t().dot(c).dot(&q);
    let y = quasi_triangular_lyap(&t, &cp)?;
    let mut x = q.dot(&y).dot(&q.t());
    let c_sym = frob(&(c - &c.t().to_owned())) <= 1e-12 * frob(c).max(1.0);
    if c_sym {
        x = symmetrize(&x);
    }
    Ok(x)
}

/// Back-substitution for T Y + Y T^T + C = 0 with T quasi-upper-triangular.
fn quasi_triangular_lyap(t: &Array2<f64>, c: &Array2<f64>) -> Result<Array2<f64>> {
    let m = t.nrows();
    // diagonal block boundaries: 2x2 blocks wherever the subdiagonal is nonzero
    let tiny = 1e-300;
    let mut starts = Vec::new();
    let mut k = 0;
    while k < m {
        starts.push(k);
        if k + 1 < m && t[[k + 1, k]].abs() > tiny {
            k += 2;
        } else {
            k += 1;
        }
    }
    let nb = starts.len();
    let size = |bi: usize| -> usize {
        if bi + 1 < nb {
            starts[bi + 1] - starts[bi]
        } else {
            m - starts[bi]
        }
    };

    let mut y: Array2<f64> = Array2::zeros((m, m));
    for bi in (0..nb).rev() {
        for bj in (0..nb).rev() {
            let (i0, ni) = (starts[bi], size(bi));
            let (j0, nj) = (starts[bj], size(bj));
            // rhs = -C_ij - sum_{k>i} T_ik Y_kj - sum_{k>j} Y_ik T_jk^T
            let mut rhs = -&c.slice(s![i0..i0 + ni, j0..j0 + nj]).to_owned();
            if i0 + ni < m {
                let t_right = t.slice(s![i0..i0 + ni, i0 + ni..m]);
                let y_below = y.slice(s![i0 + ni..m, j0..j0 + nj]);
                rhs = rhs - t_right.dot(&y_below);
            }
            if j0 + nj < m {
                let y_right = y.slice(s![i0..i0 + ni, j0 + nj..m]);
                let t_jk = t.slice(s![j0..j0 + nj, j0 + nj..m]);
                rhs = rhs - y_right.dot(&t_jk.t());
            }
            // (I (x) T_ii + T_jj (x) I) vec(Y_ij) = vec(rhs), column-major vec
            let tii = t.slice(s![i0..i0 + ni, i0..i0 + ni]);
            let tjj = t.slice(s![j0..j0 + nj, j0..j0 + nj]);
            let dim = ni * nj;
            let mut small = Array2::<f64>::zeros((dim, dim));
            for p in 0..nj {
                for q in 0..ni {
                    let row = p * ni + q;
                    for qq in 0..ni {
                        small[[row, p * ni + qq]] += tii[[q, qq]];
                    }
                    for pp in 0..nj {
                        small[[row, pp * ni + q]] += tjj[[p, pp]];
                    }
                }
            }
            let mut vec_rhs = Array1::<f64>::zeros(dim);
            for p in 0..nj {
                for q in 0..ni {
                    vec_rhs[p * ni + q] = rhs[[q, p]];
                }
            }
            let sol = small.solve(&vec_rhs).map_err(|e| {
                Error::Lyapunov(format!("singular diagonal block pair (near-mirror spectrum): {e}"))
            })?;
            for p in 0..nj {
                for q in 0..ni {
                    y[[i0 + q, j0 + p]] = sol[p * ni + q];
                }
            }
        }
    }
    Ok(y)
}

/// Matrix exponential by Pade-13 scaling and squaring.
pub fn expm(a: &Array2<f64>) -> Result<Array2<f64>> {
    const THETA13: f64 = 5.371920351148152;
    let b: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let m = a.nrows();
    let norm1 = a
        .columns()
        .into_iter()
        .map(|col| col.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let s = if norm1 > THETA13 {
        (norm1 / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a_s = a / 2f64.powi(s);
    let ident = Array2::<f64>::eye(m);
    let a2 = a_s.dot(&a_s);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);
    let u_inner = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u = a_s.dot(&(a6.dot(&u_inner) + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]));
    let v_inner = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = a6.dot(&v_inner) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    let lhs = &v - &u;
    let rhs = &v + &u;
    let mut x = solve_multi(&lhs, &rhs)?;
    for _ in 0..s {
        x = x.dot(&x);
    }
    Ok(x)
}

/// Solve A X = B for a matrix right-hand side.
pub fn solve_multi(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    use ndarray_linalg::Factorize;
    let f = a.factorize()?;
    let mut out = Array2::<f64>::zeros(b.dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        let x = f.solve(&col.to_owned())?;
        out.column_mut(j).assign(&x);
    }
    Ok(out)
}

pub fn solve_multi_c(a: &Array2<C64>, b: &Array2<C64>) -> Result<Array2<C64>> {
    use ndarray_linalg::Factorize;
    let f = a.factorize()?;
    let mut out = Array2::<C64>::zeros(b.dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        let x = f.solve(&col.to_owned())?;
        out.column_mut(j).assign(&x);
    }
    Ok(out)
}

pub fn inv_c(a: &Array2<C64>) -> Result<Array2<C64>> {
    Ok(a.inv()?)
}

/// Symmetric PSD square root with eigenvalue clipping. Eigenvalues below
/// `-clip_rel * max_eig` are an error; small negatives are clipped to zero.
pub fn psd_sqrt(a: &Array2<f64>, clip_rel: f64) -> Result<Array2<f64>> {
    let (vals, vecs) = eigh_sym(a)?;
    let max = vals.iter().cloned().fold(0.0, f64::max).max(1e-300);
    let mut d = Array1::<f64>::zeros(vals.len());
    for (i, &v) in vals.iter().enumerate() {
        if v < -clip_rel * max {
            return Err(Error::Truncation(format!(
                "matrix is indefinite: eigenvalue {v:.3e} below -{clip_rel:.1e} x {max:.3e}"
            )));
        }
        d[i] = v.max(0.0).sqrt();
    }
    Ok(vecs.dot(&Array2::from_diag(&d)).dot(&vecs.t()))
}

/// Inverse of the symmetric PSD square root. Fails on eigenvalues that are
/// not safely positive.
pub fn psd_inv_sqrt(a: &Array2<f64>, rel_floor: f64) -> Result<Array2<f64>> {
    let (vals, vecs) = eigh_sym(a)?;
    let max = vals.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::Truncation("matrix has no positive eigenvalues".into()));
    }
    let mut d = Array1::<f64>::zeros(vals.len());
    for (i, &v) in vals.iter().enumerate() {
        if v <= rel_floor * max {
            return Err(Error::Truncation(format!(
                "matrix is numerically singular: eigenvalue {v:.3e} vs max {max:.3e}"
            )));
        }
        d[i] = 1.0 / v.sqrt();
    }
    Ok(vecs.dot(&Array2::from_diag(&d)).dot(&vecs.t()))
}

/// Largest real part among the eigenvalues.
pub fn max_real_eig(a: &Array2<f64>) -> Result<f64> {
    let ev = eigvals(a)?;
    Ok(ev.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max))
}

/// Adaptive Simpson quadrature with a relative tolerance and a hard cap on
/// function evaluations. Returns (integral, converged).
pub fn adaptive_simpson<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    rel_tol: f64,
    max_evals: usize,
) -> (f64, bool) {
    let mut evals = 0usize;
    let mut eval = |x: f64, evals: &mut usize| {
        *evals += 1;
        f(x)
    };
    let fa = eval(a, &mut evals);
    let fb = eval(b, &mut evals);
    let fm = eval(0.5 * (a + b), &mut evals);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);

    struct Seg {
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
    }
    let mut total = 0.0;
    let mut converged = true;
    let mut stack = vec![Seg { a, b, fa, fm, fb, whole }];
    let scale_hint = whole.abs().max(1e-300);
    while let Some(seg) = stack.pop() {
        if evals + 2 > max_evals {
            total += seg.whole;
            converged = false;
            continue;
        }
        let m = 0.5 * (seg.a + seg.b);
        let lm = eval(0.5 * (seg.a + m), &mut evals);
        let rm = eval(0.5 * (m + seg.b), &mut evals);
        let left = (m - seg.a) / 6.0 * (seg.fa + 4.0 * lm + seg.fm);
        let right = (seg.b - m) / 6.0 * (seg.fm + 4.0 * rm + seg.fb);
        let err = (left + right - seg.whole).abs();
        if err <= 15.0 * rel_tol * scale_hint * ((seg.b - seg.a) / (b - a)).max(1e-6) {
            total += left + right + (left + right - seg.whole) / 15.0;
        } else {
            stack.push(Seg { a: seg.a, b: m, fa: seg.fa, fm: lm, fb: seg.fm, whole: left });
            stack.push(Seg { a: m, b: seg.b, fa: seg.fm, fm: rm, fb: seg.fb, whole: right });
        }
    }
    (total, converged)
}
