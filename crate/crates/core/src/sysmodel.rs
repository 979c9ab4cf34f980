//! Linearized multi-machine power-system model: Kron reduction of the
//! network admittance, linearization of the flux-decay model around a
//! supplied equilibrium, mass-normalized state-space assembly, random
//! model synthesis and performance-output construction.

use ndarray::prelude::*;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64};

/// Flux-decay generator parameters plus the equilibrium point they are
/// linearized around. Angles in rad, times in s, everything else in pu.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub inertia: f64,
    pub damping: f64,
    pub t_do_prime: f64,
    pub t_a: f64,
    pub k_a: f64,
    pub x_d: f64,
    pub x_d_prime: f64,
    pub delta0: f64,
    pub e_q0: f64,
}

impl GeneratorParams {
    pub fn validate(&self, idx: usize) -> Result<()> {
        if !(self.inertia > 0.0) {
            return Err(Error::Parameter(format!("generator {idx}: inertia must be > 0")));
        }
        if !(self.t_do_prime > 0.0) {
            return Err(Error::Parameter(format!("generator {idx}: t_do_prime must be > 0")));
        }
        if !(self.t_a > 0.0) {
            return Err(Error::Parameter(format!("generator {idx}: t_a must be > 0")));
        }
        if !(self.x_d_prime > 0.0) || self.x_d < self.x_d_prime {
            return Err(Error::Parameter(format!(
                "generator {idx}: need x_d >= x_d_prime > 0"
            )));
        }
        Ok(())
    }
}

/// Bus admittance matrix of the full network. The first `n_gen` buses are
/// generator buses, the rest are load buses eliminated by Kron reduction.
#[derive(Debug, Clone)]
pub struct NetworkAdmittance {
    pub y: Array2<C64>,
    pub n_gen: usize,
}

impl NetworkAdmittance {
    pub fn new(y: Array2<C64>, n_gen: usize) -> Result<Self> {
        let dim = y.nrows();
        if y.ncols() != dim {
            return Err(Error::Dimension("admittance matrix must be square".into()));
        }
        if n_gen == 0 || n_gen > dim {
            return Err(Error::Parameter(format!(
                "generator bus count {n_gen} out of range for a {dim}-bus network"
            )));
        }
        let scale = linalg::frob_c(&y).max(1e-300);
        let asym = (&y - &y.t().to_owned()).iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        if asym > 1e-10 * scale {
            return Err(Error::Parameter("admittance matrix must be symmetric".into()));
        }
        Ok(Self { y, n_gen })
    }

    pub fn n_load(&self) -> usize {
        self.y.nrows() - self.n_gen
    }
}

/// Which generator signals form the performance output. Indices are
/// 1-based generator identities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub angle_pairs: Vec<(usize, usize)>,
    pub all_frequencies: bool,
}

impl OutputSpec {
    /// Angle differences of every generator against generator 1 plus all
    /// frequency deviations.
    pub fn star_from_first(n: usize) -> Self {
        OutputSpec {
            angle_pairs: (2..=n).map(|j| (1, j)).collect(),
            all_frequencies: true,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for &(i, j) in &self.angle_pairs {
            if i == 0 || j == 0 || i > n || j > n {
                return Err(Error::Parameter(format!(
                    "output pair ({i},{j}) out of range 1..={n}"
                )));
            }
            if i == j {
                return Err(Error::Parameter(format!("output pair ({i},{j}) repeats an index")));
            }
        }
        if self.angle_pairs.is_empty() && !self.all_frequencies {
            return Err(Error::Parameter("output spec selects no signals".into()));
        }
        Ok(())
    }
}

/// Unscaled linearization blocks of the flux-decay model.
#[derive(Debug, Clone)]
pub struct LinearBlocks {
    pub l1: Array2<f64>,
    pub l2: Array2<f64>,
    pub l3: Array2<f64>,
    pub f1: Array2<f64>,
    pub f2: Array2<f64>,
    pub f3: Array2<f64>,
}

/// Mass-normalized blocks of the state matrix.
#[derive(Debug, Clone)]
pub struct ScaledBlocks {
    pub l1m: Array2<f64>,
    pub l2m: Array2<f64>,
    pub l3m: Array2<f64>,
    pub d_m: Array2<f64>,
    pub f1m: Array2<f64>,
    pub f2m: Array2<f64>,
    pub f3m: Array2<f64>,
    pub b1: Array2<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: Option<u64>,
    pub provenance: String,
}

/// The assembled 4n-state model. Immutable after construction; the state
/// matrix, input matrix, output matrix and consensus vector are built once.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub n: usize,
    pub n_d: usize,
    pub m_diag: Array1<f64>,
    pub blocks: ScaledBlocks,
    pub b_d: Array2<f64>,
    pub output: OutputSpec,
    pub meta: ModelMeta,
    a: Array2<f64>,
    b: Array2<f64>,
    c: Array2<f64>,
    vbar: Array1<f64>,
}

/// Verdict on the open-loop consensus structure.
#[derive(Debug, Clone)]
pub struct ConsensusReport {
    pub zero_count: usize,
    pub max_re_rest: f64,
    pub zero_tol: f64,
    pub is_consensus_stable: bool,
}

/// Zero-eigenvalue detection tolerance, scale-aware in the size of A.
pub fn zero_tolerance(a: &Array2<f64>) -> f64 {
    1e-8 * (linalg::frob(a) / a.nrows() as f64).max(1.0)
}

/// Classify the spectrum of `a` against the consensus-stability pattern:
/// exactly one eigenvalue at zero, everything else strictly in the left
/// half plane.
pub fn consensus_spectrum_report(a: &Array2<f64>) -> Result<ConsensusReport> {
    let ev = linalg::eigvals(a)?;
    let tol = zero_tolerance(a);
    let zero_count = ev.iter().filter(|l| l.norm() < tol).count();
    let max_re_rest = ev
        .iter()
        .filter(|l| l.norm() >= tol)
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ConsensusReport {
        zero_count,
        max_re_rest,
        zero_tol: tol,
        is_consensus_stable: zero_count == 1 && max_re_rest < 0.0,
    })
}

/// Kron reduction: eliminate the load buses by the Schur complement and
/// form the two reduced matrices used by the linearization.
pub fn kron_reduce(
    adm: &NetworkAdmittance,
    xd_prime: &Array1<f64>,
) -> Result<(Array2<C64>, Array2<C64>)> {
    let n = adm.n_gen;
    if xd_prime.len() != n {
        return Err(Error::Dimension(format!(
            "xd_prime has {} entries for {} generator buses",
            xd_prime.len(),
            n
        )));
    }
    let nl = adm.n_load();
    let y11 = adm.y.slice(s![..n, ..n]).to_owned();
    let y_alpha = if nl == 0 {
        y11
    } else {
        let y12 = adm.y.slice(s![..n, n..]).to_owned();
        let y21 = adm.y.slice(s![n.., ..n]).to_owned();
        let y22 = adm.y.slice(s![n.., n..]).to_owned();
        let sol = linalg::solve_multi_c(&y22, &y21)
            .map_err(|_| Error::KronReduction("load block Y22 is singular".into()))?;
        y11 - y12.dot(&sol)
    };
    let mut aug = y_alpha.clone();
    for i in 0..n {
        aug[[i, i]] += Complex64::new(0.0, xd_prime[i]);
    }
    let y_beta = linalg::inv_c(&aug)
        .map_err(|_| Error::KronReduction("Y_alpha + diag(i x'_d) is singular".into()))?;
    Ok((y_alpha, y_beta))
}

/// Linearize the flux-decay equations around the stored equilibrium.
/// Returns the unscaled blocks and any diagnostic warnings (a near-singular
/// F1 violates the controllability assumption but is not fatal here).
pub fn linearize(
    params: &[GeneratorParams],
    y_alpha: &Array2<C64>,
    y_beta: &Array2<C64>,
) -> Result<(LinearBlocks, Vec<String>)> {
    let n = params.len();
    if n == 0 {
        return Err(Error::Parameter("no generators".into()));
    }
    for (i, p) in params.iter().enumerate() {
        p.validate(i + 1)?;
    }
    if y_alpha.nrows() != n || y_beta.nrows() != n {
        return Err(Error::Dimension("reduced admittance dimension != generator count".into()));
    }

    let ya_mag = y_alpha.mapv(|z| z.norm());
    let ya_ang = y_alpha.mapv(|z| z.arg());
    let yb_mag = y_beta.mapv(|z| z.norm());
    let yb_ang = y_beta.mapv(|z| z.arg());
    let d0: Vec<f64> = params.iter().map(|p| p.delta0).collect();
    let eq0: Vec<f64> = params.iter().map(|p| p.e_q0).collect();

    let mut l1 = Array2::<f64>::zeros((n, n));
    let mut l2 = Array2::<f64>::zeros((n, n));
    let mut l3 = Array2::<f64>::zeros((n, n));
    let mut f1 = Array2::<f64>::zeros((n, n));
    let mut f2 = Array2::<f64>::zeros((n, n));
    let mut f3 = Array2::<f64>::zeros((n, n));

    for i in 0..n {
        // per-row voltage components behind the reduced network
        let mut v_r = 0.0;
        let mut v_i = 0.0;
        for j in 0..n {
            v_r += yb_mag[[i, j]] * eq0[j] * (d0[i] - d0[j] - yb_ang[[i, j]]).cos();
            v_i += yb_mag[[i, j]] * eq0[j] * (d0[i] - d0[j] - yb_ang[[i, j]]).sin();
        }
        let v_mag = v_r.hypot(v_i);
        if v_mag <= 0.0 {
            return Err(Error::Assembly(format!(
                "terminal voltage magnitude vanished at generator {}",
                i + 1
            )));
        }
        let p = &params[i];
        let sat = (p.x_d - p.x_d_prime) / p.x_d_prime;

        for j in 0..n {
            if j == i {
                continue;
            }
            let da = d0[i] - d0[j] - ya_ang[[i, j]];
            let db = d0[i] - d0[j] - yb_ang[[i, j]];
            l1[[i, j]] = -eq0[i] * eq0[j] * ya_mag[[i, j]] * da.cos();
            l2[[i, j]] = -sat * eq0[j] * yb_mag[[i, j]] * db.sin();
            l3[[i, j]] =
                -(v_r * db.sin() - v_i * da.cos()) / v_mag * p.k_a * yb_mag[[i, j]] * eq0[j];
            f1[[i, j]] = -eq0[i] * ya_mag[[i, j]] * da.cos();
            f2[[i, j]] = -sat * yb_mag[[i, j]] * db.cos();
            f3[[i, j]] = -(v_r * db.cos() + v_i * db.sin()) / v_mag * p.k_a * yb_mag[[i, j]];
        }
        // zero row sums by construction
        l1[[i, i]] = -(0..n).filter(|&j| j != i).map(|j| l1[[i, j]]).sum::<f64>();
        l2[[i, i]] = -(0..n).filter(|&j| j != i).map(|j| l2[[i, j]]).sum::<f64>();
        l3[[i, i]] = -(0..n).filter(|&j| j != i).map(|j| l3[[i, j]]).sum::<f64>();

        let mut accum = 0.0;
        for j in 0..n {
            accum += eq0[j] * ya_mag[[i, j]] * (d0[i] - d0[j] - ya_ang[[i, j]]).cos();
        }
        f1[[i, i]] = -eq0[i] * ya_mag[[i, i]] * ya_ang[[i, i]].cos() - accum;
        f2[[i, i]] = -p.x_d / p.x_d_prime - sat * yb_mag[[i, i]] * yb_ang[[i, i]].cos();
        f3[[i, i]] = -p.k_a * yb_mag[[i, i]] * (v_r * yb_ang[[i, i]].cos() - v_i * yb_ang[[i, i]].sin())
            / v_mag;
    }

    let mut warnings = Vec::new();
    let smin = linalg::sigma_min(&f1)?;
    if smin <= 1e-10 * linalg::frob(&f1).max(1.0) {
        warnings.push(format!(
            "F1 is singular within tolerance (sigma_min = {smin:.3e}); the model may not be controllable"
        ));
    }
    Ok((LinearBlocks { l1, l2, l3, f1, f2, f3 }, warnings))
}

/// Assemble the mass-normalized model from linearization blocks. The state
/// matrix keeps the printed block layout: unit couplings from field voltage
/// to flux and the unit field-voltage self term, with the regulator and
/// flux time constants folded into the off-diagonal blocks and B1.
pub fn assemble(
    params: &[GeneratorParams],
    blocks: &LinearBlocks,
    b_d: Array2<f64>,
    output: OutputSpec,
    meta: ModelMeta,
) -> Result<LinearModel> {
    let n = params.len();
    for (i, p) in params.iter().enumerate() {
        p.validate(i + 1)?;
    }
    let m_diag = Array1::from_iter(params.iter().map(|p| p.inertia));
    let mh = m_diag.mapv(f64::sqrt);
    let t_do_inv = Array1::from_iter(params.iter().map(|p| 1.0 / p.t_do_prime));
    let t_a_inv = Array1::from_iter(params.iter().map(|p| 1.0 / p.t_a));
    let d = Array1::from_iter(params.iter().map(|p| p.damping));

    let row_col = |rows: &Array1<f64>, m: &Array2<f64>, cols: &Array1<f64>| {
        Array2::from_shape_fn((n, n), |(i, j)| rows[i] * m[[i, j]] * cols[j])
    };
    let mh_inv = mh.mapv(|x| 1.0 / x);
    let mh_tdo = Array1::from_shape_fn(n, |i| mh[i] * t_do_inv[i]);
    let mh_ta = Array1::from_shape_fn(n, |i| mh[i] * t_a_inv[i]);
    let scaled = ScaledBlocks {
        l1m: row_col(&mh_inv, &blocks.l1, &mh_inv),
        l2m: row_col(&mh_tdo, &blocks.l2, &mh_inv),
        l3m: row_col(&mh_ta, &blocks.l3, &mh_inv),
        d_m: Array2::from_diag(&Array1::from_shape_fn(n, |i| d[i] / m_diag[i])),
        f1m: row_col(&mh_inv, &blocks.f1, &mh_inv),
        f2m: row_col(&mh_tdo, &blocks.f2, &mh_inv),
        f3m: row_col(&mh_ta, &blocks.f3, &mh_inv),
        b1: Array2::from_diag(&mh_ta),
    };
    LinearModel::from_parts(n, m_diag, scaled, b_d, output, meta)
}

impl LinearModel {
    /// Build the derived matrices and validate the consensus structure.
    pub fn from_parts(
        n: usize,
        m_diag: Array1<f64>,
        blocks: ScaledBlocks,
        b_d: Array2<f64>,
        output: OutputSpec,
        meta: ModelMeta,
    ) -> Result<Self> {
        if m_diag.len() != n || m_diag.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Parameter("inertia vector must be positive with length n".into()));
        }
        for (name, blk) in [
            ("l1m", &blocks.l1m),
            ("l2m", &blocks.l2m),
            ("l3m", &blocks.l3m),
            ("d_m", &blocks.d_m),
            ("f1m", &blocks.f1m),
            ("f2m", &blocks.f2m),
            ("f3m", &blocks.f3m),
            ("b1", &blocks.b1),
        ] {
            if blk.dim() != (n, n) {
                return Err(Error::Dimension(format!("block {name} is not {n}x{n}")));
            }
        }
        if b_d.nrows() != 4 * n || b_d.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B_d must be {}x n_d with n_d >= 1, got {}x{}",
                4 * n,
                b_d.nrows(),
                b_d.ncols()
            )));
        }
        output.validate(n)?;

        let a = assemble_state_matrix(&blocks, n);
        let mut b = Array2::<f64>::zeros((4 * n, n));
        b.slice_mut(s![3 * n.., ..]).assign(&blocks.b1);
        let c = build_output(&output, &m_diag)?;
        let tr: f64 = m_diag.sum();
        let vbar = m_diag.mapv(|m| m.sqrt() / tr.sqrt());

        let report = consensus_spectrum_report(&a)?;
        if !report.is_consensus_stable {
            return Err(Error::ConsensusStructure(format!(
                "state matrix has {} near-zero eigenvalues (tol {:.2e}) and max Re of the rest {:.3e}; \
                 expected exactly one structural zero with the rest stable",
                report.zero_count, report.zero_tol, report.max_re_rest
            )));
        }

        let n_d = b_d.ncols();
        Ok(LinearModel { n, n_d, m_diag, blocks, b_d, output, meta, a, b, c, vbar })
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn c(&self) -> &Array2<f64> {
        &self.c
    }

    /// Mass-scaled consensus direction of the angle block, unit norm.
    pub fn vbar(&self) -> &Array1<f64> {
        &self.vbar
    }

    /// Consensus eigenvector of the full state, [vbar; 0; 0; 0].
    pub fn v0(&self) -> Array1<f64> {
        let mut v = Array1::zeros(4 * self.n);
        v.slice_mut(s![..self.n]).assign(&self.vbar);
        v
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = ModelFile::from_model(self);
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ModelFile = serde_json::from_str(&text)?;
        file.into_model()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from_model(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }
}

fn assemble_state_matrix(blocks: &ScaledBlocks, n: usize) -> Array2<f64> {
    let mut a = Array2::<f64>::zeros((4 * n, 4 * n));
    for i in 0..n {
        a[[i, n + i]] = 1.0; // angle row: unit coupling to frequency
        a[[2 * n + i, 3 * n + i]] = 1.0; // flux row: unit coupling to field voltage
        a[[3 * n + i, 3 * n + i]] = -1.0; // field-voltage self term
    }
    a.slice_mut(s![n..2 * n, ..n]).assign(&blocks.l1m);
    a.slice_mut(s![n..2 * n, n..2 * n]).assign(&(-&blocks.d_m));
    a.slice_mut(s![n..2 * n, 2 * n..3 * n]).assign(&blocks.f1m);
    a.slice_mut(s![2 * n..3 * n, ..n]).assign(&blocks.l2m);
    a.slice_mut(s![2 * n..3 * n, 2 * n..3 * n]).assign(&blocks.f2m);
    a.slice_mut(s![3 * n.., ..n]).assign(&blocks.l3m);
    a.slice_mut(s![3 * n.., 2 * n..3 * n]).assign(&blocks.f3m);
    a
}

/// Performance-output matrix: selected angle differences and, optionally,
/// all frequency deviations, expressed in the mass-scaled coordinates.
pub fn build_output(spec: &OutputSpec, m_diag: &Array1<f64>) -> Result<Array2<f64>> {
    let n = m_diag.len();
    spec.validate(n)?;
    let n_delta = spec.angle_pairs.len();
    let n_rows = n_delta + if spec.all_frequencies { n } else { 0 };
    let mh_inv = m_diag.mapv(|m| 1.0 / m.sqrt());
    let mut c = Array2::<f64>::zeros((n_rows, 4 * n));
    for (k, &(i, j)) in spec.angle_pairs.iter().enumerate() {
        c[[k, i - 1]] = mh_inv[i - 1];
        c[[k, j - 1]] = -mh_inv[j - 1];
    }
    if spec.all_frequencies {
        for i in 0..n {
            c[[n_delta + i, n + i]] = mh_inv[i];
        }
    }
    Ok(c)
}

/// Synthesize a consensus-stable random model. Generator parameters come
/// from realistic ranges; the admittance is a random connected network with
/// weak-enough lines and resistive shunt loads that the regulator loop
/// stays stable. Rejection-resamples until the consensus pattern holds.
pub fn synth_random_model(n: usize, n_d: usize, seed: u64) -> Result<LinearModel> {
    if n < 2 {
        return Err(Error::Parameter("synthesis needs n >= 2".into()));
    }
    if n_d == 0 || n_d > n {
        return Err(Error::Parameter(format!("n_d must be in 1..={n}")));
    }
    const MAX_ATTEMPTS: usize = 100;
    let mut last_diag = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::child_seed(seed, "synth", attempt as u64));
        let params: Vec<GeneratorParams> = (0..n)
            .map(|_| GeneratorParams {
                inertia: rng.gen_range(2.0..10.0),
                damping: rng.gen_range(1.0..5.0),
                t_do_prime: rng.gen_range(4.0..6.0),
                t_a: rng.gen_range(0.02..0.2),
                k_a: rng.gen_range(20.0..200.0),
                x_d: rng.gen_range(0.8..2.3),
                x_d_prime: rng.gen_range(0.15..0.5),
                delta0: rng.gen_range(-0.25..0.25),
                e_q0: rng.gen_range(0.9..1.2),
            })
            .collect();

        let y = random_admittance(n, &mut rng);
        let adm = NetworkAdmittance::new(y, n)?;
        let xd_prime = Array1::from_iter(params.iter().map(|p| p.x_d_prime));
        let (y_alpha, y_beta) = kron_reduce(&adm, &xd_prime)?;
        let (blocks, _warnings) = linearize(&params, &y_alpha, &y_beta)?;

        // disturbance enters through n_d distinct excitation inputs
        let mut cols: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            cols.swap(i, j);
        }
        cols.truncate(n_d);
        cols.sort_unstable();
        let mut b_d = Array2::<f64>::zeros((4 * n, n_d));
        for (k, &col) in cols.iter().enumerate() {
            let p = &params[col];
            b_d[[3 * n + col, k]] = p.inertia.sqrt() / p.t_a;
        }

        let meta = ModelMeta { seed: Some(seed), provenance: format!("synth(n={n}, n_d={n_d}, attempt={attempt})") };
        match assemble(&params, &blocks, b_d, OutputSpec::star_from_first(n), meta) {
            Ok(model) => {
                // demand a stability margin so downstream closed loops are
                // comfortably Hurwitz after the consensus shift
                let report = consensus_spectrum_report(model.a())?;
                if report.max_re_rest < -1e-6 {
                    return Ok(model);
                }
                last_diag = format!(
                    "attempt {attempt}: stable but margin {:.3e} too thin",
                    report.max_re_rest
                );
            }
            Err(Error::ConsensusStructure(diag)) => {
                last_diag = format!("attempt {attempt}: {diag}");
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Synthesis { attempts: MAX_ATTEMPTS, diagnostic: last_diag })
}

/// Random connected network: a random spanning tree plus extra chords,
/// mostly-inductive lines and resistive-inductive shunt loads.
fn random_admittance(n: usize, rng: &mut ChaCha8Rng) -> Array2<C64> {
    let mut y = Array2::<C64>::zeros((n, n));
    let add_line = |y: &mut Array2<C64>, i: usize, j: usize, rng: &mut ChaCha8Rng| {
        let x = rng.gen_range(1.5..4.0);
        let r = 0.1 * x;
        let adm = 1.0 / Complex64::new(r, x);
        y[[i, j]] -= adm;
        y[[j, i]] -= adm;
        y[[i, i]] += adm;
        y[[j, j]] += adm;
    };
    // spanning tree over a random permutation
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    for k in 1..n {
        let parent = perm[rng.gen_range(0..k)];
        add_line(&mut y, perm[k], parent, rng);
    }
    for _ in 0..(n / 2).max(1) {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i != j {
            add_line(&mut y, i, j, rng);
        }
    }
    for i in 0..n {
        y[[i, i]] += Complex64::new(rng.gen_range(0.8..2.0), rng.gen_range(-1.0..-0.2));
    }
    y
}

// ---------------------------------------------------------------------------
// model file schema

#[derive(Serialize, Deserialize)]
struct ModelFile {
    n: usize,
    n_d: usize,
    m_diag: Vec<f64>,
    l1m: Vec<f64>,
    l2m: Vec<f64>,
    l3m: Vec<f64>,
    d_m: Vec<f64>,
    f1m: Vec<f64>,
    f2m: Vec<f64>,
    f3m: Vec<f64>,
    b1: Vec<f64>,
    b_d: Vec<f64>,
    output: OutputSpec,
    meta: ModelMeta,
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().cloned().collect()
}

fn unflat(name: &str, v: &[f64], rows: usize, cols: usize) -> Result<Array2<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "field {name}: expected {} entries ({rows}x{cols}), got {}",
            rows * cols,
            v.len()
        )));
    }
    Ok(Array2::from_shape_vec((rows, cols), v.to_vec()).expect("shape checked"))
}

impl ModelFile {
    fn from_model(m: &LinearModel) -> Self {
        ModelFile {
            n: m.n,
            n_d: m.n_d,
            m_diag: m.m_diag.to_vec(),
            l1m: flat(&m.blocks.l1m),
            l2m: flat(&m.blocks.l2m),
            l3m: flat(&m.blocks.l3m),
            d_m: flat(&m.blocks.d_m),
            f1m: flat(&m.blocks.f1m),
            f2m: flat(&m.blocks.f2m),
            f3m: flat(&m.blocks.f3m),
            b1: flat(&m.blocks.b1),
            b_d: flat(&m.b_d),
            output: m.output.clone(),
            meta: m.meta.clone(),
        }
    }

    fn into_model(self) -> Result<LinearModel> {
        let n = self.n;
        let blocks = ScaledBlocks {
            l1m: unflat("l1m", &self.l1m, n, n)?,
            l2m: unflat("l2m", &self.l2m, n, n)?,
            l3m: unflat("l3m", &self.l3m, n, n)?,
            d_m: unflat("d_m", &self.d_m, n, n)?,
            f1m: unflat("f1m", &self.f1m, n, n)?,
            f2m: unflat("f2m", &self.f2m, n, n)?,
            f3m: unflat("f3m", &self.f3m, n, n)?,
            b1: unflat("b1", &self.b1, n, n)?,
        };
        let b_d = unflat("b_d", &self.b_d, 4 * n, self.n_d)?;
        LinearModel::from_parts(
            n,
            Array1::from(self.m_diag),
            blocks,
            b_d,
            self.output,
            self.meta,
        )
    }
}

/// Schema for building a model from explicit parameters and a full network
/// admittance. Complex admittance entries are stored as [re, im] pairs in
/// row-major order.
#[derive(Serialize, Deserialize)]
pub struct ModelInputs {
    pub generators: Vec<GeneratorParams>,
    pub n_bus: usize,
    pub admittance: Vec<[f64; 2]>,
    /// disturbance inputs: 1-based generator indices whose excitation
    /// channel the disturbance enters through
    pub disturbance_generators: Vec<usize>,
    pub output: Option<OutputSpec>,
}

impl ModelInputs {
    pub fn build(&self) -> Result<(LinearModel, Vec<String>)> {
        let n = self.generators.len();
        if n == 0 {
            return Err(Error::Parameter("no generators".into()));
        }
        if self.admittance.len() != self.n_bus * self.n_bus {
            return Err(Error::Dimension(format!(
                "admittance has {} entries, expected {}",
                self.admittance.len(),
                self.n_bus * self.n_bus
            )));
        }
        let y = Array2::from_shape_fn((self.n_bus, self.n_bus), |(i, j)| {
            let e = self.admittance[i * self.n_bus + j];
            Complex64::new(e[0], e[1])
        });
        let adm = NetworkAdmittance::new(y, n)?;
        let xd_prime = Array1::from_iter(self.generators.iter().map(|p| p.x_d_prime));
        let (y_alpha, y_beta) = kron_reduce(&adm, &xd_prime)?;
        let (blocks, warnings) = linearize(&self.generators, &y_alpha, &y_beta)?;
        if self.disturbance_generators.is_empty() {
            return Err(Error::Parameter("disturbance_generators must not be empty".into()));
        }
        let mut b_d = Array2::<f64>::zeros((4 * n, self.disturbance_generators.len()));
        for (k, &g) in self.disturbance_generators.iter().enumerate() {
            if g == 0 || g > n {
                return Err(Error::Parameter(format!("disturbance generator {g} out of range 1..={n}")));
            }
            let p = &self.generators[g - 1];
            b_d[[3 * n + g - 1, k]] = p.inertia.sqrt() / p.t_a;
        }
        let output = self.output.clone().unwrap_or_else(|| OutputSpec::star_from_first(n));
        let model = assemble(
            &self.generators,
            &blocks,
            b_d,
            output,
            ModelMeta { seed: None, provenance: "params-file".into() },
        )?;
        Ok((model, warnings))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_params(n: usize) -> Vec<GeneratorParams> {
        (0..n)
            .map(|i| GeneratorParams {
                inertia: 3.0 + i as f64,
                damping: 2.0,
                t_do_prime: 5.0,
                t_a: 0.05 + 0.01 * i as f64,
                k_a: 50.0,
                x_d: 1.8,
                x_d_prime: 0.3,
                delta0: 0.05 * i as f64,
                e_q0: 1.0 + 0.02 * i as f64,
            })
            .collect()
    }

    #[test]
    fn kron_no_load_buses_is_identity_on_y11() {
        let model = synth_random_model(4, 1, 3).unwrap();
        let _ = model; // synthesized through the n_l = 0 path internally
        let y = Array2::from_shape_fn((3, 3), |(i, j)| {
            Complex64::new(if i == j { 2.0 } else { -0.4 }, if i == j { -1.0 } else { 0.2 })
        });
        let adm = NetworkAdmittance::new(y.clone(), 3).unwrap();
        let xd = array![0.3, 0.3, 0.3];
        let (ya, yb) = kron_reduce(&adm, &xd).unwrap();
        assert_eq!(ya, y);
        // inverse identity
        let mut aug = ya.clone();
        for i in 0..3 {
            aug[[i, i]] += Complex64::new(0.0, xd[i]);
        }
        let prod = yb.dot(&aug);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - expect).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn kron_two_bus_matches_hand_expansion() {
        // one generator bus, one load bus: Y_alpha = y11 - y12^2 / y22
        let y11 = Complex64::new(1.2, -2.5);
        let y12 = Complex64::new(-0.8, 1.1);
        let y22 = Complex64::new(2.0, 0.0);
        let y = array![[y11, y12], [y12, y22]];
        let adm = NetworkAdmittance::new(y, 1).unwrap();
        let (ya, _) = kron_reduce(&adm, &array![0.25]).unwrap();
        let expect = y11 - y12 * y12 / y22;
        assert!((ya[[0, 0]] - expect).norm() < 1e-14);
    }

    #[test]
    fn kron_singular_load_block_is_reported() {
        let y = array![
            [Complex64::new(1.0, 0.0), Complex64::new(0.5, 0.0)],
            [Complex64::new(0.5, 0.0), Complex64::new(0.0, 0.0)]
        ];
        let adm = NetworkAdmittance::new(y, 1).unwrap();
        let err = kron_reduce(&adm, &array![0.3]).unwrap_err();
        assert!(matches!(err, Error::KronReduction(_)));
        assert!(err.to_string().contains("Y22"));
    }

    #[test]
    fn linearize_single_machine_has_zero_laplacians() {
        let params = test_params(1);
        let y = array![[Complex64::new(1.5, -0.8)]];
        let adm = NetworkAdmittance::new(y, 1).unwrap();
        let (ya, yb) = kron_reduce(&adm, &array![params[0].x_d_prime]).unwrap();
        let (blocks, _) = linearize(&params, &ya, &yb).unwrap();
        assert_eq!(blocks.l1, array![[0.0]]);
        assert_eq!(blocks.l2, array![[0.0]]);
        assert_eq!(blocks.l3, array![[0.0]]);
    }

    #[test]
    fn linearize_symmetric_pair_gives_symmetric_l1() {
        let mut params = test_params(2);
        params[1] = params[0].clone(); // identical generators, equal angles
        let line = 1.0 / Complex64::new(0.2, 2.0);
        let sh = Complex64::new(1.0, -0.5);
        let y = array![[line + sh, -line], [-line, line + sh]];
        let adm = NetworkAdmittance::new(y, 2).unwrap();
        let xd = array![params[0].x_d_prime, params[1].x_d_prime];
        let (ya, yb) = kron_reduce(&adm, &xd).unwrap();
        let (blocks, _) = linearize(&params, &ya, &yb).unwrap();
        assert_relative_eq!(blocks.l1[[0, 1]], blocks.l1[[1, 0]], max_relative = 1e-12);
    }

    #[test]
    fn linearize_row_sums_vanish() {
        let model = synth_random_model(3, 1, 9).unwrap();
        let _ = model;
        let params = test_params(3);
        let mut y = Array2::<C64>::zeros((3, 3));
        for (i, j) in [(0usize, 1usize), (1, 2), (0, 2)] {
            let adm = 1.0 / Complex64::new(0.25, 2.5);
            y[[i, j]] -= adm;
            y[[j, i]] -= adm;
            y[[i, i]] += adm;
            y[[j, j]] += adm;
        }
        for i in 0..3 {
            y[[i, i]] += Complex64::new(1.2, -0.4);
        }
        let adm = NetworkAdmittance::new(y, 3).unwrap();
        let xd = Array1::from_iter(params.iter().map(|p| p.x_d_prime));
        let (ya, yb) = kron_reduce(&adm, &xd).unwrap();
        let (blocks, _) = linearize(&params, &ya, &yb).unwrap();
        for m in [&blocks.l1, &blocks.l2, &blocks.l3] {
            for i in 0..3 {
                let s: f64 = m.row(i).sum();
                assert!(s.abs() < 1e-12, "row sum {s}");
            }
        }
    }

    #[test]
    fn assemble_unit_inertia_unit_regulator_gives_identity_b1() {
        let mut params = test_params(2);
        for p in &mut params {
            p.inertia = 1.0;
            p.t_a = 1.0;
        }
        let line = 1.0 / Complex64::new(0.2, 2.0);
        let sh = Complex64::new(1.0, -0.5);
        let y = array![[line + sh, -line], [-line, line + sh]];
        let adm = NetworkAdmittance::new(y, 2).unwrap();
        let xd = array![0.3, 0.3];
        let (ya, yb) = kron_reduce(&adm, &xd).unwrap();
        let (blocks, _) = linearize(&params, &ya, &yb).unwrap();
        let mut b_d = Array2::zeros((8, 1));
        b_d[[6, 0]] = 1.0;
        let model = assemble(
            &params,
            &blocks,
            b_d,
            OutputSpec::star_from_first(2),
            ModelMeta::default(),
        )
        .unwrap();
        assert_eq!(model.blocks.b1, Array2::eye(2));
    }

    #[test]
    fn assembled_model_annihilates_consensus_direction() {
        let model = synth_random_model(5, 2, 1).unwrap();
        let v0 = model.v0();
        let res = model.a().dot(&v0);
        let scale = linalg::frob(model.a());
        assert!(res.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-9 * scale);
        for blk in [&model.blocks.l1m, &model.blocks.l2m, &model.blocks.l3m] {
            let r = blk.dot(model.vbar());
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n <= 1e-9 * linalg::frob(blk).max(1e-12));
        }
    }

    #[test]
    fn spectrum_matches_unscaled_form() {
        // similarity by I4 (x) M^(1/2) preserves the spectrum of the
        // standard-form model with the same unit couplings
        let params = test_params(3);
        let mut y = Array2::<C64>::zeros((3, 3));
        for (i, j) in [(0usize, 1usize), (1, 2)] {
            let adm = 1.0 / Complex64::new(0.3, 3.0);
            y[[i, j]] -= adm;
            y[[j, i]] -= adm;
            y[[i, i]] += adm;
            y[[j, j]] += adm;
        }
        for i in 0..3 {
            y[[i, i]] += Complex64::new(1.5, -0.6);
        }
        let n = 3;
        let adm = NetworkAdmittance::new(y, n).unwrap();
        let xd = Array1::from_iter(params.iter().map(|p| p.x_d_prime));
        let (ya, yb) = kron_reduce(&adm, &xd).unwrap();
        let (blocks, _) = linearize(&params, &ya, &yb).unwrap();
        let mut b_d = Array2::zeros((4 * n, 1));
        b_d[[3 * n, 0]] = 1.0;
        let model = assemble(
            &params,
            &blocks,
            b_d,
            OutputSpec::star_from_first(n),
            ModelMeta::default(),
        )
        .unwrap();

        // independent oracle: standard-form matrix before mass scaling
        let mut a5 = Array2::<f64>::zeros((4 * n, 4 * n));
        for i in 0..n {
            a5[[i, n + i]] = 1.0;
            a5[[2 * n + i, 3 * n + i]] = 1.0;
            a5[[3 * n + i, 3 * n + i]] = -1.0;
            a5[[n + i, n + i]] = -params[i].damping / params[i].inertia;
            for j in 0..n {
                a5[[n + i, j]] = blocks.l1[[i, j]] / params[i].inertia;
                a5[[n + i, 2 * n + j]] = blocks.f1[[i, j]] / params[i].inertia;
                a5[[2 * n + i, j]] = blocks.l2[[i, j]] / params[i].t_do_prime;
                a5[[2 * n + i, 2 * n + j]] = blocks.f2[[i, j]] / params[i].t_do_prime;
                a5[[3 * n + i, j]] = blocks.l3[[i, j]] / params[i].t_a;
                a5[[3 * n + i, 2 * n + j]] = blocks.f3[[i, j]] / params[i].t_a;
            }
        }
        let mut ev_a: Vec<C64> = linalg::eigvals(model.a()).unwrap().to_vec();
        let mut ev_5: Vec<C64> = linalg::eigvals(&a5).unwrap().to_vec();
        let key = |l: &C64| (l.re, l.im);
        ev_a.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
        ev_5.sort_by(|x, y| key(x).partial_cmp(&key(y)).unwrap());
        let scale = linalg::frob(model.a());
        for (x, y) in ev_a.iter().zip(&ev_5) {
            assert!((x - y).norm() < 1e-8 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn synth_is_deterministic_and_consensus_stable() {
        let m1 = synth_random_model(5, 2, 7).unwrap();
        let m2 = synth_random_model(5, 2, 7).unwrap();
        assert_eq!(m1.to_json().unwrap(), m2.to_json().unwrap());
        let report = consensus_spectrum_report(m1.a()).unwrap();
        assert_eq!(report.zero_count, 1);
        assert!(report.max_re_rest < 0.0);
    }

    #[test]
    fn synth_row_sums_across_sizes() {
        for &(n, seed) in &[(2usize, 5u64), (10, 11), (25, 2), (50, 13)] {
            let model = synth_random_model(n, 1, seed).unwrap();
            // mass-scaled rows annihilate vbar instead of summing to zero
            let r = model.blocks.l1m.dot(model.vbar());
            let nrm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(nrm < 1e-9 * linalg::frob(&model.blocks.l1m).max(1.0), "n={n}");
        }
    }

    #[test]
    fn output_star_spec_matches_paper_pattern() {
        let n = 4;
        let m_diag = Array1::ones(n);
        let c = build_output(&OutputSpec::star_from_first(n), &m_diag).unwrap();
        // top block: [1_{n-1} -I_{n-1}] on the angle columns
        for k in 0..n - 1 {
            assert_eq!(c[[k, 0]], 1.0);
            for j in 1..n {
                assert_eq!(c[[k, j]], if j == k + 1 { -1.0 } else { 0.0 });
            }
        }
        // bottom block: identity on frequency columns
        for i in 0..n {
            assert_eq!(c[[n - 1 + i, n + i]], 1.0);
        }
    }

    #[test]
    fn output_frequencies_only() {
        let m_diag = array![1.0, 1.0];
        let spec = OutputSpec { angle_pairs: vec![], all_frequencies: true };
        let c = build_output(&spec, &m_diag).unwrap();
        assert_eq!(c.nrows(), 2);
        assert_eq!(c[[0, 2]], 1.0);
        assert_eq!(c[[1, 3]], 1.0);
    }

    #[test]
    fn output_mass_scaling() {
        let m_diag = array![4.0, 4.0];
        let spec = OutputSpec { angle_pairs: vec![(1, 2)], all_frequencies: false };
        let c = build_output(&spec, &m_diag).unwrap();
        assert_eq!(c[[0, 0]], 0.5);
        assert_eq!(c[[0, 1]], -0.5);
    }

    #[test]
    fn output_rejects_out_of_range() {
        let m_diag = array![1.0, 1.0];
        let spec = OutputSpec { angle_pairs: vec![(1, 3)], all_frequencies: false };
        assert!(matches!(build_output(&spec, &m_diag), Err(Error::Parameter(_))));
    }

    #[test]
    fn model_roundtrips_bit_exactly() {
        let model = synth_random_model(6, 2, 42).unwrap();
        let json = model.to_json().unwrap();
        let back = LinearModel::from_json(&json).unwrap();
        assert_eq!(json, back.to_json().unwrap());
        assert_eq!(model.a(), back.a());
        assert_eq!(model.b_d, back.b_d);
    }
}
