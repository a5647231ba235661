//! Primal-dual interior-point solver for [`ConicProblem`]s.
//!
//! The reference backend runs a homogeneous self-dual embedding with
//! Nesterov-Todd scaling and a Mehrotra predictor-corrector, all on dense
//! linear algebra. The embedding makes infeasibility detection part of the
//! iteration: when `tau -> 0` the iterates converge to a Farkas certificate
//! instead of an optimal pair.
//!
//! Each Newton step reduces to a symmetric indefinite system in the equality
//! multipliers and the free variables,
//!
//! ```text
//! [ A_K Phi A_K'   A_F ] [dy  ]   [r1]
//! [ A_F'           0   ] [dx_F] = [r2]
//! ```
//!
//! where `Phi = W'W` is the scaling operator on the cone variables.

use std::process::Command;

use log::debug;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{svec_len, svec_pairs, ConicProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
    NumericalFailure,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::MaxIter => "max-iter",
            SolveStatus::NumericalFailure => "numerical-failure",
        }
    }

    pub fn parse(s: &str) -> Option<SolveStatus> {
        Some(match s {
            "optimal" => SolveStatus::Optimal,
            "infeasible" => SolveStatus::Infeasible,
            "unbounded" => SolveStatus::Unbounded,
            "max-iter" => SolveStatus::MaxIter,
            "numerical-failure" => SolveStatus::NumericalFailure,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    /// Primal point (or dual-infeasibility ray when `Unbounded`).
    pub x: Vec<f64>,
    /// Equality multipliers (or Farkas ray when `Infeasible`).
    pub y: Vec<f64>,
    /// Dual slack `c - A'y` on the cone variables.
    pub z: Vec<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolverOptions {
    pub tol_feas: f64,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub tol_infeas: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_feas: 1e-8,
            tol_gap_abs: 1e-8,
            tol_gap_rel: 1e-8,
            tol_infeas: 1e-8,
            max_iter: 120,
        }
    }
}

impl SolverOptions {
    /// Same options with every tolerance multiplied by `factor`.
    pub fn relaxed(&self, factor: f64) -> Self {
        Self {
            tol_feas: self.tol_feas * factor,
            tol_gap_abs: self.tol_gap_abs * factor,
            tol_gap_rel: self.tol_gap_rel * factor,
            tol_infeas: self.tol_infeas * factor,
            max_iter: self.max_iter,
        }
    }
}

/// Pluggable conic backend.
pub trait ConicSolver: Send + Sync {
    fn solve(&self, cp: &ConicProblem, opts: &SolverOptions) -> ConicSolution;
}

/// The built-in dense interior-point method.
#[derive(Debug, Default, Clone, Copy)]
pub struct InteriorPoint;

impl ConicSolver for InteriorPoint {
    fn solve(&self, cp: &ConicProblem, opts: &SolverOptions) -> ConicSolution {
        solve(cp, opts)
    }
}

#[derive(Debug, Error)]
pub enum EigError {
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig(m: &DMatrix<f64>) -> Result<f64, EigError> {
    if m.nrows() != m.ncols() {
        return Err(EigError::NotSquare(m.nrows(), m.ncols()));
    }
    if m.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(EigError::Asymmetric(asym));
    }
    let sym = (m + m.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym).eigenvalues.min())
}

pub fn smat(v: &[f64], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(k, k);
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    for (idx, (i, j)) in svec_pairs(k).into_iter().enumerate() {
        if i == j {
            m[(i, i)] = v[idx];
        } else {
            m[(i, j)] = v[idx] * r2;
            m[(j, i)] = v[idx] * r2;
        }
    }
    m
}

pub fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let k = m.nrows();
    let s2 = std::f64::consts::SQRT_2;
    svec_pairs(k)
        .into_iter()
        .map(|(i, j)| {
            if i == j {
                m[(i, i)]
            } else {
                0.5 * (m[(i, j)] + m[(j, i)]) * s2
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Problem preprocessing

struct PsdBlock {
    k: usize,
    offset: usize,
    /// Global rows of A that touch this block.
    rows: Vec<usize>,
    /// Dense restriction of A to (rows, block columns).
    a_local: DMatrix<f64>,
}

struct Scaled {
    n: usize,
    p: usize,
    nfree: usize,
    nonneg: usize,
    /// Rows of A: (col, value).
    rows: Vec<Vec<(usize, f64)>>,
    /// Columns of A: (row, value).
    cols: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    c: Vec<f64>,
    blocks: Vec<PsdBlock>,
    row_scale: Vec<f64>,
    col_scale: Vec<f64>,
    degree: usize,
}

fn preprocess(cp: &ConicProblem) -> Scaled {
    let n = cp.num_vars();
    let p = cp.num_eqs();
    let cones = &cp.cones;
    let nfree = cones.free;
    let nonneg = cones.nonneg;

    // column groups: every free/nonneg variable alone, each PSD block together
    let mut group_of = vec![0usize; n];
    let mut ngroups = 0;
    for g in group_of.iter_mut().take(nfree + nonneg) {
        *g = ngroups;
        ngroups += 1;
    }
    for (j, &k) in cones.psd.iter().enumerate() {
        let off = cones.psd_offset(j);
        for g in group_of.iter_mut().skip(off).take(svec_len(k)) {
            *g = ngroups;
        }
        ngroups += 1;
    }

    let mut row_scale = vec![1.0; p];
    let mut group_scale = vec![1.0; ngroups];
    // Ruiz equilibration in the infinity norm, columns grouped per cone block
    for _ in 0..12 {
        let mut rmax = vec![0.0f64; p];
        let mut gmax = vec![0.0f64; ngroups];
        for &(r, c, v) in &cp.a {
            let s = (v * row_scale[r] * group_scale[group_of[c]]).abs();
            rmax[r] = rmax[r].max(s);
            gmax[group_of[c]] = gmax[group_of[c]].max(s);
        }
        for (rs, m) in row_scale.iter_mut().zip(&rmax) {
            if *m > 0.0 {
                *rs /= m.sqrt();
            }
        }
        for (gs, m) in group_scale.iter_mut().zip(&gmax) {
            if *m > 0.0 {
                *gs /= m.sqrt();
            }
        }
    }
    let col_scale: Vec<f64> = (0..n).map(|j| group_scale[group_of[j]]).collect();

    let mut rows = vec![Vec::new(); p];
    let mut cols = vec![Vec::new(); n];
    for &(r, c, v) in &cp.a {
        let s = v * row_scale[r] * col_scale[c];
        if s != 0.0 {
            rows[r].push((c, s));
            cols[c].push((r, s));
        }
    }
    let b: Vec<f64> = cp.b.iter().zip(&row_scale).map(|(v, s)| v * s).collect();
    let c: Vec<f64> = cp.c.iter().zip(&col_scale).map(|(v, s)| v * s).collect();

    let mut blocks = Vec::new();
    for (j, &k) in cones.psd.iter().enumerate() {
        let offset = cones.psd_offset(j);
        let d = svec_len(k);
        let mut touched: Vec<usize> = (offset..offset + d)
            .flat_map(|col| cols[col].iter().map(|(r, _)| *r))
            .collect();
        touched.sort_unstable();
        touched.dedup();
        let mut a_local = DMatrix::zeros(touched.len(), d);
        for (li, &r) in touched.iter().enumerate() {
            for &(col, v) in &rows[r] {
                if col >= offset && col < offset + d {
                    a_local[(li, col - offset)] = v;
                }
            }
        }
        blocks.push(PsdBlock {
            k,
            offset,
            rows: touched,
            a_local,
        });
    }

    Scaled {
        n,
        p,
        nfree,
        nonneg,
        rows,
        cols,
        b,
        c,
        blocks,
        row_scale,
        col_scale,
        degree: cones.degree(),
    }
}

impl Scaled {
    fn a_mul(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|(c, v)| v * x[*c]).sum())
            .collect()
    }

    fn at_mul(&self, y: &[f64]) -> Vec<f64> {
        self.cols
            .iter()
            .map(|c| c.iter().map(|(r, v)| v * y[*r]).sum())
            .collect()
    }

    fn cone_start(&self) -> usize {
        self.nfree
    }
}

// ---------------------------------------------------------------------------
// Nesterov-Todd scaling

struct BlockScaling {
    /// W(Z) = r' Z r,  W^{-T}(X) = rti' X rti.
    r: DMatrix<f64>,
    rti: DMatrix<f64>,
    lambda: DVector<f64>,
    /// Phi = W'W in svec coordinates.
    phi: DMatrix<f64>,
}

struct Scaling {
    /// nonneg: (w, lambda) with w = sqrt(x / z)
    lin_w: Vec<f64>,
    lin_lambda: Vec<f64>,
    blocks: Vec<BlockScaling>,
}

fn chol_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(m.clone()).map(|c| c.l())
}

fn block_scaling(x: &[f64], z: &[f64], k: usize) -> Option<BlockScaling> {
    let xm = smat(x, k);
    let zm = smat(z, k);
    let lx = chol_lower(&xm)?;
    let lz = chol_lower(&zm)?;
    let prod = lz.transpose() * &lx;
    let svd = nalgebra::SVD::new(prod, true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let lam = svd.singular_values;
    if lam.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return None;
    }
    let inv_sqrt = DMatrix::from_diagonal(&lam.map(|l| 1.0 / l.sqrt()));
    let r = &lx * vt.transpose() * &inv_sqrt;
    let rti = &lz * &u * &inv_sqrt;
    let pm = &r * r.transpose();
    let pairs = svec_pairs(k);
    let d = pairs.len();
    let mut phi = DMatrix::zeros(d, d);
    let r2 = std::f64::consts::FRAC_1_SQRT_2;
    let alpha = |i: usize, j: usize| if i == j { 0.5 } else { r2 };
    for (a, &(i, j)) in pairs.iter().enumerate() {
        for (bidx, &(kk, l)) in pairs.iter().enumerate().skip(a) {
            let v = 2.0
                * alpha(i, j)
                * alpha(kk, l)
                * (pm[(i, kk)] * pm[(j, l)] + pm[(i, l)] * pm[(j, kk)]);
            phi[(a, bidx)] = v;
            phi[(bidx, a)] = v;
        }
    }
    Some(BlockScaling {
        r,
        rti,
        lambda: lam,
        phi,
    })
}

fn compute_scaling(sc: &Scaled, x: &[f64], z: &[f64]) -> Option<Scaling> {
    let s0 = sc.cone_start();
    let mut lin_w = Vec::with_capacity(sc.nonneg);
    let mut lin_lambda = Vec::with_capacity(sc.nonneg);
    for i in s0..s0 + sc.nonneg {
        if !(x[i] > 0.0 && z[i] > 0.0) {
            return None;
        }
        lin_w.push((x[i] / z[i]).sqrt());
        lin_lambda.push((x[i] * z[i]).sqrt());
    }
    let mut blocks = Vec::with_capacity(sc.blocks.len());
    for blk in &sc.blocks {
        let d = svec_len(blk.k);
        blocks.push(block_scaling(
            &x[blk.offset..blk.offset + d],
            &z[blk.offset..blk.offset + d],
            blk.k,
        )?);
    }
    Some(Scaling {
        lin_w,
        lin_lambda,
        blocks,
    })
}

/// Vectors over the cone variables only (nonneg part then svec blocks).
impl Scaling {
    /// W applied to a dual direction.
    fn scale_dual(&self, sc: &Scaled, v: &[f64]) -> Vec<Vec<f64>> {
        self.map_blocks(sc, v, |bs, m| bs.r.transpose() * m * &bs.r, |w, x| x * w)
    }

    /// Applies a per-block map; returns one svec (or linear) vector per block,
    /// the linear cone first.
    fn map_blocks(
        &self,
        sc: &Scaled,
        v: &[f64],
        psd: impl Fn(&BlockScaling, &DMatrix<f64>) -> DMatrix<f64>,
        lin: impl Fn(f64, f64) -> f64,
    ) -> Vec<Vec<f64>> {
        let s0 = sc.cone_start();
        let mut out = Vec::with_capacity(1 + sc.blocks.len());
        out.push(
            (0..sc.nonneg)
                .map(|i| lin(self.lin_w[i], v[s0 + i]))
                .collect(),
        );
        for (blk, bs) in sc.blocks.iter().zip(&self.blocks) {
            let d = svec_len(blk.k);
            let m = smat(&v[blk.offset..blk.offset + d], blk.k);
            out.push(svec(&psd(bs, &m)));
        }
        out
    }

    /// W^{-1} applied to scaled vectors, written into a full-length vector.
    fn unscale_dual(&self, sc: &Scaled, parts: &[Vec<f64>], out: &mut [f64]) {
        let s0 = sc.cone_start();
        for i in 0..sc.nonneg {
            out[s0 + i] = parts[0][i] / self.lin_w[i];
        }
        for (bi, (blk, bs)) in sc.blocks.iter().zip(&self.blocks).enumerate() {
            let m = smat(&parts[bi + 1], blk.k);
            let v = svec(&(&bs.rti * m * bs.rti.transpose()));
            out[blk.offset..blk.offset + v.len()].copy_from_slice(&v);
        }
    }


    /// W^T applied to scaled vectors (inverse of `scale_primal`).
    fn unscale_primal(&self, sc: &Scaled, parts: &[Vec<f64>], out: &mut [f64]) {
        let s0 = sc.cone_start();
        for i in 0..sc.nonneg {
            out[s0 + i] = parts[0][i] * self.lin_w[i];
        }
        for (bi, (blk, bs)) in sc.blocks.iter().zip(&self.blocks).enumerate() {
            let m = smat(&parts[bi + 1], blk.k);
            let v = svec(&(&bs.r * m * bs.r.transpose()));
            out[blk.offset..blk.offset + v.len()].copy_from_slice(&v);
        }
    }


    fn lambda_parts(&self, sc: &Scaled) -> Vec<Vec<f64>> {
        let mut out = vec![self.lin_lambda.clone()];
        for (blk, bs) in sc.blocks.iter().zip(&self.blocks) {
            out.push(svec(&DMatrix::from_diagonal(&bs.lambda)));
            debug_assert_eq!(bs.lambda.len(), blk.k);
        }
        out
    }
}

// Jordan-algebra helpers on scaled vectors (lambda is diagonal per block).

fn jordan_prod(a: &[Vec<f64>], b: &[Vec<f64>], sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut out = vec![a[0].iter().zip(&b[0]).map(|(x, y)| x * y).collect()];
    for (bi, &k) in sizes.iter().enumerate() {
        let am = smat(&a[bi + 1], k);
        let bm = smat(&b[bi + 1], k);
        let p = (&am * &bm + &bm * &am) * 0.5;
        out.push(svec(&p));
    }
    out
}

/// Solves `lambda o q = r` for q.
fn lambda_solve(lambda: &Scaling, r: &[Vec<f64>], sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut out = vec![r[0]
        .iter()
        .zip(&lambda.lin_lambda)
        .map(|(v, l)| v / l)
        .collect()];
    for (bi, &k) in sizes.iter().enumerate() {
        let lam = &lambda.blocks[bi].lambda;
        let rm = smat(&r[bi + 1], k);
        let mut q = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                q[(i, j)] = 2.0 * rm[(i, j)] / (lam[i] + lam[j]);
            }
        }
        out.push(svec(&q));
    }
    out
}

fn identity_parts(nonneg: usize, sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![1.0; nonneg]];
    for &k in sizes {
        out.push(svec(&DMatrix::identity(k, k)));
    }
    out
}

fn parts_axpy(a: f64, x: &[Vec<f64>], y: &mut [Vec<f64>]) {
    for (xp, yp) in x.iter().zip(y.iter_mut()) {
        for (xv, yv) in xp.iter().zip(yp.iter_mut()) {
            *yv += a * xv;
        }
    }
}

/// Largest step `alpha` keeping `lambda + alpha d` in the cone.
fn max_step(lambda: &Scaling, d: &[Vec<f64>], sizes: &[usize]) -> f64 {
    let mut alpha = f64::INFINITY;
    for (l, dv) in lambda.lin_lambda.iter().zip(&d[0]) {
        if *dv < 0.0 {
            alpha = alpha.min(-l / dv);
        }
    }
    for (bi, &k) in sizes.iter().enumerate() {
        let lam = &lambda.blocks[bi].lambda;
        let dm = smat(&d[bi + 1], k);
        let mut s = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                s[(i, j)] = dm[(i, j)] / (lam[i] * lam[j]).sqrt();
            }
        }
        let emin = SymmetricEigen::new(s).eigenvalues.min();
        if emin < 0.0 {
            alpha = alpha.min(-1.0 / emin);
        }
    }
    alpha
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Reduced KKT system

struct Kkt {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    mat: DMatrix<f64>,
}

fn factor_kkt(sc: &Scaled, scaling: &Scaling) -> Option<Kkt> {
    let p = sc.p;
    let f = sc.nfree;
    let dim = p + f;
    let mut k = DMatrix::<f64>::zeros(dim, dim);
    // nonnegative cone columns: Phi = w^2
    let s0 = sc.cone_start();
    for i in 0..sc.nonneg {
        let w2 = scaling.lin_w[i] * scaling.lin_w[i];
        let col = &sc.cols[s0 + i];
        for &(r1, v1) in col {
            for &(r2, v2) in col {
                k[(r1, r2)] += w2 * v1 * v2;
            }
        }
    }
    for (blk, bs) in sc.blocks.iter().zip(&scaling.blocks) {
        if blk.rows.is_empty() {
            continue;
        }
        let t = &blk.a_local * &bs.phi;
        let m = &t * blk.a_local.transpose();
        for (li, &ri) in blk.rows.iter().enumerate() {
            for (lj, &rj) in blk.rows.iter().enumerate() {
                k[(ri, rj)] += m[(li, lj)];
            }
        }
    }
    for j in 0..f {
        for &(r, v) in &sc.cols[j] {
            k[(r, p + j)] = v;
            k[(p + j, r)] = v;
        }
    }
    let dmax = (0..p).map(|i| k[(i, i)].abs()).fold(1.0f64, f64::max);
    let mat = k.clone();
    for i in 0..p {
        k[(i, i)] += 1e-13 * dmax;
    }
    for j in 0..f {
        k[(p + j, p + j)] -= 1e-11;
    }
    if k.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Kkt { lu: k.lu(), mat })
}

impl Kkt {
    fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let mut sol = self.lu.solve(rhs)?;
        for _ in 0..4 {
            let res = rhs - &self.mat * &sol;
            if res.amax() <= 1e-15 * rhs.amax().max(1e-300) {
                break;
            }
            let corr = self.lu.solve(&res)?;
            sol += corr;
        }
        if sol.iter().all(|v| v.is_finite()) {
            Some(sol)
        } else {
            None
        }
    }
}

type Parts = Vec<Vec<f64>>;

/// Solution of one reduced Newton system in scaled coordinates.
struct ScaledStep {
    dx_free: Vec<f64>,
    /// `W^{-T} dx` on the cone variables.
    dxs: Parts,
    dy: Vec<f64>,
}

impl Scaling {
    /// `G v = A_K W' v` for scaled cone parts `v`.
    fn g_mul(&self, sc: &Scaled, v: &[Vec<f64>]) -> Vec<f64> {
        let mut full = vec![0.0; sc.n];
        self.unscale_primal(sc, v, &mut full);
        sc.a_mul(&full)
    }

    /// `G' y = W A_K' y`.
    fn gt_mul(&self, sc: &Scaled, y: &[f64]) -> Parts {
        self.scale_dual(sc, &sc.at_mul(y))
    }
}

fn solve_scaled_once(
    sc: &Scaled,
    scaling: &Scaling,
    kkt: &Kkt,
    rx_free: &[f64],
    rxs: &[Vec<f64>],
    ry: &[f64],
) -> Option<ScaledStep> {
    let p = sc.p;
    let f = sc.nfree;
    let g_rxs = scaling.g_mul(sc, rxs);
    let mut rhs = DVector::zeros(p + f);
    for i in 0..p {
        rhs[i] = ry[i] - g_rxs[i];
    }
    for j in 0..f {
        rhs[p + j] = -rx_free[j];
    }
    let sol = kkt.solve(&rhs)?;
    let dy: Vec<f64> = sol.as_slice()[..p].to_vec();
    let mut dxs = scaling.gt_mul(sc, &dy);
    parts_axpy(1.0, rxs, &mut dxs);
    Some(ScaledStep {
        dx_free: sol.as_slice()[p..p + f].to_vec(),
        dxs,
        dy,
    })
}

/// Solves `H dx - A'dy = rx`, `A dx = ry` with `H = diag(0_free, Phi^{-1})`
/// in the scaled unknown `dxs = W^{-T} dx_K`:
///
/// ```text
/// dxs - G'dy = W rx_K + qs,   -A_F'dy = rx_F,   A_F dx_F + G dxs = ry
/// ```
///
/// `qs` is an extra right-hand side already in scaled coordinates; keeping
/// it separate avoids forming `W W^{-1} qs`. The result is refined against
/// the scaled system, which stays well conditioned as the iterates approach
/// the boundary.
fn solve_scaled(
    sc: &Scaled,
    scaling: &Scaling,
    kkt: &Kkt,
    rx: &[f64],
    qs: Option<&[Vec<f64>]>,
    ry: &[f64],
) -> Option<ScaledStep> {
    let f = sc.nfree;
    let mut rxs = scaling.scale_dual(sc, rx);
    if let Some(q) = qs {
        parts_axpy(1.0, q, &mut rxs);
    }
    let rx_free = &rx[..f];
    let mut st = solve_scaled_once(sc, scaling, kkt, rx_free, &rxs, ry)?;
    let scale = norm(rx_free)
        .max(norm(ry))
        .max(rxs.iter().map(|v| norm(v)).fold(0.0, f64::max))
        .max(1e-300);
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let gt_dy = scaling.gt_mul(sc, &st.dy);
        let mut es = rxs.clone();
        parts_axpy(-1.0, &st.dxs, &mut es);
        parts_axpy(1.0, &gt_dy, &mut es);
        let at_dy = sc.at_mul(&st.dy);
        let ef: Vec<f64> = (0..f).map(|j| rx_free[j] + at_dy[j]).collect();
        let mut full = vec![0.0; sc.n];
        full[..f].copy_from_slice(&st.dx_free);
        scaling.unscale_primal(sc, &st.dxs, &mut full);
        let adx = sc.a_mul(&full);
        let ey: Vec<f64> = (0..sc.p).map(|i| ry[i] - adx[i]).collect();
        let err = norm(&ef)
            .max(norm(&ey))
            .max(es.iter().map(|v| norm(v)).fold(0.0, f64::max));
        if err <= 1e-15 * scale || err >= 0.5 * best {
            break;
        }
        best = err;
        let c = solve_scaled_once(sc, scaling, kkt, &ef, &es, &ey)?;
        for (a, b) in st.dx_free.iter_mut().zip(&c.dx_free) {
            *a += b;
        }
        parts_axpy(1.0, &c.dxs, &mut st.dxs);
        for (a, b) in st.dy.iter_mut().zip(&c.dy) {
            *a += b;
        }
    }
    Some(st)
}

// ---------------------------------------------------------------------------

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    dtau: f64,
    dkappa: f64,
    dxs: Parts,
    dzs: Parts,
}

struct Residuals {
    pres: f64,
    dres: f64,
    pobj: f64,
    dobj: f64,
    gap: f64,
}

/// Residuals of the normalized iterate, measured on the unscaled problem.
fn original_residuals(
    cp: &ConicProblem,
    sc: &Scaled,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    tau: f64,
) -> (Residuals, Vec<f64>, Vec<f64>, Vec<f64>) {
    let xo: Vec<f64> = x.iter().zip(&sc.col_scale).map(|(v, s)| v * s / tau).collect();
    let yo: Vec<f64> = y.iter().zip(&sc.row_scale).map(|(v, s)| v * s / tau).collect();
    let zo: Vec<f64> = z.iter().zip(&sc.col_scale).map(|(v, s)| v / s / tau).collect();
    let (pres, dres) = raw_residuals(cp, &xo, &yo, &zo);
    let pobj = dot(&cp.c, &xo);
    let dobj = dot(&cp.b, &yo);
    (
        Residuals {
            pres,
            dres,
            pobj,
            dobj,
            gap: (pobj - dobj).abs(),
        },
        xo,
        yo,
        zo,
    )
}

fn raw_residuals(cp: &ConicProblem, x: &[f64], y: &[f64], z: &[f64]) -> (f64, f64) {
    let mut ax = vec![0.0; cp.num_eqs()];
    let mut aty = vec![0.0; cp.num_vars()];
    for &(r, c, v) in &cp.a {
        ax[r] += v * x[c];
        aty[c] += v * y[r];
    }
    let pr: Vec<f64> = ax.iter().zip(&cp.b).map(|(a, b)| a - b).collect();
    let dr: Vec<f64> = (0..cp.num_vars())
        .map(|j| cp.c[j] - aty[j] - z[j])
        .collect();
    (
        norm(&pr) / (1.0 + norm(&cp.b)),
        norm(&dr) / (1.0 + norm(&cp.c)),
    )
}

fn empty_solution(cp: &ConicProblem, status: SolveStatus, iterations: usize) -> ConicSolution {
    ConicSolution {
        status,
        x: vec![0.0; cp.num_vars()],
        y: vec![0.0; cp.num_eqs()],
        z: vec![0.0; cp.num_vars()],
        primal_objective: f64::NAN,
        dual_objective: f64::NAN,
        iterations,
        primal_residual: f64::NAN,
        dual_residual: f64::NAN,
        gap: f64::NAN,
    }
}

/// Solves `cp` with the reference interior-point method.
pub fn solve(cp: &ConicProblem, opts: &SolverOptions) -> ConicSolution {
    if cp.validate().is_err() {
        return empty_solution(cp, SolveStatus::NumericalFailure, 0);
    }
    let sc = preprocess(cp);
    let n = sc.n;
    let p = sc.p;
    let f = sc.nfree;
    let sizes: Vec<usize> = sc.blocks.iter().map(|b| b.k).collect();

    if n == 0 {
        // nothing to choose: feasible iff b == 0
        let feasible = cp.b.iter().all(|v| v.abs() <= opts.tol_feas);
        let mut sol = empty_solution(
            cp,
            if feasible {
                SolveStatus::Optimal
            } else {
                SolveStatus::Infeasible
            },
            0,
        );
        if feasible {
            sol.primal_objective = 0.0;
            sol.dual_objective = 0.0;
            sol.gap = 0.0;
            sol.primal_residual = norm(&cp.b);
            sol.dual_residual = 0.0;
        } else {
            sol.y = cp.b.clone();
        }
        return sol;
    }

    // initial point: x_K = z_K = e, tau = kappa = 1
    let mut x = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut y = vec![0.0; p];
    {
        let e = identity_parts(sc.nonneg, &sizes);
        let s0 = sc.cone_start();
        x[s0..s0 + sc.nonneg].copy_from_slice(&e[0]);
        z[s0..s0 + sc.nonneg].copy_from_slice(&e[0]);
        for (bi, blk) in sc.blocks.iter().enumerate() {
            let d = e[bi + 1].len();
            x[blk.offset..blk.offset + d].copy_from_slice(&e[bi + 1]);
            z[blk.offset..blk.offset + d].copy_from_slice(&e[bi + 1]);
        }
    }
    let mut tau = 1.0f64;
    let mut kappa = 1.0f64;
    let nu = sc.degree as f64;

    let mut last = empty_solution(cp, SolveStatus::MaxIter, 0);
    for iter in 0..=opts.max_iter {
        // residuals of the embedding
        let ax = sc.a_mul(&x);
        let aty = sc.at_mul(&y);
        let r_p: Vec<f64> = (0..p).map(|i| ax[i] - sc.b[i] * tau).collect();
        let r_d: Vec<f64> = (0..n).map(|j| -aty[j] + sc.c[j] * tau - z[j]).collect();
        let r_g = dot(&sc.b, &y) - dot(&sc.c, &x) - kappa;
        let s0 = sc.cone_start();
        let xz = dot(&x[s0..], &z[s0..]);
        let mu = (xz + tau * kappa) / (nu + 1.0);

        // termination tests
        let (res, xo, yo, zo) = original_residuals(cp, &sc, &x, &y, &z, tau);
        let rel_gap = res.gap / res.pobj.abs().min(res.dobj.abs()).max(1.0);
        last = ConicSolution {
            status: SolveStatus::MaxIter,
            x: xo,
            y: yo,
            z: zo,
            primal_objective: res.pobj,
            dual_objective: res.dobj,
            iterations: iter,
            primal_residual: res.pres,
            dual_residual: res.dres,
            gap: res.gap,
        };
        debug!(
            "ipm {:3} pres {:.2e} dres {:.2e} gap {:.2e} pobj {:.6e} tau {:.2e} kappa {:.2e} mu {:.2e}",
            iter, res.pres, res.dres, res.gap, res.pobj, tau, kappa, mu
        );
        if res.pres <= opts.tol_feas
            && res.dres <= opts.tol_feas
            && (res.gap <= opts.tol_gap_abs || rel_gap <= opts.tol_gap_rel)
        {
            last.status = SolveStatus::Optimal;
            return last;
        }
        if let Some(sol) = infeasibility_check(cp, &sc, &x, &y, &z, opts, iter) {
            return sol;
        }
        if iter == opts.max_iter {
            break;
        }

        let Some(scaling) = compute_scaling(&sc, &x, &z) else {
            debug!("ipm stop: scaling failed");
            last.status = SolveStatus::NumericalFailure;
            return last;
        };
        let Some(kkt) = factor_kkt(&sc, &scaling) else {
            debug!("ipm stop: factor failed");
            last.status = SolveStatus::NumericalFailure;
            return last;
        };
        let lambda = scaling.lambda_parts(&sc);

        // dtau coefficient direction (independent of the right-hand side)
        let neg_c: Vec<f64> = sc.c.iter().map(|v| -v).collect();
        let Some(u1) = solve_scaled(&sc, &scaling, &kkt, &neg_c, None, &sc.b) else {
            debug!("ipm stop: tau-direction failed");
            last.status = SolveStatus::NumericalFailure;
            return last;
        };
        // b'dy1 - c'dx1 = |W^{-T} dx1|^2, which avoids the cancellation
        let denom = u1.dxs.iter().flatten().map(|v| v * v).sum::<f64>() + kappa / tau;
        let to_full = |st: &ScaledStep| {
            let mut full = vec![0.0; n];
            full[..f].copy_from_slice(&st.dx_free);
            scaling.unscale_primal(&sc, &st.dxs, &mut full);
            full
        };
        let dx1 = to_full(&u1);

        let newton = |eta: f64, rc: &[Vec<f64>], r_tau: f64| -> Option<Direction> {
            let q = lambda_solve(&scaling, rc, &sizes);
            let p1: Vec<f64> = r_d.iter().map(|v| -eta * v).collect();
            let p2: Vec<f64> = r_p.iter().map(|v| -eta * v).collect();
            let u0 = solve_scaled(&sc, &scaling, &kkt, &p1, Some(&q), &p2)?;
            let dx0 = to_full(&u0);
            let num = -eta * r_g + r_tau / tau - dot(&sc.b, &u0.dy) + dot(&sc.c, &dx0);
            let dtau = num / denom;
            let dx: Vec<f64> = dx0.iter().zip(&dx1).map(|(a, b)| a + dtau * b).collect();
            let dy: Vec<f64> = u0.dy.iter().zip(&u1.dy).map(|(a, b)| a + dtau * b).collect();
            let mut dxs = u0.dxs;
            parts_axpy(dtau, &u1.dxs, &mut dxs);
            let dkappa = (r_tau - kappa * dtau) / tau;
            let mut dzs = q;
            parts_axpy(-1.0, &dxs, &mut dzs);
            let mut dz = vec![0.0; n];
            scaling.unscale_dual(&sc, &dzs, &mut dz);
            if !dtau.is_finite() || dx.iter().chain(&dy).chain(&dz).any(|v| !v.is_finite()) {
                return None;
            }
            Some(Direction {
                dx,
                dy,
                dz,
                dtau,
                dkappa,
                dxs,
                dzs,
            })
        };

        let step_len = |dxs: &[Vec<f64>], dzs: &[Vec<f64>], dtau: f64, dkappa: f64| -> f64 {
            let mut a = max_step(&scaling, dxs, &sizes).min(max_step(&scaling, dzs, &sizes));
            if dtau < 0.0 {
                a = a.min(-tau / dtau);
            }
            if dkappa < 0.0 {
                a = a.min(-kappa / dkappa);
            }
            a
        };

        // predictor
        let lam_sq = jordan_prod(&lambda, &lambda, &sizes);
        let mut rc_aff = lam_sq.clone();
        for part in rc_aff.iter_mut() {
            for v in part.iter_mut() {
                *v = -*v;
            }
        }
        let Some(aff) = newton(1.0, &rc_aff, -tau * kappa) else {
            debug!("ipm stop: predictor failed");
            last.status = SolveStatus::NumericalFailure;
            return last;
        };
        let alpha_aff = step_len(&aff.dxs, &aff.dzs, aff.dtau, aff.dkappa).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        // corrector
        let e = identity_parts(sc.nonneg, &sizes);
        let corr = jordan_prod(&aff.dxs, &aff.dzs, &sizes);
        let mut rc = rc_aff;
        parts_axpy(sigma * mu, &e, &mut rc);
        parts_axpy(-1.0, &corr, &mut rc);
        let r_tau = -tau * kappa + sigma * mu - aff.dtau * aff.dkappa;
        let Some(Direction {
            dx,
            dy,
            dz,
            dtau,
            dkappa,
            dxs,
            dzs,
        }) = newton(1.0 - sigma, &rc, r_tau)
        else {
            debug!("ipm stop: corrector failed");
            last.status = SolveStatus::NumericalFailure;
            return last;
        };
        let amax = step_len(&dxs, &dzs, dtau, dkappa);
        let mut alpha = (0.99 * amax).min(1.0);
        if alpha < 1e-12 {
            debug!("ipm stop: step failed");
            last.status = SolveStatus::NumericalFailure;
            return last;
        }
        // keep iterates strictly interior after rounding
        let mut tries = 0;
        loop {
            let xn: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + alpha * b).collect();
            let zn: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + alpha * b).collect();
            if compute_scaling(&sc, &xn, &zn).is_some() || tries >= 8 {
                x = xn;
                z = zn;
                break;
            }
            alpha *= 0.5;
            tries += 1;
        }
        for (yi, d) in y.iter_mut().zip(&dy) {
            *yi += alpha * d;
        }
        tau += alpha * dtau;
        kappa += alpha * dkappa;
        if !(tau > 0.0 && kappa > 0.0) {
            debug!("ipm stop: tau-kappa failed");
            last.status = SolveStatus::NumericalFailure;
            return last;
        }
    }
    last.status = SolveStatus::MaxIter;
    last
}

fn infeasibility_check(
    cp: &ConicProblem,
    sc: &Scaled,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    opts: &SolverOptions,
    iter: usize,
) -> Option<ConicSolution> {
    let yo: Vec<f64> = y.iter().zip(&sc.row_scale).map(|(v, s)| v * s).collect();
    let zo: Vec<f64> = z.iter().zip(&sc.col_scale).map(|(v, s)| v / s).collect();
    let xo: Vec<f64> = x.iter().zip(&sc.col_scale).map(|(v, s)| v * s).collect();
    let by = dot(&cp.b, &yo);
    if by > 0.0 {
        // A'y + z = 0 with z in the dual cone and b'y > 0
        let mut aty = vec![0.0; cp.num_vars()];
        for &(r, c, v) in &cp.a {
            aty[c] += v * yo[r];
        }
        let resid: f64 = aty
            .iter()
            .zip(&zo)
            .map(|(a, zz)| (a + zz) * (a + zz))
            .sum::<f64>()
            .sqrt();
        if resid / by <= opts.tol_infeas {
            let mut sol = empty_solution(cp, SolveStatus::Infeasible, iter);
            let s = 1.0 / by;
            sol.y = yo.iter().map(|v| v * s).collect();
            sol.z = zo.iter().map(|v| v * s).collect();
            sol.dual_residual = resid / by;
            return Some(sol);
        }
    }
    let cx = dot(&cp.c, &xo);
    if cx < 0.0 {
        let mut ax = vec![0.0; cp.num_eqs()];
        for &(r, c, v) in &cp.a {
            ax[r] += v * xo[c];
        }
        if norm(&ax) / (-cx) <= opts.tol_infeas {
            let mut sol = empty_solution(cp, SolveStatus::Unbounded, iter);
            let s = -1.0 / cx;
            sol.x = xo.iter().map(|v| v * s).collect();
            sol.primal_residual = norm(&ax) / (-cx);
            return Some(sol);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// External solver adapter

/// Runs an external program on the sparse text encoding.
///
/// The program is invoked as `<program> <args...> <problem-file> <solution-file>`
/// and must write a solution file in the format of [`ConicSolution::to_text`].
#[derive(Debug, Clone)]
pub struct ExternalSolver {
    pub program: String,
    pub args: Vec<String>,
}

impl ConicSolver for ExternalSolver {
    fn solve(&self, cp: &ConicProblem, _opts: &SolverOptions) -> ConicSolution {
        let dir = std::env::temp_dir().join(format!(
            "funnel-ext-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0)
        ));
        let fail = || empty_solution(cp, SolveStatus::NumericalFailure, 0);
        if std::fs::create_dir_all(&dir).is_err() {
            return fail();
        }
        let prob = dir.join("problem.txt");
        let solf = dir.join("solution.txt");
        let result = (|| {
            std::fs::write(&prob, cp.to_text()).ok()?;
            let status = Command::new(&self.program)
                .args(&self.args)
                .arg(&prob)
                .arg(&solf)
                .status()
                .ok()?;
            if !status.success() {
                return None;
            }
            let text = std::fs::read_to_string(&solf).ok()?;
            ConicSolution::from_text(&text, cp.num_vars(), cp.num_eqs())
        })();
        let _ = std::fs::remove_dir_all(&dir);
        result.unwrap_or_else(fail)
    }
}

impl ConicSolution {
    /// Line-oriented text encoding:
    /// `status <s>`, `iterations <k>`, `objective <p> <d>`,
    /// `residuals <pres> <dres> <gap>`, then `x <i> <v>`, `y <i> <v>`,
    /// `z <i> <v>` records for nonzero entries, then `end`.
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "status {}", self.status.as_str());
        let _ = writeln!(s, "iterations {}", self.iterations);
        let _ = writeln!(
            s,
            "objective {:e} {:e}",
            self.primal_objective, self.dual_objective
        );
        let _ = writeln!(
            s,
            "residuals {:e} {:e} {:e}",
            self.primal_residual, self.dual_residual, self.gap
        );
        for (tag, v) in [("x", &self.x), ("y", &self.y), ("z", &self.z)] {
            for (i, val) in v.iter().enumerate() {
                if *val != 0.0 {
                    let _ = writeln!(s, "{} {} {:e}", tag, i, val);
                }
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str, n: usize, p: usize) -> Option<ConicSolution> {
        let mut sol = empty_solution_dims(n, p);
        let mut ended = false;
        for line in text.lines() {
            let t: Vec<&str> = line.split_whitespace().collect();
            match t.as_slice() {
                [] => continue,
                ["status", s] => sol.status = SolveStatus::parse(s)?,
                ["iterations", k] => sol.iterations = k.parse().ok()?,
                ["objective", a, b] => {
                    sol.primal_objective = a.parse().ok()?;
                    sol.dual_objective = b.parse().ok()?;
                }
                ["residuals", a, b, c] => {
                    sol.primal_residual = a.parse().ok()?;
                    sol.dual_residual = b.parse().ok()?;
                    sol.gap = c.parse().ok()?;
                }
                [tag @ ("x" | "y" | "z"), i, v] => {
                    let i: usize = i.parse().ok()?;
                    let v: f64 = v.parse().ok()?;
                    let target = match *tag {
                        "x" => &mut sol.x,
                        "y" => &mut sol.y,
                        _ => &mut sol.z,
                    };
                    *target.get_mut(i)? = v;
                }
                ["end"] => {
                    ended = true;
                    break;
                }
                _ => return None,
            }
        }
        ended.then_some(sol)
    }
}

fn empty_solution_dims(n: usize, p: usize) -> ConicSolution {
    ConicSolution {
        status: SolveStatus::NumericalFailure,
        x: vec![0.0; n],
        y: vec![0.0; p],
        z: vec![0.0; n],
        primal_objective: f64::NAN,
        dual_objective: f64::NAN,
        iterations: 0,
        primal_residual: f64::NAN,
        dual_residual: f64::NAN,
        gap: f64::NAN,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{default_var_map, svec_index, ConeLayout};

    fn problem(c: Vec<f64>, a: Vec<(usize, usize, f64)>, b: Vec<f64>, cones: ConeLayout) -> ConicProblem {
        let var_map = default_var_map(&cones);
        ConicProblem {
            c,
            a,
            b,
            cones,
            var_map,
        }
    }

    #[test]
    fn svec_index_matches_pairs() {
        for k in 1..6 {
            for (idx, (i, j)) in svec_pairs(k).into_iter().enumerate() {
                assert_eq!(svec_index(k, i, j), idx);
                assert_eq!(svec_index(k, j, i), idx);
            }
        }
    }

    #[test]
    fn svec_preserves_inner_product() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.5, 1.0, 3.0, -1.0, 0.5, -1.0, 1.0]);
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 1.0, 0.3, 0.0, 0.3, 2.0]);
        let lhs = dot(&svec(&a), &svec(&b));
        let rhs = (&a * &b).trace();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!((smat(&svec(&a), 3) - &a).amax() < 1e-15);
    }

    #[test]
    fn orthant_lower_bound() {
        // min x  s.t. x - s = 1, s >= 0 with x free
        let cp = problem(
            vec![1.0, 0.0],
            vec![(0, 0, 1.0), (0, 1, -1.0)],
            vec![1.0],
            ConeLayout {
                free: 1,
                nonneg: 1,
                psd: vec![],
            },
        );
        let sol = solve(&cp, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn one_dimensional_orthant() {
        // min x  s.t. x = 1 + s ... written directly: x >= 1 as x - s = 1 with x, s >= 0
        let cp = problem(
            vec![1.0, 0.0],
            vec![(0, 0, 1.0), (0, 1, -1.0)],
            vec![1.0],
            ConeLayout {
                free: 0,
                nonneg: 2,
                psd: vec![],
            },
        );
        let sol = solve(&cp, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.primal_objective - 1.0).abs() < 1e-7);
    }

    #[test]
    fn trace_minimization() {
        // min tr(X) s.t. X_11 = 2, X in S^3_+
        let k = 3;
        let d = svec_len(k);
        let mut c = vec![0.0; d];
        for i in 0..k {
            c[svec_index(k, i, i)] = 1.0;
        }
        let cp = problem(
            c,
            vec![(0, svec_index(k, 0, 0), 1.0)],
            vec![2.0],
            ConeLayout {
                free: 0,
                nonneg: 0,
                psd: vec![k],
            },
        );
        let sol = solve(&cp, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.primal_objective - 2.0).abs() < 1e-7);
    }

    #[test]
    fn max_gamma_in_two_by_two() {
        // max g s.t. [[1, g], [g, 1]] psd; variables: g free, X svec(3)
        // X11 = 1, X22 = 1, X12 - g = 0  (X12 = svec/sqrt2)
        let r2 = std::f64::consts::FRAC_1_SQRT_2;
        let cp = problem(
            vec![-1.0, 0.0, 0.0, 0.0],
            vec![
                (0, 1, 1.0),
                (1, 3, 1.0),
                (2, 2, r2),
                (2, 0, -1.0),
            ],
            vec![1.0, 1.0, 0.0],
            ConeLayout {
                free: 1,
                nonneg: 0,
                psd: vec![2],
            },
        );
        let sol = solve(&cp, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-6, "{}", sol.x[0]);
    }

    #[test]
    fn detects_primal_infeasibility() {
        // X psd 2x2, X11 = -1
        let cp = problem(
            vec![0.0; 3],
            vec![(0, 0, 1.0)],
            vec![-1.0],
            ConeLayout {
                free: 0,
                nonneg: 0,
                psd: vec![2],
            },
        );
        let sol = solve(&cp, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Infeasible);
        assert!(dot(&cp.b, &sol.y) > 0.0);
    }

    #[test]
    fn detects_unboundedness() {
        // min -x, x >= 0, no constraints tying x
        let cp = problem(
            vec![-1.0, 0.0],
            vec![(0, 1, 1.0)],
            vec![1.0],
            ConeLayout {
                free: 0,
                nonneg: 2,
                psd: vec![],
            },
        );
        let sol = solve(&cp, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Unbounded);
    }

    #[test]
    fn empty_problem_is_feasible() {
        let cp = problem(vec![], vec![], vec![], ConeLayout::default());
        let sol = solve(&cp, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_eq!(sol.primal_objective, 0.0);
    }

    #[test]
    fn min_eig_examples() {
        assert!((min_eig(&DMatrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -2.0]));
        assert!((min_eig(&d).unwrap() + 2.0).abs() < 1e-14);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((min_eig(&m).unwrap() - 1.0).abs() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(min_eig(&bad), Err(EigError::Asymmetric(_))));
    }

    #[test]
    fn solution_text_round_trip() {
        let cp = problem(
            vec![1.0, 0.0],
            vec![(0, 0, 1.0), (0, 1, -1.0)],
            vec![1.0],
            ConeLayout {
                free: 0,
                nonneg: 2,
                psd: vec![],
            },
        );
        let sol = solve(&cp, &SolverOptions::default());
        let back = ConicSolution::from_text(&sol.to_text(), 2, 1).unwrap();
        assert_eq!(back.status, sol.status);
        assert_eq!(back.x, sol.x);
        assert_eq!(back.y, sol.y);
    }

    #[test]
    fn problem_text_round_trip() {
        let cp = problem(
            vec![0.5, 0.0, 0.0, 0.0],
            vec![(0, 1, 1.0), (1, 3, 1.0), (2, 0, -1.0), (2, 2, 0.7)],
            vec![1.0, 1.0, 0.0],
            ConeLayout {
                free: 1,
                nonneg: 0,
                psd: vec![2],
            },
        );
        let back = ConicProblem::from_text(&cp.to_text()).unwrap();
        assert_eq!(back, cp);
        assert!(ConicProblem::from_text("conic 1\nvars 1\n").is_err());
    }
}
