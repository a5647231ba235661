//! Alternating synthesis of a storage function `V`, a feedback law `k` and
//! the S-procedure multipliers that certify the funnel `{x : V(t,x) <= γ}`.
//!
//! Each iteration runs two convex sub-problems:
//!
//! * the **γ-step** holds `V` fixed and bisects on the largest level `γ` for
//!   which `k` and the multipliers exist;
//! * the **V-step** holds `γ`, `k`, `s3` and the `s5` family fixed and moves
//!   `V` as far as possible into the interior of the feasible set, while a
//!   growth constraint keeps the new initial-time set a superset of the
//!   previous one.
//!
//! Multipliers are named by family (`s2`, `s3`, `s4[j]`, `s5[i]`, ...);
//! indices `[j]` run over target constraints and `[i]` over polytope rows.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::DMatrix;
use thiserror::Error;

use crate::polynomial::{monomial_basis, Monomial, PolyError, Polynomial};
use crate::problem::{DeltaSet, ProblemSpec, SpecError, TargetKind};
use crate::sdp::{min_eig, ConicSolver, InteriorPoint, SolveStatus, SolverOptions};
use crate::soscompile::{PolyExpr, SosError, SosProgram, SosSolution};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("level {gamma} is infeasible for the fixed storage function")]
    InfeasibleAtLo { gamma: f64 },
    #[error("no feasible initial storage function: {0}")]
    Initialization(String),
    #[error("V-step infeasible at level {gamma}: {detail}")]
    VStepInfeasible { gamma: f64, detail: String },
    #[error("fixed multiplier `{0}` is missing")]
    MissingMultiplier(String),
    #[error("the nominal path cannot handle disturbance or uncertainty channels")]
    NominalWithUncertainty,
}

/// Gram matrix certifying that a named expression is SOS.
#[derive(Debug, Clone, PartialEq)]
pub struct GramRecord {
    /// Constraint name, or `mult:<name>` for a multiplier.
    pub name: String,
    pub basis: Vec<Monomial>,
    pub q: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CertStatus {
    Complete,
    /// The loop stopped early; the certificate is the last good one.
    Degraded(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTiming {
    pub iteration: usize,
    pub gamma_seconds: f64,
    pub v_seconds: f64,
}

/// Synthesized storage function, feedback law and multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub spec_name: String,
    pub v: Polynomial,
    pub k: Vec<Polynomial>,
    pub gamma: f64,
    pub multipliers: BTreeMap<String, Polynomial>,
    pub grams: Vec<GramRecord>,
    pub gamma_history: Vec<f64>,
    /// Whether the certificate targets the disturbance-aware conditions.
    pub robust: bool,
    pub status: CertStatus,
    pub timings: Vec<StepTiming>,
}

impl Certificate {
    pub fn gram(&self, name: &str) -> Option<&GramRecord> {
        self.grams.iter().find(|g| g.name == name)
    }

    /// Funnel slice at time `t`.
    pub fn level_set(&self, spec: &ProblemSpec, t: f64) -> LevelSet {
        LevelSet {
            v: self.v.clone(),
            t,
            level: spec.level_at(self.gamma, t),
        }
    }
}

/// `{x : V(t, x) <= level}` at a fixed time.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSet {
    pub v: Polynomial,
    pub t: f64,
    pub level: f64,
}

impl LevelSet {
    /// Membership of a state; `x` holds the states only.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.value(x) <= self.level
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let mut pt = vec![0.0; self.v.vars().len()];
        pt[0] = self.t;
        pt[1..=x.len()].copy_from_slice(x);
        self.v.eval_unchecked(&pt)
    }
}

/// Knobs of the alternation.
#[derive(Clone)]
pub struct SynthesisOptions {
    pub iterations: usize,
    /// Relative bisection tolerance on γ.
    pub tol_bisect: f64,
    /// Relative γ gain below which an iteration counts as stalled.
    pub stall_tol: f64,
    /// Consecutive stalled iterations that end the loop.
    pub stall_iterations: usize,
    /// Level used to probe the initial storage function.
    pub gamma_probe: f64,
    /// Initial storage function; `None` derives one from the linearization.
    pub v0: Option<Polynomial>,
    /// Force the disturbance-aware conditions; `None` picks them whenever the
    /// spec has an uncertainty channel.
    pub robust: Option<bool>,
    pub solver: Arc<dyn ConicSolver>,
    pub solver_options: SolverOptions,
    /// Acceptance tolerances for solver output. The PSD default is ten
    /// times tighter than the verifier's, so that certificates found at the
    /// edge of feasibility keep some headroom when they are re-checked.
    pub tol_residual: f64,
    pub tol_psd: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            iterations: 4,
            tol_bisect: 1e-4,
            stall_tol: 1e-4,
            stall_iterations: 2,
            gamma_probe: 1e-3,
            v0: None,
            robust: None,
            solver: Arc::new(InteriorPoint),
            solver_options: SolverOptions::default(),
            tol_residual: 1e-6,
            tol_psd: 1e-7,
        }
    }
}

impl SynthesisOptions {
    fn robust_for(&self, spec: &ProblemSpec) -> bool {
        self.robust.unwrap_or_else(|| spec.has_uncertainty())
    }
}

/// Which side of each bilinear pair is held fixed.
#[derive(Debug, Clone, Copy)]
pub enum StepVars<'a> {
    /// γ-step: `V` fixed; `k` and every multiplier free.
    FixedV(&'a Polynomial),
    /// V-step: `k`, `s3` and `s5[i]` fixed; `V` and the other multipliers free.
    FixedMultipliers {
        k: &'a [Polynomial],
        multipliers: &'a BTreeMap<String, Polynomial>,
    },
}

/// Partially built program: decision variables are declared, constraint
/// expressions are collected but not yet added, so the caller decides how to
/// add them (plain or with a margin).
pub struct Fragments {
    pub program: SosProgram,
    pub v: PolyExpr,
    pub k: Vec<PolyExpr>,
    /// Free multipliers: name → (expression, Gram block, offset).
    multipliers: BTreeMap<String, (PolyExpr, usize, f64)>,
    /// Constraint name → expression that must be SOS.
    pub constraints: Vec<(String, PolyExpr)>,
    v_free: bool,
}

impl Fragments {
    pub fn multiplier_names(&self) -> Vec<String> {
        self.multipliers.keys().cloned().collect()
    }
}

/// Multiplier families carrying the `ε` lower bound.
pub fn has_eps_offset(name: &str) -> bool {
    family(name) == "s4" || family(name) == "sa"
}

/// `s5[2]` → `s5`.
pub fn family(name: &str) -> &str {
    name.split('[').next().unwrap_or(name)
}

struct Builder<'a> {
    spec: &'a ProblemSpec,
    prog: SosProgram,
    multipliers: BTreeMap<String, (PolyExpr, usize, f64)>,
    fixed: Option<&'a BTreeMap<String, Polynomial>>,
}

impl Builder<'_> {
    /// Multiplier over the given variables: either fixed (V-step partner) or
    /// a fresh `offset + z'Qz`.
    fn multiplier(&mut self, name: &str, vars: &[usize], offset: f64, fixed: bool) -> Result<PolyExpr, SynthesisError> {
        if fixed {
            let p = self
                .fixed
                .and_then(|m| m.get(name))
                .ok_or_else(|| SynthesisError::MissingMultiplier(name.to_string()))?;
            return Ok(PolyExpr::constant(p.clone()));
        }
        let deg = self.spec.templates.multiplier_degree(family(name));
        let basis = monomial_basis(self.spec.vars.len(), vars, deg / 2);
        let block = self.prog.num_grams();
        let e = self.prog.new_sos_poly(name, &basis);
        let e = if offset != 0.0 {
            e.add_poly(&Polynomial::constant(&self.spec.vars, offset))?
        } else {
            e
        };
        self.multipliers.insert(name.to_string(), (e.clone(), block, offset));
        Ok(e)
    }
}

/// Nominal conditions (no disturbance channels).
pub fn build_nominal_constraints(
    spec: &ProblemSpec,
    step: StepVars<'_>,
    gamma: f64,
) -> Result<Fragments, SynthesisError> {
    if spec.nw > 0 || spec.nd > 0 {
        return Err(SynthesisError::NominalWithUncertainty);
    }
    build(spec, step, gamma, false)
}

/// Disturbance-aware conditions: energy supply `w'w`, level `γ + R²q(t)`,
/// and S-procedure terms for the `w` and `δ` bounds.
pub fn build_robust_constraints(
    spec: &ProblemSpec,
    step: StepVars<'_>,
    gamma: f64,
) -> Result<Fragments, SynthesisError> {
    build(spec, step, gamma, true)
}

fn build(
    spec: &ProblemSpec,
    step: StepVars<'_>,
    gamma: f64,
    robust: bool,
) -> Result<Fragments, SynthesisError> {
    let vars = &spec.vars;
    let one = Polynomial::constant(vars, 1.0);
    let mut b = Builder {
        spec,
        prog: SosProgram::new(vars),
        multipliers: BTreeMap::new(),
        fixed: None,
    };
    let (v, k, v_free) = match step {
        StepVars::FixedV(v) => {
            let k = (0..spec.m)
                .map(|j| b.prog.new_free_poly(&format!("k[{j}]"), &spec.k_basis()))
                .collect::<Vec<_>>();
            (PolyExpr::constant(v.clone()), k, false)
        }
        StepVars::FixedMultipliers { k, multipliers } => {
            b.fixed = Some(multipliers);
            let v = b.prog.new_free_poly("V", &spec.v_basis());
            let k = k.iter().map(|p| PolyExpr::constant(p.clone())).collect();
            (v, k, true)
        }
    };
    let v_fixed_multipliers = v_free;

    let tx = spec.tx_indices();
    let all = spec.all_indices();
    let xs = spec.state_indices();
    let t = spec.t_index();
    let h = spec.horizon_poly();
    let timed = !spec.is_degenerate_horizon();

    let r2q = if robust { spec.level_offset() } else { Polynomial::zero(vars) };
    let level = r2q.add_constant(gamma);
    let vml = v.sub_poly(&level)?;

    let uncertain_vars = robust && (spec.nw > 0 || spec.nd > 0);
    let diss_vars: &[usize] = if uncertain_vars { &all } else { &tx };
    let k_uncertain = uncertain_vars
        && ((spec.k_dependence.w && spec.nw > 0) || (spec.k_dependence.delta && spec.nd > 0));
    let input_vars: &[usize] = if k_uncertain { &all } else { &tx };

    // w'w and w'w - w̄², δ bounds
    let mut ww = Polynomial::zero(vars);
    for j in 0..spec.nw {
        let wj = Polynomial::var_at(vars, spec.w_index(j));
        ww = ww.add(&wj.mul(&wj)?)?;
    }
    let w_bar = spec.uncertainty.w_bar;
    let w_bound = ww.add_constant(-w_bar * w_bar);
    let delta_terms: Vec<(String, Polynomial)> = if robust && spec.nd > 0 {
        match &spec.uncertainty.delta {
            DeltaSet::Ball(r) => {
                let mut dd = Polynomial::zero(vars);
                for j in 0..spec.nd {
                    let dj = Polynomial::var_at(vars, spec.d_index(j));
                    dd = dd.add(&dj.mul(&dj)?)?;
                }
                vec![(String::new(), dd.add_constant(-r * r))]
            }
            DeltaSet::Box(bounds) => bounds
                .iter()
                .enumerate()
                .map(|(j, r)| {
                    let dj = Polynomial::var_at(vars, spec.d_index(j));
                    let sq = dj.mul(&dj).expect("same variable set");
                    (format!("[{j}]"), sq.add_constant(-r * r))
                })
                .collect(),
        }
    } else {
        Vec::new()
    };

    let mut constraints = Vec::new();

    // dissipation
    let mut vdot = v.diff_at(t);
    for i in 0..spec.n {
        let mut rhs = PolyExpr::constant(spec.f[i].clone());
        for (j, kj) in k.iter().enumerate() {
            rhs = rhs.add(&kj.mul_poly(&spec.g[i][j])?)?;
        }
        vdot = vdot.add(&v.diff_at(spec.x_index(i)).mul(&rhs)?)?;
    }
    let mut diss = vdot.neg();
    if robust && spec.nw > 0 {
        diss = diss.add_poly(&ww)?;
    }
    let s3 = b.multiplier("s3", diss_vars, 0.0, v_fixed_multipliers)?;
    diss = diss.add(&s3.mul(&vml)?)?;
    if timed {
        let s2 = b.multiplier("s2", diss_vars, 0.0, false)?;
        diss = diss.sub(&s2.mul_poly(&h)?)?;
    }
    if robust && spec.nw > 0 && w_bar > 0.0 {
        let s8 = b.multiplier("s8", &all, 0.0, false)?;
        diss = diss.add(&s8.mul_poly(&w_bound)?)?;
    }
    for (suffix, dpoly) in &delta_terms {
        let s9 = b.multiplier(&format!("s9{suffix}"), &all, 0.0, false)?;
        diss = diss.add(&s9.mul_poly(dpoly)?)?;
    }
    constraints.push(("dissipation".to_string(), diss));

    // target tube / terminal set
    for (j, tg) in spec.targets.iter().enumerate() {
        match tg.kind {
            TargetKind::Tube => {
                let s4 = b.multiplier(&format!("s4[{j}]"), &tx, spec.eps, false)?;
                let mut e = vml.sub(&s4.mul_poly(&tg.r)?)?;
                if timed {
                    let s7 = b.multiplier(&format!("s7[{j}]"), &tx, 0.0, false)?;
                    e = e.sub(&s7.mul_poly(&h)?)?;
                }
                constraints.push((format!("tube[{j}]"), e));
            }
            TargetKind::Terminal => {
                let sa = b.multiplier(&format!("sa[{j}]"), &xs, spec.eps, false)?;
                let vt = v.map(|p| Ok(p.fix(t, spec.t_final)))?;
                let end_level = spec.level_at(gamma, spec.t_final);
                let e = vt
                    .add_poly(&one.scale(-end_level))?
                    .sub(&sa.mul_poly(&tg.r)?)?;
                constraints.push((format!("terminal[{j}]"), e));
            }
        }
    }

    // input polytope, row by row
    for i in 0..spec.np() {
        let mut e = PolyExpr::constant(spec.input_b[i].clone());
        for (j, kj) in k.iter().enumerate() {
            e = e.sub(&kj.mul_poly(&spec.input_a[i][j])?)?;
        }
        let s5 = b.multiplier(&format!("s5[{i}]"), input_vars, 0.0, v_fixed_multipliers)?;
        e = e.add(&s5.mul(&vml)?)?;
        if timed {
            let s6 = b.multiplier(&format!("s6[{i}]"), input_vars, 0.0, false)?;
            e = e.sub(&s6.mul_poly(&h)?)?;
        }
        if k_uncertain {
            if spec.nw > 0 && w_bar > 0.0 {
                let s11 = b.multiplier(&format!("s11[{i}]"), &all, 0.0, false)?;
                e = e.add(&s11.mul_poly(&w_bound)?)?;
            }
            for (suffix, dpoly) in &delta_terms {
                let name = if suffix.is_empty() {
                    format!("s10[{i}]")
                } else {
                    format!("s10[{i}]{suffix}")
                };
                let s10 = b.multiplier(&name, &all, 0.0, false)?;
                e = e.add(&s10.mul_poly(dpoly)?)?;
            }
        }
        constraints.push((format!("input[{i}]"), e));
    }

    Ok(Fragments {
        program: b.prog,
        v,
        k,
        multipliers: b.multipliers,
        constraints,
        v_free,
    })
}

/// Values recovered from one solved sub-problem.
#[derive(Debug, Clone)]
pub struct StepSolution {
    pub gamma: f64,
    pub v: Polynomial,
    pub k: Vec<Polynomial>,
    pub multipliers: BTreeMap<String, Polynomial>,
    pub grams: Vec<GramRecord>,
    /// V-step only: achieved interior margin.
    pub margin: Option<f64>,
    /// V-step only: growth-constraint multiplier.
    pub s1: Option<Polynomial>,
}

impl StepSolution {
    fn into_certificate(self, spec: &ProblemSpec, robust: bool) -> Certificate {
        Certificate {
            spec_name: spec.name.clone(),
            v: self.v,
            k: self.k,
            gamma: self.gamma,
            multipliers: self.multipliers,
            grams: self.grams,
            gamma_history: Vec::new(),
            robust,
            status: CertStatus::Complete,
            timings: Vec::new(),
        }
    }
}

fn collect_solution(
    frag: &Fragments,
    sol: &SosSolution,
    gamma: f64,
    fixed_v: Option<&Polynomial>,
) -> StepSolution {
    let v = match fixed_v {
        Some(v) => v.clone(),
        None => sol.eval(&frag.v),
    };
    let k = frag.k.iter().map(|e| sol.eval(e)).collect();
    let mut multipliers = BTreeMap::new();
    let mut grams = Vec::new();
    for (ci, (name, _)) in frag.constraints.iter().enumerate() {
        grams.push(GramRecord {
            name: name.clone(),
            basis: sol.constraint_bases[ci].clone(),
            q: sol.constraint_grams[ci].clone(),
        });
    }
    for (name, (e, block, _)) in &frag.multipliers {
        multipliers.insert(name.clone(), sol.eval(e));
        grams.push(GramRecord {
            name: format!("mult:{name}"),
            basis: frag.program.gram_basis(*block).to_vec(),
            q: sol.grams[*block].clone(),
        });
    }
    StepSolution {
        gamma,
        v,
        k,
        multipliers,
        grams,
        margin: None,
        s1: None,
    }
}

/// Outcome of one feasibility probe.
enum Probe {
    Feasible(Box<StepSolution>),
    Infeasible,
}

fn acceptable(sol: &SosSolution, opts: &SynthesisOptions) -> bool {
    let res_ok = sol.residuals.iter().all(|r| *r <= opts.tol_residual);
    let psd_ok = sol
        .grams
        .iter()
        .chain(sol.constraint_grams.iter())
        .all(|q| q.nrows() == 0 || min_eig(q).map(|e| e >= -opts.tol_psd).unwrap_or(false));
    res_ok && psd_ok
}

/// Solves a program, retrying once with relaxed tolerances when the solver
/// is inconclusive. Returns `None` for infeasible or still-ambiguous cases.
fn solve_program(
    prog: &SosProgram,
    opts: &SynthesisOptions,
) -> Result<Option<SosSolution>, SynthesisError> {
    let compiled = prog.compile()?;
    let first = opts.solver.solve(&compiled.problem, &opts.solver_options);
    let sol = match first.status {
        SolveStatus::Optimal => first,
        SolveStatus::Infeasible | SolveStatus::Unbounded => {
            debug!("probe: {}", first.status.as_str());
            return Ok(None);
        }
        other => {
            debug!("probe ambiguous ({}), retrying relaxed", other.as_str());
            let second = opts
                .solver
                .solve(&compiled.problem, &opts.solver_options.relaxed(100.0));
            if second.status != SolveStatus::Optimal {
                return Ok(None);
            }
            second
        }
    };
    let mut sol = sol;
    compiled.polish(&mut sol.x);
    let extracted = prog.extract(&compiled, &sol)?;
    if !acceptable(&extracted, opts) {
        debug!(
            "solution rejected: worst residual {:e}",
            extracted.residuals.iter().cloned().fold(0.0, f64::max)
        );
        return Ok(None);
    }
    Ok(Some(extracted))
}

fn probe(
    spec: &ProblemSpec,
    v: &Polynomial,
    gamma: f64,
    robust: bool,
    opts: &SynthesisOptions,
) -> Result<Probe, SynthesisError> {
    let frag = if robust {
        build_robust_constraints(spec, StepVars::FixedV(v), gamma)?
    } else {
        build_nominal_constraints(spec, StepVars::FixedV(v), gamma)?
    };
    let mut prog = frag.program.clone();
    for (name, e) in &frag.constraints {
        prog.add_sos(name, e.clone(), None);
    }
    match solve_program(&prog, opts)? {
        Some(sol) => Ok(Probe::Feasible(Box::new(collect_solution(
            &frag,
            &sol,
            gamma,
            Some(v),
        )))),
        None => Ok(Probe::Infeasible),
    }
}

/// Result of a γ-step.
#[derive(Debug, Clone)]
pub struct GammaStep {
    pub gamma: f64,
    pub solution: StepSolution,
    pub probes: usize,
}

/// Bisection on the largest feasible level for a fixed storage function.
///
/// `gamma_lo` must be feasible. When `gamma_hi` is `None` an upper bracket
/// is found by doubling, capped at `2²⁰·|γ_lo| + 1`. The returned level is
/// always one at which a solution was actually found.
pub fn gamma_step(
    spec: &ProblemSpec,
    v: &Polynomial,
    gamma_lo: f64,
    gamma_hi: Option<f64>,
    opts: &SynthesisOptions,
) -> Result<GammaStep, SynthesisError> {
    let robust = opts.robust_for(spec);
    let mut probes = 1;
    let mut best = match probe(spec, v, gamma_lo, robust, opts)? {
        Probe::Feasible(s) => *s,
        Probe::Infeasible => return Err(SynthesisError::InfeasibleAtLo { gamma: gamma_lo }),
    };
    let mut lo = gamma_lo;
    let cap = 2f64.powi(20) * gamma_lo.abs() + 1.0;
    let mut hi = gamma_hi.unwrap_or(if lo > 0.0 { 2.0 * lo } else { lo + 1.0 });
    loop {
        probes += 1;
        match probe(spec, v, hi, robust, opts)? {
            Probe::Feasible(s) => {
                lo = hi;
                best = *s;
                if hi >= cap {
                    warn!("gamma bracket reached its cap {cap}");
                    return Ok(GammaStep { gamma: lo, solution: best, probes });
                }
                hi = if hi > 0.0 { (2.0 * hi).min(cap) } else { hi + 1.0 };
            }
            Probe::Infeasible => break,
        }
    }
    let floor = 1e-6;
    while hi - lo > opts.tol_bisect * hi.abs().max(floor) {
        let mid = if lo > 0.0 && hi / lo > 4.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        probes += 1;
        match probe(spec, v, mid, robust, opts)? {
            Probe::Feasible(s) => {
                lo = mid;
                best = *s;
            }
            Probe::Infeasible => hi = mid,
        }
    }
    debug!("gamma-step: {lo} after {probes} probes");
    Ok(GammaStep {
        gamma: lo,
        solution: best,
        probes,
    })
}

/// Interior-pushing update of `V` at fixed `γ`, `k`, `s3`, `s5`.
///
/// Maximizes a margin `μ <= 1` such that every constraint expression minus
/// `μ·σ` stays SOS, and requires the growth condition
/// `-(V(t0,x) - γ) + s1(x)(V_prev(t0,x) - γ) ∈ Σ`.
pub fn v_step(
    spec: &ProblemSpec,
    previous: &StepSolution,
    v_prev: &Polynomial,
    opts: &SynthesisOptions,
) -> Result<StepSolution, SynthesisError> {
    let robust = opts.robust_for(spec);
    let gamma = previous.gamma;
    let step = StepVars::FixedMultipliers {
        k: &previous.k,
        multipliers: &previous.multipliers,
    };
    let mut frag = if robust {
        build_robust_constraints(spec, step, gamma)?
    } else {
        build_nominal_constraints(spec, step, gamma)?
    };
    debug_assert!(frag.v_free);
    let vars = spec.vars.clone();
    let t = spec.t_index();
    let (mu, mu_e) = frag.program.new_scalar("mu", false);
    for (name, e) in &frag.constraints {
        frag.program.add_sos_with_margin(name, e.clone(), mu);
    }
    // growth
    let deg = spec.templates.multiplier_degree("s1");
    let basis = monomial_basis(vars.len(), &spec.state_indices(), deg / 2);
    let s1 = frag.program.new_sos_poly("s1", &basis);
    let v0 = frag.v.map(|p| Ok(p.fix(t, spec.t0)))?.add_poly(&Polynomial::constant(&vars, -gamma))?;
    let vp0 = v_prev.fix(t, spec.t0).add_constant(-gamma);
    let growth = v0.neg().add(&s1.mul_poly(&vp0)?)?;
    frag.program.add_sos_with_margin("growth", growth, mu);
    let cap = PolyExpr::constant(Polynomial::constant(&vars, 1.0)).sub(&mu_e)?;
    frag.program.add_nonneg("mu_cap", cap)?;
    frag.program.maximize(&mu_e)?;

    let sol = solve_program(&frag.program, opts)?.ok_or_else(|| SynthesisError::VStepInfeasible {
        gamma,
        detail: "solver reported infeasible or inconclusive".into(),
    })?;

    let mut out = collect_solution(&frag, &sol, gamma, None);
    // the growth constraint is internal to this step
    out.grams.retain(|g| g.name != "growth" && g.name != "mult:s1");
    // carry over the fixed partners and their Gram certificates
    for (name, p) in &previous.multipliers {
        if !out.multipliers.contains_key(name) {
            out.multipliers.insert(name.clone(), p.clone());
            let gname = format!("mult:{name}");
            if let Some(g) = previous.grams.iter().find(|g| g.name == gname) {
                out.grams.push(g.clone());
            }
        }
    }
    out.grams.sort_by(|a, b| a.name.cmp(&b.name));
    out.multipliers.remove("s1");
    out.margin = Some(sol.value(mu));
    out.s1 = Some(sol.eval(&s1));
    Ok(out)
}

/// Solves `A'P + PA - PBB'P + I = 0` with the matrix sign function.
pub fn lqr_riccati(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-b * b.transpose()));
    h.view_mut((n, 0), (n, n)).copy_from(&(-DMatrix::<f64>::identity(n, n)));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let mut z = h;
    let nn = (2 * n) as f64;
    for _ in 0..100 {
        let zi = z.clone().try_inverse()?;
        let det = z.determinant().abs();
        if !det.is_finite() || det == 0.0 {
            return None;
        }
        let c = det.powf(-1.0 / nn);
        let next = (&z * c + &zi / c) * 0.5;
        let delta = (&next - &z).norm() / next.norm().max(1.0);
        z = next;
        if delta < 1e-13 {
            break;
        }
    }
    let w11 = z.view((0, 0), (n, n)).into_owned();
    let w12 = z.view((0, n), (n, n)).into_owned();
    let w21 = z.view((n, 0), (n, n)).into_owned();
    let w22 = z.view((n, n), (n, n)).into_owned();
    let id = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w22 + &id));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w11 + &id)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w21));
    let p = lhs.svd(true, true).solve(&rhs, 1e-12).ok()?;
    let p = (&p + p.transpose()) * 0.5;
    // residual and definiteness checks
    let res = a.transpose() * &p + &p * a - &p * b * b.transpose() * &p + &id;
    if !res.iter().all(|v| v.is_finite()) || res.norm() > 1e-6 * (1.0 + p.norm()) {
        return None;
    }
    let e = p.clone().symmetric_eigenvalues();
    if e.iter().any(|v| *v <= 0.0) {
        return None;
    }
    Some(p)
}

/// Linearization `(A, B)` of `f + g u` at `(t0, x_eq, w = 0, δ = 0, u = 0)`.
pub fn linearize(spec: &ProblemSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    let pt = spec.point(spec.t0, &spec.x_eq, &[], &[]);
    let a = DMatrix::from_fn(spec.n, spec.n, |i, j| {
        spec.f[i].diff_at(spec.x_index(j)).eval_unchecked(&pt)
    });
    let b = DMatrix::from_fn(spec.n, spec.m, |i, j| spec.g[i][j].eval_unchecked(&pt));
    (a, b)
}

/// `(x - x_eq)' P (x - x_eq)` over the spec's variables.
pub fn quadratic_form(spec: &ProblemSpec, p: &DMatrix<f64>) -> Polynomial {
    let vars = &spec.vars;
    let dx: Vec<Polynomial> = (0..spec.n)
        .map(|i| Polynomial::var_at(vars, spec.x_index(i)).add_constant(-spec.x_eq[i]))
        .collect();
    let mut v = Polynomial::zero(vars);
    for i in 0..spec.n {
        for j in 0..spec.n {
            if p[(i, j)] != 0.0 {
                let term = dx[i].mul(&dx[j]).expect("same variable set").scale(p[(i, j)]);
                v = v.add(&term).expect("same variable set");
            }
        }
    }
    v
}

/// Initial storage function: LQR cost-to-go of the linearization (identity
/// weights), falling back to `‖x - x_eq‖²` when the Riccati equation has no
/// stabilizing solution. The candidate is probed at `opts.gamma_probe` and
/// rescaled by powers of 10 (up to 6 attempts) until the probe succeeds.
pub fn initialize_v0(
    spec: &ProblemSpec,
    opts: &SynthesisOptions,
) -> Result<(Polynomial, StepSolution), SynthesisError> {
    let base = match &opts.v0 {
        Some(v) => v.clone(),
        None => {
            let (a, b) = linearize(spec);
            let p = lqr_riccati(&a, &b).unwrap_or_else(|| {
                info!("Riccati equation unsolvable at x_eq; using identity weights");
                DMatrix::identity(spec.n, spec.n)
            });
            quadratic_form(spec, &p)
        }
    };
    let robust = opts.robust_for(spec);
    let mut last = String::new();
    for attempt in 0..6 {
        let scale = 10f64.powi(attempt);
        let v = base.scale(scale);
        match probe(spec, &v, opts.gamma_probe, robust, opts)? {
            Probe::Feasible(s) => return Ok((v, *s)),
            Probe::Infeasible => {
                last = format!("scale {scale:e} infeasible at level {}", opts.gamma_probe);
                debug!("initial probe: {last}");
            }
        }
    }
    Err(SynthesisError::Initialization(last))
}

/// Runs the alternation and returns the last verified certificate.
pub fn synthesize(spec: &ProblemSpec, opts: &SynthesisOptions) -> Result<Certificate, SynthesisError> {
    spec.validate()?;
    let robust = opts.robust_for(spec);
    let (mut v, first) = initialize_v0(spec, opts)?;
    let mut gamma_lo = first.gamma;
    let mut history: Vec<f64> = Vec::new();
    let mut timings = Vec::new();
    let mut best: Option<Certificate> = None;
    let mut status = CertStatus::Complete;
    let mut stalled = 0;

    for iter in 0..opts.iterations {
        let t_gamma = Instant::now();
        let gs = match gamma_step(spec, &v, gamma_lo, None, opts) {
            Ok(gs) => gs,
            Err(e) if best.is_some() => {
                warn!("gamma-step failed in iteration {iter}: {e}");
                status = CertStatus::Degraded(format!("gamma-step failed in iteration {iter}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let gamma_seconds = t_gamma.elapsed().as_secs_f64();
        info!("iteration {iter}: gamma = {}", gs.gamma);
        history.push(gs.gamma);

        let t_v = Instant::now();
        let vs = v_step(spec, &gs.solution, &v, opts);
        let v_seconds = t_v.elapsed().as_secs_f64();
        timings.push(StepTiming {
            iteration: iter,
            gamma_seconds,
            v_seconds,
        });
        let gamma_cert = gs.solution.clone().into_certificate(spec, robust);
        match vs {
            // `V = V_prev` always attains a zero margin, so a clearly negative
            // optimum means the solve lost accuracy rather than found a better V
            Ok(vs) if vs.margin.unwrap_or(0.0) < -opts.solver_options.tol_feas => {
                let margin = vs.margin.unwrap_or(0.0);
                warn!("V-step in iteration {iter} returned margin {margin:e}; keeping the previous V");
                best = Some(gamma_cert);
                status = CertStatus::Degraded(format!(
                    "V-step in iteration {iter} returned negative margin {margin:e}"
                ));
                break;
            }
            Ok(vs) => {
                debug!("iteration {iter}: margin = {:?}", vs.margin);
                v = vs.v.clone();
                let cert = vs.into_certificate(spec, robust);
                let verified = crate::certify::check_algebraic(&cert, spec, opts.tol_residual, opts.tol_psd)
                    .map(|r| r.algebraic_ok())
                    .unwrap_or(false);
                best = Some(if verified { cert } else { gamma_cert });
                gamma_lo = gs.gamma;
            }
            Err(e) => {
                warn!("V-step failed in iteration {iter}: {e}");
                best = Some(gamma_cert);
                status = CertStatus::Degraded(format!("V-step failed in iteration {iter}: {e}"));
                break;
            }
        }

        if history.len() >= 2 {
            let prev = history[history.len() - 2];
            let gain = (gs.gamma - prev) / prev.abs().max(1e-12);
            if gain < opts.stall_tol {
                stalled += 1;
                if stalled >= opts.stall_iterations {
                    info!("stopping: gamma stalled for {stalled} iterations");
                    break;
                }
            } else {
                stalled = 0;
            }
        }
    }

    let mut cert = best.expect("at least one iteration ran");
    cert.gamma_history = history;
    cert.timings = timings;
    if cert.status == CertStatus::Complete {
        cert.status = status;
    }
    Ok(cert)
}
