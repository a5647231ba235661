//! Problem definition: dynamics, horizon, target tube, input polytope and
//! uncertainty description.
//!
//! Every polynomial lives over one shared variable set, ordered
//! `t, x1..xn, w1..w_nw, d1..d_nd`. Which of those a polynomial actually
//! depends on is determined by its monomials.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::polynomial::{monomial_basis, Monomial, PolyError, Polynomial, VarSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("invalid problem: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SpecError> {
    Err(SpecError::Invalid(msg.into()))
}

/// How a target polynomial constrains the funnel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    /// `r(t, x) <= 0` for every `t` in the horizon.
    Tube,
    /// `r_T(x) <= 0` at the final time only.
    Terminal,
}

impl TargetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetKind::Tube => "tube",
            TargetKind::Terminal => "terminal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub kind: TargetKind,
    pub r: Polynomial,
}

/// Bound on the parametric uncertainty `δ`.
#[derive(Debug, Clone, PartialEq)]
pub enum DeltaSet {
    /// `δ'δ <= bound²`.
    Ball(f64),
    /// `δ_j² <= bound_j²` for each component.
    Box(Vec<f64>),
}

/// Energy-bounded disturbance and parametric uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct Uncertainty {
    /// Energy budget scale `R`: `∫ w'w <= R² q(t)`.
    pub r_bound: f64,
    /// Release profile `q(t)` with `q(t0) = 0`, `q(T) = 1`.
    pub q: Polynomial,
    /// Pointwise bound `‖w‖ <= w̄`; zero disables it.
    pub w_bar: f64,
    pub delta: DeltaSet,
}

/// Variables the feedback law may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KDependence {
    pub t: bool,
    pub x: bool,
    pub w: bool,
    pub delta: bool,
}

impl Default for KDependence {
    fn default() -> Self {
        KDependence {
            t: true,
            x: true,
            w: false,
            delta: false,
        }
    }
}

/// Polynomial template degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub deg_v: u32,
    pub deg_k: u32,
    /// Default multiplier degree.
    pub deg_s: u32,
    /// Per-multiplier overrides keyed by family name (`"s3"`, `"s5"`, ...).
    pub overrides: BTreeMap<String, u32>,
}

impl Templates {
    pub fn new(deg_v: u32, deg_k: u32, deg_s: u32) -> Templates {
        Templates {
            deg_v,
            deg_k,
            deg_s,
            overrides: BTreeMap::new(),
        }
    }

    pub fn multiplier_degree(&self, family: &str) -> u32 {
        self.overrides.get(family).copied().unwrap_or(self.deg_s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub name: String,
    pub vars: VarSet,
    pub n: usize,
    pub m: usize,
    pub nw: usize,
    pub nd: usize,
    /// Drift, one entry per state.
    pub f: Vec<Polynomial>,
    /// Input matrix, `n × m`.
    pub g: Vec<Vec<Polynomial>>,
    pub t0: f64,
    pub t_final: f64,
    pub targets: Vec<Target>,
    /// Input polytope `A(t,x) u <= b(t,x)`, `n_p × m`.
    pub input_a: Vec<Vec<Polynomial>>,
    pub input_b: Vec<Polynomial>,
    pub uncertainty: Uncertainty,
    pub eps: f64,
    pub templates: Templates,
    pub k_dependence: KDependence,
    /// Equilibrium used for the initial storage function.
    pub x_eq: Vec<f64>,
}

/// Builds the shared variable set `t, x1.., w1.., d1..`.
pub fn standard_vars(n: usize, nw: usize, nd: usize) -> VarSet {
    let mut names = vec!["t".to_string()];
    names.extend((1..=n).map(|i| format!("x{i}")));
    names.extend((1..=nw).map(|i| format!("w{i}")));
    names.extend((1..=nd).map(|i| format!("d{i}")));
    VarSet::new(&names).expect("generated names are distinct")
}

impl ProblemSpec {
    /// A spec with zero dynamics, no targets, no input limits and no
    /// uncertainty; fields are meant to be filled in by the caller.
    pub fn empty(name: &str, n: usize, m: usize, nw: usize, nd: usize) -> ProblemSpec {
        let vars = standard_vars(n, nw, nd);
        let zero = Polynomial::zero(&vars);
        ProblemSpec {
            name: name.to_string(),
            n,
            m,
            nw,
            nd,
            f: vec![zero.clone(); n],
            g: vec![vec![zero.clone(); m]; n],
            t0: 0.0,
            t_final: 1.0,
            targets: Vec::new(),
            input_a: Vec::new(),
            input_b: Vec::new(),
            uncertainty: Uncertainty {
                r_bound: 0.0,
                q: zero,
                w_bar: 0.0,
                delta: DeltaSet::Ball(0.0),
            },
            eps: 1e-4,
            templates: Templates::new(2, 1, 2),
            k_dependence: KDependence::default(),
            x_eq: vec![0.0; n],
            vars,
        }
    }

    pub fn parse_poly(&self, text: &str) -> Result<Polynomial, SpecError> {
        Ok(Polynomial::parse(&self.vars, text)?)
    }

    pub fn t_index(&self) -> usize {
        0
    }

    pub fn x_index(&self, i: usize) -> usize {
        1 + i
    }

    pub fn w_index(&self, j: usize) -> usize {
        1 + self.n + j
    }

    pub fn d_index(&self, j: usize) -> usize {
        1 + self.n + self.nw + j
    }

    pub fn state_indices(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.x_index(i)).collect()
    }

    /// Indices of `t` and the states.
    pub fn tx_indices(&self) -> Vec<usize> {
        (0..=self.n).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.vars.len()).collect()
    }

    pub fn np(&self) -> usize {
        self.input_b.len()
    }

    /// Whether any disturbance or uncertainty channel is present.
    pub fn has_uncertainty(&self) -> bool {
        self.nw > 0 || self.nd > 0 || self.uncertainty.r_bound > 0.0
    }

    /// Variables the feedback law depends on.
    pub fn k_indices(&self) -> Vec<usize> {
        let kd = &self.k_dependence;
        let mut idx = Vec::new();
        if kd.t {
            idx.push(self.t_index());
        }
        if kd.x {
            idx.extend(self.state_indices());
        }
        if kd.w {
            idx.extend((0..self.nw).map(|j| self.w_index(j)));
        }
        if kd.delta {
            idx.extend((0..self.nd).map(|j| self.d_index(j)));
        }
        idx
    }

    /// Monomials of the feedback template.
    pub fn k_basis(&self) -> Vec<Monomial> {
        monomial_basis(self.vars.len(), &self.k_indices(), self.templates.deg_k)
    }

    /// Monomials of the storage-function template, over `(t, x)`.
    pub fn v_basis(&self) -> Vec<Monomial> {
        monomial_basis(self.vars.len(), &self.tx_indices(), self.templates.deg_v)
    }

    /// `h(t) = (t - t0)(T - t)`, nonnegative exactly on the horizon.
    pub fn horizon_poly(&self) -> Polynomial {
        let t = Polynomial::var_at(&self.vars, self.t_index());
        let a = t.add_constant(-self.t0);
        let b = t.neg().add_constant(self.t_final);
        a.mul(&b).expect("same variable set")
    }

    pub fn is_degenerate_horizon(&self) -> bool {
        self.t_final == self.t0
    }

    /// `R² q(t)` as a polynomial.
    pub fn level_offset(&self) -> Polynomial {
        let r2 = self.uncertainty.r_bound * self.uncertainty.r_bound;
        self.uncertainty.q.scale(r2)
    }

    /// Value of the funnel level `γ + R² q(t)` at time `t`.
    pub fn level_at(&self, gamma: f64, t: f64) -> f64 {
        let r2 = self.uncertainty.r_bound * self.uncertainty.r_bound;
        if r2 == 0.0 {
            return gamma;
        }
        gamma + r2 * self.eval_t(&self.uncertainty.q, t)
    }

    /// Evaluates a polynomial in `t` only.
    pub fn eval_t(&self, p: &Polynomial, t: f64) -> f64 {
        let mut pt = vec![0.0; self.vars.len()];
        pt[self.t_index()] = t;
        p.eval(&pt).expect("point has full length")
    }

    /// Point in the shared variable space.
    pub fn point(&self, t: f64, x: &[f64], w: &[f64], d: &[f64]) -> Vec<f64> {
        let mut pt = Vec::with_capacity(self.vars.len());
        pt.push(t);
        pt.extend_from_slice(x);
        pt.extend(w.iter().copied().chain(std::iter::repeat(0.0)).take(self.nw));
        pt.extend(d.iter().copied().chain(std::iter::repeat(0.0)).take(self.nd));
        pt
    }

    /// Closed-loop vector field `f + g u` at a point.
    pub fn vector_field(&self, pt: &[f64], u: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let mut v = self.f[i].eval_unchecked(pt);
                for (j, uj) in u.iter().enumerate() {
                    v += self.g[i][j].eval_unchecked(pt) * uj;
                }
                v
            })
            .collect()
    }

    fn depends_only_on(p: &Polynomial, allowed: &[usize]) -> bool {
        p.support_vars().iter().all(|i| allowed.contains(i))
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let nv = 1 + self.n + self.nw + self.nd;
        if self.vars.len() != nv {
            return invalid(format!("variable set has {} entries, expected {nv}", self.vars.len()));
        }
        if self.n == 0 {
            return invalid("at least one state is required");
        }
        if self.f.len() != self.n {
            return invalid(format!("f has {} entries, expected {}", self.f.len(), self.n));
        }
        if self.g.len() != self.n || self.g.iter().any(|r| r.len() != self.m) {
            return invalid(format!("g must be {}x{}", self.n, self.m));
        }
        if !(self.t0.is_finite() && self.t_final.is_finite()) || self.t_final < self.t0 {
            return invalid(format!(
                "horizon [{}, {}] must satisfy T >= t0",
                self.t0, self.t_final
            ));
        }
        if self.targets.is_empty() {
            return invalid("at least one target constraint is required");
        }
        let tx = self.tx_indices();
        let xs = self.state_indices();
        for (j, tg) in self.targets.iter().enumerate() {
            let allowed = if tg.kind == TargetKind::Terminal { &xs } else { &tx };
            if !Self::depends_only_on(&tg.r, allowed) {
                return invalid(format!(
                    "target {j} ({}) depends on variables outside its scope",
                    tg.kind.as_str()
                ));
            }
        }
        if self.input_a.len() != self.input_b.len() {
            return invalid(format!(
                "input polytope has {} rows in A but {} in b",
                self.input_a.len(),
                self.input_b.len()
            ));
        }
        for (i, row) in self.input_a.iter().enumerate() {
            if row.len() != self.m {
                return invalid(format!("row {i} of A has {} entries, expected {}", row.len(), self.m));
            }
            if !row.iter().chain(std::iter::once(&self.input_b[i])).all(|p| Self::depends_only_on(p, &tx)) {
                return invalid(format!("row {i} of the input polytope must depend on (t, x) only"));
            }
        }
        if !(self.eps > 0.0) {
            return invalid("eps must be positive");
        }
        let u = &self.uncertainty;
        if !(u.r_bound >= 0.0) || !(u.w_bar >= 0.0) {
            return invalid("R and w_bar must be nonnegative");
        }
        if u.r_bound > 0.0 {
            if !Self::depends_only_on(&u.q, &[self.t_index()]) {
                return invalid("q must depend on t only");
            }
            let q0 = self.eval_t(&u.q, self.t0);
            let q1 = self.eval_t(&u.q, self.t_final);
            if q0.abs() > 1e-9 {
                return invalid(format!("q(t0) = {q0}, expected 0"));
            }
            if !self.is_degenerate_horizon() {
                if (q1 - 1.0).abs() > 1e-9 {
                    return invalid(format!("q(T) = {q1}, expected 1"));
                }
                let dq = u.q.diff_at(self.t_index());
                for s in 0..=200 {
                    let t = self.t0 + (self.t_final - self.t0) * s as f64 / 200.0;
                    if self.eval_t(&dq, t) < -1e-9 {
                        return invalid(format!("q is decreasing at t = {t}"));
                    }
                }
            }
        }
        match &u.delta {
            DeltaSet::Ball(b) => {
                if !(*b >= 0.0) {
                    return invalid("delta bound must be nonnegative");
                }
            }
            DeltaSet::Box(b) => {
                if b.len() != self.nd {
                    return invalid(format!("delta box has {} bounds, expected {}", b.len(), self.nd));
                }
                if b.iter().any(|v| !(*v >= 0.0)) {
                    return invalid("delta bounds must be nonnegative");
                }
            }
        }
        if !(self.k_dependence.t || self.k_dependence.x) {
            return invalid("the feedback law must depend on t or x");
        }
        if self.x_eq.len() != self.n {
            return invalid(format!("x_eq has {} entries, expected {}", self.x_eq.len(), self.n));
        }
        Ok(())
    }
}
