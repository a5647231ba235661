//! Sum-of-squares programs and their compilation to [`ConicProblem`]s.
//!
//! A program owns scalar decision variables (free, nonnegative, or entries of
//! a Gram matrix). Polynomial expressions are affine in those scalars and are
//! represented by [`PolyExpr`]. An SOS constraint `e ∈ Σ` is compiled by
//! introducing a fresh Gram matrix `Q ⪰ 0` over a monomial basis `z` and
//! matching `e(ξ) = z(ξ)'Q z(ξ)` coefficient by coefficient.
//!
//! All bookkeeping uses ordered maps, so compiling the same program twice
//! produces identical problems.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::conic::{svec_index, svec_len, ConeLayout, ConicProblem, VarSource};
use crate::polynomial::{monomial_basis, Monomial, PolyError, Polynomial, VarSet};
use crate::sdp::{smat, svec, ConicSolution, SolveStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("bilinear term: product of `{0}` and `{1}` decision variables")]
    Bilinear(String, String),
    #[error("constraint `{constraint}`: Gram basis cannot produce monomial {monomial}")]
    BasisInsufficient { constraint: String, monomial: String },
    #[error("objective must be a linear function of scalar decision variables")]
    NonScalarObjective,
    #[error("solver returned {0:?}")]
    Solver(SolveStatus),
    #[error("solution has {got} entries, problem needs {expected}")]
    SolutionSize { expected: usize, got: usize },
}

/// Handle to a scalar decision variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DecVar(usize);

impl DecVar {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    Free,
    Nonneg,
    /// Entry `(i, j)`, `i <= j`, of an explicit Gram block. The variable's
    /// value is the matrix entry `Q_ij` itself.
    Gram { block: usize, i: usize, j: usize },
}

#[derive(Debug, Clone)]
struct ScalarInfo {
    name: String,
    owner: String,
    kind: ScalarKind,
}

/// Polynomial whose coefficients are affine in the decision variables:
/// `constant + Σ_v v · linear[v]`.
#[derive(Clone, PartialEq)]
pub struct PolyExpr {
    vars: VarSet,
    constant: Polynomial,
    linear: BTreeMap<DecVar, Polynomial>,
    /// Owner tag of the decision variables, for bilinearity diagnostics.
    owners: BTreeMap<DecVar, String>,
}

impl fmt::Debug for PolyExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PolyExpr({}", self.constant)?;
        for (v, p) in &self.linear {
            write!(f, " + v{}*({})", v.0, p)?;
        }
        write!(f, ")")
    }
}

impl PolyExpr {
    pub fn constant(p: Polynomial) -> PolyExpr {
        PolyExpr {
            vars: p.vars().clone(),
            constant: p,
            linear: BTreeMap::new(),
            owners: BTreeMap::new(),
        }
    }

    pub fn zero(vars: &VarSet) -> PolyExpr {
        PolyExpr::constant(Polynomial::zero(vars))
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn constant_part(&self) -> &Polynomial {
        &self.constant
    }

    pub fn linear_parts(&self) -> &BTreeMap<DecVar, Polynomial> {
        &self.linear
    }

    pub fn is_constant(&self) -> bool {
        self.linear.is_empty()
    }

    fn check(&self, other: &PolyExpr) -> Result<(), SosError> {
        if self.vars != other.vars {
            return Err(PolyError::VarSetMismatch {
                left: self.vars.describe(),
                right: other.vars.describe(),
            }
            .into());
        }
        Ok(())
    }

    fn term(v: DecVar, owner: &str, p: Polynomial) -> PolyExpr {
        let vars = p.vars().clone();
        let mut linear = BTreeMap::new();
        let mut owners = BTreeMap::new();
        if !p.is_zero() {
            linear.insert(v, p);
            owners.insert(v, owner.to_string());
        }
        PolyExpr {
            constant: Polynomial::zero(&vars),
            vars,
            linear,
            owners,
        }
    }

    pub fn add(&self, other: &PolyExpr) -> Result<PolyExpr, SosError> {
        self.check(other)?;
        let mut out = self.clone();
        out.constant = out.constant.add(&other.constant)?;
        for (v, p) in &other.linear {
            let entry = out
                .linear
                .entry(*v)
                .or_insert_with(|| Polynomial::zero(&self.vars));
            *entry = entry.add(p)?;
            out.owners.insert(*v, other.owners[v].clone());
        }
        out.prune();
        Ok(out)
    }

    pub fn sub(&self, other: &PolyExpr) -> Result<PolyExpr, SosError> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> PolyExpr {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> PolyExpr {
        let mut out = self.clone();
        out.constant = out.constant.scale(s);
        for p in out.linear.values_mut() {
            *p = p.scale(s);
        }
        out.prune();
        out
    }

    pub fn add_poly(&self, p: &Polynomial) -> Result<PolyExpr, SosError> {
        let mut out = self.clone();
        out.constant = out.constant.add(p)?;
        Ok(out)
    }

    pub fn sub_poly(&self, p: &Polynomial) -> Result<PolyExpr, SosError> {
        self.add_poly(&p.neg())
    }

    /// Product with a fixed polynomial.
    pub fn mul_poly(&self, p: &Polynomial) -> Result<PolyExpr, SosError> {
        let mut out = self.clone();
        out.constant = out.constant.mul(p)?;
        for q in out.linear.values_mut() {
            *q = q.mul(p)?;
        }
        out.prune();
        Ok(out)
    }

    /// Product of two expressions; fails unless one side is constant.
    pub fn mul(&self, other: &PolyExpr) -> Result<PolyExpr, SosError> {
        self.check(other)?;
        if let (Some((va, _)), Some((vb, _))) = (self.linear.iter().next(), other.linear.iter().next())
        {
            return Err(SosError::Bilinear(
                self.owners[va].clone(),
                other.owners[vb].clone(),
            ));
        }
        if self.is_constant() {
            other.mul_poly(&self.constant)
        } else {
            self.mul_poly(&other.constant)
        }
    }

    /// Applies a linear map on polynomials (e.g. differentiation or
    /// substitution) to the constant part and every coefficient.
    pub fn map<F>(&self, f: F) -> Result<PolyExpr, SosError>
    where
        F: Fn(&Polynomial) -> Result<Polynomial, PolyError>,
    {
        let mut out = self.clone();
        out.constant = f(&self.constant)?;
        for (v, p) in &self.linear {
            out.linear.insert(*v, f(p)?);
        }
        out.prune();
        Ok(out)
    }

    pub fn diff_at(&self, idx: usize) -> PolyExpr {
        self.map(|p| Ok(p.diff_at(idx)))
            .expect("differentiation keeps the variable set")
    }

    /// Value of the expression for an assignment of every decision variable.
    pub fn eval(&self, values: &[f64]) -> Polynomial {
        let mut acc = self.constant.clone();
        for (v, p) in &self.linear {
            acc = acc
                .add(&p.scale(values[v.0]))
                .expect("same variable set");
        }
        acc
    }

    /// Monomials that can carry a nonzero coefficient.
    pub fn support(&self) -> BTreeSet<Monomial> {
        let mut s: BTreeSet<Monomial> = self.constant.terms().keys().cloned().collect();
        for p in self.linear.values() {
            s.extend(p.terms().keys().cloned());
        }
        s
    }

    pub fn degree(&self) -> i32 {
        self.linear
            .values()
            .map(|p| p.degree())
            .fold(self.constant.degree(), i32::max)
    }

    fn prune(&mut self) {
        let dead: Vec<DecVar> = self
            .linear
            .iter()
            .filter(|(_, p)| p.is_zero())
            .map(|(v, _)| *v)
            .collect();
        for v in dead {
            self.linear.remove(&v);
            self.owners.remove(&v);
        }
    }
}

#[derive(Debug, Clone)]
struct GramBlock {
    name: String,
    basis: Vec<Monomial>,
    /// Decision variables for the upper triangle, svec order.
    entries: Vec<DecVar>,
}

#[derive(Debug, Clone)]
pub struct SosConstraint {
    pub name: String,
    pub expr: PolyExpr,
    /// Gram basis; `None` selects the default pruned basis at compile time.
    pub basis: Option<Vec<Monomial>>,
    /// Optional margin: compile `expr - mu * sigma` where `sigma = z'Dz`
    /// with multinomial weights `D`.
    pub margin: Option<DecVar>,
}

#[derive(Debug, Clone)]
struct Equality {
    name: String,
    expr: PolyExpr,
}

/// A sum-of-squares program: scalar variables, polynomial SOS constraints,
/// polynomial identities and a linear objective (minimized).
#[derive(Debug, Clone)]
pub struct SosProgram {
    vars: VarSet,
    scalars: Vec<ScalarInfo>,
    grams: Vec<GramBlock>,
    constraints: Vec<SosConstraint>,
    equalities: Vec<Equality>,
    objective: BTreeMap<DecVar, f64>,
}

impl SosProgram {
    pub fn new(vars: &VarSet) -> SosProgram {
        SosProgram {
            vars: vars.clone(),
            scalars: Vec::new(),
            grams: Vec::new(),
            constraints: Vec::new(),
            equalities: Vec::new(),
            objective: BTreeMap::new(),
        }
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn num_scalars(&self) -> usize {
        self.scalars.len()
    }

    pub fn constraints(&self) -> &[SosConstraint] {
        &self.constraints
    }

    fn push_scalar(&mut self, name: String, owner: &str, kind: ScalarKind) -> DecVar {
        self.scalars.push(ScalarInfo {
            name,
            owner: owner.to_string(),
            kind,
        });
        DecVar(self.scalars.len() - 1)
    }

    /// A scalar decision variable and the expression equal to it.
    pub fn new_scalar(&mut self, name: &str, nonneg: bool) -> (DecVar, PolyExpr) {
        let kind = if nonneg {
            ScalarKind::Nonneg
        } else {
            ScalarKind::Free
        };
        let v = self.push_scalar(name.to_string(), name, kind);
        let e = PolyExpr::term(v, name, Polynomial::constant(&self.vars, 1.0));
        (v, e)
    }

    /// Free polynomial `Σ c_i m_i` with one decision variable per monomial.
    pub fn new_free_poly(&mut self, name: &str, monomials: &[Monomial]) -> PolyExpr {
        let mut e = PolyExpr::zero(&self.vars);
        for (i, m) in monomials.iter().enumerate() {
            let v = self.push_scalar(format!("{}[{}]", name, i), name, ScalarKind::Free);
            e.linear
                .insert(v, Polynomial::monomial(&self.vars, m.clone(), 1.0));
            e.owners.insert(v, name.to_string());
        }
        e
    }

    /// SOS polynomial `z'Qz`, `Q ⪰ 0`, over the given basis.
    pub fn new_sos_poly(&mut self, name: &str, basis: &[Monomial]) -> PolyExpr {
        let block = self.grams.len();
        let k = basis.len();
        let mut entries = Vec::with_capacity(svec_len(k));
        let mut e = PolyExpr::zero(&self.vars);
        for i in 0..k {
            for j in i..k {
                let v = self.push_scalar(
                    format!("{}.Q[{},{}]", name, i, j),
                    name,
                    ScalarKind::Gram { block, i, j },
                );
                entries.push(v);
                let mult = if i == j { 1.0 } else { 2.0 };
                e.linear.insert(
                    v,
                    Polynomial::monomial(&self.vars, basis[i].mul(&basis[j]), mult),
                );
                e.owners.insert(v, name.to_string());
            }
        }
        self.grams.push(GramBlock {
            name: name.to_string(),
            basis: basis.to_vec(),
            entries,
        });
        e
    }

    /// Requires `expr ∈ Σ`.
    pub fn add_sos(&mut self, name: &str, expr: PolyExpr, basis: Option<Vec<Monomial>>) {
        self.constraints.push(SosConstraint {
            name: name.to_string(),
            expr,
            basis,
            margin: None,
        });
    }

    /// Requires `expr - mu·σ ∈ Σ` where `σ = z'Dz` over the constraint's own
    /// basis `z` with `D_αα = d! / ((d-|α|)! Π α_i!)`, `d = max |α|`; for an
    /// unpruned basis this is exactly `(1 + ‖ξ‖²)^d`.
    pub fn add_sos_with_margin(&mut self, name: &str, expr: PolyExpr, mu: DecVar) {
        self.constraints.push(SosConstraint {
            name: name.to_string(),
            expr,
            basis: None,
            margin: Some(mu),
        });
    }

    /// Requires `expr ≡ 0` coefficient-wise.
    pub fn add_eq(&mut self, name: &str, expr: PolyExpr) {
        self.equalities.push(Equality {
            name: name.to_string(),
            expr,
        });
    }

    /// Requires the scalar expression `expr` to be nonnegative.
    pub fn add_nonneg(&mut self, name: &str, expr: PolyExpr) -> Result<(), SosError> {
        let (_, slack) = self.new_scalar(&format!("{}.slack", name), true);
        let e = expr.sub(&slack)?;
        self.add_eq(name, e);
        Ok(())
    }

    /// Sets the objective `minimize expr`; `expr` must have constant
    /// coefficients (a linear function of scalars).
    pub fn minimize(&mut self, expr: &PolyExpr) -> Result<(), SosError> {
        let one = Monomial::one(self.vars.len());
        let mut obj = BTreeMap::new();
        for (v, p) in &expr.linear {
            if p.terms().keys().any(|m| *m != one) {
                return Err(SosError::NonScalarObjective);
            }
            obj.insert(*v, p.coeff(&one));
        }
        self.objective = obj;
        Ok(())
    }

    pub fn maximize(&mut self, expr: &PolyExpr) -> Result<(), SosError> {
        self.minimize(&expr.neg())
    }

    /// Default Gram basis for an expression: monomials of degree
    /// `≤ ⌈deg/2⌉` in the variables it touches, pruned by two sound rules.
    ///
    /// 1. Newton box: every exponent of `z` lies within half the range of the
    ///    corresponding exponents of the support (per variable and in total
    ///    degree), a necessary condition for `z` to appear in any SOS
    ///    decomposition.
    /// 2. Diagonal consistency: if `z_a²` is not in the support and cannot be
    ///    formed by any other pair of basis monomials, then `Q_aa = 0` and so
    ///    row `a` of `Q` vanishes; `z_a` is dropped. Iterated to a fixpoint.
    pub fn default_basis(support: &BTreeSet<Monomial>, nvars: usize) -> Vec<Monomial> {
        if support.is_empty() {
            return Vec::new();
        }
        let mut vars_used = BTreeSet::new();
        let mut max_e = vec![0u32; nvars];
        let mut min_e = vec![u32::MAX; nvars];
        let mut max_deg = 0u32;
        let mut min_deg = u32::MAX;
        for m in support {
            for (i, &e) in m.exponents().iter().enumerate() {
                if e > 0 {
                    vars_used.insert(i);
                }
                max_e[i] = max_e[i].max(e);
                min_e[i] = min_e[i].min(e);
            }
            max_deg = max_deg.max(m.degree());
            min_deg = min_deg.min(m.degree());
        }
        let vars: Vec<usize> = vars_used.into_iter().collect();
        let half = max_deg.div_ceil(2);
        let mut basis: Vec<Monomial> = monomial_basis(nvars, &vars, half)
            .into_iter()
            .filter(|z| {
                let d = 2 * z.degree();
                d <= max_deg
                    && d >= min_deg
                    && z.exponents().iter().enumerate().all(|(i, &e)| {
                        2 * e <= max_e[i] && 2 * e >= min_e[i]
                    })
            })
            .collect();
        loop {
            let mut products: BTreeMap<Monomial, usize> = BTreeMap::new();
            for a in 0..basis.len() {
                for b in a + 1..basis.len() {
                    *products.entry(basis[a].mul(&basis[b])).or_default() += 1;
                }
            }
            let before = basis.len();
            basis.retain(|z| {
                let sq = z.mul(z);
                support.contains(&sq) || products.contains_key(&sq)
            });
            if basis.len() == before {
                break;
            }
        }
        basis
    }

    /// Compiles to standard conic form.
    pub fn compile(&self) -> Result<CompiledSos, SosError> {
        let nvars = self.vars.len();

        // resolve constraint bases and effective expressions
        let mut bases = Vec::with_capacity(self.constraints.len());
        let mut exprs = Vec::with_capacity(self.constraints.len());
        let mut margin_weights = Vec::with_capacity(self.constraints.len());
        for c in &self.constraints {
            let basis = match &c.basis {
                Some(b) => b.clone(),
                None => Self::default_basis(&c.expr.support(), nvars),
            };
            let mut expr = c.expr.clone();
            let mut weights = Vec::new();
            if let Some(mu) = c.margin {
                weights = margin_weights_for(&basis);
                let sigma = Polynomial::from_terms(
                    &self.vars,
                    basis
                        .iter()
                        .zip(&weights)
                        .map(|(z, w)| (z.mul(z), *w)),
                );
                let owner = &self.scalars[mu.0].owner;
                let term = PolyExpr::term(mu, owner, sigma);
                expr = expr.sub(&term)?;
            }
            bases.push(basis);
            exprs.push(expr);
            margin_weights.push(weights);
        }

        // column layout: free, nonneg, explicit Gram blocks, constraint blocks
        let mut free_cols = Vec::new();
        let mut nonneg_cols = Vec::new();
        for (i, s) in self.scalars.iter().enumerate() {
            match s.kind {
                ScalarKind::Free => free_cols.push(i),
                ScalarKind::Nonneg => nonneg_cols.push(i),
                ScalarKind::Gram { .. } => {}
            }
        }
        let mut psd = Vec::new();
        for g in &self.grams {
            psd.push(g.basis.len());
        }
        for b in &bases {
            psd.push(b.len());
        }
        let cones = ConeLayout {
            free: free_cols.len(),
            nonneg: nonneg_cols.len(),
            psd,
        };
        let n = cones.num_vars();

        // scalar -> (column, factor) with value = factor * x[column]
        let r2 = std::f64::consts::FRAC_1_SQRT_2;
        let mut col_of = vec![(0usize, 1.0f64); self.scalars.len()];
        let mut var_map = Vec::with_capacity(n);
        for (c, &i) in free_cols.iter().enumerate() {
            col_of[i] = (c, 1.0);
            var_map.push(VarSource::Free(self.scalars[i].name.clone()));
        }
        for (c, &i) in nonneg_cols.iter().enumerate() {
            col_of[i] = (cones.free + c, 1.0);
            var_map.push(VarSource::Nonneg(self.scalars[i].name.clone()));
        }
        for (bidx, g) in self.grams.iter().enumerate() {
            let off = cones.psd_offset(bidx);
            let k = g.basis.len();
            for &v in &g.entries {
                if let ScalarKind::Gram { i, j, .. } = self.scalars[v.0].kind {
                    let f = if i == j { 1.0 } else { r2 };
                    col_of[v.0] = (off + svec_index(k, i, j), f);
                }
            }
            for (row, col) in crate::conic::svec_pairs(k) {
                var_map.push(VarSource::Gram {
                    block: bidx,
                    row,
                    col,
                });
            }
        }
        for (ci, b) in bases.iter().enumerate() {
            let block = self.grams.len() + ci;
            for (row, col) in crate::conic::svec_pairs(b.len()) {
                var_map.push(VarSource::Gram { block, row, col });
            }
        }

        let mut a: Vec<(usize, usize, f64)> = Vec::new();
        let mut rhs: Vec<f64> = Vec::new();
        let mut row_names: Vec<String> = Vec::new();

        // linear part of one coefficient -> row entries
        let push_row = |a: &mut Vec<(usize, usize, f64)>,
                        rhs: &mut Vec<f64>,
                        entries: &BTreeMap<usize, f64>,
                        b: f64| {
            let r = rhs.len();
            for (&c, &v) in entries {
                if v != 0.0 {
                    a.push((r, c, v));
                }
            }
            rhs.push(b);
        };

        let collect = |expr: &PolyExpr| -> BTreeMap<Monomial, BTreeMap<usize, f64>> {
            let mut rows: BTreeMap<Monomial, BTreeMap<usize, f64>> = BTreeMap::new();
            for (v, p) in &expr.linear {
                let (col, f) = col_of[v.0];
                for (m, c) in p.terms() {
                    *rows.entry(m.clone()).or_default().entry(col).or_default() += c * f;
                }
            }
            rows
        };

        for (ci, c) in self.constraints.iter().enumerate() {
            let expr = &exprs[ci];
            let basis = &bases[ci];
            let block = self.grams.len() + ci;
            let off = cones.psd_offset(block);
            let k = basis.len();
            let mut rows = collect(expr);
            let mut covered: BTreeSet<Monomial> = BTreeSet::new();
            for i in 0..k {
                for j in i..k {
                    let m = basis[i].mul(&basis[j]);
                    let coef = if i == j { 1.0 } else { 2.0 * r2 };
                    *rows
                        .entry(m.clone())
                        .or_default()
                        .entry(off + svec_index(k, i, j))
                        .or_default() -= coef;
                    covered.insert(m);
                }
            }
            for m in expr.constant.terms().keys() {
                if !covered.contains(m) && !expr.linear.values().any(|p| p.coeff(m) != 0.0) {
                    return Err(SosError::BasisInsufficient {
                        constraint: c.name.clone(),
                        monomial: Polynomial::monomial(&self.vars, m.clone(), 1.0).to_string(),
                    });
                }
                rows.entry(m.clone()).or_default();
            }
            for (m, entries) in &rows {
                let b = -expr.constant.coeff(m);
                push_row(&mut a, &mut rhs, entries, b);
                row_names.push(format!(
                    "{}: {}",
                    c.name,
                    Polynomial::monomial(&self.vars, m.clone(), 1.0)
                ));
            }
        }
        for eq in &self.equalities {
            let mut rows = collect(&eq.expr);
            for m in eq.expr.constant.terms().keys() {
                rows.entry(m.clone()).or_default();
            }
            for (m, entries) in &rows {
                let b = -eq.expr.constant.coeff(m);
                if entries.values().all(|v| *v == 0.0) {
                    if b != 0.0 {
                        // 0 = b: keep the row so the solver reports infeasibility
                        push_row(&mut a, &mut rhs, entries, b);
                        row_names.push(format!(
                            "{}: {}",
                            eq.name,
                            Polynomial::monomial(&self.vars, m.clone(), 1.0)
                        ));
                    }
                    continue;
                }
                push_row(&mut a, &mut rhs, entries, b);
                row_names.push(format!(
                    "{}: {}",
                    eq.name,
                    Polynomial::monomial(&self.vars, m.clone(), 1.0)
                ));
            }
        }

        let mut cvec = vec![0.0; n];
        for (v, w) in &self.objective {
            let (col, f) = col_of[v.0];
            cvec[col] += w * f;
        }
        a.sort_by_key(|x| (x.0, x.1));

        let problem = ConicProblem {
            c: cvec,
            a,
            b: rhs,
            cones,
            var_map,
        };
        Ok(CompiledSos {
            problem,
            col_of,
            bases,
            margin_weights,
            row_names,
        })
    }

    /// Maps a conic solution back onto the program.
    pub fn extract(
        &self,
        compiled: &CompiledSos,
        sol: &ConicSolution,
    ) -> Result<SosSolution, SosError> {
        if sol.status != SolveStatus::Optimal {
            return Err(SosError::Solver(sol.status));
        }
        let n = compiled.problem.num_vars();
        if sol.x.len() != n {
            return Err(SosError::SolutionSize {
                expected: n,
                got: sol.x.len(),
            });
        }
        let values: Vec<f64> = compiled
            .col_of
            .iter()
            .map(|&(c, f)| f * sol.x[c])
            .collect();
        let cones = &compiled.problem.cones;
        let grams: Vec<DMatrix<f64>> = self
            .grams
            .iter()
            .enumerate()
            .map(|(b, g)| {
                let off = cones.psd_offset(b);
                crate::sdp::smat(&sol.x[off..off + svec_len(g.basis.len())], g.basis.len())
            })
            .collect();
        let mut constraint_grams = Vec::with_capacity(self.constraints.len());
        let mut residuals = Vec::with_capacity(self.constraints.len());
        for (ci, c) in self.constraints.iter().enumerate() {
            let basis = &compiled.bases[ci];
            let k = basis.len();
            let off = cones.psd_offset(self.grams.len() + ci);
            let mut q = crate::sdp::smat(&sol.x[off..off + svec_len(k)], k);
            if let Some(mu) = c.margin {
                for (i, w) in compiled.margin_weights[ci].iter().enumerate() {
                    q[(i, i)] += values[mu.0] * w;
                }
            }
            let p = c.expr.eval(&values);
            residuals.push(residual(&p, &q, basis)?);
            constraint_grams.push(q);
        }
        Ok(SosSolution {
            values,
            grams,
            constraint_grams,
            constraint_bases: compiled.bases.clone(),
            residuals,
            objective: sol.primal_objective,
        })
    }

    pub fn gram_basis(&self, block: usize) -> &[Monomial] {
        &self.grams[block].basis
    }

    pub fn gram_name(&self, block: usize) -> &str {
        &self.grams[block].name
    }

    pub fn num_grams(&self) -> usize {
        self.grams.len()
    }
}

/// Multinomial weights of `(1 + ‖ξ‖²)^d` on the squares of `basis`.
fn margin_weights_for(basis: &[Monomial]) -> Vec<f64> {
    let d = basis.iter().map(|z| z.degree()).max().unwrap_or(0);
    let fact = |k: u32| (1..=k).map(|i| i as f64).product::<f64>();
    basis
        .iter()
        .map(|z| {
            let denom: f64 =
                fact(d - z.degree()) * z.exponents().iter().map(|&e| fact(e)).product::<f64>();
            fact(d) / denom
        })
        .collect()
}

/// Output of [`SosProgram::compile`].
#[derive(Debug, Clone)]
pub struct CompiledSos {
    pub problem: ConicProblem,
    col_of: Vec<(usize, f64)>,
    bases: Vec<Vec<Monomial>>,
    margin_weights: Vec<Vec<f64>>,
    /// Human-readable origin of each equality row.
    pub row_names: Vec<String>,
}

impl CompiledSos {
    pub fn constraint_basis(&self, ci: usize) -> &[Monomial] {
        &self.bases[ci]
    }

    /// Cleans up an interior-point solution so the equalities hold to
    /// rounding without leaving the cone.
    ///
    /// Interior-point solutions satisfy the equalities only to the solver's
    /// scaled tolerance, which for badly scaled data leaves coefficient
    /// residuals of order `1e-6`. A bare minimum-norm step onto `Ax = b`
    /// fixes that but pushes Gram matrices that sit on the cone boundary
    /// (the usual case at a maximal level) slightly indefinite, so the step
    /// alternates with projections onto the cone and keeps the best iterate.
    pub fn polish(&self, x: &mut [f64]) {
        let p = &self.problem;
        if p.num_eqs() == 0 || x.len() != p.num_vars() {
            return;
        }
        let score = |x: &[f64]| self.equality_residual(x).max(self.cone_violation(x));
        let mut best = x.to_vec();
        let mut best_score = score(x);
        let mut cur = x.to_vec();
        for _ in 0..8 {
            if !self.project_affine(&mut cur) {
                break;
            }
            let sc = score(&cur);
            if sc < best_score {
                best_score = sc;
                best.copy_from_slice(&cur);
            }
            if self.cone_violation(&cur) < 1e-10 {
                break;
            }
            self.project_cone(&mut cur);
        }
        x.copy_from_slice(&best);
    }

    /// Largest absolute entry of `b - Ax`.
    pub fn equality_residual(&self, x: &[f64]) -> f64 {
        let p = &self.problem;
        let mut r = p.b.clone();
        for &(i, j, v) in &p.a {
            r[i] -= v * x[j];
        }
        r.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    /// Distance-like measure of cone infeasibility: the most negative
    /// nonnegative entry or PSD eigenvalue, as a positive number.
    pub fn cone_violation(&self, x: &[f64]) -> f64 {
        let cones = &self.problem.cones;
        let mut worst = 0.0_f64;
        for v in &x[cones.free..cones.free + cones.nonneg] {
            worst = worst.max(-v);
        }
        for (j, &k) in cones.psd.iter().enumerate() {
            let off = cones.psd_offset(j);
            let m = smat(&x[off..off + svec_len(k)], k);
            worst = worst.max(-m.symmetric_eigenvalues().min());
        }
        worst
    }

    fn project_cone(&self, x: &mut [f64]) {
        let cones = &self.problem.cones;
        for v in &mut x[cones.free..cones.free + cones.nonneg] {
            *v = v.max(0.0);
        }
        for (j, &k) in cones.psd.iter().enumerate() {
            let off = cones.psd_offset(j);
            let m = smat(&x[off..off + svec_len(k)], k);
            let eig = m.symmetric_eigen();
            if eig.eigenvalues.min() >= 0.0 {
                continue;
            }
            let clipped = eig.eigenvalues.map(|l| l.max(0.0));
            let back = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
            x[off..off + svec_len(k)].copy_from_slice(&svec(&back));
        }
    }

    /// Minimum-norm step onto `{x : Ax = b}` by Jacobi-preconditioned CG on
    /// `A A' y = r`; returns `false` when it does not reduce the residual.
    fn project_affine(&self, x: &mut [f64]) -> bool {
        let p = &self.problem;
        let m = p.num_eqs();
        let at = |y: &[f64], out: &mut [f64]| {
            out.iter_mut().for_each(|v| *v = 0.0);
            for &(i, j, v) in &p.a {
                out[j] += v * y[i];
            }
        };
        let a = |z: &[f64], out: &mut [f64]| {
            out.iter_mut().for_each(|v| *v = 0.0);
            for &(i, j, v) in &p.a {
                out[i] += v * z[j];
            }
        };
        let mut diag = vec![0.0; m];
        for &(i, _, v) in &p.a {
            diag[i] += v * v;
        }
        let inv: Vec<f64> = diag.iter().map(|d| if *d > 0.0 { 1.0 / d } else { 0.0 }).collect();
        let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let mut tmp = vec![0.0; x.len()];
        let mut q = vec![0.0; m];
        let mut improved = false;
        // two rounds, since one CG pass leaves rounding error in the step
        for _ in 0..2 {
            let norm0 = self.equality_residual(x);
            if norm0 < 1e-14 {
                return true;
            }
            let mut r = p.b.clone();
            for &(i, j, v) in &p.a {
                r[i] -= v * x[j];
            }
            let mut y = vec![0.0; m];
            let mut z: Vec<f64> = r.iter().zip(&inv).map(|(a, b)| a * b).collect();
            let mut d = z.clone();
            let mut rz = dot(&r, &z);
            for _ in 0..500 {
                at(&d, &mut tmp);
                a(&tmp, &mut q);
                let dq = dot(&d, &q);
                if !(dq > 0.0) {
                    break;
                }
                let alpha = rz / dq;
                for i in 0..m {
                    y[i] += alpha * d[i];
                    r[i] -= alpha * q[i];
                }
                if r.iter().fold(0.0_f64, |a, v| a.max(v.abs())) < 1e-13 * norm0.max(1e-3) {
                    break;
                }
                for i in 0..m {
                    z[i] = r[i] * inv[i];
                }
                let rz_new = dot(&r, &z);
                let beta = rz_new / rz;
                rz = rz_new;
                for i in 0..m {
                    d[i] = z[i] + beta * d[i];
                }
            }
            at(&y, &mut tmp);
            let candidate: Vec<f64> = x.iter().zip(&tmp).map(|(a, b)| a + b).collect();
            if !(self.equality_residual(&candidate) < norm0) {
                return improved;
            }
            x.copy_from_slice(&candidate);
            improved = true;
        }
        improved
    }
}

/// Values of a solved program.
#[derive(Debug, Clone)]
pub struct SosSolution {
    /// Value of every scalar decision variable (Gram entries as `Q_ij`).
    pub values: Vec<f64>,
    /// Explicit Gram blocks from [`SosProgram::new_sos_poly`].
    pub grams: Vec<DMatrix<f64>>,
    /// Gram matrix certifying each SOS constraint's original expression.
    pub constraint_grams: Vec<DMatrix<f64>>,
    pub constraint_bases: Vec<Vec<Monomial>>,
    /// Max-norm coefficient residual per constraint.
    pub residuals: Vec<f64>,
    pub objective: f64,
}

impl SosSolution {
    pub fn eval(&self, e: &PolyExpr) -> Polynomial {
        e.eval(&self.values)
    }

    pub fn value(&self, v: DecVar) -> f64 {
        self.values[v.0]
    }
}

/// `z(ξ)'Q z(ξ)` as a polynomial.
pub fn gram_polynomial(
    vars: &VarSet,
    q: &DMatrix<f64>,
    basis: &[Monomial],
) -> Result<Polynomial, SosError> {
    if q.nrows() != basis.len() || q.ncols() != basis.len() {
        return Err(PolyError::DimensionMismatch {
            expected: basis.len(),
            got: q.nrows(),
        }
        .into());
    }
    let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
    for i in 0..basis.len() {
        for j in 0..basis.len() {
            *terms.entry(basis[i].mul(&basis[j])).or_default() += q[(i, j)];
        }
    }
    Ok(Polynomial::from_terms(vars, terms))
}

/// Max-norm of the coefficients of `p - z'Qz`.
pub fn residual(p: &Polynomial, q: &DMatrix<f64>, basis: &[Monomial]) -> Result<f64, SosError> {
    let g = gram_polynomial(p.vars(), q, basis)?;
    let mut worst = 0.0f64;
    let mut keys: BTreeSet<&Monomial> = p.terms().keys().collect();
    keys.extend(g.terms().keys());
    for m in keys {
        worst = worst.max((p.coeff(m) - g.coeff(m)).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::{min_eig, solve, SolverOptions};

    fn xy() -> VarSet {
        VarSet::new(&["x", "y"]).unwrap()
    }

    fn parse(v: &VarSet, s: &str) -> Polynomial {
        Polynomial::parse(v, s).unwrap()
    }

    fn solve_prog(p: &SosProgram) -> Result<SosSolution, SosError> {
        let c = p.compile()?;
        let sol = solve(&c.problem, &SolverOptions::default());
        p.extract(&c, &sol)
    }

    #[test]
    fn perfect_square_gram() {
        let v = VarSet::new(&["x"]).unwrap();
        let mut prog = SosProgram::new(&v);
        let basis = monomial_basis(1, &[0], 1);
        prog.add_sos("sq", PolyExpr::constant(parse(&v, "x^2 + 2*x + 1")), Some(basis));
        let sol = solve_prog(&prog).unwrap();
        let q = &sol.constraint_grams[0];
        for i in 0..2 {
            for j in 0..2 {
                assert!((q[(i, j)] - 1.0).abs() < 1e-6, "{q}");
            }
        }
        assert!(sol.residuals[0] < 1e-8);
    }

    #[test]
    fn constant_one() {
        let v = VarSet::new(&["x"]).unwrap();
        let mut prog = SosProgram::new(&v);
        prog.add_sos("one", PolyExpr::constant(Polynomial::constant(&v, 1.0)), None);
        let sol = solve_prog(&prog).unwrap();
        assert_eq!(sol.constraint_bases[0].len(), 1);
        assert!((sol.constraint_grams[0][(0, 0)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn classical_quartic_is_sos() {
        let v = xy();
        let mut prog = SosProgram::new(&v);
        let basis = vec![
            Monomial::from_exponents(vec![2, 0]),
            Monomial::from_exponents(vec![1, 1]),
            Monomial::from_exponents(vec![0, 2]),
        ];
        let p = parse(&v, "2*x^4 + 2*x^3*y - x^2*y^2 + 5*y^4");
        prog.add_sos("q", PolyExpr::constant(p), Some(basis));
        let sol = solve_prog(&prog).unwrap();
        assert!(sol.residuals[0] < 1e-8, "{}", sol.residuals[0]);
        assert!(min_eig(&sol.constraint_grams[0]).unwrap() > -1e-8);
    }

    #[test]
    fn completing_the_square() {
        let v = VarSet::new(&["x"]).unwrap();
        let mut prog = SosProgram::new(&v);
        let (_, c) = prog.new_scalar("c", false);
        let e = c.add_poly(&parse(&v, "x^2 + 2*x")).unwrap();
        prog.add_sos("p", e, None);
        prog.minimize(&c).unwrap();
        let sol = solve_prog(&prog).unwrap();
        assert!((sol.objective - 1.0).abs() < 1e-6, "{}", sol.objective);
    }

    #[test]
    fn empty_program() {
        let prog = SosProgram::new(&xy());
        let sol = solve_prog(&prog).unwrap();
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn motzkin_is_not_sos() {
        let v = xy();
        let mut prog = SosProgram::new(&v);
        let p = parse(&v, "x^4*y^2 + x^2*y^4 - 3*x^2*y^2 + 1");
        prog.add_sos("motzkin", PolyExpr::constant(p), None);
        let c = prog.compile().unwrap();
        let sol = solve(&c.problem, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn zero_polynomial_constraint() {
        let v = xy();
        let mut prog = SosProgram::new(&v);
        prog.add_sos("zero", PolyExpr::zero(&v), None);
        let sol = solve_prog(&prog).unwrap();
        assert_eq!(sol.constraint_grams[0].nrows(), 0);
        assert_eq!(sol.residuals[0], 0.0);
    }

    #[test]
    fn bilinear_product_is_rejected() {
        let v = xy();
        let mut prog = SosProgram::new(&v);
        let s3 = prog.new_sos_poly("s3", &monomial_basis(2, &[0, 1], 1));
        let vv = prog.new_free_poly("V", &monomial_basis(2, &[0, 1], 2));
        match s3.mul(&vv) {
            Err(SosError::Bilinear(a, b)) => {
                assert_eq!(a, "s3");
                assert_eq!(b, "V");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn insufficient_basis_names_monomial() {
        let v = VarSet::new(&["x"]).unwrap();
        let mut prog = SosProgram::new(&v);
        let basis = vec![Monomial::one(1)];
        prog.add_sos("p", PolyExpr::constant(parse(&v, "x^2 + 1")), Some(basis));
        match prog.compile() {
            Err(SosError::BasisInsufficient { monomial, .. }) => assert_eq!(monomial, "x^2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn residual_is_linear_in_perturbation() {
        let v = VarSet::new(&["x"]).unwrap();
        let basis = monomial_basis(1, &[0], 1);
        let p = parse(&v, "x^2 + 2*x + 1");
        let mut q = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(residual(&p, &q, &basis).unwrap(), 0.0);
        q[(0, 0)] += 1e-7;
        assert!((residual(&p, &q, &basis).unwrap() - 1e-7).abs() < 1e-15);
    }

    #[test]
    fn pruning_keeps_required_monomials() {
        // x^4 y^2 + 1: half box keeps 1, x, x^2, x y, x^2 y, ...
        let v = xy();
        let p = parse(&v, "x^4*y^2 + x^2 + 1");
        let support: BTreeSet<Monomial> = p.terms().keys().cloned().collect();
        let basis = SosProgram::default_basis(&support, 2);
        for m in ["1", "x", "x^2*y"] {
            let mono = parse(&v, m).terms().keys().next().unwrap().clone();
            assert!(basis.contains(&mono), "{m} missing from {basis:?}");
        }
        // y^2 alone: y^4 never appears and y^2 cannot be produced otherwise
        let y2 = parse(&v, "y^2").terms().keys().next().unwrap().clone();
        assert!(!basis.contains(&y2));
    }

    #[test]
    fn margin_gram_matches_expression() {
        let v = VarSet::new(&["x"]).unwrap();
        let mut prog = SosProgram::new(&v);
        let (mu, mue) = prog.new_scalar("mu", false);
        prog.add_sos_with_margin("p", PolyExpr::constant(parse(&v, "x^2 + 1")), mu);
        prog.add_nonneg("cap", PolyExpr::constant(Polynomial::constant(&v, 1.0)).sub(&mue).unwrap())
            .unwrap();
        prog.maximize(&mue).unwrap();
        let sol = solve_prog(&prog).unwrap();
        // (1 + x^2) - mu (1 + x^2) is SOS iff mu <= 1
        assert!((sol.value(mu) - 1.0).abs() < 1e-6);
        assert!(sol.residuals[0] < 1e-8);
    }

    #[test]
    fn compile_is_deterministic() {
        let v = xy();
        let build = || {
            let mut prog = SosProgram::new(&v);
            let s = prog.new_sos_poly("s", &monomial_basis(2, &[0, 1], 1));
            let e = s
                .mul_poly(&parse(&v, "x^2 + y^2 - 1"))
                .unwrap()
                .add_poly(&parse(&v, "x^4 + y^4 + 3"))
                .unwrap();
            prog.add_sos("c", e, None);
            prog.compile().unwrap().problem.to_text()
        };
        assert_eq!(build(), build());
    }
}
