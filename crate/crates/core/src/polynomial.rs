//! Sparse multivariate polynomials with `f64` coefficients.
//!
//! Every polynomial carries the [`VarSet`] it is written over; binary
//! operations require both operands to share the same variable set. Terms are
//! kept in a map ordered by the global graded-lexicographic monomial order, so
//! two equal polynomials always have identical term maps.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative threshold below which coefficients are dropped after arithmetic.
pub const DROP_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("variable set mismatch: [{left}] vs [{right}]")]
    VarSetMismatch { left: String, right: String },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("point has {got} coordinates, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
}

/// Ordered list of distinct variable names. Exponent vectors index into it.
#[derive(Clone, Eq)]
pub struct VarSet(Arc<[String]>);

impl VarSet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self, PolyError> {
        let mut seen = std::collections::BTreeSet::new();
        for n in names {
            if !seen.insert(n.as_ref()) {
                return Err(PolyError::DuplicateVariable(n.as_ref().to_string()));
            }
        }
        Ok(Self(names.iter().map(|s| s.as_ref().to_string()).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn index_of(&self, name: &str) -> Result<usize, PolyError> {
        self.0
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| PolyError::UnknownVariable(name.to_string()))
    }

    pub(crate) fn describe(&self) -> String {
        self.0.join(", ")
    }
}

impl PartialEq for VarSet {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0 == other.0
    }
}

impl fmt::Debug for VarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VarSet[{}]", self.describe())
    }
}

/// Exponent vector aligned with a [`VarSet`].
///
/// Ordered graded-lexicographically: lower total degree first, ties broken by
/// comparing exponents of the earliest variable first.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn one(nvars: usize) -> Self {
        Self(vec![0; nvars])
    }

    pub fn from_exponents(exps: Vec<u32>) -> Self {
        Self(exps)
    }

    pub fn var(nvars: usize, idx: usize) -> Self {
        let mut e = vec![0; nvars];
        e[idx] = 1;
        Self(e)
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_constant(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `self / other` when `other` divides `self`.
    pub fn div(&self, other: &Monomial) -> Option<Monomial> {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.checked_sub(*b))
            .collect::<Option<Vec<_>>>()
            .map(Monomial)
    }

    pub fn eval(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .filter(|(e, _)| **e > 0)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// All monomials of total degree `<= degree` in the variables `vars`
/// (indices into a set of `nvars` variables), in graded-lex order.
pub fn monomial_basis(nvars: usize, vars: &[usize], degree: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    let mut exps = vec![0u32; nvars];
    fn rec(vars: &[usize], left: u32, exps: &mut Vec<u32>, out: &mut Vec<Monomial>) {
        match vars.split_first() {
            None => out.push(Monomial(exps.clone())),
            Some((&v, rest)) => {
                for e in 0..=left {
                    exps[v] = e;
                    rec(rest, left - e, exps, out);
                }
                exps[v] = 0;
            }
        }
    }
    rec(vars, degree, &mut exps, &mut out);
    out.sort();
    out.dedup();
    out
}

/// Sparse polynomial over a [`VarSet`].
#[derive(Clone, PartialEq)]
pub struct Polynomial {
    vars: VarSet,
    terms: BTreeMap<Monomial, f64>,
}

impl Polynomial {
    pub fn zero(vars: &VarSet) -> Self {
        Self {
            vars: vars.clone(),
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(vars: &VarSet, c: f64) -> Self {
        Self::from_terms(vars, [(Monomial::one(vars.len()), c)])
    }

    pub fn var(vars: &VarSet, name: &str) -> Result<Self, PolyError> {
        let idx = vars.index_of(name)?;
        Ok(Self::var_at(vars, idx))
    }

    pub fn var_at(vars: &VarSet, idx: usize) -> Self {
        Self::from_terms(vars, [(Monomial::var(vars.len(), idx), 1.0)])
    }

    pub fn monomial(vars: &VarSet, m: Monomial, c: f64) -> Self {
        Self::from_terms(vars, [(m, c)])
    }

    /// Builds a canonical polynomial, summing repeated monomials.
    pub fn from_terms<I: IntoIterator<Item = (Monomial, f64)>>(vars: &VarSet, terms: I) -> Self {
        let mut map = BTreeMap::new();
        for (m, c) in terms {
            debug_assert_eq!(m.len(), vars.len());
            *map.entry(m).or_insert(0.0) += c;
        }
        let mut p = Self {
            vars: vars.clone(),
            terms: map,
        };
        p.canonicalize();
        p
    }

    fn canonicalize(&mut self) {
        let max = self.terms.values().fold(0.0f64, |a, c| a.max(c.abs()));
        let cut = DROP_TOL * max;
        self.terms.retain(|_, c| *c != 0.0 && c.abs() >= cut);
    }

    pub fn vars(&self) -> &VarSet {
        &self.vars
    }

    pub fn terms(&self) -> &BTreeMap<Monomial, f64> {
        &self.terms
    }

    pub fn coeff(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn nterms(&self) -> usize {
        self.terms.len()
    }

    /// Total degree; `-1` for the zero polynomial.
    pub fn degree(&self) -> i32 {
        self.terms.keys().map(|m| m.degree() as i32).max().unwrap_or(-1)
    }

    /// Degree in the variable at `idx`; `-1` for the zero polynomial.
    pub fn degree_in(&self, idx: usize) -> i32 {
        self.terms.keys().map(|m| m.0[idx] as i32).max().unwrap_or(-1)
    }

    /// Indices of variables that occur with a positive exponent.
    pub fn support_vars(&self) -> Vec<usize> {
        (0..self.vars.len())
            .filter(|&i| self.terms.keys().any(|m| m.0[i] > 0))
            .collect()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    fn check_same(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.vars == other.vars {
            Ok(())
        } else {
            Err(PolyError::VarSetMismatch {
                left: self.vars.describe(),
                right: other.vars.describe(),
            })
        }
    }

    pub fn add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_same(other)?;
        let mut terms = self.terms.clone();
        for (m, c) in &other.terms {
            *terms.entry(m.clone()).or_insert(0.0) += c;
        }
        let mut p = Polynomial {
            vars: self.vars.clone(),
            terms,
        };
        p.canonicalize();
        Ok(p)
    }

    pub fn sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Polynomial {
        self.scale(-1.0)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut p = Polynomial {
            vars: self.vars.clone(),
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c * s)).collect(),
        };
        p.canonicalize();
        p
    }

    pub fn add_constant(&self, c: f64) -> Polynomial {
        self.add(&Polynomial::constant(&self.vars, c))
            .expect("same variable set")
    }

    pub fn mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_same(other)?;
        let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                *terms.entry(ma.mul(mb)).or_insert(0.0) += ca * cb;
            }
        }
        let mut p = Polynomial {
            vars: self.vars.clone(),
            terms,
        };
        p.canonicalize();
        Ok(p)
    }

    pub fn pow(&self, e: u32) -> Polynomial {
        let mut acc = Polynomial::constant(&self.vars, 1.0);
        for _ in 0..e {
            acc = acc.mul(self).expect("same variable set");
        }
        acc
    }

    /// Formal partial derivative with respect to variable `name`.
    pub fn diff(&self, name: &str) -> Result<Polynomial, PolyError> {
        let idx = self.vars.index_of(name)?;
        Ok(self.diff_at(idx))
    }

    pub fn diff_at(&self, idx: usize) -> Polynomial {
        let terms = self.terms.iter().filter(|(m, _)| m.0[idx] > 0).map(|(m, c)| {
            let mut e = m.0.clone();
            let k = e[idx];
            e[idx] -= 1;
            (Monomial(e), c * k as f64)
        });
        Polynomial::from_terms(&self.vars, terms)
    }

    /// Evaluates with Neumaier-compensated summation over the terms.
    pub fn eval(&self, point: &[f64]) -> Result<f64, PolyError> {
        if point.len() != self.vars.len() {
            return Err(PolyError::DimensionMismatch {
                expected: self.vars.len(),
                got: point.len(),
            });
        }
        Ok(self.eval_unchecked(point))
    }

    pub(crate) fn eval_unchecked(&self, point: &[f64]) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for (m, c) in &self.terms {
            let v = c * m.eval(point);
            let t = sum + v;
            if sum.abs() >= v.abs() {
                comp += (sum - t) + v;
            } else {
                comp += (v - t) + sum;
            }
            sum = t;
        }
        sum + comp
    }

    /// Replaces variable `name` by the polynomial `q` (same variable set).
    pub fn substitute(&self, name: &str, q: &Polynomial) -> Result<Polynomial, PolyError> {
        let idx = self.vars.index_of(name)?;
        self.substitute_at(idx, q)
    }

    pub fn substitute_at(&self, idx: usize, q: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_same(q)?;
        let mut powers: Vec<Polynomial> = vec![Polynomial::constant(&self.vars, 1.0)];
        let mut out: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (m, c) in &self.terms {
            let e = m.0[idx] as usize;
            while powers.len() <= e {
                let next = powers.last().unwrap().mul(q)?;
                powers.push(next);
            }
            let mut rest = m.0.clone();
            rest[idx] = 0;
            let rest = Monomial(rest);
            for (mq, cq) in &powers[e].terms {
                *out.entry(rest.mul(mq)).or_insert(0.0) += c * cq;
            }
        }
        let mut p = Polynomial {
            vars: self.vars.clone(),
            terms: out,
        };
        p.canonicalize();
        Ok(p)
    }

    /// Substitutes a numeric value for variable `idx`.
    pub fn fix(&self, idx: usize, value: f64) -> Polynomial {
        let terms = self.terms.iter().map(|(m, c)| {
            let mut e = m.0.clone();
            let k = e[idx];
            e[idx] = 0;
            (Monomial(e), c * value.powi(k as i32))
        });
        Polynomial::from_terms(&self.vars, terms)
    }

    /// Re-expresses the polynomial over `target`, matching variables by name.
    pub fn embed(&self, target: &VarSet) -> Result<Polynomial, PolyError> {
        let map: Vec<usize> = self
            .vars
            .names()
            .iter()
            .map(|n| target.index_of(n))
            .collect::<Result<_, _>>()?;
        let terms = self.terms.iter().map(|(m, c)| {
            let mut e = vec![0u32; target.len()];
            for (i, &k) in m.0.iter().enumerate() {
                e[map[i]] += k;
            }
            (Monomial(e), *c)
        });
        Ok(Polynomial::from_terms(target, terms))
    }

    /// Parses conventional infix syntax such as `2*x1^2*t - 0.5`.
    pub fn parse(vars: &VarSet, text: &str) -> Result<Polynomial, PolyError> {
        let mut p = Parser {
            src: text.as_bytes(),
            pos: 0,
            vars,
        };
        let out = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(out)
    }
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Polynomial({})", self)
    }
}

pub(crate) fn fmt_coeff(c: f64) -> String {
    let a = c.abs();
    if a != 0.0 && !(1e-4..1e15).contains(&a) {
        format!("{:e}", c)
    } else {
        format!("{}", c)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, (m, &c)) in self.terms.iter().rev().enumerate() {
            let (sign, mag) = if c < 0.0 { ("-", -c) } else { ("+", c) };
            if i == 0 {
                if sign == "-" {
                    write!(f, "-")?;
                }
            } else {
                write!(f, " {} ", sign)?;
            }
            let factors: Vec<String> = m
                .0
                .iter()
                .enumerate()
                .filter(|(_, &e)| e > 0)
                .map(|(j, &e)| {
                    let name = &self.vars.names()[j];
                    if e == 1 {
                        name.clone()
                    } else {
                        format!("{}^{}", name, e)
                    }
                })
                .collect();
            if factors.is_empty() {
                write!(f, "{}", fmt_coeff(mag))?;
            } else if mag == 1.0 {
                write!(f, "{}", factors.join("*"))?;
            } else {
                write!(f, "{}*{}", fmt_coeff(mag), factors.join("*"))?;
            }
        }
        Ok(())
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: &'a VarSet,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> PolyError {
        PolyError::Parse {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            acc = if c == b'+' { acc.add(&rhs)? } else { acc.sub(&rhs)? };
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Polynomial, PolyError> {
        let mut acc = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            if c == b'*' {
                acc = acc.mul(&rhs)?;
            } else {
                if rhs.degree() > 0 || rhs.is_zero() {
                    return Err(self.err("division only by a nonzero constant"));
                }
                let d = rhs.coeff(&Monomial::one(self.vars.len()));
                acc = acc.scale(1.0 / d);
            }
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                Ok(self.unary()?.neg())
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Polynomial, PolyError> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if start == self.pos {
                return Err(self.err("expected nonnegative integer exponent"));
            }
            let e: u32 = std::str::from_utf8(&self.src[start..self.pos])
                .unwrap()
                .parse()
                .map_err(|_| self.err("exponent out of range"))?;
            return Ok(base.pow(e));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Polynomial, PolyError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                let start = self.pos;
                while self.pos < self.src.len() {
                    let ch = self.src[self.pos];
                    let exp_sign = (ch == b'+' || ch == b'-')
                        && self.pos > start
                        && matches!(self.src[self.pos - 1], b'e' | b'E');
                    if ch.is_ascii_digit() || ch == b'.' || ch == b'e' || ch == b'E' || exp_sign {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let s = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                let v: f64 = s.parse().map_err(|_| PolyError::Parse {
                    pos: start,
                    msg: format!("bad number `{}`", s),
                })?;
                Ok(Polynomial::constant(self.vars, v))
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                Polynomial::var(self.vars, name)
            }
            _ => Err(self.err("expected number, variable or `(`")),
        }
    }
}

impl Serialize for Polynomial {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vs(names: &[&str]) -> VarSet {
        VarSet::new(names).unwrap()
    }

    fn p(v: &VarSet, s: &str) -> Polynomial {
        Polynomial::parse(v, s).unwrap()
    }

    #[test]
    fn add_cancels_and_identity() {
        let v = vs(&["x", "y"]);
        assert_eq!(p(&v, "x^2+1").add(&p(&v, "-x^2")).unwrap(), p(&v, "1"));
        let q = p(&v, "3*x*y - 2");
        assert_eq!(q.add(&Polynomial::zero(&v)).unwrap(), q);
        assert_eq!(
            p(&v, "2*x+3*y").add(&p(&v, "x-3*y")).unwrap(),
            p(&v, "3*x")
        );
    }

    #[test]
    fn mul_examples() {
        let v = vs(&["x", "y"]);
        assert_eq!(p(&v, "x+1").mul(&p(&v, "x-1")).unwrap(), p(&v, "x^2-1"));
        let q = p(&v, "x*y^3 - 7");
        assert_eq!(q.mul(&Polynomial::constant(&v, 1.0)).unwrap(), q);
        let sq = p(&v, "x+y").pow(2);
        let terms: Vec<_> = sq.terms().values().copied().collect();
        assert_eq!(sq.nterms(), 3);
        assert!(terms.contains(&2.0));
        assert_eq!(sq, p(&v, "x^2 + 2*x*y + y^2"));
    }

    #[test]
    fn diff_examples() {
        let v = vs(&["t", "x", "y"]);
        assert_eq!(p(&v, "x^2*y").diff("x").unwrap(), p(&v, "2*x*y"));
        assert!(p(&v, "5").diff("x").unwrap().is_zero());
        assert_eq!(p(&v, "t*x^3").diff("t").unwrap(), p(&v, "x^3"));
        assert!(matches!(
            p(&v, "x").diff("z"),
            Err(PolyError::UnknownVariable(_))
        ));
    }

    #[test]
    fn eval_examples() {
        let v = vs(&["x"]);
        assert!(p(&v, "x^2 - 0.04").eval(&[0.2]).unwrap().abs() < 1e-17);
        assert_eq!(Polynomial::zero(&v).eval(&[3.0]).unwrap(), 0.0);
        let v2 = vs(&["x1", "x2"]);
        assert_eq!(p(&v2, "x1^2 + 2*x2").eval(&[3.0, 4.0]).unwrap(), 17.0);
        assert!(matches!(
            p(&v2, "x1").eval(&[1.0]),
            Err(PolyError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn substitute_examples() {
        let v = vs(&["t", "x", "y"]);
        let h = p(&v, "(t - 0)*(4 - t)");
        let t_val = Polynomial::constant(&v, 4.0);
        assert!(h.substitute("t", &t_val).unwrap().is_zero());
        let q = p(&v, "x^2 + 7");
        assert_eq!(
            q.substitute("x", &Polynomial::zero(&v)).unwrap(),
            p(&v, "7")
        );
        assert_eq!(
            p(&v, "y^2").substitute("y", &p(&v, "x+1")).unwrap(),
            p(&v, "x^2 + 2*x + 1")
        );
    }

    #[test]
    fn basis_counts() {
        let b = monomial_basis(2, &[0, 1], 1);
        assert_eq!(b.len(), 3);
        assert!(b[0].is_constant());
        assert_eq!(monomial_basis(1, &[0], 2).len(), 3);
        assert_eq!(monomial_basis(3, &[0, 1, 2], 2).len(), 10);
        // graded-lex: degree never decreases along the list
        let b = monomial_basis(4, &[0, 1, 2, 3], 3);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(b.len(), 35);
    }

    #[test]
    fn zero_degree_is_minus_one() {
        let v = vs(&["x"]);
        assert_eq!(Polynomial::zero(&v).degree(), -1);
        assert_eq!(p(&v, "3").degree(), 0);
    }

    #[test]
    fn varset_mismatch_is_reported() {
        let a = p(&vs(&["x"]), "x");
        let b = p(&vs(&["y"]), "y");
        assert!(matches!(a.add(&b), Err(PolyError::VarSetMismatch { .. })));
        assert!(matches!(a.mul(&b), Err(PolyError::VarSetMismatch { .. })));
    }

    #[test]
    fn print_parse_round_trip() {
        let v = vs(&["t", "x1", "x2"]);
        let q = p(&v, "2*x1^2*t - 0.5 + 1e-7*x2 - x1 + 123456.789*t^3*x2");
        let s = q.to_string();
        assert_eq!(Polynomial::parse(&v, &s).unwrap(), q);
        assert_eq!(p(&v, "2*x1^2*t - 0.5").to_string(), "2*t*x1^2 - 0.5");
    }

    #[test]
    fn parse_errors() {
        let v = vs(&["x"]);
        assert!(Polynomial::parse(&v, "x +").is_err());
        assert!(Polynomial::parse(&v, "y").is_err());
        assert!(Polynomial::parse(&v, "x/x").is_err());
        assert_eq!(p(&v, "x/4"), p(&v, "0.25*x"));
    }

    #[test]
    fn small_coefficients_are_dropped() {
        let v = vs(&["x"]);
        let q = Polynomial::from_terms(
            &v,
            [(Monomial::one(1), 1.0), (Monomial::var(1, 0), 1e-16)],
        );
        assert_eq!(q.nterms(), 1);
    }

    #[test]
    fn embed_maps_by_name() {
        let small = vs(&["x"]);
        let big = vs(&["t", "x"]);
        let q = p(&small, "x^2 + 1").embed(&big).unwrap();
        assert_eq!(q, p(&big, "x^2 + 1"));
    }
}
