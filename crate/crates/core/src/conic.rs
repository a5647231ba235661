//! Standard-form conic problems and their sparse text encoding.
//!
//! ```text
//! minimize    c'x
//! subject to  A x = b
//!             x = (x_free, x_nonneg, svec(X_1), ..., svec(X_k))
//!             x_nonneg >= 0,  X_j positive semidefinite
//! ```
//!
//! PSD blocks are stored in `svec` form: the upper triangle in row-major order
//! with off-diagonal entries scaled by `sqrt(2)`, so that `svec(X)'svec(Y) =
//! tr(XY)`.
//!
//! Text format (one record per line, `#` starts a comment):
//!
//! ```text
//! conic 1
//! vars <n>
//! eqs <p>
//! cones <free> <nonneg> [<psd size> ...]
//! c <col> <value>          (nonzero objective entries)
//! a <row> <col> <value>    (nonzero constraint entries)
//! b <row> <value>          (nonzero right-hand sides)
//! end
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConicFormatError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("inconsistent dimensions: {0}")]
    Dimensions(String),
}

/// Sizes of the cone blocks, in variable order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConeLayout {
    pub free: usize,
    pub nonneg: usize,
    pub psd: Vec<usize>,
}

impl ConeLayout {
    pub fn num_vars(&self) -> usize {
        self.free + self.nonneg + self.psd.iter().map(|k| svec_len(*k)).sum::<usize>()
    }

    /// Offset of PSD block `j` in the variable vector.
    pub fn psd_offset(&self, j: usize) -> usize {
        self.free + self.nonneg + self.psd[..j].iter().map(|k| svec_len(*k)).sum::<usize>()
    }

    /// Barrier degree of the cone (free variables excluded).
    pub fn degree(&self) -> usize {
        self.nonneg + self.psd.iter().sum::<usize>()
    }
}

/// Origin of a scalar decision variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VarSource {
    Free(String),
    Nonneg(String),
    Gram { block: usize, row: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConicProblem {
    pub c: Vec<f64>,
    /// Constraint matrix as `(row, col, value)` triplets, sorted and unique.
    pub a: Vec<(usize, usize, f64)>,
    pub b: Vec<f64>,
    pub cones: ConeLayout,
    pub var_map: Vec<VarSource>,
}

pub fn svec_len(k: usize) -> usize {
    k * (k + 1) / 2
}

/// `(i, j)` pairs with `i <= j` in svec order.
pub fn svec_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(svec_len(k));
    for i in 0..k {
        for j in i..k {
            v.push((i, j));
        }
    }
    v
}

pub fn svec_index(k: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // row r of the upper triangle holds k - r entries
    i * k - i * i.saturating_sub(1) / 2 + (j - i)
}

impl ConicProblem {
    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn num_eqs(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<(), ConicFormatError> {
        let n = self.cones.num_vars();
        if self.c.len() != n {
            return Err(ConicFormatError::Dimensions(format!(
                "objective has {} entries, cones need {}",
                self.c.len(),
                n
            )));
        }
        for &(r, c, v) in &self.a {
            if r >= self.b.len() || c >= n || !v.is_finite() {
                return Err(ConicFormatError::Dimensions(format!(
                    "entry ({}, {}) outside {}x{} or non-finite",
                    r,
                    c,
                    self.b.len(),
                    n
                )));
            }
        }
        if self.c.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(ConicFormatError::Dimensions("non-finite data".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "conic 1");
        let _ = writeln!(s, "vars {}", self.num_vars());
        let _ = writeln!(s, "eqs {}", self.num_eqs());
        let _ = write!(s, "cones {} {}", self.cones.free, self.cones.nonneg);
        for k in &self.cones.psd {
            let _ = write!(s, " {}", k);
        }
        s.push('\n');
        for (j, v) in self.c.iter().enumerate() {
            if *v != 0.0 {
                let _ = writeln!(s, "c {} {:e}", j, v);
            }
        }
        for &(r, c, v) in &self.a {
            let _ = writeln!(s, "a {} {} {:e}", r, c, v);
        }
        for (i, v) in self.b.iter().enumerate() {
            if *v != 0.0 {
                let _ = writeln!(s, "b {} {:e}", i, v);
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<ConicProblem, ConicFormatError> {
        let mut n = None;
        let mut p = None;
        let mut cones = None;
        let mut cp = ConicProblem::default();
        let mut ended = false;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| ConicFormatError::Syntax {
                line: ln + 1,
                msg: msg.to_string(),
            };
            let toks: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<usize, ConicFormatError> {
                toks.get(i)
                    .ok_or_else(|| err("missing field"))?
                    .parse()
                    .map_err(|_| err("bad integer"))
            };
            let val = |i: usize| -> Result<f64, ConicFormatError> {
                toks.get(i)
                    .ok_or_else(|| err("missing field"))?
                    .parse()
                    .map_err(|_| err("bad number"))
            };
            match toks[0] {
                "conic" => {
                    if num(1)? != 1 {
                        return Err(err("unsupported version"));
                    }
                }
                "vars" => {
                    let v = num(1)?;
                    n = Some(v);
                    cp.c = vec![0.0; v];
                }
                "eqs" => {
                    let v = num(1)?;
                    p = Some(v);
                    cp.b = vec![0.0; v];
                }
                "cones" => {
                    let mut layout = ConeLayout {
                        free: num(1)?,
                        nonneg: num(2)?,
                        psd: vec![],
                    };
                    for i in 3..toks.len() {
                        layout.psd.push(num(i)?);
                    }
                    cones = Some(layout);
                }
                "c" => {
                    let j = num(1)?;
                    *cp.c.get_mut(j).ok_or_else(|| err("objective index out of range"))? = val(2)?;
                }
                "a" => cp.a.push((num(1)?, num(2)?, val(3)?)),
                "b" => {
                    let i = num(1)?;
                    *cp.b.get_mut(i).ok_or_else(|| err("row out of range"))? = val(2)?;
                }
                "end" => {
                    ended = true;
                    break;
                }
                other => return Err(err(&format!("unknown record `{}`", other))),
            }
        }
        if !ended {
            return Err(ConicFormatError::Syntax {
                line: text.lines().count(),
                msg: "missing `end`".into(),
            });
        }
        let (Some(_), Some(_), Some(cones)) = (n, p, cones) else {
            return Err(ConicFormatError::Dimensions(
                "missing vars/eqs/cones header".into(),
            ));
        };
        cp.cones = cones;
        cp.a.sort_by_key(|x| (x.0, x.1));
        cp.var_map = default_var_map(&cp.cones);
        cp.validate()?;
        Ok(cp)
    }
}

pub fn default_var_map(cones: &ConeLayout) -> Vec<VarSource> {
    let mut m = Vec::with_capacity(cones.num_vars());
    for i in 0..cones.free {
        m.push(VarSource::Free(format!("f{}", i)));
    }
    for i in 0..cones.nonneg {
        m.push(VarSource::Nonneg(format!("l{}", i)));
    }
    for (b, &k) in cones.psd.iter().enumerate() {
        for (row, col) in svec_pairs(k) {
            m.push(VarSource::Gram { block: b, row, col });
        }
    }
    m
}
