//! Fixtures shared by the benchmarks: fixed-size problems that exercise
//! each pipeline stage on its own.

use funnel_core::conic::ConicProblem;
use funnel_core::polynomial::{monomial_basis, Polynomial, VarSet};
use funnel_core::soscompile::{PolyExpr, SosProgram};

/// Dense polynomial in `n` variables with every monomial up to `degree`.
pub fn dense_poly(n: usize, degree: u32) -> Polynomial {
    let names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    let vars = VarSet::new(&names).expect("distinct names");
    let idx: Vec<usize> = (0..n).collect();
    let basis = monomial_basis(n, &idx, degree);
    Polynomial::from_terms(
        &vars,
        basis
            .into_iter()
            .enumerate()
            .map(|(i, m)| (m, 1.0 + (i % 7) as f64 * 0.25)),
    )
}

/// Lower bound of a quartic in `n` variables: maximize `c` such that
/// `p - c` is SOS.
pub fn quartic_bound_program(n: usize) -> SosProgram {
    let p = dense_poly(n, 2);
    let p = p.mul(&p).expect("same vars").add_constant(1.0);
    let mut prog = SosProgram::new(p.vars());
    let (_, c) = prog.new_scalar("c", false);
    prog.add_sos("p", PolyExpr::constant(p).sub(&c).expect("same vars"), None);
    prog.maximize(&c).expect("scalar objective");
    prog
}

/// The compiled cone program of [`quartic_bound_program`].
pub fn quartic_bound_problem(n: usize) -> ConicProblem {
    quartic_bound_program(n).compile().expect("compiles").problem
}
