//! Properties of SOS compilation: Gram round trips, deterministic layouts
//! and sound basis pruning.

use std::collections::BTreeSet;

use funnel_core::polynomial::{monomial_basis, Monomial, Polynomial, VarSet};
use funnel_core::sdp::{ConicSolver, InteriorPoint, SolveStatus, SolverOptions};
use funnel_core::soscompile::{gram_polynomial, PolyExpr, SosProgram};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vars(n: usize) -> VarSet {
    let names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    VarSet::new(&names).unwrap()
}

/// Random `Q = L L'` with `L` of random rank, over a random subset of the
/// monomials of degree <= 2.
fn random_gram(rng: &mut ChaCha8Rng, nvars: usize) -> (Vec<Monomial>, DMatrix<f64>) {
    let idx: Vec<usize> = (0..nvars).collect();
    let full = monomial_basis(nvars, &idx, 2);
    let mut basis: Vec<Monomial> = full.into_iter().filter(|_| rng.random_bool(0.6)).collect();
    if basis.is_empty() {
        basis.push(Monomial::one(nvars));
    }
    let k = basis.len();
    let rank = rng.random_range(1..=k);
    let l = DMatrix::from_fn(k, rank, |_, _| rng.random_range(-1.0..1.0));
    (basis, &l * l.transpose())
}

#[test]
fn random_gram_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let nvars = 1 + case % 3;
        let v = vars(nvars);
        let (basis, q) = random_gram(&mut rng, nvars);
        let p = gram_polynomial(&v, &q, &basis).unwrap();
        let mut prog = SosProgram::new(&v);
        prog.add_sos("p", PolyExpr::constant(p.clone()), None);
        let compiled = prog.compile().unwrap();
        let mut sol = InteriorPoint.solve(&compiled.problem, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal, "case {case}: {p}");
        compiled.polish(&mut sol.x);
        let out = prog.extract(&compiled, &sol).unwrap();
        // the reconstruction is checked independently of the solver's own residual
        let back = gram_polynomial(&v, &out.constraint_grams[0], &out.constraint_bases[0]).unwrap();
        let diff = p.sub(&back).unwrap().max_abs_coeff();
        worst = worst.max(diff).max(out.residuals[0]);
        let min_eig = out.constraint_grams[0].clone().symmetric_eigenvalues().min();
        assert!(min_eig > -1e-7, "case {case}: min eig {min_eig}");
    }
    assert!(worst < 1e-8, "worst residual {worst}");
}

fn random_program(seed: u64) -> SosProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = vars(2);
    let mut prog = SosProgram::new(&v);
    let basis = monomial_basis(2, &[0, 1], 1);
    let s = prog.new_sos_poly("s", &basis);
    let (_, c) = prog.new_scalar("c", false);
    let x = Polynomial::var_at(&v, 0);
    let y = Polynomial::var_at(&v, 1);
    let shift = rng.random_range(0.5..2.0);
    let target = x.mul(&x).unwrap().add(&y.mul(&y).unwrap()).unwrap().add_constant(-shift);
    let e = PolyExpr::constant(x.pow(4).add(&y.pow(4)).unwrap())
        .sub(&s.mul_poly(&target).unwrap())
        .unwrap()
        .add(&c)
        .unwrap();
    prog.add_sos("e", e, None);
    prog.minimize(&c).unwrap();
    prog
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn compilation_is_byte_identical(seed in any::<u64>()) {
        let a = random_program(seed).compile().unwrap().problem.to_text();
        let b = random_program(seed).compile().unwrap().problem.to_text();
        prop_assert_eq!(a, b);
    }
}

/// Sparse polynomial with small integer coefficients.
fn sparse_poly(nvars: usize, max_deg: u32) -> impl Strategy<Value = Vec<(Vec<u32>, i32)>> {
    proptest::collection::vec(
        (proptest::collection::vec(0..=max_deg, nvars), -3i32..=3),
        1..5,
    )
    .prop_map(move |ts| {
        ts.into_iter()
            .filter(|(e, c)| *c != 0 && e.iter().sum::<u32>() <= max_deg)
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Every monomial of every square in `p = Σ q_i²` lies in half the
    /// Newton polytope of `p`, so pruning must keep it.
    #[test]
    fn pruning_keeps_monomials_of_every_decomposition(
        qs in proptest::collection::vec(sparse_poly(3, 3), 1..4),
    ) {
        let v = vars(3);
        let mut p = Polynomial::zero(&v);
        let mut needed = BTreeSet::new();
        for q in &qs {
            let q = Polynomial::from_terms(
                &v,
                q.iter().map(|(e, c)| (Monomial::from_exponents(e.clone()), *c as f64)),
            );
            needed.extend(q.terms().keys().cloned());
            p = p.add(&q.mul(&q).unwrap()).unwrap();
        }
        prop_assume!(!p.is_zero());
        let support: BTreeSet<Monomial> = p.terms().keys().cloned().collect();
        let basis: BTreeSet<Monomial> = SosProgram::default_basis(&support, 3).into_iter().collect();
        for m in &needed {
            prop_assert!(basis.contains(m), "{:?} pruned from basis of {}", m, p);
        }
    }
}
