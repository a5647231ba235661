//! Random cone programs with a known optimum, shared by several test targets.

use funnel_core::conic::{default_var_map, svec_len, ConeLayout, ConicProblem};
use funnel_core::sdp::{smat, svec};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_orthogonal(k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

/// Builds a problem with a strictly complementary primal-dual pair
/// `(x*, y*, z*)`; returns the problem and the optimal value `c'x*`.
pub fn complementary_problem(rng: &mut ChaCha8Rng) -> (ConicProblem, f64) {
    let free = rng.random_range(0..3);
    let nonneg = rng.random_range(0..4);
    let nblocks = rng.random_range(1..3);
    let psd: Vec<usize> = (0..nblocks).map(|_| rng.random_range(1..5)).collect();
    let cones = ConeLayout {
        free,
        nonneg,
        psd: psd.clone(),
    };
    let n = cones.num_vars();

    let mut xs = vec![0.0; n];
    let mut zs = vec![0.0; n];
    for x in xs.iter_mut().take(free) {
        *x = rng.random_range(-2.0..2.0);
    }
    for j in free..free + nonneg {
        if rng.random_bool(0.5) {
            xs[j] = rng.random_range(0.5..2.0);
        } else {
            zs[j] = rng.random_range(0.5..2.0);
        }
    }
    for (bi, &k) in psd.iter().enumerate() {
        let off = cones.psd_offset(bi);
        let q = random_orthogonal(k, rng);
        let rank = rng.random_range(0..=k);
        let mut dx = DMatrix::zeros(k, k);
        let mut dz = DMatrix::zeros(k, k);
        for i in 0..k {
            if i < rank {
                dx[(i, i)] = rng.random_range(0.5..2.0);
            } else {
                dz[(i, i)] = rng.random_range(0.5..2.0);
            }
        }
        let xm = &q * dx * q.transpose();
        let zm = &q * dz * q.transpose();
        xs[off..off + svec_len(k)].copy_from_slice(&svec(&xm));
        zs[off..off + svec_len(k)].copy_from_slice(&svec(&zm));
    }

    // keep the equality count below the free count + cone dimension
    let p = (free + rng.random_range(1..=n.max(2) / 2)).min(n);
    let mut a = Vec::new();
    let mut dense = DMatrix::zeros(p, n);
    for r in 0..p {
        for c in 0..n {
            let v: f64 = rng.random_range(-1.0..1.0);
            dense[(r, c)] = v;
            a.push((r, c, v));
        }
    }
    let ys: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..p)
        .map(|r| (0..n).map(|c| dense[(r, c)] * xs[c]).sum())
        .collect();
    let c: Vec<f64> = (0..n)
        .map(|j| (0..p).map(|r| dense[(r, j)] * ys[r]).sum::<f64>() + zs[j])
        .collect();
    let opt: f64 = c.iter().zip(&xs).map(|(a, b)| a * b).sum();
    let var_map = default_var_map(&cones);
    (
        ConicProblem {
            c,
            a,
            b,
            cones,
            var_map,
        },
        opt,
    )
}

pub fn in_cone(cp: &ConicProblem, x: &[f64], tol: f64) -> bool {
    let cones = &cp.cones;
    let s0 = cones.free;
    if x[s0..s0 + cones.nonneg].iter().any(|v| *v < -tol) {
        return false;
    }
    for (bi, &k) in cones.psd.iter().enumerate() {
        let off = cones.psd_offset(bi);
        let m = smat(&x[off..off + svec_len(k)], k);
        if m.symmetric_eigenvalues().min() < -tol {
            return false;
        }
    }
    true
}
