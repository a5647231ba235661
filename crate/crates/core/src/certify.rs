//! Independent verification of certificates.
//!
//! The algebraic check rebuilds every constraint polynomial directly from the
//! problem and the certificate's `V`, `k`, `γ` and multipliers (plain
//! polynomial arithmetic, no solver data), then checks the stored Gram
//! matrices against them. The sampling check draws points from the funnel
//! and evaluates the containment conditions pointwise.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::polynomial::{PolyError, Polynomial};
use crate::problem::{DeltaSet, ProblemSpec, TargetKind};
use crate::sdp::min_eig;
use crate::soscompile::{residual, SosError};
use crate::synthesis::{family, has_eps_offset, Certificate};

/// Default acceptance tolerance on Gram coefficient residuals.
pub const TOL_RESIDUAL: f64 = 1e-6;
/// Default acceptance tolerance on negative Gram eigenvalues.
pub const TOL_PSD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifyError {
    #[error("malformed certificate: {0}")]
    Malformed(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Sos(#[from] SosError),
    #[error("level-set sampler failed: acceptance rate {rate:e} ({detail})")]
    SamplerFailed { rate: f64, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Certified,
    ToleranceFail,
    SampleFail,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Certified => "certified",
            Verdict::ToleranceFail => "tolerance-fail",
            Verdict::SampleFail => "sample-fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgebraicCheck {
    pub name: String,
    pub residual: f64,
    pub min_eig: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainmentCheck {
    pub name: String,
    pub samples: usize,
    pub violations: usize,
    /// Largest sampled value of the quantity required to be `<= 0`.
    pub worst: f64,
    pub acceptance_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub algebraic: Vec<AlgebraicCheck>,
    pub containments: Vec<ContainmentCheck>,
    pub tol_residual: f64,
    pub tol_psd: f64,
}

impl VerificationReport {
    pub fn algebraic_ok(&self) -> bool {
        self.algebraic
            .iter()
            .all(|c| c.residual <= self.tol_residual && c.min_eig >= -self.tol_psd)
    }

    pub fn sampling_ok(&self) -> bool {
        self.containments.iter().all(|c| c.violations == 0)
    }

    pub fn verdict(&self) -> Verdict {
        if !self.algebraic_ok() {
            Verdict::ToleranceFail
        } else if !self.sampling_ok() {
            Verdict::SampleFail
        } else {
            Verdict::Certified
        }
    }

    pub fn worst_residual(&self) -> f64 {
        self.algebraic.iter().map(|c| c.residual).fold(0.0, f64::max)
    }

    pub fn worst_min_eig(&self) -> f64 {
        self.algebraic
            .iter()
            .map(|c| c.min_eig)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn merge(mut self, other: VerificationReport) -> VerificationReport {
        self.algebraic.extend(other.algebraic);
        self.containments.extend(other.containments);
        self
    }

    /// Line-oriented report: `verdict`, then one line per check.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "verdict {}", self.verdict().as_str());
        let _ = writeln!(s, "tolerances residual {:e} psd {:e}", self.tol_residual, self.tol_psd);
        for c in &self.algebraic {
            let _ = writeln!(s, "gram {} residual {:e} min_eig {:e}", c.name, c.residual, c.min_eig);
        }
        for c in &self.containments {
            let _ = writeln!(
                s,
                "containment {} samples {} violations {} worst {:e} acceptance {:.6}",
                c.name, c.samples, c.violations, c.worst, c.acceptance_rate
            );
        }
        s
    }
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, CertifyError> {
    Err(CertifyError::Malformed(msg.into()))
}

fn sum_of_squares(spec: &ProblemSpec, idx: impl Iterator<Item = usize>) -> Polynomial {
    let mut acc = Polynomial::zero(&spec.vars);
    for i in idx {
        let v = Polynomial::var_at(&spec.vars, i);
        acc = acc.add(&v.mul(&v).expect("same vars")).expect("same vars");
    }
    acc
}

/// `∂V/∂t + ∇V·(f + g k)`.
pub fn v_dot(spec: &ProblemSpec, v: &Polynomial, k: &[Polynomial]) -> Result<Polynomial, PolyError> {
    let mut acc = v.diff_at(spec.t_index());
    for i in 0..spec.n {
        let mut rhs = spec.f[i].clone();
        for (j, kj) in k.iter().enumerate() {
            rhs = rhs.add(&spec.g[i][j].mul(kj)?)?;
        }
        acc = acc.add(&v.diff_at(spec.x_index(i)).mul(&rhs)?)?;
    }
    Ok(acc)
}

/// Rebuilds every expression the certificate claims to be SOS.
pub fn constraint_polynomials(
    cert: &Certificate,
    spec: &ProblemSpec,
) -> Result<Vec<(String, Polynomial)>, CertifyError> {
    if cert.k.len() != spec.m {
        return malformed(format!("k has {} entries, expected {}", cert.k.len(), spec.m));
    }
    let mult = |name: &str| -> Result<&Polynomial, CertifyError> {
        cert.multipliers
            .get(name)
            .ok_or_else(|| CertifyError::Malformed(format!("missing multiplier {name}")))
    };
    let vars = &spec.vars;
    let robust = cert.robust;
    let timed = !spec.is_degenerate_horizon();
    let h = spec.horizon_poly();
    let r2 = spec.uncertainty.r_bound.powi(2);
    let level = if robust {
        spec.uncertainty.q.scale(r2).add_constant(cert.gamma)
    } else {
        Polynomial::constant(vars, cert.gamma)
    };
    let vml = cert.v.sub(&level)?;
    let ww = sum_of_squares(spec, (0..spec.nw).map(|j| spec.w_index(j)));
    let w_bar = spec.uncertainty.w_bar;
    let w_gap = ww.add_constant(-w_bar * w_bar);
    let uncertain = robust && (spec.nw > 0 || spec.nd > 0);
    let k_uncertain = uncertain
        && ((spec.k_dependence.w && spec.nw > 0) || (spec.k_dependence.delta && spec.nd > 0));
    let delta_gaps: Vec<(String, Polynomial)> = if robust && spec.nd > 0 {
        match &spec.uncertainty.delta {
            DeltaSet::Ball(r) => vec![(
                String::new(),
                sum_of_squares(spec, (0..spec.nd).map(|j| spec.d_index(j))).add_constant(-r * r),
            )],
            DeltaSet::Box(b) => b
                .iter()
                .enumerate()
                .map(|(j, r)| {
                    (
                        format!("[{j}]"),
                        sum_of_squares(spec, std::iter::once(spec.d_index(j))).add_constant(-r * r),
                    )
                })
                .collect(),
        }
    } else {
        Vec::new()
    };

    let mut out = Vec::new();

    let mut diss = v_dot(spec, &cert.v, &cert.k)?.neg();
    if robust && spec.nw > 0 {
        diss = diss.add(&ww)?;
    }
    diss = diss.add(&mult("s3")?.mul(&vml)?)?;
    if timed {
        diss = diss.sub(&mult("s2")?.mul(&h)?)?;
    }
    if robust && spec.nw > 0 && w_bar > 0.0 {
        diss = diss.add(&mult("s8")?.mul(&w_gap)?)?;
    }
    for (suffix, gap) in &delta_gaps {
        diss = diss.add(&mult(&format!("s9{suffix}"))?.mul(gap)?)?;
    }
    out.push(("dissipation".to_string(), diss));

    for (j, tg) in spec.targets.iter().enumerate() {
        match tg.kind {
            TargetKind::Tube => {
                let mut e = vml.sub(&mult(&format!("s4[{j}]"))?.mul(&tg.r)?)?;
                if timed {
                    e = e.sub(&mult(&format!("s7[{j}]"))?.mul(&h)?)?;
                }
                out.push((format!("tube[{j}]"), e));
            }
            TargetKind::Terminal => {
                let vt = cert.v.fix(spec.t_index(), spec.t_final);
                let end = cert.gamma + if robust { r2 * spec.eval_t(&spec.uncertainty.q, spec.t_final) } else { 0.0 };
                let e = vt
                    .add_constant(-end)
                    .sub(&mult(&format!("sa[{j}]"))?.mul(&tg.r)?)?;
                out.push((format!("terminal[{j}]"), e));
            }
        }
    }

    for i in 0..spec.np() {
        let mut e = spec.input_b[i].clone();
        for j in 0..spec.m {
            e = e.sub(&spec.input_a[i][j].mul(&cert.k[j])?)?;
        }
        e = e.add(&mult(&format!("s5[{i}]"))?.mul(&vml)?)?;
        if timed {
            e = e.sub(&mult(&format!("s6[{i}]"))?.mul(&h)?)?;
        }
        if k_uncertain {
            if spec.nw > 0 && w_bar > 0.0 {
                e = e.add(&mult(&format!("s11[{i}]"))?.mul(&w_gap)?)?;
            }
            for (suffix, gap) in &delta_gaps {
                let name = if suffix.is_empty() {
                    format!("s10[{i}]")
                } else {
                    format!("s10[{i}]{suffix}")
                };
                e = e.add(&mult(&name)?.mul(gap)?)?;
            }
        }
        out.push((format!("input[{i}]"), e));
    }

    for (name, p) in &cert.multipliers {
        let fam = family(name);
        let known = matches!(
            fam,
            "s2" | "s3" | "s4" | "s5" | "s6" | "s7" | "s8" | "s9" | "s10" | "s11" | "sa"
        );
        if !known {
            return malformed(format!("unknown multiplier {name}"));
        }
        let e = if has_eps_offset(name) {
            p.add_constant(-spec.eps)
        } else {
            p.clone()
        };
        out.push((format!("mult:{name}"), e));
    }
    Ok(out)
}

/// Residual and PSD check of every stored Gram matrix against the rebuilt
/// constraint polynomials.
pub fn check_algebraic(
    cert: &Certificate,
    spec: &ProblemSpec,
    tol_residual: f64,
    tol_psd: f64,
) -> Result<VerificationReport, CertifyError> {
    let polys = constraint_polynomials(cert, spec)?;
    let mut algebraic = Vec::with_capacity(polys.len());
    for (name, p) in polys {
        let rec = cert
            .gram(&name)
            .ok_or_else(|| CertifyError::Malformed(format!("no Gram matrix for {name}")))?;
        if rec.q.nrows() != rec.basis.len() || rec.q.ncols() != rec.basis.len() {
            return malformed(format!("Gram matrix for {name} does not match its basis"));
        }
        let res = residual(&p, &rec.q, &rec.basis)?;
        let eig = if rec.q.nrows() == 0 {
            0.0
        } else {
            min_eig(&rec.q).map_err(|e| CertifyError::Malformed(format!("{name}: {e}")))?
        };
        algebraic.push(AlgebraicCheck {
            name,
            residual: res,
            min_eig: eig,
        });
    }
    Ok(VerificationReport {
        algebraic,
        containments: Vec::new(),
        tol_residual,
        tol_psd,
    })
}

/// Sampling parameters.
#[derive(Debug, Clone)]
pub struct SamplingOptions {
    pub samples: usize,
    pub seed: u64,
    /// State box to sample from; derived from the level set when `None`.
    pub bbox: Option<Vec<(f64, f64)>>,
    /// Allowed positive slack, scaled by `max(1, Σ|c_i m_i(ξ)|)`.
    pub margin: f64,
    /// Minimum acceptance rate before the sampler gives up.
    pub min_acceptance: f64,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions {
            samples: 10_000,
            seed: 0,
            bbox: None,
            margin: 1e-7,
            min_acceptance: 1e-4,
        }
    }
}

/// Deterministic per-item random stream.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Rejection sampler over the funnel `{(t, x) : V(t,x) <= γ + R²q(t)}`.
#[derive(Debug, Clone)]
pub struct FunnelSampler<'a> {
    pub spec: &'a ProblemSpec,
    pub cert: &'a Certificate,
    pub bbox: Vec<(f64, f64)>,
    pub max_attempts: usize,
}

impl<'a> FunnelSampler<'a> {
    pub fn new(
        spec: &'a ProblemSpec,
        cert: &'a Certificate,
        bbox: Option<Vec<(f64, f64)>>,
        min_acceptance: f64,
    ) -> Result<FunnelSampler<'a>, CertifyError> {
        let bbox = match bbox {
            Some(b) => {
                if b.len() != spec.n {
                    return malformed(format!("box has {} ranges, expected {}", b.len(), spec.n));
                }
                b
            }
            None => funnel_box(spec, cert)?,
        };
        let max_attempts = ((10.0 / min_acceptance).ceil() as usize).max(100);
        Ok(FunnelSampler {
            spec,
            cert,
            bbox,
            max_attempts,
        })
    }

    fn level(&self, t: f64) -> f64 {
        if self.cert.robust {
            self.spec.level_at(self.cert.gamma, t)
        } else {
            self.cert.gamma
        }
    }

    pub fn contains(&self, t: f64, x: &[f64]) -> bool {
        let pt = self.spec.point(t, x, &[], &[]);
        self.cert.v.eval_unchecked(&pt) <= self.level(t)
    }

    /// Draws a state from the slice at time `t`; returns the state and the
    /// number of attempts used, or `None` after `max_attempts` rejections.
    pub fn sample_at(&self, rng: &mut ChaCha8Rng, t: f64) -> (Option<Vec<f64>>, usize) {
        for attempt in 1..=self.max_attempts {
            let x: Vec<f64> = self
                .bbox
                .iter()
                .map(|(lo, hi)| if hi > lo { rng.random_range(*lo..*hi) } else { *lo })
                .collect();
            if self.contains(t, &x) {
                return (Some(x), attempt);
            }
        }
        (None, self.max_attempts)
    }

    pub fn random_time(&self, rng: &mut ChaCha8Rng) -> f64 {
        let (t0, t1) = (self.spec.t0, self.spec.t_final);
        if t1 > t0 {
            rng.random_range(t0..=t1)
        } else {
            t0
        }
    }
}

/// Uniform sample from the disturbance set (zero when unbounded).
pub fn sample_w(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if spec.nw == 0 || spec.uncertainty.w_bar <= 0.0 {
        return vec![0.0; spec.nw];
    }
    sample_ball(rng, spec.nw, spec.uncertainty.w_bar)
}

/// Uniform sample from the parametric uncertainty set.
pub fn sample_delta(spec: &ProblemSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if spec.nd == 0 {
        return Vec::new();
    }
    match &spec.uncertainty.delta {
        DeltaSet::Ball(r) => sample_ball(rng, spec.nd, *r),
        DeltaSet::Box(b) => b
            .iter()
            .map(|r| if *r > 0.0 { rng.random_range(-r..=*r) } else { 0.0 })
            .collect(),
    }
}

/// Uniform point in the `dim`-ball of radius `r`.
pub fn sample_ball(rng: &mut ChaCha8Rng, dim: usize, r: f64) -> Vec<f64> {
    if r <= 0.0 {
        return vec![0.0; dim];
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let n2: f64 = v.iter().map(|a| a * a).sum();
        if n2 <= 1.0 {
            return v.into_iter().map(|a| a * r).collect();
        }
    }
}

/// Box around the funnel, found by marching rays from `x_eq` (and from the
/// best interior point found) at several times, padded by 25%.
pub fn funnel_box(spec: &ProblemSpec, cert: &Certificate) -> Result<Vec<(f64, f64)>, CertifyError> {
    let n = spec.n;
    let times: Vec<f64> = if spec.is_degenerate_horizon() {
        vec![spec.t0]
    } else {
        (0..=10)
            .map(|i| spec.t0 + (spec.t_final - spec.t0) * i as f64 / 10.0)
            .collect()
    };
    let mut rng = substream(0x5eed_b0c5, 0);
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut d = vec![0.0; n];
            d[i] = s;
            dirs.push(d);
        }
    }
    for _ in 0..(32 * n) {
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = d.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-3 {
            dirs.push(d.into_iter().map(|a| a / norm).collect());
        }
    }
    let level = |t: f64| {
        if cert.robust {
            spec.level_at(cert.gamma, t)
        } else {
            cert.gamma
        }
    };
    let value = |t: f64, x: &[f64]| cert.v.eval_unchecked(&spec.point(t, x, &[], &[]));
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let mut found = false;
    for &t in &times {
        // start from x_eq, or the lowest point on a coarse search when it is outside
        let mut center = spec.x_eq.clone();
        if value(t, &center) > level(t) {
            let mut best = value(t, &center);
            for d in &dirs {
                let mut r = 1e-3;
                while r < 1e4 {
                    let x: Vec<f64> = center.iter().zip(d).map(|(c, di)| c + r * di).collect();
                    let v = value(t, &x);
                    if v < best {
                        best = v;
                        center = x;
                    }
                    r *= 1.5;
                }
            }
            if best > level(t) {
                continue;
            }
        }
        for d in &dirs {
            let mut r = 0.0;
            let mut last_inside = 0.0;
            let mut step = 1e-4;
            while r < 1e4 {
                r += step;
                step *= 1.15;
                let x: Vec<f64> = center.iter().zip(d).map(|(c, di)| c + r * di).collect();
                if value(t, &x) <= level(t) {
                    last_inside = r;
                }
            }
            for i in 0..n {
                let p = center[i] + last_inside * d[i];
                lo[i] = lo[i].min(p);
                hi[i] = hi[i].max(p);
            }
            found = true;
        }
    }
    if !found {
        return Err(CertifyError::SamplerFailed {
            rate: 0.0,
            detail: "no interior point of the level set found".into(),
        });
    }
    Ok((0..n)
        .map(|i| {
            let w = (hi[i] - lo[i]).max(1e-6);
            (lo[i] - 0.25 * w, hi[i] + 0.25 * w)
        })
        .collect())
}

fn abs_scale(p: &Polynomial, pt: &[f64]) -> f64 {
    p.terms().iter().map(|(m, c)| (c * m.eval(pt)).abs()).sum()
}

/// A pointwise condition `g(ξ) <= 0` checked on funnel samples.
struct Condition {
    name: String,
    g: Polynomial,
    terminal: bool,
}

/// Samples every containment condition and counts violations.
pub fn check_containments(
    cert: &Certificate,
    spec: &ProblemSpec,
    opts: &SamplingOptions,
) -> Result<VerificationReport, CertifyError> {
    let sampler = FunnelSampler::new(spec, cert, opts.bbox.clone(), opts.min_acceptance)?;
    let mut conds = Vec::new();
    let mut diss = v_dot(spec, &cert.v, &cert.k)?;
    if cert.robust {
        diss = diss.sub(&sum_of_squares(spec, (0..spec.nw).map(|j| spec.w_index(j))))?;
    }
    conds.push(Condition {
        name: "dissipation".into(),
        g: diss,
        terminal: false,
    });
    for (j, tg) in spec.targets.iter().enumerate() {
        conds.push(Condition {
            name: format!("{}[{j}]", tg.kind.as_str()),
            g: tg.r.clone(),
            terminal: tg.kind == TargetKind::Terminal,
        });
    }
    for i in 0..spec.np() {
        let mut g = spec.input_b[i].neg();
        for j in 0..spec.m {
            g = g.add(&spec.input_a[i][j].mul(&cert.k[j])?)?;
        }
        conds.push(Condition {
            name: format!("input[{i}]"),
            g,
            terminal: false,
        });
    }

    let mut containments = Vec::with_capacity(conds.len());
    for (ci, cond) in conds.iter().enumerate() {
        containments.push(sample_condition(spec, &sampler, cond, ci, opts)?);
    }
    Ok(VerificationReport {
        algebraic: Vec::new(),
        containments,
        tol_residual: 0.0,
        tol_psd: 0.0,
    })
}

fn sample_condition(
    spec: &ProblemSpec,
    sampler: &FunnelSampler<'_>,
    cond: &Condition,
    ci: usize,
    opts: &SamplingOptions,
) -> Result<ContainmentCheck, CertifyError> {
    // (value, violated, attempts) per sample; merged in index order
    let results: Vec<Option<(f64, bool, usize)>> = (0..opts.samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = substream(opts.seed, ((ci as u64) << 40) | s as u64);
            let t = if cond.terminal {
                spec.t_final
            } else {
                sampler.random_time(&mut rng)
            };
            let (x, attempts) = sampler.sample_at(&mut rng, t);
            let x = x?;
            let w = sample_w(spec, &mut rng);
            let d = sample_delta(spec, &mut rng);
            let pt = spec.point(t, &x, &w, &d);
            let val = cond.g.eval_unchecked(&pt);
            let allowed = opts.margin * abs_scale(&cond.g, &pt).max(1.0);
            Some((val, val > allowed, attempts))
        })
        .collect();
    let mut attempts = 0usize;
    let mut violations = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for r in &results {
        match r {
            Some((v, bad, a)) => {
                attempts += a;
                violations += *bad as usize;
                worst = worst.max(*v);
            }
            None => {
                return Err(CertifyError::SamplerFailed {
                    rate: 0.0,
                    detail: format!("{}: no funnel point within {} draws", cond.name, sampler.max_attempts),
                })
            }
        }
    }
    let rate = if attempts == 0 {
        1.0
    } else {
        opts.samples as f64 / attempts as f64
    };
    if opts.samples > 0 && rate < opts.min_acceptance {
        return Err(CertifyError::SamplerFailed {
            rate,
            detail: cond.name.clone(),
        });
    }
    Ok(ContainmentCheck {
        name: cond.name.clone(),
        samples: opts.samples,
        violations,
        worst,
        acceptance_rate: rate,
    })
}

/// Algebraic and sampling checks together.
pub fn certify(
    cert: &Certificate,
    spec: &ProblemSpec,
    tol_residual: f64,
    tol_psd: f64,
    sampling: &SamplingOptions,
) -> Result<VerificationReport, CertifyError> {
    let alg = check_algebraic(cert, spec, tol_residual, tol_psd)?;
    let samp = check_containments(cert, spec, sampling)?;
    Ok(alg.merge(samp))
}
