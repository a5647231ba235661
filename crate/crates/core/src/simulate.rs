//! Closed-loop simulation, Monte-Carlo validation and level-set export.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::certify::{sample_ball, substream, CertifyError, FunnelSampler};
use crate::polynomial::Polynomial;
use crate::problem::{DeltaSet, ProblemSpec, TargetKind};
use crate::synthesis::Certificate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulateError {
    #[error("invalid simulation input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sampler(#[from] CertifyError),
}

/// Tolerance for flagging tube exits and input saturation.
pub const FLAG_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
enum SignalKind {
    Zero,
    /// Value `k` holds on `[t0 + k/rate, t0 + (k+1)/rate)`.
    Piecewise { t0: f64, rate: f64, values: Vec<Vec<f64>> },
    /// Zero-order hold through user samples.
    Samples { times: Vec<f64>, values: Vec<Vec<f64>> },
}

/// Disturbance or parameter signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    dim: usize,
    kind: SignalKind,
    /// Amplitude envelope `e(t)` multiplying the raw value.
    envelope: Option<Polynomial>,
    /// Norm cap applied after the envelope.
    clip: Option<f64>,
}

impl Signal {
    pub fn zero(dim: usize) -> Signal {
        Signal {
            dim,
            kind: SignalKind::Zero,
            envelope: None,
            clip: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// User samples held constant until the next sample time.
    pub fn from_samples(times: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Signal, SimulateError> {
        if times.len() != values.len() || times.is_empty() {
            return Err(SimulateError::Invalid("signal needs matching, nonempty times and values".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SimulateError::Invalid("signal times must increase".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(SimulateError::Invalid("signal values differ in length".into()));
        }
        Ok(Signal {
            dim,
            kind: SignalKind::Samples { times, values },
            envelope: None,
            clip: None,
        })
    }

    /// `w(t) = sqrt(R² q'(t)) η(t)` with `η` piecewise constant, uniform in
    /// the unit ball, redrawn at `rate` Hz, then capped at `w̄` when that
    /// bound is active. Its energy never exceeds `R² q(t)`.
    pub fn energy_shaped(spec: &ProblemSpec, rate: f64, seed: u64) -> Signal {
        let u = &spec.uncertainty;
        if spec.nw == 0 || u.r_bound == 0.0 {
            return Signal::zero(spec.nw);
        }
        let dq = u.q.diff_at(spec.t_index()).scale(u.r_bound * u.r_bound);
        let mut rng = substream(seed, 0);
        let count = ((spec.t_final - spec.t0) * rate).ceil() as usize + 1;
        let values = (0..count).map(|_| sample_ball(&mut rng, spec.nw, 1.0)).collect();
        Signal {
            dim: spec.nw,
            kind: SignalKind::Piecewise {
                t0: spec.t0,
                rate,
                values,
            },
            envelope: Some(dq),
            clip: (u.w_bar > 0.0).then_some(u.w_bar),
        }
    }

    /// Piecewise-constant draws from the parameter set at `rate` Hz.
    pub fn random_delta(spec: &ProblemSpec, rate: f64, seed: u64) -> Signal {
        if spec.nd == 0 {
            return Signal::zero(0);
        }
        let mut rng = substream(seed, 1);
        let count = ((spec.t_final - spec.t0) * rate).ceil() as usize + 1;
        let values = (0..count)
            .map(|_| match &spec.uncertainty.delta {
                DeltaSet::Ball(r) => sample_ball(&mut rng, spec.nd, *r),
                DeltaSet::Box(b) => b
                    .iter()
                    .map(|r| if *r > 0.0 { rng.random_range(-r..=*r) } else { 0.0 })
                    .collect(),
            })
            .collect();
        Signal {
            dim: spec.nd,
            kind: SignalKind::Piecewise {
                t0: spec.t0,
                rate,
                values,
            },
            envelope: None,
            clip: None,
        }
    }

    fn raw(&self, t: f64, left: bool) -> Vec<f64> {
        match &self.kind {
            SignalKind::Zero => vec![0.0; self.dim],
            SignalKind::Piecewise { t0, rate, values } => {
                let s = (t - t0) * rate;
                let k = if left {
                    (s.ceil() as i64 - 1).max(0)
                } else {
                    s.floor().max(0.0) as i64
                };
                values[(k as usize).min(values.len() - 1)].clone()
            }
            SignalKind::Samples { times, values } => {
                let idx = if left {
                    times.partition_point(|&x| x < t)
                } else {
                    times.partition_point(|&x| x <= t)
                };
                if idx == 0 {
                    vec![0.0; self.dim]
                } else {
                    values[idx - 1].clone()
                }
            }
        }
    }

    fn shape(&self, t: f64, mut v: Vec<f64>) -> Vec<f64> {
        if let Some(env) = &self.envelope {
            let mut pt = vec![0.0; env.vars().len()];
            pt[0] = t;
            let e = env.eval_unchecked(&pt).max(0.0).sqrt();
            v.iter_mut().for_each(|a| *a *= e);
        }
        if let Some(cap) = self.clip {
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > cap {
                v.iter_mut().for_each(|a| *a *= cap / n);
            }
        }
        v
    }

    /// Right-continuous value.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.shape(t, self.raw(t, false))
    }

    /// Left limit.
    pub fn eval_left(&self, t: f64) -> Vec<f64> {
        self.shape(t, self.raw(t, true))
    }

    /// Cumulative `∫ w'w` on a grid (trapezoid on each cell, using the
    /// one-sided limits so that jumps at grid points are handled exactly).
    pub fn energy(&self, grid: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in grid.windows(2) {
            let a: f64 = self.eval(w[0]).iter().map(|v| v * v).sum();
            let b: f64 = self.eval_left(w[1]).iter().map(|v| v * v).sum();
            acc += 0.5 * (a + b) * (w[1] - w[0]);
            out.push(acc);
        }
        out
    }

    pub fn max_norm(&self, grid: &[f64]) -> f64 {
        grid.iter()
            .flat_map(|&t| [self.eval(t), self.eval_left(t)])
            .map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// One closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Feedback values actually applied (never clamped).
    pub inputs: Vec<Vec<f64>>,
    pub disturbances: Vec<Vec<f64>>,
    pub deltas: Vec<Vec<f64>>,
    /// Largest tube-constraint value at each grid time (`<= 0` inside).
    pub tube_margin: Vec<f64>,
    /// Largest terminal-constraint value at the final state.
    pub terminal_margin: Option<f64>,
    /// Number of grid points where the input left the polytope.
    pub saturation_events: usize,
    pub tube_exit_time: Option<f64>,
    pub blew_up: bool,
}

impl Trace {
    pub fn saturated(&self) -> bool {
        self.saturation_events > 0
    }

    /// Exited the tube or missed the terminal set.
    pub fn exited(&self) -> bool {
        self.blew_up
            || self.tube_exit_time.is_some()
            || self.terminal_margin.is_some_and(|m| m > FLAG_TOL)
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trace has at least one point")
    }

    /// Columns: `t x.. u.. w.. d.. tube_margin`.
    pub fn to_columns(&self) -> String {
        let mut s = String::new();
        for i in 0..self.times.len() {
            let _ = write!(s, "{:.9e}", self.times[i]);
            for v in self.states[i]
                .iter()
                .chain(&self.inputs[i])
                .chain(&self.disturbances[i])
                .chain(&self.deltas[i])
            {
                let _ = write!(s, " {v:.9e}");
            }
            let _ = writeln!(s, " {:.9e}", self.tube_margin[i]);
        }
        s
    }
}

fn eval_all(ps: &[Polynomial], pt: &[f64]) -> Vec<f64> {
    ps.iter().map(|p| p.eval_unchecked(pt)).collect()
}

/// Fixed-step RK4 of `ẋ = f + g k` from `x0` at `t0` to `T`; the step is
/// shrunk so that it divides the horizon.
pub fn integrate_law(
    spec: &ProblemSpec,
    k: &[Polynomial],
    x0: &[f64],
    dt: f64,
    w: &Signal,
    delta: &Signal,
) -> Result<Trace, SimulateError> {
    if x0.len() != spec.n || x0.iter().any(|v| !v.is_finite()) {
        return Err(SimulateError::Invalid(format!("x0 must be {} finite values", spec.n)));
    }
    if !(dt > 0.0) {
        return Err(SimulateError::Invalid("dt must be positive".into()));
    }
    if k.len() != spec.m || w.dim() != spec.nw || delta.dim() != spec.nd {
        return Err(SimulateError::Invalid("signal or feedback dimensions do not match".into()));
    }
    let horizon = spec.t_final - spec.t0;
    let steps = if horizon > 0.0 { (horizon / dt).ceil().max(1.0) as usize } else { 0 };
    let h = if steps > 0 { horizon / steps as f64 } else { 0.0 };

    let tubes: Vec<&Polynomial> = spec
        .targets
        .iter()
        .filter(|t| t.kind == TargetKind::Tube)
        .map(|t| &t.r)
        .collect();
    let terminals: Vec<&Polynomial> = spec
        .targets
        .iter()
        .filter(|t| t.kind == TargetKind::Terminal)
        .map(|t| &t.r)
        .collect();

    // stage evaluation uses right-continuous signals; stages at t+h use the left limit
    let field = |t: f64, x: &[f64], left: bool| -> Vec<f64> {
        let wv = if left { w.eval_left(t) } else { w.eval(t) };
        let dv = if left { delta.eval_left(t) } else { delta.eval(t) };
        let pt = spec.point(t, x, &wv, &dv);
        let u = eval_all(k, &pt);
        spec.vector_field(&pt, &u)
    };

    let mut trace = Trace {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        disturbances: Vec::with_capacity(steps + 1),
        deltas: Vec::with_capacity(steps + 1),
        tube_margin: Vec::with_capacity(steps + 1),
        terminal_margin: None,
        saturation_events: 0,
        tube_exit_time: None,
        blew_up: false,
    };
    let record = |trace: &mut Trace, t: f64, x: &[f64]| {
        let wv = w.eval(t);
        let dv = delta.eval(t);
        let pt = spec.point(t, x, &wv, &dv);
        let u = eval_all(k, &pt);
        let sat = (0..spec.np()).any(|i| {
            let mut lhs = 0.0;
            for (j, uj) in u.iter().enumerate() {
                lhs += spec.input_a[i][j].eval_unchecked(&pt) * uj;
            }
            lhs > spec.input_b[i].eval_unchecked(&pt) + FLAG_TOL
        });
        if sat {
            trace.saturation_events += 1;
        }
        let margin = tubes
            .iter()
            .map(|r| r.eval_unchecked(&pt))
            .fold(f64::NEG_INFINITY, f64::max);
        if margin > FLAG_TOL && trace.tube_exit_time.is_none() {
            trace.tube_exit_time = Some(t);
        }
        trace.times.push(t);
        trace.states.push(x.to_vec());
        trace.inputs.push(u);
        trace.disturbances.push(wv);
        trace.deltas.push(dv);
        trace.tube_margin.push(margin);
    };

    let mut x = x0.to_vec();
    let mut t = spec.t0;
    record(&mut trace, t, &x);
    for step in 0..steps {
        let k1 = field(t, &x, false);
        let x2: Vec<f64> = x.iter().zip(&k1).map(|(a, b)| a + 0.5 * h * b).collect();
        let k2 = field(t + 0.5 * h, &x2, false);
        let x3: Vec<f64> = x.iter().zip(&k2).map(|(a, b)| a + 0.5 * h * b).collect();
        let k3 = field(t + 0.5 * h, &x3, false);
        let x4: Vec<f64> = x.iter().zip(&k3).map(|(a, b)| a + h * b).collect();
        let k4 = field(t + h, &x4, true);
        for i in 0..spec.n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t = spec.t0 + (step + 1) as f64 * h;
        if x.iter().any(|v| !v.is_finite()) {
            trace.blew_up = true;
            break;
        }
        record(&mut trace, t, &x);
    }
    if !trace.blew_up && !terminals.is_empty() {
        let pt = spec.point(spec.t_final, &x, &[], &[]);
        trace.terminal_margin = Some(
            terminals
                .iter()
                .map(|r| r.eval_unchecked(&pt))
                .fold(f64::NEG_INFINITY, f64::max),
        );
    }
    Ok(trace)
}

/// Closed-loop run under a certificate's feedback law.
pub fn integrate(
    spec: &ProblemSpec,
    cert: &Certificate,
    x0: &[f64],
    dt: f64,
    w: &Signal,
    delta: &Signal,
) -> Result<Trace, SimulateError> {
    integrate_law(spec, &cert.k, x0, dt, w, delta)
}

/// How disturbances are generated in Monte-Carlo runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DisturbanceMode {
    None,
    /// Energy-shaped `w` and random `δ`, both redrawn at `rate` Hz.
    Random { rate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSummary {
    pub runs: usize,
    pub exits: usize,
    pub saturated_runs: usize,
    pub blowups: usize,
    /// Largest tube value seen over all runs and times.
    pub worst_tube_margin: f64,
    /// Largest terminal value over all runs.
    pub worst_terminal_margin: f64,
    pub initial_states: Vec<Vec<f64>>,
}

impl MonteCarloSummary {
    pub fn exit_fraction(&self) -> f64 {
        self.exits as f64 / self.runs.max(1) as f64
    }
}

/// Runs `n` traces from initial states sampled in the funnel at `t0`.
pub fn monte_carlo(
    spec: &ProblemSpec,
    cert: &Certificate,
    n: usize,
    seed: u64,
    dt: f64,
    mode: DisturbanceMode,
) -> Result<MonteCarloSummary, SimulateError> {
    if n == 0 {
        return Err(SimulateError::Invalid("at least one run is required".into()));
    }
    let sampler = FunnelSampler::new(spec, cert, None, 1e-4)?;
    let runs: Vec<Result<(Vec<f64>, Trace), SimulateError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i as u64);
            let (x0, _) = sampler.sample_at(&mut rng, spec.t0);
            let x0 = x0.ok_or_else(|| {
                SimulateError::Sampler(CertifyError::SamplerFailed {
                    rate: 0.0,
                    detail: "no initial state found in the funnel".into(),
                })
            })?;
            let (w, d) = match mode {
                DisturbanceMode::None => (Signal::zero(spec.nw), Signal::zero(spec.nd)),
                DisturbanceMode::Random { rate } => {
                    let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
                    (Signal::energy_shaped(spec, rate, s), Signal::random_delta(spec, rate, s))
                }
            };
            let tr = integrate(spec, cert, &x0, dt, &w, &d)?;
            Ok((x0, tr))
        })
        .collect();
    let mut summary = MonteCarloSummary {
        runs: n,
        exits: 0,
        saturated_runs: 0,
        blowups: 0,
        worst_tube_margin: f64::NEG_INFINITY,
        worst_terminal_margin: f64::NEG_INFINITY,
        initial_states: Vec::with_capacity(n),
    };
    for r in runs {
        let (x0, tr) = r?;
        summary.exits += tr.exited() as usize;
        summary.saturated_runs += tr.saturated() as usize;
        summary.blowups += tr.blew_up as usize;
        summary.worst_tube_margin = tr
            .tube_margin
            .iter()
            .copied()
            .fold(summary.worst_tube_margin, f64::max);
        if let Some(m) = tr.terminal_margin {
            summary.worst_terminal_margin = summary.worst_terminal_margin.max(m);
        }
        summary.initial_states.push(x0);
    }
    Ok(summary)
}

/// Grid over a slice of state space: `None` coordinates are free.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSpec {
    pub fixed: Vec<Option<f64>>,
    /// Range of each free coordinate, in order.
    pub ranges: Vec<(f64, f64)>,
    pub resolution: usize,
}

/// `V(t, ·)` sampled on a slice grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelGrid {
    pub t: f64,
    pub level: f64,
    /// State indices of the free coordinates.
    pub free: Vec<usize>,
    pub axes: Vec<Vec<f64>>,
    /// Values in row-major order over the axes (last axis fastest).
    pub values: Vec<f64>,
}

/// Samples the storage function on a slice at time `t`; the level is
/// `γ + R² q(t)` for robust certificates.
pub fn export_levelset(
    spec: &ProblemSpec,
    cert: &Certificate,
    t: f64,
    slice: &SliceSpec,
) -> Result<LevelGrid, SimulateError> {
    if slice.fixed.len() != spec.n {
        return Err(SimulateError::Invalid(format!("slice needs {} coordinates", spec.n)));
    }
    let free: Vec<usize> = (0..spec.n).filter(|&i| slice.fixed[i].is_none()).collect();
    if free.is_empty() || free.len() > 3 || free.len() != slice.ranges.len() {
        return Err(SimulateError::Invalid(
            "a slice has one to three free coordinates, each with a range".into(),
        ));
    }
    if slice.resolution < 2 {
        return Err(SimulateError::Invalid("resolution must be at least 2".into()));
    }
    let axes: Vec<Vec<f64>> = slice
        .ranges
        .iter()
        .map(|(lo, hi)| {
            (0..slice.resolution)
                .map(|i| lo + (hi - lo) * i as f64 / (slice.resolution - 1) as f64)
                .collect()
        })
        .collect();
    let total = slice.resolution.pow(free.len() as u32);
    let mut values = Vec::with_capacity(total);
    let mut x: Vec<f64> = slice.fixed.iter().map(|v| v.unwrap_or(0.0)).collect();
    for flat in 0..total {
        let mut rem = flat;
        for (a, &fi) in free.iter().enumerate().rev() {
            let _ = a;
            x[fi] = axes[free.iter().position(|&q| q == fi).unwrap()][rem % slice.resolution];
            rem /= slice.resolution;
        }
        let pt = spec.point(t, &x, &[], &[]);
        values.push(cert.v.eval_unchecked(&pt));
    }
    let level = if cert.robust {
        spec.level_at(cert.gamma, t)
    } else {
        cert.gamma
    };
    Ok(LevelGrid {
        t,
        level,
        free,
        axes,
        values,
    })
}

impl LevelGrid {
    /// Zero-contour of `V - level` on a two-dimensional slice as line
    /// segments (marching squares with linear interpolation).
    pub fn contour(&self) -> Vec<[(f64, f64); 2]> {
        if self.axes.len() != 2 {
            return Vec::new();
        }
        let (xs, ys) = (&self.axes[0], &self.axes[1]);
        let ny = ys.len();
        let f = |i: usize, j: usize| self.values[i * ny + j] - self.level;
        let mut segs = Vec::new();
        for i in 0..xs.len() - 1 {
            for j in 0..ny - 1 {
                let corners = [
                    (xs[i], ys[j], f(i, j)),
                    (xs[i + 1], ys[j], f(i + 1, j)),
                    (xs[i + 1], ys[j + 1], f(i + 1, j + 1)),
                    (xs[i], ys[j + 1], f(i, j + 1)),
                ];
                let mut pts = Vec::with_capacity(4);
                for e in 0..4 {
                    let (x0, y0, v0) = corners[e];
                    let (x1, y1, v1) = corners[(e + 1) % 4];
                    if (v0 <= 0.0) != (v1 <= 0.0) {
                        let s = v0 / (v0 - v1);
                        pts.push((x0 + s * (x1 - x0), y0 + s * (y1 - y0)));
                    }
                }
                if pts.len() == 2 {
                    segs.push([pts[0], pts[1]]);
                } else if pts.len() == 4 {
                    segs.push([pts[0], pts[1]]);
                    segs.push([pts[2], pts[3]]);
                }
            }
        }
        segs
    }

    /// Grid as `coords... value` lines with blank lines between rows.
    pub fn to_gnuplot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# t {} level {}", self.t, self.level);
        let res = self.axes[0].len();
        for (flat, v) in self.values.iter().enumerate() {
            let mut rem = flat;
            let mut coords = vec![0.0; self.axes.len()];
            for a in (0..self.axes.len()).rev() {
                coords[a] = self.axes[a][rem % res];
                rem /= res;
            }
            for c in &coords {
                let _ = write!(s, "{c:.9e} ");
            }
            let _ = writeln!(s, "{v:.9e}");
            if self.axes.len() > 1 && (flat + 1) % res == 0 {
                s.push('\n');
            }
        }
        s
    }

    /// Contour segments as gnuplot line data.
    pub fn contour_gnuplot(&self) -> String {
        let mut s = String::new();
        for [a, b] in self.contour() {
            let _ = writeln!(s, "{:.9e} {:.9e}\n{:.9e} {:.9e}\n", a.0, a.1, b.0, b.1);
        }
        s
    }
}
