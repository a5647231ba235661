//! Built-in problems.
//!
//! Each constructor returns a [`NamedSpec`] whose default templates are sized
//! to finish in minutes; `full_templates` holds the larger degrees used for
//! full-size runs.

use crate::polynomial::Polynomial;
use crate::problem::{DeltaSet, KDependence, ProblemSpec, Target, TargetKind, Templates};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedSpec {
    pub name: String,
    pub spec: ProblemSpec,
    pub notes: String,
    pub full_templates: Option<Templates>,
    /// Initial storage function known to work at the default templates;
    /// `None` means the linearization-based default is adequate.
    pub v0: Option<Polynomial>,
}

/// Names accepted by [`builtin`].
pub const BUILTINS: &[&str] = &[
    "toy_integrator",
    "toy_disturbed",
    "dubins",
    "dubins_obstacle",
    "pendubot",
    "pursuer_evader",
    "pursuer_evader_nominal",
];

/// Looks up a built-in problem by name.
pub fn builtin(name: &str) -> Option<NamedSpec> {
    match name {
        "toy_integrator" => Some(toy_integrator(1.0)),
        "toy_disturbed" => Some(toy_disturbed(1.0)),
        "dubins" => Some(dubins(false)),
        "dubins_obstacle" => Some(dubins(true)),
        "pendubot" => Some(pendubot()),
        "pursuer_evader" => Some(pursuer_evader(0.05)),
        "pursuer_evader_nominal" => Some(pursuer_evader(0.0)),
        _ => None,
    }
}

fn p(spec: &ProblemSpec, s: &str) -> Polynomial {
    spec.parse_poly(s).expect("built-in polynomial parses")
}

/// Box `|u_j| <= 1` for every input, as `2m` polytope rows.
fn unit_input_box(spec: &mut ProblemSpec) {
    let one = Polynomial::constant(&spec.vars, 1.0);
    let zero = Polynomial::zero(&spec.vars);
    for j in 0..spec.m {
        for s in [1.0, -1.0] {
            let mut row = vec![zero.clone(); spec.m];
            row[j] = one.scale(s);
            spec.input_a.push(row);
            spec.input_b.push(one.clone());
        }
    }
}

/// `ẋ = u`, `|u| <= 1`, terminal set `x² <= 0.04` at time `T`.
///
/// Starting from `|x0| <= 0.2 + T` the saturated law `u = -sign(x)` reaches
/// the target, and no state outside that interval can, so the exact
/// backward reachable set is `|x0| <= 0.2 + T`.
pub fn toy_integrator(t_final: f64) -> NamedSpec {
    let mut spec = ProblemSpec::empty("toy_integrator", 1, 1, 0, 0);
    spec.t_final = t_final;
    spec.g[0][0] = Polynomial::constant(&spec.vars, 1.0);
    spec.targets.push(Target {
        kind: TargetKind::Terminal,
        r: p(&spec, "x1^2 - 0.04"),
    });
    unit_input_box(&mut spec);
    spec.templates = Templates::new(2, 1, 2);
    spec.eps = 1e-4;
    NamedSpec {
        name: "toy_integrator".into(),
        notes: format!("exact backward reachable set |x0| <= {}", 0.2 + t_final),
        spec,
        full_templates: None,
        v0: None,
    }
}

/// The integrator with an additive energy-bounded disturbance:
/// `ẋ = u + w`, `R = 0.1`, `q(t) = t²/T²`, `‖w‖ <= 0.141`.
pub fn toy_disturbed(t_final: f64) -> NamedSpec {
    let mut spec = ProblemSpec::empty("toy_disturbed", 1, 1, 1, 0);
    spec.t_final = t_final;
    spec.f[0] = p(&spec, "w1");
    spec.g[0][0] = Polynomial::constant(&spec.vars, 1.0);
    spec.targets.push(Target {
        kind: TargetKind::Terminal,
        r: p(&spec, "x1^2 - 0.04"),
    });
    unit_input_box(&mut spec);
    spec.uncertainty.r_bound = 0.1;
    spec.uncertainty.q = p(&spec, "t^2").scale(1.0 / (t_final * t_final));
    spec.uncertainty.w_bar = 0.141;
    spec.templates = Templates::new(2, 1, 2);
    NamedSpec {
        name: "toy_disturbed".into(),
        notes: "integrator with additive disturbance, energy released as t^2/T^2".into(),
        spec,
        full_templates: None,
        v0: None,
    }
}

/// Unicycle in the polynomial coordinates `x1 = θ`,
/// `x2 = a cosθ + b sinθ`, `x3 = 2(a sinθ - b cosθ) - θ x2`, with inputs
/// `u1 = ω`, `u2 = v - ω(a sinθ - b cosθ)`:
/// `ẋ1 = u1`, `ẋ2 = u2`, `ẋ3 = x2 u1 - x1 u2`.
///
/// The obstacle variant adds the tube constraint `obs(x) >= 0` with
/// `obs(x) = (x1 - 1.5)² + x2² + x3² - 0.25`.
pub fn dubins(obstacle: bool) -> NamedSpec {
    let name = if obstacle { "dubins_obstacle" } else { "dubins" };
    let mut spec = ProblemSpec::empty(name, 3, 2, 0, 0);
    spec.t_final = 4.0;
    spec.g[0][0] = Polynomial::constant(&spec.vars, 1.0);
    spec.g[1][1] = Polynomial::constant(&spec.vars, 1.0);
    spec.g[2][0] = p(&spec, "x2");
    spec.g[2][1] = p(&spec, "-x1");
    spec.targets.push(Target {
        kind: TargetKind::Terminal,
        r: p(&spec, "x1^2 + x2^2 + x3^2 - 0.04"),
    });
    if obstacle {
        spec.targets.push(Target {
            kind: TargetKind::Tube,
            r: obstacle_poly(&spec).neg(),
        });
    }
    unit_input_box(&mut spec);
    spec.eps = 1e-3;
    spec.templates = Templates::new(2, 2, 2);
    NamedSpec {
        name: name.into(),
        notes: "unicycle in chained-form coordinates; initial condition (-0.8, 1.4, 0.3)".into(),
        spec,
        full_templates: Some(Templates::new(6, 3, 4)),
        v0: None,
    }
}

/// `obs(x) = (x1 - 1.5)² + x2² + x3² - 0.5²`; the obstacle is `obs <= 0`.
pub fn obstacle_poly(spec: &ProblemSpec) -> Polynomial {
    p(spec, "(x1 - 1.5)^2 + x2^2 + x3^2 - 0.25")
}

/// Maps position `(a, b)` and heading `θ` to the polynomial coordinates.
///
/// The sign of `x3` is chosen so that `ẋ3 = x2 u1 - x1 u2` holds along
/// unicycle trajectories; the opposite sign yields `x1 u2 - x2 u1`.
pub fn dubins_coordinates(a: f64, b: f64, theta: f64) -> [f64; 3] {
    let (s, c) = theta.sin_cos();
    let x2 = a * c + b * s;
    [theta, x2, 2.0 * (a * s - b * c) - theta * x2]
}

/// Maps turn rate `ω` and speed `v` to the polynomial-coordinate inputs.
pub fn dubins_inputs(a: f64, b: f64, theta: f64, omega: f64, v: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [omega, v - omega * (a * s - b * c)]
}

/// Two-link underactuated arm, least-squares polynomial fit of the full
/// dynamics on `x1 × x3 ∈ [-1, 1]²`. States: `θ1, θ̇1, θ2, θ̇2`.
pub fn pendubot() -> NamedSpec {
    let mut spec = ProblemSpec::empty("pendubot", 4, 1, 0, 0);
    spec.t_final = 4.0;
    spec.f[0] = p(&spec, "x2");
    spec.f[1] = p(
        &spec,
        "-10.656*x1^3 + 11.531*x1^2*x3 + 7.885*x1*x3^2 + 0.797*x2^2*x3 + 0.841*x2*x3*x4 \
         + 21.049*x3^3 + 0.420*x3*x4^2 + 66.523*x1 - 24.511*x3",
    );
    spec.f[2] = p(&spec, "x4");
    spec.f[3] = p(
        &spec,
        "10.996*x1^3 - 48.915*x1^2*x3 - 6.404*x1*x3^2 - 2.396*x2^2*x3 - 1.594*x2*x3*x4 \
         - 51.909*x3^3 - 0.797*x3*x4^2 - 68.642*x1 + 103.978*x3",
    );
    spec.g[1][0] = p(&spec, "-10.096*x3^2 + 44.252");
    spec.g[3][0] = p(&spec, "37.802*x3^2 - 83.912");
    spec.targets.push(Target {
        kind: TargetKind::Terminal,
        r: p(&spec, "100*x1^2 + x2^2/0.1225 + 100*x3^2 + x4^2/0.1225 - 1"),
    });
    unit_input_box(&mut spec);
    spec.eps = 1e-4;
    spec.templates = Templates::new(2, 1, 2);
    NamedSpec {
        name: "pendubot".into(),
        notes: "initial condition (-0.35, 2.6, 0.35, -4)".into(),
        spec,
        full_templates: Some(Templates::new(4, 3, 4)),
        v0: None,
    }
}

/// Relative pursuer–evader kinematics with `v_e = v_p = 1`, evader turn rate
/// `u_e ∈ [-0.5, 0.5]` treated as uncertainty, and `cos x3 ≈ 1 - 0.4298 x3²
/// + δ_cos`, `sin x3 ≈ x3 - 0.1511 x3³`:
///
/// `ẋ1 = -0.4298 x3² + δ_cos + u_e x2`, `ẋ2 = x3 - 0.1511 x3³ - u_e x1`,
/// `ẋ3 = u_p - u_e`.
///
/// `d1 = u_e`; when `cos_bound > 0`, `d2 = δ_cos` with `|δ_cos| <= cos_bound`.
/// Components are bounded by a box.
const PE_V0: &str = "x1^2 + x2^2 + x3^2 - 0.25*t";

pub fn pursuer_evader(cos_bound: f64) -> NamedSpec {
    let nd = if cos_bound > 0.0 { 2 } else { 1 };
    let name = if cos_bound > 0.0 {
        "pursuer_evader"
    } else {
        "pursuer_evader_nominal"
    };
    let mut spec = ProblemSpec::empty(name, 3, 1, 0, nd);
    spec.t_final = 2.6;
    let drift1 = if nd == 2 {
        "-0.4298*x3^2 + d2 + d1*x2"
    } else {
        "-0.4298*x3^2 + d1*x2"
    };
    spec.f[0] = p(&spec, drift1);
    spec.f[1] = p(&spec, "x3 - 0.1511*x3^3 - d1*x1");
    spec.f[2] = p(&spec, "-d1");
    spec.g[2][0] = Polynomial::constant(&spec.vars, 1.0);
    spec.targets.push(Target {
        kind: TargetKind::Terminal,
        r: p(&spec, "x1^2 + x2^2 + x3^2 - 1"),
    });
    unit_input_box(&mut spec);
    spec.uncertainty.delta = if nd == 2 {
        DeltaSet::Box(vec![0.5, cos_bound])
    } else {
        DeltaSet::Box(vec![0.5])
    };
    spec.k_dependence = KDependence::default();
    spec.eps = 1e-4;
    spec.templates = Templates::new(2, 2, 2);
    // The turn rate pushes the state off the origin, so no time-invariant
    // storage function is nonincreasing near it; a slowly decaying one is.
    let v0 = p(&spec, PE_V0);
    NamedSpec {
        name: name.into(),
        notes: "evader turn rate and cosine-fit error as bounded parameters".into(),
        spec,
        full_templates: Some(Templates::new(4, 2, 4)),
        v0: Some(v0),
    }
}

/// Same dynamics with the two uncertain components bounded jointly by the
/// ball `δ'δ <= 0.5² + cos_bound²`, which contains the box.
pub fn pursuer_evader_ball(cos_bound: f64) -> NamedSpec {
    let mut ns = pursuer_evader(cos_bound);
    let r2: f64 = 0.25 + cos_bound * cos_bound;
    ns.spec.uncertainty.delta = DeltaSet::Ball(r2.sqrt());
    ns.notes.push_str("; ball encoding");
    ns
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polynomial::Monomial;

    fn coeff(poly: &Polynomial, exps: &[u32]) -> f64 {
        poly.coeff(&Monomial::from_exponents(exps.to_vec()))
    }

    #[test]
    fn all_builtins_validate() {
        for name in BUILTINS {
            let ns = builtin(name).unwrap();
            ns.spec.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        pursuer_evader_ball(0.05).spec.validate().unwrap();
    }

    #[test]
    fn pendubot_literal_coefficients() {
        let s = pendubot().spec;
        // exponents: t, x1, x2, x3, x4
        assert_eq!(coeff(&s.g[1][0], &[0, 0, 0, 0, 0]), 44.252);
        assert_eq!(coeff(&s.g[1][0], &[0, 0, 0, 2, 0]), -10.096);
        assert_eq!(coeff(&s.g[3][0], &[0, 0, 0, 0, 0]), -83.912);
        assert_eq!(coeff(&s.g[3][0], &[0, 0, 0, 2, 0]), 37.802);
        assert_eq!(coeff(&s.f[1], &[0, 3, 0, 0, 0]), -10.656);
        assert_eq!(coeff(&s.f[1], &[0, 1, 0, 0, 0]), 66.523);
        assert_eq!(coeff(&s.f[1], &[0, 0, 0, 1, 0]), -24.511);
        assert_eq!(coeff(&s.f[1], &[0, 0, 1, 1, 1]), 0.841);
        assert_eq!(coeff(&s.f[3], &[0, 1, 0, 0, 0]), -68.642);
        assert_eq!(coeff(&s.f[3], &[0, 0, 0, 1, 0]), 103.978);
        assert_eq!(coeff(&s.f[3], &[0, 0, 0, 3, 0]), -51.909);
        assert_eq!(coeff(&s.f[3], &[0, 0, 0, 1, 2]), -0.797);
        assert_eq!(s.f[1].nterms(), 9);
        assert_eq!(s.f[3].nterms(), 9);
    }

    #[test]
    fn pendubot_origin_is_equilibrium() {
        let s = pendubot().spec;
        let origin = [0.0; 5];
        for fi in &s.f {
            assert_eq!(fi.eval(&origin).unwrap(), 0.0);
        }
        assert_eq!(s.g[3][0].eval(&origin).unwrap(), -83.912);
    }

    #[test]
    fn dubins_has_no_drift() {
        let s = dubins(false).spec;
        assert!(s.f.iter().all(|f| f.is_zero()));
        assert_eq!(s.np(), 4);
    }

    #[test]
    fn dubins_obstacle_adds_tube() {
        let s = dubins(true).spec;
        assert_eq!(s.targets.len(), 2);
        assert_eq!(s.targets[1].kind, TargetKind::Tube);
        // obstacle centre is inside the obstacle: tube value positive there
        assert!(s.targets[1].r.eval(&[0.0, 1.5, 0.0, 0.0]).unwrap() > 0.0);
    }

    #[test]
    fn dubins_change_of_coordinates_matches_chain_rule() {
        let s = dubins(false).spec;
        let cases: [(f64, f64, f64, f64, f64); 3] = [
            (0.3, -0.7, 0.4, 0.9, -0.2),
            (-1.2, 0.5, -1.1, -0.3, 0.8),
            (0.05, 2.0, 2.5, 0.6, 0.4),
        ];
        for (a, b, th, om, v) in cases {
            // original unicycle: ȧ = v cosθ, ḃ = v sinθ, θ̇ = ω
            let h = 1e-6;
            let fwd = dubins_coordinates(a + h * v * th.cos(), b + h * v * th.sin(), th + h * om);
            let bwd = dubins_coordinates(a - h * v * th.cos(), b - h * v * th.sin(), th - h * om);
            let x = dubins_coordinates(a, b, th);
            let u = dubins_inputs(a, b, th, om, v);
            let pt = s.point(0.0, &x, &[], &[]);
            let field = s.vector_field(&pt, &u);
            for i in 0..3 {
                let fd = (fwd[i] - bwd[i]) / (2.0 * h);
                assert!((fd - field[i]).abs() < 1e-6, "component {i}: {fd} vs {}", field[i]);
            }
        }
    }

    #[test]
    fn pursuer_evader_nominal_drops_cos_channel() {
        assert_eq!(pursuer_evader(0.05).spec.nd, 2);
        assert_eq!(pursuer_evader(0.0).spec.nd, 1);
    }

    #[test]
    fn toy_notes_record_radius() {
        assert!(toy_integrator(1.0).notes.contains("1.2"));
        assert!(toy_integrator(0.0).notes.contains("0.2"));
    }
}
