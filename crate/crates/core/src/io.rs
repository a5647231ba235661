//! File formats: problem specs (TOML) and certificates (JSON).
//!
//! A spec file has top-level `name`, `eps` and optional `x_eq`, and the
//! sections `[variables]`, `[horizon]`, `[dynamics]`, `[[targets]]`,
//! `[inputs]`, `[uncertainty]`, `[templates]` and `[feedback]`. Variables
//! are always named `t, x1.., w1.., d1..`; polynomials are written in the
//! infix syntax accepted by [`Polynomial::parse`]. Unknown keys are rejected.
//!
//! ```toml
//! name = "integrator"
//! eps = 0.0001
//!
//! [variables]
//! n = 1
//! m = 1
//!
//! [horizon]
//! t0 = 0.0
//! t_final = 1.0
//!
//! [dynamics]
//! f = ["0"]
//! g = [["1"]]
//!
//! [[targets]]
//! kind = "terminal"
//! r = "x1^2 - 0.04"
//!
//! [inputs]
//! a = [["1"], ["-1"]]
//! b = ["1", "1"]
//! ```
//!
//! A certificate file is a JSON object that embeds the spec it was
//! computed for, the SHA-256 of that spec's canonical TOML text, every
//! polynomial in text form, Gram matrices as dense row arrays with bases
//! given as exponent vectors, the level history and the tolerances used.
//! Wall-clock timings are deliberately left out so that reruns produce
//! identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::polynomial::{Monomial, PolyError, Polynomial};
use crate::problem::{DeltaSet, KDependence, ProblemSpec, SpecError, Target, TargetKind, Templates};
use crate::synthesis::{CertStatus, Certificate, GramRecord};

/// Version tag written into every certificate.
pub const CERT_FORMAT: &str = "funnel-certificate/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("spec file: {0}")]
    Toml(String),
    #[error("certificate file: {0}")]
    Json(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("polynomial `{text}`: {source}")]
    Poly { text: String, source: PolyError },
    #[error("certificate: {0}")]
    Format(String),
    #[error("certificate was computed for a different spec (hash {stored}, spec hashes to {actual})")]
    HashMismatch { stored: String, actual: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecFile {
    pub name: String,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_eq: Option<Vec<f64>>,
    pub variables: VariablesSection,
    pub horizon: HorizonSection,
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub inputs: InputsSection,
    #[serde(default)]
    pub uncertainty: UncertaintySection,
    #[serde(default)]
    pub templates: TemplatesSection,
    #[serde(default)]
    pub feedback: FeedbackSection,
    pub targets: Vec<TargetSection>,
}

fn default_eps() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariablesSection {
    pub n: usize,
    pub m: usize,
    #[serde(default)]
    pub nw: usize,
    #[serde(default)]
    pub nd: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    #[serde(default)]
    pub t0: f64,
    pub t_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub f: Vec<String>,
    pub g: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsSection {
    #[serde(default)]
    pub a: Vec<Vec<String>>,
    #[serde(default)]
    pub b: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySection {
    #[serde(default)]
    pub r_bound: f64,
    #[serde(default = "zero_text")]
    pub q: String,
    #[serde(default)]
    pub w_bar: f64,
    /// Radius of the parameter ball; exclusive with `delta_box`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_ball: Option<f64>,
    /// Per-component parameter bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_box: Option<Vec<f64>>,
}

fn zero_text() -> String {
    "0".into()
}

impl Default for UncertaintySection {
    fn default() -> Self {
        UncertaintySection {
            r_bound: 0.0,
            q: zero_text(),
            w_bar: 0.0,
            delta_ball: None,
            delta_box: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatesSection {
    pub deg_v: u32,
    pub deg_k: u32,
    pub deg_s: u32,
    /// Per-family multiplier degrees, e.g. `s3 = 4`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, u32>,
}

impl Default for TemplatesSection {
    fn default() -> Self {
        let t = Templates::new(2, 1, 2);
        TemplatesSection {
            deg_v: t.deg_v,
            deg_k: t.deg_k,
            deg_s: t.deg_s,
            overrides: BTreeMap::new(),
        }
    }
}

/// Variables the feedback law may depend on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackSection {
    #[serde(default = "yes")]
    pub t: bool,
    #[serde(default = "yes")]
    pub x: bool,
    #[serde(default)]
    pub w: bool,
    #[serde(default)]
    pub delta: bool,
}

fn yes() -> bool {
    true
}

impl Default for FeedbackSection {
    fn default() -> Self {
        FeedbackSection {
            t: true,
            x: true,
            w: false,
            delta: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    /// `"tube"` or `"terminal"`.
    pub kind: String,
    pub r: String,
}

impl SpecFile {
    pub fn from_spec(spec: &ProblemSpec) -> SpecFile {
        let text = |p: &Polynomial| p.to_string();
        let (delta_ball, delta_box) = match &spec.uncertainty.delta {
            DeltaSet::Ball(r) => (Some(*r), None),
            DeltaSet::Box(b) => (None, Some(b.clone())),
        };
        SpecFile {
            name: spec.name.clone(),
            eps: spec.eps,
            x_eq: Some(spec.x_eq.clone()),
            variables: VariablesSection {
                n: spec.n,
                m: spec.m,
                nw: spec.nw,
                nd: spec.nd,
            },
            horizon: HorizonSection {
                t0: spec.t0,
                t_final: spec.t_final,
            },
            dynamics: DynamicsSection {
                f: spec.f.iter().map(text).collect(),
                g: spec.g.iter().map(|r| r.iter().map(text).collect()).collect(),
            },
            inputs: InputsSection {
                a: spec.input_a.iter().map(|r| r.iter().map(text).collect()).collect(),
                b: spec.input_b.iter().map(text).collect(),
            },
            uncertainty: UncertaintySection {
                r_bound: spec.uncertainty.r_bound,
                q: text(&spec.uncertainty.q),
                w_bar: spec.uncertainty.w_bar,
                delta_ball,
                delta_box,
            },
            templates: TemplatesSection {
                deg_v: spec.templates.deg_v,
                deg_k: spec.templates.deg_k,
                deg_s: spec.templates.deg_s,
                overrides: spec.templates.overrides.clone(),
            },
            feedback: FeedbackSection {
                t: spec.k_dependence.t,
                x: spec.k_dependence.x,
                w: spec.k_dependence.w,
                delta: spec.k_dependence.delta,
            },
            targets: spec
                .targets
                .iter()
                .map(|t| TargetSection {
                    kind: t.kind.as_str().to_string(),
                    r: text(&t.r),
                })
                .collect(),
        }
    }

    /// Builds and validates the spec.
    pub fn to_spec(&self) -> Result<ProblemSpec, IoError> {
        let v = &self.variables;
        let mut spec = ProblemSpec::empty(&self.name, v.n, v.m, v.nw, v.nd);
        let parse = |s: &str| {
            Polynomial::parse(&spec.vars, s).map_err(|source| IoError::Poly {
                text: s.to_string(),
                source,
            })
        };
        let parse_all = |xs: &[String]| xs.iter().map(|s| parse(s)).collect::<Result<Vec<_>, _>>();
        let f = parse_all(&self.dynamics.f)?;
        let g = self
            .dynamics
            .g
            .iter()
            .map(|r| parse_all(r))
            .collect::<Result<Vec<_>, _>>()?;
        let input_a = self
            .inputs
            .a
            .iter()
            .map(|r| parse_all(r))
            .collect::<Result<Vec<_>, _>>()?;
        let input_b = parse_all(&self.inputs.b)?;
        let q = parse(&self.uncertainty.q)?;
        let mut targets = Vec::with_capacity(self.targets.len());
        for t in &self.targets {
            let kind = match t.kind.as_str() {
                "tube" => TargetKind::Tube,
                "terminal" => TargetKind::Terminal,
                other => {
                    return Err(IoError::Toml(format!(
                        "target kind `{other}` is neither `tube` nor `terminal`"
                    )))
                }
            };
            targets.push(Target { kind, r: parse(&t.r)? });
        }
        let delta = match (&self.uncertainty.delta_ball, &self.uncertainty.delta_box) {
            (Some(_), Some(_)) => {
                return Err(IoError::Toml("give either delta_ball or delta_box, not both".into()))
            }
            (Some(r), None) => DeltaSet::Ball(*r),
            (None, Some(b)) => DeltaSet::Box(b.clone()),
            (None, None) => DeltaSet::Ball(0.0),
        };

        spec.f = f;
        spec.g = g;
        spec.input_a = input_a;
        spec.input_b = input_b;
        spec.targets = targets;
        spec.t0 = self.horizon.t0;
        spec.t_final = self.horizon.t_final;
        spec.eps = self.eps;
        spec.uncertainty.r_bound = self.uncertainty.r_bound;
        spec.uncertainty.q = q;
        spec.uncertainty.w_bar = self.uncertainty.w_bar;
        spec.uncertainty.delta = delta;
        spec.templates = Templates::new(self.templates.deg_v, self.templates.deg_k, self.templates.deg_s);
        spec.templates.overrides = self.templates.overrides.clone();
        spec.k_dependence = KDependence {
            t: self.feedback.t,
            x: self.feedback.x,
            w: self.feedback.w,
            delta: self.feedback.delta,
        };
        if let Some(x) = &self.x_eq {
            spec.x_eq = x.clone();
        }
        spec.validate()?;
        Ok(spec)
    }
}

pub fn parse_spec(text: &str) -> Result<ProblemSpec, IoError> {
    let file: SpecFile = toml::from_str(text).map_err(|e| IoError::Toml(e.to_string()))?;
    file.to_spec()
}

pub fn spec_to_toml(spec: &ProblemSpec) -> String {
    toml::to_string(&SpecFile::from_spec(spec)).expect("spec files always serialize")
}

/// SHA-256 of the canonical TOML text, hex encoded.
pub fn spec_hash(spec: &ProblemSpec) -> String {
    hex::encode(Sha256::digest(spec_to_toml(spec).as_bytes()))
}

pub fn read_spec(path: &Path) -> Result<ProblemSpec, IoError> {
    parse_spec(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GramFile {
    name: String,
    basis: Vec<Vec<u32>>,
    q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tolerances {
    residual: f64,
    psd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum StatusFile {
    Complete,
    Degraded(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CertFile {
    format: String,
    spec_hash: String,
    spec: SpecFile,
    variables: Vec<String>,
    robust: bool,
    gamma: f64,
    gamma_history: Vec<f64>,
    status: StatusFile,
    v: String,
    k: Vec<String>,
    multipliers: BTreeMap<String, String>,
    grams: Vec<GramFile>,
    tolerances: Tolerances,
}

/// Serializes a certificate together with its spec.
pub fn certificate_to_json(
    cert: &Certificate,
    spec: &ProblemSpec,
    tol_residual: f64,
    tol_psd: f64,
) -> String {
    let file = CertFile {
        format: CERT_FORMAT.into(),
        spec_hash: spec_hash(spec),
        spec: SpecFile::from_spec(spec),
        variables: spec.vars.names().to_vec(),
        robust: cert.robust,
        gamma: cert.gamma,
        gamma_history: cert.gamma_history.clone(),
        status: match &cert.status {
            CertStatus::Complete => StatusFile::Complete,
            CertStatus::Degraded(m) => StatusFile::Degraded(m.clone()),
        },
        v: cert.v.to_string(),
        k: cert.k.iter().map(|p| p.to_string()).collect(),
        multipliers: cert
            .multipliers
            .iter()
            .map(|(n, p)| (n.clone(), p.to_string()))
            .collect(),
        grams: cert
            .grams
            .iter()
            .map(|g| GramFile {
                name: g.name.clone(),
                basis: g.basis.iter().map(|m| m.exponents().to_vec()).collect(),
                q: g.q.row_iter().map(|r| r.iter().copied().collect()).collect(),
            })
            .collect(),
        tolerances: Tolerances {
            residual: tol_residual,
            psd: tol_psd,
        },
    };
    let mut s = serde_json::to_string_pretty(&file).expect("certificates always serialize");
    s.push('\n');
    s
}

/// A certificate read back from disk, with the spec it embeds.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCertificate {
    pub spec: ProblemSpec,
    pub cert: Certificate,
    pub tol_residual: f64,
    pub tol_psd: f64,
}

pub fn certificate_from_json(text: &str) -> Result<LoadedCertificate, IoError> {
    let file: CertFile = serde_json::from_str(text).map_err(|e| IoError::Json(e.to_string()))?;
    if file.format != CERT_FORMAT {
        return Err(IoError::Format(format!("unsupported format `{}`", file.format)));
    }
    let spec = file.spec.to_spec()?;
    let actual = spec_hash(&spec);
    if actual != file.spec_hash {
        return Err(IoError::HashMismatch {
            stored: file.spec_hash,
            actual,
        });
    }
    if file.variables.as_slice() != spec.vars.names() {
        return Err(IoError::Format("variable list does not match the embedded spec".into()));
    }
    let parse = |s: &str| {
        Polynomial::parse(&spec.vars, s).map_err(|source| IoError::Poly {
            text: s.to_string(),
            source,
        })
    };
    let nv = spec.vars.len();
    let mut grams = Vec::with_capacity(file.grams.len());
    for g in &file.grams {
        let dim = g.basis.len();
        if g.basis.iter().any(|e| e.len() != nv) {
            return Err(IoError::Format(format!("gram `{}`: exponent vectors must have {nv} entries", g.name)));
        }
        if g.q.len() != dim || g.q.iter().any(|r| r.len() != dim) {
            return Err(IoError::Format(format!("gram `{}` must be {dim}x{dim}", g.name)));
        }
        grams.push(GramRecord {
            name: g.name.clone(),
            basis: g.basis.iter().map(|e| Monomial::from_exponents(e.clone())).collect(),
            q: DMatrix::from_fn(dim, dim, |i, j| g.q[i][j]),
        });
    }
    let cert = Certificate {
        spec_name: spec.name.clone(),
        v: parse(&file.v)?,
        k: file.k.iter().map(|s| parse(s)).collect::<Result<_, _>>()?,
        gamma: file.gamma,
        multipliers: file
            .multipliers
            .iter()
            .map(|(n, s)| Ok((n.clone(), parse(s)?)))
            .collect::<Result<_, IoError>>()?,
        grams,
        gamma_history: file.gamma_history,
        robust: file.robust,
        status: match file.status {
            StatusFile::Complete => CertStatus::Complete,
            StatusFile::Degraded(m) => CertStatus::Degraded(m),
        },
        timings: Vec::new(),
    };
    if cert.k.len() != spec.m {
        return Err(IoError::Format(format!("expected {} feedback components", spec.m)));
    }
    Ok(LoadedCertificate {
        spec,
        cert,
        tol_residual: file.tolerances.residual,
        tol_psd: file.tolerances.psd,
    })
}

pub fn read_certificate(path: &Path) -> Result<LoadedCertificate, IoError> {
    certificate_from_json(&fs::read_to_string(path)?)
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| IoError::Format(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;

    #[test]
    fn builtin_specs_round_trip_through_toml() {
        for name in models::BUILTINS {
            let spec = models::builtin(name).unwrap().spec;
            let text = spec_to_toml(&spec);
            let back = parse_spec(&text).unwrap_or_else(|e| panic!("{name}: {e}\n{text}"));
            assert_eq!(back, spec, "{name}");
            assert_eq!(spec_hash(&back), spec_hash(&spec));
        }
    }

    #[test]
    fn documented_example_parses() {
        let text = r#"
name = "integrator"
eps = 0.0001

[variables]
n = 1
m = 1

[horizon]
t0 = 0.0
t_final = 1.0

[dynamics]
f = ["0"]
g = [["1"]]

[[targets]]
kind = "terminal"
r = "x1^2 - 0.04"

[inputs]
a = [["1"], ["-1"]]
b = ["1", "1"]
"#;
        let spec = parse_spec(text).unwrap();
        let mut expected = models::toy_integrator(1.0).spec;
        expected.name = "integrator".into();
        assert_eq!(spec, expected);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = spec_to_toml(&models::toy_integrator(1.0).spec);
        text = text.replace("[horizon]", "[horizon]\nlength = 3");
        assert!(matches!(parse_spec(&text), Err(IoError::Toml(_))));
    }

    #[test]
    fn invalid_specs_are_reported() {
        let text = spec_to_toml(&models::toy_integrator(1.0).spec).replace("t_final = 1.0", "t_final = -1.0");
        assert!(matches!(parse_spec(&text), Err(IoError::Spec(_))));
        let text = spec_to_toml(&models::toy_integrator(1.0).spec).replace("x1^2", "y^2");
        assert!(matches!(parse_spec(&text), Err(IoError::Poly { .. })));
    }

    fn sample_certificate(spec: &ProblemSpec) -> Certificate {
        let v = spec.parse_poly("x1^2").unwrap();
        Certificate {
            spec_name: spec.name.clone(),
            v,
            k: vec![spec.parse_poly("-x1").unwrap()],
            gamma: 0.04,
            multipliers: [("s3".to_string(), spec.parse_poly("0.5 + t^2").unwrap())].into(),
            grams: vec![GramRecord {
                name: "dissipation".into(),
                basis: vec![Monomial::from_exponents(vec![0, 0]), Monomial::from_exponents(vec![0, 1])],
                q: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 2.0 / 3.0]),
            }],
            gamma_history: vec![0.01, 0.04],
            robust: false,
            status: CertStatus::Degraded("stopped".into()),
            timings: Vec::new(),
        }
    }

    #[test]
    fn certificate_round_trips_exactly() {
        let spec = models::toy_integrator(1.0).spec;
        let cert = sample_certificate(&spec);
        let text = certificate_to_json(&cert, &spec, 1e-6, 1e-6);
        let back = certificate_from_json(&text).unwrap();
        assert_eq!(back.cert, cert);
        assert_eq!(back.spec, spec);
        assert_eq!(back.tol_residual, 1e-6);
        assert_eq!(certificate_to_json(&back.cert, &back.spec, 1e-6, 1e-6), text);
    }

    #[test]
    fn tampered_spec_fails_the_hash_check() {
        let spec = models::toy_integrator(1.0).spec;
        let text = certificate_to_json(&sample_certificate(&spec), &spec, 1e-6, 1e-6);
        let tampered = text.replace("\"t_final\": 1.0", "\"t_final\": 2.0");
        assert_ne!(tampered, text);
        assert!(matches!(
            certificate_from_json(&tampered),
            Err(IoError::HashMismatch { .. })
        ));
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = std::env::temp_dir().join(format!("funnel-io-{}", std::process::id()));
        let path = dir.join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        let leftovers = fs::read_dir(&dir).unwrap().count();
        assert_eq!(leftovers, 1);
        fs::remove_dir_all(&dir).unwrap();
    }
}
