//! Sum-of-squares synthesis of finite-horizon backward reachable sets
//! ("funnels") and polynomial feedback laws for polynomial systems with
//! input limits, energy-bounded disturbances and bounded parameters.
//!
//! The pipeline runs bottom-up:
//!
//! * [`polynomial`] — sparse multivariate polynomials over a shared variable set;
//! * [`sdp`] and [`conic`] — a primal-dual interior-point solver for
//!   linear/semidefinite cone programs;
//! * [`soscompile`] — SOS programs compiled to cone programs via Gram matrices;
//! * [`problem`] and [`models`] — problem specifications and built-in systems;
//! * [`synthesis`] — alternation between a level search and a storage-function update;
//! * [`certify`] — independent algebraic and sampled verification;
//! * [`simulate`] — closed-loop integration and Monte-Carlo checks;
//! * [`io`] — spec and certificate files.

pub mod certify;
pub mod conic;
pub mod io;
pub mod models;
pub mod polynomial;
pub mod problem;
pub mod sdp;
pub mod simulate;
pub mod soscompile;
pub mod synthesis;

pub use certify::{certify, SamplingOptions, Verdict, VerificationReport};
pub use conic::ConicProblem;
pub use models::{builtin, NamedSpec, BUILTINS};
pub use polynomial::{Monomial, PolyError, Polynomial, VarSet};
pub use problem::{DeltaSet, KDependence, ProblemSpec, SpecError, Target, TargetKind, Templates, Uncertainty};
pub use sdp::{ConicSolution, ConicSolver, InteriorPoint, SolveStatus, SolverOptions};
pub use simulate::{integrate, monte_carlo, DisturbanceMode, Signal, Trace};
pub use soscompile::{SosError, SosProgram, SosSolution};
pub use synthesis::{synthesize, CertStatus, Certificate, SynthesisError, SynthesisOptions};
