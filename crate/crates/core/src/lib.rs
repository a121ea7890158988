//! State estimation for linear time-varying systems with unknown inputs.
//!
//! The crate is organised bottom-up:
//!
//! - [`expr`]: scalar expressions in `t` and expression-valued matrices with
//!   exact symbolic derivatives.
//! - [`linalg`]: modified Gram–Schmidt QR, SVD rank, projectors.
//! - [`integrators`]: fixed-step RK4 and the projected RK4 for orthonormal frames.
//! - [`lyapunov`]: Lyapunov spectrum by the continuous QR flow, regularity diagnostics.
//! - [`bibs`]: bounded-input bounded-state certificates.
//! - [`observer`]: the tangent-space observer and its directional detectability report.
//! - [`strong_obs`]: generalized observability matrices, strong observability and
//!   the reconstruction map.
//! - [`hosm`]: Levant's robust exact differentiator.
//! - [`cascade`]: observer + differentiator bank + reconstruction.
//! - [`scenario`]: JSON scenario files.

pub mod bibs;
pub mod cascade;
mod error;
pub mod expr;
pub mod hosm;
pub mod integrators;
pub mod linalg;
pub mod lyapunov;
pub mod observer;
pub mod scenario;
pub mod strong_obs;
pub mod system;

pub use error::{DesignStep, Error, ErrorKind};
pub use expr::{Expr, MatrixExpr};
pub use integrators::StepConfig;
pub use system::{LtvSystem, TimeMatrix};

pub type Result<T, E = Error> = std::result::Result<T, E>;
