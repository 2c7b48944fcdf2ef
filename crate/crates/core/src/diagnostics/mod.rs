//! Analytic validators: the Lyapunov drift condition, Jacobian flows and
//! the Bismut gradient estimator of the mollified chain, and the weighted
//! occupation time near the kink hyperplane `e'x = 0`.

mod flow;
mod lyapunov;
mod occupation;

pub use flow::{
    bismut_gradient, finite_difference_gradient, jacobian_flow, simulate_mollified_path, FlowMode, GradientConfig,
    GradientEstimate, MollifiedPath,
};
pub use lyapunov::{
    fit_constants, lyapunov_check, lyapunov_value_grad_hess, solve_qtilde, solve_qtilde_with, BoundConstants,
    DriftReport, LyapunovFunction, LyapunovSpec, PhiSpline, QConstruction, RadialGrid, SEMIDEFINITE_TOLERANCE,
    STRICT_TOLERANCE,
};
pub use occupation::{
    occupation_integrand, occupation_phi_eps, occupation_sweep, occupation_time, OccupationEstimate,
};
