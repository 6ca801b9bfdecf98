//! Continuous-state branching processes: branching mechanisms, the Laplace
//! flow and Grey limit, the reduced process and its genealogies, and the
//! planar moment measures.

pub mod flow;
pub mod mechanism;
pub mod moments;
pub mod reduced;

pub use flow::LaplaceFlow;
pub use mechanism::{BranchingMechanism, JumpMeasure, MomentedMeasure};
pub use moments::{
    carleman_ratios, csbp_moment_curve, csbp_moments, entrance_law_check, entrance_rhs, offdiagonal_mass_mc, planar_measure_points,
    shape_bound_ratio, shape_sequence, unplanarize, EntranceCheck,
};
pub use reduced::{
    default_probe, genealogy_at, martingale, reduced_count, sample_poisson_at_least_two, sample_sibuya, sibuya_survival, simulate_reduced,
    simulate_reduced_capped, Genealogy, ReducedNode, ReducedRates, ReducedTree,
};

/// `psi(theta)` for a mechanism.
pub fn psi_eval(mech: &BranchingMechanism, theta: f64) -> crate::Result<f64> {
    mech.psi(theta)
}

/// `u_t(theta)` from a prepared flow.
pub fn laplace_exponent(flow: &LaplaceFlow, theta: f64, t: f64) -> crate::Result<f64> {
    flow.laplace_exponent(theta, t)
}

/// `ubar_t` from a prepared flow.
pub fn grey_ubar(flow: &LaplaceFlow, t: f64) -> crate::Result<f64> {
    flow.grey_ubar(t)
}

/// Reduced-process rates for horizon `t`.
pub fn reduced_rates(flow: &LaplaceFlow, t: f64) -> crate::Result<ReducedRates> {
    ReducedRates::new(flow, t)
}
