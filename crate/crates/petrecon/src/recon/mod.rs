//! Image reconstruction: expectation-maximization baselines and the
//! network-constrained ADMM solver.

pub mod admm;
pub mod classic;

pub use admm::{
    alpha_subproblem, reconstruct_admm, x_update, AdmmConfig, AdmmDiagnostics, AdmmResult,
    AlphaFit,
};
pub use classic::{
    em_step, fair_penalty, fair_penalty_sum, gaussian_postfilter, mapem_fair, mlem, mlem_from,
    poisson_loglik, uniform_init, MapemConfig, MapemResult, MlemResult, ReconConfig,
};
