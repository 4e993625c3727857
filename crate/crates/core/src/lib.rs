//! Particle-based laboratory for extended mean-field control.
//!
//! The crate builds the N-agent controlled particle system whose agents
//! interact through the empirical distribution of states and controls, the
//! conditional McKean-Vlasov approximation of its large-population limit,
//! and the measure-valued (controlled Fokker-Planck) relaxation, together
//! with the machinery needed to check them against each other numerically:
//! exact transport distances on atom clouds, kernel-regularized coefficients
//! with conditional control sampling, weak-formulation residuals, and
//! derivative-free policy search.
//!
//! Modules:
//! - [`measures`]: atom clouds, Wasserstein distances, measure paths,
//!   relaxed controls, common-noise paths.
//! - [`problem`]: coefficient tuples, control sets, assumption probes, the
//!   builtin problem catalog.
//! - [`mollify`]: compact-support kernel, smoothed densities, conditional
//!   control kernel and sampler, mollified coefficients, SPD square roots.
//! - [`particle`]: Euler-Maruyama engines for the agent systems, the
//!   regularized Fokker-Planck representation, and the randomized scheme;
//!   deterministic seed-stream splitting.
//! - [`control`]: policies, reward functionals, cross-entropy search.
//! - [`verify`]: Fokker-Planck residuals, shifted measures, moment and
//!   Holder diagnostics, bandwidth convergence studies.

pub mod control;
pub mod error;
pub mod measures;
pub mod mollify;
pub mod particle;
pub mod problem;
pub mod verify;

pub use control::{
    optimize_policy, reward_measure_valued, reward_mfc, reward_n_agent, value_gap_study,
    FeedbackGrid, OptMethod, Policy, PolicyFamily,
};
pub use error::MeasureError;
pub use measures::{
    check_marginal_constraint, empirical_from_particles, path_distance, wasserstein,
    wasserstein_auto, CommonNoisePath, DiscreteMeasure, MeasurePath, MeasurePathView,
    RelaxedControlPath, TransportMode,
};
pub use mollify::{
    conditional_kernel, inv_principal_sqrt, mollified_coefficients, principal_sqrt,
    sample_control, smoothed_density, Mollifier, SpdMatrix,
};
pub use particle::{
    derive_seed, simulate_mkv, simulate_n_agent, simulate_randomized_scheme,
    simulate_regularized_fp, InitialLaw, SimConfig, StreamId, StreamPurpose, TrajectoryBundle,
};
pub use problem::{builtin_names, builtin_problem, probe_assumptions, ControlSet, ProblemSpec};
pub use verify::{
    check_holder, check_moment_bound, fp_residual, fp_residual_shifted,
    mollifier_convergence_study, residual_scaling_study, shift_by_common_noise, shift_with_sigma0,
    GaussianMonomial, TestFunction, TestFunctionDictionary,
};
