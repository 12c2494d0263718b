//! Expectation-maximization for subject-level template ICA.

mod engines;
mod model;
mod mstep;
mod posterior;
mod small;
mod space;

pub use engines::{
    fast_em_core, fit_exact, fit_fast, fit_subspace, initialize, select_orders, FastFit, FastOptions,
    OrderSelection, StageTimings,
};
pub use model::{
    load_fit, parse_fit_meta, save_fit, FitMeta, FitOptions, FitResult, PreparedTemplate, StoredFit,
    TemplateSlice, ThetaState,
};
pub use mstep::{update_mixing, update_mog, update_noise_var, SuffStats, NU0_SQ_FLOOR};
pub use posterior::{
    cond_posterior_s, e_step, observed_loglik, posterior_moments, posterior_z, EStepOutput,
    PosteriorMoments,
};
pub use space::{
    enumerate_space, enumerate_space_capped, space_size, LatentSpace, SpaceKind, DEFAULT_SPACE_CAP,
};
