//! Darcy-flow data: `−∇·(a∇u) = 1` on the unit square with zero Dirichlet
//! data, discretized by five-point finite differences.

mod coefficient;
mod dataset;
mod solver;

pub use coefficient::{
    gen_multiscale_trig, gen_two_phase_approx, multiscale_frequencies, multiscale_trig_with, Coefficient,
    MULTISCALE_TERMS,
};
pub use dataset::{
    build_dataset, check_sample, load_dataset, sample_seeds, save_dataset, CoefficientSpec, Dataset, DatasetMeta,
    Split, DATASET_FORMAT, DEFAULT_TOL,
};
pub use solver::{assemble_apply, solve_reference, SolveStats, MAX_ITERS_PER_SIDE};
