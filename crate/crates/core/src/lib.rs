//! Hierarchical Gaussian random field sampling and multilevel delayed
//! acceptance MCMC for a Darcy flow inverse problem on the unit square.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod darcy;
pub mod error;
pub mod estimators;
pub mod fem;
pub mod grf;
pub mod linalg;
pub mod mcmc;
pub mod mesh;
pub mod posterior;
pub mod rng;
pub mod sparse;
pub mod validation;

pub use darcy::{
    compute_qoi, solve_darcy, DarcySolution, DarcySolver, DirichletData, ObservationOperator, ObservationSet,
};
pub use error::{Error, Result};
pub use estimators::{iact, summarize, RunSummary};
pub use fem::{assemble_spde_operator, SpdeOperators};
pub use grf::{
    compute_kl_basis, kl_sample, kl_spde_decompose, mg_decompose, multilevel_field, sample_white_noise, spde_sample,
    CoarseSampler, FieldRealization, HierarchicalSampler, KlBasis, WhiteNoise,
};
pub use mcmc::{run_chain, run_chains, ChainConfig, ChainRecord, ChainRow, HierarchicalModel};
pub use mesh::{BoundaryTag, Hierarchy, MeshLevel, TransferOperator};
pub use posterior::{generate_observations, CoarsestSampler, DarcyPosterior, PriorSpec};
pub use rng::{Purpose, SeedTree, StreamId};
pub use sparse::CsrMatrix;
