//! Shared fixtures for the criterion benchmarks.

use mlgrf_core::darcy::ObservationSet;
use mlgrf_core::posterior::{generate_observations, CoarsestSampler, DarcyPosterior, PriorSpec};
use mlgrf_core::rng::{Purpose, SeedTree, StreamId};
use mlgrf_core::HierarchicalSampler;

/// The benchmark prior: correlation length 0.3, variance 0.1.
pub fn prior(h0: f64, finest: usize, coarsest: CoarsestSampler) -> PriorSpec {
    PriorSpec {
        h0,
        finest,
        correlation_length: 0.3,
        sigma2: 0.1,
        coarsest,
    }
}

/// A full noise stack up to `level`.
pub fn noise_stack(sampler: &HierarchicalSampler, level: usize, seed: u64) -> Vec<Vec<f64>> {
    let seeds = SeedTree::new(seed);
    (0..=level)
        .map(|l| seeds.normals(StreamId::new(0, l, 0, Purpose::Sample), sampler.noise_dim(l)))
        .collect()
}

pub fn observations(prior: &PriorSpec) -> ObservationSet {
    generate_observations(prior, 0.1, 1).expect("synthetic data").observations
}

pub fn posterior(prior: &PriorSpec) -> DarcyPosterior {
    let obs = observations(prior);
    DarcyPosterior::new(prior.build_sampler().expect("sampler"), obs).expect("posterior")
}
