//! The Darcy inverse problem as a hierarchical posterior: prior GRF noise
//! stacks mapped to log-permeability, then through the flow solver to the
//! likelihood of pressure observations.

use crate::darcy::{
    lattice_points, log_likelihood, project_permeability, DarcySolver, DirichletData, ObservationOperator,
    ObservationSet,
};
use crate::error::{Error, Result};
use crate::fem::assemble_spde_operator;
use crate::grf::{spde_sample, HierarchicalSampler, WhiteNoise};
use crate::mcmc::{Evaluation, HierarchicalModel};
use crate::mesh::{cells_per_side, Hierarchy, MeshLevel};
use crate::rng::{Purpose, SeedTree, StreamId};

/// How the coarsest level of the prior is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoarsestSampler {
    Spde,
    Kl { modes: usize },
}

/// Prior and discretization parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorSpec {
    pub h0: f64,
    /// Index of the finest level.
    pub finest: usize,
    pub correlation_length: f64,
    pub sigma2: f64,
    pub coarsest: CoarsestSampler,
}

impl PriorSpec {
    pub fn kappa(&self) -> f64 {
        1.0 / self.correlation_length
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    pub fn finest_h(&self) -> f64 {
        self.h0 * 0.5f64.powi(self.finest as i32)
    }

    pub fn build_sampler(&self) -> Result<HierarchicalSampler> {
        if !(self.correlation_length > 0.0) {
            return Err(Error::invalid(format!(
                "correlation length must be positive, got {}",
                self.correlation_length
            )));
        }
        if !(self.sigma2 >= 0.0) {
            return Err(Error::invalid(format!("sigma2 must be non-negative, got {}", self.sigma2)));
        }
        let kl = match self.coarsest {
            CoarsestSampler::Spde => None,
            CoarsestSampler::Kl { modes } => Some(modes),
        };
        HierarchicalSampler::new(Hierarchy::build(self.h0, self.finest)?, self.kappa(), self.sigma(), kl)
    }
}

pub struct DarcyPosterior {
    pub sampler: HierarchicalSampler,
    pub solvers: Vec<DarcySolver>,
    pub observation_ops: Vec<ObservationOperator>,
    pub observations: ObservationSet,
    pub bc: DirichletData,
    /// Return fields and pressures with every evaluation.
    pub keep_fields: bool,
}

impl DarcyPosterior {
    pub fn new(sampler: HierarchicalSampler, observations: ObservationSet) -> Result<Self> {
        observations.validate()?;
        let levels = &sampler.hierarchy.levels;
        let solvers = levels.iter().map(DarcySolver::new).collect::<Result<Vec<_>>>()?;
        let observation_ops = levels
            .iter()
            .map(|m| ObservationOperator::new(m, &observations.points))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sampler,
            solvers,
            observation_ops,
            observations,
            bc: DirichletData::default(),
            keep_fields: false,
        })
    }

    pub fn mesh(&self, level: usize) -> &MeshLevel {
        &self.sampler.hierarchy.levels[level]
    }

    /// Forward map and likelihood for a nodal field on `level`.
    pub fn forward(&self, level: usize, theta: Vec<f64>) -> Result<Evaluation> {
        let k = project_permeability(self.mesh(level), &theta)?;
        let solver = &self.solvers[level];
        let sol = solver.solve(&k, self.bc)?;
        let y = self.observation_ops[level].apply(&sol.p);
        let (field, pressure) = if self.keep_fields { (theta, sol.p.clone()) } else { (Vec::new(), Vec::new()) };
        Ok(Evaluation {
            loglik: log_likelihood(&y, &self.observations)?,
            qoi: solver.compute_qoi(&sol),
            field,
            pressure,
        })
    }
}

impl HierarchicalModel for DarcyPosterior {
    fn num_levels(&self) -> usize {
        self.sampler.num_levels()
    }

    fn noise_dim(&self, level: usize) -> usize {
        self.sampler.noise_dim(level)
    }

    fn evaluate(&self, noise: &[Vec<f64>]) -> Result<Evaluation> {
        let theta = self.sampler.field(noise)?.theta;
        self.forward(noise.len() - 1, theta)
    }
}

/// Synthetic data: one SPDE field on a mesh one refinement finer than the
/// finest level, the Darcy pressure at the 10×10 lattice, plus
/// `N(0, sigma_eta²)` noise.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub observations: ObservationSet,
    pub reference_mesh: MeshLevel,
    pub reference_field: Vec<f64>,
    pub reference_pressure: Vec<f64>,
    pub reference_qoi: f64,
}

pub fn generate_observations(prior: &PriorSpec, sigma_eta: f64, seed: u64) -> Result<SyntheticData> {
    if !(sigma_eta >= 0.0) {
        return Err(Error::invalid(format!("sigma_eta must be non-negative, got {sigma_eta}")));
    }
    let reference_h = 0.5 * prior.finest_h();
    let mesh = MeshLevel::unit_square(cells_per_side(reference_h)?, prior.finest + 1)?;
    let ops = assemble_spde_operator(&mesh, prior.kappa(), 1.0, prior.sigma())?;
    let seeds = SeedTree::new(seed);
    let xi = WhiteNoise {
        level: mesh.level_index,
        xi: seeds.normals(StreamId::new(0, 0, 0, Purpose::Reference), mesh.num_nodes()),
    };
    let theta = spde_sample(&ops, &xi)?.theta;
    let solver = DarcySolver::new(&mesh)?;
    let sol = solver.solve(&project_permeability(&mesh, &theta)?, DirichletData::default())?;
    let points = lattice_points(10);
    let clean = ObservationOperator::new(&mesh, &points)?.apply(&sol.p);
    let noise = seeds.normals(StreamId::new(0, 0, 0, Purpose::ObservationNoise), clean.len());
    let values = clean.iter().zip(noise).map(|(v, z)| v + sigma_eta * z).collect();
    Ok(SyntheticData {
        observations: ObservationSet {
            points,
            values,
            sigma_eta,
            reference_h,
            seed,
        },
        reference_qoi: solver.compute_qoi(&sol),
        reference_mesh: mesh,
        reference_field: theta,
        reference_pressure: sol.p,
    })
}
