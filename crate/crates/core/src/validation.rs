//! Self-check suite over tiny hierarchies: transfer identities, the
//! white-noise covariance of both decompositions and the Darcy analytic case.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::darcy::{DarcySolver, DirichletData};
use crate::error::Result;
use crate::fem::{assemble_lumped_mass, assemble_mass};
use crate::grf::{CoarseSampler, HierarchicalSampler};
use crate::mesh::{Hierarchy, MeshLevel};

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub lumped_mass: bool,
    pub checks: Vec<IdentityCheck>,
    pub all_passed: bool,
}

struct Collector(Vec<IdentityCheck>);

impl Collector {
    fn push(&mut self, name: String, residual: f64, tolerance: f64) {
        self.0.push(IdentityCheck {
            name,
            residual,
            tolerance,
            passed: residual <= tolerance,
        });
    }
}

fn forcing_covariance_residual(sampler: &HierarchicalSampler) -> Result<f64> {
    let dims = [sampler.noise_dim(0), sampler.noise_dim(1)];
    let mut t = DMatrix::zeros(sampler.ops[1].num_nodes(), dims[0] + dims[1]);
    let mut col = 0;
    for (l, &d) in dims.iter().enumerate() {
        for k in 0..d {
            let mut noise = vec![vec![0.0; dims[0]], vec![0.0; dims[1]]];
            noise[l][k] = 1.0;
            t.set_column(col, &DVector::from_vec(sampler.forcing(&noise)?));
            col += 1;
        }
    }
    let minv = sampler.ops[1]
        .mass
        .to_dense()
        .try_inverse()
        .ok_or_else(|| crate::Error::Factorization("singular mass matrix".into()))?;
    let cov = &minv * &t * t.transpose() * &minv;
    Ok((cov - &minv).amax() / minv.amax())
}

/// Runs every identity with residual tolerance `1e-10`. With `lumped_mass`
/// the transfer identities use row-sum lumped mass matrices, which breaks
/// `Π P = Id`.
pub fn run_identity_suite(lumped_mass: bool) -> Result<ValidationReport> {
    const TOL: f64 = 1e-10;
    let kappa = 1.0 / 0.3;
    let mut c = Collector(Vec::new());
    for h0 in [0.5, 0.25] {
        let hier = Hierarchy::build(h0, 1)?;
        let mass = |m: &MeshLevel| if lumped_mass { assemble_lumped_mass(m) } else { assemble_mass(m) };
        let mc = mass(&hier.levels[0]).to_dense();
        let mf = mass(&hier.levels[1]).to_dense();
        let p = hier.transfers[0].p.to_dense();
        let n0 = mc.nrows();
        let pi = mc.clone().try_inverse().unwrap_or_else(|| DMatrix::zeros(n0, n0)) * p.transpose() * &mf;
        c.push(format!("h0={h0}: restriction after prolongation is identity"), (&pi * &p - DMatrix::identity(n0, n0)).amax(), TOL);
        c.push(format!("h0={h0}: Galerkin coarse mass"), (p.transpose() * &mf * &p - &mc).amax() / mc.amax(), TOL);
        let ppi = &p * &pi;
        c.push(format!("h0={h0}: prolongation-restriction idempotent"), (&ppi * &ppi - &ppi).amax(), TOL);

        let spde = HierarchicalSampler::new(hier.clone(), kappa, 1.0, None)?;
        c.push(format!("h0={h0}: multigrid noise covariance"), forcing_covariance_residual(&spde)?, TOL);
        for m in [1, 3, n0] {
            let kl = HierarchicalSampler::new(hier.clone(), kappa, 1.0, Some(m))?;
            if let CoarseSampler::Kl(basis) = &kl.coarse {
                let m0 = kl.ops[0].mass.to_dense();
                let q = &basis.psi * basis.psi.transpose() * &m0;
                let pqpi = &p * &q * &pi;
                c.push(format!("h0={h0}, m={m}: KL projector idempotent"), (&pqpi * &pqpi - &pqpi).amax(), TOL);
                let eye = DMatrix::<f64>::identity(m, m);
                c.push(
                    format!("h0={h0}, m={m}: KL noise modes mass-orthonormal"),
                    (basis.psi.transpose() * &m0 * &basis.psi - eye).amax(),
                    TOL,
                );
            }
            c.push(format!("h0={h0}, m={m}: KL-SPDE noise covariance"), forcing_covariance_residual(&kl)?, TOL);
        }
    }
    let mesh = MeshLevel::unit_square(10, 0)?;
    let solver = DarcySolver::new(&mesh)?;
    let sol = solver.solve(&vec![1.0; mesh.num_elements()], DirichletData::default())?;
    c.push("Darcy k=1: |Q - 1|".into(), (solver.compute_qoi(&sol) - 1.0).abs(), 1e-8);
    let affine = (0..mesh.num_elements())
        .map(|e| (sol.p[e] - (mesh.centroid(e)[0] - 1.0)).abs())
        .fold(0.0, f64::max);
    c.push("Darcy k=1: pressure equals x - 1".into(), affine, TOL);
    c.push("Darcy k=1: divergence".into(), sol.divergence_residual, 1e-8);
    let all_passed = c.0.iter().all(|x| x.passed);
    Ok(ValidationReport {
        lumped_mass,
        checks: c.0,
        all_passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistent_mass_passes_everything() {
        let r = run_identity_suite(false).unwrap();
        assert!(r.all_passed, "{:#?}", r.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>());
    }

    #[test]
    fn lumped_mass_breaks_restriction_identity() {
        let r = run_identity_suite(true).unwrap();
        assert!(!r.all_passed);
        let pi_p = r.checks.iter().find(|c| c.name.contains("restriction after prolongation")).unwrap();
        assert!(!pi_p.passed);
    }
}
