//! Gaussian random field samplers and the hierarchical noise decompositions.
//!
//! Fields are driven through the forcing vector `ζ = M W ~ N(0, M)`. On a
//! single level `ζ = F ξ` with `F Fᵀ = M` and the field is
//! `θ = σ g A⁻¹ ζ`. Across levels the forcing on the fine level is composed
//! from the coarse forcing and an independent fine white noise so that the
//! composed `W̃ = M⁻¹ ζ̃` has covariance exactly `M⁻¹`:
//!
//! * multigrid: `ζ̃_L = Πᵀ ζ_ℓ + (I − Πᵀ Pᵀ) ζ_L`, with `Πᵀ = M_L P M_ℓ⁻¹`;
//! * KL–SPDE: `ζ̃_L = M_L P Ψ ξ̂ + (I − Πᵀ M_ℓ Ψ Ψᵀ Pᵀ) ζ_L`, where the white
//!   noise modes `Ψ` are M-orthonormal so `Ψ Ψᵀ M_ℓ` is an M-orthogonal
//!   projector.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fem::SpdeOperators;
use crate::linalg::sym_eig;
use crate::mesh::{Hierarchy, TransferOperator};
use crate::rng::{SeedTree, StreamId};

#[derive(Debug, Clone, PartialEq)]
pub struct WhiteNoise {
    pub level: usize,
    pub xi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldRealization {
    pub level: usize,
    pub theta: Vec<f64>,
}

/// iid standard normals of length `len` from the addressed stream.
pub fn sample_white_noise(level: usize, len: usize, seeds: &SeedTree, stream: StreamId) -> WhiteNoise {
    WhiteNoise {
        level,
        xi: seeds.normals(stream, len),
    }
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

/// `θ = σ g A⁻¹ ζ`.
pub fn field_from_forcing(ops: &SpdeOperators, zeta: &[f64]) -> Result<FieldRealization> {
    check_len("forcing length", ops.num_nodes(), zeta.len())?;
    let mut theta = ops.a_solver.solve(zeta)?;
    let s = ops.sigma * ops.g;
    theta.iter_mut().for_each(|t| *t *= s);
    Ok(FieldRealization {
        level: ops.level,
        theta,
    })
}

/// Single-level SPDE sample `θ = σ g A⁻¹ F ξ`.
pub fn spde_sample(ops: &SpdeOperators, xi: &WhiteNoise) -> Result<FieldRealization> {
    check_len("white noise length", ops.num_nodes(), xi.xi.len())?;
    field_from_forcing(ops, &ops.apply_factor(&xi.xi))
}

/// Truncated discrete KL basis of the coarse-level covariance
/// `C₀ = g² A⁻¹ M A⁻¹`.
#[derive(Debug, Clone)]
pub struct KlBasis {
    pub m: usize,
    /// Eigenvalues of `C₀ M` in non-increasing order.
    pub lambdas: Vec<f64>,
    /// Field modes as columns, `Φᵀ M Φ = I`.
    pub phi: DMatrix<f64>,
    /// White-noise modes as columns, `ψ_i = (√λ_i / g) M⁻¹ A φ_i`, `Ψᵀ M Ψ = I`.
    pub psi: DMatrix<f64>,
    pub sigma: f64,
    pub level: usize,
}

/// Dense `C = g² A⁻¹ M A⁻¹` (σ excluded). Only sensible on small levels.
pub fn discrete_covariance(ops: &SpdeOperators) -> Result<DMatrix<f64>> {
    let n = ops.num_nodes();
    let mut ainv = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = ops.a_solver.solve(&e)?;
        ainv.set_column(j, &DVector::from_vec(col));
    }
    let m = ops.mass.to_dense();
    let c = (&ainv * m * &ainv) * (ops.g * ops.g);
    Ok((&c + c.transpose()) * 0.5)
}

/// Eigen-decomposes `Fᵀ C₀ F` and maps back to M-orthonormal field modes
/// `φ = F⁻ᵀ y`; keeps the `m` leading modes.
pub fn compute_kl_basis(ops: &SpdeOperators, m: usize) -> Result<KlBasis> {
    let n = ops.num_nodes();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("KL truncation m = {m} must lie in 1..={n}")));
    }
    let c = discrete_covariance(ops)?;
    let f = ops.factor_matrix().to_dense();
    let h = f.transpose() * c * &f;
    let h = (&h + h.transpose()) * 0.5;
    let (vals, vecs) = sym_eig(&h)?;
    let mut phi = DMatrix::zeros(n, m);
    let mut psi = DMatrix::zeros(n, m);
    let mut lambdas = Vec::with_capacity(m);
    for k in 0..m {
        let lambda = vals[k].max(0.0);
        let mut col: Vec<f64> = vecs.column(k).iter().copied().collect();
        ops.factor.solve_upper_in_place(&mut col);
        let a_phi = ops.a.mul_vec(&col);
        let mut w = ops.mass_solve(&a_phi);
        let scale = lambda.sqrt() / ops.g;
        w.iter_mut().for_each(|v| *v *= scale);
        phi.set_column(k, &DVector::from_vec(col));
        psi.set_column(k, &DVector::from_vec(w));
        lambdas.push(lambda);
    }
    Ok(KlBasis {
        m,
        lambdas,
        phi,
        psi,
        sigma: ops.sigma,
        level: ops.level,
    })
}

impl KlBasis {
    pub fn num_nodes(&self) -> usize {
        self.phi.nrows()
    }

    /// `Ψ ξ̂`.
    pub fn noise_modes(&self, xi_hat: &[f64]) -> Result<Vec<f64>> {
        check_len("KL coefficients", self.m, xi_hat.len())?;
        Ok((&self.psi * DVector::from_column_slice(xi_hat)).as_slice().to_vec())
    }

    /// `Ψᵀ v`.
    pub fn project_noise(&self, v: &[f64]) -> Vec<f64> {
        (self.psi.transpose() * DVector::from_column_slice(v)).as_slice().to_vec()
    }
}

/// `θ₀ = σ Σ √λ_i ξ̂_i φ_i`; no linear solve.
pub fn kl_sample(basis: &KlBasis, xi_hat: &[f64]) -> Result<FieldRealization> {
    check_len("KL coefficients", basis.m, xi_hat.len())?;
    let coeffs = DVector::from_iterator(
        basis.m,
        xi_hat.iter().zip(&basis.lambdas).map(|(x, l)| basis.sigma * l.sqrt() * x),
    );
    Ok(FieldRealization {
        level: basis.level,
        theta: (&basis.phi * coeffs).as_slice().to_vec(),
    })
}

/// Forcing `ζ₀ = M₀ Ψ ξ̂` that reproduces [`kl_sample`] through the SPDE path.
pub fn kl_forcing(basis: &KlBasis, ops: &SpdeOperators, xi_hat: &[f64]) -> Result<Vec<f64>> {
    Ok(ops.mass.mul_vec(&basis.noise_modes(xi_hat)?))
}

/// Fine-level forcing split into its coarse-space term and its complement
/// term; the multilevel forcing is their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingSplit {
    pub coarse_term: Vec<f64>,
    pub complement_term: Vec<f64>,
}

impl ForcingSplit {
    pub fn total(&self) -> Vec<f64> {
        self.coarse_term
            .iter()
            .zip(&self.complement_term)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// `Πᵀ v = M_L P M_ℓ⁻¹ v`.
fn restriction_transpose(coarse: &SpdeOperators, fine: &SpdeOperators, p: &TransferOperator, v: &[f64]) -> Vec<f64> {
    fine.mass.mul_vec(&p.prolong(&coarse.mass_solve(v)))
}

/// Multigrid decomposition `ζ̃_L = Πᵀ ζ_ℓ + (I − Πᵀ Pᵀ) F_L ξ_L`.
pub fn mg_decompose(
    zeta_coarse: &[f64],
    xi_fine: &WhiteNoise,
    coarse: &SpdeOperators,
    fine: &SpdeOperators,
    p: &TransferOperator,
) -> Result<ForcingSplit> {
    if p.coarse != coarse.level || p.fine != fine.level || xi_fine.level != fine.level {
        return Err(Error::invalid(format!(
            "level mismatch: transfer {}->{}, operators {}->{}, noise on {}",
            p.coarse, p.fine, coarse.level, fine.level, xi_fine.level
        )));
    }
    check_len("coarse forcing", coarse.num_nodes(), zeta_coarse.len())?;
    check_len("fine white noise", fine.num_nodes(), xi_fine.xi.len())?;
    let zeta_fine = fine.apply_factor(&xi_fine.xi);
    let coarse_term = restriction_transpose(coarse, fine, p, zeta_coarse);
    let lifted = restriction_transpose(coarse, fine, p, &p.p.mul_vec_transpose(&zeta_fine));
    let complement_term = zeta_fine.iter().zip(&lifted).map(|(z, l)| z - l).collect();
    Ok(ForcingSplit {
        coarse_term,
        complement_term,
    })
}

/// KL–SPDE decomposition
/// `ζ̃_L = M_L P Ψ ξ̂ + ζ_L − M_L P Ψ (Ψᵀ Pᵀ ζ_L)`, `ζ_L = F_L ξ_L`.
pub fn kl_spde_decompose(
    xi_hat: &[f64],
    xi_fine: &WhiteNoise,
    basis: &KlBasis,
    fine: &SpdeOperators,
    p: &TransferOperator,
) -> Result<ForcingSplit> {
    if p.coarse != basis.level || p.fine != fine.level || xi_fine.level != fine.level {
        return Err(Error::invalid(format!(
            "level mismatch: transfer {}->{}, basis on {}, operators on {}, noise on {}",
            p.coarse, p.fine, basis.level, fine.level, xi_fine.level
        )));
    }
    check_len("coarse nodes", basis.num_nodes(), p.p.ncols())?;
    check_len("fine white noise", fine.num_nodes(), xi_fine.xi.len())?;
    let zeta_fine = fine.apply_factor(&xi_fine.xi);
    let coarse_term = fine.mass.mul_vec(&p.prolong(&basis.noise_modes(xi_hat)?));
    let coeffs = basis.project_noise(&p.p.mul_vec_transpose(&zeta_fine));
    let removed = fine.mass.mul_vec(&p.prolong(&basis.noise_modes(&coeffs)?));
    let complement_term = zeta_fine.iter().zip(&removed).map(|(z, r)| z - r).collect();
    Ok(ForcingSplit {
        coarse_term,
        complement_term,
    })
}

/// How the coarsest level is sampled.
#[derive(Debug, Clone)]
pub enum CoarseSampler {
    Spde,
    Kl(KlBasis),
}

/// The full hierarchy of SPDE operators plus the coarsest-level sampler.
/// Immutable once built; shared read-only by all chains.
#[derive(Debug, Clone)]
pub struct HierarchicalSampler {
    pub hierarchy: Hierarchy,
    pub ops: Vec<SpdeOperators>,
    pub coarse: CoarseSampler,
}

/// Field on the top level of a noise stack, split into the lift of the
/// next-coarser forcing and the complement contribution.
#[derive(Debug, Clone)]
pub struct FieldComponents {
    pub coarse_lift: FieldRealization,
    pub complement: FieldRealization,
    pub total: FieldRealization,
}

impl HierarchicalSampler {
    pub fn new(hierarchy: Hierarchy, kappa: f64, sigma: f64, kl_modes: Option<usize>) -> Result<Self> {
        let ops = hierarchy
            .levels
            .iter()
            .map(|mesh| crate::fem::assemble_spde_operator(mesh, kappa, 1.0, sigma))
            .collect::<Result<Vec<_>>>()?;
        let coarse = match kl_modes {
            Some(m) => CoarseSampler::Kl(compute_kl_basis(&ops[0], m)?),
            None => CoarseSampler::Spde,
        };
        Ok(Self {
            hierarchy,
            ops,
            coarse,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.ops.len()
    }

    /// Length of the white-noise vector owned by `level`.
    pub fn noise_dim(&self, level: usize) -> usize {
        match (&self.coarse, level) {
            (CoarseSampler::Kl(b), 0) => b.m,
            _ => self.ops[level].num_nodes(),
        }
    }

    fn check_stack(&self, noise: &[Vec<f64>]) -> Result<usize> {
        if noise.is_empty() || noise.len() > self.num_levels() {
            return Err(Error::invalid(format!(
                "noise stack has {} levels, hierarchy has {}",
                noise.len(),
                self.num_levels()
            )));
        }
        for (l, xi) in noise.iter().enumerate() {
            check_len("level noise", self.noise_dim(l), xi.len())?;
        }
        Ok(noise.len() - 1)
    }

    fn coarsest_forcing(&self, xi0: &[f64]) -> Result<Vec<f64>> {
        match &self.coarse {
            CoarseSampler::Spde => Ok(self.ops[0].apply_factor(xi0)),
            CoarseSampler::Kl(b) => kl_forcing(b, &self.ops[0], xi0),
        }
    }

    fn decompose(&self, level: usize, zeta_coarse: &[f64], xi0: &[f64], xi: &[f64]) -> Result<ForcingSplit> {
        let noise = WhiteNoise {
            level,
            xi: xi.to_vec(),
        };
        let p = &self.hierarchy.transfers[level - 1];
        match (&self.coarse, level) {
            (CoarseSampler::Kl(b), 1) => kl_spde_decompose(xi0, &noise, b, &self.ops[1], p),
            _ => mg_decompose(zeta_coarse, &noise, &self.ops[level - 1], &self.ops[level], p),
        }
    }

    /// Multilevel forcing `ζ̃` on level `noise.len() - 1`.
    pub fn forcing(&self, noise: &[Vec<f64>]) -> Result<Vec<f64>> {
        let top = self.check_stack(noise)?;
        let mut zeta = self.coarsest_forcing(&noise[0])?;
        for l in 1..=top {
            zeta = self.decompose(l, &zeta, &noise[0], &noise[l])?.total();
        }
        Ok(zeta)
    }

    /// Field on level `noise.len() - 1` from the stacked per-level noise.
    pub fn field(&self, noise: &[Vec<f64>]) -> Result<FieldRealization> {
        let top = self.check_stack(noise)?;
        if top == 0 {
            if let CoarseSampler::Kl(b) = &self.coarse {
                return kl_sample(b, &noise[0]);
            }
        }
        field_from_forcing(&self.ops[top], &self.forcing(noise)?)
    }

    /// Coarse lift / complement / total split of the top-level field.
    pub fn field_components(&self, noise: &[Vec<f64>]) -> Result<FieldComponents> {
        let top = self.check_stack(noise)?;
        if top == 0 {
            let total = self.field(noise)?;
            let zero = FieldRealization {
                level: 0,
                theta: vec![0.0; total.theta.len()],
            };
            return Ok(FieldComponents {
                coarse_lift: total.clone(),
                complement: zero,
                total,
            });
        }
        let zeta_coarse = self.forcing(&noise[..top])?;
        let split = self.decompose(top, &zeta_coarse, &noise[0], &noise[top])?;
        let ops = &self.ops[top];
        Ok(FieldComponents {
            coarse_lift: field_from_forcing(ops, &split.coarse_term)?,
            complement: field_from_forcing(ops, &split.complement_term)?,
            total: field_from_forcing(ops, &split.total())?,
        })
    }
}

/// Field on level `noise.len() - 1` composed recursively from level 0.
pub fn multilevel_field(sampler: &HierarchicalSampler, noise: &[Vec<f64>]) -> Result<FieldRealization> {
    sampler.field(noise)
}

/// `x,y,theta` per node, preceded by `# level=.. h=..` and any extra
/// comment lines.
pub fn write_field_csv<W: std::io::Write>(
    mesh: &crate::mesh::MeshLevel,
    theta: &[f64],
    extra_header: &[String],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "# level={} h={}", mesh.level_index, mesh.h)?;
    for line in extra_header {
        writeln!(w, "# {line}")?;
    }
    writeln!(w, "x,y,theta")?;
    for (p, t) in mesh.nodes.iter().zip(theta) {
        writeln!(w, "{},{},{}", p[0], p[1], t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_spde_operator;
    use crate::mesh::MeshLevel;
    use crate::rng::Purpose;

    fn ops_on(n: usize) -> SpdeOperators {
        assemble_spde_operator(&MeshLevel::unit_square(n, 0).unwrap(), 1.0 / 0.3, 1.0, 0.1f64.sqrt()).unwrap()
    }

    #[test]
    fn field_csv_layout() {
        let mesh = crate::mesh::MeshLevel::unit_square(1, 2).unwrap();
        let mut buf = Vec::new();
        write_field_csv(&mesh, &[1.0, 2.0, 3.0, 4.0], &["seed=5".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[..3], ["# level=2 h=1", "# seed=5", "x,y,theta"]);
        assert_eq!(lines[3], "0,0,1");
        assert_eq!(lines.len(), 7);
    }

    #[test]
    fn white_noise_is_deterministic_per_stream() {
        let seeds = SeedTree::new(9);
        let id = StreamId::new(0, 0, 3, Purpose::Sample);
        assert_eq!(sample_white_noise(0, 16, &seeds, id), sample_white_noise(0, 16, &seeds, id));
    }

    #[test]
    fn white_noise_moments() {
        let seeds = SeedTree::new(11);
        let n = 100_000;
        let xi = sample_white_noise(0, n, &seeds, StreamId::new(0, 0, 0, Purpose::Sample)).xi;
        let mean = xi.iter().sum::<f64>() / n as f64;
        let var = xi.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() <= 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() <= 3.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn spde_sample_is_linear() {
        let ops = ops_on(6);
        let zero = WhiteNoise { level: 0, xi: vec![0.0; ops.num_nodes()] };
        assert!(spde_sample(&ops, &zero).unwrap().theta.iter().all(|&t| t == 0.0));
        let seeds = SeedTree::new(1);
        let xi = sample_white_noise(0, ops.num_nodes(), &seeds, StreamId::new(0, 0, 0, Purpose::Sample));
        let doubled = WhiteNoise { level: 0, xi: xi.xi.iter().map(|v| 2.0 * v).collect() };
        let a = spde_sample(&ops, &xi).unwrap().theta;
        let b = spde_sample(&ops, &doubled).unwrap().theta;
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
        let short = WhiteNoise { level: 0, xi: vec![0.0; 3] };
        assert!(spde_sample(&ops, &short).is_err());
    }

    #[test]
    fn kl_single_term_and_zero() {
        let ops = ops_on(4);
        let basis = compute_kl_basis(&ops, 5).unwrap();
        let mut e1 = vec![0.0; 5];
        e1[0] = 1.0;
        let t = kl_sample(&basis, &e1).unwrap().theta;
        let scale = basis.sigma * basis.lambdas[0].sqrt();
        for (i, v) in t.iter().enumerate() {
            assert!((v - scale * basis.phi[(i, 0)]).abs() < 1e-14);
        }
        assert!(kl_sample(&basis, &[0.0; 5]).unwrap().theta.iter().all(|&v| v == 0.0));
        assert!(kl_sample(&basis, &[0.0; 4]).is_err());
        assert!(compute_kl_basis(&ops, 0).is_err());
        assert!(compute_kl_basis(&ops, ops.num_nodes() + 1).is_err());
    }

    #[test]
    fn mg_with_zero_fine_noise_is_pure_lift() {
        let hier = Hierarchy::build(0.5, 1).unwrap();
        let sampler = HierarchicalSampler::new(hier, 1.0 / 0.3, 1.0, None).unwrap();
        let zc: Vec<f64> = (0..9).map(|i| (i as f64).cos()).collect();
        let zero = WhiteNoise { level: 1, xi: vec![0.0; 25] };
        let split = mg_decompose(&zc, &zero, &sampler.ops[0], &sampler.ops[1], &sampler.hierarchy.transfers[0]).unwrap();
        assert!(split.complement_term.iter().all(|&v| v.abs() < 1e-15));
        let expected = restriction_transpose(&sampler.ops[0], &sampler.ops[1], &sampler.hierarchy.transfers[0], &zc);
        assert_eq!(split.coarse_term, expected);
        let wrong = WhiteNoise { level: 0, xi: vec![0.0; 25] };
        assert!(mg_decompose(&zc, &wrong, &sampler.ops[0], &sampler.ops[1], &sampler.hierarchy.transfers[0]).is_err());
    }

    #[test]
    fn field_components_sum_to_total() {
        let hier = Hierarchy::build(0.25, 2).unwrap();
        let sampler = HierarchicalSampler::new(hier, 1.0 / 0.3, 1.0, Some(6)).unwrap();
        let seeds = SeedTree::new(5);
        let noise: Vec<Vec<f64>> = (0..3)
            .map(|l| seeds.normals(StreamId::new(0, l, 0, Purpose::Sample), sampler.noise_dim(l)))
            .collect();
        let c = sampler.field_components(&noise).unwrap();
        for ((a, b), t) in c.coarse_lift.theta.iter().zip(&c.complement.theta).zip(&c.total.theta) {
            assert!((a + b - t).abs() < 1e-12);
        }
        assert_eq!(c.total.theta, multilevel_field(&sampler, &noise).unwrap().theta);
        // zero complement noise leaves only the coarse lift
        let mut quiet = noise.clone();
        quiet[2].iter_mut().for_each(|v| *v = 0.0);
        let c = sampler.field_components(&quiet).unwrap();
        assert!(c.complement.theta.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn one_level_stack_matches_single_level_samplers() {
        let hier = Hierarchy::build(0.25, 1).unwrap();
        let spde = HierarchicalSampler::new(hier.clone(), 1.0 / 0.3, 0.5, None).unwrap();
        let xi: Vec<f64> = (0..25).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let direct = spde_sample(&spde.ops[0], &WhiteNoise { level: 0, xi: xi.clone() }).unwrap();
        assert_eq!(spde.field(&[xi]).unwrap(), direct);
        let kl = HierarchicalSampler::new(hier, 1.0 / 0.3, 0.5, Some(4)).unwrap();
        let coeffs = vec![0.3, -1.0, 2.0, 0.1];
        if let CoarseSampler::Kl(b) = &kl.coarse {
            assert_eq!(kl.field(std::slice::from_ref(&coeffs)).unwrap(), kl_sample(b, &coeffs).unwrap());
        }
    }

    /// Columns of the linear map `[ξ_coarse; ξ_fine] -> ζ̃` on the top level.
    fn forcing_map(sampler: &HierarchicalSampler, top: usize) -> DMatrix<f64> {
        let dims: Vec<usize> = (0..=top).map(|l| sampler.noise_dim(l)).collect();
        let total: usize = dims.iter().sum();
        let n = sampler.ops[top].num_nodes();
        let mut t = DMatrix::zeros(n, total);
        let mut col = 0;
        for (l, &d) in dims.iter().enumerate() {
            for k in 0..d {
                let mut noise: Vec<Vec<f64>> = dims.iter().map(|&m| vec![0.0; m]).collect();
                noise[l][k] = 1.0;
                let z = sampler.forcing(&noise).unwrap();
                t.set_column(col, &DVector::from_vec(z));
                col += 1;
            }
        }
        t
    }

    fn assert_white_noise_covariance(sampler: &HierarchicalSampler, top: usize, tol: f64) {
        let t = forcing_map(sampler, top);
        let m = sampler.ops[top].mass.to_dense();
        let minv = m.clone().try_inverse().unwrap();
        let cov = &minv * &t * t.transpose() * &minv;
        let err = (&cov - &minv).amax() / minv.amax();
        assert!(err <= tol, "relative covariance error {err}");
    }

    #[test]
    fn multigrid_composition_has_white_noise_covariance() {
        let sampler = HierarchicalSampler::new(Hierarchy::build(0.25, 2).unwrap(), 1.0 / 0.3, 1.0, None).unwrap();
        assert_white_noise_covariance(&sampler, 1, 1e-10);
        assert_white_noise_covariance(&sampler, 2, 1e-10);
    }

    #[test]
    fn kl_spde_composition_has_white_noise_covariance() {
        let sampler = HierarchicalSampler::new(Hierarchy::build(0.25, 2).unwrap(), 1.0 / 0.3, 1.0, Some(7)).unwrap();
        assert_white_noise_covariance(&sampler, 1, 1e-10);
        assert_white_noise_covariance(&sampler, 2, 1e-10);
    }

    #[test]
    fn kl_modes_are_mass_orthonormal_and_ordered() {
        let ops = ops_on(5);
        let basis = compute_kl_basis(&ops, 12).unwrap();
        let m = ops.mass.to_dense();
        let eye = DMatrix::<f64>::identity(12, 12);
        assert!((basis.phi.transpose() * &m * &basis.phi - &eye).amax() < 1e-10);
        assert!((basis.psi.transpose() * &m * &basis.psi - &eye).amax() < 1e-8);
        assert!(basis.lambdas.windows(2).all(|w| w[0] >= w[1]));
        assert!(basis.lambdas.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn full_kl_reproduces_discrete_covariance() {
        let ops = ops_on(4);
        let n = ops.num_nodes();
        let basis = compute_kl_basis(&ops, n).unwrap();
        let lam = DMatrix::from_diagonal(&DVector::from_vec(basis.lambdas.clone()));
        let c = &basis.phi * lam * basis.phi.transpose();
        let exact = discrete_covariance(&ops).unwrap();
        assert!((c - &exact).amax() <= 1e-10 * exact.amax());
    }

    #[test]
    fn kl_sample_matches_spde_path() {
        let ops = ops_on(5);
        let basis = compute_kl_basis(&ops, 9).unwrap();
        let xi: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let direct = kl_sample(&basis, &xi).unwrap().theta;
        let via = field_from_forcing(&ops, &kl_forcing(&basis, &ops, &xi).unwrap()).unwrap().theta;
        let scale = direct.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, b) in direct.iter().zip(&via) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn kl_projector_is_idempotent_and_recovers_coefficients() {
        let ops = ops_on(6);
        let basis = compute_kl_basis(&ops, 10).unwrap();
        let xi: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
        // Ψᵀ M (Ψ ξ̂) = ξ̂
        let recovered = basis.project_noise(&ops.mass.mul_vec(&basis.noise_modes(&xi).unwrap()));
        for (a, b) in xi.iter().zip(&recovered) {
            assert!((a - b).abs() < 1e-9);
        }
        // Q̂ = Ψ Ψᵀ M applied twice equals once
        let v: Vec<f64> = (0..ops.num_nodes()).map(|i| ((i * 13 % 7) as f64).cos()).collect();
        let q = |x: &[f64]| basis.noise_modes(&basis.project_noise(&ops.mass.mul_vec(x))).unwrap();
        let once = q(&v);
        let twice = q(&once);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::sync::OnceLock;

        fn sampler() -> &'static HierarchicalSampler {
            static S: OnceLock<HierarchicalSampler> = OnceLock::new();
            S.get_or_init(|| HierarchicalSampler::new(Hierarchy::build(0.25, 2).unwrap(), 1.0 / 0.3, 0.7, Some(6)).unwrap())
        }

        fn stack() -> impl Strategy<Value = Vec<Vec<f64>>> {
            let s = sampler();
            (
                prop::collection::vec(-3.0..3.0f64, s.noise_dim(0)),
                prop::collection::vec(-3.0..3.0f64, s.noise_dim(1)),
                prop::collection::vec(-3.0..3.0f64, s.noise_dim(2)),
            )
                .prop_map(|(a, b, c)| vec![a, b, c])
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn field_is_linear_in_noise(a in stack(), b in stack(), t in -2.0..2.0f64) {
                let s = sampler();
                let mix: Vec<Vec<f64>> = a.iter().zip(&b)
                    .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + t * v).collect())
                    .collect();
                let fa = s.field(&a).unwrap().theta;
                let fb = s.field(&b).unwrap().theta;
                let fm = s.field(&mix).unwrap().theta;
                for i in 0..fm.len() {
                    prop_assert!((fa[i] + t * fb[i] - fm[i]).abs() <= 1e-9 * (1.0 + fm[i].abs()));
                }
            }

            #[test]
            fn restriction_inverts_prolongation(v in prop::collection::vec(-5.0..5.0f64, 25)) {
                let s = sampler();
                let p = &s.hierarchy.transfers[0];
                let mc = crate::linalg::SpdSolver::new(s.ops[0].mass.clone());
                let back = crate::mesh::restriction_apply(&p.p, &mc, &s.ops[1].mass, &p.prolong(&v)).unwrap();
                for (a, b) in v.iter().zip(&back) {
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
                }
            }

            #[test]
            fn coarse_lift_depends_only_on_coarse_noise(a in stack(), fine in prop::collection::vec(-3.0..3.0f64, 289)) {
                let s = sampler();
                let mut other = a.clone();
                other[2] = fine;
                let ca = s.field_components(&a).unwrap().coarse_lift.theta;
                let cb = s.field_components(&other).unwrap().coarse_lift.theta;
                prop_assert_eq!(ca, cb);
            }
        }
    }
}
