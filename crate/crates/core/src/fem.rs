//! Bilinear (Q1) finite element operators for the Matérn SPDE
//! `(κ² − Δ) θ = g W` with natural Neumann boundary conditions.

use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::linalg::{BandCholesky, SpdSolver};
use crate::mesh::MeshLevel;
use crate::sparse::{CsrMatrix, TripletBuilder};

/// Spatial dimension of every mesh in this crate.
pub const DIM: usize = 2;

const GAUSS_2: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Reference Q1 shape functions on `[0,1]²`, nodes ordered ll, lr, ur, ul.
fn shape(s: f64, t: f64) -> [f64; 4] {
    [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t]
}

fn shape_grad(s: f64, t: f64) -> [[f64; 2]; 4] {
    [
        [-(1.0 - t), -(1.0 - s)],
        [1.0 - t, -s],
        [t, s],
        [-t, 1.0 - s],
    ]
}

/// Element mass matrix of a square of side `h`, by 2×2 Gauss quadrature.
pub fn element_mass(h: f64) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for &s in &GAUSS_2 {
        for &t in &GAUSS_2 {
            let phi = shape(s, t);
            for a in 0..4 {
                for b in 0..4 {
                    m[a][b] += 0.25 * h * h * phi[a] * phi[b];
                }
            }
        }
    }
    m
}

/// Element stiffness matrix of a square (independent of `h` in 2D).
pub fn element_stiffness(h: f64) -> [[f64; 4]; 4] {
    let mut k = [[0.0; 4]; 4];
    for &s in &GAUSS_2 {
        for &t in &GAUSS_2 {
            let g = shape_grad(s, t);
            for a in 0..4 {
                for b in 0..4 {
                    // reference gradients scale by 1/h, the Jacobian by h²
                    let dot = (g[a][0] * g[b][0] + g[a][1] * g[b][1]) / (h * h);
                    k[a][b] += 0.25 * h * h * dot;
                }
            }
        }
    }
    k
}

fn assemble(mesh: &MeshLevel, local: &[[f64; 4]; 4]) -> CsrMatrix {
    let n = mesh.num_nodes();
    let mut b = TripletBuilder::with_capacity(n, n, 16 * mesh.num_elements());
    for el in &mesh.elements {
        for a in 0..4 {
            for c in 0..4 {
                b.push(el[a], el[c], local[a][c]);
            }
        }
    }
    b.build()
}

/// Consistent mass matrix `M_ij = ∫ φ_i φ_j`.
pub fn assemble_mass(mesh: &MeshLevel) -> CsrMatrix {
    assemble(mesh, &element_mass(mesh.h))
}

/// Row-sum lumped mass. Only used to demonstrate that the multilevel
/// identities need the consistent mass matrix.
pub fn assemble_lumped_mass(mesh: &MeshLevel) -> CsrMatrix {
    let m = assemble_mass(mesh);
    let diag: Vec<f64> = (0..m.nrows()).map(|i| m.row(i).map(|(_, v)| v).sum()).collect();
    CsrMatrix::from_diagonal(&diag)
}

/// Stiffness matrix `S_ij = ∫ ∇φ_i · ∇φ_j` (pure Neumann).
pub fn assemble_stiffness(mesh: &MeshLevel) -> CsrMatrix {
    assemble(mesh, &element_stiffness(mesh.h))
}

/// Matérn normalization `g = (4π)^{d/4} κ^ν √(Γ(ν + d/2) / Γ(ν))`, which
/// gives the SPDE solution unit marginal variance in free space.
pub fn matern_normalization(dim: usize, nu: f64, kappa: f64) -> f64 {
    let d = dim as f64;
    (4.0 * std::f64::consts::PI).powf(d / 4.0) * kappa.powf(nu) * (gamma(nu + d / 2.0) / gamma(nu)).sqrt()
}

/// `F` with `F Fᵀ = M`, as a banded lower-triangular Cholesky factor.
pub fn mass_factor(mass: &CsrMatrix) -> Result<BandCholesky> {
    BandCholesky::factor(mass)
}

/// Per-level operators of the SPDE sampler.
#[derive(Debug, Clone)]
pub struct SpdeOperators {
    pub level: usize,
    pub mass: CsrMatrix,
    pub stiffness: CsrMatrix,
    /// `A = S + κ² M`
    pub a: CsrMatrix,
    /// Lower-triangular `F` with `F Fᵀ = M`; also serves as the mass solver.
    pub factor: BandCholesky,
    pub a_solver: SpdSolver,
    pub kappa: f64,
    pub g: f64,
    pub sigma: f64,
}

impl SpdeOperators {
    pub fn num_nodes(&self) -> usize {
        self.mass.nrows()
    }

    /// `M⁻¹ b` through the mass factor.
    pub fn mass_solve(&self, b: &[f64]) -> Vec<f64> {
        self.factor.solve(b)
    }

    /// `F ξ`.
    pub fn apply_factor(&self, xi: &[f64]) -> Vec<f64> {
        self.factor.mul_lower(xi)
    }

    /// The explicit sparse factor `F`.
    pub fn factor_matrix(&self) -> CsrMatrix {
        self.factor.lower_factor()
    }
}

/// Assembles `M`, `S`, `A = S + κ²M`, the mass factor and `g` on one mesh.
/// Only the integer-order case `d = 2, ν = 1` is supported.
pub fn assemble_spde_operator(mesh: &MeshLevel, kappa: f64, nu: f64, sigma: f64) -> Result<SpdeOperators> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::invalid(format!("kappa must be positive, got {kappa}")));
    }
    if nu != 1.0 {
        return Err(Error::invalid(format!(
            "smoothness nu = {nu} gives a fractional operator in 2D; only nu = 1 is supported"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    let mass = assemble_mass(mesh);
    let stiffness = assemble_stiffness(mesh);
    let a = stiffness.add_scaled(kappa * kappa, &mass);
    let factor = mass_factor(&mass)?;
    Ok(SpdeOperators {
        level: mesh.level_index,
        a_solver: SpdSolver::new(a.clone()),
        mass,
        stiffness,
        a,
        factor,
        kappa,
        g: matern_normalization(DIM, nu, kappa),
        sigma,
    })
}
