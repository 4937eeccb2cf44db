//! Lowest-order Raviart–Thomas / piecewise-constant mixed discretization of
//! `k⁻¹ u + ∇p = 0, ∇·u = 0` on the unit square, with pressure prescribed on
//! the left and right sides and no flow through the top and bottom.
//!
//! Flux unknowns are normal flux densities `u·n_e` on edges, with `n_e = +x`
//! on vertical edges and `+y` on horizontal edges. Top and bottom boundary
//! edges carry zero flux and are removed from the system.

use std::io::Write;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, SparseColMatRef, Triplet};
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{BoundaryTag, MeshLevel};

/// Pressure values on the left and right sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirichletData {
    pub left: f64,
    pub right: f64,
}

impl Default for DirichletData {
    fn default() -> Self {
        Self {
            left: -1.0,
            right: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarcySolution {
    /// Normal flux density on every edge (zero on the top and bottom).
    pub u: Vec<f64>,
    /// Element pressures.
    pub p: Vec<f64>,
    /// `‖B u‖_∞`.
    pub divergence_residual: f64,
}

/// `k_e = exp(θ(centroid))`; the bilinear interpolant at the centroid is the
/// mean of the four corner values.
pub fn project_permeability(mesh: &MeshLevel, theta: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != mesh.num_nodes() {
        return Err(Error::DimensionMismatch {
            context: "nodal field",
            expected: mesh.num_nodes(),
            actual: theta.len(),
        });
    }
    Ok(mesh
        .elements
        .iter()
        .map(|el| (0.25 * el.iter().map(|&v| theta[v]).sum::<f64>()).exp())
        .collect())
}

const NONE: usize = usize::MAX;

/// Assembled saddle-point structure for one mesh. The sparsity pattern and
/// its symbolic LU are computed once; each solve only refills the flux mass
/// block and refactors numerically.
pub struct DarcySolver {
    n: usize,
    h: f64,
    num_edges: usize,
    /// edge -> flux unknown, or `NONE` for eliminated edges
    free: Vec<usize>,
    free_edges: Vec<usize>,
    pattern: SparseColMat<usize, f64>,
    symbolic: SymbolicLu<usize>,
    /// Value array with the divergence blocks filled and the mass block zero.
    base_values: Vec<f64>,
    /// Per element, value slots of the (left, right) and (bottom, top) 2×2
    /// mass blocks, row-major.
    mass_slots: Vec<[usize; 8]>,
    /// Per element, its four edges as (edge, sign of `∮ v·n` over the element).
    divergence: Vec<[(usize, f64); 4]>,
}

impl std::fmt::Debug for DarcySolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DarcySolver")
            .field("n", &self.n)
            .field("unknowns", &self.dim())
            .finish()
    }
}

fn slot(pattern: &SparseColMat<usize, f64>, row: usize, col: usize) -> usize {
    let start = pattern.col_ptr()[col];
    let end = pattern.col_ptr()[col + 1];
    let rows = &pattern.row_idx()[start..end];
    start + rows.binary_search(&row).expect("entry in pattern")
}

impl DarcySolver {
    pub fn new(mesh: &MeshLevel) -> Result<Self> {
        let ne = mesh.num_edges();
        let nel = mesh.num_elements();
        let mut free = vec![NONE; ne];
        let mut free_edges = Vec::new();
        for e in 0..ne {
            if !matches!(mesh.edge_tags[e], BoundaryTag::Top | BoundaryTag::Bottom) {
                free[e] = free_edges.len();
                free_edges.push(e);
            }
        }
        let nf = free_edges.len();
        let dim = nf + nel;
        let h = mesh.h;

        let mut divergence = Vec::with_capacity(nel);
        let mut pairs = Vec::with_capacity(nel);
        for e in 0..nel {
            let ed = mesh.element_edges(e);
            divergence.push([(ed.left, -1.0), (ed.right, 1.0), (ed.bottom, -1.0), (ed.top, 1.0)]);
            pairs.push([[ed.left, ed.right], [ed.bottom, ed.top]]);
        }

        let mut triplets = Vec::new();
        for pair_set in &pairs {
            for pair in pair_set {
                for &a in pair {
                    for &b in pair {
                        if free[a] != NONE && free[b] != NONE {
                            triplets.push(Triplet::new(free[a], free[b], 1.0));
                        }
                    }
                }
            }
        }
        for (el, edges) in divergence.iter().enumerate() {
            for &(edge, sign) in edges {
                if free[edge] != NONE {
                    // momentum row: -Bᵀ p ; continuity row: -B u (symmetric)
                    triplets.push(Triplet::new(free[edge], nf + el, -sign * h));
                    triplets.push(Triplet::new(nf + el, free[edge], -sign * h));
                }
            }
        }
        let pattern = SparseColMat::<usize, f64>::try_new_from_triplets(dim, dim, &triplets)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;

        let mut base_values = vec![0.0; pattern.row_idx().len()];
        for (el, edges) in divergence.iter().enumerate() {
            for &(edge, sign) in edges {
                if free[edge] != NONE {
                    base_values[slot(&pattern, free[edge], nf + el)] = -sign * h;
                    base_values[slot(&pattern, nf + el, free[edge])] = -sign * h;
                }
            }
        }
        let mass_slots = pairs
            .iter()
            .map(|pair_set| {
                let mut s = [NONE; 8];
                for (b, pair) in pair_set.iter().enumerate() {
                    for i in 0..2 {
                        for j in 0..2 {
                            let (r, c) = (free[pair[i]], free[pair[j]]);
                            if r != NONE && c != NONE {
                                s[4 * b + 2 * i + j] = slot(&pattern, r, c);
                            }
                        }
                    }
                }
                s
            })
            .collect();
        let symbolic =
            SymbolicLu::try_new(pattern.symbolic()).map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self {
            n: mesh.n,
            h,
            num_edges: ne,
            free,
            free_edges,
            pattern,
            symbolic,
            base_values,
            mass_slots,
            divergence,
        })
    }

    /// Size of the saddle-point system.
    pub fn dim(&self) -> usize {
        self.free_edges.len() + self.n * self.n
    }

    pub fn num_elements(&self) -> usize {
        self.n * self.n
    }

    fn rhs(&self, bc: DirichletData) -> Vec<f64> {
        let mut rhs = vec![0.0; self.dim()];
        // -∫ p_s v·n_out over the Dirichlet sides; v·n_out = -1 on the left
        for j in 0..self.n {
            let left = self.n * (self.n + 1) + j * (self.n + 1);
            let right = left + self.n;
            rhs[self.free[left]] = bc.left * self.h;
            rhs[self.free[right]] = -bc.right * self.h;
        }
        rhs
    }

    /// Solves the saddle-point system for element permeabilities `k`.
    pub fn solve(&self, k: &[f64], bc: DirichletData) -> Result<DarcySolution> {
        if k.len() != self.num_elements() {
            return Err(Error::DimensionMismatch {
                context: "permeability",
                expected: self.num_elements(),
                actual: k.len(),
            });
        }
        if let Some(bad) = k.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("permeability must be positive and finite, got {bad}")));
        }
        let mut values = self.base_values.clone();
        let h2 = self.h * self.h;
        for (slots, &ke) in self.mass_slots.iter().zip(k) {
            let diag = h2 / (3.0 * ke);
            let off = h2 / (6.0 * ke);
            for (idx, &s) in slots.iter().enumerate() {
                if s != NONE {
                    values[s] += if idx % 4 == 0 || idx % 4 == 3 { diag } else { off };
                }
            }
        }
        let mat = SparseColMatRef::new(self.pattern.symbolic(), &values);
        let lu = Lu::try_new_with_symbolic(self.symbolic.clone(), mat)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        let rhs = self.rhs(bc);
        let mut x = Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        lu.solve_in_place(x.as_mut());
        let x: Vec<f64> = (0..rhs.len()).map(|i| x[(i, 0)]).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolveFailed {
                method: "sparse LU",
                iterations: 0,
                residual: f64::NAN,
            });
        }
        let nf = self.free_edges.len();
        let mut u = vec![0.0; self.num_edges];
        for (i, &e) in self.free_edges.iter().enumerate() {
            u[e] = x[i];
        }
        let p = x[nf..].to_vec();
        let divergence_residual = self.divergence_of(&u).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(DarcySolution {
            u,
            p,
            divergence_residual,
        })
    }

    /// Net outward flux `∮ u·n` of every element.
    pub fn divergence_of(&self, u: &[f64]) -> Vec<f64> {
        self.divergence
            .iter()
            .map(|edges| edges.iter().map(|&(e, s)| s * u[e] * self.h).sum())
            .collect()
    }

    /// Mean outward normal flux through the left side.
    pub fn compute_qoi(&self, sol: &DarcySolution) -> f64 {
        let base = self.n * (self.n + 1);
        let total: f64 = (0..self.n).map(|j| -sol.u[base + j * (self.n + 1)] * self.h).sum();
        total / (self.n as f64 * self.h)
    }
}

/// Convenience wrapper: assemble, solve with the default boundary data.
pub fn solve_darcy(mesh: &MeshLevel, k: &[f64], bc: DirichletData) -> Result<DarcySolution> {
    DarcySolver::new(mesh)?.solve(k, bc)
}

pub fn compute_qoi(sol: &DarcySolution, mesh: &MeshLevel) -> f64 {
    let n = mesh.n;
    let base = n * (n + 1);
    let total: f64 = (0..n).map(|j| -sol.u[base + j * (n + 1)] * mesh.h).sum();
    total / (n as f64 * mesh.h)
}

/// The fixed 10×10 lattice of cell-centred observation points.
pub fn lattice_points(per_side: usize) -> Vec<[f64; 2]> {
    let s = per_side as f64;
    let mut pts = Vec::with_capacity(per_side * per_side);
    for j in 0..per_side {
        for i in 0..per_side {
            pts.push([(i as f64 + 0.5) / s, (j as f64 + 0.5) / s]);
        }
    }
    pts
}

/// Element indices of a set of points on one mesh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationOperator {
    pub elements: Vec<usize>,
}

impl ObservationOperator {
    pub fn new(mesh: &MeshLevel, points: &[[f64; 2]]) -> Result<Self> {
        let elements = points.iter().map(|p| mesh.locate(p[0], p[1])).collect::<Result<_>>()?;
        Ok(Self { elements })
    }

    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        self.elements.iter().map(|&e| p[e]).collect()
    }
}

/// Element pressure at each point.
pub fn observe(sol: &DarcySolution, mesh: &MeshLevel, points: &[[f64; 2]]) -> Result<Vec<f64>> {
    Ok(ObservationOperator::new(mesh, points)?.apply(&sol.p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub points: Vec<[f64; 2]>,
    pub values: Vec<f64>,
    pub sigma_eta: f64,
    pub reference_h: f64,
    pub seed: u64,
}

impl ObservationSet {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                context: "observation values",
                expected: self.points.len(),
                actual: self.values.len(),
            });
        }
        if !(self.sigma_eta > 0.0) {
            return Err(Error::invalid(format!("sigma_eta must be positive, got {}", self.sigma_eta)));
        }
        for p in &self.points {
            if !(p[0] > 0.0 && p[0] < 1.0 && p[1] > 0.0 && p[1] < 1.0) {
                return Err(Error::PointOutsideDomain { x: p[0], y: p[1] });
            }
        }
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: Self = serde_json::from_str(&text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `−‖y_model − y_obs‖² / (2 σ_η²)`.
pub fn log_likelihood(y_model: &[f64], obs: &ObservationSet) -> Result<f64> {
    if y_model.len() != obs.values.len() {
        return Err(Error::DimensionMismatch {
            context: "model observations",
            expected: obs.values.len(),
            actual: y_model.len(),
        });
    }
    let ss: f64 = y_model.iter().zip(&obs.values).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-ss / (2.0 * obs.sigma_eta * obs.sigma_eta))
}

/// `x_centroid,y_centroid,p`.
pub fn write_pressure_csv<W: Write>(mesh: &MeshLevel, p: &[f64], mut w: W) -> std::io::Result<()> {
    writeln!(w, "x_centroid,y_centroid,p")?;
    for (e, v) in p.iter().enumerate() {
        let c = mesh.centroid(e);
        writeln!(w, "{},{},{}", c[0], c[1], v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_k(n_el: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::rng::standard_normals(&mut rng, n_el).iter().map(|z| (0.8 * z).exp()).collect()
    }

    #[test]
    fn constant_permeability_gives_affine_pressure() {
        for n in [1, 4, 10] {
            let mesh = MeshLevel::unit_square(n, 0).unwrap();
            let sol = solve_darcy(&mesh, &vec![1.0; n * n], DirichletData::default()).unwrap();
            for e in 0..mesh.num_elements() {
                assert!((sol.p[e] - (mesh.centroid(e)[0] - 1.0)).abs() < 1e-10);
            }
            for (edge, &u) in sol.u.iter().enumerate() {
                let expected = match mesh.edge_direction(edge) {
                    crate::mesh::EdgeDirection::Vertical => -1.0,
                    crate::mesh::EdgeDirection::Horizontal => 0.0,
                };
                assert!((u - expected).abs() < 1e-10);
            }
            assert!((compute_qoi(&sol, &mesh) - 1.0).abs() < 1e-10);
            assert!(sol.divergence_residual < 1e-12);
        }
    }

    #[test]
    fn permeability_scaling() {
        let mesh = MeshLevel::unit_square(6, 0).unwrap();
        let k = random_k(36, 1);
        let k2: Vec<f64> = k.iter().map(|v| 2.0 * v).collect();
        let a = solve_darcy(&mesh, &k, DirichletData::default()).unwrap();
        let b = solve_darcy(&mesh, &k2, DirichletData::default()).unwrap();
        for (x, y) in a.u.iter().zip(&b.u) {
            assert!((2.0 * x - y).abs() < 1e-10);
        }
        for (x, y) in a.p.iter().zip(&b.p) {
            assert!((x - y).abs() < 1e-10);
        }
        let c = solve_darcy(&mesh, &vec![3.5; 36], DirichletData::default()).unwrap();
        assert!((compute_qoi(&c, &mesh) - 3.5).abs() < 1e-9);
    }

    #[test]
    fn swapping_boundary_values_negates_flux() {
        let mesh = MeshLevel::unit_square(5, 0).unwrap();
        let k = random_k(25, 2);
        let solver = DarcySolver::new(&mesh).unwrap();
        let a = solver.solve(&k, DirichletData::default()).unwrap();
        let b = solver.solve(&k, DirichletData { left: 0.0, right: -1.0 }).unwrap();
        assert!((solver.compute_qoi(&a) + solver.compute_qoi(&b)).abs() < 1e-10);
        assert_eq!(solver.compute_qoi(&a), compute_qoi(&a, &mesh));
    }

    #[test]
    fn element_mass_conservation() {
        let mesh = MeshLevel::unit_square(10, 0).unwrap();
        let solver = DarcySolver::new(&mesh).unwrap();
        let sol = solver.solve(&random_k(100, 3), DirichletData::default()).unwrap();
        assert!(solver.divergence_of(&sol.u).iter().all(|d| d.abs() < 1e-8));
        assert!(sol.divergence_residual < 1e-8);
    }

    #[test]
    fn qoi_is_smooth_in_the_field() {
        let mesh = MeshLevel::unit_square(8, 0).unwrap();
        let solver = DarcySolver::new(&mesh).unwrap();
        let theta: Vec<f64> = (0..81).map(|i| 0.3 * (i as f64 * 0.37).sin()).collect();
        let q = |t: &[f64]| solver.compute_qoi(&solver.solve(&project_permeability(&mesh, t).unwrap(), DirichletData::default()).unwrap());
        let bumped: Vec<f64> = theta.iter().map(|t| t + 1e-6).collect();
        let dq = (q(&bumped) - q(&theta)).abs();
        // uniform shift multiplies k by e^δ, so Q scales by the same factor
        assert!(dq < 1e-5 && dq > 1e-7, "dq = {dq}");
    }

    #[test]
    fn permeability_projection() {
        let mesh = MeshLevel::unit_square(3, 0).unwrap();
        assert!(project_permeability(&mesh, &[0.0; 16]).unwrap().iter().all(|&k| k == 1.0));
        let k = project_permeability(&mesh, &[0.7; 16]).unwrap();
        assert!(k.iter().all(|v| (v - 0.7f64.exp()).abs() < 1e-15));
        let theta: Vec<f64> = mesh.nodes.iter().map(|p| p[0] + 2.0 * p[1]).collect();
        let k = project_permeability(&mesh, &theta).unwrap();
        for e in 0..9 {
            let c = mesh.centroid(e);
            assert!((k[e].ln() - (c[0] + 2.0 * c[1])).abs() < 1e-14);
        }
        assert!(project_permeability(&mesh, &[0.0; 3]).is_err());
    }

    #[test]
    fn observation_at_lattice_point() {
        let mesh = MeshLevel::unit_square(10, 0).unwrap();
        let sol = solve_darcy(&mesh, &vec![1.0; 100], DirichletData::default()).unwrap();
        let y = observe(&sol, &mesh, &[[0.55, 0.5]]).unwrap();
        assert!((y[0] + 0.45).abs() < 1e-10);
        assert!(observe(&sol, &mesh, &[[1.5, 0.5]]).is_err());
        let pts = lattice_points(10);
        assert_eq!(pts.len(), 100);
        for n in [10, 20, 40, 80] {
            let m = MeshLevel::unit_square(n, 0).unwrap();
            assert!(ObservationOperator::new(&m, &pts).is_ok());
        }
    }

    #[test]
    fn observations_converge_under_refinement() {
        let k_fn = |x: f64, y: f64| (0.5 * (3.0 * x).sin() * (2.0 * y).cos()).exp();
        let pts = lattice_points(10);
        let obs: Vec<Vec<f64>> = [10, 20, 40, 80]
            .iter()
            .map(|&n| {
                let mesh = MeshLevel::unit_square(n, 0).unwrap();
                let k: Vec<f64> = (0..n * n).map(|e| {
                    let c = mesh.centroid(e);
                    k_fn(c[0], c[1])
                }).collect();
                observe(&solve_darcy(&mesh, &k, DirichletData::default()).unwrap(), &mesh, &pts).unwrap()
            })
            .collect();
        let diffs: Vec<f64> = obs
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .collect();
        assert!(diffs.windows(2).all(|d| d[1] < d[0]), "{diffs:?}");
    }

    #[test]
    fn likelihood_values() {
        let obs = ObservationSet {
            points: vec![[0.5, 0.5]],
            values: vec![1.0],
            sigma_eta: 0.1,
            reference_h: 0.0125,
            seed: 0,
        };
        assert_eq!(log_likelihood(&[1.0], &obs).unwrap(), 0.0);
        assert!((log_likelihood(&[1.1], &obs).unwrap() + 0.5).abs() < 1e-12);
        let a = log_likelihood(&[1.3], &obs).unwrap();
        let b = log_likelihood(&[1.6], &obs).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-12);
        assert!(log_likelihood(&[1.0, 2.0], &obs).is_err());
    }

    #[test]
    fn pressure_csv_layout() {
        let mesh = MeshLevel::unit_square(2, 0).unwrap();
        let mut buf = Vec::new();
        write_pressure_csv(&mesh, &[1.0, 2.0, 3.0, 4.0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x_centroid,y_centroid,p");
        assert_eq!(lines[1], "0.25,0.25,1");
        assert_eq!(lines.len(), 5);
    }
}
