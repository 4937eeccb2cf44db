//! Nested structured quadrilateral meshes on the unit square and the
//! bilinear prolongation between consecutive levels.
//!
//! Node `(i, j)` (column `i`, row `j`) has index `j * (n + 1) + i`, i.e.
//! row-major lexicographic in `(y, x)`. Element `(i, j)` has index `j * n + i`
//! and lists its nodes counter-clockwise starting at the lower-left corner.
//! Horizontal edges come first (`j * n + i`, node `(i, j)` to `(i + 1, j)`),
//! then vertical edges (`n (n + 1) + j * (n + 1) + i`, node `(i, j)` to
//! `(i, j + 1)`). Horizontal edges carry the normal `+y`, vertical edges `+x`.

use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::SpdSolver;
use crate::sparse::{CsrMatrix, TripletBuilder};

const SNAP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    Left,
    Right,
    Top,
    Bottom,
    Interior,
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BoundaryTag::Left => "left",
            BoundaryTag::Right => "right",
            BoundaryTag::Top => "top",
            BoundaryTag::Bottom => "bottom",
            BoundaryTag::Interior => "interior",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeDirection {
    Horizontal,
    Vertical,
}

/// Local edge slots of an element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElementEdges {
    pub bottom: usize,
    pub right: usize,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug, Clone)]
pub struct MeshLevel {
    pub level_index: usize,
    /// Cells per side.
    pub n: usize,
    pub h: f64,
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<[usize; 4]>,
    pub edges: Vec<[usize; 2]>,
    pub node_tags: Vec<BoundaryTag>,
    pub edge_tags: Vec<BoundaryTag>,
}

impl MeshLevel {
    /// Uniform `n × n` mesh of the unit square.
    pub fn unit_square(n: usize, level_index: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("mesh needs at least one cell per side"));
        }
        let h = 1.0 / n as f64;
        let np = n + 1;
        let mut nodes = Vec::with_capacity(np * np);
        let mut node_tags = Vec::with_capacity(np * np);
        for j in 0..np {
            for i in 0..np {
                nodes.push([i as f64 * h, j as f64 * h]);
                // corners go to the vertical sides
                let tag = if i == 0 {
                    BoundaryTag::Left
                } else if i == n {
                    BoundaryTag::Right
                } else if j == 0 {
                    BoundaryTag::Bottom
                } else if j == n {
                    BoundaryTag::Top
                } else {
                    BoundaryTag::Interior
                };
                node_tags.push(tag);
            }
        }
        let mut elements = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                let ll = j * np + i;
                elements.push([ll, ll + 1, ll + 1 + np, ll + np]);
            }
        }
        let mut edges = Vec::with_capacity(2 * n * np);
        let mut edge_tags = Vec::with_capacity(2 * n * np);
        for j in 0..np {
            for i in 0..n {
                edges.push([j * np + i, j * np + i + 1]);
                edge_tags.push(match j {
                    0 => BoundaryTag::Bottom,
                    _ if j == n => BoundaryTag::Top,
                    _ => BoundaryTag::Interior,
                });
            }
        }
        for j in 0..n {
            for i in 0..np {
                edges.push([j * np + i, (j + 1) * np + i]);
                edge_tags.push(match i {
                    0 => BoundaryTag::Left,
                    _ if i == n => BoundaryTag::Right,
                    _ => BoundaryTag::Interior,
                });
            }
        }
        Ok(Self {
            level_index,
            n,
            h,
            nodes,
            elements,
            edges,
            node_tags,
            edge_tags,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    pub fn horizontal_edge(&self, i: usize, j: usize) -> usize {
        j * self.n + i
    }

    pub fn vertical_edge(&self, i: usize, j: usize) -> usize {
        self.n * (self.n + 1) + j * (self.n + 1) + i
    }

    pub fn edge_direction(&self, e: usize) -> EdgeDirection {
        if e < self.n * (self.n + 1) {
            EdgeDirection::Horizontal
        } else {
            EdgeDirection::Vertical
        }
    }

    pub fn element_edges(&self, e: usize) -> ElementEdges {
        let (i, j) = (e % self.n, e / self.n);
        ElementEdges {
            bottom: self.horizontal_edge(i, j),
            top: self.horizontal_edge(i, j + 1),
            left: self.vertical_edge(i, j),
            right: self.vertical_edge(i + 1, j),
        }
    }

    pub fn centroid(&self, e: usize) -> [f64; 2] {
        let (i, j) = (e % self.n, e / self.n);
        [(i as f64 + 0.5) * self.h, (j as f64 + 0.5) * self.h]
    }

    /// Element containing `(x, y)`; points on a shared edge or vertex go to
    /// the lower-left candidate.
    pub fn locate(&self, x: f64, y: f64) -> Result<usize> {
        let inside = |t: f64| (-SNAP_TOL..=1.0 + SNAP_TOL).contains(&t);
        if !(inside(x) && inside(y)) {
            return Err(Error::PointOutsideDomain { x, y });
        }
        let cell = |t: f64| -> usize {
            let s = t * self.n as f64;
            let r = s.round();
            let idx = if (s - r).abs() < SNAP_TOL * self.n as f64 {
                r as isize - 1
            } else {
                s.floor() as isize
            };
            idx.clamp(0, self.n as isize - 1) as usize
        };
        Ok(cell(y) * self.n + cell(x))
    }

    /// CSV dump: `node_id,x,y,boundary_tag`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "node_id,x,y,boundary_tag")?;
        for (k, (p, t)) in self.nodes.iter().zip(&self.node_tags).enumerate() {
            writeln!(w, "{k},{},{},{t}", p[0], p[1])?;
        }
        Ok(())
    }
}

/// Bilinear interpolation from level `coarse` to level `coarse + 1`.
#[derive(Debug, Clone)]
pub struct TransferOperator {
    pub coarse: usize,
    pub fine: usize,
    /// fine nodes × coarse nodes
    pub p: CsrMatrix,
}

impl TransferOperator {
    pub fn between(coarse: &MeshLevel, fine: &MeshLevel) -> Result<Self> {
        if fine.n != 2 * coarse.n {
            return Err(Error::invalid(format!(
                "levels are not nested by factor 2 ({} vs {} cells per side)",
                coarse.n, fine.n
            )));
        }
        let nc = coarse.n;
        let mut b = TripletBuilder::with_capacity(fine.num_nodes(), coarse.num_nodes(), 4 * fine.num_nodes());
        for jf in 0..=fine.n {
            for if_ in 0..=fine.n {
                let row = fine.node_index(if_, jf);
                let xs: &[(usize, f64)] = &if if_ % 2 == 0 {
                    [(if_ / 2, 1.0), (0, 0.0)]
                } else {
                    [(if_ / 2, 0.5), (if_ / 2 + 1, 0.5)]
                };
                let ys: &[(usize, f64)] = &if jf % 2 == 0 {
                    [(jf / 2, 1.0), (0, 0.0)]
                } else {
                    [(jf / 2, 0.5), (jf / 2 + 1, 0.5)]
                };
                for &(ic, wx) in xs {
                    for &(jc, wy) in ys {
                        let w = wx * wy;
                        if w != 0.0 {
                            debug_assert!(ic <= nc && jc <= nc);
                            b.push(row, coarse.node_index(ic, jc), w);
                        }
                    }
                }
            }
        }
        Ok(Self {
            coarse: coarse.level_index,
            fine: fine.level_index,
            p: b.build(),
        })
    }

    /// `P x`.
    pub fn prolong(&self, coarse: &[f64]) -> Vec<f64> {
        self.p.mul_vec(coarse)
    }
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<MeshLevel>,
    pub transfers: Vec<TransferOperator>,
}

/// Cells per side for mesh size `h`, if `1/h` is a positive integer.
pub fn cells_per_side(h: f64) -> Result<usize> {
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::invalid(format!("mesh size {h} must lie in (0, 1]")));
    }
    let inv = 1.0 / h;
    let n = inv.round();
    if (inv - n).abs() > 1e-8 * inv {
        return Err(Error::invalid(format!(
            "mesh size {h} does not divide the unit square (1/h = {inv})"
        )));
    }
    Ok(n as usize)
}

impl Hierarchy {
    /// `finest + 1` meshes with `h_ℓ = h0 · 2^{-ℓ}`.
    pub fn build(h0: f64, finest: usize) -> Result<Self> {
        let n0 = cells_per_side(h0)?;
        let levels = (0..=finest)
            .map(|l| MeshLevel::unit_square(n0 << l, l))
            .collect::<Result<Vec<_>>>()?;
        let transfers = levels
            .windows(2)
            .map(|w| TransferOperator::between(&w[0], &w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels, transfers })
    }

    pub fn finest(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Transfer from `level` to `level + 1`.
    pub fn prolongation(&self, level: usize) -> Result<&TransferOperator> {
        self.transfers.get(level).ok_or_else(|| {
            Error::invalid(format!(
                "no level finer than {level} (finest is {})",
                self.finest()
            ))
        })
    }
}

/// `Π v = M_c⁻¹ Pᵀ M_f v`: the L²-orthogonal restriction, with `Π P = Id`.
pub fn restriction_apply(
    p: &CsrMatrix,
    mass_coarse: &SpdSolver,
    mass_fine: &CsrMatrix,
    v_fine: &[f64],
) -> Result<Vec<f64>> {
    if v_fine.len() != p.nrows() {
        return Err(Error::DimensionMismatch {
            context: "restriction input",
            expected: p.nrows(),
            actual: v_fine.len(),
        });
    }
    let rhs = p.mul_vec_transpose(&mass_fine.mul_vec(v_fine));
    Ok(mass_coarse.solve_checked(&rhs, 1e-12)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_for_benchmark_levels() {
        let h = Hierarchy::build(0.1, 2).unwrap();
        let hs: Vec<f64> = h.levels.iter().map(|m| m.h).collect();
        assert!((hs[0] - 0.1).abs() < 1e-15 && (hs[1] - 0.05).abs() < 1e-15 && (hs[2] - 0.025).abs() < 1e-15);
        let single = Hierarchy::build(0.1, 0).unwrap();
        assert_eq!(single.levels[0].num_nodes(), 121);
        assert_eq!(single.levels[0].num_elements(), 100);
        assert!(single.prolongation(0).is_err());
        let tiny = Hierarchy::build(0.5, 1).unwrap();
        assert_eq!(tiny.levels[0].num_nodes(), 9);
        assert_eq!(tiny.levels[1].num_nodes(), 25);
    }

    #[test]
    fn non_dividing_mesh_size_rejected() {
        assert!(Hierarchy::build(0.3, 1).is_err());
        assert!(Hierarchy::build(0.0, 1).is_err());
        assert!(Hierarchy::build(-0.5, 1).is_err());
    }

    #[test]
    fn elements_are_counter_clockwise() {
        let m = MeshLevel::unit_square(3, 0).unwrap();
        for el in &m.elements {
            let p: Vec<[f64; 2]> = el.iter().map(|&k| m.nodes[k]).collect();
            let area2: f64 = (0..4)
                .map(|a| {
                    let b = (a + 1) % 4;
                    p[a][0] * p[b][1] - p[b][0] * p[a][1]
                })
                .sum();
            assert!(area2 > 0.0);
        }
    }

    #[test]
    fn edges_shared_by_at_most_two_elements() {
        let m = MeshLevel::unit_square(4, 0).unwrap();
        let mut count = vec![0usize; m.num_edges()];
        for e in 0..m.num_elements() {
            let ee = m.element_edges(e);
            for k in [ee.bottom, ee.right, ee.top, ee.left] {
                count[k] += 1;
            }
        }
        for (k, &c) in count.iter().enumerate() {
            let expected = if m.edge_tags[k] == BoundaryTag::Interior { 2 } else { 1 };
            assert_eq!(c, expected, "edge {k}");
        }
        // element-edge endpoints agree with the element's nodes
        for e in 0..m.num_elements() {
            let [ll, lr, ur, ul] = m.elements[e];
            let ee = m.element_edges(e);
            assert_eq!(m.edges[ee.bottom], [ll, lr]);
            assert_eq!(m.edges[ee.top], [ul, ur]);
            assert_eq!(m.edges[ee.left], [ll, ul]);
            assert_eq!(m.edges[ee.right], [lr, ur]);
        }
    }

    #[test]
    fn interior_nodes_touch_four_elements() {
        let m = MeshLevel::unit_square(4, 0).unwrap();
        let mut count = vec![0usize; m.num_nodes()];
        for el in &m.elements {
            for &k in el {
                count[k] += 1;
            }
        }
        for (k, &c) in count.iter().enumerate() {
            if m.node_tags[k] == BoundaryTag::Interior {
                assert_eq!(c, 4);
            } else {
                assert!(c < 4);
            }
        }
    }

    #[test]
    fn prolongation_weights() {
        let h = Hierarchy::build(0.5, 1).unwrap();
        let p = &h.prolongation(0).unwrap().p;
        let fine = &h.levels[1];
        // coincident node (2, 2) -> coarse (1, 1)
        let r: Vec<_> = p.row(fine.node_index(2, 2)).collect();
        assert_eq!(r, vec![(h.levels[0].node_index(1, 1), 1.0)]);
        // edge midpoint
        let r: Vec<_> = p.row(fine.node_index(1, 0)).map(|(_, w)| w).collect();
        assert_eq!(r, vec![0.5, 0.5]);
        // cell centre
        let r: Vec<_> = p.row(fine.node_index(1, 1)).map(|(_, w)| w).collect();
        assert_eq!(r, vec![0.25; 4]);
        for i in 0..p.nrows() {
            let s: f64 = p.row(i).map(|(_, w)| w).sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn prolongation_reproduces_bilinear_functions() {
        let h = Hierarchy::build(0.25, 1).unwrap();
        let f = |x: f64, y: f64| 1.5 - 2.0 * x + 0.25 * y + 3.0 * x * y;
        let coarse: Vec<f64> = h.levels[0].nodes.iter().map(|p| f(p[0], p[1])).collect();
        let fine = h.transfers[0].prolong(&coarse);
        for (v, p) in fine.iter().zip(&h.levels[1].nodes) {
            assert!((v - f(p[0], p[1])).abs() < 1e-14);
        }
    }

    #[test]
    fn locate_breaks_ties_lower_left() {
        let m = MeshLevel::unit_square(20, 0).unwrap();
        // 0.55 lies on the line between columns 10 and 11
        let e = m.locate(0.55, 0.5).unwrap();
        assert_eq!(e % 20, 10);
        assert_eq!(e / 20, 9);
        assert_eq!(m.locate(0.0, 0.0).unwrap(), 0);
        assert_eq!(m.locate(1.0, 1.0).unwrap(), 399);
        assert!(m.locate(1.2, 0.5).is_err());
        let coarse = MeshLevel::unit_square(10, 0).unwrap();
        assert_eq!(coarse.locate(0.55, 0.5).unwrap(), 45);
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let m = MeshLevel::unit_square(2, 0).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "node_id,x,y,boundary_tag");
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[5], "4,0.5,0.5,interior");
    }
}
