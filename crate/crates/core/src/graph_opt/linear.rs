//! Damped normal equations with the feature points eliminated by a Schur
//! complement. The reduced system over poses and landmarks is factored with
//! a sparse Cholesky.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, Vector3, Vector6};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::CscMatrix;

use super::{landmark_dof, FactorGraph, Var};

type Matrix3x6 = SMatrix<f64, 3, 6>;

/// Free variables: points by index, and reduced blocks (free poses, then landmarks).
pub(super) struct Layout {
    pub pose: Vec<Option<usize>>,
    pub landmark: Vec<usize>,
    offset: Vec<usize>,
    size: Vec<usize>,
    pub dim: usize,
}

pub(super) enum Slot {
    Point(usize),
    Block(usize),
}

impl Layout {
    pub fn new(g: &FactorGraph) -> Self {
        let mut offset = Vec::new();
        let mut size = Vec::new();
        let mut dim = 0;
        let mut push = |n: usize| {
            offset.push(dim);
            size.push(n);
            dim += n;
            offset.len() - 1
        };
        let pose = (0..g.poses.len())
            .map(|i| (!g.fixed.get(i).copied().unwrap_or(false)).then(|| push(6)))
            .collect();
        let landmark = g.landmarks.iter().map(|l| push(landmark_dof(l))).collect();
        Self {
            pose,
            landmark,
            offset,
            size,
            dim,
        }
    }

    pub fn blocks(&self) -> usize {
        self.size.len()
    }

    pub fn slot(&self, v: Var) -> Option<Slot> {
        match v {
            Var::Point(n) => Some(Slot::Point(n)),
            Var::Pose(i) => self.pose[i].map(Slot::Block),
            Var::Landmark(j) => Some(Slot::Block(self.landmark[j])),
        }
    }

    pub fn offset(&self, b: usize) -> usize {
        self.offset[b]
    }

    pub fn size(&self, b: usize) -> usize {
        self.size[b]
    }
}

/// Whitened factor linearization: residual `r`, IRLS weight `w` and Jacobian blocks.
pub(super) struct WeightedLinearization {
    pub weight: f64,
    pub residual: DVector<f64>,
    pub blocks: Vec<(Var, DMatrix<f64>)>,
}

fn pad3x6(m: &DMatrix<f64>) -> Matrix3x6 {
    let mut out = Matrix3x6::zeros();
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

fn pad6x6(m: &DMatrix<f64>) -> Matrix6<f64> {
    let mut out = Matrix6::zeros();
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

/// Gauss-Newton system `H δ = −g` split into point and reduced parts.
pub(super) struct NormalEquations {
    hpp: Vec<Matrix3<f64>>,
    gp: Vec<Vector3<f64>>,
    /// Per point, its coupling blocks `H_pc` sorted by block index.
    coupling: Vec<Vec<(usize, Matrix3x6)>>,
    /// Per point, the slot of each coupling pair `(i, j)`, `i ≤ j`, row-major.
    point_pairs: Vec<Vec<usize>>,
    /// Values of the upper block pairs `(a, b)`, `a ≤ b`.
    hcc: Vec<Matrix6<f64>>,
    diag_slot: Vec<usize>,
    gc: DVector<f64>,
    /// CSC pattern of the full symmetric reduced matrix and, per entry, where its value lives.
    col_offsets: Vec<usize>,
    row_indices: Vec<usize>,
    sources: Vec<(usize, u8, u8)>,
}

pub(super) struct Step {
    pub points: Vec<Vector3<f64>>,
    pub reduced: DVector<f64>,
}

impl NormalEquations {
    pub fn assemble(layout: &Layout, n_points: usize, lins: &[WeightedLinearization]) -> Self {
        let nb = layout.blocks();
        let mut hpp = vec![Matrix3::zeros(); n_points];
        let mut gp = vec![Vector3::zeros(); n_points];
        let mut coupling: Vec<Vec<(usize, Matrix3x6)>> = vec![Vec::new(); n_points];
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut pairs = Vec::new();
        let mut hcc: Vec<Matrix6<f64>> = Vec::new();
        let mut gc = DVector::zeros(layout.dim);
        let mut slot_of = |a: usize, b: usize, pairs: &mut Vec<(usize, usize)>, hcc: &mut Vec<Matrix6<f64>>| {
            *index.entry((a, b)).or_insert_with(|| {
                pairs.push((a, b));
                hcc.push(Matrix6::zeros());
                pairs.len() - 1
            })
        };
        for b in 0..nb {
            slot_of(b, b, &mut pairs, &mut hcc);
        }
        for lin in lins {
            let w = lin.weight;
            let mut point: Option<(usize, &DMatrix<f64>)> = None;
            let mut reduced: Vec<(usize, &DMatrix<f64>)> = Vec::new();
            for (v, j) in &lin.blocks {
                match layout.slot(*v) {
                    Some(Slot::Point(n)) => point = Some((n, j)),
                    Some(Slot::Block(b)) => reduced.push((b, j)),
                    None => {}
                }
            }
            if let Some((n, jp)) = point {
                let jpt = jp.transpose();
                let h = &jpt * jp * w;
                hpp[n] += Matrix3::from_fn(|r, c| h[(r, c)]);
                let g = &jpt * &lin.residual * w;
                gp[n] += Vector3::new(g[0], g[1], g[2]);
                for &(b, jc) in &reduced {
                    let m = pad3x6(&(&jpt * jc * w));
                    match coupling[n].iter_mut().find(|(bb, _)| *bb == b) {
                        Some((_, acc)) => *acc += m,
                        None => coupling[n].push((b, m)),
                    }
                }
            }
            for &(a, ja) in &reduced {
                let jat = ja.transpose();
                let g = &jat * &lin.residual * w;
                let o = layout.offset(a);
                for r in 0..g.len() {
                    gc[o + r] += g[r];
                }
                for &(b, jb) in &reduced {
                    if a > b {
                        continue;
                    }
                    let s = slot_of(a, b, &mut pairs, &mut hcc);
                    hcc[s] += pad6x6(&(&jat * jb * w));
                }
            }
        }
        let mut point_pairs = Vec::with_capacity(n_points);
        for c in coupling.iter_mut() {
            c.sort_by_key(|(b, _)| *b);
            let mut slots = Vec::with_capacity(c.len() * (c.len() + 1) / 2);
            for i in 0..c.len() {
                for j in i..c.len() {
                    slots.push(slot_of(c[i].0, c[j].0, &mut pairs, &mut hcc));
                }
            }
            point_pairs.push(slots);
        }
        let diag_slot = (0..nb).map(|b| index[&(b, b)]).collect();

        // neighbours of every column block: (row block, slot, stored transposed)
        let mut neighbours: Vec<Vec<(usize, usize, bool)>> = vec![Vec::new(); nb];
        for (s, &(a, b)) in pairs.iter().enumerate() {
            neighbours[b].push((a, s, false));
            if a != b {
                neighbours[a].push((b, s, true));
            }
        }
        let mut col_offsets = vec![0];
        let mut row_indices = Vec::new();
        let mut sources = Vec::new();
        for (b, nbrs) in neighbours.iter_mut().enumerate() {
            nbrs.sort_by_key(|(a, _, _)| *a);
            for c in 0..layout.size(b) {
                for &(a, s, transposed) in nbrs.iter() {
                    for r in 0..layout.size(a) {
                        row_indices.push(layout.offset(a) + r);
                        let (i, j) = if transposed { (c, r) } else { (r, c) };
                        sources.push((s, i as u8, j as u8));
                    }
                }
                col_offsets.push(row_indices.len());
            }
        }
        Self {
            hpp,
            gp,
            coupling,
            point_pairs,
            hcc,
            diag_slot,
            gc,
            col_offsets,
            row_indices,
            sources,
        }
    }

    /// Solves `(H + λ·(diag H + ε)) δ = −g`; `None` if the damped system is not positive definite.
    pub fn solve(&self, layout: &Layout, lambda: f64) -> Option<Step> {
        const EPS: f64 = 1e-9;
        let mut s = self.hcc.clone();
        for b in 0..layout.blocks() {
            let slot = self.diag_slot[b];
            for k in 0..layout.size(b) {
                s[slot][(k, k)] += lambda * (self.hcc[slot][(k, k)] + EPS);
            }
        }
        let mut rhs = -self.gc.clone();
        let mut ainv = Vec::with_capacity(self.hpp.len());
        for (n, h) in self.hpp.iter().enumerate() {
            let mut a = *h;
            for k in 0..3 {
                a[(k, k)] += lambda * (h[(k, k)] + EPS);
            }
            let inv = a.try_inverse().filter(|m| m.iter().all(|v| v.is_finite()))?;
            let v = inv * self.gp[n];
            let c = &self.coupling[n];
            let k: Vec<Matrix3x6> = c.iter().map(|(_, bm)| inv * bm).collect();
            let mut idx = 0;
            for i in 0..c.len() {
                let (bi, ref mi) = c[i];
                let o = layout.offset(bi);
                let add: Vector6<f64> = mi.transpose() * v;
                for r in 0..layout.size(bi) {
                    rhs[o + r] += add[r];
                }
                for kj in k.iter().skip(i) {
                    s[self.point_pairs[n][idx]] -= mi.transpose() * kj;
                    idx += 1;
                }
            }
            ainv.push(inv);
        }
        let values: Vec<f64> = self
            .sources
            .iter()
            .map(|&(slot, i, j)| s[slot][(i as usize, j as usize)])
            .collect();
        let dc = if layout.dim == 0 {
            DVector::zeros(0)
        } else {
            let csc = CscMatrix::try_from_csc_data(
                layout.dim,
                layout.dim,
                self.col_offsets.clone(),
                self.row_indices.clone(),
                values,
            )
            .ok()?;
            let chol = CscCholesky::factor(&csc).ok()?;
            let sol = chol.solve(&rhs);
            DVector::from_column_slice(sol.column(0).as_slice())
        };
        if !dc.iter().all(|x| x.is_finite()) {
            return None;
        }
        let points = self
            .coupling
            .iter()
            .enumerate()
            .map(|(n, c)| {
                let mut r = -self.gp[n];
                for (b, m) in c {
                    let o = layout.offset(*b);
                    let mut x = Vector6::zeros();
                    for k in 0..layout.size(*b) {
                        x[k] = dc[o + k];
                    }
                    r -= m * x;
                }
                ainv[n] * r
            })
            .collect::<Vec<_>>();
        if !points.iter().all(|p| p.iter().all(|x| x.is_finite())) {
            return None;
        }
        Some(Step { points, reduced: dc })
    }
}
