//! Dense Cholesky reference path.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::jitter;
use crate::kernels::{SpatialKernel, TaskGram};

pub const DEFAULT_CAP: usize = 4096;

/// Dense `K̃` with its Cholesky factor. Tasks are contiguous blocks
/// described by `offsets` (the task-summing matrix `E` is never formed).
#[derive(Debug, Clone)]
pub struct DenseGram {
    offsets: Vec<usize>,
    /// Gram matrix without noise.
    k: DMatrix<f64>,
    xi: Vec<f64>,
    escalations: u32,
    chol: Cholesky<f64, Dyn>,
}

/// Assembles `K̃_{ℓℓ'} = R_{ℓℓ'} Q(X_ℓ, X_ℓ') + δ_{ℓℓ'} ξ_ℓ I` and factors it,
/// escalating the noise on failure. `points[ℓ]` is row-major `n_ℓ × d`.
pub fn dense_assemble(
    points: &[Vec<f64>],
    d: usize,
    q: &SpatialKernel,
    r: &TaskGram,
    xi: &[f64],
    cap: usize,
) -> Result<DenseGram> {
    let l = points.len();
    if r.num_tasks() != l || xi.len() != l {
        return Err(Error::LengthMismatch { expected: l, got: r.num_tasks().min(xi.len()) });
    }
    if d == 0 || points.iter().any(|p| p.len() % d != 0) {
        return Err(Error::InvalidParameter("point arrays must be n × d".into()));
    }
    let mut offsets = vec![0];
    for p in points {
        offsets.push(offsets.last().unwrap() + p.len() / d);
    }
    let n = offsets[l];
    if n > cap {
        return Err(Error::DenseCapExceeded { n, cap });
    }
    let rows: Vec<(usize, usize)> =
        (0..l).flat_map(|t| (0..points[t].len() / d).map(move |i| (t, i))).collect();

    // Upper triangle in parallel, mirrored so the matrix is bit-symmetric.
    let upper: Vec<Vec<f64>> = rows
        .par_iter()
        .enumerate()
        .map(|(gi, &(ti, i))| {
            let xi_ = &points[ti][i * d..(i + 1) * d];
            rows[gi..]
                .iter()
                .map(|&(tj, j)| r.get(ti, tj) * q.eval(xi_, &points[tj][j * d..(j + 1) * d]))
                .collect()
        })
        .collect();
    let mut k = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            k[(i, i + off)] = v;
            k[(i + off, i)] = v;
        }
    }

    let (chol, xi, escalations) = jitter::with_escalation(xi, |xi| {
        let mut kt = k.clone();
        for t in 0..l {
            for i in offsets[t]..offsets[t + 1] {
                kt[(i, i)] += xi[t];
            }
        }
        Cholesky::new(kt).ok_or(Error::CholeskyFailed(xi.iter().cloned().fold(0.0, f64::max)))
    })?;
    Ok(DenseGram { offsets, k, xi, escalations, chol })
}

impl DenseGram {
    /// Wraps an explicit SPD matrix as a single-task Gram.
    pub fn from_matrix(k: DMatrix<f64>) -> Result<Self> {
        let n = k.nrows();
        let chol = Cholesky::new(k.clone()).ok_or(Error::CholeskyFailed(0.0))?;
        Ok(Self { offsets: vec![0, n], k, xi: vec![0.0], escalations: 0, chol })
    }

    pub fn size(&self) -> usize {
        self.k.nrows()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn num_tasks(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Noise that was actually used after escalation.
    pub fn noise(&self) -> &[f64] {
        &self.xi
    }

    pub fn escalations(&self) -> u32 {
        self.escalations
    }

    /// `K̃` including noise.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut kt = self.k.clone();
        for t in 0..self.num_tasks() {
            for i in self.offsets[t]..self.offsets[t + 1] {
                kt[(i, i)] += self.xi[t];
            }
        }
        kt
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.size() {
            return Err(Error::LengthMismatch { expected: self.size(), got: rhs.len() });
        }
        Ok(self.chol.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec())
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `Eᵀ v`: per-task sums.
    pub fn task_sums(&self, v: &[f64]) -> Vec<f64> {
        self.offsets.windows(2).map(|w| v[w[0]..w[1]].iter().sum()).collect()
    }

    /// `EᵀK̃⁻¹E` and `EᵀK̃⁻²E`, row-major `L × L`.
    pub fn projected_inverses(&self) -> (Vec<f64>, Vec<f64>) {
        let l = self.num_tasks();
        let n = self.size();
        let mut c1 = Vec::with_capacity(l);
        for t in 0..l {
            let mut e = DVector::zeros(n);
            for i in self.offsets[t]..self.offsets[t + 1] {
                e[i] = 1.0;
            }
            c1.push(self.chol.solve(&e));
        }
        let mut p1 = vec![0.0; l * l];
        let mut p2 = vec![0.0; l * l];
        for a in 0..l {
            for b in 0..l {
                p1[a * l + b] = self.task_sums(c1[b].as_slice())[a];
                p2[a * l + b] = c1[a].dot(&c1[b]);
            }
        }
        (p1, p2)
    }
}

pub fn dense_solve_logdet(gram: &DenseGram, rhs: &[f64]) -> Result<(Vec<f64>, f64)> {
    Ok((gram.solve(rhs)?, gram.logdet()))
}

/// Solves a small dense system `A x = b` (row-major `A`).
pub fn solve_small(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let l = b.len();
    let m = DMatrix::from_row_slice(l, l, a);
    let scale = m.amax();
    let lu = m.lu();
    let x = lu.solve(&DVector::from_column_slice(b)).ok_or(Error::SingularSystem(l))?;
    let tiny = lu.u().diagonal().iter().any(|v| v.abs() <= 1e-14 * scale);
    if tiny || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem(l));
    }
    Ok(x.as_slice().to_vec())
}

/// `(EᵀK̃⁻¹E) τ_NMLL = EᵀK̃⁻¹y` and `(EᵀK̃⁻²E) τ_GCV = EᵀK̃⁻²y`.
pub fn dense_normal_equations(gram: &DenseGram, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (p1, p2) = gram.projected_inverses();
    let c1 = gram.solve(y)?;
    let c2 = gram.solve(&c1)?;
    Ok((solve_small(&p1, &gram.task_sums(&c1))?, solve_small(&p2, &gram.task_sums(&c2))?))
}
