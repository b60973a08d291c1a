//! Transformed block Gram matrix `Λ̃ = V̄ K̃ V`, fast products with `K̃`, and
//! the recursive diagonal-Schur-complement inverse of `Λ̃`.
//!
//! Everything here works in internal task order (non-increasing sizes).
//! Block `Λ̃_{ℓℓ'}` with `ℓ ≤ ℓ'` is `n_ℓ × n_ℓ'` and has entry `λ[a]` at
//! `(a, b)` exactly when `a ≡ b (mod n_ℓ')`, so one length-`n_ℓ` vector
//! describes it. Lower blocks are conjugate transposes.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{Hyperparams, KernelFamily, SpatialKernel};
use crate::ld::LdDesign;
use crate::transforms::Spectral;

/// Relative tolerance below which imaginary parts are treated as rounding.
pub const IMAG_TOL: f64 = 1e-10;

/// Schur diagonals with real part at or below this multiple of
/// `ε · max|D|` are rounding noise, not eigenvalues.
const SCHUR_FLOOR_ULPS: f64 = 16.0;

#[derive(Debug, Clone)]
pub struct BlockSpectrum<S> {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    /// `lambda[ℓ][k]` describes block `(ℓ, ℓ + k)`.
    lambda: Vec<Vec<Vec<S>>>,
}

fn offsets_of(sizes: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(sizes.len() + 1);
    let mut acc = 0;
    off.push(0);
    for &n in sizes {
        acc += n;
        off.push(acc);
    }
    off
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::InvalidParameter("at least one task required".into()));
    }
    for &n in sizes {
        if !n.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(n));
        }
    }
    if sizes.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::SizesNotDescending(sizes.to_vec()));
    }
    Ok(())
}

impl<S: Spectral> BlockSpectrum<S> {
    /// Wraps precomputed tall vectors. `lambda[ℓ][k]` must have length `n_ℓ`.
    pub fn from_parts(sizes: Vec<usize>, lambda: Vec<Vec<Vec<S>>>) -> Result<Self> {
        check_sizes(&sizes)?;
        let l = sizes.len();
        if lambda.len() != l {
            return Err(Error::LengthMismatch { expected: l, got: lambda.len() });
        }
        for (i, row) in lambda.iter().enumerate() {
            if row.len() != l - i {
                return Err(Error::LengthMismatch { expected: l - i, got: row.len() });
            }
            for v in row {
                if v.len() != sizes[i] {
                    return Err(Error::LengthMismatch { expected: sizes[i], got: v.len() });
                }
            }
        }
        let offsets = offsets_of(&sizes);
        Ok(Self { sizes, offsets, lambda })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_tasks(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.offsets[self.sizes.len()]
    }

    /// Tall vector of block `(l, lp)` with `l ≤ lp`.
    pub fn pair(&self, l: usize, lp: usize) -> &[S] {
        assert!(l <= lp, "pair ({l},{lp}) is stored via its transpose");
        &self.lambda[l][lp - l]
    }

    /// Number of stored scalars, `Σ_ℓ (L − ℓ + 1) n_ℓ`.
    pub fn storage(&self) -> usize {
        self.lambda.iter().flatten().map(Vec::len).sum()
    }

    /// Entry `(i, j)` of `Λ̃` in global indexing.
    pub fn entry(&self, i: usize, j: usize) -> S {
        let ti = self.task_of(i);
        let tj = self.task_of(j);
        let a = i - self.offsets[ti];
        let b = j - self.offsets[tj];
        if ti <= tj {
            let lam = self.pair(ti, tj);
            if a % self.sizes[tj] == b {
                lam[a]
            } else {
                S::ZERO
            }
        } else {
            let lam = self.pair(tj, ti);
            if b % self.sizes[ti] == a {
                lam[b].conj()
            } else {
                S::ZERO
            }
        }
    }

    fn task_of(&self, g: usize) -> usize {
        self.offsets.partition_point(|&o| o <= g) - 1
    }

    /// Dense `N × N` copy of `Λ̃`, row-major.
    pub fn to_dense(&self) -> Vec<S> {
        let n = self.total();
        let mut out = vec![S::ZERO; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = self.entry(i, j);
            }
        }
        out
    }

    /// Applies `V̄` per task to a real vector.
    fn forward_all(&self, y: &[f64]) -> Result<Vec<S>> {
        if y.len() != self.total() {
            return Err(Error::LengthMismatch { expected: self.total(), got: y.len() });
        }
        let mut out: Vec<S> = y.iter().map(|&v| S::from_real(v)).collect();
        for (k, &n) in self.sizes.iter().enumerate() {
            S::forward(&mut out[self.offsets[k]..self.offsets[k] + n])?;
        }
        Ok(out)
    }

    /// Applies `V` per task and returns the real part.
    fn inverse_all(&self, mut z: Vec<S>) -> Result<Vec<f64>> {
        for (k, &n) in self.sizes.iter().enumerate() {
            S::inverse(&mut z[self.offsets[k]..self.offsets[k] + n])?;
        }
        real_part(&z)
    }

    /// `K̃ y` for `y` in internal task order.
    pub fn gram_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        let yh = self.forward_all(y)?;
        let mut z = vec![S::ZERO; yh.len()];
        let l = self.num_tasks();
        for i in 0..l {
            for j in i..l {
                let lam = self.pair(i, j);
                let nj = self.sizes[j];
                let (oi, oj) = (self.offsets[i], self.offsets[j]);
                for (a, &la) in lam.iter().enumerate() {
                    let b = a % nj;
                    z[oi + a] += la * yh[oj + b];
                    if i != j {
                        z[oj + b] += la.conj() * yh[oi + a];
                    }
                }
            }
        }
        self.inverse_all(z)
    }

    /// Writes the nonzero pattern of `Λ̃` as `row,col` CSV.
    pub fn write_sparsity_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["row", "col"])?;
        let n = self.total();
        for i in 0..n {
            for j in 0..n {
                if self.entry(i, j) != S::ZERO {
                    wr.write_record([i.to_string(), j.to_string()])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }
}

fn real_part<S: Spectral>(z: &[S]) -> Result<Vec<f64>> {
    let scale = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let imag = z.iter().fold(0.0f64, |m, v| m.max(v.im().abs()));
    if imag > IMAG_TOL * scale.max(f64::MIN_POSITIVE) && imag > 0.0 {
        return Err(Error::ImaginaryResidue(imag / scale));
    }
    Ok(z.iter().map(|v| v.re()).collect())
}

/// Evaluates one cross-task kernel column per task pair and transforms it.
///
/// `λ̃_{ℓℓ'} = √n_ℓ' · V̄ (K̃_{ℓℓ'})_{:,0}` for `ℓ ≤ ℓ'`; the noise `ξ_ℓ`
/// is added to every entry of `λ̃_{ℓℓ}`.
pub fn build_spectrum<S: Spectral>(
    design: &LdDesign,
    hyper: &Hyperparams,
    family: KernelFamily,
) -> Result<BlockSpectrum<S>> {
    if family.sequence_kind() != Some(design.kind()) || S::SEQUENCE != design.kind() {
        return Err(Error::FamilyMismatch);
    }
    if hyper.num_tasks() != design.num_tasks() {
        return Err(Error::LengthMismatch { expected: design.num_tasks(), got: hyper.num_tasks() });
    }
    if hyper.dim() != design.dim() {
        return Err(Error::LengthMismatch { expected: design.dim(), got: hyper.dim() });
    }
    let sizes = design.sizes();
    check_sizes(&sizes)?;
    let q = SpatialKernel::new(family, hyper)?;
    let r = hyper.task_gram()?.permuted(design.order());
    let d = design.dim();
    let tasks = design.tasks();
    let l = sizes.len();

    let pairs: Vec<(usize, usize)> = (0..l).flat_map(|i| (i..l).map(move |j| (i, j))).collect();
    let vectors: Vec<Vec<S>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let ni = sizes[i];
            let anchor = tasks[j].point(0, d);
            let rij = r.get(i, j);
            let mut col: Vec<S> =
                (0..ni).map(|a| S::from_real(rij * q.eval(tasks[i].point(a, d), anchor))).collect();
            S::forward(&mut col)?;
            let scale = (sizes[j] as f64).sqrt();
            let xi = hyper.xi[design.order()[i]];
            for v in col.iter_mut() {
                *v = v.scale(scale);
                if i == j {
                    *v += S::from_real(xi);
                }
            }
            Ok(col)
        })
        .collect::<Result<_>>()?;

    let mut it = vectors.into_iter();
    let lambda = (0..l).map(|i| (i..l).map(|_| it.next().expect("pair count")).collect()).collect();
    BlockSpectrum::from_parts(sizes, lambda)
}

/// `Λ̃⁻¹` as an `r × r` grid of diagonal blocks of length `n_L`.
#[derive(Debug, Clone)]
pub struct BlockInverse<S> {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    nb: usize,
    r: usize,
    data: Vec<S>,
    nonzero: Vec<bool>,
    logdet: f64,
    schur: Vec<Vec<S>>,
}

/// Read-only view of one refinement level of the grid.
struct Grid<'a, S> {
    nb: usize,
    r: usize,
    data: &'a [S],
    nonzero: &'a [bool],
}

impl<S: Spectral> Grid<'_, S> {
    /// Block `(i, j)` after splitting each stored block into `q × q`
    /// diagonal sub-blocks of length `nb / q`.
    #[inline]
    fn refined(&self, q: usize, i: usize, j: usize) -> Option<&[S]> {
        let (bi, si) = (i / q, i % q);
        let (bj, sj) = (j / q, j % q);
        if si != sj || !self.nonzero[bi * self.r + bj] {
            return None;
        }
        let nb = self.nb / q;
        let start = (bi * self.r + bj) * self.nb + si * nb;
        Some(&self.data[start..start + nb])
    }
}

impl<S: Spectral> BlockInverse<S> {
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn block_size(&self) -> usize {
        self.nb
    }

    /// Grid side `r = N / n_L`.
    pub fn grid_dim(&self) -> usize {
        self.r
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Diagonal of block `(i, j)`, or `None` for a structural zero.
    pub fn block(&self, i: usize, j: usize) -> Option<&[S]> {
        let k = i * self.r + j;
        self.nonzero[k].then(|| &self.data[k * self.nb..(k + 1) * self.nb])
    }

    /// Diagonal Schur complement of every stage (stage 1 is `λ̃₁₁`).
    pub fn schur_complements(&self) -> &[Vec<S>] {
        &self.schur
    }

    /// Entry `(i, j)` of `Λ̃⁻¹` in global indexing.
    pub fn entry(&self, i: usize, j: usize) -> S {
        let (bi, ci) = (i / self.nb, i % self.nb);
        let (bj, cj) = (j / self.nb, j % self.nb);
        match self.block(bi, bj) {
            Some(v) if ci == cj => v[ci],
            _ => S::ZERO,
        }
    }

    /// `Λ̃⁻¹ ŷ` in the transformed domain.
    pub fn apply_spectral(&self, yh: &[S]) -> Result<Vec<S>> {
        let n = self.offsets[self.sizes.len()];
        if yh.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: yh.len() });
        }
        let nb = self.nb;
        let mut z = vec![S::ZERO; n];
        z.par_chunks_mut(nb).enumerate().for_each(|(i, zi)| {
            for j in 0..self.r {
                if let Some(g) = self.block(i, j) {
                    let yj = &yh[j * nb..(j + 1) * nb];
                    for ((z, &g), &y) in zi.iter_mut().zip(g).zip(yj) {
                        *z += g * y;
                    }
                }
            }
        });
        Ok(z)
    }

    /// `K̃⁻¹ y` for real `y` in internal task order.
    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        let n = self.offsets[self.sizes.len()];
        if y.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: y.len() });
        }
        let mut yh: Vec<S> = y.iter().map(|&v| S::from_real(v)).collect();
        for (k, &m) in self.sizes.iter().enumerate() {
            S::forward(&mut yh[self.offsets[k]..self.offsets[k] + m])?;
        }
        let mut z = self.apply_spectral(&yh)?;
        for (k, &m) in self.sizes.iter().enumerate() {
            S::inverse(&mut z[self.offsets[k]..self.offsets[k] + m])?;
        }
        real_part(&z)
    }

    /// `trace(K̃⁻¹) = trace(Λ̃⁻¹)`.
    pub fn trace_inverse(&self) -> Result<f64> {
        let mut acc = S::ZERO;
        for i in 0..self.r {
            if let Some(v) = self.block(i, i) {
                for &x in v {
                    acc += x;
                }
            }
        }
        if acc.im().abs() > IMAG_TOL * acc.abs() {
            return Err(Error::ImaginaryResidue(acc.im().abs() / acc.abs()));
        }
        Ok(acc.re())
    }

    /// `Π` (row-major `L × L`, equal to `EᵀK̃⁻¹E`) and `H` (row-major `L × r`,
    /// with `H H̄ᵀ = EᵀK̃⁻²E`).
    pub fn extract_pi_h(&self) -> Result<(Vec<f64>, Vec<S>)> {
        let l = self.sizes.len();
        let mut pi = vec![0.0; l * l];
        let mut h = vec![S::ZERO; l * self.r];
        for a in 0..l {
            let ra = self.offsets[a] / self.nb;
            let sa = (self.sizes[a] as f64).sqrt();
            for b in 0..l {
                let rb = self.offsets[b] / self.nb;
                let v = self.block(ra, rb).map_or(S::ZERO, |blk| blk[0]).scale(sa * (self.sizes[b] as f64).sqrt());
                if v.im().abs() > 1e-8 * v.abs().max(1.0) {
                    return Err(Error::ImaginaryResidue(v.im().abs()));
                }
                pi[a * l + b] = v.re();
            }
            for k in 0..self.r {
                h[a * self.r + k] = self.block(ra, k).map_or(S::ZERO, |blk| blk[0]).scale(sa);
            }
        }
        Ok((pi, h))
    }

    /// Real part of `H H̄ᵀ`, row-major `L × L`.
    pub fn hh_conj(&self) -> Result<Vec<f64>> {
        let (_, h) = self.extract_pi_h()?;
        let l = self.sizes.len();
        let mut out = vec![0.0; l * l];
        for a in 0..l {
            for b in 0..l {
                let mut acc = S::ZERO;
                for k in 0..self.r {
                    acc += h[a * self.r + k] * h[b * self.r + k].conj();
                }
                if acc.im().abs() > 1e-8 * acc.abs().max(1.0) {
                    return Err(Error::ImaginaryResidue(acc.im().abs()));
                }
                out[a * l + b] = acc.re();
            }
        }
        Ok(out)
    }
}

fn schur_check<S: Spectral>(stage: usize, s: &[S], d: &[S]) -> Result<f64> {
    let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = SCHUR_FLOOR_ULPS * f64::EPSILON * dmax;
    let mut min_real = f64::INFINITY;
    let mut logdet = 0.0;
    let mut phase = 0.0;
    for &v in s {
        min_real = min_real.min(v.re());
        logdet += v.abs().ln();
        phase += v.im().atan2(v.re());
    }
    if !(min_real > floor) {
        return Err(Error::SchurBreakdown { stage, min_real });
    }
    if phase.abs() > 1e-8 * s.len() as f64 {
        return Err(Error::ImaginaryResidue(phase));
    }
    Ok(logdet)
}

/// Algorithm 1: inverse and log-determinant of `Λ̃`, one task at a time.
pub fn invert_and_logdet<S: Spectral>(spec: &BlockSpectrum<S>) -> Result<BlockInverse<S>> {
    let sizes = spec.sizes().to_vec();
    let offsets = spec.offsets.clone();
    let l = sizes.len();

    let d0 = spec.pair(0, 0);
    let mut logdet = schur_check(1, d0, d0)?;
    let mut nb = sizes[0];
    let mut r = 1;
    let mut data: Vec<S> = d0.iter().map(|&v| S::ONE / v).collect();
    let mut nonzero = vec![true];
    let mut schur = vec![d0.to_vec()];

    for k in 1..l {
        let nbn = sizes[k];
        let q = nb / nbn;
        let ra = r * q;
        let old = Grid { nb, r, data: &data, nonzero: &nonzero };

        // B_j: block j of the column Λ̃_{1:k-1, k} at granularity n_k.
        let bcol: Vec<&[S]> = (0..ra)
            .map(|j| {
                let g = j * nbn;
                let t = offsets.partition_point(|&o| o <= g) - 1;
                let s = (g - offsets[t]) / nbn;
                &spec.pair(t, k)[s * nbn..(s + 1) * nbn]
            })
            .collect();

        // L_i = Σ_j A_ij B_j
        let lcol: Vec<Option<Vec<S>>> = (0..ra)
            .into_par_iter()
            .map(|i| {
                let mut acc: Option<Vec<S>> = None;
                for j in 0..ra {
                    if let Some(a) = old.refined(q, i, j) {
                        let v = acc.get_or_insert_with(|| vec![S::ZERO; nbn]);
                        for ((v, &a), &b) in v.iter_mut().zip(a).zip(bcol[j]) {
                            *v += a * b;
                        }
                    }
                }
                acc
            })
            .collect();

        // S = D - Σ_i B̄_i L_i
        let dk = spec.pair(k, k);
        let mut s = dk.to_vec();
        for (b, li) in bcol.iter().zip(&lcol) {
            if let Some(li) = li {
                for ((s, &b), &x) in s.iter_mut().zip(b.iter()).zip(li) {
                    *s -= b.conj() * x;
                }
            }
        }
        logdet += schur_check(k + 1, &s, dk)?;
        let g: Vec<S> = s.iter().map(|&v| S::ONE / v).collect();
        let hcol: Vec<Option<Vec<S>>> = lcol
            .iter()
            .map(|li| li.as_ref().map(|li| li.iter().zip(&g).map(|(&a, &b)| a * b).collect()))
            .collect();

        let rn = ra + 1;
        let mut new_data = vec![S::ZERO; rn * rn * nbn];
        let mut new_nz = vec![false; rn * rn];
        new_data
            .par_chunks_mut(rn * nbn)
            .zip(new_nz.par_chunks_mut(rn))
            .enumerate()
            .for_each(|(i, (row, nz))| {
                if i < ra {
                    for j in 0..ra {
                        let out = &mut row[j * nbn..(j + 1) * nbn];
                        // M = A + H_i L̄_j
                        if let Some(a) = old.refined(q, i, j) {
                            out.copy_from_slice(a);
                            nz[j] = true;
                        }
                        if let (Some(h), Some(lj)) = (&hcol[i], &lcol[j]) {
                            for ((o, &h), &x) in out.iter_mut().zip(h).zip(lj) {
                                *o += h * x.conj();
                            }
                            nz[j] = true;
                        }
                    }
                    if let Some(h) = &hcol[i] {
                        for (o, &h) in row[ra * nbn..].iter_mut().zip(h) {
                            *o = -h;
                        }
                        nz[ra] = true;
                    }
                } else {
                    for j in 0..ra {
                        if let Some(h) = &hcol[j] {
                            for (o, &h) in row[j * nbn..(j + 1) * nbn].iter_mut().zip(h) {
                                *o = -h.conj();
                            }
                            nz[j] = true;
                        }
                    }
                    row[ra * nbn..].copy_from_slice(&g);
                    nz[ra] = true;
                }
            });

        data = new_data;
        nonzero = new_nz;
        nb = nbn;
        r = rn;
        schur.push(s);
    }

    Ok(BlockInverse { sizes, offsets, nb, r, data, nonzero, logdet, schur })
}
