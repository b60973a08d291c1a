//! Unitary fast transforms diagonalizing the structured Gram blocks.
//!
//! Convention: `forward` applies `V̄` and `inverse` applies `V`, with
//! `K̃ = V diag(λ̃) V̄`. On the Walsh path `V = V̄` is the normalized
//! Hadamard matrix. On the lattice path `V̄ = F P / √n` where `P` is the
//! bit-reversal permutation and `F_{kj} = exp(-2πi kj/n)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::ld::SequenceKind;
use crate::scalar::Scalar;

fn check_len(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    Ok(())
}

/// In-place orthonormal Walsh–Hadamard transform (an involution).
pub fn fwht_in_place(a: &mut [f64]) -> Result<()> {
    let n = a.len();
    check_len(n)?;
    let mut h = 1;
    while h < n {
        for block in a.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                let (s, d) = (*x + *y, *x - *y);
                *x = s;
                *y = d;
            }
        }
        h *= 2;
    }
    let scale = 1.0 / (n as f64).sqrt();
    a.iter_mut().for_each(|x| *x *= scale);
    Ok(())
}

pub fn fwht(a: &[f64]) -> Result<Vec<f64>> {
    let mut out = a.to_vec();
    fwht_in_place(&mut out)?;
    Ok(out)
}

/// Permutes `a` so that `a'[i] = a[rev(i)]` with `rev` reversing `log2 n` bits.
pub fn bit_reverse_permute<T>(a: &mut [T]) -> Result<()> {
    let n = a.len();
    check_len(n)?;
    if n <= 2 {
        return Ok(());
    }
    let shift = usize::BITS - n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> shift;
        if i < j {
            a.swap(i, j);
        }
    }
    Ok(())
}

type PlanCache = Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>;

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    static CACHE: OnceLock<PlanCache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
    map.entry((n, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            if inverse {
                planner.plan_fft_inverse(n)
            } else {
                planner.plan_fft_forward(n)
            }
        })
        .clone()
}

/// In-place `V̄ a`: bit-reversal followed by the unitary DFT.
pub fn fft_bitrev_in_place(a: &mut [Complex64]) -> Result<()> {
    bit_reverse_permute(a)?;
    let n = a.len();
    plan(n, false).process(a);
    let scale = 1.0 / (n as f64).sqrt();
    a.iter_mut().for_each(|x| *x *= scale);
    Ok(())
}

/// In-place `V a`: unitary inverse DFT followed by bit-reversal.
pub fn fft_bitrev_inv_in_place(a: &mut [Complex64]) -> Result<()> {
    let n = a.len();
    check_len(n)?;
    plan(n, true).process(a);
    let scale = 1.0 / (n as f64).sqrt();
    a.iter_mut().for_each(|x| *x *= scale);
    bit_reverse_permute(a)
}

pub fn fft_bitrev(a: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut out = a.to_vec();
    fft_bitrev_in_place(&mut out)?;
    Ok(out)
}

pub fn fft_bitrev_inv(a: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut out = a.to_vec();
    fft_bitrev_inv_in_place(&mut out)?;
    Ok(out)
}

/// Scalar type paired with the transform that diagonalizes its Gram blocks.
pub trait Spectral: Scalar {
    /// Sequence family whose Gram blocks this transform diagonalizes.
    const SEQUENCE: SequenceKind;

    /// `a ← V̄ a`
    fn forward(a: &mut [Self]) -> Result<()>;
    /// `a ← V a`
    fn inverse(a: &mut [Self]) -> Result<()>;
}

impl Spectral for f64 {
    const SEQUENCE: SequenceKind = SequenceKind::Digital;

    fn forward(a: &mut [Self]) -> Result<()> {
        fwht_in_place(a)
    }
    fn inverse(a: &mut [Self]) -> Result<()> {
        fwht_in_place(a)
    }
}

impl Spectral for Complex64 {
    const SEQUENCE: SequenceKind = SequenceKind::Lattice;

    fn forward(a: &mut [Self]) -> Result<()> {
        fft_bitrev_in_place(a)
    }
    fn inverse(a: &mut [Self]) -> Result<()> {
        fft_bitrev_inv_in_place(a)
    }
}
