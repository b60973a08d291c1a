//! Low-discrepancy point sets: shifted rank-1 lattices and digitally-shifted
//! base-2 digital sequences, both enumerated in radical-inverse order.
//!
//! All tasks of a design share one generator and differ only in their shift,
//! which is what makes the multitask Gram matrix block-structured.

mod design;
mod digital;
mod lattice;

pub use design::{LdDesign, TaskDesign};
pub use digital::DigitalGenerator;
pub use lattice::LatticeGenerator;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bits used to represent digital-net coordinates. Every value
/// `k / 2^53` with `k < 2^53` is exact in binary64.
pub const DIGITAL_BITS: u32 = 53;

const TWO_POW_53: f64 = (1u64 << 53) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Lattice,
    Digital,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Lattice(LatticeGenerator),
    Digital(DigitalGenerator),
}

impl Generator {
    pub fn kind(&self) -> SequenceKind {
        match self {
            Generator::Lattice(_) => SequenceKind::Lattice,
            Generator::Digital(_) => SequenceKind::Digital,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Generator::Lattice(g) => g.dim(),
            Generator::Digital(g) => g.dim(),
        }
    }

    /// Largest supported number of points.
    pub fn n_max(&self) -> u64 {
        match self {
            Generator::Lattice(g) => g.n_max(),
            Generator::Digital(g) => g.n_max(),
        }
    }

    /// Rows `i0 .. i0 + count` of the shifted sequence, row-major.
    pub fn points(&self, shift: &[f64], i0: u64, count: usize) -> Result<Vec<f64>> {
        match self {
            Generator::Lattice(g) => g.points(shift, i0, count),
            Generator::Digital(g) => g.points(shift, i0, count),
        }
    }
}

/// Radical inverse of `i` in base 2.
pub fn van_der_corput(i: u64) -> Result<f64> {
    if i >= 1 << 53 {
        return Err(Error::IndexOutOfRange { index: i, limit: 1 << 53 });
    }
    // Reversed bits occupy positions 63..11, so the result is exact.
    Ok((i.reverse_bits() >> 11) as f64 / TWO_POW_53)
}

/// Converts a fraction in `[0,1)` to its 53-bit integer digits (truncating).
#[inline]
pub fn to_bits(x: f64) -> u64 {
    debug_assert!((0.0..1.0).contains(&x), "{x} outside [0,1)");
    (x * TWO_POW_53) as u64
}

#[inline]
pub fn from_bits(k: u64) -> f64 {
    k as f64 / TWO_POW_53
}

/// Digital shift `a ⊕ b`: XOR of the binary digits of two fractions.
#[inline]
pub fn digital_shift(a: f64, b: f64) -> f64 {
    from_bits(to_bits(a) ^ to_bits(b))
}

/// Generator loaded from the embedded tables.
pub fn default_generator(kind: SequenceKind, d: usize) -> Result<Generator> {
    Ok(match kind {
        SequenceKind::Lattice => Generator::Lattice(LatticeGenerator::embedded(d)?),
        SequenceKind::Digital => Generator::Digital(DigitalGenerator::embedded(d)?),
    })
}

/// Random shift for task `task` drawn from substream `task` of `seed`.
///
/// Lattice shifts are uniform doubles; digital shifts are uniform 53-bit
/// fractions so that XOR with a point is exact.
pub fn random_shift(kind: SequenceKind, d: usize, seed: u64, task: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(task as u64);
    (0..d)
        .map(|_| match kind {
            SequenceKind::Lattice => rng.random::<f64>(),
            SequenceKind::Digital => from_bits(rng.random::<u64>() >> 11),
        })
        .collect()
}
