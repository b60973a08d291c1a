use super::{from_bits, to_bits, DIGITAL_BITS};
use crate::error::{Error, Result};

const EMBEDDED: &str = include_str!("../../data/sobol_joe_kuo.txt");
const DIRECTION_BITS: u32 = 32;

/// Generating matrices of a base-2 digital sequence. `columns[j][p]` holds
/// the `p`-th column for dimension `j` as a 53-bit fraction numerator.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitalGenerator {
    columns: Vec<Vec<u64>>,
    m_max: u32,
}

impl DigitalGenerator {
    pub fn new(columns: Vec<Vec<u64>>) -> Result<Self> {
        let m_max = columns.first().map_or(0, |c| c.len());
        if columns.is_empty() || columns.iter().any(|c| c.len() != m_max) {
            return Err(Error::InvalidParameter(
                "every dimension needs the same number of columns".into(),
            ));
        }
        if m_max > 63 || columns.iter().flatten().any(|&c| c >> DIGITAL_BITS != 0) {
            return Err(Error::InvalidParameter("column wider than 53 bits".into()));
        }
        Ok(Self { columns, m_max: m_max as u32 })
    }

    /// Sobol' generating matrices from the shipped Joe–Kuo direction numbers.
    pub fn embedded(d: usize) -> Result<Self> {
        let rows: Vec<&str> = EMBEDDED
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        if d == 0 || d > rows.len() {
            return Err(Error::DimensionTooLarge { requested: d, available: rows.len() });
        }
        let columns = rows[..d]
            .iter()
            .map(|row| {
                let nums: Vec<u64> = row
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| Error::Parse((*row).into())))
                    .collect::<Result<_>>()?;
                let (s, a) = (nums[1] as usize, nums[2]);
                Ok(direction_numbers(s, a, &nums[3..])
                    .into_iter()
                    .map(|v| v << (DIGITAL_BITS - DIRECTION_BITS))
                    .collect())
            })
            .collect::<Result<Vec<Vec<u64>>>>()?;
        Self::new(columns)
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self, dim: usize) -> &[u64] {
        &self.columns[dim]
    }

    pub fn n_max(&self) -> u64 {
        1 << self.m_max
    }

    /// Unshifted point `i` as 53-bit integers, one per dimension.
    pub fn point_bits(&self, i: u64) -> Vec<u64> {
        self.columns
            .iter()
            .map(|cols| {
                let mut acc = 0u64;
                let mut bits = i;
                let mut p = 0;
                while bits != 0 {
                    if bits & 1 == 1 {
                        acc ^= cols[p];
                    }
                    bits >>= 1;
                    p += 1;
                }
                acc
            })
            .collect()
    }

    /// Row `r` is `(⊕_p i_p g_p) ⊕ shift` for `i = i0 + r`.
    pub fn points(&self, shift: &[f64], i0: u64, count: usize) -> Result<Vec<f64>> {
        let d = self.dim();
        if shift.len() != d {
            return Err(Error::LengthMismatch { expected: d, got: shift.len() });
        }
        let end = i0 + count as u64;
        if end > self.n_max() {
            return Err(Error::IndexOutOfRange { index: end, limit: self.n_max() });
        }
        let shift_bits: Vec<u64> = shift.iter().map(|&s| to_bits(s)).collect();
        let mut out = Vec::with_capacity(count * d);
        for i in i0..end {
            for (z, s) in self.point_bits(i).into_iter().zip(&shift_bits) {
                out.push(from_bits(z ^ s));
            }
        }
        Ok(out)
    }
}

/// Joe–Kuo recurrence for one dimension; returns 32 direction integers.
fn direction_numbers(s: usize, a: u64, m: &[u64]) -> Vec<u64> {
    let bits = DIRECTION_BITS as usize;
    let mut v = vec![0u64; bits];
    if s == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1 << (bits - 1 - k);
        }
        return v;
    }
    for k in 0..s.min(bits) {
        v[k] = m[k] << (bits - 1 - k);
    }
    for k in s..bits {
        let mut x = v[k - s] ^ (v[k - s] >> s);
        for i in 1..s {
            if (a >> (s - 1 - i)) & 1 == 1 {
                x ^= v[k - i];
            }
        }
        v[k] = x;
    }
    v
}
