use crate::error::{Error, Result};

const EMBEDDED: &str = include_str!("../../data/lattice_vec.txt");

/// Generating vector of an extensible rank-1 lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGenerator {
    g: Vec<u64>,
    m_max: u32,
}

impl LatticeGenerator {
    pub fn new(g: Vec<u64>, m_max: u32) -> Result<Self> {
        if g.is_empty() || g.iter().any(|&v| v == 0) {
            return Err(Error::InvalidParameter(
                "generating vector entries must be positive".into(),
            ));
        }
        if m_max > 32 {
            return Err(Error::InvalidParameter(format!("m_max {m_max} > 32")));
        }
        Ok(Self { g, m_max })
    }

    /// First `d` components of the shipped table.
    pub fn embedded(d: usize) -> Result<Self> {
        let mut m_max = 0;
        let mut g = Vec::new();
        for line in EMBEDDED.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# m_max") {
                m_max = rest.trim().parse().map_err(|_| Error::Parse(line.into()))?;
            } else if !line.is_empty() && !line.starts_with('#') {
                g.push(line.parse().map_err(|_| Error::Parse(line.into()))?);
            }
        }
        if d == 0 || d > g.len() {
            return Err(Error::DimensionTooLarge { requested: d, available: g.len() });
        }
        g.truncate(d);
        Self::new(g, m_max)
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn components(&self) -> &[u64] {
        &self.g
    }

    pub fn n_max(&self) -> u64 {
        1 << self.m_max
    }

    /// Row `r` is `(v(i0 + r) g + shift) mod 1`.
    pub fn points(&self, shift: &[f64], i0: u64, count: usize) -> Result<Vec<f64>> {
        let d = self.dim();
        if shift.len() != d {
            return Err(Error::LengthMismatch { expected: d, got: shift.len() });
        }
        let end = i0 + count as u64;
        if end > self.n_max() {
            return Err(Error::IndexOutOfRange { index: end, limit: self.n_max() });
        }
        let m = self.m_max;
        let modulus = 1u64 << m;
        let scale = 1.0 / modulus as f64;
        let mut out = Vec::with_capacity(count * d);
        for i in i0..end {
            // v(i) = rev_m(i) / 2^m, exact for i < 2^m
            let v = if m == 0 { 0 } else { i.reverse_bits() >> (64 - m) };
            for (gj, sj) in self.g.iter().zip(shift) {
                let z = ((v as u128 * *gj as u128) % modulus as u128) as f64 * scale;
                let mut x = z + sj;
                x -= x.floor();
                // z + s can round up to exactly 1.0
                if x >= 1.0 {
                    x = 0.0;
                }
                out.push(x);
            }
        }
        Ok(out)
    }
}
