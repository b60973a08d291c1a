//! Spatial kernels, the task kernel and the multitask product kernel.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ld::{to_bits, SequenceKind, DIGITAL_BITS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    /// Shift-invariant Bernoulli product kernel on a shifted lattice.
    SiLattice,
    /// Digitally-shift-invariant Walsh product kernel on a digital net.
    DsiDigital,
    /// Squared exponential kernel, dense path only.
    SeDense,
}

impl KernelFamily {
    /// Sequence family whose Gram matrices this kernel diagonalizes.
    pub fn sequence_kind(self) -> Option<SequenceKind> {
        match self {
            KernelFamily::SiLattice => Some(SequenceKind::Lattice),
            KernelFamily::DsiDigital => Some(SequenceKind::Digital),
            KernelFamily::SeDense => None,
        }
    }

    pub fn is_fast(self) -> bool {
        self.sequence_kind().is_some()
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "si-lattice" => Ok(KernelFamily::SiLattice),
            "dsi-digital" => Ok(KernelFamily::DsiDigital),
            "se-dense" => Ok(KernelFamily::SeDense),
            _ => Err(Error::Parse(format!("unknown kernel family `{s}`"))),
        }
    }
}

impl std::fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelFamily::SiLattice => "si-lattice",
            KernelFamily::DsiDigital => "dsi-digital",
            KernelFamily::SeDense => "se-dense",
        })
    }
}

/// How the DSI order weights `b` are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DsiWeights {
    /// All four order weights are free.
    PerOrder,
    /// Only order `α` is active with unit weight.
    Single(u8),
}

/// Kernel and model hyperparameters. Task-indexed vectors are in the
/// caller's task order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub gamma: f64,
    /// Product weights of the SI/DSI kernels.
    pub eta: Vec<f64>,
    /// SE lengthscales.
    pub lengthscales: Vec<f64>,
    /// SI smoothness, 1 or 2.
    pub si_alpha: u8,
    pub b: [f64; 4],
    pub dsi_weights: DsiWeights,
    /// Task factor `B`, one row of length `s` per task.
    pub task_factor: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub xi: Vec<f64>,
    pub tau: Vec<f64>,
}

impl Hyperparams {
    /// Unit-scale defaults: `R = I`, zero prior means, noise `xi`.
    pub fn new(d: usize, tasks: usize, xi: f64) -> Self {
        Self {
            gamma: 1.0,
            eta: vec![1.0; d],
            lengthscales: vec![1.0; d],
            si_alpha: 1,
            b: [1.0; 4],
            dsi_weights: DsiWeights::PerOrder,
            task_factor: vec![Vec::new(); tasks],
            t: vec![1.0; tasks],
            xi: vec![xi; tasks],
            tau: vec![0.0; tasks],
        }
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.t.len()
    }

    pub fn rank(&self) -> usize {
        self.task_factor.first().map_or(0, Vec::len)
    }

    /// Effective DSI order weights.
    pub fn dsi_b(&self) -> [f64; 4] {
        match self.dsi_weights {
            DsiWeights::PerOrder => self.b,
            DsiWeights::Single(a) => {
                let mut b = [0.0; 4];
                b[(a as usize).clamp(1, 4) - 1] = 1.0;
                b
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: &[f64]| -> Result<()> {
            if v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::InvalidParameter(format!("{name} must be positive and finite")));
            }
            Ok(())
        };
        pos("gamma", &[self.gamma])?;
        pos("eta", &self.eta)?;
        pos("lengthscales", &self.lengthscales)?;
        pos("t", &self.t)?;
        if self.eta.len() != self.lengthscales.len() {
            return Err(Error::LengthMismatch { expected: self.eta.len(), got: self.lengthscales.len() });
        }
        if self.b.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidParameter("b must be non-negative".into()));
        }
        if self.xi.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidParameter("xi must be non-negative".into()));
        }
        if !matches!(self.si_alpha, 1 | 2) {
            return Err(Error::InvalidParameter(format!("SI smoothness {} unsupported", self.si_alpha)));
        }
        if let DsiWeights::Single(a) = self.dsi_weights {
            if !(1..=4).contains(&a) {
                return Err(Error::InvalidParameter(format!("DSI order {a} unsupported")));
            }
        }
        let l = self.t.len();
        for (name, len) in [("xi", self.xi.len()), ("tau", self.tau.len()), ("task_factor", self.task_factor.len())] {
            if len != l {
                return Err(Error::InvalidParameter(format!("{name} has {len} entries for {l} tasks")));
            }
        }
        let s = self.rank();
        if self.task_factor.iter().any(|r| r.len() != s) {
            return Err(Error::InvalidParameter("ragged task factor".into()));
        }
        Ok(())
    }

    pub fn task_gram(&self) -> Result<TaskGram> {
        task_gram(&self.task_factor, &self.t)
    }
}

pub fn se_kernel(x: &[f64], xp: &[f64], gamma: f64, lengthscales: &[f64]) -> Result<f64> {
    if lengthscales.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidParameter("non-positive lengthscale".into()));
    }
    Ok(se_unchecked(x, xp, gamma, lengthscales))
}

#[inline]
fn se_unchecked(x: &[f64], xp: &[f64], gamma: f64, lengthscales: &[f64]) -> f64 {
    let q: f64 = x
        .iter()
        .zip(xp)
        .zip(lengthscales)
        .map(|((a, b), l)| (a - b) * (a - b) / (2.0 * l * l))
        .sum();
    gamma * (-q).exp()
}

#[inline]
fn si_unchecked(delta: f64, alpha: u8) -> f64 {
    let u = delta;
    if alpha == 1 {
        2.0 * PI * PI * (u * u - u + 1.0 / 6.0)
    } else {
        let b4 = u * u * (u * u - 2.0 * u + 1.0) - 1.0 / 30.0;
        -(2.0 * PI.powi(4) / 3.0) * b4
    }
}

/// Shift-invariant Bernoulli kernel of smoothness `alpha`.
pub fn si_bernoulli_1d(x: f64, xp: f64, alpha: u8) -> Result<f64> {
    if !matches!(alpha, 1 | 2) {
        return Err(Error::InvalidParameter(format!("SI smoothness {alpha} unsupported")));
    }
    Ok(si_unchecked(wrap(x - xp), alpha))
}

#[inline]
fn wrap(d: f64) -> f64 {
    let r = d - d.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Values at `u = 0` of the four DSI orders.
pub const DSI_AT_ZERO: [f64; 4] = [1.0, 1.5, 25.0 / 18.0, 407.0 / 294.0];

/// The four DSI order kernels at `u = x ⊕ x'` given as 53-bit digits.
///
/// With `β = -⌊log₂ u⌋` and `t_ν = 2^{-νβ}` the implemented forms are
///
/// ```text
/// K₁ = 1 - 3 t₁
/// K₂ = -1 - βu + (5/2)(1 - t₁)
/// K₃ = -1 + βu² - 5(1 - t₁)u + (43/18)(1 - t₂)
/// K₄ = -1 - (2/3)βu³ + 5(1 - t₁)u² - (43/9)(1 - t₂)u + (701/294)(1 - t₃)
///      - (β/24) Σ_a u_a 8^{-(a-1)}
/// ```
///
/// where `u_a` is the a-th binary digit of `u`. Each form integrates to zero
/// over `[0,1)` and has a nonnegative Walsh spectrum. `K₁` is the order-one
/// Walsh kernel shifted to zero mean; the `α = 4` digit sum is the ±1-digit
/// series with its constant folded into the `1/42` term.
#[inline]
pub fn dsi_orders(u_bits: u64) -> [f64; 4] {
    if u_bits == 0 {
        return DSI_AT_ZERO;
    }
    let u = crate::ld::from_bits(u_bits);
    let beta = (u_bits.leading_zeros() - (64 - DIGITAL_BITS) + 1) as i32;
    let bf = beta as f64;
    let t1 = 2f64.powi(-beta);
    let t2 = t1 * t1;
    let t3 = t2 * t1;
    let k1 = 1.0 - 3.0 * t1;
    let k2 = -1.0 - bf * u + 2.5 * (1.0 - t1);
    let k3 = -1.0 + bf * u * u - 5.0 * (1.0 - t1) * u + (43.0 / 18.0) * (1.0 - t2);
    let k4 = -1.0 - (2.0 / 3.0) * bf * u * u * u + 5.0 * (1.0 - t1) * u * u
        - (43.0 / 9.0) * (1.0 - t2) * u
        + (701.0 / 294.0) * (1.0 - t3)
        - bf / 24.0 * octal_digit_sum(u_bits);
    [k1, k2, k3, k4]
}

/// `Σ_a u_a 8^{-(a-1)}` over the stored digits of `u`.
#[inline]
fn octal_digit_sum(mut u_bits: u64) -> f64 {
    let mut s = 0.0;
    while u_bits != 0 {
        let top = 63 - u_bits.leading_zeros();
        let a = DIGITAL_BITS - top;
        s += 8f64.powi(1 - a as i32);
        u_bits &= !(1u64 << top);
    }
    s
}

/// Digitally-shift-invariant kernel `Σ_α b_α K_α(x ⊕ x')`.
pub fn dsi_walsh_1d(x: f64, xp: f64, b: &[f64; 4]) -> f64 {
    let k = dsi_orders(to_bits(x) ^ to_bits(xp));
    b[0] * k[0] + b[1] * k[1] + b[2] * k[2] + b[3] * k[3]
}

/// `γ Π_j (1 + η_j base(x_j, x'_j))`.
pub fn product_kernel<F>(x: &[f64], xp: &[f64], gamma: f64, eta: &[f64], base: F) -> Result<f64>
where
    F: Fn(f64, f64) -> Result<f64>,
{
    let mut k = gamma;
    for ((&a, &b), &e) in x.iter().zip(xp).zip(eta) {
        k *= 1.0 + e * base(a, b)?;
    }
    Ok(k)
}

/// `R = BBᵀ + diag(t)`, row-major `L × L`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGram {
    l: usize,
    r: Vec<f64>,
}

impl TaskGram {
    pub fn num_tasks(&self) -> usize {
        self.l
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.l + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.r
    }

    /// Reorders rows and columns: entry `(i,j)` becomes `R[perm[i], perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> TaskGram {
        let l = self.l;
        let mut r = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..l {
                r[i * l + j] = self.get(perm[i], perm[j]);
            }
        }
        TaskGram { l, r }
    }
}

pub fn task_gram(b: &[Vec<f64>], t: &[f64]) -> Result<TaskGram> {
    let l = t.len();
    if b.len() != l {
        return Err(Error::LengthMismatch { expected: l, got: b.len() });
    }
    if t.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidParameter("task diagonal t must be positive".into()));
    }
    let mut r = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            let dot: f64 = b[i].iter().zip(&b[j]).map(|(p, q)| p * q).sum();
            r[i * l + j] = dot + if i == j { t[i] } else { 0.0 };
        }
    }
    Ok(TaskGram { l, r })
}

/// Spatial kernel `Q` with its hyperparameters bound.
#[derive(Debug, Clone)]
pub struct SpatialKernel {
    family: KernelFamily,
    gamma: f64,
    weights: Vec<f64>,
    si_alpha: u8,
    b: [f64; 4],
}

impl SpatialKernel {
    pub fn new(family: KernelFamily, hyper: &Hyperparams) -> Result<Self> {
        hyper.validate()?;
        let weights = match family {
            KernelFamily::SeDense => hyper.lengthscales.clone(),
            _ => hyper.eta.clone(),
        };
        Ok(Self { family, gamma: hyper.gamma, weights, si_alpha: hyper.si_alpha, b: hyper.dsi_b() })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// One-dimensional base kernel (SI/DSI only).
    #[inline]
    pub fn base(&self, x: f64, xp: f64) -> f64 {
        match self.family {
            KernelFamily::SiLattice => si_unchecked(wrap(x - xp), self.si_alpha),
            KernelFamily::DsiDigital => dsi_walsh_1d(x, xp, &self.b),
            KernelFamily::SeDense => unreachable!("SE kernel has no product base"),
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], xp: &[f64]) -> f64 {
        match self.family {
            KernelFamily::SeDense => se_unchecked(x, xp, self.gamma, &self.weights),
            _ => {
                let mut k = self.gamma;
                for ((&a, &b), &e) in x.iter().zip(xp).zip(&self.weights) {
                    k *= 1.0 + e * self.base(a, b);
                }
                k
            }
        }
    }
}

/// `R_{ℓℓ'} Q(x, x')`.
pub fn mt_kernel(l: usize, x: &[f64], lp: usize, xp: &[f64], r: &TaskGram, q: &SpatialKernel) -> Result<f64> {
    let n = r.num_tasks();
    for task in [l, lp] {
        if task >= n {
            return Err(Error::TaskOutOfRange { task, tasks: n });
        }
    }
    Ok(r.get(l, lp) * q.eval(x, xp))
}
