//! Multifidelity benchmark problems on the unit cube. Task indices are
//! 1-based fidelity levels in the free functions and 0-based in [`Problem`].

use std::f64::consts::{E, PI};

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

const EPS: f64 = 1.0 / (1u64 << 53) as f64;

/// Smallest borehole radius kept after the normal quantile map; the normal
/// marginal goes negative only beyond six standard deviations.
const MIN_BOREHOLE_RADIUS: f64 = 1e-3;

fn std_normal_quantile(x: f64) -> f64 {
    thread_local! {
        static N: Normal = Normal::standard();
    }
    N.with(|n| n.inverse_cdf(x.clamp(EPS, 1.0 - EPS)))
}

/// Rosenbrock family on `[-2, 2]²`; level 3 is the classical function.
pub fn rosenbrock(level: usize, x: &[f64]) -> f64 {
    let p1 = 4.0 * x[0] - 2.0;
    let p2 = 4.0 * x[1] - 2.0;
    let f3 = 100.0 * (p2 - p1 * p1).powi(2) + (1.0 - p1).powi(2);
    match level {
        3 => f3,
        2 => 50.0 * (p2 - p1 * p1).powi(2) + (-2.0 - p1).powi(2) - 80.0 - 0.25 * p1 * p2,
        _ => (f3 - 4.0 - 0.5 * p1 - 0.5 * p2) / (10.0 + 0.25 * p1 + 0.25 * p2),
    }
}

/// Ackley with `c = 0` at level 1 and `c = 2π` at level 2, `a = 20`.
pub fn ackley(level: usize, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let c = if level == 1 { 0.0 } else { 2.0 * PI };
    let (mut sq, mut cs) = (0.0, 0.0);
    for &xi in x {
        let t = 65.536 * xi - 32.768;
        sq += t * t;
        cs += (c * t).cos();
    }
    -20.0 * (-0.2 * (sq / d).sqrt()).exp() - (cs / d).exp() + 20.0 + E
}

/// Physical borehole parameters `(r_w, r_i, T_u, H_u, T_l, H_l, L_b, K_w)`.
pub fn borehole_parameters(x: &[f64]) -> [f64; 8] {
    let u = |i: usize, lo: f64, hi: f64| lo + (hi - lo) * x[i];
    [
        (0.1 + 0.0161812 * std_normal_quantile(x[0])).max(MIN_BOREHOLE_RADIUS),
        (7.71 + 1.0056 * std_normal_quantile(x[1])).exp(),
        u(2, 63070.0, 115600.0),
        u(3, 990.0, 1110.0),
        u(4, 63.1, 116.0),
        u(5, 700.0, 820.0),
        u(6, 1120.0, 1680.0),
        u(7, 9855.0, 12045.0),
    ]
}

/// Borehole flow rate from physical parameters.
pub fn borehole_flow(p: &[f64; 8], c1: f64, c2: f64) -> f64 {
    let [rw, ri, tu, hu, tl, hl, lb, kw] = *p;
    let lg = (ri / rw).ln();
    c1 * PI * tu * (hu - hl) / (lg * (c2 + 2.0 * lb * tu / (lg * rw * rw * kw) + tu / tl))
}

/// Borehole with `(c₁, c₂) = (2, 1)` at level 1 and `(5, 3/2)` at level 2.
pub fn borehole(level: usize, x: &[f64]) -> f64 {
    let (c1, c2) = if level == 1 { (2.0, 1.0) } else { (5.0, 1.5) };
    borehole_flow(&borehole_parameters(x), c1, c2)
}

/// Solves a tridiagonal system with sub-diagonal `a` (length n-1), diagonal
/// `b`, super-diagonal `c` (length n-1) and right-hand side `d`.
pub fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    if d.len() != n || a.len() + 1 != n.max(1) || c.len() + 1 != n.max(1) {
        return Err(Error::LengthMismatch { expected: n, got: d.len() });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut denom = b[0];
    if denom == 0.0 {
        return Err(Error::SingularSystem(n));
    }
    if n > 1 {
        cp[0] = c[0] / denom;
    }
    dp[0] = d[0] / denom;
    for i in 1..n {
        denom = b[i] - a[i - 1] * cp[i - 1];
        if denom == 0.0 {
            return Err(Error::SingularSystem(n));
        }
        if i < n - 1 {
            cp[i] = c[i] / denom;
        }
        dp[i] = (d[i] - a[i - 1] * dp[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        dp[i] -= cp[i] * dp[i + 1];
    }
    Ok(dp)
}

/// Maximum of the finite-difference solution of `-(e^a F')' = 1`,
/// `F(0) = F(1) = 0`, on `2^{1+level+refine}` intervals with
/// `a(u) = Σ_j Φ⁻¹(x_j) sin(π j u) / j` and the coefficient taken at cell
/// midpoints.
pub fn elliptic_pde_refined(level: usize, refine: u32, x: &[f64]) -> f64 {
    let m = 1usize << (1 + level as u32 + refine);
    let h = 1.0 / m as f64;
    let z: Vec<f64> = x.iter().map(|&v| std_normal_quantile(v)).collect();
    let k: Vec<f64> = (0..m)
        .map(|i| {
            let u = (i as f64 + 0.5) * h;
            let a: f64 = z.iter().enumerate().map(|(j, zj)| zj * (PI * (j + 1) as f64 * u).sin() / (j + 1) as f64).sum();
            a.exp()
        })
        .collect();
    let n = m - 1;
    let diag: Vec<f64> = (0..n).map(|i| k[i] + k[i + 1]).collect();
    let off: Vec<f64> = (1..n).map(|i| -k[i]).collect();
    let rhs = vec![h * h; n];
    let f = thomas(&off, &diag, &off, &rhs).expect("diagonally dominant system");
    f.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

pub fn elliptic_pde(level: usize, x: &[f64]) -> f64 {
    elliptic_pde_refined(level, 0, x)
}

/// A multifidelity problem; task 0 is the lowest fidelity.
pub trait Problem: Send + Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn num_tasks(&self) -> usize;
    fn eval(&self, task: usize, x: &[f64]) -> f64;
    /// Integral of the highest-fidelity task over the unit cube.
    fn reference_integral(&self) -> f64;
    /// Default per-task sample sizes, largest first.
    fn default_sizes(&self) -> Vec<usize>;
}

pub struct Rosenbrock;
pub struct Ackley {
    pub d: usize,
}
pub struct Borehole;
pub struct EllipticPde {
    /// Extra mesh halvings beyond the `2^{1+ℓ}` intervals of level `ℓ`.
    pub refine: u32,
}

impl Problem for Rosenbrock {
    fn name(&self) -> &'static str {
        "rosenbrock"
    }
    fn dim(&self) -> usize {
        2
    }
    fn num_tasks(&self) -> usize {
        3
    }
    fn eval(&self, task: usize, x: &[f64]) -> f64 {
        rosenbrock(task + 1, x)
    }
    /// Exact: `100·68/15 + 7/3`.
    fn reference_integral(&self) -> f64 {
        1367.0 / 3.0
    }
    fn default_sizes(&self) -> Vec<usize> {
        vec![4096, 2048, 1024]
    }
}

impl Problem for Ackley {
    fn name(&self) -> &'static str {
        "ackley"
    }
    fn dim(&self) -> usize {
        self.d
    }
    fn num_tasks(&self) -> usize {
        2
    }
    fn eval(&self, task: usize, x: &[f64]) -> f64 {
        ackley(task + 1, x)
    }
    /// 2^20-point scrambled Sobol' estimate (seed 20240601), d = 4.
    fn reference_integral(&self) -> f64 {
        assert_eq!(self.d, 4, "reference integral is stored for d = 4 only");
        20.8751159025147
    }
    fn default_sizes(&self) -> Vec<usize> {
        vec![1024, 1024]
    }
}

impl Problem for Borehole {
    fn name(&self) -> &'static str {
        "borehole"
    }
    fn dim(&self) -> usize {
        8
    }
    fn num_tasks(&self) -> usize {
        2
    }
    fn eval(&self, task: usize, x: &[f64]) -> f64 {
        borehole(task + 1, x)
    }
    /// 2^20-point scrambled Sobol' estimate (seed 20240601).
    fn reference_integral(&self) -> f64 {
        184.34685929976663
    }
    fn default_sizes(&self) -> Vec<usize> {
        vec![1024, 1024]
    }
}

impl Problem for EllipticPde {
    fn name(&self) -> &'static str {
        "elliptic-pde"
    }
    fn dim(&self) -> usize {
        16
    }
    fn num_tasks(&self) -> usize {
        3
    }
    fn eval(&self, task: usize, x: &[f64]) -> f64 {
        elliptic_pde_refined(task + 1, self.refine, x)
    }
    /// 2^20-point scrambled Sobol' estimate (seed 20240601), unrefined mesh.
    fn reference_integral(&self) -> f64 {
        assert_eq!(self.refine, 0, "reference integral is stored for the unrefined mesh only");
        0.15784539511714984
    }
    fn default_sizes(&self) -> Vec<usize> {
        vec![2048, 512, 128]
    }
}

pub const PROBLEM_NAMES: [&str; 4] = ["rosenbrock", "ackley", "borehole", "elliptic-pde"];

pub fn problem_by_name(name: &str) -> Result<Box<dyn Problem>> {
    Ok(match name {
        "rosenbrock" => Box::new(Rosenbrock),
        "ackley" => Box::new(Ackley { d: 4 }),
        "borehole" => Box::new(Borehole),
        "elliptic-pde" | "pde" => Box::new(EllipticPde { refine: 0 }),
        _ => return Err(Error::Parse(format!("unknown problem `{name}` (expected one of {PROBLEM_NAMES:?})"))),
    })
}

/// Evaluates task `task` at row-major points.
pub fn evaluate_batch(p: &dyn Problem, task: usize, points: &[f64]) -> Vec<f64> {
    use rayon::prelude::*;
    points.par_chunks(p.dim()).map(|x| p.eval(task, x)).collect()
}
