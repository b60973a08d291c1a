//! Multitask GP model: losses, closed-form prior means, Rprop fitting and
//! posterior inference over a fast (transform) or dense (Cholesky) path.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{self, DenseGram};
use crate::error::{Error, Result};
use crate::fast_gram::{build_spectrum, invert_and_logdet, BlockInverse, BlockSpectrum};
use crate::jitter;
use crate::kernels::{DsiWeights, Hyperparams, KernelFamily, SpatialKernel, TaskGram};
use crate::ld::{default_generator, LdDesign, SequenceKind};
use crate::transforms::Spectral;

/// Substream used for hyperparameter initialization, disjoint from the
/// per-task shift substreams.
pub const INIT_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Nmll,
    Gcv,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nmll" => Ok(LossKind::Nmll),
            "gcv" => Ok(LossKind::Gcv),
            _ => Err(Error::Parse(format!("unknown loss `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    Fast,
    Dense,
}

/// Factorized Gram matrix on either path.
#[derive(Debug, Clone)]
pub enum Solver {
    Walsh(BlockSpectrum<f64>, BlockInverse<f64>),
    Fourier(BlockSpectrum<Complex64>, BlockInverse<Complex64>),
    Dense(DenseGram),
}

fn fast_solver<S: Spectral>(design: &LdDesign, hyper: &Hyperparams, family: KernelFamily) -> Result<(BlockSpectrum<S>, BlockInverse<S>)> {
    let spec = build_spectrum::<S>(design, hyper, family)?;
    let inv = invert_and_logdet(&spec)?;
    Ok((spec, inv))
}

impl Solver {
    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            Solver::Walsh(_, inv) => inv.solve(y),
            Solver::Fourier(_, inv) => inv.solve(y),
            Solver::Dense(g) => g.solve(y),
        }
    }

    pub fn logdet(&self) -> f64 {
        match self {
            Solver::Walsh(_, inv) => inv.logdet(),
            Solver::Fourier(_, inv) => inv.logdet(),
            Solver::Dense(g) => g.logdet(),
        }
    }

    pub fn trace_inverse(&self) -> Result<f64> {
        match self {
            Solver::Walsh(_, inv) => inv.trace_inverse(),
            Solver::Fourier(_, inv) => inv.trace_inverse(),
            Solver::Dense(g) => Ok(g.inverse().trace()),
        }
    }

    /// `K̃ y`.
    pub fn matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            Solver::Walsh(s, _) => s.gram_matvec(y),
            Solver::Fourier(s, _) => s.gram_matvec(y),
            Solver::Dense(g) => Ok((g.matrix() * nalgebra::DVector::from_column_slice(y)).as_slice().to_vec()),
        }
    }

    /// `EᵀK̃⁻¹E` and `EᵀK̃⁻²E` in internal task order.
    pub fn projections(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Solver::Walsh(_, inv) => Ok((inv.extract_pi_h()?.0, inv.hh_conj()?)),
            Solver::Fourier(_, inv) => Ok((inv.extract_pi_h()?.0, inv.hh_conj()?)),
            Solver::Dense(g) => Ok(g.projected_inverses()),
        }
    }

    /// Zeroth entry of `λ̃₁₁` (single-task fast path only).
    pub fn lambda0(&self) -> Option<f64> {
        match self {
            Solver::Walsh(s, _) if s.num_tasks() == 1 => Some(s.pair(0, 0)[0]),
            Solver::Fourier(s, _) if s.num_tasks() == 1 => Some(s.pair(0, 0)[0].re),
            _ => None,
        }
    }
}

/// Everything derived from one hyperparameter setting.
#[derive(Debug, Clone)]
pub struct Solved {
    pub solver: Solver,
    /// Noise actually used, caller task order.
    pub xi: Vec<f64>,
    pub escalations: u32,
    /// Prior means, internal order.
    pub tau: Vec<f64>,
    /// `K̃⁻¹(y − Eτ)`, internal order.
    pub coef: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitReport {
    pub losses: Vec<f64>,
    pub best_losses: Vec<f64>,
    pub step_seconds: Vec<f64>,
    pub steps: usize,
    pub final_loss: f64,
    pub hyper: Hyperparams,
    pub tau: Vec<f64>,
    pub noise: Vec<f64>,
    pub escalations: u32,
}

impl FitReport {
    pub fn median_step_seconds(&self) -> f64 {
        median(&self.step_seconds)
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Rprop settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpropConfig {
    pub increase: f64,
    pub decrease: f64,
    pub step_min: f64,
    pub step_max: f64,
    pub step_init: f64,
    /// Central-difference step relative to `max(1, |θ|)`.
    pub fd_step: f64,
}

impl Default for RpropConfig {
    fn default() -> Self {
        Self { increase: 1.2, decrease: 0.5, step_min: 1e-6, step_max: 1.0, step_init: 0.1, fd_step: 1e-4 }
    }
}

/// Layout of the unconstrained parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    d: usize,
    tasks: usize,
    rank: usize,
    free_b: bool,
    free_tasks: bool,
}

impl Layout {
    fn of(family: KernelFamily, h: &Hyperparams) -> Self {
        Self {
            d: h.dim(),
            tasks: h.num_tasks(),
            rank: h.rank(),
            free_b: family == KernelFamily::DsiDigital && h.dsi_weights == DsiWeights::PerOrder,
            free_tasks: h.num_tasks() > 1,
        }
    }

    fn len(&self) -> usize {
        1 + self.d + if self.free_b { 4 } else { 0 } + if self.free_tasks { self.tasks * (self.rank + 1) } else { 0 }
    }

    fn pack(&self, family: KernelFamily, h: &Hyperparams) -> Vec<f64> {
        let mut v = vec![h.gamma.ln()];
        let w = if family == KernelFamily::SeDense { &h.lengthscales } else { &h.eta };
        v.extend(w.iter().map(|x| x.ln()));
        if self.free_b {
            v.extend(h.b.iter().map(|x| x.ln()));
        }
        if self.free_tasks {
            for row in &h.task_factor {
                v.extend_from_slice(row);
            }
            v.extend(h.t.iter().map(|x| x.ln()));
        }
        v
    }

    fn unpack(&self, family: KernelFamily, base: &Hyperparams, v: &[f64]) -> Hyperparams {
        let mut h = base.clone();
        let mut it = v.iter().copied();
        let mut next = || it.next().expect("parameter vector length");
        h.gamma = next().exp();
        let w: Vec<f64> = (0..self.d).map(|_| next().exp()).collect();
        if family == KernelFamily::SeDense {
            h.lengthscales = w;
        } else {
            h.eta = w;
        }
        if self.free_b {
            for b in h.b.iter_mut() {
                *b = next().exp();
            }
        }
        if self.free_tasks {
            for row in h.task_factor.iter_mut() {
                for x in row.iter_mut() {
                    *x = next();
                }
            }
            for t in h.t.iter_mut() {
                *t = next().exp();
            }
        }
        h
    }
}

/// Default starting point: `γ = var(y)`, `η = 1`, `b = 1`, rank-one task
/// factor with `N(0, 0.1²)` entries and `t = 0.1`. A single task uses `R = 1`.
pub fn initial_hyperparams(family: KernelFamily, d: usize, y: &[Vec<f64>], noise: f64, seed: u64) -> Hyperparams {
    let tasks = y.len();
    let mut h = Hyperparams::new(d, tasks, noise);
    let all: Vec<f64> = y.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / all.len().max(1) as f64;
    let var = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / all.len().max(1) as f64;
    h.gamma = if var > 0.0 && var.is_finite() { var } else { 1.0 };
    if family == KernelFamily::SeDense {
        h.lengthscales = vec![0.5; d];
    }
    if tasks > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        h.task_factor = (0..tasks).map(|_| vec![normal.sample(&mut rng)]).collect();
        h.t = vec![0.1; tasks];
    }
    h
}

/// Multitask GP over one design.
#[derive(Debug, Clone)]
pub struct GpModel {
    family: KernelFamily,
    path: PathKind,
    loss: LossKind,
    design: Option<LdDesign>,
    d: usize,
    /// `order[k]` is the caller index of internal task `k`.
    order: Vec<usize>,
    /// Row-major points per internal task.
    points: Vec<Arc<Vec<f64>>>,
    offsets: Vec<usize>,
    y: Vec<f64>,
    hyper: Hyperparams,
    dense_cap: usize,
    cache: OnceLock<std::result::Result<Arc<Solved>, Error>>,
}

impl GpModel {
    /// Model on a low-discrepancy design; `y` is given per caller task.
    /// Fast families use the fast path, SE uses the dense path.
    pub fn new(family: KernelFamily, design: LdDesign, y: Vec<Vec<f64>>, hyper: Hyperparams, loss: LossKind) -> Result<Self> {
        if let Some(kind) = family.sequence_kind() {
            if kind != design.kind() {
                return Err(Error::FamilyMismatch);
            }
        }
        let points = design.tasks().iter().map(|t| Arc::new(t.points.clone())).collect();
        let path = if family.is_fast() { PathKind::Fast } else { PathKind::Dense };
        let order = design.order().to_vec();
        let d = design.dim();
        Self::assemble(family, path, loss, Some(design), d, order, points, y, hyper)
    }

    /// Dense-path model on arbitrary points (`points[ℓ]` row-major, caller order).
    pub fn new_dense(
        family: KernelFamily,
        d: usize,
        points: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        hyper: Hyperparams,
        loss: LossKind,
    ) -> Result<Self> {
        if d == 0 || points.iter().any(|p| p.len() % d != 0) {
            return Err(Error::InvalidParameter("point arrays must be n × d".into()));
        }
        let sizes: Vec<usize> = points.iter().map(|p| p.len() / d).collect();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));
        let pts = order.iter().map(|&u| Arc::new(points[u].clone())).collect();
        Self::assemble(family, PathKind::Dense, loss, None, d, order, pts, y, hyper)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        family: KernelFamily,
        path: PathKind,
        loss: LossKind,
        design: Option<LdDesign>,
        d: usize,
        order: Vec<usize>,
        points: Vec<Arc<Vec<f64>>>,
        y: Vec<Vec<f64>>,
        hyper: Hyperparams,
    ) -> Result<Self> {
        let l = order.len();
        if y.len() != l {
            return Err(Error::LengthMismatch { expected: l, got: y.len() });
        }
        if hyper.num_tasks() != l || hyper.dim() != d {
            return Err(Error::InvalidParameter(format!(
                "hyperparameters sized for {} tasks in {} dims, model has {l} tasks in {d} dims",
                hyper.num_tasks(),
                hyper.dim()
            )));
        }
        hyper.validate()?;
        let mut offsets = vec![0];
        let mut flat = Vec::new();
        for (k, &u) in order.iter().enumerate() {
            let n = points[k].len() / d;
            if y[u].len() != n {
                return Err(Error::LengthMismatch { expected: n, got: y[u].len() });
            }
            if y[u].iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite observation in task {u}")));
            }
            flat.extend_from_slice(&y[u]);
            offsets.push(offsets[k] + n);
        }
        Ok(Self {
            family,
            path,
            loss,
            design,
            d,
            order,
            points,
            offsets,
            y: flat,
            hyper,
            dense_cap: dense::DEFAULT_CAP,
            cache: OnceLock::new(),
        })
    }

    /// Switches between fast and dense paths (fast requires an LD design and a fast family).
    pub fn with_path(mut self, path: PathKind) -> Result<Self> {
        if path == PathKind::Fast && (self.design.is_none() || !self.family.is_fast()) {
            return Err(Error::FamilyMismatch);
        }
        self.path = path;
        self.cache = OnceLock::new();
        Ok(self)
    }

    pub fn with_dense_cap(mut self, cap: usize) -> Self {
        self.dense_cap = cap;
        self.cache = OnceLock::new();
        self
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self.cache = OnceLock::new();
        self
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn path(&self) -> PathKind {
        self.path
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn design(&self) -> Option<&LdDesign> {
        self.design.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_tasks(&self) -> usize {
        self.order.len()
    }

    pub fn total(&self) -> usize {
        self.y.len()
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    /// Replaces the hyperparameters and drops every cached quantity.
    pub fn set_hyper(&mut self, hyper: Hyperparams) -> Result<()> {
        if hyper.num_tasks() != self.num_tasks() || hyper.dim() != self.d {
            return Err(Error::InvalidParameter("hyperparameter shape does not match the model".into()));
        }
        hyper.validate()?;
        self.hyper = hyper;
        self.cache = OnceLock::new();
        Ok(())
    }

    /// Internal position of caller task `user`.
    fn internal(&self, user: usize) -> Result<usize> {
        self.order
            .iter()
            .position(|&u| u == user)
            .ok_or(Error::TaskOutOfRange { task: user, tasks: self.num_tasks() })
    }

    /// Observations of caller task `user`.
    pub fn observations(&self, user: usize) -> Result<&[f64]> {
        let k = self.internal(user)?;
        Ok(&self.y[self.offsets[k]..self.offsets[k + 1]])
    }

    /// Points of caller task `user`, row-major.
    pub fn points(&self, user: usize) -> Result<&[f64]> {
        Ok(&self.points[self.internal(user)?])
    }

    /// All observations, caller task order.
    pub fn observations_by_task(&self) -> Vec<Vec<f64>> {
        (0..self.num_tasks()).map(|u| self.observations(u).expect("valid task").to_vec()).collect()
    }

    /// Observation vector in internal order (the order used by [`Solver`]).
    pub fn internal_observations(&self) -> &[f64] {
        &self.y
    }

    /// Caller index of each internal task.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    fn spatial(&self, hyper: &Hyperparams) -> Result<SpatialKernel> {
        SpatialKernel::new(self.family, hyper)
    }

    fn internal_gram(&self, hyper: &Hyperparams) -> Result<TaskGram> {
        Ok(hyper.task_gram()?.permuted(&self.order))
    }

    fn build_solver(&self, hyper: &Hyperparams) -> Result<(Solver, Vec<f64>, u32)> {
        match self.path {
            PathKind::Fast => {
                let design = self.design.as_ref().ok_or(Error::FamilyMismatch)?;
                jitter::with_escalation(&hyper.xi, |xi| {
                    let mut h = hyper.clone();
                    h.xi = xi.to_vec();
                    Ok(match design.kind() {
                        SequenceKind::Digital => {
                            let (s, i) = fast_solver::<f64>(design, &h, self.family)?;
                            Solver::Walsh(s, i)
                        }
                        SequenceKind::Lattice => {
                            let (s, i) = fast_solver::<Complex64>(design, &h, self.family)?;
                            Solver::Fourier(s, i)
                        }
                    })
                })
            }
            PathKind::Dense => {
                let q = self.spatial(hyper)?;
                let r = self.internal_gram(hyper)?;
                let xi_int: Vec<f64> = self.order.iter().map(|&u| hyper.xi[u]).collect();
                let pts: Vec<Vec<f64>> = self.points.iter().map(|p| p.as_ref().clone()).collect();
                let g = dense::dense_assemble(&pts, self.d, &q, &r, &xi_int, self.dense_cap)?;
                let xi = self.to_user(g.noise());
                let n = g.escalations();
                Ok((Solver::Dense(g), xi, n))
            }
        }
    }

    fn task_sums(&self, v: &[f64]) -> Vec<f64> {
        self.offsets.windows(2).map(|w| v[w[0]..w[1]].iter().sum()).collect()
    }

    /// Closed-form prior means (internal order) for a factorized Gram.
    fn tau_for(&self, solver: &Solver, kind: LossKind) -> Result<Vec<f64>> {
        let l = self.num_tasks();
        if l == 1 && self.path == PathKind::Fast {
            // Constant vector is the zeroth eigenvector: τ is the sample mean.
            return Ok(vec![self.y.iter().sum::<f64>() / self.y.len() as f64]);
        }
        let (p1, p2) = solver.projections()?;
        let c1 = solver.solve(&self.y)?;
        match kind {
            LossKind::Nmll => dense::solve_small(&p1, &self.task_sums(&c1)),
            LossKind::Gcv => {
                let c2 = solver.solve(&c1)?;
                dense::solve_small(&p2, &self.task_sums(&c2))
            }
        }
    }

    fn residual(&self, tau: &[f64]) -> Vec<f64> {
        let mut r = self.y.clone();
        for (k, w) in self.offsets.windows(2).enumerate() {
            r[w[0]..w[1]].iter_mut().for_each(|v| *v -= tau[k]);
        }
        r
    }

    fn loss_from(&self, solver: &Solver, coef: &[f64], resid: &[f64]) -> Result<f64> {
        Ok(match self.loss {
            LossKind::Nmll => resid.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>() + solver.logdet(),
            LossKind::Gcv => {
                let tr = solver.trace_inverse()?;
                coef.iter().map(|v| v * v).sum::<f64>() / (tr * tr)
            }
        })
    }

    /// Factorizes and evaluates the loss at `hyper` without touching the cache.
    pub fn evaluate(&self, hyper: &Hyperparams) -> Result<Solved> {
        hyper.validate()?;
        let (solver, xi, escalations) = self.build_solver(hyper)?;
        let tau = self.tau_for(&solver, self.loss)?;
        let resid = self.residual(&tau);
        let coef = solver.solve(&resid)?;
        let loss = self.loss_from(&solver, &coef, &resid)?;
        Ok(Solved { solver, xi, escalations, tau, coef, loss })
    }

    /// Cached factorization at the current hyperparameters.
    pub fn solved(&self) -> Result<Arc<Solved>> {
        self.cache.get_or_init(|| self.evaluate(&self.hyper).map(Arc::new)).clone()
    }

    pub fn loss(&self) -> Result<f64> {
        Ok(self.solved()?.loss)
    }

    /// `(y − Eτ)ᵀK̃⁻¹(y − Eτ) + log|K̃|` at `τ` chosen for the model's loss.
    pub fn nmll(&self) -> Result<f64> {
        let s = self.solved()?;
        let resid = self.residual(&s.tau);
        if self.loss == LossKind::Nmll {
            return Ok(s.loss);
        }
        let coef = s.solver.solve(&resid)?;
        Ok(resid.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + s.solver.logdet())
    }

    /// `‖K̃⁻¹(y − Eτ)‖² / trace(K̃⁻¹)²` at `τ` chosen for the model's loss.
    pub fn gcv(&self) -> Result<f64> {
        let s = self.solved()?;
        let coef = s.solver.solve(&self.residual(&s.tau))?;
        let tr = s.solver.trace_inverse()?;
        Ok(coef.iter().map(|v| v * v).sum::<f64>() / (tr * tr))
    }

    /// NMLL with explicitly supplied prior means (caller order).
    pub fn nmll_at(&self, tau: &[f64]) -> Result<f64> {
        let s = self.solved()?;
        let tau_int: Vec<f64> = self.order.iter().map(|&u| tau[u]).collect();
        let resid = self.residual(&tau_int);
        let coef = s.solver.solve(&resid)?;
        Ok(resid.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + s.solver.logdet())
    }

    /// Optimal constant prior means for `kind`, caller task order.
    pub fn optimal_tau(&self, kind: LossKind) -> Result<Vec<f64>> {
        let s = self.solved()?;
        let tau = if kind == self.loss { s.tau.clone() } else { self.tau_for(&s.solver, kind)? };
        Ok(self.to_user(&tau))
    }

    /// Prior means in use, caller order.
    pub fn tau(&self) -> Result<Vec<f64>> {
        Ok(self.to_user(&self.solved()?.tau))
    }

    pub fn to_user(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (k, &u) in self.order.iter().enumerate() {
            out[u] = v[k];
        }
        out
    }

    /// `K((ℓ, x), ·)` against every training point, internal order.
    fn cross_kernel(&self, q: &SpatialKernel, r: &TaskGram, k: usize, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total());
        for (t, pts) in self.points.iter().enumerate() {
            let rt = r.get(k, t);
            out.extend(pts.chunks_exact(self.d).map(|p| rt * q.eval(x, p)));
        }
        out
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::LengthMismatch { expected: self.d, got: x.len() });
        }
        Ok(())
    }

    /// `τ_ℓ + K((ℓ, x), ·)ᵀ K̃⁻¹(y − Eτ)` for caller task `task`.
    pub fn posterior_mean(&self, task: usize, x: &[f64]) -> Result<f64> {
        self.check_query(x)?;
        let k = self.internal(task)?;
        let s = self.solved()?;
        let q = self.spatial(&self.hyper)?;
        let r = self.internal_gram(&self.hyper)?;
        let kx = self.cross_kernel(&q, &r, k, x);
        Ok(s.tau[k] + kx.iter().zip(&s.coef).map(|(a, b)| a * b).sum::<f64>())
    }

    /// Posterior means at many points (row-major) of one task, in parallel.
    pub fn posterior_mean_batch(&self, task: usize, xs: &[f64]) -> Result<Vec<f64>> {
        let k = self.internal(task)?;
        let s = self.solved()?;
        let q = self.spatial(&self.hyper)?;
        let r = self.internal_gram(&self.hyper)?;
        if xs.len() % self.d != 0 {
            return Err(Error::LengthMismatch { expected: self.d, got: xs.len() % self.d });
        }
        Ok(xs
            .par_chunks(self.d)
            .map(|x| {
                let kx = self.cross_kernel(&q, &r, k, x);
                s.tau[k] + kx.iter().zip(&s.coef).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }

    /// Prior covariance `R_{ℓℓ'} Q(x, x')` for caller tasks.
    pub fn prior_cov(&self, task: usize, x: &[f64], task2: usize, x2: &[f64]) -> Result<f64> {
        let r = self.hyper.task_gram()?;
        let q = self.spatial(&self.hyper)?;
        crate::kernels::mt_kernel(task, x, task2, x2, &r, &q)
    }

    /// `K((ℓ,x),(ℓ',x')) − K((ℓ,x),·)ᵀ K̃⁻¹ K(·,(ℓ',x'))`.
    pub fn posterior_cov(&self, task: usize, x: &[f64], task2: usize, x2: &[f64]) -> Result<f64> {
        self.check_query(x)?;
        self.check_query(x2)?;
        let (k1, k2) = (self.internal(task)?, self.internal(task2)?);
        let s = self.solved()?;
        let q = self.spatial(&self.hyper)?;
        let r = self.internal_gram(&self.hyper)?;
        let a = self.cross_kernel(&q, &r, k1, x);
        let b = self.cross_kernel(&q, &r, k2, x2);
        let sb = s.solver.solve(&b)?;
        let prior = r.get(k1, k2) * q.eval(x, x2);
        Ok(prior - a.iter().zip(&sb).map(|(u, v)| u * v).sum::<f64>())
    }

    /// Rprop on the log-parameters with central finite-difference gradients.
    /// Prior means are set in closed form at every evaluation; the noise is
    /// held fixed apart from jitter escalation, which persists.
    pub fn fit(&mut self, steps: usize, config: &RpropConfig) -> Result<FitReport> {
        let layout = Layout::of(self.family, &self.hyper);
        let mut theta = layout.pack(self.family, &self.hyper);
        let p = layout.len();
        let mut step = vec![config.step_init; p];
        let mut prev = vec![0.0; p];
        let mut best = (f64::INFINITY, theta.clone());
        let mut report = FitReport {
            losses: Vec::with_capacity(steps),
            best_losses: Vec::with_capacity(steps),
            step_seconds: Vec::with_capacity(steps),
            steps,
            final_loss: f64::NAN,
            hyper: self.hyper.clone(),
            tau: Vec::new(),
            noise: self.hyper.xi.clone(),
            escalations: 0,
        };
        let mut base = self.hyper.clone();

        for it in 0..steps {
            let t0 = Instant::now();
            let h = layout.unpack(self.family, &base, &theta);
            let solved = self
                .evaluate(&h)
                .map_err(|e| Error::NonFiniteLoss { step: it, detail: e.to_string() })?;
            if !solved.loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: it, detail: format!("loss = {}", solved.loss) });
            }
            if solved.escalations > 0 {
                report.escalations += solved.escalations;
                base.xi = solved.xi.clone();
                log::info!("noise escalated to {:?} at step {it}", base.xi);
            }
            let loss = solved.loss;
            let grad = self.fd_gradient(&layout, &base, &theta, config.fd_step);
            report.step_seconds.push(t0.elapsed().as_secs_f64());
            report.losses.push(loss);
            if loss < best.0 {
                best = (loss, theta.clone());
            }
            report.best_losses.push(best.0);

            for i in 0..p {
                let mut g = grad[i];
                let sign = g * prev[i];
                if sign > 0.0 {
                    step[i] = (step[i] * config.increase).min(config.step_max);
                } else if sign < 0.0 {
                    step[i] = (step[i] * config.decrease).max(config.step_min);
                    g = 0.0;
                }
                theta[i] -= g.signum() * if g == 0.0 { 0.0 } else { step[i] };
                prev[i] = g;
            }
        }

        if steps > 0 {
            let mut h = layout.unpack(self.family, &base, &best.1);
            h.xi = base.xi.clone();
            self.set_hyper(h)?;
            let s = self.solved()?;
            let mut h = self.hyper.clone();
            h.tau = self.to_user(&s.tau);
            h.xi = s.xi.clone();
            self.hyper = h;
            report.final_loss = s.loss;
        } else {
            report.final_loss = self.loss()?;
        }
        report.hyper = self.hyper.clone();
        report.tau = self.tau()?;
        report.noise = self.solved()?.xi.clone();
        Ok(report)
    }

    /// Central-difference gradient of the loss in the unconstrained
    /// parameters. Coordinates whose probes fail get a zero slope.
    fn fd_gradient(&self, layout: &Layout, base: &Hyperparams, theta: &[f64], fd_step: f64) -> Vec<f64> {
        (0..theta.len())
            .into_par_iter()
            .map(|i| {
                let hstep = fd_step * theta[i].abs().max(1.0);
                let at = |delta: f64| -> Option<f64> {
                    let mut th = theta.to_vec();
                    th[i] += delta;
                    let mut hh = layout.unpack(self.family, base, &th);
                    hh.xi = base.xi.clone();
                    self.evaluate(&hh).ok().map(|s| s.loss).filter(|v| v.is_finite())
                };
                match (at(hstep), at(-hstep)) {
                    (Some(a), Some(b)) => (a - b) / (2.0 * hstep),
                    _ => 0.0,
                }
            })
            .collect()
    }

    /// Unconstrained parameter vector seen by the optimizer: log scales,
    /// log kernel weights, log order weights (DSI), then the task factor
    /// and log task diagonal when there are several tasks.
    pub fn parameters(&self) -> Vec<f64> {
        Layout::of(self.family, &self.hyper).pack(self.family, &self.hyper)
    }

    /// Loss at an unconstrained parameter vector, noise held at its current value.
    pub fn loss_at_parameters(&self, theta: &[f64]) -> Result<f64> {
        let layout = Layout::of(self.family, &self.hyper);
        if theta.len() != layout.len() {
            return Err(Error::LengthMismatch { expected: layout.len(), got: theta.len() });
        }
        Ok(self.evaluate(&layout.unpack(self.family, &self.hyper, theta))?.loss)
    }

    /// The gradient the optimizer uses at `theta`.
    pub fn gradient(&self, theta: &[f64], fd_step: f64) -> Result<Vec<f64>> {
        let layout = Layout::of(self.family, &self.hyper);
        if theta.len() != layout.len() {
            return Err(Error::LengthMismatch { expected: layout.len(), got: theta.len() });
        }
        Ok(self.fd_gradient(&layout, &self.hyper, theta, fd_step))
    }

    /// Serializable snapshot sufficient to rebuild the model.
    pub fn export(&self, seed: Option<u64>, problem: Option<String>) -> ModelDocument {
        let (design, points) = match &self.design {
            Some(ld) => {
                let mut sizes = vec![0; self.num_tasks()];
                let mut shifts = vec![Vec::new(); self.num_tasks()];
                for (k, t) in ld.tasks().iter().enumerate() {
                    sizes[self.order[k]] = t.n();
                    shifts[self.order[k]] = t.shift.clone();
                }
                (Some(DesignDescriptor { kind: ld.kind(), d: self.d, sizes, shifts }), None)
            }
            None => {
                let mut pts = vec![Vec::new(); self.num_tasks()];
                for (k, &u) in self.order.iter().enumerate() {
                    pts[u] = self.points[k].as_ref().clone();
                }
                (None, Some(pts))
            }
        };
        ModelDocument {
            family: self.family,
            path: self.path,
            loss: self.loss,
            d: self.d,
            design,
            points,
            hyper: self.hyper.clone(),
            observations: self.observations_by_task(),
            seed,
            problem,
        }
    }

    pub fn import(doc: &ModelDocument) -> Result<Self> {
        let model = match (&doc.design, &doc.points) {
            (Some(desc), _) => {
                let gen = Arc::new(default_generator(desc.kind, desc.d)?);
                let design = LdDesign::new(gen, &desc.sizes, desc.shifts.clone())?;
                GpModel::new(doc.family, design, doc.observations.clone(), doc.hyper.clone(), doc.loss)?.with_path(doc.path)?
            }
            (None, Some(pts)) => {
                GpModel::new_dense(doc.family, doc.d, pts.clone(), doc.observations.clone(), doc.hyper.clone(), doc.loss)?
            }
            (None, None) => return Err(Error::Parse("model document has neither design nor points".into())),
        };
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignDescriptor {
    pub kind: SequenceKind,
    pub d: usize,
    /// Caller task order.
    pub sizes: Vec<usize>,
    pub shifts: Vec<Vec<f64>>,
}

/// JSON export format of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub family: KernelFamily,
    pub path: PathKind,
    pub loss: LossKind,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    pub hyper: Hyperparams,
    pub observations: Vec<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub problem: Option<String>,
}

impl ModelDocument {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
