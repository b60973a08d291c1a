#![allow(dead_code)]

use std::sync::Arc;

use fastmtgp::fast_gram::{BlockInverse, BlockSpectrum};
use fastmtgp::gp::{GpModel, LossKind, PathKind, Solver};
use fastmtgp::ld::SequenceKind;
use fastmtgp::scalar::Scalar;
use fastmtgp::transforms::Spectral;
use nalgebra::DMatrix;
use num_complex::Complex64;
use fastmtgp::kernels::{Hyperparams, KernelFamily};
use fastmtgp::ld::{default_generator, LdDesign};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FAMILIES: [KernelFamily; 2] = [KernelFamily::DsiDigital, KernelFamily::SiLattice];
pub const SIZE_SETS: [&[usize]; 4] = [&[8], &[8, 4], &[8, 4, 2], &[4, 4, 4]];

/// Random hyperparameters with moderate noise so both paths are well conditioned.
pub fn random_hyper(rng: &mut ChaCha8Rng, d: usize, tasks: usize) -> Hyperparams {
    let mut h = Hyperparams::new(d, tasks, 0.0);
    h.gamma = rng.random_range(0.5..2.0);
    h.eta = (0..d).map(|_| rng.random_range(0.1..1.5)).collect();
    h.si_alpha = if rng.random_bool(0.5) { 1 } else { 2 };
    h.b = [0; 4].map(|_| rng.random_range(0.05..1.0));
    h.task_factor = (0..tasks).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    h.t = (0..tasks).map(|_| rng.random_range(0.1..1.0)).collect();
    h.xi = (0..tasks).map(|_| 10f64.powf(rng.random_range(-4.0..-1.0))).collect();
    h
}

pub fn smooth(task: usize, x: &[f64]) -> f64 {
    let s: f64 = x.iter().enumerate().map(|(j, v)| ((j + 1) as f64 * v).sin()).sum();
    s * (1.0 + 0.1 * task as f64) + task as f64
}

/// A fast model and its dense twin on the same random design.
pub fn instance(family: KernelFamily, sizes: &[usize], d: usize, seed: u64) -> (GpModel, GpModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = family.sequence_kind().unwrap();
    let gen = Arc::new(default_generator(kind, d).unwrap());
    let design = LdDesign::random(gen, sizes, seed).unwrap();
    let y: Vec<Vec<f64>> = (0..sizes.len())
        .map(|u| {
            let k = design.internal_index(u).unwrap();
            design.tasks()[k].points.chunks(d).map(|p| smooth(u, p) + rng.random_range(-0.1..0.1)).collect()
        })
        .collect();
    let h = random_hyper(&mut rng, d, sizes.len());
    let fast = GpModel::new(family, design, y, h, LossKind::Nmll).unwrap();
    let dense = fast.clone().with_path(PathKind::Dense).unwrap();
    (fast, dense)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest discrepancy per compared quantity between the fast and dense paths.
#[derive(Debug, Default, Clone, Copy)]
pub struct PathErrors {
    pub gram: f64,
    pub solve: f64,
    pub logdet: f64,
    pub tau: f64,
    pub posterior: f64,
    pub pi: f64,
    pub hh: f64,
}

impl PathErrors {
    pub fn max_with(&mut self, o: &PathErrors) {
        self.gram = self.gram.max(o.gram);
        self.solve = self.solve.max(o.solve);
        self.logdet = self.logdet.max(o.logdet);
        self.tau = self.tau.max(o.tau);
        self.posterior = self.posterior.max(o.posterior);
        self.pi = self.pi.max(o.pi);
        self.hh = self.hh.max(o.hh);
    }
}

pub fn compare_paths(fast: &GpModel, dense: &GpModel, seed: u64) -> PathErrors {
    let fs = fast.solved().unwrap();
    let ds = dense.solved().unwrap();
    let n = fast.total();
    let mut e = PathErrors::default();

    // Gram reconstruction column by column.
    let mut fk = Vec::with_capacity(n * n);
    let mut dk = Vec::with_capacity(n * n);
    for j in 0..n {
        let mut ej = vec![0.0; n];
        ej[j] = 1.0;
        fk.extend(fs.solver.matvec(&ej).unwrap());
        dk.extend(ds.solver.matvec(&ej).unwrap());
    }
    e.gram = rel_err(&fk, &dk);

    let y = fast.internal_observations();
    e.solve = rel_err(&fs.solver.solve(y).unwrap(), &ds.solver.solve(y).unwrap());
    e.logdet = (fs.solver.logdet() - ds.solver.logdet()).abs();
    for kind in [LossKind::Nmll, LossKind::Gcv] {
        e.tau = e.tau.max(max_abs_diff(&fast.optimal_tau(kind).unwrap(), &dense.optimal_tau(kind).unwrap()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = fast.dim();
    let l = fast.num_tasks();
    for _ in 0..16 {
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let x2: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let (t1, t2) = (rng.random_range(0..l), rng.random_range(0..l));
        let m = (fast.posterior_mean(t1, &x).unwrap() - dense.posterior_mean(t1, &x).unwrap()).abs();
        let c = (fast.posterior_cov(t1, &x, t2, &x2).unwrap() - dense.posterior_cov(t1, &x, t2, &x2).unwrap()).abs();
        e.posterior = e.posterior.max(m).max(c);
    }

    let (fp, fh) = fs.solver.projections().unwrap();
    let (dp, dh) = ds.solver.projections().unwrap();
    let scale = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    e.pi = max_abs_diff(&fp, &dp) / scale(&dp);
    e.hh = max_abs_diff(&fh, &dh) / scale(&dh);
    e
}

fn to_c<S: Scalar>(v: S) -> Complex64 {
    Complex64::new(v.re(), v.im())
}

/// Algorithm-1 internal consistency against dense linear algebra on `Λ̃`.
#[derive(Debug, Default, Clone, Copy)]
pub struct StageErrors {
    /// Off-diagonal over diagonal Frobenius mass of each dense Schur complement.
    pub offdiag_ratio: f64,
    /// Relative gap between stored and dense Schur diagonals.
    pub schur_diag: f64,
    /// `max |Λ̃ Λ̃⁻¹ − I|`.
    pub identity: f64,
    /// `max |Λ̃⁻¹_{ij} − conj(Λ̃⁻¹_{ji})|` over the block grid.
    pub hermitian: f64,
}

impl StageErrors {
    pub fn max_with(&mut self, o: &StageErrors) {
        self.offdiag_ratio = self.offdiag_ratio.max(o.offdiag_ratio);
        self.schur_diag = self.schur_diag.max(o.schur_diag);
        self.identity = self.identity.max(o.identity);
        self.hermitian = self.hermitian.max(o.hermitian);
    }
}

/// Applies the per-task forward transform to a complex vector.
fn forward_complex<S: Spectral>(v: &mut [Complex64]) {
    if S::SEQUENCE == SequenceKind::Digital {
        let mut re: Vec<f64> = v.iter().map(|c| c.re).collect();
        let mut im: Vec<f64> = v.iter().map(|c| c.im).collect();
        f64::forward(&mut re).unwrap();
        f64::forward(&mut im).unwrap();
        for (c, (r, i)) in v.iter_mut().zip(re.into_iter().zip(im)) {
            *c = Complex64::new(r, i);
        }
    } else {
        Complex64::forward(v).unwrap();
    }
}

/// `W M` with `W` the block-diagonal forward transform, column by column.
fn forward_rows<S: Spectral>(m: &DMatrix<Complex64>, sizes: &[usize]) -> DMatrix<Complex64> {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        let mut col: Vec<Complex64> = m.column(j).iter().copied().collect();
        let mut off = 0;
        for &n in sizes {
            forward_complex::<S>(&mut col[off..off + n]);
            off += n;
        }
        out.set_column(j, &nalgebra::DVector::from_vec(col));
    }
    out
}

/// `Λ̃ = V̄ K̃ V` computed densely from the dense Gram matrix.
pub fn transformed_gram<S: Spectral>(k: &DMatrix<f64>, sizes: &[usize]) -> DMatrix<Complex64> {
    let kc = k.map(|v| Complex64::new(v, 0.0));
    let wk = forward_rows::<S>(&kc, sizes);
    forward_rows::<S>(&wk.adjoint(), sizes).adjoint()
}

pub fn stage_errors<S: Spectral>(spec: &BlockSpectrum<S>, inv: &BlockInverse<S>, lam: &DMatrix<Complex64>) -> StageErrors {
    let n = spec.total();
    let mut e = StageErrors::default();

    let sizes = spec.sizes();
    let mut off = 0;
    for (k, &nk) in sizes.iter().enumerate() {
        let d = lam.view((off, off), (nk, nk)).into_owned();
        let s = if off == 0 {
            d
        } else {
            let a = lam.view((0, 0), (off, off)).into_owned();
            let b = lam.view((0, off), (off, nk)).into_owned();
            let ainv_b = a.lu().solve(&b).expect("leading block invertible");
            d - b.adjoint() * ainv_b
        };
        let mut diag_mass = 0.0;
        let mut off_mass = 0.0;
        for i in 0..nk {
            for j in 0..nk {
                if i == j {
                    diag_mass += s[(i, j)].norm_sqr();
                } else {
                    off_mass += s[(i, j)].norm_sqr();
                }
            }
        }
        e.offdiag_ratio = e.offdiag_ratio.max((off_mass / diag_mass).sqrt());
        let stored = &inv.schur_complements()[k];
        for i in 0..nk {
            let gap = (to_c(stored[i]) - s[(i, i)]).norm() / s[(i, i)].norm();
            e.schur_diag = e.schur_diag.max(gap);
        }
        off += nk;
    }

    let linv = DMatrix::from_fn(n, n, |i, j| to_c(inv.entry(i, j)));
    let prod = lam * &linv;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            e.identity = e.identity.max((prod[(i, j)] - target).norm());
            e.hermitian = e.hermitian.max((linv[(i, j)] - linv[(j, i)].conj()).norm());
        }
    }
    e
}

/// Stage errors of a fast-path model.
pub fn model_stage_errors(model: &GpModel) -> StageErrors {
    let dense = model.clone().with_path(PathKind::Dense).unwrap();
    let k = match &dense.solved().unwrap().solver {
        Solver::Dense(g) => g.matrix(),
        _ => unreachable!(),
    };
    match &model.solved().unwrap().solver {
        Solver::Walsh(s, i) => stage_errors(s, i, &transformed_gram::<f64>(&k, s.sizes())),
        Solver::Fourier(s, i) => stage_errors(s, i, &transformed_gram::<Complex64>(&k, s.sizes())),
        Solver::Dense(_) => panic!("dense model has no block inverse"),
    }
}
