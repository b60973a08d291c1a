//! Benchmark harness shared by the command-line front end and the test suites.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cubature::multitask_cubature;
use crate::error::{Error, Result};
use crate::fast_gram::{build_spectrum, invert_and_logdet};
use crate::gp::{initial_hyperparams, median, FitReport, GpModel, LossKind, RpropConfig};
use crate::kernels::{Hyperparams, KernelFamily};
use crate::ld::{default_generator, random_shift, Generator, LdDesign, SequenceKind};
use crate::problems::{evaluate_batch, problem_by_name, EllipticPde, Problem};
use crate::transforms::Spectral;

/// Substream of the run seed used for the held-out test shift.
pub const TEST_STREAM: usize = 1 << 41;
pub const TEST_POINTS: usize = 2048;
pub const MAX_TASKS: usize = 8;
/// Dense SE runs are skipped above this many total samples.
pub const DENSE_BENCH_CAP: usize = 2048;

/// Settings for one CLI invocation. Every field has a default so a config
/// file may list any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    pub kernel: KernelFamily,
    /// Extra kernels compared by `bench`; the primary kernel is always run.
    pub methods: Vec<KernelFamily>,
    pub loss: LossKind,
    /// Samples per task, caller order (task 0 is the lowest fidelity).
    pub n: Vec<usize>,
    /// Further sample-size vectors swept by `bench` and `scaling`.
    pub sweep: Vec<Vec<usize>>,
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    pub noise: f64,
    pub out: Option<PathBuf>,
    pub dim: Option<usize>,
    /// Extra mesh halvings for the elliptic PDE.
    pub refine: u32,
    pub dense_cap: usize,
    pub test_points: usize,
    pub reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: "rosenbrock".into(),
            kernel: KernelFamily::DsiDigital,
            methods: Vec::new(),
            loss: LossKind::Nmll,
            n: Vec::new(),
            sweep: Vec::new(),
            steps: 100,
            trials: 5,
            seed: 7,
            noise: 1e-8,
            out: None,
            dim: None,
            refine: 0,
            dense_cap: DENSE_BENCH_CAP,
            test_points: TEST_POINTS,
            reps: 5,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn problem(&self) -> Result<Box<dyn Problem>> {
        match (self.problem.as_str(), self.dim) {
            ("ackley", Some(d)) => Ok(Box::new(crate::problems::Ackley { d })),
            ("elliptic-pde" | "pde", _) => Ok(Box::new(EllipticPde { refine: self.refine })),
            (name, _) => problem_by_name(name),
        }
    }

    /// Sample sizes, falling back to the problem defaults.
    pub fn sizes(&self, p: &dyn Problem) -> Vec<usize> {
        if self.n.is_empty() {
            p.default_sizes()
        } else {
            self.n.clone()
        }
    }

    pub fn validate_sizes(&self, family: KernelFamily, sizes: &[usize]) -> Result<()> {
        if sizes.is_empty() || sizes.len() > MAX_TASKS {
            return Err(Error::InvalidParameter(format!("between 1 and {MAX_TASKS} tasks required, got {}", sizes.len())));
        }
        if family.is_fast() {
            if let Some(&n) = sizes.iter().find(|n| !n.is_power_of_two()) {
                return Err(Error::NotPowerOfTwo(n));
            }
        } else if sizes.contains(&0) {
            return Err(Error::InvalidParameter("empty task".into()));
        }
        Ok(())
    }
}

fn kind_for(family: KernelFamily) -> SequenceKind {
    family.sequence_kind().unwrap_or(SequenceKind::Digital)
}

/// Per-task designs and observations of `problem` with shifts from `seed`.
/// Task `ℓ` of the problem is sampled at `sizes[ℓ]` points.
pub fn training_model(
    problem: &dyn Problem,
    family: KernelFamily,
    sizes: &[usize],
    seed: u64,
    noise: f64,
    loss: LossKind,
) -> Result<GpModel> {
    if sizes.len() > problem.num_tasks() {
        return Err(Error::InvalidParameter(format!(
            "{} has {} tasks, {} sizes given",
            problem.name(),
            problem.num_tasks(),
            sizes.len()
        )));
    }
    // With fewer sizes than tasks the top fidelities are used.
    let first = problem.num_tasks() - sizes.len();
    let d = problem.dim();
    let gen = Arc::new(default_generator(kind_for(family), d)?);
    let design = LdDesign::random(gen, sizes, seed)?;
    let mut points = Vec::with_capacity(sizes.len());
    let mut y = Vec::with_capacity(sizes.len());
    for u in 0..sizes.len() {
        let k = design.internal_index(u).expect("task in range");
        let pts = design.tasks()[k].points.clone();
        y.push(evaluate_batch(problem, first + u, &pts));
        points.push(pts);
    }
    let hyper = initial_hyperparams(family, d, &y, noise, seed);
    if family.is_fast() {
        GpModel::new(family, design, y, hyper, loss)
    } else {
        Ok(GpModel::new_dense(family, d, points, y, hyper, loss)?.with_dense_cap(usize::MAX))
    }
}

/// Held-out points (row-major) and highest-fidelity values.
pub fn test_set(problem: &dyn Problem, seed: u64, count: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = problem.dim();
    let gen = default_generator(SequenceKind::Digital, d)?;
    let shift = random_shift(SequenceKind::Digital, d, seed, TEST_STREAM);
    let x = gen.points(&shift, 0, count)?;
    let f = evaluate_batch(problem, problem.num_tasks() - 1, &x);
    Ok((x, f))
}

/// `‖m − f‖₂ / ‖f‖₂` of the top-task posterior mean on the test set.
pub fn l2_relative_error(model: &GpModel, x: &[f64], f: &[f64]) -> Result<f64> {
    let m = model.posterior_mean_batch(model.num_tasks() - 1, x)?;
    let num: f64 = m.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = f.iter().map(|b| b * b).sum();
    Ok((num / den).sqrt())
}

/// One benchmark trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub problem: String,
    pub method: KernelFamily,
    /// Sample sizes joined by `x`, e.g. `1024x512`.
    pub n: String,
    pub trial: usize,
    pub fit_seconds_per_step: f64,
    pub l2_relative_error: f64,
    pub cubature_abs_error: f64,
    pub final_loss: f64,
}

pub fn format_sizes(sizes: &[usize]) -> String {
    sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join("x")
}

pub fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(['x', ',', ' '])
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad sample size `{t}`"))))
        .collect()
}

/// Fits one model and scores it. Trial `t` draws its design shifts from
/// `seed + t`.
pub fn run_trial(
    cfg: &RunConfig,
    family: KernelFamily,
    sizes: &[usize],
    trial: usize,
    test: &(Vec<f64>, Vec<f64>),
) -> Result<(BenchRecord, FitReport)> {
    let problem = cfg.problem()?;
    cfg.validate_sizes(family, sizes)?;
    let seed = cfg.seed.wrapping_add(trial as u64);
    let mut model = training_model(problem.as_ref(), family, sizes, seed, cfg.noise, cfg.loss)?;
    let report = model.fit(cfg.steps, &RpropConfig::default())?;
    let l2 = l2_relative_error(&model, &test.0, &test.1)?;
    let cub = match multitask_cubature(&model, None) {
        Ok(c) => {
            let top = *c.mu_hat.last().expect("at least one task");
            (top - problem.reference_integral()).abs()
        }
        Err(Error::NotIntegralNormalized) => f64::NAN,
        Err(e) => return Err(e),
    };
    let step = if report.step_seconds.is_empty() { f64::NAN } else { report.median_step_seconds() };
    let rec = BenchRecord {
        problem: problem.name().to_string(),
        method: family,
        n: format_sizes(sizes),
        trial,
        fit_seconds_per_step: step,
        l2_relative_error: l2,
        cubature_abs_error: cub,
        final_loss: report.final_loss,
    };
    Ok((rec, report))
}

/// Median over the trials of one (method, n) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub problem: String,
    pub method: KernelFamily,
    pub n: String,
    pub trials: usize,
    pub median_fit_seconds_per_step: f64,
    pub median_l2_relative_error: f64,
    pub median_cubature_abs_error: f64,
    pub median_final_loss: f64,
}

#[derive(Debug, Default)]
pub struct BenchOutcome {
    pub records: Vec<BenchRecord>,
    pub summaries: Vec<BenchSummary>,
    /// Skipped or failed cells, human readable.
    pub failures: Vec<String>,
    pub skipped: Vec<String>,
}

/// Sweeps sizes × methods × trials. Dense runs above the cap are skipped;
/// failing trials are collected rather than aborting the sweep.
pub fn bench(cfg: &RunConfig) -> Result<BenchOutcome> {
    let problem = cfg.problem()?;
    let test = test_set(problem.as_ref(), cfg.seed, cfg.test_points)?;
    let mut grid = vec![cfg.sizes(problem.as_ref())];
    grid.extend(cfg.sweep.iter().cloned());
    let mut methods = vec![cfg.kernel];
    methods.extend(cfg.methods.iter().copied().filter(|m| *m != cfg.kernel));

    let mut out = BenchOutcome::default();
    let mut jobs = Vec::new();
    for sizes in &grid {
        for &m in &methods {
            let total: usize = sizes.iter().sum();
            if !m.is_fast() && total > cfg.dense_cap {
                out.skipped.push(format!("{m} n={} (N={total} above dense cap {})", format_sizes(sizes), cfg.dense_cap));
                continue;
            }
            for t in 0..cfg.trials {
                jobs.push((m, sizes.clone(), t));
            }
        }
    }
    let results: Vec<_> = jobs
        .par_iter()
        .map(|(m, sizes, t)| (m, sizes, t, run_trial(cfg, *m, sizes, *t, &test)))
        .collect();
    for (m, sizes, t, r) in results {
        match r {
            Ok((rec, _)) => out.records.push(rec),
            Err(e) => out.failures.push(format!("{m} n={} trial {t}: {e}", format_sizes(sizes))),
        }
    }
    for sizes in &grid {
        for &m in &methods {
            let key = format_sizes(sizes);
            let cell: Vec<&BenchRecord> = out.records.iter().filter(|r| r.method == m && r.n == key).collect();
            if cell.is_empty() {
                continue;
            }
            let med = |f: fn(&BenchRecord) -> f64| median(&cell.iter().map(|r| f(r)).collect::<Vec<_>>());
            out.summaries.push(BenchSummary {
                problem: problem.name().to_string(),
                method: m,
                n: key,
                trials: cell.len(),
                median_fit_seconds_per_step: med(|r| r.fit_seconds_per_step),
                median_l2_relative_error: med(|r| r.l2_relative_error),
                median_cubature_abs_error: med(|r| r.cubature_abs_error),
                median_final_loss: med(|r| r.final_loss),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub n: String,
    pub total: usize,
    pub median_seconds: f64,
}

fn time_build_invert<S: Spectral>(design: &LdDesign, hyper: &Hyperparams, family: KernelFamily, reps: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        let spec = build_spectrum::<S>(design, hyper, family)?;
        let inv = invert_and_logdet(&spec)?;
        std::hint::black_box(inv.logdet());
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(&times))
}

/// Median wall time of spectrum construction plus block inversion.
pub fn time_fast_gram(generator: &Arc<Generator>, family: KernelFamily, sizes: &[usize], seed: u64, reps: usize) -> Result<f64> {
    if !family.is_fast() {
        return Err(Error::FamilyMismatch);
    }
    let design = LdDesign::random(generator.clone(), sizes, seed)?;
    let mut hyper = Hyperparams::new(generator.dim(), sizes.len(), 1e-6);
    if sizes.len() > 1 {
        hyper.task_factor = (0..sizes.len()).map(|k| vec![1.0, 0.3 * k as f64]).collect();
        hyper.t = vec![0.1; sizes.len()];
    }
    match family {
        KernelFamily::DsiDigital => time_build_invert::<f64>(&design, &hyper, family, reps),
        _ => time_build_invert::<Complex64>(&design, &hyper, family, reps),
    }
}

/// Times every sample-size vector of the config on the fast path.
pub fn scaling(cfg: &RunConfig) -> Result<Vec<ScalingRecord>> {
    let d = match cfg.dim {
        Some(d) => d,
        None => cfg.problem()?.dim(),
    };
    let gen = Arc::new(default_generator(kind_for(cfg.kernel), d)?);
    let mut grid = Vec::new();
    if !cfg.n.is_empty() {
        grid.push(cfg.n.clone());
    }
    grid.extend(cfg.sweep.iter().cloned());
    if grid.is_empty() {
        return Err(Error::InvalidParameter("no sample sizes to time".into()));
    }
    grid.iter()
        .map(|sizes| {
            cfg.validate_sizes(cfg.kernel, sizes)?;
            Ok(ScalingRecord {
                n: format_sizes(sizes),
                total: sizes.iter().sum(),
                median_seconds: time_fast_gram(&gen, cfg.kernel, sizes, cfg.seed, cfg.reps)?,
            })
        })
        .collect()
}

/// Points of every task as CSV rows `task,index,x1..xd`.
pub fn write_points<W: std::io::Write>(cfg: &RunConfig, w: W) -> Result<()> {
    let d = match cfg.dim {
        Some(d) => d,
        None => cfg.problem()?.dim(),
    };
    if cfg.n.is_empty() {
        return Err(Error::InvalidParameter("--n is required".into()));
    }
    cfg.validate_sizes(cfg.kernel, &cfg.n)?;
    let gen = Arc::new(default_generator(kind_for(cfg.kernel), d)?);
    let design = LdDesign::random(gen, &cfg.n, cfg.seed)?;
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["task".to_string(), "index".to_string()];
    header.extend((1..=d).map(|j| format!("x{j}")));
    wtr.write_record(&header)?;
    for u in 0..cfg.n.len() {
        let t = &design.tasks()[design.internal_index(u).expect("task in range")];
        for i in 0..t.n() {
            let mut row = vec![u.to_string(), i.to_string()];
            row.extend(t.point(i, d).iter().map(|v| format!("{v:?}")));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Least-squares slope of `log₂ y` against `log₂ x`.
pub fn log2_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.log2()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.log2()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
