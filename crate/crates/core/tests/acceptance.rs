//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each and exits nonzero if any fails.
//!
//! `FASTMTGP_ACCEPTANCE_FULL=1` adds the full-scale Rosenbrock run
//! (n = 2^15, 2^14, 2^13 with 200 steps), which takes tens of minutes.

mod common;

use std::collections::HashSet;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use common::*;
use fastmtgp::bench::{self, log2_slope, time_fast_gram, RunConfig};
use fastmtgp::cubature::{multitask_cubature, optimal_weights, single_task_cubature, weights_mse};
use fastmtgp::kernels::{dsi_walsh_1d, si_bernoulli_1d, Hyperparams, KernelFamily, SpatialKernel};
use fastmtgp::ld::{default_generator, digital_shift, random_shift, to_bits, SequenceKind};
use fastmtgp::problems::elliptic_pde;
use fastmtgp::transforms::{fft_bitrev, fft_bitrev_inv, fwht};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DRAWS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn oracle_equivalence() -> Outcome {
    let mut worst = PathErrors::default();
    for family in FAMILIES {
        for sizes in SIZE_SETS {
            for draw in 0..DRAWS {
                let (fast, dense) = instance(family, sizes, 2, 10_000 + draw);
                worst.max_with(&compare_paths(&fast, &dense, draw));
            }
        }
    }
    let pass = worst.gram < 1e-10
        && worst.solve < 1e-8
        && worst.logdet < 1e-8
        && worst.tau < 1e-8
        && worst.posterior < 1e-8
        && worst.pi < 1e-9
        && worst.hh < 1e-9;
    outcome(
        pass,
        format!(
            "gram {:.1e}, solve {:.1e}, logdet {:.1e}, tau {:.1e}, posterior {:.1e}, pi {:.1e}, hh {:.1e}",
            worst.gram, worst.solve, worst.logdet, worst.tau, worst.posterior, worst.pi, worst.hh
        ),
    )
}

fn algorithm_internal_checks() -> Outcome {
    let mut worst = StageErrors::default();
    for family in FAMILIES {
        for sizes in SIZE_SETS {
            for draw in 0..DRAWS {
                let (fast, _) = instance(family, sizes, 2, 10_000 + draw);
                worst.max_with(&model_stage_errors(&fast));
            }
        }
    }
    outcome(
        worst.offdiag_ratio < 1e-12 && worst.identity < 1e-9,
        format!(
            "off-diagonal Schur mass ratio {:.1e}, stored vs dense Schur diagonal {:.1e}, identity {:.1e}",
            worst.offdiag_ratio, worst.schur_diag, worst.identity
        ),
    )
}

fn cubature_closed_forms() -> Outcome {
    let mut mean_gap = 0.0f64;
    let mut var_gap = 0.0f64;
    let mut sigma_gap = 0.0f64;
    let mut local_min = true;
    let mut mse_gap = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for family in FAMILIES {
        for sizes in SIZE_SETS {
            for draw in 0..DRAWS {
                let (fast, dense) = instance(family, sizes, 2, 10_000 + draw);
                let l = sizes.len();
                let cf = multitask_cubature(&fast, None).unwrap();
                let cd = multitask_cubature(&dense, None).unwrap();
                let scale = cd.sigma.iter().fold(1.0f64, |m, v| m.max(v.abs()));
                sigma_gap = sigma_gap.max(max_abs_diff(&cf.sigma, &cd.sigma) / scale);

                if l == 1 {
                    let y = fast.observations(0).unwrap();
                    let mean = y.iter().sum::<f64>() / y.len() as f64;
                    let (mu, var) = single_task_cubature(&fast).unwrap();
                    let (_, var_dense) = single_task_cubature(&dense).unwrap();
                    // The general form τ + γREᵀc collapses to the sample mean.
                    mean_gap = mean_gap.max((mu - mean).abs() / mean.abs().max(1.0));
                    mean_gap = mean_gap.max((cf.mu_hat[0] - mean).abs() / mean.abs().max(1.0));
                    var_gap = var_gap.max((var - var_dense).abs() / var_dense.abs().max(1.0));
                    continue;
                }

                let chi: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (omega, mse) = optimal_weights(&cf.mu_hat, &cf.sigma, &chi).unwrap();
                let base = weights_mse(&omega, &cf.mu_hat, &cf.sigma, &chi);
                for _ in 0..100 {
                    let w: Vec<f64> = omega.iter().map(|v| v + rng.random_range(-1e-3..1e-3)).collect();
                    if weights_mse(&w, &cf.mu_hat, &cf.sigma, &chi) < base - 1e-14 * base.abs().max(1.0) {
                        local_min = false;
                    }
                }
                let m = DVector::from_column_slice(&cf.mu_hat);
                let a = DMatrix::from_row_slice(l, l, &cf.sigma) + &m * m.transpose();
                let ainv = a.try_inverse().unwrap();
                let cm: f64 = chi.iter().zip(&cf.mu_hat).map(|(x, y)| x * y).sum();
                let closed = cm * cm * (1.0 - (m.transpose() * ainv * &m)[(0, 0)]);
                mse_gap = mse_gap.max((mse - closed).abs()).max((base - closed).abs());
            }
        }
    }
    let pass = mean_gap < 1e-13 && var_gap < 1e-9 && sigma_gap < 1e-9 && local_min && mse_gap < 1e-10;
    outcome(
        pass,
        format!(
            "sample mean {mean_gap:.1e}, single-task variance {var_gap:.1e}, multitask covariance {sigma_gap:.1e}, \
             weights local minimum {local_min}, minimum MSE {mse_gap:.1e}"
        ),
    )
}

fn median_l2(problem: &str, sizes: &[usize], steps: usize, trials: usize) -> (f64, f64) {
    let cfg = RunConfig { problem: problem.into(), n: sizes.to_vec(), steps, trials, seed: 20_240_601, ..Default::default() };
    let out = bench::bench(&cfg).unwrap();
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    let s = &out.summaries[0];
    (s.median_l2_relative_error, s.median_cubature_abs_error)
}

fn rosenbrock_regression() -> Outcome {
    let t0 = Instant::now();
    let (l2, _) = median_l2("rosenbrock", &[4096, 2048, 1024], 100, 5);
    let mut pass = l2 < 0.05;
    let mut detail = format!("median L2 error {:.3}% at n = (4096, 2048, 1024) in {:.0} s", 100.0 * l2, t0.elapsed().as_secs_f64());
    if std::env::var("FASTMTGP_ACCEPTANCE_FULL").is_ok_and(|v| v == "1") {
        let (full, _) = median_l2("rosenbrock", &[1 << 15, 1 << 14, 1 << 13], 200, 5);
        pass &= full < 0.02;
        detail.push_str(&format!("; full scale {:.3}%", 100.0 * full));
    } else {
        detail.push_str("; full scale not run (set FASTMTGP_ACCEPTANCE_FULL=1)");
    }
    outcome(pass, detail)
}

fn pde_exactness() -> Outcome {
    let worst = (1..=3).map(|l| (elliptic_pde(l, &[0.5; 16]) - 0.125).abs()).fold(0.0, f64::max);
    outcome(worst < 1e-12, format!("max |f(l, 0.5) - 1/8| = {worst:.1e}"))
}

fn convergence_trends() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for problem in ["ackley", "borehole"] {
        let grid = [64, 256, 1024];
        let res: Vec<(f64, f64)> = grid.iter().map(|&n| median_l2(problem, &[n, n], 100, 5)).collect();
        let l2_down = res.windows(2).all(|w| w[1].0 < w[0].0);
        let cub_down = res.windows(2).all(|w| w[1].1 < w[0].1);
        pass &= l2_down && cub_down;
        parts.push(format!(
            "{problem} L2 {} / cubature {}",
            res.iter().map(|r| format!("{:.2e}", r.0)).collect::<Vec<_>>().join(" > "),
            res.iter().map(|r| format!("{:.2e}", r.1)).collect::<Vec<_>>().join(" > ")
        ));
    }
    outcome(pass, parts.join("; "))
}

fn scaling_trends() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for family in [KernelFamily::DsiDigital, KernelFamily::SiLattice] {
        let gen = Arc::new(default_generator(family.sequence_kind().unwrap(), 2).unwrap());
        let ns: Vec<usize> = (10..=16).map(|m| 1 << m).collect();
        let times: Vec<f64> = ns.iter().map(|&n| time_fast_gram(&gen, family, &[n], 1, 7).unwrap()).collect();
        let slope = log2_slope(&ns.iter().map(|&n| n as f64).collect::<Vec<_>>(), &times);
        let per_doubling = 2f64.powf(slope);
        let balanced = time_fast_gram(&gen, family, &[1 << 12, 1 << 12], 1, 5).unwrap();
        let skewed = time_fast_gram(&gen, family, &[1 << 14, 1 << 4], 1, 5).unwrap();
        pass &= per_doubling <= 2.5 && skewed > balanced;
        parts.push(format!(
            "{family}: L=1 growth {per_doubling:.2}x per doubling, (2^14,2^4) {:.2} ms vs (2^12,2^12) {:.2} ms",
            1e3 * skewed,
            1e3 * balanced
        ));
    }
    outcome(pass, parts.join("; "))
}

fn property_suites() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // Unitarity and involution.
    for m in [0, 5, 10, 16] {
        let n = 1usize << m;
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let w = fwht(&a).unwrap();
        let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (nw - na).abs() > 1e-12 * na {
            failures.push(format!("walsh norm n={n}"));
        }
        if fwht(&w).unwrap().iter().zip(&a).any(|(x, y)| (x - y).abs() > 1e-12) {
            failures.push(format!("walsh involution n={n}"));
        }
        let c: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, -v)).collect();
        let f = fft_bitrev(&c).unwrap();
        let nc = c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let nf = f.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if (nf - nc).abs() > 1e-12 * nc {
            failures.push(format!("fourier norm n={n}"));
        }
        if fft_bitrev_inv(&f).unwrap().iter().zip(&c).any(|(x, y)| (x - y).norm() > 1e-12) {
            failures.push(format!("fourier round trip n={n}"));
        }
    }

    // Extensibility and group closure.
    for kind in [SequenceKind::Lattice, SequenceKind::Digital] {
        let d = 3;
        let g = default_generator(kind, d).unwrap();
        let s = random_shift(kind, d, 5, 0);
        let whole = g.points(&s, 17, 300).unwrap();
        let mut parts = g.points(&s, 17, 120).unwrap();
        parts.extend(g.points(&s, 137, 180).unwrap());
        if whole != parts {
            failures.push(format!("{kind:?} extensibility"));
        }
        let pts = g.points(&[0.0; 3], 0, 64).unwrap();
        let key = |p: &[f64]| p.iter().map(|v| to_bits(*v)).collect::<Vec<u64>>();
        let set: HashSet<Vec<u64>> = pts.chunks(d).map(key).collect();
        for a in pts.chunks(d) {
            for b in pts.chunks(d) {
                let c: Vec<f64> = match kind {
                    SequenceKind::Lattice => a.iter().zip(b).map(|(x, y)| (x + y) - (x + y).floor()).collect(),
                    SequenceKind::Digital => a.iter().zip(b).map(|(x, y)| digital_shift(*x, *y)).collect(),
                };
                if !set.contains(&key(&c)) {
                    failures.push(format!("{kind:?} group closure"));
                }
            }
        }
    }

    // Shift invariance.
    let b = [0.7, 0.3, 0.2, 0.1];
    for _ in 0..1000 {
        let (x, y, s) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        let wrap = |v: f64| v - v.floor();
        let k = si_bernoulli_1d(x, y, 2).unwrap();
        if (k - si_bernoulli_1d(wrap(x + s), wrap(y + s), 2).unwrap()).abs() > 1e-9 {
            failures.push("SI invariance".into());
        }
        let (xd, yd, sd) = (digital_shift(x, 0.0), digital_shift(y, 0.0), digital_shift(s, 0.0));
        if dsi_walsh_1d(xd, yd, &b) != dsi_walsh_1d(digital_shift(xd, sd), digital_shift(yd, sd), &b) {
            failures.push("DSI invariance".into());
        }
    }

    // Zero mean on a dyadic grid.
    let n = 1usize << 16;
    for _ in 0..4 {
        let x = digital_shift(rng.random::<f64>(), 0.0);
        let si = (0..n).map(|k| si_bernoulli_1d(x, k as f64 / n as f64, 1).unwrap()).sum::<f64>() / n as f64;
        let dsi = (0..n).map(|k| dsi_walsh_1d(x, k as f64 / n as f64, &[1.0, 0.0, 0.0, 0.0])).sum::<f64>() / n as f64;
        if si.abs() > 1e-9 || dsi.abs() > 1e-9 {
            failures.push(format!("zero mean ({si:e}, {dsi:e})"));
        }
    }

    // Positive definiteness.
    for family in [KernelFamily::SiLattice, KernelFamily::DsiDigital, KernelFamily::SeDense] {
        let (d, np) = (3, 64);
        let pts: Vec<f64> = (0..np * d).map(|_| digital_shift(rng.random::<f64>(), 0.0)).collect();
        let mut h = Hyperparams::new(d, 1, 0.0);
        h.eta = vec![0.8; d];
        h.lengthscales = vec![0.3; d];
        let q = SpatialKernel::new(family, &h).unwrap();
        let k = DMatrix::from_fn(np, np, |i, j| {
            q.eval(&pts[i * d..(i + 1) * d], &pts[j * d..(j + 1) * d]) + if i == j { 1e-10 } else { 0.0 }
        });
        if k.cholesky().is_none() {
            failures.push(format!("{family} positive definiteness"));
        }
    }

    failures.dedup();
    let detail = if failures.is_empty() {
        "unitarity, involution, extensibility, group closure, SI/DSI invariance, zero mean, PSD".to_string()
    } else {
        format!("failed: {}", failures.join(", "))
    };
    outcome(failures.is_empty(), detail)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("fast and dense paths agree", oracle_equivalence),
        ("block inversion internal checks", algorithm_internal_checks),
        ("cubature closed forms", cubature_closed_forms),
        ("Rosenbrock regression", rosenbrock_regression),
        ("elliptic PDE exactness", pde_exactness),
        ("convergence trends", convergence_trends),
        ("scaling trends", scaling_trends),
        ("transform and sequence properties", property_suites),
    ];
    let mut all = true;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = f();
        all &= o.pass;
        println!(
            "criterion {} {}: {} ({}) [{:.1} s]",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
