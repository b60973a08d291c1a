use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fastmtgp::bench::{self, parse_sizes, RunConfig};
use fastmtgp::cubature::multitask_cubature;
use fastmtgp::gp::{GpModel, LossKind, ModelDocument, RpropConfig};
use fastmtgp::kernels::KernelFamily;
use fastmtgp::Result;

/// Fast multitask GP fitting, cubature and benchmarks on low-discrepancy designs.
#[derive(Parser, Debug)]
#[command(name = "fastmtgp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the per-task design points as CSV.
    Points(Common),
    /// Fit a model on a benchmark problem; writes the model JSON to --out and
    /// the fit report to stdout.
    Fit(Common),
    /// Integral estimates of a saved model (or of a fresh fit).
    Cubature {
        #[command(flatten)]
        common: Common,
        /// Saved model document; when absent a model is fit from the flags.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Combination weights, comma separated.
        #[arg(long, value_delimiter = ',')]
        chi: Option<Vec<f64>>,
    },
    /// Sweep sample sizes, methods and trials; CSV rows per trial.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Median summary CSV; printed to stderr when absent.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Time spectrum construction plus block inversion per sample-size vector.
    Scaling(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    /// si-lattice, dsi-digital or se-dense.
    #[arg(long)]
    kernel: Option<KernelFamily>,
    /// Additional kernels for `bench`, comma separated.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<KernelFamily>>,
    /// nmll or gcv.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Samples per task, e.g. `1024,512` or `1024x512`.
    #[arg(long)]
    n: Option<String>,
    /// Additional sample-size vectors (repeatable).
    #[arg(long)]
    sweep: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Input dimension override (Ackley, points, scaling).
    #[arg(long)]
    dim: Option<usize>,
    /// Extra mesh refinements for the elliptic PDE.
    #[arg(long)]
    refine: Option<u32>,
    #[arg(long)]
    dense_cap: Option<usize>,
    #[arg(long)]
    test_points: Option<usize>,
    /// Timing repetitions for `scaling`.
    #[arg(long)]
    reps: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json(&std::fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = &self.$f { c.$f = v.clone(); } )*};
        }
        set!(problem, kernel, methods, loss, steps, trials, seed, noise, refine, dense_cap, test_points, reps);
        if let Some(n) = &self.n {
            c.n = parse_sizes(n)?;
        }
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        if self.dim.is_some() {
            c.dim = self.dim;
        }
        if !self.sweep.is_empty() {
            c.sweep = self.sweep.iter().map(|s| parse_sizes(s)).collect::<Result<_>>()?;
        }
        Ok(c)
    }
}

fn output(cfg: &RunConfig) -> Result<Box<dyn Write>> {
    Ok(match &cfg.out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn fit_from_config(cfg: &RunConfig) -> Result<(GpModel, fastmtgp::gp::FitReport)> {
    let problem = cfg.problem()?;
    let sizes = cfg.sizes(problem.as_ref());
    cfg.validate_sizes(cfg.kernel, &sizes)?;
    let mut model = bench::training_model(problem.as_ref(), cfg.kernel, &sizes, cfg.seed, cfg.noise, cfg.loss)?;
    let report = model.fit(cfg.steps, &RpropConfig::default())?;
    Ok((model, report))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Points(common) => {
            let cfg = common.resolve()?;
            bench::write_points(&cfg, output(&cfg)?)?;
        }
        Command::Fit(common) => {
            let cfg = common.resolve()?;
            let (model, report) = fit_from_config(&cfg)?;
            if let Some(p) = &cfg.out {
                std::fs::write(p, model.export(Some(cfg.seed), Some(cfg.problem.clone())).to_json()?)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Cubature { common, model, chi } => {
            let cfg = common.resolve()?;
            let model = match model {
                Some(p) => GpModel::import(&ModelDocument::from_json(&std::fs::read_to_string(p)?)?)?,
                None => fit_from_config(&cfg)?.0,
            };
            let l = model.num_tasks();
            let chi = chi.unwrap_or_else(|| {
                let mut e = vec![0.0; l];
                e[l - 1] = 1.0;
                e
            });
            let c = multitask_cubature(&model, Some(&chi))?;
            let (proj_mean, proj_var) = c.projection.expect("weights supplied");
            let doc = serde_json::json!({
                "mu_hat": c.mu_hat,
                "sigma_diag": c.sigma_diag(),
                "sigma": c.sigma,
                "chi": chi,
                "chi_mean": proj_mean,
                "chi_variance": proj_var,
            });
            writeln!(output(&cfg)?, "{}", serde_json::to_string_pretty(&doc)?)?;
        }
        Command::Bench { common, summary } => {
            let cfg = common.resolve()?;
            let outcome = bench::bench(&cfg)?;
            let mut w = csv::Writer::from_writer(output(&cfg)?);
            for r in &outcome.records {
                w.serialize(r)?;
            }
            w.flush()?;
            let sink: Box<dyn Write> = match summary {
                Some(p) => Box::new(File::create(p)?),
                None => Box::new(io::stderr().lock()),
            };
            let mut w = csv::Writer::from_writer(sink);
            for s in &outcome.summaries {
                w.serialize(s)?;
            }
            w.flush()?;
            for s in &outcome.skipped {
                eprintln!("skipped: {s}");
            }
            for f in &outcome.failures {
                eprintln!("failed: {f}");
            }
            return Ok(outcome.failures.is_empty());
        }
        Command::Scaling(common) => {
            let cfg = common.resolve()?;
            let mut w = csv::Writer::from_writer(output(&cfg)?);
            for r in bench::scaling(&cfg)? {
                w.serialize(r)?;
            }
            w.flush()?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(t) = std::env::var("FASTMTGP_THREADS") {
        match t.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: could not size thread pool: {e}");
                }
            }
            _ => eprintln!("warning: ignoring FASTMTGP_THREADS={t:?}"),
        }
    }
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
