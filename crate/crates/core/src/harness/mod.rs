//! Config-driven experiments: build the quadratic suite per seed, run every
//! requested algorithm, and write traces, summaries and optional extras.

pub mod config;
pub mod output;
pub mod plot;

use std::path::PathBuf;

use nalgebra::DVector;
use rand::Rng;

pub use config::{DiagnosticsLevel, ExperimentConfig, GammaKind, OUTPUT_DIR_ENV};

use crate::error::{FedZooError, Result};
use crate::federation::{run_federated_optimization, Algorithm, OptimizationTrace};
use crate::objectives::QuadraticSuite;
use crate::rng::{self, Role};
use output::{median, write_atomic};
use plot::{line_chart_svg, Series};

/// Sample points used to estimate `G` when the theoretical schedule needs it.
pub const HETEROGENEITY_SAMPLES: usize = 1000;

pub fn build_suite(cfg: &ExperimentConfig, seed: u64) -> Result<QuadraticSuite> {
    QuadraticSuite::new(cfg.dim, cfg.clients, cfg.heterogeneity, cfg.noise_std, seed)
}

/// The configured start point, or a uniform draw from the seed's start stream.
pub fn initial_point(cfg: &ExperimentConfig, seed: u64) -> DVector<f64> {
    match &cfg.x0 {
        Some(x0) => DVector::from_column_slice(x0),
        None => {
            let mut r = rng::stream(seed, Role::Start, 0);
            DVector::from_fn(cfg.dim, |_, _| r.random::<f64>())
        }
    }
}

/// One run without touching the filesystem.
pub fn run_trace(cfg: &ExperimentConfig, algorithm: Algorithm, seed: u64) -> Result<OptimizationTrace> {
    let suite = build_suite(cfg, seed)?;
    let needs_g = algorithm == Algorithm::Fzoos
        && cfg.gamma_schedule == GammaKind::Theoretical
        && cfg.theory_g.is_none();
    let g = if needs_g {
        let mut r = rng::stream(seed, Role::Heterogeneity, 0);
        suite.heterogeneity_g(HETEROGENEITY_SAMPLES, &mut r)?
    } else {
        0.0
    };
    let fed = cfg.federation(algorithm, seed, g);
    run_federated_optimization(&fed, &suite, &initial_point(cfg, seed)).map_err(|e| e.in_run(algorithm.name(), seed))
}

/// Runs every algorithm for every seed, algorithm-major.
pub fn run_traces(cfg: &ExperimentConfig, algorithms: &[Algorithm]) -> Result<Vec<OptimizationTrace>> {
    let mut traces = Vec::with_capacity(algorithms.len() * cfg.seeds.len());
    for &a in algorithms {
        for &seed in &cfg.seeds {
            log::info!("running {a} with seed {seed}");
            traces.push(run_trace(cfg, a, seed)?);
        }
    }
    Ok(traces)
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub traces: Vec<OptimizationTrace>,
    /// Files written, in write order.
    pub files: Vec<PathBuf>,
}

/// `fedzoo run`: the configured algorithms over all seeds.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    compare_algorithms(cfg, &cfg.algorithms)
}

/// `fedzoo compare`: like `run_experiment` with the algorithm list replaced.
pub fn compare_algorithms(cfg: &ExperimentConfig, algorithms: &[Algorithm]) -> Result<ExperimentOutput> {
    let cfg = ExperimentConfig {
        algorithms: algorithms.to_vec(),
        ..cfg.clone()
    };
    cfg.validate()?;
    let traces = run_traces(&cfg, algorithms)?;
    let files = write_outputs(&cfg, &traces)?;
    Ok(ExperimentOutput { traces, files })
}

/// Writes traces, `summary.csv`, `comparison.csv` and whatever extras the
/// config enables. Plot failures are logged, never returned.
pub fn write_outputs(cfg: &ExperimentConfig, traces: &[OptimizationTrace]) -> Result<Vec<PathBuf>> {
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut put = |name: String, fill: &dyn Fn(&mut Vec<u8>) -> Result<()>| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, fill)?;
        files.push(path);
        Ok(())
    };

    for t in traces {
        put(output::trace_file_name(t.algorithm, t.seed), &|b| output::write_trace_csv(b, t))?;
    }
    put("summary.csv".into(), &|b| output::write_summary_csv(b, traces, cfg.error_threshold))?;
    put("comparison.csv".into(), &|b| output::write_comparison_csv(b, traces))?;

    if cfg.diagnostics != DiagnosticsLevel::Off {
        for t in traces {
            let last = cfg.local_iterations;
            let keep = |r: &&crate::diagnostics::DisparityRecord| {
                cfg.diagnostics == DiagnosticsLevel::Iteration || r.iteration == last
            };
            put(output::diagnostics_file_name(t.algorithm, t.seed), &|b| {
                output::write_diagnostics_csv(b, t.iterations.iter().filter(keep))
            })?;
        }
    }

    if cfg.dump_coefficients {
        for &seed in &cfg.seeds {
            let suite = build_suite(cfg, seed)?;
            put(format!("coefficients_{seed}.csv"), &|b| suite.write_coefficients_csv(b))?;
        }
    }

    if cfg.emit_plots {
        for (name, svg) in convergence_plots(traces) {
            let path = dir.join(&name);
            match write_atomic(&path, |b| {
                b.extend_from_slice(svg.as_bytes());
                Ok(())
            }) {
                Ok(()) => files.push(path),
                Err(e) => log::warn!("skipping plot {name}: {e}"),
            }
        }
    }
    Ok(files)
}

/// Median convergence error per algorithm against rounds and against
/// cumulative queries.
pub fn convergence_plots(traces: &[OptimizationTrace]) -> Vec<(String, String)> {
    let mut algorithms: Vec<Algorithm> = Vec::new();
    for t in traces {
        if !algorithms.contains(&t.algorithm) {
            algorithms.push(t.algorithm);
        }
    }
    let mut by_round = Vec::new();
    let mut by_queries = Vec::new();
    for a in algorithms {
        let group: Vec<&OptimizationTrace> = traces.iter().filter(|t| t.algorithm == a).collect();
        let rows = group.iter().map(|t| t.rounds.len()).min().unwrap_or(0);
        let mut pr = Vec::with_capacity(rows);
        let mut pq = Vec::with_capacity(rows);
        for i in 0..rows {
            let errs: Vec<f64> = group.iter().filter_map(|t| t.rounds[i].conv_error).collect();
            let qs: Vec<f64> = group.iter().map(|t| t.rounds[i].cum_queries as f64).collect();
            if let (Some(e), Some(q)) = (median(&errs), median(&qs)) {
                pr.push((i as f64, e));
                pq.push((q, e));
            }
        }
        by_round.push(Series {
            label: a.name().to_string(),
            points: pr,
        });
        by_queries.push(Series {
            label: a.name().to_string(),
            points: pq,
        });
    }
    let mut out = Vec::new();
    if let Some(svg) = line_chart_svg("median convergence error", "round", "F(x) - F*", &by_round) {
        out.push(("convergence_rounds.svg".to_string(), svg));
    }
    if let Some(svg) = line_chart_svg("median convergence error", "cumulative queries", "F(x) - F*", &by_queries) {
        out.push(("convergence_queries.svg".to_string(), svg));
    }
    out
}

impl FedZooError {
    fn in_run(self, algorithm: &str, seed: u64) -> Self {
        FedZooError::Run {
            algorithm: algorithm.to_string(),
            seed,
            source: Box::new(self),
        }
    }
}
