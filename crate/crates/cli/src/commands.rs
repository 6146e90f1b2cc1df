//! Subcommand implementations. Each returns the process exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use moffo::bounds::{check_adagrad_rate, check_divergent_rate, CheckStatus, TheoryConstants};
use moffo::problems::{finite_difference_check, ProblemSpec, REGISTRY};
use moffo::trace::write_trace_csv;
use moffo::{
    solve_monitored, CostLedger, IterationRecord, MoffoError, SolveStatus, StepKind, TopMonitor,
    WeightKind,
};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

use crate::baselines::run_baseline;
use crate::config::{Baseline, ExperimentConfig, TraceGranularity};
use crate::CliError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_THEOREM: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

const MULTILEVEL: &str = "moffo";

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub levels: usize,
    pub status: SolveStatus,
    pub top_iterations: usize,
    pub final_grad_norm: f64,
    pub final_exact_grad_norm: f64,
    pub cost: f64,
    pub evaluations_per_level: Vec<f64>,
    pub wall_time_s: f64,
    pub invariant_violations: Option<usize>,
    pub trace_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub method: String,
    pub median_cost: f64,
    pub multilevel_median_cost: f64,
    /// `median_cost / multilevel_median_cost`; above one favours the
    /// multilevel solver.
    pub cost_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub problem: String,
    pub levels: usize,
    pub runs: Vec<RunRecord>,
    pub comparisons: Vec<Comparison>,
}

fn runtime(e: MoffoError) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Worker pool honouring `MOFFO_THREADS`.
fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("MOFFO_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("MOFFO_THREADS: expected a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn last_top_gradient(trace: &[IterationRecord], top: usize) -> f64 {
    trace
        .iter()
        .rev()
        .find(|r| r.level == top)
        .map_or(f64::NAN, |r| r.grad_norm)
}

fn execute(
    config: &ExperimentConfig,
    method: Option<&Baseline>,
    seed: u64,
) -> Result<RunRecord, CliError> {
    let problem = config.problem.build(seed).map_err(runtime)?;
    let problem = match method {
        Some(Baseline::SingleLevelVariant) => problem.top_levels(1).map_err(runtime)?,
        _ => problem,
    };
    let mut solver = config.solver.clone().with_depth(problem.depth());
    solver.seed = seed;
    let x0 = problem.x0.clone();
    let top = problem.top().clone();

    let mut exact_g0: Option<f64> = None;
    let threshold = config.runs.exact_stop_relative;
    let mut exact_stop = |x: &DVector<f64>| -> bool {
        let Some(t) = threshold else { return false };
        let Ok(g) = top.gradient(x) else { return false };
        let g0 = *exact_g0.get_or_insert(g.norm());
        g.norm() <= t * g0
    };
    let monitor: Option<&mut TopMonitor<'_>> = Some(&mut exact_stop);

    let start = Instant::now();
    let (x, trace, ledger, status, violations): (_, Vec<IterationRecord>, CostLedger, _, _) =
        match method {
            None | Some(Baseline::SingleLevelVariant) => {
                let out = solve_monitored(&problem.hierarchy, &x0, &solver, monitor).map_err(runtime)?;
                let v = out.invariants.violations();
                (out.x, out.trace, out.ledger, out.status, Some(v))
            }
            Some(b) => {
                let out = run_baseline(b, &problem, &x0, &solver, monitor).map_err(runtime)?;
                (out.x, out.trace, out.ledger, out.status, None)
            }
        };
    let wall_time_s = start.elapsed().as_secs_f64();
    let levels = ledger.depth();

    let label = method.map_or(MULTILEVEL.to_string(), Baseline::label);
    let trace_file = match config.runs.trace {
        TraceGranularity::None => None,
        granularity => {
            let path = config.runs.out_dir.join(format!("{label}_seed{seed}.csv"));
            let rows: Vec<IterationRecord> = trace
                .iter()
                .filter(|r| granularity == TraceGranularity::All || r.level == levels)
                .cloned()
                .collect();
            let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
            write_trace_csv(&rows, std::io::BufWriter::new(file), solver.diagnostics)
                .map_err(|e| io_error(&path, e))?;
            Some(path)
        }
    };
    let top_iterations = trace
        .iter()
        .filter(|r| r.level == levels && r.kind != StepKind::Final)
        .count();
    Ok(RunRecord {
        method: label,
        seed,
        levels,
        status,
        top_iterations,
        final_grad_norm: last_top_gradient(&trace, levels),
        final_exact_grad_norm: top.gradient(&x).map_err(runtime)?.norm(),
        cost: ledger.total(),
        evaluations_per_level: (1..=levels).map(|l| ledger.evaluations(l)).collect(),
        wall_time_s,
        invariant_violations: violations,
        trace_file,
    })
}

fn load(path: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(dir) = out {
        config.runs.out_dir = dir.to_path_buf();
    }
    if let Some(s) = seed {
        config.override_seed(s);
    }
    config.validate()?;
    Ok(config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Summary, CliError> {
    fs::create_dir_all(&config.runs.out_dir).map_err(|e| io_error(&config.runs.out_dir, e))?;
    let methods: Vec<Option<&Baseline>> =
        std::iter::once(None).chain(config.baselines.iter().map(Some)).collect();
    let jobs: Vec<(Option<&Baseline>, u64)> = config
        .seeds()
        .into_iter()
        .flat_map(|s| methods.iter().map(move |m| (*m, s)))
        .collect();
    let pool = thread_pool()?;
    let runs = pool.install(|| {
        jobs.par_iter()
            .map(|(m, s)| execute(config, *m, *s))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut by_method: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        by_method.entry(&r.method).or_default().push(r.cost);
    }
    let reference = median(by_method.get_mut(MULTILEVEL).expect("solver always runs"));
    let mut comparisons: Vec<Comparison> = config
        .baselines
        .iter()
        .map(|b| {
            let label = b.label();
            let cost = median(by_method.get_mut(label.as_str()).expect("baseline ran"));
            Comparison {
                method: label,
                median_cost: cost,
                multilevel_median_cost: reference,
                cost_ratio: cost / reference,
            }
        })
        .collect();
    comparisons.dedup_by(|a, b| a.method == b.method);
    Ok(Summary {
        problem: config.problem.name.clone(),
        levels: runs[0].levels,
        runs,
        comparisons,
    })
}

fn report_error(e: &CliError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

pub fn cmd_run(path: &Path, out: Option<&Path>, seed: Option<u64>) -> i32 {
    let result = load(path, out, seed).and_then(|config| {
        let summary = run_experiment(&config)?;
        write_json(&config.runs.out_dir.join("summary.json"), &summary)?;
        Ok(summary)
    });
    match result {
        Ok(summary) => {
            for r in &summary.runs {
                println!(
                    "{} seed {}: cost {:.6e}, |g| {:.3e}, {:?}",
                    r.method, r.seed, r.cost, r.final_exact_grad_norm, r.status
                );
            }
            for c in &summary.comparisons {
                println!("{} / {}: cost ratio {:.3}", c.method, MULTILEVEL, c.cost_ratio);
            }
            EXIT_OK
        }
        Err(e) => report_error(&e),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckEntry {
    pub status: CheckStatus,
    pub max_ratio: Option<f64>,
    pub min_ratio: Option<f64>,
    pub first_violation: Option<usize>,
    pub iterations: usize,
    /// Failing an asserting check is a theorem violation.
    pub asserting: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub constants: TheoryConstants,
    pub checks: BTreeMap<String, CheckEntry>,
}

impl BoundsReport {
    pub fn violated(&self) -> bool {
        self.checks
            .values()
            .any(|c| c.asserting && c.status == CheckStatus::Fail)
    }
}

pub fn check_bounds(config: &ExperimentConfig) -> Result<BoundsReport, CliError> {
    let problem = config.problem.build(config.seeds()[0]).map_err(runtime)?;
    if config.problem.minibatch.is_some() || config.problem.gaussian_noise.is_some() {
        return Err(CliError::Config(
            "problem: rate checks need exact gradients (remove minibatch/gaussian_noise)".to_string(),
        ));
    }
    let mut solver = config.solver.clone().with_depth(problem.depth());
    solver.seed = config.seeds()[0];
    let constants = problem
        .theory_constants(&problem.x0, &solver, config.runs.vartheta)
        .map_err(|e| CliError::Config(format!("problem: {e}")))?;
    let out = moffo::solve(&problem.hierarchy, &problem.x0, &solver).map_err(runtime)?;
    let norms = out.top_gradient_norms();
    let mut checks = BTreeMap::new();
    let entry = |c: moffo::bounds::RateCheck, asserting| CheckEntry {
        status: c.status,
        max_ratio: c.max_ratio,
        min_ratio: c.min_ratio,
        first_violation: c.first_violation,
        iterations: c.iterations,
        asserting,
    };
    if solver.weight_kind == WeightKind::AdagradLike {
        let kappa = constants.kappa_star.expect("always evaluated");
        checks.insert("adagrad_rate".to_string(), entry(check_adagrad_rate(&norms, kappa), true));
    }
    if let Some(t) = constants.divergent() {
        if solver.weight_kind == WeightKind::Maxgi {
            checks.insert(
                "divergent_rate".to_string(),
                entry(check_divergent_rate(&norms, &t, solver.mu), false),
            );
        }
    }
    let violations = out.invariants.violations();
    checks.insert(
        "invariants".to_string(),
        CheckEntry {
            status: if violations == 0 { CheckStatus::Pass } else { CheckStatus::Fail },
            max_ratio: None,
            min_ratio: None,
            first_violation: None,
            iterations: norms.len(),
            asserting: true,
        },
    );
    Ok(BoundsReport { constants, checks })
}

pub fn cmd_check_bounds(path: &Path, out: Option<&Path>) -> i32 {
    let result = load(path, out, None).and_then(|config| {
        let report = check_bounds(&config)?;
        fs::create_dir_all(&config.runs.out_dir).map_err(|e| io_error(&config.runs.out_dir, e))?;
        write_json(&config.runs.out_dir.join("report.json"), &report)?;
        Ok(report)
    });
    match result {
        Ok(report) => {
            for (name, c) in &report.checks {
                let ratio = c.max_ratio.or(c.min_ratio).map_or("-".to_string(), |r| format!("{r:.3e}"));
                println!("{name}: {:?} (ratio {ratio}, {} iterations)", c.status, c.iterations);
            }
            if report.violated() {
                eprintln!("error: a proved bound was violated");
                EXIT_THEOREM
            } else {
                EXIT_OK
            }
        }
        Err(e) => report_error(&e),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckResult {
    pub problem: String,
    pub worst_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Finite-difference check of every level of the named built-ins.
pub fn gradcheck(only: Option<&str>) -> Result<Vec<GradcheckResult>, CliError> {
    let selected: Vec<_> = REGISTRY
        .iter()
        .filter(|p| only.is_none_or(|n| n == p.name))
        .collect();
    if selected.is_empty() {
        return Err(CliError::Config(format!(
            "--problem: unknown problem {:?}",
            only.unwrap_or_default()
        )));
    }
    selected
        .into_iter()
        .map(|info| {
            let problem = ProblemSpec::named(info.name).build(0).map_err(runtime)?;
            let mut worst: f64 = 0.0;
            let mut x = problem.x0.clone();
            for level in (1..=problem.depth()).rev() {
                let err = finite_difference_check(
                    problem.hierarchy.objective(level).as_ref(),
                    &x,
                    info.fd_step,
                    level as u64,
                )
                .map_err(runtime)?;
                worst = worst.max(err);
                if level > 1 {
                    let op = problem.hierarchy.transfer(level).expect("operator below top");
                    x = op.restrict(&x).map_err(runtime)?;
                }
            }
            Ok(GradcheckResult {
                problem: info.name.to_string(),
                worst_error: worst,
                tolerance: info.fd_tolerance,
                passed: worst <= info.fd_tolerance,
            })
        })
        .collect()
}

pub fn cmd_gradcheck(only: Option<&str>) -> i32 {
    match gradcheck(only) {
        Ok(results) => {
            for r in &results {
                println!(
                    "{}: error {:.3e} (tolerance {:.0e}) {}",
                    r.problem,
                    r.worst_error,
                    r.tolerance,
                    if r.passed { "ok" } else { "FAILED" }
                );
            }
            if results.iter().all(|r| r.passed) {
                EXIT_OK
            } else {
                EXIT_GRADCHECK
            }
        }
        Err(e) => report_error(&e),
    }
}

pub fn cmd_list_problems() -> i32 {
    for p in REGISTRY {
        println!("{:<20} {}", p.name, p.description);
    }
    EXIT_OK
}
