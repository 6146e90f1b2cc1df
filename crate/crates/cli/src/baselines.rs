//! Single-level reference methods sharing the solver's cost accounting.

use moffo::problems::ProblemHierarchy;
use moffo::{CostLedger, IterationRecord, Result, SolveStatus, SolverConfig, StepKind, TopMonitor};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Baseline;

pub struct BaselineOutcome {
    pub x: DVector<f64>,
    pub trace: Vec<IterationRecord>,
    pub ledger: CostLedger,
    pub status: SolveStatus,
}

enum Rule {
    Sgd(f64),
    Adagrad { varsigma: f64, sum_sq: DVector<f64> },
}

/// Runs a gradient-only baseline on the finest level with the solver's
/// stopping rule (`eps_top`, `eps_top_relative`, top-level `i_max`).
pub fn run_baseline(
    baseline: &Baseline,
    problem: &ProblemHierarchy,
    x0: &DVector<f64>,
    config: &SolverConfig,
    mut monitor: Option<&mut TopMonitor<'_>>,
) -> Result<BaselineOutcome> {
    let mut rule = match baseline {
        Baseline::Sgd { lr } => Rule::Sgd(*lr),
        Baseline::AdagradOracle => Rule::Adagrad {
            varsigma: config.floors.min(),
            sum_sq: DVector::zeros(x0.len()),
        },
        Baseline::SingleLevelVariant => unreachable!("runs through the solver"),
    };
    let hierarchy = problem.hierarchy.top_levels(1)?;
    let i_max = *config.i_max.last().expect("i_max is never empty");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ hierarchy.noise().seed().rotate_left(32));
    let mut ledger = CostLedger::new(1);
    let mut trace = Vec::new();
    let mut eps = config.eps_top;
    let mut x = x0.clone();
    let mut i = 0;
    let status = loop {
        if let Some(m) = monitor.as_mut() {
            if m(&x) {
                break SolveStatus::Stopped;
            }
        }
        let (g, fraction) = hierarchy.sample_gradient(1, &x, &mut rng)?;
        ledger.charge(1, fraction);
        if i == 0 {
            if let Some(rel) = config.eps_top_relative {
                eps = rel * g.norm();
            }
        }
        let mut record = IterationRecord {
            level: 1,
            iter: i,
            kind: StepKind::Final,
            grad_norm: g.norm(),
            step_norm: 0.0,
            delta_hat_norm: f64::NAN,
            delta_norm: f64::NAN,
            w_min: f64::NAN,
            w_max: f64::NAN,
            cost_cum: ledger.total(),
            f_diag: None,
        };
        let converged = g.norm() <= eps;
        if converged || i == i_max {
            trace.push(record);
            break if converged {
                SolveStatus::Converged
            } else {
                SolveStatus::MaxIterations
            };
        }
        let (s, w) = match &mut rule {
            Rule::Sgd(lr) => (-&g * *lr, DVector::from_element(g.len(), 1.0 / *lr)),
            Rule::Adagrad { varsigma, sum_sq } => {
                *sum_sq += g.component_mul(&g);
                let w = sum_sq.map(|a| (*varsigma + a).sqrt());
                (-g.component_div(&w), w)
            }
        };
        record.kind = StepKind::Taylor;
        record.step_norm = s.norm();
        record.delta_hat_norm = s.norm();
        record.delta_norm = s.norm();
        record.w_min = w.min();
        record.w_max = w.max();
        trace.push(record);
        x += s;
        i += 1;
    };
    Ok(BaselineOutcome {
        x,
        trace,
        ledger,
        status,
    })
}
