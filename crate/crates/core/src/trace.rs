//! Iteration records, gradient-cost accounting and CSV export.

use std::io::{self, Write};

use serde::Serialize;

/// Column order of exported traces.
pub const TRACE_CSV_HEADER: &str =
    "level,iter,kind,grad_norm,step_norm,delta_hat_norm,delta_norm,w_min,w_max,cost_cum,f_diag";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Taylor,
    Recursive,
    /// Gradient evaluated, level terminated without a step.
    Final,
}

impl StepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StepKind::Taylor => "taylor",
            StepKind::Recursive => "recursive",
            StepKind::Final => "final",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub level: usize,
    pub iter: usize,
    pub kind: StepKind,
    pub grad_norm: f64,
    pub step_norm: f64,
    pub delta_hat_norm: f64,
    pub delta_norm: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub cost_cum: f64,
    /// Model value at the iterate; only filled when diagnostics are on and
    /// never read by the solver.
    pub f_diag: Option<f64>,
}

/// Gradient evaluations per level in full-dataset units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostLedger {
    per_level: Vec<f64>,
}

impl CostLedger {
    pub fn new(depth: usize) -> Self {
        Self {
            per_level: vec![0.0; depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.per_level.len()
    }

    /// Adds `fraction` of a full-dataset gradient at `level ∈ 1..=r`.
    pub fn charge(&mut self, level: usize, fraction: f64) {
        self.per_level[level - 1] += fraction;
    }

    /// `#_ℓ` for `ℓ ∈ 1..=r`.
    pub fn evaluations(&self, level: usize) -> f64 {
        self.per_level[level - 1]
    }

    /// `C = Σ_ℓ 2^{ℓ-r} #_ℓ` in units of one top-level full gradient.
    pub fn total(&self) -> f64 {
        let r = self.depth() as i32;
        self.per_level
            .iter()
            .enumerate()
            .map(|(k, n)| 2f64.powi(k as i32 + 1 - r) * n)
            .sum()
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

/// Writes records as CSV with the fixed header. With `include_diagnostics`
/// false the `f_diag` column is left empty.
pub fn write_trace_csv<W: Write>(
    records: &[IterationRecord],
    mut out: W,
    include_diagnostics: bool,
) -> io::Result<()> {
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for r in records {
        let f_diag = match (include_diagnostics, r.f_diag) {
            (true, Some(f)) => fmt_f64(f),
            _ => String::new(),
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.level,
            r.iter,
            r.kind.as_str(),
            fmt_f64(r.grad_norm),
            fmt_f64(r.step_norm),
            fmt_f64(r.delta_hat_norm),
            fmt_f64(r.delta_norm),
            fmt_f64(r.w_min),
            fmt_f64(r.w_max),
            fmt_f64(r.cost_cum),
            f_diag
        )?;
    }
    Ok(())
}

pub fn trace_csv_string(records: &[IterationRecord], include_diagnostics: bool) -> String {
    let mut buf = Vec::new();
    write_trace_csv(records, &mut buf, include_diagnostics).expect("writing to memory");
    String::from_utf8(buf).expect("CSV is ASCII")
}
