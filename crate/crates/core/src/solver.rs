//! The recursive multilevel trust-region driver.
//!
//! Control flow depends only on gradients, weights and transfer geometry.
//! Objective values are read solely to fill the `f_diag` trace column when
//! diagnostics are requested.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, MoffoError, Result};
use crate::hierarchy::{
    build_coherent_model, coherence_defect_ok, CoherentModel, LevelHierarchy,
};
use crate::step::{
    compute_radius_scaled, linear_decrease_bound_holds, taylor_step, weighted_decrease,
    HessianModel,
};
use crate::trace::{CostLedger, IterationRecord, StepKind};
use crate::weights::{
    init_lower_adagrad, init_lower_divergent, seed_lower_state, WeightKind, WeightState,
};

/// Lower bounds `ς` on the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Floors {
    Scalar(f64),
    /// Per-coordinate floors at the top level; lower levels use their minimum.
    Vector(Vec<f64>),
}

impl Floors {
    pub fn min(&self) -> f64 {
        match self {
            Floors::Scalar(s) => *s,
            Floors::Vector(v) => v.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub kappa_r: f64,
    pub alpha: f64,
    pub tau: f64,
    pub kappa_b: f64,
    /// `B = c·I` at every level; zero gives first-order steps.
    pub hessian_diagonal: f64,
    pub floors: Floors,
    pub weight_kind: WeightKind,
    pub mu: f64,
    /// Defaults to `mu` for MAXGI.
    pub nu: Option<f64>,
    /// Absolute top-level gradient tolerance `ε_r`.
    pub eps_top: f64,
    /// When set, `ε_r = eps_top_relative·‖g_{r,0}‖` (overrides `eps_top`).
    pub eps_top_relative: Option<f64>,
    /// Iteration budgets `i_ℓ^(max)`, coarsest level first.
    pub i_max: Vec<usize>,
    pub pre_smooth: usize,
    pub post_smooth: usize,
    /// `ε_{ℓ-1} = κ_ε ‖R_ℓ g_{ℓ,i}‖`.
    pub lower_eps_factor: f64,
    pub strict_descent_monitoring: bool,
    /// `κ_E` for weak coherence; `None` enforces exact linear coherence.
    pub weak_coherence: Option<f64>,
    pub step_scale: f64,
    pub refine_taylor: bool,
    pub diagnostics: bool,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kappa_r: 0.01,
            alpha: 5.0,
            tau: 1.0,
            kappa_b: 1.0,
            hessian_diagonal: 0.0,
            floors: Floors::Scalar(0.01),
            weight_kind: WeightKind::AdagradLike,
            mu: 0.5,
            nu: None,
            eps_top: 1e-6,
            eps_top_relative: None,
            i_max: vec![1000],
            pre_smooth: 1,
            post_smooth: 0,
            lower_eps_factor: 0.1,
            strict_descent_monitoring: false,
            weak_coherence: None,
            step_scale: 1.0,
            refine_taylor: false,
            diagnostics: false,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn nu(&self) -> f64 {
        self.nu.unwrap_or(self.mu)
    }

    /// Config whose `i_max` covers `depth` levels: the last entry is the top
    /// budget, missing lower entries default to 10.
    pub fn with_depth(mut self, depth: usize) -> Self {
        if self.i_max.len() != depth {
            let top = self.i_max.last().copied().unwrap_or(1000);
            let mut lower: Vec<usize> = self.i_max[..self.i_max.len().saturating_sub(1)].to_vec();
            lower.resize(depth - 1, 10);
            lower.push(top);
            self.i_max = lower;
        }
        self
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        let bad = |msg: String| Err(MoffoError::InvalidConfig(msg));
        if !(self.kappa_r > 0.0 && self.kappa_r < 1.0) {
            return bad(format!("kappa_r must lie in (0,1), got {}", self.kappa_r));
        }
        if !(self.alpha >= 1.0) {
            return bad(format!("alpha must be at least 1, got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0,1], got {}", self.tau));
        }
        if !(self.kappa_b >= 1.0) {
            return bad(format!("kappa_b must be at least 1, got {}", self.kappa_b));
        }
        if self.hessian_diagonal.abs() > self.kappa_b {
            return bad(format!(
                "hessian_diagonal {} exceeds kappa_b {}",
                self.hessian_diagonal, self.kappa_b
            ));
        }
        let floors_ok = match &self.floors {
            Floors::Scalar(s) => *s > 0.0 && *s <= 1.0,
            Floors::Vector(v) => !v.is_empty() && v.iter().all(|s| *s > 0.0 && *s <= 1.0),
        };
        if !floors_ok {
            return bad("floors must lie in (0,1]".to_string());
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return bad(format!("mu must lie in (0,1), got {}", self.mu));
        }
        if self.weight_kind == WeightKind::Maxgi && !(self.nu() > 0.0 && self.nu() <= self.mu) {
            return bad(format!("nu must lie in (0, mu], got {}", self.nu()));
        }
        if !(self.eps_top >= 0.0) {
            return bad("eps_top must be nonnegative".to_string());
        }
        if let Some(rel) = self.eps_top_relative {
            if !(rel >= 0.0) {
                return bad("eps_top_relative must be nonnegative".to_string());
            }
        }
        if self.i_max.len() != depth {
            return bad(format!(
                "i_max has {} entries for a {depth}-level hierarchy",
                self.i_max.len()
            ));
        }
        if self.i_max.iter().any(|&m| m == 0) {
            return bad("i_max entries must be positive".to_string());
        }
        if self.pre_smooth == 0 {
            return bad("pre_smooth must be at least 1".to_string());
        }
        if !(self.lower_eps_factor > 0.0 && self.lower_eps_factor <= 1.0) {
            return bad(format!(
                "lower_eps_factor must lie in (0,1], got {}",
                self.lower_eps_factor
            ));
        }
        if let Some(k) = self.weak_coherence {
            if !(k >= 0.0) {
                return bad("weak_coherence kappa_E must be nonnegative".to_string());
            }
        }
        if !(self.step_scale > 0.0) {
            return bad("step_scale must be positive".to_string());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CycleAction {
    Taylor,
    TryRecursive,
}

/// V-cycle schedule: `pre` Taylor iterations, one recursive attempt, `post`
/// Taylor iterations, repeated. Level 1 only takes Taylor steps.
pub fn cycle_shape(level: usize, i: usize, pre: usize, post: usize) -> CycleAction {
    if level <= 1 {
        return CycleAction::Taylor;
    }
    if i % (pre + 1 + post) == pre {
        CycleAction::TryRecursive
    } else {
        CycleAction::Taylor
    }
}

/// Recurse iff `Σ (Rg)_j²/w_low,j ≥ κ_R Σ g_j²/w_j`.
pub fn should_recurse(
    rg: &DVector<f64>,
    w_low: &DVector<f64>,
    g: &DVector<f64>,
    w: &DVector<f64>,
    kappa_r: f64,
) -> bool {
    weighted_decrease(rg, w_low) >= kappa_r * weighted_decrease(g, w)
}

/// Number of leading lower-level iterations `k` whose linear decrease
/// `Σ g_{k,j}²/w_{k,j}` stays at least `κ_R` times the upper one. Disabled
/// monitoring keeps every iteration.
pub fn monitor_new_cond(
    lower: &[(DVector<f64>, DVector<f64>)],
    upper_g: &DVector<f64>,
    upper_w: &DVector<f64>,
    kappa_r: f64,
    enabled: bool,
) -> usize {
    if !enabled {
        return lower.len();
    }
    let threshold = kappa_r * weighted_decrease(upper_g, upper_w);
    lower
        .iter()
        .take_while(|(g, w)| weighted_decrease(g, w) >= threshold)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Top-level iteration budget exhausted; the last iterate is returned.
    MaxIterations,
    /// Stopped by an external monitor.
    Stopped,
}

/// Runtime checks of the properties the analysis relies on. All violation
/// counters stay at zero on a correct run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct InvariantReport {
    pub taylor_iterations: usize,
    pub recursive_iterations: usize,
    pub vetoed_recursions: usize,
    pub linear_decrease_violations: usize,
    pub step_norm_violations: usize,
    pub lower_radius_violations: usize,
    pub weight_growth_violations: usize,
    pub step_cap_violations: usize,
    pub returned_point_violations: usize,
    pub first_lower_iterate_rejections: usize,
    /// Capped lower-level Taylor steps that miss the decrease bound stated
    /// with the raw weights but satisfy it with the shrunk effective weights.
    pub capped_decrease_gaps: usize,
    pub max_coherence_error: f64,
    /// Iterations kept at the lower level for each recursive iteration.
    pub retained_lower_iterations: Vec<usize>,
}

impl InvariantReport {
    pub fn violations(&self) -> usize {
        self.linear_decrease_violations
            + self.step_norm_violations
            + self.lower_radius_violations
            + self.weight_growth_violations
            + self.step_cap_violations
            + self.returned_point_violations
            + self.first_lower_iterate_rejections
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub x: DVector<f64>,
    pub trace: Vec<IterationRecord>,
    pub ledger: CostLedger,
    pub status: SolveStatus,
    pub invariants: InvariantReport,
}

impl SolveOutcome {
    /// Gradient norms `‖g_{r,k}‖` of the top level in iteration order.
    pub fn top_gradient_norms(&self) -> Vec<f64> {
        let r = self.ledger.depth();
        self.trace
            .iter()
            .filter(|rec| rec.level == r)
            .map(|rec| rec.grad_norm)
            .collect()
    }

    pub fn top_iterations(&self) -> usize {
        let r = self.ledger.depth();
        self.trace
            .iter()
            .filter(|rec| rec.level == r && rec.kind != StepKind::Final)
            .count()
    }

    pub fn final_gradient_norm(&self) -> Option<f64> {
        self.top_gradient_norms().last().copied()
    }
}

/// Callback on top-level iterates; returning `true` stops the run. It runs
/// before the gradient at the iterate is evaluated and is not charged.
pub type TopMonitor<'a> = dyn FnMut(&DVector<f64>) -> bool + 'a;

pub fn solve(
    hierarchy: &LevelHierarchy,
    x0: &DVector<f64>,
    config: &SolverConfig,
) -> Result<SolveOutcome> {
    solve_monitored(hierarchy, x0, config, None)
}

pub fn solve_monitored(
    hierarchy: &LevelHierarchy,
    x0: &DVector<f64>,
    config: &SolverConfig,
    monitor: Option<&mut TopMonitor<'_>>,
) -> Result<SolveOutcome> {
    let r = hierarchy.depth();
    config.validate(r)?;
    check_len(hierarchy.dim(r), x0.len(), "starting point")?;
    let floors: Vec<DVector<f64>> = (1..=r)
        .map(|level| {
            let n = hierarchy.dim(level);
            match (&config.floors, level == r) {
                (Floors::Vector(v), true) => {
                    check_len(n, v.len(), "floor vector")?;
                    Ok(DVector::from_column_slice(v))
                }
                (f, _) => Ok(DVector::from_element(n, f.min())),
            }
        })
        .collect::<Result<_>>()?;
    let hessians = (1..=r)
        .map(|level| {
            let n = hierarchy.dim(level);
            let b = if config.hessian_diagonal == 0.0 {
                HessianModel::Zero
            } else {
                HessianModel::Diagonal(DVector::from_element(n, config.hessian_diagonal))
            };
            b.validate(n, config.kappa_b)?;
            Ok(b)
        })
        .collect::<Result<_>>()?;
    let rng_seed = config.seed ^ hierarchy.noise().seed().rotate_left(32);
    let mut run = Run {
        hierarchy,
        config,
        floors,
        hessians,
        ledger: CostLedger::new(r),
        trace: Vec::new(),
        invariants: InvariantReport::default(),
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
        monitor,
    };
    let weights = WeightState::new(
        config.weight_kind,
        config.mu,
        config.nu(),
        run.floors[r - 1].clone(),
    )?;
    let outcome = run.mofftr(LevelCall {
        level: r,
        model: None,
        x0: x0.clone(),
        eps: config.eps_top,
        i_max: config.i_max[r - 1],
        delta: f64::INFINITY,
        weights,
        new_cond_threshold: None,
    })?;
    Ok(SolveOutcome {
        x: outcome.x,
        trace: run.trace,
        ledger: run.ledger,
        status: outcome.status,
        invariants: run.invariants,
    })
}

struct LevelCall<'m> {
    level: usize,
    model: Option<&'m CoherentModel>,
    x0: DVector<f64>,
    eps: f64,
    i_max: usize,
    delta: f64,
    weights: WeightState,
    /// `κ_R Σ g²/w` of the calling iteration when strict descent monitoring
    /// is on.
    new_cond_threshold: Option<f64>,
}

struct LevelOutcome {
    x: DVector<f64>,
    /// Completed iterations whose step is part of the returned point.
    iterations: usize,
    status: SolveStatus,
}

struct Run<'a, 'm, 'f> {
    hierarchy: &'a LevelHierarchy,
    config: &'a SolverConfig,
    floors: Vec<DVector<f64>>,
    hessians: Vec<HessianModel>,
    ledger: CostLedger,
    trace: Vec<IterationRecord>,
    invariants: InvariantReport,
    rng: ChaCha8Rng,
    monitor: Option<&'m mut TopMonitor<'f>>,
}

const REL_TOL: f64 = 1e-12;

impl Run<'_, '_, '_> {
    fn gradient(
        &mut self,
        level: usize,
        model: Option<&CoherentModel>,
        x: &DVector<f64>,
        i: usize,
    ) -> Result<DVector<f64>> {
        if let Some(m) = model {
            if i == 0 {
                // Evaluated when the model was built.
                return Ok(m.anchor_gradient().clone());
            }
        }
        let (base, fraction) = self.hierarchy.sample_gradient(level, x, &mut self.rng)?;
        self.ledger.charge(level, fraction);
        if !base.norm().is_finite() {
            return Err(MoffoError::Numerical(format!(
                "non-finite gradient at level {level}, iteration {i}"
            )));
        }
        Ok(match model {
            Some(m) => m.gradient_from_base(base),
            None => base,
        })
    }

    fn diagnostic_value(
        &self,
        level: usize,
        model: Option<&CoherentModel>,
        x: &DVector<f64>,
    ) -> Option<f64> {
        if !self.config.diagnostics {
            return None;
        }
        let base = self.hierarchy.objective(level).value(x)?;
        Some(match model {
            Some(m) => m.value_from_base(base, x),
            None => base,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        level: usize,
        iter: usize,
        kind: StepKind,
        g: &DVector<f64>,
        step_norm: f64,
        delta_hat_norm: f64,
        delta_norm: f64,
        w: Option<&DVector<f64>>,
        f_diag: Option<f64>,
    ) {
        let (w_min, w_max) = w.map_or((f64::NAN, f64::NAN), |w| (w.min(), w.max()));
        self.trace.push(IterationRecord {
            level,
            iter,
            kind,
            grad_norm: g.norm(),
            step_norm,
            delta_hat_norm,
            delta_norm,
            w_min,
            w_max,
            cost_cum: self.ledger.total(),
            f_diag,
        });
    }

    fn mofftr(&mut self, call: LevelCall<'_>) -> Result<LevelOutcome> {
        let LevelCall {
            level,
            model,
            x0,
            mut eps,
            i_max,
            delta,
            mut weights,
            new_cond_threshold,
        } = call;
        let config = self.config;
        let r = self.hierarchy.depth();
        let is_top = level == r;
        let upper_op = if is_top {
            None
        } else {
            Some(self.hierarchy.transfer(level + 1).expect("level below top has an operator").clone())
        };
        let p_up_norm = upper_op.as_ref().map_or(1.0, |op| op.norm());

        let mut x = x0.clone();
        let mut x_prev: Option<DVector<f64>> = None;
        let mut i = 0usize;
        loop {
            // Step 1: termination tests.
            if let Some(op) = &upper_op {
                let moved = op.prolong(&(&x - &x0))?.norm();
                if moved > delta {
                    assert!(i > 0, "size condition cannot fail at the starting point");
                    let x_back = x_prev.take().expect("previous iterate exists for i > 0");
                    self.check_returned_point(op, &x_back, &x0, delta)?;
                    return Ok(LevelOutcome {
                        x: x_back,
                        iterations: i - 1,
                        status: SolveStatus::Converged,
                    });
                }
                if let Some(prev) = &x_prev {
                    let jump = op.prolong(&(&x - prev))?.norm();
                    if jump > 2.0 * delta * (1.0 + REL_TOL) {
                        self.invariants.step_cap_violations += 1;
                    }
                }
            }
            if is_top {
                if let Some(monitor) = self.monitor.as_mut() {
                    if monitor(&x) {
                        return Ok(LevelOutcome {
                            x,
                            iterations: i,
                            status: SolveStatus::Stopped,
                        });
                    }
                }
            }
            let g = self.gradient(level, model, &x, i)?;
            if is_top && i == 0 {
                if let Some(rel) = config.eps_top_relative {
                    eps = rel * g.norm();
                }
            }
            let f_diag = self.diagnostic_value(level, model, &x);
            let converged = g.norm() <= eps;
            if converged || i == i_max {
                self.record(level, i, StepKind::Final, &g, 0.0, f64::NAN, f64::NAN, None, f_diag);
                return Ok(LevelOutcome {
                    x,
                    iterations: i,
                    status: if converged {
                        SolveStatus::Converged
                    } else {
                        SolveStatus::MaxIterations
                    },
                });
            }

            // Step 2: weights and trust region.
            let w = weights.update(&g)?;
            if !w.iter().all(|v| v.is_finite()) {
                return Err(MoffoError::Numerical(format!(
                    "weights overflowed at level {level}, iteration {i}"
                )));
            }
            let tr = compute_radius_scaled(&w, &g, is_top, delta, p_up_norm, config.step_scale)?;
            let radius_norm = tr.radius.norm();
            if let Some(threshold) = new_cond_threshold {
                if weighted_decrease(&g, &w) < threshold {
                    self.record(
                        level,
                        i,
                        StepKind::Final,
                        &g,
                        0.0,
                        tr.raw_radius.norm(),
                        radius_norm,
                        Some(&w),
                        f_diag,
                    );
                    if let Some(op) = &upper_op {
                        self.check_returned_point(op, &x, &x0, delta)?;
                    }
                    return Ok(LevelOutcome {
                        x,
                        iterations: i,
                        status: SolveStatus::Converged,
                    });
                }
            }

            // Step 3: recursion, possibly vetoed.
            let mut step = None;
            if radius_norm > 0.0
                && cycle_shape(level, i, config.pre_smooth, config.post_smooth)
                    == CycleAction::TryRecursive
            {
                step = self.try_recursive_step(level, &x, &g, &w, radius_norm)?;
            }
            let kind = if step.is_some() {
                self.invariants.recursive_iterations += 1;
                StepKind::Recursive
            } else {
                self.invariants.taylor_iterations += 1;
                StepKind::Taylor
            };

            // Step 4: Taylor step.
            let s = match step {
                Some(s) => s,
                None => {
                    let b = &self.hessians[level - 1];
                    let s = taylor_step(&g, &tr.radius, b, config.tau, config.refine_taylor)?;
                    let varsigma_min = self.floors[level - 1].min();
                    let holds = |w: &DVector<f64>| {
                        linear_decrease_bound_holds(
                            &g,
                            &s,
                            w,
                            &tr.radius,
                            config.tau,
                            varsigma_min,
                            config.kappa_b,
                        )
                    };
                    if !holds(&w) {
                        let shrink = radius_norm / tr.raw_radius.norm();
                        if shrink < 1.0 && holds(&(&w / shrink)) {
                            self.invariants.capped_decrease_gaps += 1;
                        } else {
                            self.invariants.linear_decrease_violations += 1;
                        }
                    }
                    s
                }
            };
            let allowed = config.alpha * config.step_scale * g.component_div(&w).norm();
            if s.norm() > allowed * (1.0 + REL_TOL) {
                self.invariants.step_norm_violations += 1;
            }
            self.record(
                level,
                i,
                kind,
                &g,
                s.norm(),
                tr.raw_radius.norm(),
                radius_norm,
                Some(&w),
                f_diag,
            );

            // Step 5.
            let next = &x + &s;
            x_prev = Some(std::mem::replace(&mut x, next));
            i += 1;
        }
    }

    fn check_returned_point(
        &mut self,
        op: &crate::hierarchy::TransferOperator,
        x: &DVector<f64>,
        x0: &DVector<f64>,
        delta: f64,
    ) -> Result<()> {
        if op.prolong(&(x - x0))?.norm() > delta * (1.0 + REL_TOL) {
            self.invariants.returned_point_violations += 1;
        }
        Ok(())
    }

    /// Step 3 at iteration `(level, i)`. Returns the prolonged lower-level
    /// step, or `None` when the recursion is vetoed.
    fn try_recursive_step(
        &mut self,
        level: usize,
        x: &DVector<f64>,
        g: &DVector<f64>,
        w: &DVector<f64>,
        radius_norm: f64,
    ) -> Result<Option<DVector<f64>>> {
        let config = self.config;
        let op = self
            .hierarchy
            .transfer(level)
            .expect("levels above 1 have an operator")
            .clone();
        let lower = level - 1;
        let rg = op.restrict(g)?;
        let floors_low = self.floors[lower - 1].clone();
        let mut w_low = match config.weight_kind {
            WeightKind::Maxgi => {
                init_lower_divergent(&floors_low, op.norm(), &rg, config.alpha, radius_norm, w.min())?
            }
            WeightKind::AdagradLike => {
                init_lower_adagrad(&floors_low, op.norm(), &rg, config.alpha, radius_norm, w.norm())?
            }
        };
        if config.step_scale > 1.0 {
            // Keeps the first scaled lower step inside the lower-level ball.
            w_low *= config.step_scale;
        }

        let low_radius = rg.component_div(&w_low).abs().norm();
        if low_radius > config.alpha * radius_norm / op.norm() * (1.0 + REL_TOL) {
            self.invariants.lower_radius_violations += 1;
        }
        let grows = match config.weight_kind {
            WeightKind::Maxgi => w_low.min() >= w.min() * (1.0 - REL_TOL),
            WeightKind::AdagradLike => w_low.norm() >= w.norm() * (1.0 - REL_TOL),
        };
        if !grows {
            self.invariants.weight_growth_violations += 1;
        }

        if !should_recurse(&rg, &w_low, g, w, config.kappa_r) {
            self.invariants.vetoed_recursions += 1;
            return Ok(None);
        }

        let delta_low = config.alpha * radius_norm;
        let x_low0 = op.restrict(x)?;
        let (base, fraction) = self.hierarchy.sample_gradient(lower, &x_low0, &mut self.rng)?;
        self.ledger.charge(lower, fraction);
        let model = match config.weak_coherence {
            None => {
                let model = build_coherent_model(&base, &x_low0, g, &op)?;
                let rebuilt = model.gradient_from_base(base);
                let err = (&rebuilt - &rg).norm() / (1.0 + rg.norm());
                self.invariants.max_coherence_error = self.invariants.max_coherence_error.max(err);
                model
            }
            Some(kappa_e) => {
                let defect = (&rg - &base).norm();
                if !coherence_defect_ok(defect, delta_low, kappa_e) {
                    self.invariants.vetoed_recursions += 1;
                    return Ok(None);
                }
                CoherentModel::uncorrected(x_low0.clone(), base)
            }
        };

        let g_low0 = model.anchor_gradient().clone();
        let weights = seed_lower_state(
            config.weight_kind,
            config.mu,
            config.nu(),
            floors_low,
            w_low,
            &g_low0,
        )?;
        let new_cond_threshold = config
            .strict_descent_monitoring
            .then(|| config.kappa_r * weighted_decrease(g, w));
        let outcome = self.mofftr(LevelCall {
            level: lower,
            model: Some(&model),
            x0: x_low0.clone(),
            eps: config.lower_eps_factor * rg.norm(),
            i_max: config.i_max[lower - 1],
            delta: delta_low,
            weights,
            new_cond_threshold,
        })?;
        if outcome.iterations == 0 {
            self.invariants.first_lower_iterate_rejections += 1;
        }
        self.invariants.retained_lower_iterations.push(outcome.iterations);
        Ok(Some(op.prolong(&(outcome.x - x_low0))?))
    }
}
