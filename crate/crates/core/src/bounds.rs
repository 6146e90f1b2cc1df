//! Complexity constants and convergence-rate checks on solver traces.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{MoffoError, Result};
use crate::hierarchy::Objective;

/// Inputs of the level recursion for `β₁`, `β₂`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BetaParams {
    pub tau: f64,
    pub varsigma_min: f64,
    pub kappa_b: f64,
    pub kappa_r: f64,
    pub omega: f64,
    pub alpha: f64,
    pub lipschitz: f64,
    /// `i_ℓ^(max)` for `ℓ = 1..=r`.
    pub i_max: Vec<usize>,
    /// `σ_min[P_ℓ]` for `ℓ = 2..=r`.
    pub sigma_min: Vec<f64>,
}

/// `(β_{1,ℓ}, β_{2,ℓ})` for `ℓ = 1..=r`.
pub fn beta_recursion(p: &BetaParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = p.i_max.len();
    if r == 0 {
        return Err(MoffoError::InvalidDimension("at least one level is required".to_string()));
    }
    if p.sigma_min.len() + 1 != r {
        return Err(MoffoError::ShapeMismatch {
            expected: r - 1,
            actual: p.sigma_min.len(),
            context: "sigma_min per transfer operator",
        });
    }
    if p.sigma_min.iter().any(|&s| !(s > 0.0)) {
        return Err(MoffoError::Domain("transfer operators must have full rank".to_string()));
    }
    let om = p.omega.max(1.0);
    let mut beta1 = vec![p.tau * p.varsigma_min / (2.0 * p.kappa_b)];
    let mut beta2 = vec![p.kappa_b];
    for l in 1..r {
        let b1 = beta1[l - 1];
        let b2 = beta2[l - 1];
        beta1.push(p.kappa_r / om * b1);
        let s = p.sigma_min[l - 1];
        let grown =
            2.0 * p.alpha * p.alpha * p.i_max[l - 1] as f64 * (b2 + p.lipschitz) / (om * s * s);
        beta2.push(b2.max(grown));
    }
    Ok((beta1, beta2))
}

/// Lower branch `W₋₁` of the Lambert function on `[−1/e, 0)`.
pub fn lambert_w_minus1(x: f64) -> Result<f64> {
    let e = std::f64::consts::E;
    if !(x < 0.0) || !x.is_finite() {
        return Err(MoffoError::Domain(format!("W_-1 needs x in [-1/e, 0), got {x}")));
    }
    let d = 1.0 + e * x;
    if d < -4.0 * f64::EPSILON {
        return Err(MoffoError::Domain(format!("W_-1 needs x >= -1/e, got {x}")));
    }
    if d <= 0.0 {
        return Ok(-1.0);
    }
    let f = |w: f64| w * w.exp() - x;
    // On w ≤ −1, w·e^w decreases from 0⁻ to −1/e, so f > 0 below the root.
    let mut hi: f64 = -1.0;
    let mut w = if d < 0.1 {
        let p = -(2.0 * d).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else {
        let l = (-x).ln();
        l - (-l).ln()
    };
    w = w.min(-1.0 - f64::EPSILON);
    let mut lo = w.min(-2.0);
    while f(lo) <= 0.0 {
        lo *= 2.0;
        if !lo.is_finite() {
            return Err(MoffoError::Numerical("W_-1 bracket expansion failed".to_string()));
        }
    }
    for _ in 0..200 {
        let fw = f(w);
        if fw.abs() <= 1e-14 * x.abs() {
            return Ok(w);
        }
        if fw > 0.0 {
            lo = lo.max(w);
        } else {
            hi = hi.min(w);
        }
        let ew = w.exp();
        let denom = ew * (w + 1.0) - (w + 2.0) * fw / (2.0 * w + 2.0);
        let mut next = w - fw / denom;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if next == w || (hi - lo) <= 4.0 * f64::EPSILON * w.abs() {
            return Ok(next);
        }
        w = next;
    }
    Err(MoffoError::Numerical(format!("W_-1 did not converge at x = {x}")))
}

/// Checks `|W₋₁(−e^{−x−1})| ≤ 1 + √(2x) + x`.
pub fn lambert_bound_check(x: f64) -> Result<bool> {
    if !(x > 0.0) {
        return Err(MoffoError::Domain(format!("bound check needs x > 0, got {x}")));
    }
    let w = lambert_w_minus1(-(-x - 1.0).exp())?;
    Ok(w.abs() <= 1.0 + (2.0 * x).sqrt() + x)
}

/// `ψ = 4 max[3β₁/2, n(β₂ + L/2)] / (β₁ √ς)`.
pub fn psi(n: usize, beta1: f64, beta2: f64, lipschitz: f64, varsigma: f64) -> f64 {
    let m = (1.5 * beta1).max(n as f64 * (beta2 + 0.5 * lipschitz));
    4.0 * m / (beta1 * varsigma.sqrt())
}

/// Problem and level constants entering `κ*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateInputs {
    pub n: usize,
    pub varsigma: f64,
    pub gamma0: f64,
    pub lipschitz: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// Bound `κ*` on `Σ_{k≤i} ‖g_{r,k}‖²` for AdaGrad-like weights.
pub fn kappa_star(mu: f64, c: &RateInputs) -> Result<f64> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(MoffoError::Domain(format!("mu must lie in (0,1), got {mu}")));
    }
    let n = c.n as f64;
    let half = n * (c.beta2 + 0.5 * c.lipschitz);
    let value = if (mu - 0.5).abs() < 1e-15 {
        let exp_term = 0.5 * (2.0 * c.gamma0 / half).exp();
        let p = psi(c.n, c.beta1, c.beta2, c.lipschitz, c.varsigma);
        let lambert_term = if p.is_finite() {
            let w = lambert_w_minus1(-1.0 / p)?;
            0.5 * c.varsigma * p * p * w * w
        } else {
            f64::INFINITY
        };
        c.varsigma.max(exp_term).max(lambert_term)
    } else if mu < 0.5 {
        let a = (4.0 * half / (c.beta1 * (1.0 - 2.0 * mu))).powf(1.0 / mu);
        let b = 0.5 * ((1.0 - 2.0 * mu) * c.gamma0 / half).powf(1.0 / (1.0 - 2.0 * mu));
        c.varsigma.max(a).max(b)
    } else {
        let inner = c.gamma0
            + n * (c.beta2 + c.lipschitz) * c.varsigma.powf(1.0 - 2.0 * mu) / (2.0 * mu - 1.0);
        let a = (2f64.powf(mu) / c.beta1 * inner).powf(1.0 / (1.0 - mu));
        c.varsigma.max(a)
    };
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DivergentThresholds {
    pub vartheta: f64,
    pub i_theta: f64,
    pub i_sigma: f64,
    pub kappa_diamond: f64,
}

/// Largest number of explicit terms summed for a user-supplied `a(k)`.
const MAX_EXPLICIT_TERMS: f64 = 1e7;

/// `i_ϑ`, `i_ς` and `κ_⋄` for divergent weights. `a_func = None` means
/// `a(k) = 1`, whose sum is evaluated in closed form.
#[allow(clippy::too_many_arguments)]
pub fn divergent_thresholds(
    vartheta: f64,
    mu: f64,
    nu: f64,
    varsigma_min: f64,
    alpha: f64,
    c: &RateInputs,
    a_func: Option<&dyn Fn(usize) -> f64>,
) -> Result<DivergentThresholds> {
    if !(vartheta > 0.0 && vartheta < c.beta1 - 1e-9 * c.beta1.max(1e-300)) {
        return Err(MoffoError::Domain(format!(
            "vartheta must lie in (0, beta1 = {}), got {vartheta}",
            c.beta1
        )));
    }
    if !(mu > 0.0 && mu < 1.0 && nu > 0.0) {
        return Err(MoffoError::Domain("mu in (0,1) and nu > 0 required".to_string()));
    }
    let growth = c.beta2 + 0.5 * alpha * alpha * c.lipschitz;
    let i_theta = (growth / (varsigma_min * (c.beta1 - vartheta))).powf(1.0 / nu) - 1.0;
    let terms = if i_theta < 0.0 { 0.0 } else { i_theta.floor() + 1.0 };
    let a_sum = match a_func {
        None => terms,
        Some(a) => {
            if terms > MAX_EXPLICIT_TERMS {
                return Err(MoffoError::Numerical(format!(
                    "{terms} explicit a(k) terms exceed the evaluation cap"
                )));
            }
            (0..terms as usize).map(|k| a(k) * a(k)).sum()
        }
    };
    let kappa_diamond = 2.0 / vartheta * (c.gamma0 + c.n as f64 * growth * a_sum);
    let i_sigma = (2.0 * (i_theta + 1.0) * kappa_diamond / varsigma_min).powf(1.0 / (1.0 - mu));
    Ok(DivergentThresholds {
        vartheta,
        i_theta,
        i_sigma,
        kappa_diamond,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCheck {
    pub status: CheckStatus,
    /// Largest ratio of observed quantity to its bound (AdaGrad check).
    pub max_ratio: Option<f64>,
    /// Smallest subsequence ratio (divergent check).
    pub min_ratio: Option<f64>,
    /// First top-level iteration where the ratio exceeded one.
    pub first_violation: Option<usize>,
    pub iterations: usize,
}

/// `Σ_{k≤i} ‖g_{r,k}‖² ≤ κ*` at every top-level `i`.
pub fn check_adagrad_rate(grad_norms: &[f64], kappa_star: f64) -> RateCheck {
    let mut sum = 0.0;
    let mut max_ratio: f64 = 0.0;
    let mut first_violation = None;
    for (i, g) in grad_norms.iter().enumerate() {
        sum += g * g;
        let ratio = sum / kappa_star;
        if ratio > 1.0 && first_violation.is_none() {
            first_violation = Some(i);
        }
        max_ratio = max_ratio.max(ratio);
    }
    RateCheck {
        status: if first_violation.is_none() {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        max_ratio: Some(max_ratio),
        min_ratio: None,
        first_violation,
        iterations: grad_norms.len(),
    }
}

/// `min_i min_{k∈(i_ς,i]} ‖g_{r,k}‖² (i − i_ϑ)/(κ_⋄ (i+1)^μ)` over
/// `i > max(i_ϑ, i_ς)`. Inconclusive when the trace never passes `i_ς`.
pub fn check_divergent_rate(grad_norms: &[f64], t: &DivergentThresholds, mu: f64) -> RateCheck {
    let start = t.i_sigma.max(t.i_theta);
    let mut running_min = f64::INFINITY;
    let mut min_ratio = f64::INFINITY;
    let mut seen = false;
    for (i, g) in grad_norms.iter().enumerate() {
        let fi = i as f64;
        if fi <= t.i_sigma {
            continue;
        }
        running_min = running_min.min(g * g);
        if fi <= start {
            continue;
        }
        seen = true;
        let ratio = running_min * (fi - t.i_theta) / (t.kappa_diamond * (fi + 1.0).powf(mu));
        min_ratio = min_ratio.min(ratio);
    }
    let status = if !seen {
        CheckStatus::Inconclusive
    } else if min_ratio <= 1.0 {
        CheckStatus::Pass
    } else {
        CheckStatus::Fail
    };
    RateCheck {
        status,
        max_ratio: None,
        min_ratio: seen.then_some(min_ratio),
        first_violation: None,
        iterations: grad_norms.len(),
    }
}

/// Gradient Lipschitz constant: `exact` when known, otherwise twice the
/// largest difference quotient over 1000 seeded random pairs drawn from the
/// box `center ± radius`.
pub fn estimate_lipschitz(
    objective: &dyn Objective,
    exact: Option<f64>,
    center: &DVector<f64>,
    radius: f64,
    seed: u64,
) -> Result<f64> {
    if let Some(l) = exact {
        return Ok(l);
    }
    Ok(2.0 * max_difference_quotient(objective, center, radius, seed, 1000)?)
}

pub fn max_difference_quotient(
    objective: &dyn Objective,
    center: &DVector<f64>,
    radius: f64,
    seed: u64,
    pairs: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = objective.dim();
    let draw = |rng: &mut ChaCha8Rng| {
        DVector::from_fn(n, |j, _| center[j] + radius * rng.random_range(-1.0..=1.0))
    };
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let x = draw(&mut rng);
        let y = draw(&mut rng);
        let dx = (&x - &y).norm();
        if dx == 0.0 {
            continue;
        }
        let dg = (objective.gradient(&x)? - objective.gradient(&y)?).norm();
        best = best.max(dg / dx);
    }
    Ok(best)
}

/// All constants of the rate theorems for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryConstants {
    pub lipschitz: f64,
    pub gamma0: f64,
    pub f_low: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub kappa_star: Option<f64>,
    pub psi: f64,
    pub i_theta: Option<f64>,
    pub i_sigma: Option<f64>,
    pub kappa_diamond: Option<f64>,
    pub vartheta: Option<f64>,
    pub n: usize,
    pub r: usize,
    pub alpha: f64,
    pub omega: f64,
    pub tau: f64,
    pub varsigma_min: f64,
    pub kappa_b: f64,
    pub kappa_r: f64,
    pub mu: f64,
    pub nu: f64,
    pub i_max: Vec<usize>,
    pub sigma_min: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryInputs {
    pub beta: BetaParams,
    pub n: usize,
    pub f0: f64,
    pub f_low: f64,
    pub mu: f64,
    pub nu: f64,
    /// Defaults to `β_{1,r}/2`.
    pub vartheta: Option<f64>,
}

impl TheoryConstants {
    /// Evaluates every constant. `κ*` is always evaluated; the divergent
    /// thresholds are filled when `ν ≤ μ`.
    pub fn compute(inputs: &TheoryInputs) -> Result<Self> {
        let (beta1, beta2) = beta_recursion(&inputs.beta)?;
        let r = beta1.len();
        let b = &inputs.beta;
        let rate = RateInputs {
            n: inputs.n,
            varsigma: b.varsigma_min,
            gamma0: inputs.f0 - inputs.f_low,
            lipschitz: b.lipschitz,
            beta1: beta1[r - 1],
            beta2: beta2[r - 1],
        };
        if !(rate.gamma0 >= 0.0) {
            return Err(MoffoError::Domain(format!(
                "f(x0) - f_low must be nonnegative, got {}",
                rate.gamma0
            )));
        }
        let kappa_star = kappa_star(inputs.mu, &rate)?;
        let divergent = if inputs.nu <= inputs.mu {
            let vartheta = inputs.vartheta.unwrap_or(0.5 * rate.beta1);
            Some(divergent_thresholds(
                vartheta,
                inputs.mu,
                inputs.nu,
                b.varsigma_min,
                b.alpha,
                &rate,
                None,
            )?)
        } else {
            None
        };
        Ok(Self {
            lipschitz: b.lipschitz,
            gamma0: rate.gamma0,
            f_low: inputs.f_low,
            psi: psi(inputs.n, rate.beta1, rate.beta2, b.lipschitz, b.varsigma_min),
            beta1,
            beta2,
            kappa_star: Some(kappa_star),
            i_theta: divergent.map(|d| d.i_theta),
            i_sigma: divergent.map(|d| d.i_sigma),
            kappa_diamond: divergent.map(|d| d.kappa_diamond),
            vartheta: divergent.map(|d| d.vartheta),
            n: inputs.n,
            r,
            alpha: b.alpha,
            omega: b.omega,
            tau: b.tau,
            varsigma_min: b.varsigma_min,
            kappa_b: b.kappa_b,
            kappa_r: b.kappa_r,
            mu: inputs.mu,
            nu: inputs.nu,
            i_max: b.i_max.clone(),
            sigma_min: b.sigma_min.clone(),
        })
    }

    pub fn rate_inputs(&self) -> RateInputs {
        RateInputs {
            n: self.n,
            varsigma: self.varsigma_min,
            gamma0: self.gamma0,
            lipschitz: self.lipschitz,
            beta1: self.beta1[self.r - 1],
            beta2: self.beta2[self.r - 1],
        }
    }

    pub fn divergent(&self) -> Option<DivergentThresholds> {
        Some(DivergentThresholds {
            vartheta: self.vartheta?,
            i_theta: self.i_theta?,
            i_sigma: self.i_sigma?,
            kappa_diamond: self.kappa_diamond?,
        })
    }
}
