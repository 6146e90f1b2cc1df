//! Componentwise trust regions and Taylor steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, MoffoError, Result};

/// Radius `Δ` actually used, the uncapped `Δ̂ = D(w)|g|` and the level cap.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegion {
    pub radius: DVector<f64>,
    pub raw_radius: DVector<f64>,
    /// `δ_ℓ`, infinite at the top level.
    pub cap: f64,
}

/// Symmetric Hessian approximation with its declared bound `κ_B`.
#[derive(Debug, Clone, PartialEq)]
pub enum HessianModel {
    Zero,
    Diagonal(DVector<f64>),
    Explicit(DMatrix<f64>),
}

impl HessianModel {
    /// Spectral norm (exact for zero and diagonal models).
    pub fn norm(&self) -> f64 {
        match self {
            HessianModel::Zero => 0.0,
            HessianModel::Diagonal(d) => d.amax(),
            HessianModel::Explicit(b) => b.clone().symmetric_eigenvalues().amax(),
        }
    }

    pub fn quadratic_form(&self, s: &DVector<f64>) -> f64 {
        match self {
            HessianModel::Zero => 0.0,
            HessianModel::Diagonal(d) => s.iter().zip(d.iter()).map(|(sj, dj)| dj * sj * sj).sum(),
            HessianModel::Explicit(b) => s.dot(&(b * s)),
        }
    }

    fn diagonal(&self, n: usize) -> DVector<f64> {
        match self {
            HessianModel::Zero => DVector::zeros(n),
            HessianModel::Diagonal(d) => d.clone(),
            HessianModel::Explicit(b) => b.diagonal(),
        }
    }

    /// Checks symmetry, shape and `‖B‖ ≤ κ_B`.
    pub fn validate(&self, n: usize, kappa_b: f64) -> Result<()> {
        if !(kappa_b >= 1.0) {
            return Err(MoffoError::Domain(format!("kappa_B must be at least 1, got {kappa_b}")));
        }
        match self {
            HessianModel::Zero => {}
            HessianModel::Diagonal(d) => check_len(n, d.len(), "diagonal Hessian")?,
            HessianModel::Explicit(b) => {
                check_len(n, b.nrows(), "Hessian rows")?;
                check_len(n, b.ncols(), "Hessian columns")?;
                if (b - b.transpose()).amax() > 1e-12 * (1.0 + b.amax()) {
                    return Err(MoffoError::Domain("Hessian approximation is not symmetric".to_string()));
                }
            }
        }
        let norm = self.norm();
        if norm > kappa_b * (1.0 + 1e-12) {
            return Err(MoffoError::Domain(format!(
                "Hessian norm {norm} exceeds kappa_B = {kappa_b}"
            )));
        }
        Ok(())
    }
}

/// `Δ̂_j = |g_j|/w_j`; below the top level the radius is shrunk to
/// `min(2δ/(‖P‖‖Δ̂‖), 1)·Δ̂`.
pub fn compute_radius(
    w: &DVector<f64>,
    g: &DVector<f64>,
    is_top: bool,
    delta: f64,
    p_up_norm: f64,
) -> Result<TrustRegion> {
    compute_radius_scaled(w, g, is_top, delta, p_up_norm, 1.0)
}

/// As [`compute_radius`] with `Δ̂` multiplied by `step_scale` before capping.
pub fn compute_radius_scaled(
    w: &DVector<f64>,
    g: &DVector<f64>,
    is_top: bool,
    delta: f64,
    p_up_norm: f64,
    step_scale: f64,
) -> Result<TrustRegion> {
    check_len(w.len(), g.len(), "weights vs gradient")?;
    if w.iter().any(|&wj| !(wj > 0.0)) {
        return Err(MoffoError::Domain("weights must be positive".to_string()));
    }
    let raw_radius = g.zip_map(w, |gj, wj| step_scale * gj.abs() / wj);
    if is_top {
        return Ok(TrustRegion {
            radius: raw_radius.clone(),
            raw_radius,
            cap: f64::INFINITY,
        });
    }
    if !(delta > 0.0) {
        return Err(MoffoError::Domain(format!("lower-level cap must be positive, got {delta}")));
    }
    let raw_norm = raw_radius.norm();
    let shrink = if raw_norm > 0.0 {
        (2.0 * delta / (p_up_norm * raw_norm)).min(1.0)
    } else {
        1.0
    };
    Ok(TrustRegion {
        radius: &raw_radius * shrink,
        raw_radius,
        cap: delta,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Minimizer of `gᵀs` over the box `|s_j| ≤ Δ_j`.
pub fn linear_step(g: &DVector<f64>, radius: &DVector<f64>) -> DVector<f64> {
    g.zip_map(radius, |gj, dj| -sign(gj) * dj)
}

/// Scaled linear step `γ s_L` minimizing the quadratic model along `s_L`.
pub fn cauchy_step(g: &DVector<f64>, radius: &DVector<f64>, b: &HessianModel) -> DVector<f64> {
    let s_l = linear_step(g, radius);
    let curvature = b.quadratic_form(&s_l);
    let gamma = if curvature > 0.0 {
        (g.dot(&s_l).abs() / curvature).min(1.0)
    } else {
        1.0
    };
    s_l * gamma
}

pub fn model_decrease(g: &DVector<f64>, s: &DVector<f64>, b: &HessianModel) -> f64 {
    g.dot(s) + 0.5 * b.quadratic_form(s)
}

/// A step inside the box whose model value is at most `τ` times that of the
/// Cauchy step. With `refine` a single projected Newton sweep on the diagonal
/// of `B` is tried and kept only when it does better than `s_Q`.
pub fn taylor_step(
    g: &DVector<f64>,
    radius: &DVector<f64>,
    b: &HessianModel,
    tau: f64,
    refine: bool,
) -> Result<DVector<f64>> {
    check_len(g.len(), radius.len(), "gradient vs radius")?;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(MoffoError::Domain(format!("tau must lie in (0,1], got {tau}")));
    }
    let s_q = cauchy_step(g, radius, b);
    let target = tau * model_decrease(g, &s_q, b);
    let mut step = s_q.clone();
    if refine {
        let d = b.diagonal(g.len());
        let candidate = DVector::from_iterator(
            g.len(),
            (0..g.len()).map(|j| {
                let full = if d[j] > 0.0 { -g[j] / d[j] } else { -sign(g[j]) * radius[j] };
                full.clamp(-radius[j], radius[j])
            }),
        );
        if model_decrease(g, &candidate, b) < model_decrease(g, &s_q, b) {
            step = candidate;
        }
    }
    let achieved = model_decrease(g, &step, b);
    let box_ok = step
        .iter()
        .zip(radius.iter())
        .all(|(sj, dj)| sj.abs() <= *dj);
    // Bug trap: the Cauchy step meets both conditions by construction.
    assert!(
        box_ok && achieved <= target + 1e-14 * target.abs().max(1e-300),
        "Taylor step violates the box or model decrease condition"
    );
    Ok(step)
}

/// `Σ_j g_j²/w_j`, the linear decrease measure used throughout.
pub fn weighted_decrease(g: &DVector<f64>, w: &DVector<f64>) -> f64 {
    g.iter().zip(w.iter()).map(|(gj, wj)| gj * gj / wj).sum()
}

/// `gᵀs ≤ -(τς_min/2κ_B) Σ g_j²/w_j + (κ_B/2)‖Δ‖²`.
pub fn linear_decrease_bound_holds(
    g: &DVector<f64>,
    s: &DVector<f64>,
    w: &DVector<f64>,
    radius: &DVector<f64>,
    tau: f64,
    varsigma_min: f64,
    kappa_b: f64,
) -> bool {
    let lhs = g.dot(s);
    let rhs = -(tau * varsigma_min / (2.0 * kappa_b)) * weighted_decrease(g, w)
        + 0.5 * kappa_b * radius.norm_squared();
    lhs <= rhs + 1e-12 * (lhs.abs() + rhs.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn top_level_radius() {
        let tr = compute_radius(&v(&[2.0, 4.0]), &v(&[1.0, -2.0]), true, 0.0, 1.0).unwrap();
        assert_eq!(tr.radius, v(&[0.5, 0.5]));
        assert_eq!(tr.raw_radius, tr.radius);
        assert!(tr.cap.is_infinite());
    }

    #[test]
    fn lower_level_radius_is_capped() {
        let tr = compute_radius(&v(&[2.0, 4.0]), &v(&[1.0, 2.0]), false, 0.1, 1.0).unwrap();
        let scale = 0.2 / 0.5f64.sqrt();
        assert!((scale - 0.28284).abs() < 1e-5);
        for j in 0..2 {
            assert!((tr.radius[j] - 0.5 * scale).abs() < 1e-15);
            assert!((tr.radius[j] - 0.141421).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_radius() {
        let tr = compute_radius(&v(&[1.0, 1.0]), &v(&[0.0, 0.0]), false, 0.1, 1.0).unwrap();
        assert_eq!(tr.radius, v(&[0.0, 0.0]));
        assert!(compute_radius(&v(&[0.0]), &v(&[1.0]), true, 0.0, 1.0).is_err());
    }

    #[test]
    fn linear_and_cauchy_steps() {
        assert_eq!(linear_step(&v(&[1.0, -2.0]), &v(&[0.5, 0.5])), v(&[-0.5, 0.5]));
        assert_eq!(linear_step(&v(&[0.0, 0.0]), &v(&[0.5, 0.5])), v(&[0.0, 0.0]));

        let id = HessianModel::Explicit(DMatrix::identity(2, 2));
        let s = cauchy_step(&v(&[1.0, -2.0]), &v(&[1.0, 1.0]), &id);
        assert_eq!(s, v(&[-1.0, 1.0]));
        let s = cauchy_step(&v(&[1.0, -2.0]), &v(&[1.0, 1.0]), &HessianModel::Zero);
        assert_eq!(s, v(&[-1.0, 1.0]));
        let s = cauchy_step(&v(&[1.0]), &v(&[1.0]), &HessianModel::Diagonal(v(&[4.0])));
        assert_eq!(s, v(&[-0.25]));
    }

    #[test]
    fn cauchy_step_with_unit_curvature_ratio() {
        // Δ = (1, 2): s_L = (-1, 2), s_LᵀBs_L = 5 = |gᵀs_L| → γ = 1.
        let id = HessianModel::Explicit(DMatrix::identity(2, 2));
        let s = cauchy_step(&v(&[1.0, -2.0]), &v(&[1.0, 2.0]), &id);
        assert_eq!(s, v(&[-1.0, 2.0]));
    }

    #[test]
    fn linear_step_minimizes_over_box_corners() {
        let g = v(&[0.3, -1.2, 2.0]);
        let radius = v(&[0.5, 0.25, 1.5]);
        let s = linear_step(&g, &radius);
        let mut best = f64::INFINITY;
        for mask in 0..8u32 {
            let corner = DVector::from_iterator(
                3,
                (0..3).map(|j| if mask >> j & 1 == 1 { radius[j] } else { -radius[j] }),
            );
            best = best.min(g.dot(&corner));
        }
        assert!((g.dot(&s) - best).abs() < 1e-15);
    }

    #[test]
    fn taylor_step_with_zero_hessian_is_linear_step() {
        let g = v(&[1.0, -3.0, 0.0]);
        let radius = v(&[0.1, 0.2, 0.0]);
        let s = taylor_step(&g, &radius, &HessianModel::Zero, 1.0, false).unwrap();
        assert_eq!(s, linear_step(&g, &radius));
        assert!(taylor_step(&g, &radius, &HessianModel::Zero, 0.0, false).is_err());
    }

    #[test]
    fn refinement_keeps_conditions() {
        let g = v(&[1.0, -3.0]);
        let radius = v(&[10.0, 10.0]);
        let b = HessianModel::Diagonal(v(&[4.0, 1.0]));
        let s = taylor_step(&g, &radius, &b, 1.0, true).unwrap();
        assert_eq!(s, v(&[-0.25, 3.0]));
    }

    #[test]
    fn hessian_validation() {
        assert!(HessianModel::Diagonal(v(&[2.0])).validate(1, 1.0).is_err());
        assert!(HessianModel::Diagonal(v(&[-1.0])).validate(1, 1.0).is_ok());
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(HessianModel::Explicit(asym).validate(2, 5.0).is_err());
        assert!(HessianModel::Zero.validate(3, 0.5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn taylor_step_properties(
            g in proptest::collection::vec(-10.0f64..10.0, 4),
            w in proptest::collection::vec(0.01f64..20.0, 4),
            d in proptest::collection::vec(-1.0f64..1.0, 4),
            tau in 0.01f64..=1.0,
            refine in any::<bool>(),
        ) {
            let g = v(&g);
            let w = v(&w);
            let b = HessianModel::Diagonal(v(&d));
            let tr = compute_radius(&w, &g, true, 0.0, 1.0).unwrap();
            let s = taylor_step(&g, &tr.radius, &b, tau, refine).unwrap();
            let s_q = cauchy_step(&g, &tr.radius, &b);
            for j in 0..4 {
                prop_assert!(s[j].abs() <= tr.radius[j]);
                prop_assert!(s_l_sign_ok(g[j], s_q[j]));
            }
            prop_assert!(model_decrease(&g, &s, &b) <= tau * model_decrease(&g, &s_q, &b) + 1e-12);
            // Model decrease bound for s_Q with ς_min = 0.01.
            let bound = -(0.01 / 2.0) * weighted_decrease(&g, &w);
            prop_assert!(model_decrease(&g, &s_q, &b) <= bound + 1e-12);
            prop_assert!(linear_decrease_bound_holds(&g, &s, &w, &tr.radius, tau, 0.01, 1.0));
            prop_assert!(s.norm() <= tr.raw_radius.norm() * (1.0 + 1e-12));
        }
    }

    fn s_l_sign_ok(gj: f64, sj: f64) -> bool {
        gj * sj <= 0.0
    }
}
