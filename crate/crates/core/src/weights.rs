//! Per-coordinate weight schedules.
//!
//! Two families are provided:
//!
//! * AdaGrad-like: `w_j = (ς_j + c_j + Σ_{k≤i} g_{k,j}²)^μ`;
//! * divergent MAXGI: `w_j = max(ς_j, v_{i,j})·(i+1)^ν` with the running
//!   maximum `v_{i,j} = max_{t≤i} |g_{t,j}|`.
//!
//! Lower-level schedules are seeded with prescribed initial weights that act
//! as a componentwise floor for the rest of the lower-level run.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, MoffoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    AdagradLike,
    Maxgi,
}

#[derive(Debug, Clone)]
pub struct WeightState {
    kind: WeightKind,
    mu: f64,
    nu: f64,
    floors: DVector<f64>,
    /// Σ g² (AdaGrad-like) or running max |g| (MAXGI).
    accumulator: DVector<f64>,
    offsets: DVector<f64>,
    prescribed_floor: Option<DVector<f64>>,
    iteration: usize,
}

fn validate_floors(floors: &DVector<f64>) -> Result<()> {
    if floors.is_empty() {
        return Err(MoffoError::InvalidDimension("empty floor vector".to_string()));
    }
    if floors.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
        return Err(MoffoError::Domain("floors must lie in (0, 1]".to_string()));
    }
    Ok(())
}

impl WeightState {
    pub fn new(kind: WeightKind, mu: f64, nu: f64, floors: DVector<f64>) -> Result<Self> {
        if !(mu > 0.0 && mu < 1.0) {
            return Err(MoffoError::Domain(format!("mu must lie in (0,1), got {mu}")));
        }
        if kind == WeightKind::Maxgi && !(nu > 0.0 && nu <= mu) {
            return Err(MoffoError::Domain(format!("nu must lie in (0, mu], got {nu}")));
        }
        validate_floors(&floors)?;
        let n = floors.len();
        Ok(Self {
            kind,
            mu,
            nu,
            floors,
            accumulator: DVector::zeros(n),
            offsets: DVector::zeros(n),
            prescribed_floor: None,
            iteration: 0,
        })
    }

    /// AdaGrad-like schedule with exponent `mu`.
    pub fn adagrad(mu: f64, floors: DVector<f64>) -> Result<Self> {
        Self::new(WeightKind::AdagradLike, mu, mu, floors)
    }

    /// MAXGI schedule with `ν = μ`.
    pub fn maxgi(mu: f64, floors: DVector<f64>) -> Result<Self> {
        Self::new(WeightKind::Maxgi, mu, mu, floors)
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.floors.len()
    }

    pub fn floors(&self) -> &DVector<f64> {
        &self.floors
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Running maxima `v_{i,j}` for MAXGI, accumulated squares otherwise.
    pub fn accumulator(&self) -> &DVector<f64> {
        &self.accumulator
    }

    pub fn prescribed_floor(&self) -> Option<&DVector<f64>> {
        self.prescribed_floor.as_ref()
    }

    /// Folds the current gradient into the schedule and returns the weights
    /// for this iteration.
    pub fn update(&mut self, g: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.dim(), g.len(), "weight update gradient")?;
        let i = self.iteration;
        let raw = match self.kind {
            WeightKind::AdagradLike => {
                self.accumulator += g.component_mul(g);
                DVector::from_iterator(
                    self.dim(),
                    (0..self.dim()).map(|j| {
                        (self.floors[j] + self.offsets[j] + self.accumulator[j]).powf(self.mu)
                    }),
                )
            }
            WeightKind::Maxgi => {
                for (v, gj) in self.accumulator.iter_mut().zip(g.iter()) {
                    *v = v.max(gj.abs());
                }
                let growth = ((i + 1) as f64).powf(self.nu);
                DVector::from_iterator(
                    self.dim(),
                    (0..self.dim()).map(|j| self.floors[j].max(self.accumulator[j]) * growth),
                )
            }
        };
        self.iteration += 1;
        Ok(match &self.prescribed_floor {
            // Seeded lower-level state: emit the prescribed weights verbatim first.
            Some(w0) if i == 0 => w0.clone(),
            Some(w0) => raw.zip_map(w0, f64::max),
            None => raw,
        })
    }
}

fn check_radius_inputs(
    varsigma: &DVector<f64>,
    rg: &DVector<f64>,
    alpha: f64,
    delta_norm: f64,
) -> Result<()> {
    check_len(varsigma.len(), rg.len(), "restricted gradient vs floors")?;
    if !(delta_norm > 0.0) {
        return Err(MoffoError::Domain(format!(
            "trust-region norm must be positive, got {delta_norm}"
        )));
    }
    if !(alpha >= 1.0) {
        return Err(MoffoError::Domain(format!("alpha must be at least 1, got {alpha}")));
    }
    Ok(())
}

/// `max(ς_j, ‖P‖·|Rg|_j / (α‖Δ‖))`, scaled up uniformly when needed so the
/// Euclidean norm of `|Rg|/w` stays within `α‖Δ‖/‖P‖`.
fn radius_compatible_weights(
    varsigma: &DVector<f64>,
    p_norm: f64,
    rg: &DVector<f64>,
    alpha: f64,
    delta_norm: f64,
) -> DVector<f64> {
    let scale = p_norm / (alpha * delta_norm);
    let hat = varsigma.zip_map(rg, |s, r| s.max(scale * r.abs()));
    lift_to_radius(hat, rg, alpha * delta_norm / p_norm)
}

/// Componentwise the formula above only bounds the largest entry of
/// `|Rg|/w`; the 2-norm can exceed it by up to `√n`.
fn lift_to_radius(w: DVector<f64>, rg: &DVector<f64>, bound: f64) -> DVector<f64> {
    let radius = rg.component_div(&w).norm();
    if radius > bound {
        // Slight overshoot absorbs rounding in the division.
        w * (radius / bound * (1.0 + 4.0 * f64::EPSILON))
    } else {
        w
    }
}

/// Initial lower-level weights for divergent schedules:
/// `max(ς_j, ‖P‖|Rg|_j/(α‖Δ‖), min_k w_k)`, lifted if the radius bound
/// fails in the Euclidean norm.
pub fn init_lower_divergent(
    varsigma: &DVector<f64>,
    p_norm: f64,
    rg: &DVector<f64>,
    alpha: f64,
    delta_norm: f64,
    min_upper_weight: f64,
) -> Result<DVector<f64>> {
    check_radius_inputs(varsigma, rg, alpha, delta_norm)?;
    Ok(radius_compatible_weights(varsigma, p_norm, rg, alpha, delta_norm)
        .map(|w| w.max(min_upper_weight)))
}

/// Initial lower-level weights for AdaGrad-like schedules: the
/// radius-compatible weights scaled up so their norm is at least
/// `‖w_upper‖`.
pub fn init_lower_adagrad(
    varsigma: &DVector<f64>,
    p_norm: f64,
    rg: &DVector<f64>,
    alpha: f64,
    delta_norm: f64,
    upper_weight_norm: f64,
) -> Result<DVector<f64>> {
    check_radius_inputs(varsigma, rg, alpha, delta_norm)?;
    let hat = radius_compatible_weights(varsigma, p_norm, rg, alpha, delta_norm);
    Ok(scale_to_norm(hat, upper_weight_norm))
}

fn scale_to_norm(hat: DVector<f64>, target_norm: f64) -> DVector<f64> {
    let scale = (target_norm / hat.norm()).max(1.0);
    hat * scale
}

/// Lower-level schedule whose first emitted weights are exactly `w0`.
///
/// AdaGrad-like states get offsets `c_j` so that the accumulated schedule
/// continues from `w0`; MAXGI states start their running maxima at `|g0|`.
pub fn seed_lower_state(
    kind: WeightKind,
    mu: f64,
    nu: f64,
    varsigma: DVector<f64>,
    w0: DVector<f64>,
    g0: &DVector<f64>,
) -> Result<WeightState> {
    check_len(varsigma.len(), w0.len(), "seed weights")?;
    check_len(varsigma.len(), g0.len(), "seed gradient")?;
    let mut state = WeightState::new(kind, mu, nu, varsigma)?;
    match kind {
        WeightKind::AdagradLike => {
            state.offsets = DVector::from_iterator(
                w0.len(),
                (0..w0.len()).map(|j| {
                    (w0[j].powf(1.0 / mu) - state.floors[j] - g0[j] * g0[j]).max(0.0)
                }),
            );
        }
        WeightKind::Maxgi => {
            state.accumulator = g0.abs();
        }
    }
    state.prescribed_floor = Some(w0);
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn adagrad_accumulates_squares() {
        let mut s = WeightState::adagrad(0.5, v(&[1.0])).unwrap();
        let w0 = s.update(&v(&[1.0])).unwrap();
        assert!((w0[0] - 2f64.sqrt()).abs() < 1e-15);
        let w1 = s.update(&v(&[2.0])).unwrap();
        assert!((w1[0] - 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn maxgi_running_max() {
        let mut s = WeightState::maxgi(0.1, v(&[0.01])).unwrap();
        let mut maxima = Vec::new();
        let mut last = None;
        for g in [1.0, 3.0, 2.0] {
            last = Some(s.update(&v(&[g])).unwrap());
            maxima.push(s.accumulator()[0]);
        }
        assert_eq!(maxima, vec![1.0, 3.0, 3.0]);
        let expected = 3.0 * 3f64.powf(0.1);
        assert!((last.unwrap()[0] - expected).abs() < 1e-12);
        assert!((expected - 3.3484).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_weights() {
        let mut a = WeightState::adagrad(0.5, v(&[0.25, 1.0])).unwrap();
        for _ in 0..5 {
            let w = a.update(&v(&[0.0, 0.0])).unwrap();
            assert_eq!(w, v(&[0.5, 1.0]));
        }
        let mut m = WeightState::maxgi(0.3, v(&[0.5])).unwrap();
        for i in 0..5 {
            let w = m.update(&v(&[0.0])).unwrap();
            assert!((w[0] - 0.5 * ((i + 1) as f64).powf(0.3)).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut a = WeightState::adagrad(0.5, v(&[1.0, 1.0])).unwrap();
        assert!(matches!(
            a.update(&v(&[1.0])),
            Err(MoffoError::ShapeMismatch { .. })
        ));
        assert!(WeightState::new(WeightKind::Maxgi, 0.1, 0.2, v(&[1.0])).is_err());
        assert!(WeightState::adagrad(1.0, v(&[1.0])).is_err());
        assert!(WeightState::adagrad(0.5, v(&[0.0])).is_err());
    }

    #[test]
    fn divergent_lower_weights() {
        let w = init_lower_divergent(&v(&[0.01]), 1.0, &v(&[2.0]), 5.0, 1.0, 0.5).unwrap();
        assert_eq!(w, v(&[0.5]));
        let w = init_lower_divergent(&v(&[0.01, 0.3]), 2.0, &v(&[0.0, 0.0]), 5.0, 1.0, 0.2).unwrap();
        assert_eq!(w, v(&[0.2, 0.3]));
        assert!(init_lower_divergent(&v(&[0.01]), 1.0, &v(&[1.0]), 5.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn lower_weights_meet_euclidean_radius() {
        // Every component sits on the radius term, so |Rg|/w = (1, 1, 1, 1) before lifting.
        let rg = v(&[1.0, -2.0, 3.0, 4.0]);
        let w = init_lower_divergent(&v(&[1e-3; 4]), 1.0, &rg, 1.0, 1.0, 0.1).unwrap();
        let radius = rg.component_div(&w).norm();
        assert!(radius <= 1.0 && radius > 1.0 - 1e-12);
        assert!((w[3] / w[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn adagrad_lower_weights_scale_to_upper_norm() {
        assert_eq!(scale_to_norm(v(&[3.0, 4.0]), 10.0), v(&[6.0, 8.0]));
        assert_eq!(scale_to_norm(v(&[3.0, 4.0]), 4.0), v(&[3.0, 4.0]));
        // ŵ = (3, 4) from the radius term: ‖P‖|Rg|/(α‖Δ‖) with ‖P‖ = α = ‖Δ‖ = 1.
        let w = init_lower_adagrad(&v(&[0.01, 0.01]), 1.0, &v(&[3.0, 4.0]), 1.0, 1.0, 10.0).unwrap();
        assert_eq!(w, v(&[6.0, 8.0]));
        assert!(init_lower_adagrad(&v(&[0.01]), 1.0, &v(&[1.0]), 0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn seeded_state_emits_prescribed_weights_first() {
        for kind in [WeightKind::AdagradLike, WeightKind::Maxgi] {
            let w0 = v(&[0.7, 1.3, 0.011]);
            let g0 = v(&[0.5, -2.0, 0.0]);
            let mut s = seed_lower_state(kind, 0.5, 0.5, v(&[0.01; 3]), w0.clone(), &g0).unwrap();
            let first = s.update(&g0).unwrap();
            assert_eq!(first, w0);
            let mut prev = first;
            for k in 0..20 {
                let g = v(&[(k as f64).sin(), 0.1 * k as f64, 0.0]);
                let w = s.update(&g).unwrap();
                for j in 0..3 {
                    assert!(w[j] >= w0[j]);
                    assert!(w[j] >= prev[j]);
                }
                prev = w;
            }
        }
    }

    #[test]
    fn seeded_floor_case_is_constant() {
        let floors = v(&[0.04, 0.25]);
        let g0 = DVector::zeros(2);
        let mut s =
            seed_lower_state(WeightKind::AdagradLike, 0.5, 0.5, floors.clone(), floors.clone(), &g0)
                .unwrap();
        assert_eq!(s.update(&g0).unwrap(), floors);
        // Afterwards the schedule sits at the constant max(ς, ς^μ) = ς^μ.
        for _ in 0..3 {
            let w = s.update(&g0).unwrap();
            assert_eq!(w, floors.map(|f: f64| f.sqrt()));
        }
    }

    proptest! {
        #[test]
        fn weights_are_floored_and_monotone(
            grads in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 3), 1..30),
            mu in 0.05f64..0.95,
            maxgi in any::<bool>(),
        ) {
            let floors = v(&[0.01, 0.5, 1.0]);
            let mut s = if maxgi {
                WeightState::maxgi(mu, floors.clone()).unwrap()
            } else {
                WeightState::adagrad(mu, floors.clone()).unwrap()
            };
            let mut prev: Option<DVector<f64>> = None;
            let mut prev_v = DVector::zeros(3);
            for g in grads {
                let g = v(&g);
                let w = s.update(&g).unwrap();
                for j in 0..3 {
                    if maxgi {
                        prop_assert!(w[j] >= floors[j]);
                        let vj = s.accumulator()[j];
                        prop_assert!(vj >= g[j].abs());
                        if vj > prev_v[j] {
                            prop_assert!(vj <= g[j].abs());
                        }
                    } else {
                        prop_assert!(w[j] >= floors[j].powf(mu));
                    }
                    if let Some(p) = &prev {
                        prop_assert!(w[j] >= p[j]);
                    }
                }
                prev_v = s.accumulator().clone();
                prev = Some(w);
            }
        }

        #[test]
        fn adagrad_max_weight_sandwich(
            grads in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 1..20),
            mu in 0.05f64..0.95,
        ) {
            let sigma = 0.1;
            let mut s = WeightState::adagrad(mu, DVector::from_element(4, sigma)).unwrap();
            let mut total = 0.0;
            for g in grads {
                let g = v(&g);
                total += g.norm_squared();
                let w = s.update(&g).unwrap();
                let wmax = w.max();
                prop_assert!(wmax >= sigma.powf(mu) * (1.0 - 1e-12));
                prop_assert!(wmax <= (sigma + total).powf(mu) * (1.0 + 1e-12));
            }
        }
    }
}
