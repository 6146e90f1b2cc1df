//! Level stacks, transfer operators and first-order coherent lower-level models.
//!
//! Levels are numbered `1..=r`, level `r` being the true objective. The
//! transfer operator stored with level `ℓ ≥ 2` maps level `ℓ-1` variables to
//! level `ℓ` variables (prolongation `P_ℓ`); its restriction is `R_ℓ = ωP_ℓᵀ`.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, MoffoError, Result};

const POWER_ITERATION_TOL: f64 = 1e-10;
const POWER_ITERATION_MAX: usize = 10_000;
const DENSE_SVD_LIMIT: usize = 64;

/// A differentiable function at one level of the hierarchy.
///
/// The solver only ever calls [`Objective::gradient`] or
/// [`Objective::sampled_gradient`]; `value` exists for diagnostics and
/// gradient checks.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    fn value(&self, _x: &DVector<f64>) -> Option<f64> {
        None
    }

    /// Number of terms when the objective is a finite sum over samples.
    fn sample_count(&self) -> Option<usize> {
        None
    }

    /// Unbiased gradient estimate from the given sample indices
    /// (drawn uniformly without replacement).
    fn sampled_gradient(&self, _x: &DVector<f64>, _indices: &[usize]) -> Result<DVector<f64>> {
        Err(MoffoError::Oracle(
            "objective is not sum-structured".to_string(),
        ))
    }
}

#[derive(Debug, Clone)]
enum Structure {
    Dense(DMatrix<f64>),
    /// `P = (L ⊗ I_block) ⊕ I_shared` on vectors laid out as consecutive
    /// blocks of `block` entries (one per interpolation node) followed by
    /// `shared` entries copied unchanged.
    Layered {
        interp: DMatrix<f64>,
        block: usize,
        shared: usize,
    },
}

/// Prolongation `P` together with the scaling `ω` defining `R = ωPᵀ`.
#[derive(Debug)]
pub struct TransferOperator {
    structure: Structure,
    omega: f64,
    dense: OnceLock<DMatrix<f64>>,
    restriction: OnceLock<DMatrix<f64>>,
    norm: OnceLock<f64>,
    sigma_min: OnceLock<f64>,
}

impl Clone for TransferOperator {
    fn clone(&self) -> Self {
        Self {
            structure: self.structure.clone(),
            omega: self.omega,
            dense: self.dense.clone(),
            restriction: self.restriction.clone(),
            norm: self.norm.clone(),
            sigma_min: self.sigma_min.clone(),
        }
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(MoffoError::Domain(format!("omega must be positive, got {omega}")));
    }
    Ok(())
}

fn check_tall(rows: usize, cols: usize) -> Result<()> {
    if cols == 0 || rows < cols {
        return Err(MoffoError::InvalidDimension(format!(
            "prolongation must be tall with at least one column, got {rows}x{cols}"
        )));
    }
    Ok(())
}

impl TransferOperator {
    /// Builds an operator and checks that `P` has full column rank.
    pub fn new(prolongation: DMatrix<f64>, omega: f64) -> Result<Self> {
        check_omega(omega)?;
        let (rows, cols) = prolongation.shape();
        check_tall(rows, cols)?;
        Self::finish(Structure::Dense(prolongation), omega)
    }

    /// Operator interpolating each of `block` coordinates along the node
    /// axis with `interp` and copying `shared` trailing coordinates.
    pub fn layered(interp: DMatrix<f64>, block: usize, shared: usize, omega: f64) -> Result<Self> {
        check_omega(omega)?;
        check_tall(interp.nrows(), interp.ncols())?;
        if block == 0 {
            return Err(MoffoError::InvalidDimension("layer block must be nonempty".to_string()));
        }
        Self::finish(Structure::Layered { interp, block, shared }, omega)
    }

    fn finish(structure: Structure, omega: f64) -> Result<Self> {
        let op = Self {
            structure,
            omega,
            dense: OnceLock::new(),
            restriction: OnceLock::new(),
            norm: OnceLock::new(),
            sigma_min: OnceLock::new(),
        };
        if op.sigma_min() <= 0.0 {
            return Err(MoffoError::InvalidDimension(
                "prolongation is rank deficient".to_string(),
            ));
        }
        Ok(op)
    }

    /// Dense `P` (assembled on first use for structured operators).
    pub fn prolongation(&self) -> &DMatrix<f64> {
        match &self.structure {
            Structure::Dense(p) => p,
            Structure::Layered { interp, block, shared } => self.dense.get_or_init(|| {
                let (rf, rc) = interp.shape();
                let mut p = DMatrix::zeros(rf * block + shared, rc * block + shared);
                for i in 0..rf {
                    for c in 0..rc {
                        let a = interp[(i, c)];
                        if a != 0.0 {
                            for j in 0..*block {
                                p[(i * block + j, c * block + j)] = a;
                            }
                        }
                    }
                }
                for j in 0..*shared {
                    p[(rf * block + j, rc * block + j)] = 1.0;
                }
                p
            }),
        }
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn n_fine(&self) -> usize {
        match &self.structure {
            Structure::Dense(p) => p.nrows(),
            Structure::Layered { interp, block, shared } => interp.nrows() * block + shared,
        }
    }

    pub fn n_coarse(&self) -> usize {
        match &self.structure {
            Structure::Dense(p) => p.ncols(),
            Structure::Layered { interp, block, shared } => interp.ncols() * block + shared,
        }
    }

    /// `R = ωPᵀ` as a dense matrix.
    pub fn restriction(&self) -> &DMatrix<f64> {
        self.restriction
            .get_or_init(|| restriction_of(self.prolongation(), self.omega))
    }

    pub fn prolong(&self, coarse: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.n_coarse(), coarse.len(), "prolongation input")?;
        Ok(match &self.structure {
            Structure::Dense(p) => p * coarse,
            Structure::Layered { interp, block, shared } => {
                layered_apply(interp, *block, *shared, coarse, false, 1.0)
            }
        })
    }

    pub fn restrict(&self, fine: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.n_fine(), fine.len(), "restriction input")?;
        Ok(match &self.structure {
            Structure::Dense(p) => p.tr_mul(fine) * self.omega,
            Structure::Layered { interp, block, shared } => {
                layered_apply(interp, *block, *shared, fine, true, self.omega)
            }
        })
    }

    /// Spectral norm `‖P‖`, computed once.
    pub fn norm(&self) -> f64 {
        *self.norm.get_or_init(|| {
            let core = match &self.structure {
                Structure::Dense(p) => p,
                Structure::Layered { interp, .. } => interp,
            };
            let n = operator_norm(core).unwrap_or_else(|_| largest_singular_value(core));
            match &self.structure {
                Structure::Layered { shared, .. } if *shared > 0 => n.max(1.0),
                _ => n,
            }
        })
    }

    /// Smallest singular value `σ_min[P]`, computed once.
    pub fn sigma_min(&self) -> f64 {
        *self.sigma_min.get_or_init(|| match &self.structure {
            Structure::Dense(p) => sigma_min(p),
            Structure::Layered { interp, shared, .. } => {
                let s = sigma_min(interp);
                if *shared > 0 {
                    s.min(1.0)
                } else {
                    s
                }
            }
        })
    }
}

/// `(L ⊗ I) ⊕ I` or its scaled transpose applied to `v`.
fn layered_apply(
    interp: &DMatrix<f64>,
    block: usize,
    shared: usize,
    v: &DVector<f64>,
    transpose: bool,
    scale: f64,
) -> DVector<f64> {
    let (rf, rc) = interp.shape();
    let (n_in, n_out) = if transpose { (rf, rc) } else { (rc, rf) };
    let mut out = DVector::zeros(n_out * block + shared);
    for o in 0..n_out {
        for i in 0..n_in {
            let a = if transpose { interp[(i, o)] } else { interp[(o, i)] };
            if a != 0.0 {
                let src = v.rows(i * block, block);
                let mut dst = out.rows_mut(o * block, block);
                dst.axpy(scale * a, &src, 1.0);
            }
        }
    }
    for j in 0..shared {
        out[n_out * block + j] = scale * v[n_in * block + j];
    }
    out
}

pub fn restriction_of(prolongation: &DMatrix<f64>, omega: f64) -> DMatrix<f64> {
    prolongation.transpose() * omega
}

/// Piecewise linear interpolation from `n_coarse` interior points to
/// `2·n_coarse - 1` points: coarse values are copied, midpoints averaged.
pub fn linear_interpolation_1d(n_coarse: usize) -> Result<DMatrix<f64>> {
    if n_coarse < 2 {
        return Err(MoffoError::InvalidDimension(format!(
            "linear interpolation needs at least 2 coarse points, got {n_coarse}"
        )));
    }
    let n_fine = 2 * n_coarse - 1;
    let mut p = DMatrix::zeros(n_fine, n_coarse);
    for c in 0..n_coarse {
        p[(2 * c, c)] = 1.0;
        if c + 1 < n_coarse {
            p[(2 * c + 1, c)] = 0.5;
            p[(2 * c + 1, c + 1)] = 0.5;
        }
    }
    Ok(p)
}

/// Linear interpolation for vectors of interior unknowns with homogeneous
/// Dirichlet ends: `n_coarse` interior points map to `2·n_coarse + 1`.
pub fn dirichlet_interpolation_1d(n_coarse: usize) -> Result<DMatrix<f64>> {
    if n_coarse < 1 {
        return Err(MoffoError::InvalidDimension(
            "Dirichlet interpolation needs at least one coarse point".to_string(),
        ));
    }
    let n_fine = 2 * n_coarse + 1;
    let mut p = DMatrix::zeros(n_fine, n_coarse);
    for c in 0..n_coarse {
        p[(2 * c, c)] = 0.5;
        p[(2 * c + 1, c)] = 1.0;
        p[(2 * c + 2, c)] = 0.5;
    }
    Ok(p)
}

/// Spectral norm from Krylov (Lanczos-accelerated power) iterations on
/// `PᵀP`, seeded with the all-ones vector and stopped once the Ritz residual
/// is below the relative tolerance. Small operators go straight to a dense SVD.
pub fn operator_norm(p: &DMatrix<f64>) -> Result<f64> {
    if p.nrows().min(p.ncols()) <= DENSE_SVD_LIMIT {
        return Ok(largest_singular_value(p));
    }
    let n = p.ncols();
    let apply = |v: &DVector<f64>| p.tr_mul(&(p * v));
    let mut basis: Vec<DVector<f64>> = vec![DVector::from_element(n, 1.0 / (n as f64).sqrt())];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    for k in 0..n.min(POWER_ITERATION_MAX) {
        let mut w = apply(&basis[k]);
        let a = basis[k].dot(&w);
        alphas.push(a);
        // Full reorthogonalization, twice for stability.
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let b = w.norm();
        let m = alphas.len();
        let t = DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                alphas[i]
            } else if i + 1 == j {
                betas[i]
            } else if j + 1 == i {
                betas[j]
            } else {
                0.0
            }
        });
        let eig = t.symmetric_eigen();
        let (idx, theta) = eig
            .eigenvalues
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
        let residual = b * eig.eigenvectors[(m - 1, idx)].abs();
        if theta <= 0.0 {
            return Ok(0.0);
        }
        if residual <= POWER_ITERATION_TOL * theta || b <= f64::EPSILON * theta {
            return Ok(theta.sqrt());
        }
        betas.push(b);
        basis.push(w / b);
    }
    Err(MoffoError::Numerical(format!(
        "spectral norm iteration did not converge in {} steps",
        n.min(POWER_ITERATION_MAX)
    )))
}

fn largest_singular_value(p: &DMatrix<f64>) -> f64 {
    p.singular_values().max()
}

pub fn sigma_min(p: &DMatrix<f64>) -> f64 {
    p.singular_values().min()
}

/// `‖E g‖ ≤ κ_E δ_{ℓ-1}`.
pub fn coherence_defect_ok(defect_norm: f64, delta_lower: f64, kappa_e: f64) -> bool {
    defect_norm <= kappa_e * delta_lower
}

/// Gradient noise applied uniformly at every level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    None,
    /// Subsample `⌈fraction·|D|⌉` terms per call without replacement.
    Minibatch { fraction: f64, seed: u64 },
    /// Additive isotropic Gaussian noise.
    Gaussian { sigma: f64, seed: u64 },
}

impl NoiseModel {
    pub fn seed(&self) -> u64 {
        match *self {
            NoiseModel::None => 0,
            NoiseModel::Minibatch { seed, .. } | NoiseModel::Gaussian { seed, .. } => seed,
        }
    }
}

#[derive(Clone)]
pub struct Level {
    pub objective: Arc<dyn Objective>,
    /// Operator from the level below; `None` for level 1.
    pub transfer: Option<Arc<TransferOperator>>,
}

/// Ordered stack of objectives, coarsest first.
#[derive(Clone)]
pub struct LevelHierarchy {
    levels: Vec<Level>,
    noise: NoiseModel,
}

impl std::fmt::Debug for LevelHierarchy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LevelHierarchy")
            .field("dims", &self.dims())
            .field("noise", &self.noise)
            .finish()
    }
}

impl LevelHierarchy {
    /// `objectives` are ordered coarse to fine; `transfers[k]` maps level
    /// `k+1` to level `k+2`.
    pub fn new(
        objectives: Vec<Arc<dyn Objective>>,
        transfers: Vec<Arc<TransferOperator>>,
    ) -> Result<Self> {
        if objectives.is_empty() {
            return Err(MoffoError::InvalidDimension(
                "hierarchy needs at least one level".to_string(),
            ));
        }
        check_len(objectives.len() - 1, transfers.len(), "number of transfer operators")?;
        let mut levels = Vec::with_capacity(objectives.len());
        for (k, objective) in objectives.into_iter().enumerate() {
            let transfer = if k == 0 {
                None
            } else {
                let op = transfers[k - 1].clone();
                check_len(objective.dim(), op.n_fine(), "transfer rows vs level dimension")?;
                Some(op)
            };
            if let (Some(op), Some(prev)) = (&transfer, levels.last()) {
                let prev: &Level = prev;
                check_len(prev.objective.dim(), op.n_coarse(), "transfer columns vs lower dimension")?;
            }
            levels.push(Level { objective, transfer });
        }
        Ok(Self {
            levels,
            noise: NoiseModel::None,
        })
    }

    pub fn single(objective: Arc<dyn Objective>) -> Self {
        Self {
            levels: vec![Level {
                objective,
                transfer: None,
            }],
            noise: NoiseModel::None,
        }
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    pub fn noise(&self) -> NoiseModel {
        self.noise
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.objective.dim()).collect()
    }

    /// Level `ℓ ∈ 1..=r`.
    pub fn level(&self, level: usize) -> &Level {
        &self.levels[level - 1]
    }

    pub fn objective(&self, level: usize) -> &Arc<dyn Objective> {
        &self.level(level).objective
    }

    pub fn dim(&self, level: usize) -> usize {
        self.objective(level).dim()
    }

    /// Operator `P_ℓ` mapping level `ℓ-1` into level `ℓ` (`ℓ ≥ 2`).
    pub fn transfer(&self, level: usize) -> Option<&Arc<TransferOperator>> {
        self.level(level).transfer.as_ref()
    }

    /// Keeps only the `top` finest levels. `top_levels(1)` is the
    /// single-level problem on the finest objective.
    pub fn top_levels(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.depth() {
            return Err(MoffoError::InvalidDimension(format!(
                "cannot keep {count} of {} levels",
                self.depth()
            )));
        }
        let mut levels: Vec<Level> = self.levels[self.depth() - count..].to_vec();
        levels[0].transfer = None;
        Ok(Self {
            levels,
            noise: self.noise,
        })
    }

    /// Gradient under the hierarchy's noise model. Returns the estimate and
    /// the fraction of the dataset touched (1 for exact gradients).
    pub fn sample_gradient<R: Rng + ?Sized>(
        &self,
        level: usize,
        x: &DVector<f64>,
        rng: &mut R,
    ) -> Result<(DVector<f64>, f64)> {
        let objective = self.objective(level);
        check_len(objective.dim(), x.len(), "gradient input")?;
        match self.noise {
            NoiseModel::None => Ok((objective.gradient(x)?, 1.0)),
            NoiseModel::Gaussian { sigma, .. } => {
                let mut g = objective.gradient(x)?;
                for gj in g.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *gj += sigma * z;
                }
                Ok((g, 1.0))
            }
            NoiseModel::Minibatch { fraction, .. } => {
                let total = objective.sample_count().ok_or_else(|| {
                    MoffoError::Oracle("minibatch noise needs a sum-structured objective".to_string())
                })?;
                let batch = batch_size(fraction, total);
                if batch >= total {
                    return Ok((objective.gradient(x)?, 1.0));
                }
                let mut indices = rand::seq::index::sample(rng, total, batch).into_vec();
                indices.sort_unstable();
                let g = objective.sampled_gradient(x, &indices)?;
                Ok((g, batch as f64 / total as f64))
            }
        }
    }
}

pub fn batch_size(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64).ceil() as usize).clamp(1, total)
}

/// Lower-level model `h_{ℓ-1}(x) = f_{ℓ-1}(x) + vᵀx`.
#[derive(Debug, Clone)]
pub struct CoherentModel {
    correction: DVector<f64>,
    anchor: DVector<f64>,
    anchor_gradient: DVector<f64>,
}

impl CoherentModel {
    /// Model with no linear correction.
    pub fn uncorrected(anchor: DVector<f64>, base_gradient_at_anchor: DVector<f64>) -> Self {
        Self {
            correction: DVector::zeros(anchor.len()),
            anchor,
            anchor_gradient: base_gradient_at_anchor,
        }
    }

    pub fn correction(&self) -> &DVector<f64> {
        &self.correction
    }

    pub fn anchor(&self) -> &DVector<f64> {
        &self.anchor
    }

    /// Model gradient at the anchor, `R_ℓ g_{ℓ,i}` for coherent models.
    pub fn anchor_gradient(&self) -> &DVector<f64> {
        &self.anchor_gradient
    }

    /// `∇f_{ℓ-1}(x) + v` from a base gradient evaluated by the caller.
    pub fn gradient_from_base(&self, base: DVector<f64>) -> DVector<f64> {
        base + &self.correction
    }

    pub fn value_from_base(&self, base_value: f64, x: &DVector<f64>) -> f64 {
        base_value + self.correction.dot(x)
    }
}

/// `v = R g_upper - ∇f_low(x_low0)`, so the model gradient at `x_low0`
/// equals `R g_upper`.
pub fn build_coherent_model(
    lower_gradient_at_anchor: &DVector<f64>,
    x_low0: &DVector<f64>,
    g_upper: &DVector<f64>,
    op: &TransferOperator,
) -> Result<CoherentModel> {
    check_len(op.n_coarse(), x_low0.len(), "coherent model anchor")?;
    check_len(op.n_coarse(), lower_gradient_at_anchor.len(), "lower gradient")?;
    let restricted = op.restrict(g_upper)?;
    let correction = &restricted - lower_gradient_at_anchor;
    Ok(CoherentModel {
        correction,
        anchor: x_low0.clone(),
        anchor_gradient: restricted,
    })
}
