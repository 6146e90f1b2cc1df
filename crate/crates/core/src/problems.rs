//! Built-in problem hierarchies.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{BetaParams, TheoryConstants, TheoryInputs};
use crate::error::{check_len, MoffoError, Result};
use crate::solver::SolverConfig;
use crate::hierarchy::{
    dirichlet_interpolation_1d, linear_interpolation_1d, LevelHierarchy, NoiseModel, Objective,
    TransferOperator,
};

/// A level hierarchy plus what is known about its top-level objective.
#[derive(Clone)]
pub struct ProblemHierarchy {
    pub name: String,
    pub hierarchy: LevelHierarchy,
    /// Gradient Lipschitz constant valid for every level.
    pub lipschitz: Option<f64>,
    /// Whether `lipschitz` is the exact constant rather than an upper bound.
    pub lipschitz_exact: bool,
    /// Lower bound on the top-level objective.
    pub f_low: Option<f64>,
    /// Number of summands for sum-structured problems.
    pub dataset_size: Option<usize>,
    pub x0: DVector<f64>,
}

impl std::fmt::Debug for ProblemHierarchy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemHierarchy")
            .field("name", &self.name)
            .field("dims", &self.hierarchy.dims())
            .field("lipschitz", &self.lipschitz)
            .field("f_low", &self.f_low)
            .field("dataset_size", &self.dataset_size)
            .finish()
    }
}

impl ProblemHierarchy {
    pub fn depth(&self) -> usize {
        self.hierarchy.depth()
    }

    pub fn top(&self) -> &Arc<dyn Objective> {
        self.hierarchy.objective(self.depth())
    }

    /// `f(x0) − f_low` when both are available.
    pub fn gamma0(&self) -> Option<f64> {
        Some(self.top().value(&self.x0)? - self.f_low?)
    }

    /// The same problem restricted to its finest `count` levels.
    pub fn top_levels(&self, count: usize) -> Result<Self> {
        Ok(Self {
            hierarchy: self.hierarchy.top_levels(count)?,
            ..self.clone()
        })
    }

    /// Subsampled gradients drawing `⌈fraction·|D|⌉` summands per call.
    pub fn with_minibatch(mut self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(MoffoError::InvalidConfig(format!(
                "minibatch fraction must lie in (0,1], got {fraction}"
            )));
        }
        for level in 1..=self.depth() {
            if self.hierarchy.objective(level).sample_count().is_none() {
                return Err(MoffoError::InvalidConfig(format!(
                    "problem {} is not sum-structured at level {level}",
                    self.name
                )));
            }
        }
        self.hierarchy = self
            .hierarchy
            .with_noise(NoiseModel::Minibatch { fraction, seed });
        Ok(self)
    }

    /// Exact gradients perturbed by i.i.d. `N(0, σ²)` noise.
    pub fn with_gaussian_noise(mut self, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(MoffoError::InvalidConfig(format!(
                "noise level must be nonnegative, got {sigma}"
            )));
        }
        self.hierarchy = self.hierarchy.with_noise(NoiseModel::Gaussian { sigma, seed });
        Ok(self)
    }

    /// Rate-theorem constants for running `config` from `x0`.
    pub fn theory_constants(
        &self,
        x0: &DVector<f64>,
        config: &SolverConfig,
        vartheta: Option<f64>,
    ) -> Result<TheoryConstants> {
        let r = self.depth();
        let config = config.clone().with_depth(r);
        config.validate(r)?;
        let missing = |what: &str| {
            MoffoError::InvalidConfig(format!("problem {} has no known {what}", self.name))
        };
        let lipschitz = self.lipschitz.ok_or_else(|| missing("Lipschitz constant"))?;
        let f_low = self.f_low.ok_or_else(|| missing("lower bound"))?;
        let f0 = self.top().value(x0).ok_or_else(|| missing("objective value"))?;
        let transfers: Vec<_> = (2..=r)
            .map(|l| self.hierarchy.transfer(l).expect("levels above 1 carry operators"))
            .collect();
        let omega = match transfers.is_empty() {
            true => 1.0,
            false => transfers.iter().map(|t| t.omega()).fold(0.0, f64::max),
        };
        TheoryConstants::compute(&TheoryInputs {
            beta: BetaParams {
                tau: config.tau,
                varsigma_min: config.floors.min(),
                kappa_b: config.kappa_b,
                kappa_r: config.kappa_r,
                omega,
                alpha: config.alpha,
                lipschitz,
                i_max: config.i_max.clone(),
                sigma_min: transfers.iter().map(|t| t.sigma_min()).collect(),
            },
            n: self.hierarchy.dim(r),
            f0,
            f_low,
            mu: config.mu,
            nu: config.nu(),
            vartheta,
        })
    }
}

/// `f(x) = ½ Σ d_j x_j²`.
#[derive(Debug, Clone)]
pub struct DiagonalQuadratic {
    pub diag: DVector<f64>,
}

impl Objective for DiagonalQuadratic {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.dim(), x.len(), "quadratic input")?;
        Ok(self.diag.component_mul(x))
    }

    fn value(&self, x: &DVector<f64>) -> Option<f64> {
        Some(0.5 * x.dot(&self.diag.component_mul(x)))
    }
}

/// `f(x) = ½ xᵀdiag(1,2)x` from `x0 = (3, −4)`.
pub fn quadratic_2d() -> ProblemHierarchy {
    let objective = DiagonalQuadratic {
        diag: DVector::from_vec(vec![1.0, 2.0]),
    };
    ProblemHierarchy {
        name: "quadratic_2d".to_string(),
        hierarchy: LevelHierarchy::single(Arc::new(objective)),
        lipschitz: Some(2.0),
        lipschitz_exact: true,
        f_low: Some(0.0),
        dataset_size: None,
        x0: DVector::from_vec(vec![3.0, -4.0]),
    }
}

/// `f(x) = ½xᵀAx − bᵀx` with `A` the finite-difference Dirichlet Laplacian
/// on `n` interior points of `(0,1)`, written as a sum of `n+1` element
/// terms `(x_{e+1}−x_e)²/(2h²) − ½(b_e x_e + b_{e+1} x_{e+1})`.
#[derive(Debug, Clone)]
pub struct LaplacianQuadratic {
    n: usize,
    h: f64,
    b: DVector<f64>,
}

impl LaplacianQuadratic {
    pub fn new(b: DVector<f64>) -> Self {
        let n = b.len();
        Self {
            n,
            h: 1.0 / (n as f64 + 1.0),
            b,
        }
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn forcing(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let s = 1.0 / (self.h * self.h);
        DMatrix::from_fn(self.n, self.n, |i, j| match i.abs_diff(j) {
            0 => 2.0 * s,
            1 => -s,
            _ => 0.0,
        })
    }

    /// `λ_max(A) = (4/h²) sin²(nπ/(2(n+1)))`.
    pub fn lambda_max(&self) -> f64 {
        let t = (self.n as f64 * std::f64::consts::PI / (2.0 * (self.n as f64 + 1.0))).sin();
        4.0 * t * t / (self.h * self.h)
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let s = 1.0 / (self.h * self.h);
        DVector::from_fn(self.n, |i, _| {
            let left = if i > 0 { x[i - 1] } else { 0.0 };
            let right = if i + 1 < self.n { x[i + 1] } else { 0.0 };
            s * (2.0 * x[i] - left - right)
        })
    }

    /// Minimizer `A⁻¹b` by the Thomas algorithm.
    pub fn solve(&self) -> DVector<f64> {
        let n = self.n;
        let s = 1.0 / (self.h * self.h);
        let (a, d) = (-s, 2.0 * s);
        let mut c = vec![0.0; n];
        let mut y = vec![0.0; n];
        for i in 0..n {
            let denom = d - if i > 0 { a * c[i - 1] } else { 0.0 };
            c[i] = a / denom;
            y[i] = (self.b[i] - if i > 0 { a * y[i - 1] } else { 0.0 }) / denom;
        }
        let mut x = DVector::zeros(n);
        for i in (0..n).rev() {
            x[i] = y[i] - if i + 1 < n { c[i] * x[i + 1] } else { 0.0 };
        }
        x
    }

    /// Padded value `x_k` with `x_0 = x_{n+1} = 0`, 1-based interior.
    fn at(v: &DVector<f64>, k: usize, n: usize) -> f64 {
        if k == 0 || k > n {
            0.0
        } else {
            v[k - 1]
        }
    }
}

impl Objective for LaplacianQuadratic {
    fn dim(&self) -> usize {
        self.n
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.n, x.len(), "Laplacian input")?;
        Ok(self.apply(x) - &self.b)
    }

    fn value(&self, x: &DVector<f64>) -> Option<f64> {
        Some(0.5 * x.dot(&self.apply(x)) - self.b.dot(x))
    }

    fn sample_count(&self) -> Option<usize> {
        Some(self.n + 1)
    }

    fn sampled_gradient(&self, x: &DVector<f64>, indices: &[usize]) -> Result<DVector<f64>> {
        check_len(self.n, x.len(), "Laplacian input")?;
        if indices.is_empty() {
            return Err(MoffoError::Oracle("empty minibatch".to_string()));
        }
        let n = self.n;
        let s = 1.0 / (self.h * self.h);
        let mut g = DVector::zeros(n);
        for &e in indices {
            if e > n {
                return Err(MoffoError::Oracle(format!("element {e} out of range")));
            }
            // Element e couples padded nodes e and e+1.
            let d = s * (Self::at(x, e + 1, n) - Self::at(x, e, n));
            if e >= 1 {
                g[e - 1] += -d - 0.5 * self.b[e - 1];
            }
            if e < n {
                g[e] += d - 0.5 * self.b[e];
            }
        }
        Ok(g * ((n + 1) as f64 / indices.len() as f64))
    }
}

fn check_dyadic(n_fine: usize, levels: usize) -> Result<Vec<usize>> {
    if levels == 0 {
        return Err(MoffoError::InvalidConfig("levels must be positive".to_string()));
    }
    let m = (n_fine + 1).trailing_zeros() as usize;
    if n_fine < 3 || (n_fine + 1) != 1 << m || m < levels + 1 {
        return Err(MoffoError::InvalidConfig(format!(
            "n_fine must be 2^m - 1 with m >= levels + 1, got n_fine = {n_fine}, levels = {levels}"
        )));
    }
    let mut dims = vec![n_fine];
    for _ in 1..levels {
        let last = *dims.last().expect("nonempty");
        dims.push((last - 1) / 2);
    }
    dims.reverse();
    Ok(dims)
}

/// Smooth forcing whose continuous solution is `sin(πt) + sin(3πt)`.
fn laplacian_forcing(t: f64) -> f64 {
    let pi = std::f64::consts::PI;
    pi * pi * ((pi * t).sin() + 9.0 * (3.0 * pi * t).sin())
}

fn dirichlet_operators(dims: &[usize]) -> Result<Vec<Arc<TransferOperator>>> {
    dims[..dims.len() - 1]
        .iter()
        .map(|&n| Ok(Arc::new(TransferOperator::new(dirichlet_interpolation_1d(n)?, 0.5)?)))
        .collect()
}

/// One-dimensional Poisson quadratic on `n_fine = 2^m − 1` interior points
/// with `levels` nested grids. Coarse forcings are restrictions of the fine
/// one, so each coarse objective is `ω f_{ℓ+1}∘P` up to a constant.
pub fn laplacian_quadratic_1d(n_fine: usize, levels: usize) -> Result<ProblemHierarchy> {
    let dims = check_dyadic(n_fine, levels)?;
    let transfers = dirichlet_operators(&dims)?;
    let h = 1.0 / (n_fine as f64 + 1.0);
    let mut b = DVector::from_fn(n_fine, |i, _| laplacian_forcing((i + 1) as f64 * h));
    let mut objectives: Vec<Arc<dyn Objective>> = Vec::with_capacity(levels);
    let top = LaplacianQuadratic::new(b.clone());
    let lipschitz = top.lambda_max();
    let f_low = top.value(&top.solve()).expect("quadratic value");
    objectives.push(Arc::new(top));
    for op in transfers.iter().rev() {
        b = op.restrict(&b)?;
        objectives.push(Arc::new(LaplacianQuadratic::new(b.clone())));
    }
    objectives.reverse();
    Ok(ProblemHierarchy {
        name: "laplacian_1d".to_string(),
        hierarchy: LevelHierarchy::new(objectives, transfers)?,
        lipschitz: Some(lipschitz),
        lipschitz_exact: true,
        f_low: Some(f_low),
        dataset_size: Some(n_fine + 1),
        x0: DVector::zeros(n_fine),
    })
}

/// `f(u) = Σ_{k=0}^{n} h√(1 + ((u_{k+1}−u_k)/h)²) + Σ_k h cos(u_k) − φᵀu`
/// with `u_0 = u_{n+1} = 0` and `φ_k = h sin(πt_k)`.
#[derive(Debug, Clone)]
pub struct NonconvexChain {
    n: usize,
    h: f64,
    forcing: DVector<f64>,
}

impl NonconvexChain {
    pub fn new(n: usize) -> Self {
        let h = 1.0 / (n as f64 + 1.0);
        let forcing =
            DVector::from_fn(n, |i, _| h * (std::f64::consts::PI * (i + 1) as f64 * h).sin());
        Self { n, h, forcing }
    }

    pub fn with_forcing(forcing: DVector<f64>) -> Self {
        let n = forcing.len();
        Self {
            n,
            h: 1.0 / (n as f64 + 1.0),
            forcing,
        }
    }

    /// `4/h + h`, bounding the Hessian norm everywhere.
    pub fn lipschitz_bound(&self) -> f64 {
        4.0 / self.h + self.h
    }

    fn padded(&self, u: &DVector<f64>, k: usize) -> f64 {
        if k == 0 || k > self.n {
            0.0
        } else {
            u[k - 1]
        }
    }
}

impl Objective for NonconvexChain {
    fn dim(&self) -> usize {
        self.n
    }

    fn gradient(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.n, u.len(), "chain input")?;
        let mut g = DVector::from_fn(self.n, |i, _| -self.h * u[i].sin() - self.forcing[i]);
        for k in 0..=self.n {
            let d = (self.padded(u, k + 1) - self.padded(u, k)) / self.h;
            let t = d / (1.0 + d * d).sqrt();
            if k >= 1 {
                g[k - 1] -= t;
            }
            if k < self.n {
                g[k] += t;
            }
        }
        Ok(g)
    }

    fn value(&self, u: &DVector<f64>) -> Option<f64> {
        let arc: f64 = (0..=self.n)
            .map(|k| {
                let d = (self.padded(u, k + 1) - self.padded(u, k)) / self.h;
                self.h * (1.0 + d * d).sqrt()
            })
            .sum();
        let wave: f64 = u.iter().map(|x| self.h * x.cos()).sum();
        Some(arc + wave - self.forcing.dot(u))
    }
}

/// Nonconvex elastic chain with `levels` nested grids. The arc length
/// dominates `|φᵀu|` because `‖φ‖₁ < 2`, so `f ≥ −1` everywhere.
pub fn nonconvex_chain_1d(n_fine: usize, levels: usize) -> Result<ProblemHierarchy> {
    let dims = check_dyadic(n_fine, levels)?;
    let transfers = dirichlet_operators(&dims)?;
    let objectives: Vec<Arc<dyn Objective>> = dims
        .iter()
        .map(|&n| Arc::new(NonconvexChain::new(n)) as Arc<dyn Objective>)
        .collect();
    let lipschitz = NonconvexChain::new(n_fine).lipschitz_bound();
    Ok(ProblemHierarchy {
        name: "nonconvex_chain_1d".to_string(),
        hierarchy: LevelHierarchy::new(objectives, transfers)?,
        lipschitz: Some(lipschitz),
        lipschitz_exact: false,
        f_low: Some(-1.0),
        dataset_size: None,
        x0: DVector::zeros(n_fine),
    })
}

/// Continuous-depth residual network for regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResNetSpec {
    /// Layers `K` at the finest level; coarser levels use `K_{ℓ-1} = (K_ℓ+1)/2`.
    pub layers: usize,
    pub levels: usize,
    pub horizon: f64,
    pub width: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for ResNetSpec {
    fn default() -> Self {
        Self {
            layers: 9,
            levels: 3,
            horizon: 3.0,
            width: 4,
            n_in: 2,
            n_out: 2,
            beta1: 1e-4,
            beta2: 1e-4,
        }
    }
}

impl ResNetSpec {
    /// Layer counts, coarse to fine.
    pub fn layer_counts(&self) -> Result<Vec<usize>> {
        if self.levels == 0 {
            return Err(MoffoError::InvalidConfig("levels must be positive".to_string()));
        }
        let mut counts = vec![self.layers];
        for _ in 1..self.levels {
            let k = *counts.last().expect("nonempty");
            if k < 3 || k % 2 == 0 {
                return Err(MoffoError::InvalidConfig(format!(
                    "{} layers cannot be coarsened {} times",
                    self.layers,
                    self.levels - 1
                )));
            }
            counts.push((k + 1) / 2);
        }
        counts.reverse();
        Ok(counts)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MoffoError::InvalidConfig(m.to_string()));
        if self.layers < 2 || self.layers > 17 {
            return bad("layers must lie in 2..=17");
        }
        if self.width == 0 || self.width > 16 {
            return bad("width must lie in 1..=16");
        }
        if self.n_in == 0 || self.n_out == 0 {
            return bad("input and output dimensions must be positive");
        }
        if !(self.horizon > 0.0) || !(self.beta1 >= 0.0) || !(self.beta2 >= 0.0) {
            return bad("horizon must be positive and regularization nonnegative");
        }
        self.layer_counts().map(|_| ())
    }

    /// Parameters of one layer: `W_k` (row-major) then `b_k`.
    pub fn layer_block(&self) -> usize {
        self.width * self.width + self.width
    }

    /// Parameters shared by all levels: `Q`, `W_T`, `b_T`.
    pub fn shared_len(&self) -> usize {
        self.width * self.n_in + self.n_out * self.width + self.n_out
    }

    pub fn param_len(&self, layers: usize) -> usize {
        layers * self.layer_block() + self.shared_len()
    }
}

/// Inputs `y_s ∈ [−1,1]^{n_in}` and targets `c_s = sin(M y_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn synthetic(n_samples: usize, n_in: usize, n_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<f64> = (0..n_out * n_in)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let inputs: Vec<Vec<f64>> = (0..n_samples)
            .map(|_| (0..n_in).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let targets = inputs
            .iter()
            .map(|y| {
                (0..n_out)
                    .map(|o| (0..n_in).map(|i| m[o * n_in + i] * y[i]).sum::<f64>().sin())
                    .collect()
            })
            .collect();
        Self { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// CSV with columns `sample_id, y_0.., c_0..`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| MoffoError::Oracle(format!("dataset CSV: {e}"));
        let mut w = csv::Writer::from_writer(out);
        let n_in = self.inputs.first().map_or(0, Vec::len);
        let n_out = self.targets.first().map_or(0, Vec::len);
        let mut header = vec!["sample_id".to_string()];
        header.extend((0..n_in).map(|i| format!("y_{i}")));
        header.extend((0..n_out).map(|i| format!("c_{i}")));
        w.write_record(&header).map_err(io)?;
        for (s, (y, c)) in self.inputs.iter().zip(&self.targets).enumerate() {
            let mut row = vec![s.to_string()];
            row.extend(y.iter().chain(c).map(|v| format!("{v:e}")));
            w.write_record(&row).map_err(io)?;
        }
        w.flush()
            .map_err(|e| MoffoError::Oracle(format!("dataset CSV: {e}")))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let io = |e: csv::Error| MoffoError::Oracle(format!("dataset CSV: {e}"));
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(io)?.clone();
        let n_in = header.iter().filter(|h| h.starts_with("y_")).count();
        let n_out = header.iter().filter(|h| h.starts_with("c_")).count();
        if header.len() != 1 + n_in + n_out {
            return Err(MoffoError::Oracle("unexpected dataset columns".to_string()));
        }
        let mut data = Dataset {
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        for record in r.records() {
            let record = record.map_err(io)?;
            let values = record
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| MoffoError::Oracle(format!("dataset CSV value {v:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            data.inputs.push(values[..n_in].to_vec());
            data.targets.push(values[n_in..].to_vec());
        }
        Ok(data)
    }
}

/// Mean-square regression loss of a forward-Euler residual network with
/// `layers` time points plus Tikhonov and smoothness regularization.
///
/// Parameter layout: `θ_0..θ_{K−1}` (each `W_k` row-major then `b_k`),
/// `Q`, `W_T`, `b_T`. Step `k` uses `θ_k`; `θ_{K−1}` enters only the
/// regularizer.
#[derive(Debug, Clone)]
pub struct ResNetObjective {
    spec: ResNetSpec,
    layers: usize,
    dt: f64,
    data: Arc<Dataset>,
}

struct Layout {
    block: usize,
    q: usize,
    wt: usize,
    bt: usize,
    len: usize,
}

impl ResNetObjective {
    pub fn new(spec: ResNetSpec, layers: usize, data: Arc<Dataset>) -> Result<Self> {
        if layers < 2 {
            return Err(MoffoError::InvalidDimension("at least two layers needed".to_string()));
        }
        if data.is_empty() {
            return Err(MoffoError::InvalidDimension("dataset is empty".to_string()));
        }
        for (y, c) in data.inputs.iter().zip(&data.targets) {
            check_len(spec.n_in, y.len(), "sample input")?;
            check_len(spec.n_out, c.len(), "sample target")?;
        }
        Ok(Self {
            dt: spec.horizon / (layers as f64 - 1.0),
            spec,
            layers,
            data,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    fn layout(&self) -> Layout {
        let s = &self.spec;
        let block = s.layer_block();
        let q = self.layers * block;
        let wt = q + s.width * s.n_in;
        let bt = wt + s.n_out * s.width;
        Layout {
            block,
            q,
            wt,
            bt,
            len: bt + s.n_out,
        }
    }

    /// States `q_0..q_{K−1}` and prediction for one sample.
    fn forward(&self, p: &[f64], y: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let (w, lay) = (self.spec.width, self.layout());
        let mut q0 = vec![0.0; w];
        for (i, qi) in q0.iter_mut().enumerate() {
            *qi = (0..self.spec.n_in).map(|j| p[lay.q + i * self.spec.n_in + j] * y[j]).sum();
        }
        let mut states = vec![q0];
        for k in 0..self.layers - 1 {
            let th = &p[k * lay.block..(k + 1) * lay.block];
            let q = &states[k];
            let next: Vec<f64> = (0..w)
                .map(|i| {
                    let z: f64 = (0..w).map(|j| th[i * w + j] * q[j]).sum::<f64>() + th[w * w + i];
                    q[i] + self.dt * z.tanh()
                })
                .collect();
            states.push(next);
        }
        let last = &states[self.layers - 1];
        let out = (0..self.spec.n_out)
            .map(|o| (0..w).map(|j| p[lay.wt + o * w + j] * last[j]).sum::<f64>() + p[lay.bt + o])
            .collect();
        (states, out)
    }

    /// Adds `scale·∇‖c − ĉ(y)‖²` to `g`.
    fn backward(&self, p: &[f64], y: &[f64], c: &[f64], scale: f64, g: &mut [f64]) {
        let (w, lay) = (self.spec.width, self.layout());
        let (states, out) = self.forward(p, y);
        let d_out: Vec<f64> = out.iter().zip(c).map(|(o, t)| 2.0 * scale * (o - t)).collect();
        let last = &states[self.layers - 1];
        let mut dq = vec![0.0; w];
        for (o, d) in d_out.iter().enumerate() {
            g[lay.bt + o] += d;
            for j in 0..w {
                g[lay.wt + o * w + j] += d * last[j];
                dq[j] += p[lay.wt + o * w + j] * d;
            }
        }
        for k in (0..self.layers - 1).rev() {
            let base = k * lay.block;
            let q = &states[k];
            let dz: Vec<f64> = (0..w)
                .map(|i| {
                    let z: f64 =
                        (0..w).map(|j| p[base + i * w + j] * q[j]).sum::<f64>() + p[base + w * w + i];
                    let a = z.tanh();
                    self.dt * dq[i] * (1.0 - a * a)
                })
                .collect();
            let mut dq_prev = dq.clone();
            for i in 0..w {
                g[base + w * w + i] += dz[i];
                for j in 0..w {
                    g[base + i * w + j] += dz[i] * q[j];
                    dq_prev[j] += p[base + i * w + j] * dz[i];
                }
            }
            dq = dq_prev;
        }
        for i in 0..w {
            for j in 0..self.spec.n_in {
                g[lay.q + i * self.spec.n_in + j] += dq[i] * y[j];
            }
        }
    }

    fn regularizer_value(&self, p: &[f64]) -> f64 {
        let (lay, s) = (self.layout(), &self.spec);
        let block = |k: usize| &p[k * lay.block..(k + 1) * lay.block];
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let mut r = 0.0;
        for k in 0..self.layers {
            r += self.dt * 0.5 * s.beta1 * sq(block(k));
        }
        for k in 0..self.layers - 1 {
            let diff: f64 = block(k + 1)
                .iter()
                .zip(block(k))
                .map(|(a, b)| ((a - b) / self.dt).powi(2))
                .sum();
            r += self.dt * 0.5 * s.beta2 * diff;
        }
        r + 0.5 * s.beta1 * sq(&p[lay.wt..lay.len])
    }

    fn regularizer_gradient(&self, p: &[f64], g: &mut [f64]) {
        let (lay, s) = (self.layout(), &self.spec);
        for k in 0..self.layers {
            for j in 0..lay.block {
                let idx = k * lay.block + j;
                let mut v = self.dt * s.beta1 * p[idx];
                if k > 0 {
                    v += s.beta2 / self.dt * (p[idx] - p[idx - lay.block]);
                }
                if k + 1 < self.layers {
                    v -= s.beta2 / self.dt * (p[idx + lay.block] - p[idx]);
                }
                g[idx] += v;
            }
        }
        for idx in lay.wt..lay.len {
            g[idx] += s.beta1 * p[idx];
        }
    }

    fn batch_gradient(&self, x: &DVector<f64>, samples: &[usize]) -> Result<DVector<f64>> {
        check_len(self.layout().len, x.len(), "network parameters")?;
        let p = x.as_slice();
        let mut g = vec![0.0; p.len()];
        let scale = 1.0 / samples.len() as f64;
        for &s in samples {
            if s >= self.data.len() {
                return Err(MoffoError::Oracle(format!("sample {s} out of range")));
            }
            self.backward(p, &self.data.inputs[s], &self.data.targets[s], scale, &mut g);
        }
        self.regularizer_gradient(p, &mut g);
        Ok(DVector::from_vec(g))
    }
}

impl Objective for ResNetObjective {
    fn dim(&self) -> usize {
        self.layout().len
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let all: Vec<usize> = (0..self.data.len()).collect();
        self.batch_gradient(x, &all)
    }

    fn value(&self, x: &DVector<f64>) -> Option<f64> {
        if x.len() != self.dim() {
            return None;
        }
        let p = x.as_slice();
        let loss: f64 = self
            .data
            .inputs
            .iter()
            .zip(&self.data.targets)
            .map(|(y, c)| {
                let (_, out) = self.forward(p, y);
                out.iter().zip(c).map(|(o, t)| (t - o).powi(2)).sum::<f64>()
            })
            .sum();
        Some(loss / self.data.len() as f64 + self.regularizer_value(p))
    }

    fn sample_count(&self) -> Option<usize> {
        Some(self.data.len())
    }

    fn sampled_gradient(&self, x: &DVector<f64>, indices: &[usize]) -> Result<DVector<f64>> {
        if indices.is_empty() {
            return Err(MoffoError::Oracle("empty minibatch".to_string()));
        }
        self.batch_gradient(x, indices)
    }
}

/// Piecewise linear interpolation in depth of every layer parameter from
/// `k_coarse` to `2k_coarse − 1` layers; shared parameters are copied.
pub fn build_depth_prolongation(
    k_coarse: usize,
    block: usize,
    shared: usize,
) -> Result<TransferOperator> {
    TransferOperator::layered(linear_interpolation_1d(k_coarse)?, block, shared, 0.5)
}

pub fn resnet_regression(spec: ResNetSpec, n_samples: usize, seed: u64) -> Result<ProblemHierarchy> {
    spec.validate()?;
    if n_samples == 0 || n_samples > 512 {
        return Err(MoffoError::InvalidConfig(format!(
            "n_samples must lie in 1..=512, got {n_samples}"
        )));
    }
    let counts = spec.layer_counts()?;
    let data = Arc::new(Dataset::synthetic(n_samples, spec.n_in, spec.n_out, seed));
    let objectives = counts
        .iter()
        .map(|&k| Ok(Arc::new(ResNetObjective::new(spec.clone(), k, data.clone())?) as Arc<dyn Objective>))
        .collect::<Result<Vec<_>>>()?;
    let transfers = counts[..counts.len() - 1]
        .iter()
        .map(|&k| Ok(Arc::new(build_depth_prolongation(k, spec.layer_block(), spec.shared_len())?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let n = spec.param_len(spec.layers);
    let x0 = DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        0.3 * z
    });
    Ok(ProblemHierarchy {
        name: "resnet_regression".to_string(),
        hierarchy: LevelHierarchy::new(objectives, transfers)?,
        lipschitz: None,
        lipschitz_exact: false,
        f_low: Some(0.0),
        dataset_size: Some(n_samples),
        x0,
    })
}

/// Largest relative error between the oracle gradient and central
/// differences with step `h`, measured as `|fd − g|/max(1, |g|)`. Uses
/// coordinates for `n ≤ 100` and 20 seeded random unit directions otherwise.
pub fn finite_difference_check(
    objective: &dyn Objective,
    x: &DVector<f64>,
    h: f64,
    seed: u64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(MoffoError::Domain(format!("step must be positive, got {h}")));
    }
    let n = objective.dim();
    check_len(n, x.len(), "finite-difference point")?;
    let g = objective.gradient(x)?;
    let value = |p: &DVector<f64>| {
        objective
            .value(p)
            .ok_or_else(|| MoffoError::Oracle("objective has no value oracle".to_string()))
    };
    let directions: Vec<DVector<f64>> = if n <= 100 {
        (0..n).map(|j| DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 })).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20)
            .map(|_| {
                let d = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                d.normalize()
            })
            .collect()
    };
    let mut worst: f64 = 0.0;
    for d in &directions {
        let fd = (value(&(x + d * h))? - value(&(x - d * h))?) / (2.0 * h);
        let exact = g.dot(d);
        worst = worst.max((fd - exact).abs() / exact.abs().max(1.0));
    }
    Ok(worst)
}

/// A built-in problem with its gradient-check settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProblemInfo {
    pub name: &'static str,
    pub description: &'static str,
    pub fd_step: f64,
    pub fd_tolerance: f64,
}

pub const REGISTRY: &[ProblemInfo] = &[
    ProblemInfo {
        name: "quadratic_2d",
        description: "f(x) = x'diag(1,2)x/2 from (3,-4), single level",
        fd_step: 1e-3,
        fd_tolerance: 1e-9,
    },
    ProblemInfo {
        name: "laplacian_1d",
        description: "1D Dirichlet Poisson quadratic on nested dyadic grids",
        fd_step: 1e-2,
        fd_tolerance: 1e-9,
    },
    ProblemInfo {
        name: "nonconvex_chain_1d",
        description: "elastic chain with cosine potential on nested dyadic grids",
        fd_step: 1e-6,
        fd_tolerance: 1e-6,
    },
    ProblemInfo {
        name: "resnet_regression",
        description: "forward-Euler tanh ResNet regression, depth-coarsened levels",
        fd_step: 1e-5,
        fd_tolerance: 1e-5,
    },
];

pub fn problem_info(name: &str) -> Option<&'static ProblemInfo> {
    REGISTRY.iter().find(|p| p.name == name)
}

/// Serializable problem selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub name: String,
    pub n_fine: Option<usize>,
    pub levels: Option<usize>,
    pub resnet: Option<ResNetSpec>,
    pub n_samples: Option<usize>,
    pub data_seed: Option<u64>,
    /// Minibatch fraction for sum-structured problems.
    pub minibatch: Option<f64>,
    /// Standard deviation of additive Gaussian gradient noise.
    pub gaussian_noise: Option<f64>,
    pub x0: Option<Vec<f64>>,
}

impl ProblemSpec {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.to_string(),
            n_fine: None,
            levels: None,
            resnet: None,
            n_samples: None,
            data_seed: None,
            minibatch: None,
            gaussian_noise: None,
            x0: None,
        }
    }

    /// Builds the hierarchy; `noise_seed` seeds the gradient noise stream.
    pub fn build(&self, noise_seed: u64) -> Result<ProblemHierarchy> {
        let unused = |field: &str, present: bool| {
            if present {
                Err(MoffoError::InvalidConfig(format!(
                    "problem.{field} does not apply to {}",
                    self.name
                )))
            } else {
                Ok(())
            }
        };
        let mut problem = match self.name.as_str() {
            "quadratic_2d" => {
                unused("n_fine", self.n_fine.is_some())?;
                unused("levels", self.levels.is_some_and(|l| l != 1))?;
                unused("resnet", self.resnet.is_some())?;
                unused("n_samples", self.n_samples.is_some())?;
                quadratic_2d()
            }
            "laplacian_1d" | "nonconvex_chain_1d" => {
                unused("resnet", self.resnet.is_some())?;
                unused("n_samples", self.n_samples.is_some())?;
                let n = self.n_fine.unwrap_or(255);
                let levels = self.levels.unwrap_or(3);
                if self.name == "laplacian_1d" {
                    laplacian_quadratic_1d(n, levels)?
                } else {
                    nonconvex_chain_1d(n, levels)?
                }
            }
            "resnet_regression" => {
                unused("n_fine", self.n_fine.is_some())?;
                let mut spec = self.resnet.clone().unwrap_or_default();
                if let Some(l) = self.levels {
                    spec.levels = l;
                }
                resnet_regression(spec, self.n_samples.unwrap_or(128), self.data_seed.unwrap_or(0))?
            }
            other => {
                return Err(MoffoError::InvalidConfig(format!(
                    "problem.name: unknown problem {other:?}"
                )))
            }
        };
        if let Some(x0) = &self.x0 {
            check_len(problem.x0.len(), x0.len(), "problem.x0")
                .map_err(|e| MoffoError::InvalidConfig(e.to_string()))?;
            problem.x0 = DVector::from_column_slice(x0);
        }
        match (self.minibatch, self.gaussian_noise) {
            (Some(_), Some(_)) => Err(MoffoError::InvalidConfig(
                "problem.minibatch and problem.gaussian_noise are exclusive".to_string(),
            )),
            (Some(f), None) => problem.with_minibatch(f, noise_seed),
            (None, Some(s)) => problem.with_gaussian_noise(s, noise_seed),
            (None, None) => Ok(problem),
        }
    }
}
