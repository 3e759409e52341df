//! The conditioned bridge Y^x, the G_t process with its Orlicz identity, and
//! two independent estimators of the density of X_{T0}.
//!
//! Everything here lives on one uniform grid over [0, T0]. The terminal
//! functional U = ∫ f dW is discretized as Σ_j F_j ΔW_j with F_j the cell
//! averages of f(T0, ·) taken from the same kernel tables that build the fBMs,
//! so a bridge pinned at U = z reproduces X_{T0} = x0 + Az exactly.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::girsanov::{GirsanovError, PsiOperator};
use crate::kernel::{sigma_squared, KernelError, KernelTable, MixedKernel, MixedProfile, TimeGrid, DEFAULT_PANELS};
use crate::noise::{brownian_increments, fbm_from_increments, sample_noise, NoiseError, RngSpec};
use crate::quad;
use crate::sde::{euler_solve, MixedSdeSpec, SdeError};
use crate::stats::{pairwise_sum, variance_estimate, Estimate};

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("need at least {min} paths, got {got}")]
    TooFewPaths { min: usize, got: usize },
    #[error("conditioning value has non-finite entries")]
    NonFinite,
    #[error("time {t} is not an interior grid node of [0, {t0}]")]
    Time { t: f64, t0: f64 },
    #[error("bridge weights vanish on the tail starting at cell {0}")]
    Degenerate(usize),
    #[error("degenerate bandwidth: {0}")]
    Bandwidth(String),
    #[error("envelope fit: {0}")]
    Fit(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Girsanov(#[from] GirsanovError),
}

/// Density estimation is limited to d ≤ 3.
pub const MAX_DENSITY_DIM: usize = 3;
/// Minimum forward ensemble for the kernel estimator.
pub const MIN_KDE_PATHS: usize = 10_000;
pub const BOOTSTRAP_RESAMPLES: usize = 20;
/// Ψ̂ standard errors above this fraction of Ψ̂ raise a warning.
pub const PSI_WARN_RATIO: f64 = 0.3;

const BOOTSTRAP_STREAM: u64 = 1 << 48;

/// Discrete bridge weights on one grid.
#[derive(Debug, Clone)]
pub struct BridgeWeights {
    grid: TimeGrid,
    f: Vec<f64>,
    tail: Vec<f64>,
    f_quad: Vec<f64>,
    t1: Arc<KernelTable>,
    t2: Arc<KernelTable>,
}

impl BridgeWeights {
    pub fn new(spec: &MixedSdeSpec, n: usize) -> Result<Self, DensityError> {
        spec.validate()?;
        let grid = spec.grid(n)?;
        let hp = spec.hp;
        let t1 = KernelTable::cached(hp.h1, grid)?;
        let t2 = KernelTable::cached(hp.h2, grid)?;
        let dt = grid.dt();
        let (r1, r2) = (t1.row(n), t2.row(n));
        let f: Vec<f64> = (0..n).map(|j| spec.a1 * r1[j] + spec.a2 * r2[j]).collect();
        let mut tail = vec![0.0; n + 1];
        for k in (0..n).rev() {
            tail[k] = tail[k + 1] + f[k] * f[k] * dt;
        }
        if let Some(k) = (0..n).find(|&k| !(tail[k] > 0.0 && tail[k].is_finite())) {
            return Err(DensityError::Degenerate(k));
        }
        let mk = MixedKernel::new(hp, spec.a1, spec.a2, grid.t_end)?;
        let f_quad = (0..n).into_par_iter().map(|j| cell_average(&mk, grid, j)).collect();
        Ok(Self { grid, f, tail, f_quad, t1, t2 })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// F_j, the cell averages of f(T0, ·) from the kernel tables.
    pub fn weights(&self) -> &[f64] {
        &self.f
    }

    /// S_k = Δ Σ_{j≥k} F_j², the discrete ∫_{t_k}^{T0} f².
    pub fn tail(&self) -> &[f64] {
        &self.tail
    }

    /// Grid-consistent σ²(T0) = S_0; the variance the simulated X_{T0} actually has.
    pub fn sigma2(&self) -> f64 {
        self.tail[0]
    }

    /// E[Y_{t_k}] / x = Δ Σ_{j<k} F_j / S_0.
    pub fn mean_factor(&self, k: usize) -> f64 {
        self.grid.dt() * pairwise_sum(&self.f[..k]) / self.tail[0]
    }

    /// Var(G_{t_k}) = F_k² (S_0 − S_k) / (S_k S_0).
    pub fn kappa_squared(&self, k: usize) -> f64 {
        let (s0, sk) = (self.tail[0], self.tail[k]);
        self.f[k] * self.f[k] * (s0 - sk) / (sk * s0)
    }

    /// One bridge conditioned on Σ_j F_j ΔY_j = z (per component).
    ///
    /// Every cell takes the exact Gaussian conditional step: drift
    /// F_k r_k / S_k with r_k = z − Σ_{j<k} F_j ΔY_j, and noise variance
    /// Δ(1 − F_k²Δ/S_k). Away from T0 this is Euler on the bridge equation;
    /// in the last cell the variance vanishes and the step pins the functional.
    pub fn sample(&self, z: &[f64], rng: RngSpec) -> Result<BridgePath, DensityError> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(DensityError::NonFinite);
        }
        let dw = brownian_increments(self.grid, z.len(), rng);
        Ok(self.run(z, &dw, self.grid.n))
    }

    fn run(&self, z: &[f64], dw: &[f64], cells: usize) -> BridgePath {
        let d = z.len();
        let n = self.grid.n;
        let dt = self.grid.dt();
        let s0 = self.tail[0];
        let mut dy = vec![0.0; cells * d];
        let mut y = vec![0.0; (cells + 1) * d];
        let mut g = vec![0.0; cells * d];
        let mut r = z.to_vec();
        for k in 0..cells {
            let (fk, sk) = (self.f[k], self.tail[k]);
            let gain = fk / sk;
            let c = (1.0 - fk * fk * dt / sk).max(0.0).sqrt();
            for i in 0..d {
                let drift = gain * r[i];
                g[k * d + i] = fk * z[i] / s0 - drift;
                let v = drift * dt + c * dw[k * d + i];
                dy[k * d + i] = v;
                y[(k + 1) * d + i] = y[k * d + i] + v;
                r[i] -= fk * v;
            }
        }
        let terminal_residual = if cells == n {
            (0..d)
                .map(|i| {
                    let terms: Vec<f64> = (0..n).map(|j| self.f_quad[j] * dy[j * d + i]).collect();
                    (pairwise_sum(&terms) - z[i]).abs()
                })
                .fold(0.0, f64::max)
        } else {
            f64::NAN
        };
        BridgePath { x: z.to_vec(), grid: self.grid, d, dy, y, g, terminal_residual }
    }
}

/// (1/Δ)∫_cell f(T0, u) du by a rule independent of the kernel tables.
fn cell_average(mk: &MixedKernel, grid: TimeGrid, j: usize) -> f64 {
    let n = grid.n;
    let dt = grid.dt();
    let (a, b) = (j as f64 * dt, (j + 1) as f64 * dt);
    let beyond = (n - j - 1) as f64 * dt;
    let f = |u: f64, _: f64, dr: f64| mk.eval_gap(u, beyond + dr);
    let (el, er) = (mk.left_exponent(), mk.right_exponent());
    let v = if j == 0 {
        quad::singular_left(f, a, b, el, 16)
    } else if j == n - 1 {
        quad::singular_right(f, a, b, er, 16)
    } else {
        quad::regular(f, a, b, 8)
    };
    v / dt
}

/// A bridge path on [0, T0]; all arrays node-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgePath {
    /// Conditioning value of ∫ f dY (already transformed by A⁻¹ where relevant).
    pub x: Vec<f64>,
    pub grid: TimeGrid,
    pub d: usize,
    /// ΔY_k, N·d.
    pub dy: Vec<f64>,
    /// Y_{t_k}, (N+1)·d, Y_0 = 0.
    pub y: Vec<f64>,
    /// G_{t_k} for k < N.
    pub g: Vec<f64>,
    /// |∫ f dY − x| (max over components) with f integrated per cell by quadrature.
    pub terminal_residual: f64,
}

impl BridgePath {
    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.d..(k + 1) * self.d]
    }
}

/// Bridge of the spec's noise on an N-cell grid, conditioned on ∫ f dY = x.
pub fn simulate_bridge(spec: &MixedSdeSpec, n: usize, x: &[f64], rng: RngSpec) -> Result<BridgePath, DensityError> {
    if x.len() != spec.d {
        return Err(DensityError::Dimension(format!("x has length {}, expected {}", x.len(), spec.d)));
    }
    BridgeWeights::new(spec, n)?.sample(x, rng)
}

/// MC law of G_t against κ_t².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GReport {
    pub t: f64,
    pub node: usize,
    /// κ_t² from the continuum profile.
    pub kappa2: f64,
    /// κ_t² of the discrete bridge.
    pub kappa2_grid: f64,
    pub variance: Vec<Estimate>,
    /// E[exp(3G²/(8κ²))], d = 1 only; equals 2.
    pub orlicz: Option<Estimate>,
}

impl GReport {
    pub fn variance_ok(&self, k: f64) -> bool {
        self.variance.iter().all(|e| e.within(self.kappa2, k))
    }

    pub fn orlicz_ok(&self, rel: f64) -> bool {
        self.orlicz.is_none_or(|e| (e.mean - 2.0).abs() <= rel * 2.0)
    }
}

/// Var(G_t) and, for d = 1, the Orlicz identity, from `n_paths` partial bridges.
pub fn g_variance_check(
    spec: &MixedSdeSpec,
    n: usize,
    t: f64,
    n_paths: usize,
    master_seed: u64,
) -> Result<GReport, DensityError> {
    let w = BridgeWeights::new(spec, n)?;
    let grid = w.grid;
    let k = match grid.index_of(t) {
        Some(k) if k > 0 && k < n => k,
        _ => return Err(DensityError::Time { t, t0: grid.t_end }),
    };
    if n_paths < 2 {
        return Err(DensityError::TooFewPaths { min: 2, got: n_paths });
    }
    let d = spec.d;
    let z = vec![0.0; d];
    let sd = grid.dt().sqrt();
    let samples: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .flat_map_iter(|p| {
            // the same stream prefix simulate_bridge would draw
            let mut r = RngSpec::new(master_seed, p as u64).rng();
            let dw: Vec<f64> = (0..k * d).map(|_| sd * r.sample::<f64, _>(StandardNormal)).collect();
            let mut g = vec![0.0; d];
            partial_g(&w, &z, &dw, k, &mut g);
            g
        })
        .collect();
    let profile = MixedProfile::new(spec.hp, spec.a1, spec.a2, grid.t_end, DEFAULT_PANELS)?;
    let kappa2 = profile.kappa_squared(t)?;
    let variance = (0..d)
        .map(|i| {
            let c: Vec<f64> = samples.iter().skip(i).step_by(d).copied().collect();
            variance_estimate(&c)
        })
        .collect();
    let orlicz = (d == 1).then(|| {
        let e: Vec<f64> = samples.iter().map(|g| (3.0 * g * g / (8.0 * kappa2)).exp()).collect();
        Estimate::from_samples(&e)
    });
    Ok(GReport { t, node: k, kappa2, kappa2_grid: w.kappa_squared(k), variance, orlicz })
}

/// G at node k after running the first k cells.
fn partial_g(w: &BridgeWeights, z: &[f64], dw: &[f64], k: usize, out: &mut [f64]) {
    let d = z.len();
    let dt = w.grid.dt();
    let s0 = w.tail[0];
    let mut r = z.to_vec();
    for c in 0..k {
        let (fc, sc) = (w.f[c], w.tail[c]);
        let gain = fc / sc;
        let sd = (1.0 - fc * fc * dt / sc).max(0.0).sqrt();
        for i in 0..d {
            let v = gain * r[i] * dt + sd * dw[c * d + i];
            r[i] -= fc * v;
        }
    }
    for i in 0..d {
        out[i] = w.f[k] * (z[i] / s0 - r[i] / w.tail[k]);
    }
}

/// E[exp(I²/R²)] for I = ∫ t^{1/2−H} |G_t| dt and R² = (8/3) J², J = ∫ t^{1/2−H} κ_t dt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralOrliczReport {
    pub t0: f64,
    pub j: f64,
    pub r2: f64,
    pub moment: Estimate,
}

impl IntegralOrliczReport {
    /// The bound E[exp(I²/R²)] ≤ 2 holds within k standard errors.
    pub fn ok(&self, k: f64) -> bool {
        self.moment.mean <= 2.0 + k * self.moment.se
    }
}

/// Orlicz bound for the time integral of |G_t| (d = 1; H = H_min).
pub fn integral_orlicz_check(
    spec: &MixedSdeSpec,
    n: usize,
    n_paths: usize,
    master_seed: u64,
) -> Result<IntegralOrliczReport, DensityError> {
    if spec.d != 1 {
        return Err(DensityError::Dimension(format!("the integral check is scalar, d = {}", spec.d)));
    }
    let w = BridgeWeights::new(spec, n)?;
    let grid = w.grid;
    let dt = grid.dt();
    let p = 0.5 - spec.hp.h_min();
    let avg: Vec<f64> = (0..n).map(|k| cell_power_average(&grid, k, p)).collect();
    let profile = MixedProfile::new(spec.hp, spec.a1, spec.a2, grid.t_end, DEFAULT_PANELS)?;
    let j = profile.j_integral(spec.hp.h_min())?;
    let r2 = 8.0 / 3.0 * j * j;
    let samples: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|q| {
            let path = w.sample(&[0.0], RngSpec::new(master_seed, q as u64))?;
            let terms: Vec<f64> = (0..n).map(|k| avg[k] * path.g[k].abs() * dt).collect();
            let i = pairwise_sum(&terms);
            Ok((i * i / r2).exp())
        })
        .collect::<Result<_, DensityError>>()?;
    Ok(IntegralOrliczReport { t0: grid.t_end, j, r2, moment: Estimate::from_samples(&samples) })
}

/// (1/Δ)∫_cell t^p dt.
fn cell_power_average(grid: &TimeGrid, k: usize, p: f64) -> f64 {
    if p == 0.0 {
        return 1.0;
    }
    let dt = grid.dt();
    let (a, b) = (k as f64 * dt, (k + 1) as f64 * dt);
    (b.powf(p + 1.0) - a.powf(p + 1.0)) / ((p + 1.0) * dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityMethod {
    Kde,
    Girsanov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    /// H = n^{−2/(d+4)} Ĉ.
    #[default]
    Scott,
    /// H = (4/(d+2))^{2/(d+4)} n^{−2/(d+4)} Ĉ.
    Silverman,
}

impl BandwidthRule {
    fn factor(&self, n: usize, d: usize) -> f64 {
        let e = 1.0 / (d as f64 + 4.0);
        let s = (n as f64).powf(-e);
        let f = match self {
            Self::Scott => s,
            Self::Silverman => (4.0 / (d as f64 + 2.0)).powf(e) * s,
        };
        f * f
    }
}

/// Density values at a set of points with Monte Carlo errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub method: DensityMethod,
    pub eval_points: Vec<Vec<f64>>,
    pub p_hat: Vec<f64>,
    pub std_err: Vec<f64>,
    /// σ²(T0) of the simulation grid.
    pub sigma2: f64,
    /// σ²(T0) of the continuum kernel.
    pub sigma2_continuum: f64,
    /// Σ = Aσ²Aᵀ, row-major.
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub n_paths: usize,
    pub n_steps: usize,
    /// KDE bandwidth matrix.
    pub bandwidth: Option<Vec<Vec<f64>>>,
    /// Ψ̂ per point for the Girsanov estimator.
    pub psi_hat: Option<Vec<Estimate>>,
    pub warnings: Vec<String>,
}

impl DensityEstimate {
    pub fn d(&self) -> usize {
        self.x0.len()
    }
}

fn check_points(spec: &MixedSdeSpec, points: &[Vec<f64>]) -> Result<(), DensityError> {
    if spec.d > MAX_DENSITY_DIM {
        return Err(DensityError::Dimension(format!("density estimation needs d ≤ {MAX_DENSITY_DIM}, got {}", spec.d)));
    }
    if let Some(p) = points.iter().find(|p| p.len() != spec.d) {
        return Err(DensityError::Dimension(format!("evaluation point of length {}, expected {}", p.len(), spec.d)));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DensityError::NonFinite);
    }
    Ok(())
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Analytic N(mean, Σ) density through a Cholesky factor.
#[derive(Debug, Clone)]
struct Gaussian {
    mean: Vec<f64>,
    l: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    fn new(mean: Vec<f64>, cov: &DMatrix<f64>) -> Option<Self> {
        let l = cov.clone().cholesky()?.l();
        let d = mean.len() as f64;
        let log_det: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum();
        Some(Self { mean, l, log_norm: -0.5 * d * (2.0 * std::f64::consts::PI).ln() - log_det })
    }

    fn log_pdf_at(&self, x: &[f64], centre: &[f64]) -> f64 {
        let d = x.len();
        let mut u = [0.0; MAX_DENSITY_DIM];
        let mut q = 0.0;
        for i in 0..d {
            let mut s = x[i] - centre[i];
            for j in 0..i {
                s -= self.l[(i, j)] * u[j];
            }
            u[i] = s / self.l[(i, i)];
            q += u[i] * u[i];
        }
        self.log_norm - 0.5 * q
    }

    fn pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf_at(x, &self.mean).exp()
    }
}

/// X_{T0} of the forward Euler scheme, `n_paths` streams, node-major.
pub fn forward_terminal(spec: &MixedSdeSpec, n: usize, n_paths: usize, master_seed: u64) -> Result<Vec<f64>, DensityError> {
    spec.validate()?;
    let grid = spec.grid(n)?;
    let d = spec.d;
    let rows: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let noise = sample_noise(spec.hp, grid, d, RngSpec::new(master_seed, p as u64))?;
            let path = euler_solve(spec, noise)?;
            Ok(path.x_at(n).to_vec())
        })
        .collect::<Result<_, DensityError>>()?;
    Ok(rows.concat())
}

/// Gaussian kernel density estimate from a sample.
#[derive(Debug, Clone)]
pub struct KdeModel {
    d: usize,
    samples: Vec<f64>,
    bandwidth: DMatrix<f64>,
    kernel: Gaussian,
}

impl KdeModel {
    pub fn new(samples: Vec<f64>, d: usize, rule: BandwidthRule) -> Result<Self, DensityError> {
        if d == 0 || d > MAX_DENSITY_DIM || samples.len() % d != 0 {
            return Err(DensityError::Dimension(format!("{} values for d = {d}", samples.len())));
        }
        let n = samples.len() / d;
        if n < 2 {
            return Err(DensityError::TooFewPaths { min: 2, got: n });
        }
        let mean: Vec<f64> = (0..d)
            .map(|i| pairwise_sum(&samples.iter().skip(i).step_by(d).copied().collect::<Vec<_>>()) / n as f64)
            .collect();
        let cov = DMatrix::from_fn(d, d, |i, j| {
            let prods: Vec<f64> =
                samples.chunks_exact(d).map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).collect();
            pairwise_sum(&prods) / (n - 1) as f64
        });
        let bandwidth = cov * rule.factor(n, d);
        let kernel = Gaussian::new(vec![0.0; d], &bandwidth)
            .ok_or_else(|| DensityError::Bandwidth("sample covariance is not positive definite".into()))?;
        if !kernel.log_norm.is_finite() {
            return Err(DensityError::Bandwidth("sample covariance is singular".into()));
        }
        Ok(Self { d, samples, bandwidth, kernel })
    }

    pub fn bandwidth(&self) -> &DMatrix<f64> {
        &self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn kernel_values(&self, x: &[f64]) -> Vec<f64> {
        self.samples.chunks_exact(self.d).map(|s| self.kernel.log_pdf_at(x, s).exp()).collect()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        pairwise_sum(&self.kernel_values(x)) / self.len() as f64
    }

    /// Estimates at `points` with bootstrap standard errors (bandwidth held fixed).
    pub fn evaluate(&self, points: &[Vec<f64>], resamples: usize, master_seed: u64) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let kv: Vec<Vec<f64>> = points.par_iter().map(|x| self.kernel_values(x)).collect();
        let p_hat: Vec<f64> = kv.iter().map(|v| pairwise_sum(v) / n as f64).collect();
        let boots: Vec<Vec<f64>> = (0..resamples as u64)
            .into_par_iter()
            .map(|b| {
                let mut r = RngSpec::new(master_seed, BOOTSTRAP_STREAM + b).rng();
                let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
                kv.iter()
                    .map(|v| pairwise_sum(&idx.iter().map(|&i| v[i]).collect::<Vec<_>>()) / n as f64)
                    .collect()
            })
            .collect();
        let se = (0..points.len())
            .map(|p| {
                let col: Vec<f64> = boots.iter().map(|b| b[p]).collect();
                if col.len() < 2 {
                    return f64::NAN;
                }
                let m = pairwise_sum(&col) / col.len() as f64;
                let dev: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
                (pairwise_sum(&dev) / (col.len() - 1) as f64).sqrt()
            })
            .collect();
        (p_hat, se)
    }
}

fn sigma_parts(spec: &MixedSdeSpec, sigma2: f64) -> DMatrix<f64> {
    let a = spec.a();
    &a * a.transpose() * sigma2
}

/// Kernel density estimate of X_{T0} from a forward Euler ensemble.
pub fn estimate_density_kde(
    spec: &MixedSdeSpec,
    n: usize,
    eval_points: &[Vec<f64>],
    n_paths: usize,
    rule: BandwidthRule,
    master_seed: u64,
) -> Result<DensityEstimate, DensityError> {
    spec.validate()?;
    check_points(spec, eval_points)?;
    if n_paths < MIN_KDE_PATHS {
        return Err(DensityError::TooFewPaths { min: MIN_KDE_PATHS, got: n_paths });
    }
    let w = BridgeWeights::new(spec, n)?;
    let samples = forward_terminal(spec, n, n_paths, master_seed)?;
    let model = KdeModel::new(samples, spec.d, rule)?;
    let (p_hat, std_err) = model.evaluate(eval_points, BOOTSTRAP_RESAMPLES, master_seed);
    Ok(DensityEstimate {
        method: DensityMethod::Kde,
        eval_points: eval_points.to_vec(),
        p_hat,
        std_err,
        sigma2: w.sigma2(),
        sigma2_continuum: sigma_squared(spec.hp, spec.a1, spec.a2, spec.t_end, DEFAULT_PANELS)?,
        sigma: to_rows(&sigma_parts(spec, w.sigma2())),
        x0: spec.x0.clone(),
        n_paths,
        n_steps: n,
        bandwidth: Some(to_rows(model.bandwidth())),
        psi_hat: None,
        warnings: Vec::new(),
    })
}

/// p(x) at one point from the bridge representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointDensity {
    pub x: Vec<f64>,
    pub p: f64,
    pub std_err: f64,
    /// φ_Σ(x).
    pub gaussian: f64,
    pub psi: Estimate,
    pub warning: Option<String>,
}

/// Girsanov estimator p(x) = φ_Σ(x) Ψ̂(x) with shared grid objects.
#[derive(Debug, Clone)]
pub struct GirsanovEstimator {
    spec: MixedSdeSpec,
    weights: BridgeWeights,
    op: Option<PsiOperator>,
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    gaussian: Gaussian,
    psi_avg: Vec<f64>,
    energy_avg: Vec<f64>,
}

impl GirsanovEstimator {
    pub fn new(spec: &MixedSdeSpec, n: usize) -> Result<Self, DensityError> {
        check_points(spec, &[])?;
        let weights = BridgeWeights::new(spec, n)?;
        let grid = weights.grid;
        // zero drift gives ψ ≡ 0 without any construction
        let op = if spec.drift.is_zero() { None } else { Some(PsiOperator::new(spec, grid)?) };
        let p = op.as_ref().map_or(0.0, |o| o.psi_power());
        let psi_avg = (0..n).map(|k| cell_power_average(&grid, k, p)).collect();
        let energy_avg = (0..n).map(|k| cell_power_average(&grid, k, 2.0 * p)).collect();
        let cov = sigma_parts(spec, weights.sigma2());
        let gaussian = Gaussian::new(spec.x0.clone(), &cov)
            .ok_or_else(|| DensityError::Dimension("Σ = Aσ²Aᵀ is not positive definite".into()))?;
        Ok(Self { spec: spec.clone(), weights, op, a: spec.a(), a_inv: spec.a_inv(), gaussian, psi_avg, energy_avg })
    }

    pub fn sigma2(&self) -> f64 {
        self.weights.sigma2()
    }

    pub fn weights(&self) -> &BridgeWeights {
        &self.weights
    }

    /// Conditioning value z = A⁻¹(x − x0) of the bridge.
    pub fn conditioning_value(&self, x: &[f64]) -> Vec<f64> {
        let d = self.spec.d;
        (0..d).map(|i| (0..d).map(|j| self.a_inv[(i, j)] * (x[j] - self.spec.x0[j])).sum()).collect()
    }

    /// log of the Girsanov weight exp(Σ⟨ψ̄_k, ΔY_k⟩ − ½Σ|ψ̄_k|²Δ) along one bridge.
    pub fn log_weight(&self, path: &BridgePath) -> f64 {
        let Some(op) = &self.op else { return 0.0 };
        let d = self.spec.d;
        let grid = self.weights.grid;
        let n = grid.n;
        let dt = grid.dt();
        let b1 = fbm_from_increments(&self.weights.t1, &path.dy, d);
        let b2 = fbm_from_increments(&self.weights.t2, &path.dy, d);
        let mut h = vec![0.0; (n + 1) * d];
        let mut x = vec![0.0; d];
        for k in 0..=n {
            for i in 0..d {
                let mut s = self.spec.x0[i];
                for j in 0..d {
                    s += self.a[(i, j)] * (self.spec.a1 * b1[k * d + j] + self.spec.a2 * b2[k * d + j]);
                }
                x[i] = s;
            }
            self.spec.drift.eval(grid.node(k), &x, &mut h[k * d..(k + 1) * d]);
        }
        let g = op.apply(&h, d);
        let mut stoch = Vec::with_capacity(n);
        let mut energy = Vec::with_capacity(n);
        for k in 0..n {
            let gk = &g[k * d..(k + 1) * d];
            let dy = &path.dy[k * d..(k + 1) * d];
            stoch.push(self.psi_avg[k] * gk.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>());
            energy.push(self.energy_avg[k] * gk.iter().map(|v| v * v).sum::<f64>() * dt);
        }
        pairwise_sum(&stoch) - 0.5 * pairwise_sum(&energy)
    }

    /// Ψ̂(x) over `n_paths` bridges.
    pub fn psi_hat(&self, x: &[f64], n_paths: usize, master_seed: u64) -> Result<Estimate, DensityError> {
        check_points(&self.spec, &[x.to_vec()])?;
        if self.op.is_none() {
            return Ok(Estimate { mean: 1.0, se: 0.0, n: n_paths });
        }
        let z = self.conditioning_value(x);
        let w: Vec<f64> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let path = self.weights.sample(&z, RngSpec::new(master_seed, p as u64))?;
                Ok(self.log_weight(&path).exp())
            })
            .collect::<Result<_, DensityError>>()?;
        Ok(Estimate::from_samples(&w))
    }

    pub fn density(&self, x: &[f64], n_paths: usize, master_seed: u64) -> Result<PointDensity, DensityError> {
        let psi = self.psi_hat(x, n_paths, master_seed)?;
        let gaussian = self.gaussian.pdf(x);
        let warning = (psi.se > PSI_WARN_RATIO * psi.mean.abs()).then(|| {
            format!("Ψ̂ at {x:?} has standard error {:.3e} > {PSI_WARN_RATIO}·Ψ̂ = {:.3e}", psi.se, psi.mean)
        });
        Ok(PointDensity { x: x.to_vec(), p: gaussian * psi.mean, std_err: gaussian * psi.se, gaussian, psi, warning })
    }
}

/// Girsanov density estimate at one point.
pub fn estimate_density_girsanov(
    spec: &MixedSdeSpec,
    n: usize,
    x: &[f64],
    n_paths: usize,
    master_seed: u64,
) -> Result<PointDensity, DensityError> {
    GirsanovEstimator::new(spec, n)?.density(x, n_paths, master_seed)
}

/// Girsanov density estimates at several points, sharing the operator and bridge weights.
pub fn estimate_density_girsanov_points(
    spec: &MixedSdeSpec,
    n: usize,
    eval_points: &[Vec<f64>],
    n_paths: usize,
    master_seed: u64,
) -> Result<DensityEstimate, DensityError> {
    check_points(spec, eval_points)?;
    let est = GirsanovEstimator::new(spec, n)?;
    let pts: Vec<PointDensity> =
        eval_points.iter().map(|x| est.density(x, n_paths, master_seed)).collect::<Result<_, _>>()?;
    Ok(DensityEstimate {
        method: DensityMethod::Girsanov,
        eval_points: eval_points.to_vec(),
        p_hat: pts.iter().map(|p| p.p).collect(),
        std_err: pts.iter().map(|p| p.std_err).collect(),
        sigma2: est.sigma2(),
        sigma2_continuum: sigma_squared(spec.hp, spec.a1, spec.a2, spec.t_end, DEFAULT_PANELS)?,
        sigma: to_rows(&sigma_parts(spec, est.sigma2())),
        x0: spec.x0.clone(),
        n_paths,
        n_steps: n,
        bandwidth: None,
        psi_hat: Some(pts.iter().map(|p| p.psi).collect()),
        warnings: pts.into_iter().filter_map(|p| p.warning).collect(),
    })
}

/// Two-sided Gaussian envelope C'σ^{−d}e^{−C2'r²/σ²} ≤ p ≤ C1σ^{−d}e^{−C2 r²/σ²}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EnvelopeFit {
    pub C1: f64,
    pub C2: f64,
    pub C1p: f64,
    pub C2p: f64,
    /// Points outside either bound by more than 3 standard errors.
    pub violation_fraction: f64,
    pub violation_upper: f64,
    pub violation_lower: f64,
    /// Fit radius in units of σ.
    pub radius: f64,
    pub n_points: usize,
    pub sigma2: f64,
    /// Least-squares slope and intercept of log p̂ against −r²/σ².
    pub slope: f64,
    pub intercept: f64,
}

/// Radius (in σ) of the region used by the envelope fit.
pub const ENVELOPE_RADIUS: f64 = 3.0;
const ENVELOPE_MIN_POINTS: usize = 9;

/// Least-squares envelope through log p̂ = c − C r²/σ².
///
/// The slope is shared by both bounds; the upper intercept is the smallest
/// one lying on or above every point and the lower the largest on or below,
/// so the bounds are the tightest Gaussian profiles of that width.
pub fn fit_envelope(est: &DensityEstimate, x0: &[f64]) -> Result<EnvelopeFit, DensityError> {
    let d = x0.len();
    let sigma2 = est.sigma2;
    let sigma = sigma2.sqrt();
    let mut s = Vec::new();
    let mut y = Vec::new();
    let mut used = Vec::new();
    for (i, x) in est.eval_points.iter().enumerate() {
        if x.len() != d {
            return Err(DensityError::Dimension(format!("point of length {}, expected {d}", x.len())));
        }
        let r2: f64 = x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum();
        let p = est.p_hat[i];
        if r2.sqrt() <= ENVELOPE_RADIUS * sigma * (1.0 + 1e-12) && p > 0.0 && p.is_finite() {
            s.push(-r2 / sigma2);
            y.push(p.ln());
            used.push(i);
        }
    }
    let m = used.len();
    if m < ENVELOPE_MIN_POINTS {
        return Err(DensityError::Fit(format!("{m} usable points within {ENVELOPE_RADIUS}σ, need {ENVELOPE_MIN_POINTS}")));
    }
    let ms = pairwise_sum(&s) / m as f64;
    let my = pairwise_sum(&y) / m as f64;
    let sxx: Vec<f64> = s.iter().map(|v| (v - ms) * (v - ms)).collect();
    let sxy: Vec<f64> = s.iter().zip(&y).map(|(a, b)| (a - ms) * (b - my)).collect();
    let sxx = pairwise_sum(&sxx);
    if !(sxx > 0.0) {
        return Err(DensityError::Fit("points do not spread in |x − x0|".into()));
    }
    let slope = pairwise_sum(&sxy) / sxx;
    if !(slope > 0.0) {
        return Err(DensityError::Fit(format!("fitted decay rate {slope} is not positive")));
    }
    let intercept = my - slope * ms;
    let shifted: Vec<f64> = s.iter().zip(&y).map(|(a, b)| b - slope * a).collect();
    let up = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = shifted.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = sigma.powi(d as i32);
    let (mut vu, mut vl, mut v) = (0usize, 0usize, 0usize);
    for (q, &i) in used.iter().enumerate() {
        let (p, se) = (est.p_hat[i], est.std_err[i]);
        let eu = (up + slope * s[q]).exp();
        let el = (lo + slope * s[q]).exp();
        let bad_u = p - 3.0 * se > eu * (1.0 + 1e-12);
        let bad_l = p + 3.0 * se < el * (1.0 - 1e-12);
        vu += bad_u as usize;
        vl += bad_l as usize;
        v += (bad_u || bad_l) as usize;
    }
    Ok(EnvelopeFit {
        C1: up.exp() * scale,
        C2: slope,
        C1p: lo.exp() * scale,
        C2p: slope,
        violation_fraction: v as f64 / m as f64,
        violation_upper: vu as f64 / m as f64,
        violation_lower: vl as f64 / m as f64,
        radius: ENVELOPE_RADIUS,
        n_points: m,
        sigma2,
        slope,
        intercept,
    })
}

/// `count` equally spaced scalar points on [x0 − wσ, x0 + wσ].
pub fn line_points(x0: f64, sigma: f64, width: f64, count: usize) -> Vec<Vec<f64>> {
    if count == 1 {
        return vec![vec![x0]];
    }
    (0..count)
        .map(|i| vec![x0 - width * sigma + 2.0 * width * sigma * i as f64 / (count - 1) as f64])
        .collect()
}
