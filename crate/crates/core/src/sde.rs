//! Mixed SDE X_t = x0 + ∫b(s,X_s)ds + A(a1 B^{H1}_t + a2 B^{H2}_t), its Euler
//! solution and the conditionally Gaussian process Y(ε).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{HurstPair, KernelError, KernelTable, Regime, TimeGrid, VolterraKernel};
use crate::noise::{fbm_from_increments, holder_constant_vec, NoiseBundle, NoiseError};
use crate::quad;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("invalid specification: {0}")]
    Spec(String),
    #[error("drift validation failed: {0}")]
    Drift(String),
    #[error("noise does not match the specification: {0}")]
    Mismatch(String),
    #[error("{0} is not on the grid")]
    OffGrid(f64),
    #[error("need 0 < eps < t <= T, got eps = {eps}, t = {t}")]
    Window { eps: f64, t: f64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

/// Closed set of drift families; each has known sup-norm and regularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum DriftFamily {
    Zero,
    /// b = c.
    Constant { c: Vec<f64> },
    /// b_i = amplitude_i sin(frequency_i x_i).
    BoundedSin { amplitude: Vec<f64>, frequency: Vec<f64> },
    /// b_i = scale tanh(x_i).
    Tanh { scale: f64 },
    /// b_i = amplitude min(t, 1)^gamma sin(x_i); γ-Hölder in time.
    TimeModulated { amplitude: f64, gamma: f64 },
    /// b = slope x. Unbounded; only accepted by the relaxed validation.
    Linear { slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    #[serde(flatten)]
    pub family: DriftFamily,
    /// Declared space-Hölder exponent; defaults to the family's.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Declared time-Hölder exponent; defaults to the family's.
    #[serde(default)]
    pub gamma: Option<f64>,
}

impl DriftSpec {
    pub fn new(family: DriftFamily) -> Self {
        Self { family, beta: None, gamma: None }
    }

    pub fn zero() -> Self {
        Self::new(DriftFamily::Zero)
    }

    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.family {
            DriftFamily::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            DriftFamily::Constant { c } => out.copy_from_slice(c),
            DriftFamily::BoundedSin { amplitude, frequency } => {
                for i in 0..out.len() {
                    out[i] = amplitude[i] * (frequency[i] * x[i]).sin();
                }
            }
            DriftFamily::Tanh { scale } => {
                for i in 0..out.len() {
                    out[i] = scale * x[i].tanh();
                }
            }
            DriftFamily::TimeModulated { amplitude, gamma } => {
                let m = amplitude * t.min(1.0).max(0.0).powf(*gamma);
                for i in 0..out.len() {
                    out[i] = m * x[i].sin();
                }
            }
            DriftFamily::Linear { slope } => {
                for i in 0..out.len() {
                    out[i] = slope * x[i];
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        match &self.family {
            DriftFamily::Zero => true,
            DriftFamily::Constant { c } => c.iter().all(|v| *v == 0.0),
            DriftFamily::BoundedSin { amplitude, .. } => amplitude.iter().all(|v| *v == 0.0),
            DriftFamily::Tanh { scale } => *scale == 0.0,
            DriftFamily::TimeModulated { amplitude, .. } => *amplitude == 0.0,
            DriftFamily::Linear { slope } => *slope == 0.0,
        }
    }

    /// sup_{t,x} |b(t,x)| (Euclidean).
    pub fn sup_norm(&self, d: usize) -> f64 {
        let sd = (d as f64).sqrt();
        match &self.family {
            DriftFamily::Zero => 0.0,
            DriftFamily::Constant { c } => c.iter().map(|v| v * v).sum::<f64>().sqrt(),
            DriftFamily::BoundedSin { amplitude, .. } => amplitude.iter().map(|v| v * v).sum::<f64>().sqrt(),
            DriftFamily::Tanh { scale } => scale.abs() * sd,
            DriftFamily::TimeModulated { amplitude, .. } => amplitude.abs() * sd,
            DriftFamily::Linear { slope } => {
                if *slope == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// (β, γ) the family actually has, capped at 1.
    pub fn natural_regularity(&self) -> (f64, f64) {
        match &self.family {
            DriftFamily::TimeModulated { gamma, .. } => (1.0, gamma.min(1.0)),
            _ => (1.0, 1.0),
        }
    }

    pub fn declared_regularity(&self) -> (f64, f64) {
        let (b, g) = self.natural_regularity();
        (self.beta.unwrap_or(b), self.gamma.unwrap_or(g))
    }

    fn check_shape(&self, d: usize) -> Result<(), SdeError> {
        let bad = |what: &str| Err(SdeError::Spec(format!("{what} must have length d = {d}")));
        match &self.family {
            DriftFamily::Constant { c } if c.len() != d => bad("constant drift"),
            DriftFamily::BoundedSin { amplitude, frequency } if amplitude.len() != d || frequency.len() != d => {
                bad("bounded-sin amplitude and frequency")
            }
            DriftFamily::TimeModulated { gamma, .. } if !(*gamma > 0.0) => {
                Err(SdeError::Spec(format!("time exponent {gamma} must be positive")))
            }
            _ => Ok(()),
        }?;
        let (nb, ng) = self.natural_regularity();
        let (b, g) = self.declared_regularity();
        if !(b > 0.0 && b <= nb) {
            return Err(SdeError::Spec(format!("declared β = {b} outside (0, {nb}]")));
        }
        if !(g > 0.0 && g <= ng) {
            return Err(SdeError::Spec(format!("declared γ = {g} outside (0, {ng}]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSdeSpec {
    pub d: usize,
    pub x0: Vec<f64>,
    pub a1: f64,
    pub a2: f64,
    /// Row-major d×d.
    pub a_matrix: Vec<Vec<f64>>,
    pub t_end: f64,
    pub hp: HurstPair,
    pub drift: DriftSpec,
}

impl MixedSdeSpec {
    pub fn validate(&self) -> Result<(), SdeError> {
        if self.d == 0 {
            return Err(SdeError::Spec("d must be at least 1".into()));
        }
        if self.x0.len() != self.d {
            return Err(SdeError::Spec(format!("x0 has length {}, expected {}", self.x0.len(), self.d)));
        }
        if !(self.a1 != 0.0 && self.a2 != 0.0 && self.a1.is_finite() && self.a2.is_finite()) {
            return Err(SdeError::Spec(format!("a1 = {}, a2 = {} must be finite and nonzero", self.a1, self.a2)));
        }
        if self.a_matrix.len() != self.d || self.a_matrix.iter().any(|r| r.len() != self.d) {
            return Err(SdeError::Spec(format!("A must be {0}×{0}", self.d)));
        }
        let det = self.a().determinant();
        if !(det.abs() > 1e-12) {
            return Err(SdeError::Spec(format!("|det A| = {} must exceed 1e-12", det.abs())));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(SdeError::Spec(format!("horizon {} must be positive", self.t_end)));
        }
        HurstPair::new(self.hp.h1, self.hp.h2)?;
        self.drift.check_shape(self.d)
    }

    pub fn a(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.d, self.d, |i, j| self.a_matrix[i][j])
    }

    pub fn a_inv(&self) -> DMatrix<f64> {
        self.a().try_inverse().expect("validated A is invertible")
    }

    /// Spectral norm of A.
    pub fn a_norm(&self) -> f64 {
        self.a().singular_values().max()
    }

    pub fn grid(&self, n: usize) -> Result<TimeGrid, SdeError> {
        Ok(TimeGrid::new(self.t_end, n)?)
    }
}

/// Outcome of checking the drift against the regime's assumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub regime: Regime,
    pub h_min: f64,
    pub sup_norm: f64,
    pub beta: f64,
    pub gamma: f64,
    /// 1 - 1/(2H) when H = min(H1, H2) > 1/2.
    pub beta_lower: Option<f64>,
    /// H - 1/2 when H > 1/2.
    pub gamma_lower: Option<f64>,
    pub passed: bool,
    pub violations: Vec<String>,
}

/// Strict mode demands boundedness (and Hölder bounds for H > 1/2); relaxed
/// mode accepts linear growth in place of boundedness.
pub fn validate_drift(spec: &MixedSdeSpec, relaxed: bool) -> Result<DriftReport, SdeError> {
    spec.validate()?;
    let h = spec.hp.h_min();
    let sup = spec.drift.sup_norm(spec.d);
    let (beta, gamma) = spec.drift.declared_regularity();
    let mut violations = Vec::new();
    if !sup.is_finite() && !relaxed {
        violations.push("b must be bounded: ‖b‖∞ = ∞".to_string());
    }
    let (mut bl, mut gl) = (None, None);
    if h > 0.5 {
        let lb = 1.0 - 1.0 / (2.0 * h);
        let lg = h - 0.5;
        bl = Some(lb);
        gl = Some(lg);
        if !(beta > lb) {
            violations.push(format!("β = {beta} must exceed 1 - 1/(2H) = {lb:.6}"));
        }
        if !(gamma > lg) {
            violations.push(format!("γ = {gamma} must exceed H - 1/2 = {lg:.6}"));
        }
    }
    Ok(DriftReport {
        regime: spec.hp.regime(),
        h_min: h,
        sup_norm: sup,
        beta,
        gamma,
        beta_lower: bl,
        gamma_lower: gl,
        passed: violations.is_empty(),
        violations,
    })
}

/// Noise plus the solution at the nodes (node-major, `x[k*d + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub noise: NoiseBundle,
    pub x: Vec<f64>,
}

impl PathBundle {
    pub fn x_at(&self, k: usize) -> &[f64] {
        let d = self.noise.d;
        &self.x[k * d..(k + 1) * d]
    }
}

/// A(a1 B1_k + a2 B2_k) for every node.
pub fn noise_term(spec: &MixedSdeSpec, noise: &NoiseBundle) -> Vec<f64> {
    let d = spec.d;
    let a = spec.a();
    let mut out = vec![0.0; noise.b1.len()];
    for k in 0..=noise.grid.n {
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += a[(i, j)] * (spec.a1 * noise.b1[k * d + j] + spec.a2 * noise.b2[k * d + j]);
            }
            out[k * d + i] = s;
        }
    }
    out
}

/// Explicit Euler with left-point drift. The noise enters through the exact
/// node values, so X_k = x0 + Σ_{j<k} b(t_j, X_j)Δt + A(a1 B1_k + a2 B2_k).
pub fn euler_solve(spec: &MixedSdeSpec, noise: NoiseBundle) -> Result<PathBundle, SdeError> {
    spec.validate()?;
    if noise.d != spec.d {
        return Err(SdeError::Mismatch(format!("noise dimension {} vs d = {}", noise.d, spec.d)));
    }
    if (noise.grid.t_end - spec.t_end).abs() > 1e-12 * spec.t_end {
        return Err(SdeError::Mismatch(format!("grid horizon {} vs T = {}", noise.grid.t_end, spec.t_end)));
    }
    let d = spec.d;
    let grid = noise.grid;
    let dt = grid.dt();
    let nt = noise_term(spec, &noise);
    let mut x = vec![0.0; nt.len()];
    let mut drift_sum = vec![0.0; d];
    let mut b = vec![0.0; d];
    x[..d].copy_from_slice(&spec.x0);
    let zero = spec.drift.is_zero();
    for k in 1..=grid.n {
        if !zero {
            let (prev, _) = x.split_at(k * d);
            spec.drift.eval(grid.node(k - 1), &prev[(k - 1) * d..], &mut b);
            for i in 0..d {
                drift_sum[i] += b[i] * dt;
            }
        }
        for i in 0..d {
            x[k * d + i] = spec.x0[i] + drift_sum[i] + nt[k * d + i];
        }
    }
    Ok(PathBundle { noise, x })
}

/// Builds the noise bundle for given increments (used to freeze histories).
pub fn noise_from_increments(hp: HurstPair, grid: TimeGrid, d: usize, dw: Vec<f64>) -> Result<NoiseBundle, SdeError> {
    if dw.len() != grid.n * d {
        return Err(SdeError::Mismatch(format!("{} increments for N·d = {}", dw.len(), grid.n * d)));
    }
    let t1 = KernelTable::cached(hp.h1, grid)?;
    let t2 = KernelTable::cached(hp.h2, grid)?;
    let b1 = fbm_from_increments(&t1, &dw, d);
    let b2 = fbm_from_increments(&t2, &dw, d);
    Ok(NoiseBundle { grid, d, dw, b1, b2 })
}

/// Y(ε) at time t with its conditional law given the noise up to t - ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgpResult {
    pub t: f64,
    pub eps: f64,
    pub y: Vec<f64>,
    pub xi: Vec<f64>,
    /// AAᵀ ∫_{t-ε}^t f(t,s)² ds, row-major.
    pub eta2: Vec<f64>,
    /// Same with the integral replaced by the grid sum of squared cell averages.
    pub eta2_grid: Vec<f64>,
}

fn window(grid: &TimeGrid, t: f64, eps: f64) -> Result<(usize, usize), SdeError> {
    if !(eps > 0.0 && eps < t && t <= grid.t_end * (1.0 + 1e-12)) {
        return Err(SdeError::Window { eps, t });
    }
    let k = grid.index_of(t).ok_or(SdeError::OffGrid(t))?;
    let m = grid.index_of(t - eps).ok_or(SdeError::OffGrid(t - eps))?;
    if m == 0 || m >= k {
        return Err(SdeError::Window { eps, t });
    }
    Ok((k, m))
}

/// ∫_{t-ε}^t (a1 K1(t,s) + a2 K2(t,s)) (b1 K1(t,s) + b2 K2(t,s)) ds.
pub fn window_product(hp: HurstPair, a: (f64, f64), b: (f64, f64), t: f64, eps: f64) -> Result<f64, SdeError> {
    let k1 = VolterraKernel::new(hp.h1)?;
    let k2 = VolterraKernel::new(hp.h2)?;
    let er = 2.0 * k1.right_exponent().min(k2.right_exponent());
    let v = quad::composite(
        |u, _, dr| {
            let (x1, x2) = (k1.eval_gap(t, u, dr), k2.eval_gap(t, u, dr));
            (a.0 * x1 + a.1 * x2) * (b.0 * x1 + b.1 * x2)
        },
        t - eps,
        t,
        32,
        0.0,
        er,
        12,
        24,
    );
    Ok(v)
}

pub fn cgp(spec: &MixedSdeSpec, path: &PathBundle, t: f64, eps: f64) -> Result<CgpResult, SdeError> {
    let grid = path.noise.grid;
    let (k, m) = window(&grid, t, eps)?;
    let d = spec.d;
    let a = spec.a();
    let t1 = KernelTable::cached(spec.hp.h1, grid)?;
    let t2 = KernelTable::cached(spec.hp.h2, grid)?;
    let (r1k, r2k, r1m, r2m) = (t1.row(k), t2.row(k), t1.row(m), t2.row(m));
    let nb = &path.noise;
    let mut y = vec![0.0; d];
    let mut xi = vec![0.0; d];
    let xm = path.x_at(m);
    for i in 0..d {
        let mut yi = 0.0;
        let mut xii = 0.0;
        for j in 0..d {
            let db1 = nb.b1[k * d + j] - nb.b1[m * d + j];
            let db2 = nb.b2[k * d + j] - nb.b2[m * d + j];
            yi += a[(i, j)] * (spec.a1 * db1 + spec.a2 * db2);
            let mut past = 0.0;
            for l in 0..m {
                let wdiff = spec.a1 * (r1k[l] - r1m[l]) + spec.a2 * (r2k[l] - r2m[l]);
                past += wdiff * nb.dw[l * d + j];
            }
            xii += a[(i, j)] * past;
        }
        y[i] = xm[i] + yi;
        xi[i] = xm[i] + xii;
    }
    let ab = (spec.a1, spec.a2);
    let integral = window_product(spec.hp, ab, ab, t, eps)?;
    let dt = grid.dt();
    let grid_sum: f64 = (m..k).map(|l| (spec.a1 * r1k[l] + spec.a2 * r2k[l]).powi(2) * dt).sum();
    let aat = &a * a.transpose();
    let eta2 = aat.iter_row_major(integral);
    let eta2_grid = aat.iter_row_major(grid_sum);
    Ok(CgpResult { t, eps, y, xi, eta2, eta2_grid })
}

trait RowMajor {
    fn iter_row_major(&self, scale: f64) -> Vec<f64>;
}

impl RowMajor for DMatrix<f64> {
    fn iter_row_major(&self, scale: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for i in 0..self.nrows() {
            for j in 0..self.ncols() {
                v.push(self[(i, j)] * scale);
            }
        }
        v
    }
}

/// Conditional covariance of (Y(ε), Y'(ε)) for two equations sharing the noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCovariance {
    pub eta2: Vec<f64>,
    pub eta2_prime: Vec<f64>,
    /// A A'ᵀ ∫ f f', the upper-right block; the lower-left block is its transpose.
    pub lambda: Vec<f64>,
    /// Full 2d×2d matrix, row-major.
    pub sigma: Vec<f64>,
    pub min_eigenvalue: f64,
}

pub fn cgp_joint_covariance(spec: &MixedSdeSpec, other: &MixedSdeSpec, t: f64, eps: f64) -> Result<JointCovariance, SdeError> {
    spec.validate()?;
    other.validate()?;
    if spec.d != other.d || spec.hp != other.hp || spec.t_end != other.t_end {
        return Err(SdeError::Mismatch("both equations must share d, Hurst pair and horizon".into()));
    }
    if !(eps > 0.0 && eps < t && t <= spec.t_end) {
        return Err(SdeError::Window { eps, t });
    }
    let d = spec.d;
    let (a, ap) = (spec.a(), other.a());
    let (c, cp) = ((spec.a1, spec.a2), (other.a1, other.a2));
    let ff = window_product(spec.hp, c, c, t, eps)?;
    let fpfp = window_product(spec.hp, cp, cp, t, eps)?;
    let ffp = window_product(spec.hp, c, cp, t, eps)?;
    let e = &a * a.transpose() * ff;
    let ep = &ap * ap.transpose() * fpfp;
    let l = &a * ap.transpose() * ffp;
    let mut s = DMatrix::zeros(2 * d, 2 * d);
    s.view_mut((0, 0), (d, d)).copy_from(&e);
    s.view_mut((d, d), (d, d)).copy_from(&ep);
    s.view_mut((0, d), (d, d)).copy_from(&l);
    s.view_mut((d, 0), (d, d)).copy_from(&l.transpose());
    let min_eigenvalue = SymmetricEigen::new(s.clone()).eigenvalues.min();
    Ok(JointCovariance {
        eta2: e.iter_row_major(1.0),
        eta2_prime: ep.iter_row_major(1.0),
        lambda: l.iter_row_major(1.0),
        sigma: s.iter_row_major(1.0),
        min_eigenvalue,
    })
}

/// Empirical Hölder constants of X and both fBMs with the two bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub gamma: f64,
    pub c_x: f64,
    pub c_b1: f64,
    pub c_b2: f64,
    /// ‖A‖ max(|a1| C(B1), |a2| C(B2)), the bound as displayed.
    pub bound_displayed: f64,
    /// ‖b‖∞ T^{1-γ} + ‖A‖ (|a1| C(B1) + |a2| C(B2)), the bound the proof gives.
    pub bound_with_drift: f64,
}

pub fn holder_diagnostic(spec: &MixedSdeSpec, path: &PathBundle, gamma: f64) -> Result<HolderReport, SdeError> {
    if !(gamma > 0.0 && gamma < spec.hp.h_min()) {
        return Err(SdeError::Spec(format!("γ = {gamma} must lie in (0, min(H1, H2))")));
    }
    let grid = path.noise.grid;
    let d = spec.d;
    let c_x = holder_constant_vec(&grid, &path.x, d, gamma);
    let c_b1 = holder_constant_vec(&grid, &path.noise.b1, d, gamma);
    let c_b2 = holder_constant_vec(&grid, &path.noise.b2, d, gamma);
    let an = spec.a_norm();
    let (p1, p2) = (spec.a1.abs() * c_b1, spec.a2.abs() * c_b2);
    Ok(HolderReport {
        gamma,
        c_x,
        c_b1,
        c_b2,
        bound_displayed: an * p1.max(p2),
        bound_with_drift: spec.drift.sup_norm(d) * spec.t_end.powf(1.0 - gamma) + an * (p1 + p2),
    })
}

/// Gaussian log-density helper for the conditional law N(mean, cov).
pub fn gaussian_char_fn(u: &[f64], mean: &[f64], cov: &[f64]) -> (f64, f64) {
    let d = u.len();
    let uv = DVector::from_column_slice(u);
    let c = DMatrix::from_row_slice(d, d, cov);
    let quad_form = (uv.transpose() * &c * &uv)[(0, 0)];
    let phase: f64 = u.iter().zip(mean).map(|(a, b)| a * b).sum();
    let amp = (-0.5 * quad_form).exp();
    (amp * phase.cos(), amp * phase.sin())
}
