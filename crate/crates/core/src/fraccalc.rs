//! Riemann–Liouville calculus on uniform grids.
//!
//! Grid functions carry an explicit power: f(t) = t^p G(t) with G sampled at the
//! nodes. Weighted compositions such as s^{H-1/2} I^{H-1/2} s^{1/2-H} then shift p
//! exactly instead of sampling singular factors, and I^α maps t^p G to t^{p+α} G̃
//! with G̃ smooth whenever G is. Integrals use product-integration weights exact
//! for t^p times a piecewise-linear G.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use thiserror::Error;

use crate::kernel::{regular_order, KernelError, KernelTable, TimeGrid, VolterraKernel};
use crate::quad::{self, GaussLegendre};
use crate::specfun::{gamma_fn, rgamma};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FracError {
    #[error("order {0} outside the admissible range")]
    Order(f64),
    #[error("power {0} is not integrable at 0 (need p > -1)")]
    Power(f64),
    #[error("grid functions live on different grids")]
    GridMismatch,
    #[error("expected {expected} samples, got {got}")]
    Length { expected: usize, got: usize },
    #[error("non-finite sample at node {0}")]
    NonFinite(usize),
    #[error("inverse operator: {0}")]
    Inverse(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// f(t_k) = t_k^power · factor[k].
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: TimeGrid,
    power: f64,
    factor: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: TimeGrid, samples: Vec<f64>) -> Result<Self, FracError> {
        Self::with_power(grid, 0.0, samples)
    }

    pub fn with_power(grid: TimeGrid, power: f64, factor: Vec<f64>) -> Result<Self, FracError> {
        if factor.len() != grid.n + 1 {
            return Err(FracError::Length { expected: grid.n + 1, got: factor.len() });
        }
        if let Some(k) = factor.iter().position(|v| !v.is_finite()) {
            return Err(FracError::NonFinite(k));
        }
        if !power.is_finite() {
            return Err(FracError::Power(power));
        }
        Ok(Self { grid, power, factor })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(grid: TimeGrid, f: F) -> Result<Self, FracError> {
        Self::new(grid, grid.nodes().into_iter().map(f).collect())
    }

    /// t^p g(t) with g given as a function.
    pub fn power_times<F: Fn(f64) -> f64>(grid: TimeGrid, p: f64, g: F) -> Result<Self, FracError> {
        Self::with_power(grid, p, grid.nodes().into_iter().map(g).collect())
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self { grid, power: 0.0, factor: vec![0.0; grid.n + 1] }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    pub fn into_factor(self) -> Vec<f64> {
        self.factor
    }

    /// Sample at node k. At t = 0 a negative power is extrapolated linearly.
    pub fn value(&self, k: usize) -> f64 {
        if k == 0 {
            return if self.power > 0.0 {
                0.0
            } else if self.power == 0.0 {
                self.factor[0]
            } else {
                2.0 * self.value(1) - self.value(2)
            };
        }
        if self.power == 0.0 {
            self.factor[k]
        } else {
            self.grid.node(k).powf(self.power) * self.factor[k]
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..=self.grid.n).map(|k| self.value(k)).collect()
    }

    /// Multiplication by t^q.
    pub fn mul_power(mut self, q: f64) -> Self {
        self.power += q;
        self
    }

    pub fn scale(mut self, c: f64) -> Self {
        self.factor.iter_mut().for_each(|v| *v *= c);
        self
    }

    /// Same function written as t^p · G' for a smaller power p.
    pub fn rebase(&self, p: f64) -> Self {
        let shift = self.power - p;
        if shift == 0.0 {
            return self.clone();
        }
        assert!(shift > 0.0, "rebase can only lower the power");
        let factor = self
            .factor
            .iter()
            .enumerate()
            .map(|(k, g)| if k == 0 { 0.0 } else { self.grid.node(k).powf(shift) * g })
            .collect();
        Self { grid: self.grid, power: p, factor }
    }

    /// a·self + b·other, expressed at the smaller of the two powers.
    pub fn axpby(&self, a: f64, other: &GridFunction, b: f64) -> Result<Self, FracError> {
        if self.grid != other.grid {
            return Err(FracError::GridMismatch);
        }
        let p = self.power.min(other.power);
        let (x, y) = (self.rebase(p), other.rebase(p));
        let factor = x.factor.iter().zip(&y.factor).map(|(u, v)| a * u + b * v).collect();
        Ok(Self { grid: self.grid, power: p, factor })
    }

    pub fn add(&self, other: &GridFunction) -> Result<Self, FracError> {
        self.axpby(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<Self, FracError> {
        self.axpby(1.0, other, -1.0)
    }

    /// Pointwise product of factors with a function of t.
    pub fn map_factor<F: Fn(f64, f64) -> f64>(mut self, f: F) -> Self {
        for (k, g) in self.factor.iter_mut().enumerate() {
            *g = f(self.grid.node(k), *g);
        }
        self
    }
}

/// Finite-difference scheme for d/dt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiffScheme {
    /// Centered in the interior, second-order one-sided at both ends.
    #[default]
    Centered,
    /// Second-order backward differences; uses no future samples.
    Backward,
}

/// I^α f for α ∈ (0, 1].
pub fn rl_integral(alpha: f64, f: &GridFunction) -> Result<GridFunction, FracError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(FracError::Order(alpha));
    }
    integral(alpha, f)
}

pub(crate) fn integral(alpha: f64, f: &GridFunction) -> Result<GridFunction, FracError> {
    let p = f.power;
    if !(p > -1.0) {
        return Err(FracError::Power(p));
    }
    let grid = f.grid;
    let n = grid.n;
    let g = &f.factor;
    let r = p + alpha;
    let mut out = vec![0.0; n + 1];
    if p == 0.0 {
        let toe = toeplitz_weights(alpha, n);
        let scale = grid.dt().powf(alpha) * rgamma(alpha + 2.0);
        out.par_iter_mut().enumerate().skip(1).for_each(|(k, o)| {
            let mut s = toe.first(k) * g[0] + g[k];
            for j in 1..k {
                s += toe.interior[k - j] * g[j];
            }
            // I(t_k) / t_k^α with t_k^α = Δ^α k^α
            *o = s * scale / grid.node(k).powf(alpha);
        });
        out[0] = g[0] * rgamma(alpha + 1.0);
    } else {
        let w = weighted_table(alpha, p, n);
        out.par_iter_mut().enumerate().skip(1).for_each(|(k, o)| {
            *o = w.row(k).iter().zip(&g[..=k]).map(|(a, b)| a * b).sum();
        });
        out[0] = g[0] * gamma_fn(p + 1.0).map_err(KernelError::from)? * rgamma(r + 1.0);
    }
    GridFunction::with_power(grid, r, out)
}

/// D^α f = d/dt I^{1-α} f with the default scheme, plus a refinement check.
#[derive(Debug, Clone)]
pub struct RlDerivative {
    pub result: GridFunction,
    /// sup|G_N - G_{N/2}| / sup|G_N| over the shared nodes.
    pub refinement_change: f64,
    /// Set when the coarse grid changes the result by more than 10%.
    pub unstable: bool,
}

pub fn rl_derivative(alpha: f64, f: &GridFunction) -> Result<RlDerivative, FracError> {
    let result = derivative(alpha, f, DiffScheme::Centered)?;
    let n = f.grid.n;
    if alpha == 0.0 || n % 2 != 0 || n < 8 {
        return Ok(RlDerivative { result, refinement_change: 0.0, unstable: false });
    }
    let coarse_grid = TimeGrid::new(f.grid.t_end, n / 2)?;
    let coarse = GridFunction::with_power(coarse_grid, f.power, f.factor.iter().step_by(2).copied().collect())?;
    let cr = derivative(alpha, &coarse, DiffScheme::Centered)?;
    let fine = result.factor();
    let scale = fine.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = cr.factor().iter().enumerate().fold(0.0f64, |m, (k, v)| m.max((v - fine[2 * k]).abs()));
    let change = if scale > 0.0 { diff / scale } else { diff };
    Ok(RlDerivative { result, refinement_change: change, unstable: change > 0.1 })
}

pub(crate) fn derivative(alpha: f64, f: &GridFunction, scheme: DiffScheme) -> Result<GridFunction, FracError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(FracError::Order(alpha));
    }
    if alpha == 0.0 {
        return Ok(f.clone());
    }
    let big = integral(1.0 - alpha, f)?;
    Ok(differentiate(&big, scheme))
}

/// d/dt (t^r G) = t^{r-1} (r G + t G').
pub(crate) fn differentiate(f: &GridFunction, scheme: DiffScheme) -> GridFunction {
    let grid = f.grid;
    let r = f.power;
    let g = &f.factor;
    let dg = grid_derivative(g, grid.dt(), scheme);
    let factor = (0..=grid.n).map(|k| r * g[k] + grid.node(k) * dg[k]).collect();
    GridFunction { grid, power: r - 1.0, factor }
}

fn grid_derivative(g: &[f64], dt: f64, scheme: DiffScheme) -> Vec<f64> {
    let n = g.len() - 1;
    let mut d = vec![0.0; n + 1];
    match scheme {
        DiffScheme::Centered => {
            for k in 1..n {
                d[k] = (g[k + 1] - g[k - 1]) / (2.0 * dt);
            }
            if n >= 2 {
                d[0] = (-3.0 * g[0] + 4.0 * g[1] - g[2]) / (2.0 * dt);
                d[n] = (3.0 * g[n] - 4.0 * g[n - 1] + g[n - 2]) / (2.0 * dt);
            } else {
                d[0] = (g[1] - g[0]) / dt;
                d[n] = d[0];
            }
        }
        DiffScheme::Backward => {
            if n >= 1 {
                d[1] = (g[1] - g[0]) / dt;
            }
            for k in 2..=n {
                d[k] = (3.0 * g[k] - 4.0 * g[k - 1] + g[k - 2]) / (2.0 * dt);
            }
        }
    }
    d
}

/// (K_H h)(t) = ∫₀ᵗ K_H(t,s) h(s) ds.
pub fn covariance_operator(h_idx: f64, h: &GridFunction) -> Result<GridFunction, FracError> {
    let kernel = VolterraKernel::new(h_idx)?;
    if h_idx == 0.5 {
        return integral(1.0, h);
    }
    let p = h.power;
    if !(p > -1.0) {
        return Err(FracError::Power(p));
    }
    let grid = h.grid;
    let table = KernelTable::cached(h_idx, grid)?;
    let dt = grid.dt();
    let g = &h.factor;
    let r = p + h_idx + 0.5;
    let (el, er) = (kernel.left_exponent() + p.min(0.0), kernel.right_exponent());
    // h at cell midpoints, using the linear interpolant of G
    let mid: Vec<f64> =
        (0..grid.n).map(|j| ((j as f64 + 0.5) * dt).powf(p) * 0.5 * (g[j] + g[j + 1])).collect();
    let mut out = vec![0.0; grid.n + 1];
    out.par_iter_mut().enumerate().skip(1).for_each(|(k, o)| {
        let t = grid.node(k);
        let off = (k - 1) as f64 * dt;
        let first = |u: f64, dl: f64, dr: f64| {
            let gu = g[0] + (g[1] - g[0]) * dl / dt;
            kernel.eval_gap(t, u, off + dr) * dl.powf(p) * gu
        };
        let mut s = if k == 1 {
            quad::singular_both(|u, dl, dr| first(u, dl, dr), 0.0, dt, el, er, 16)
        } else {
            quad::singular_left(first, 0.0, dt, el, 16)
        };
        let row = table.row(k);
        for j in 1..k {
            s += row[j] * dt * mid[j];
        }
        *o = s / t.powf(r);
    });
    // ∫₀¹ K_H(1, y) y^p dy
    out[0] = g[0] * quad::singular_both(|u, dl, dr| kernel.eval_gap(1.0, u, dr) * dl.powf(p), 0.0, 1.0, el, er, 32);
    GridFunction::with_power(grid, r, out)
}

/// K_H^{-1} g.
///
/// H > 1/2: c_H^{-1} t^{H-1/2} D^{H-1/2} t^{1/2-H} g'.
/// H < 1/2, absolutely continuous g: c_H^{-1} t^{H-1/2} I^{1/2-H} t^{1/2-H} g'.
/// H < 1/2 otherwise: c_H^{-1} t^{1/2-H} D^{1/2-H} t^{H-1/2} D^{2H} g.
pub fn covariance_inverse(h_idx: f64, g: &GridFunction, absolutely_continuous: bool) -> Result<GridFunction, FracError> {
    covariance_inverse_with(h_idx, g, absolutely_continuous, DiffScheme::Centered)
}

pub(crate) fn covariance_inverse_with(
    h_idx: f64,
    g: &GridFunction,
    absolutely_continuous: bool,
    scheme: DiffScheme,
) -> Result<GridFunction, FracError> {
    if !(h_idx > 0.0 && h_idx < 1.0) {
        return Err(FracError::Kernel(KernelError::Hurst(h_idx)));
    }
    if g.power <= 0.0 && g.factor[0].abs() > 1e-12 * (1.0 + g.factor.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
        return Err(FracError::Inverse("g(0) must vanish".into()));
    }
    let c = crate::kernel::kernel_normalization(h_idx);
    let out = if h_idx == 0.5 {
        differentiate(g, scheme)
    } else if h_idx > 0.5 {
        let a = h_idx - 0.5;
        let dg = differentiate(g, scheme).mul_power(-a);
        derivative(a, &dg, scheme)?.mul_power(a)
    } else if absolutely_continuous {
        let b = 0.5 - h_idx;
        let dg = differentiate(g, scheme).mul_power(b);
        integral(b, &dg)?.mul_power(-b)
    } else {
        let b = 0.5 - h_idx;
        let inner = derivative(2.0 * h_idx, g, scheme)?.mul_power(-b);
        derivative(b, &inner, scheme)?.mul_power(b)
    };
    Ok(out.scale(1.0 / c))
}

/// Row access to the I^α weights for node-by-node (causal) evaluation.
pub(crate) enum IntegralRows {
    Toeplitz { toe: Toeplitz, scale: f64, grid: TimeGrid },
    Table(Arc<WeightTable>),
}

impl IntegralRows {
    pub(crate) fn new(alpha: f64, p: f64, grid: TimeGrid) -> Result<Self, FracError> {
        if !(p > -1.0) {
            return Err(FracError::Power(p));
        }
        Ok(if p == 0.0 {
            let scale = grid.dt().powf(alpha) * rgamma(alpha + 2.0);
            IntegralRows::Toeplitz { toe: toeplitz_weights(alpha, grid.n), scale, grid }
        } else {
            IntegralRows::Table(weighted_table(alpha, p, grid.n))
        })
    }

    /// Σ_{j<k} w_kj g_j, k ≥ 1.
    pub(crate) fn dot_prev(&self, k: usize, g: &[f64]) -> f64 {
        match self {
            IntegralRows::Toeplitz { toe, scale, grid } => {
                let mut s = toe.first(k) * g[0];
                for j in 1..k {
                    s += toe.interior[k - j] * g[j];
                }
                s * scale / grid.node(k).powf(toe.alpha)
            }
            IntegralRows::Table(t) => t.row(k)[..k].iter().zip(g).map(|(a, b)| a * b).sum(),
        }
    }

    /// w_kk, k ≥ 1.
    pub(crate) fn diag(&self, k: usize) -> f64 {
        match self {
            IntegralRows::Toeplitz { toe, scale, grid } => scale / grid.node(k).powf(toe.alpha),
            IntegralRows::Table(t) => t.row(k)[k],
        }
    }
}

/// Factor of I^α(t^p G) at t = 0 per unit G(0).
pub(crate) fn integral_origin(alpha: f64, p: f64) -> Result<f64, FracError> {
    Ok(if p == 0.0 { rgamma(alpha + 1.0) } else { gamma_fn(p + 1.0).map_err(KernelError::from)? * rgamma(p + alpha + 1.0) })
}

pub(crate) struct Toeplitz {
    alpha: f64,
    /// second differences of m^{α+1}, index m = k - j ≥ 1
    interior: Vec<f64>,
}

impl Toeplitz {
    fn first(&self, k: usize) -> f64 {
        let (a, k) = (self.alpha, k as f64);
        (k - 1.0).powf(a + 1.0) - (k - a - 1.0) * k.powf(a)
    }
}

fn toeplitz_weights(alpha: f64, n: usize) -> Toeplitz {
    let e = alpha + 1.0;
    let interior = (0..=n)
        .map(|m| {
            if m == 0 {
                return 0.0;
            }
            let m = m as f64;
            (m + 1.0).powf(e) - 2.0 * m.powf(e) + (m - 1.0).powf(e)
        })
        .collect();
    Toeplitz { alpha, interior }
}

/// Row k (1..=N) holds k+1 weights mapping node factors g_0..g_k to the
/// factor of I^α(t^p g) at t_k.
pub(crate) struct WeightTable {
    w: Vec<f64>,
}

impl WeightTable {
    fn row(&self, k: usize) -> &[f64] {
        let start = (k - 1) * (k + 2) / 2;
        &self.w[start..start + k + 1]
    }
}

fn weighted_table(alpha: f64, p: f64, n: usize) -> Arc<WeightTable> {
    static CACHE: OnceLock<Mutex<WeightCache>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(WeightCache { map: HashMap::new(), order: VecDeque::new(), size: 0 }));
    let key = (alpha.to_bits(), p.to_bits(), n);
    if let Some(t) = cache.lock().unwrap().map.get(&key) {
        return t.clone();
    }
    let table = Arc::new(build_weighted(alpha, p, n));
    let mut c = cache.lock().unwrap();
    let len = table.w.len();
    while c.size + len > WEIGHT_BUDGET {
        match c.order.pop_front() {
            Some(old) => {
                if let Some(t) = c.map.remove(&old) {
                    c.size -= t.w.len();
                }
            }
            None => break,
        }
    }
    c.map.insert(key, table.clone());
    c.order.push_back(key);
    c.size += len;
    table
}

const WEIGHT_BUDGET: usize = 80_000_000;

struct WeightCache {
    map: HashMap<(u64, u64, usize), Arc<WeightTable>>,
    order: VecDeque<(u64, u64, usize)>,
    size: usize,
}

fn build_weighted(alpha: f64, p: f64, n: usize) -> WeightTable {
    let mut w = vec![0.0; n * (n + 3) / 2];
    let mut rows: Vec<&mut [f64]> = Vec::with_capacity(n);
    let mut rest = w.as_mut_slice();
    for k in 1..=n {
        let (row, tail) = rest.split_at_mut(k + 1);
        rows.push(row);
        rest = tail;
    }
    let ig = rgamma(alpha);
    let rules: Vec<RegularRule> = [4, 6, 16].iter().map(|&q| RegularRule::new(q, alpha, p, n)).collect();
    rows.into_par_iter().enumerate().for_each(|(i, row)| {
        let k = i + 1;
        row.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..k {
            let (l, r) = if c == 0 || c == k - 1 {
                cell_pair(k, c, alpha, p)
            } else {
                let rule = match regular_order(c.min(k - 1 - c)) {
                    16 => &rules[2],
                    6 => &rules[1],
                    _ => &rules[0],
                };
                rule.pair(k, c)
            };
            row[c] += l;
            row[c + 1] += r;
        }
        let s = (k as f64).powf(-(alpha + p)) * ig;
        row.iter_mut().for_each(|v| *v *= s);
    });
    WeightTable { w }
}

/// Gauss rule for interior cells with both factors tabulated: η^p per cell
/// and (m - η_rel)^{α-1} per offset m = k - c, so the O(N²) loop has no powf.
struct RegularRule {
    q: usize,
    /// w_i/2 · (1 - x_i)/2 and w_i/2 · (1 + x_i)/2
    wl: Vec<f64>,
    wr: Vec<f64>,
    eta_p: Vec<f64>,
    gap: Vec<f64>,
}

impl RegularRule {
    fn new(q: usize, alpha: f64, p: f64, n: usize) -> Self {
        let rule = GaussLegendre::cached(q);
        let rel: Vec<f64> = rule.nodes.iter().map(|x| 0.5 + 0.5 * x).collect();
        let wl = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| 0.25 * w * (1.0 - x)).collect();
        let wr = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| 0.25 * w * (1.0 + x)).collect();
        let mut eta_p = vec![0.0; (n + 1) * q];
        let mut gap = vec![0.0; (n + 1) * q];
        for c in 1..=n {
            for (i, r) in rel.iter().enumerate() {
                eta_p[c * q + i] = (c as f64 + r).powf(p);
                gap[c * q + i] = (c as f64 - r).powf(alpha - 1.0);
            }
        }
        Self { q, wl, wr, eta_p, gap }
    }

    fn pair(&self, k: usize, c: usize) -> (f64, f64) {
        let q = self.q;
        let a = &self.eta_p[c * q..(c + 1) * q];
        let b = &self.gap[(k - c) * q..(k - c + 1) * q];
        let (mut l, mut r) = (0.0, 0.0);
        for i in 0..q {
            let v = a[i] * b[i];
            l += v * self.wl[i];
            r += v * self.wr[i];
        }
        (l, r)
    }
}

/// End cells (c = 0 or c = k-1) of
/// ∫_c^{c+1} (k-η)^{α-1} η^p · {c+1-η, η-c} dη.
fn cell_pair(k: usize, c: usize, alpha: f64, p: f64) -> (f64, f64) {
    let kf = k as f64;
    let (el, er) = (p, alpha - 1.0);
    let n = 16;
    if k == 1 {
        let g = |dl: f64, dr: f64| dr.powf(er) * dl.powf(p);
        let l = quad::singular_both(|_, dl, dr| g(dl, dr) * dr, 0.0, 1.0, el, er, n);
        let r = quad::singular_both(|_, dl, dr| g(dl, dr) * dl, 0.0, 1.0, el, er, n);
        return (l, r);
    }
    if c == 0 {
        let g = |dl: f64| (kf - dl).powf(er) * dl.powf(p);
        let l = quad::singular_left(|_, dl, dr| g(dl) * dr, 0.0, 1.0, el, n);
        let r = quad::singular_left(|_, dl, _| g(dl) * dl, 0.0, 1.0, el, n);
        return (l, r);
    }
    debug_assert_eq!(c, k - 1, "interior cells use RegularRule");
    let cf = c as f64;
    let g = |u: f64, dr: f64| dr.powf(er) * u.powf(p);
    let l = quad::singular_right(|u, _, dr| g(u, dr) * dr, cf, cf + 1.0, er, n);
    let r = quad::singular_right(|u, dl, dr| g(u, dr) * dl, cf, cf + 1.0, er, n);
    (l, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn sup_rel(a: &[f64], b: &[f64], from: usize) -> f64 {
        let scale = b[from..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a[from..].iter().zip(&b[from..]).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn unit_order_of_one_is_t() {
        let grid = TimeGrid::new(2.0, 16).unwrap();
        let one = GridFunction::from_fn(grid, |_| 1.0).unwrap();
        let v = rl_integral(1.0, &one).unwrap().values();
        for (k, x) in v.iter().enumerate() {
            assert_relative_eq!(*x, grid.node(k), max_relative = 1e-13);
        }
    }

    #[test]
    fn power_law_identity() {
        let grid = TimeGrid::new(1.0, 2048).unwrap();
        for alpha in [0.25, 0.75] {
            for beta in [0.0, 0.5, 1.0] {
                let f = GridFunction::power_times(grid, beta, |_| 1.0).unwrap();
                let got = rl_integral(alpha, &f).unwrap().values();
                let c = gamma_fn(beta + 1.0).unwrap() / gamma_fn(alpha + beta + 1.0).unwrap();
                for k in 1..=grid.n {
                    let t = grid.node(k);
                    assert_relative_eq!(got[k], c * t.powf(alpha + beta), max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn power_law_from_plain_samples() {
        // t^{1/2} sampled with power 0 still converges, just not exactly
        let grid = TimeGrid::new(1.0, 2048).unwrap();
        let f = GridFunction::from_fn(grid, |t| t.sqrt()).unwrap();
        let got = rl_integral(0.75, &f).unwrap().values();
        let c = gamma_fn(1.5).unwrap() / gamma_fn(2.25).unwrap();
        assert_relative_eq!(got[grid.n], c, max_relative = 1e-4);
    }

    #[test]
    fn semigroup() {
        let grid = TimeGrid::new(1.0, 512).unwrap();
        let f = GridFunction::from_fn(grid, |t| t).unwrap();
        let twice = rl_integral(0.5, &rl_integral(0.5, &f).unwrap()).unwrap().values();
        for k in 1..=grid.n {
            let t = grid.node(k);
            assert_relative_eq!(twice[k], 0.5 * t * t, max_relative = 1e-5);
        }
    }

    #[test]
    fn derivative_inverts_integral() {
        let grid = TimeGrid::new(1.0, 2048).unwrap();
        let f = GridFunction::from_fn(grid, f64::sin).unwrap();
        for alpha in [0.3, 0.7] {
            let back = rl_derivative(alpha, &rl_integral(alpha, &f).unwrap()).unwrap();
            assert!(!back.unstable);
            let got = back.result.values();
            let want = f.values();
            assert!(sup_rel(&got, &want, 1) < 1e-3, "α = {alpha}: {}", sup_rel(&got, &want, 1));
        }
        let zero = rl_derivative(0.0, &f).unwrap();
        assert_eq!(zero.result, f);
    }

    #[test]
    fn derivative_of_linear() {
        let grid = TimeGrid::new(1.0, 1024).unwrap();
        let f = GridFunction::from_fn(grid, |t| t).unwrap();
        let d = rl_derivative(0.3, &f).unwrap().result.values();
        let c = 1.0 / gamma_fn(1.7).unwrap();
        for k in 1..=grid.n {
            let t = grid.node(k);
            assert_relative_eq!(d[k], c * t.powf(0.7), max_relative = 1e-8);
        }
    }

    #[test]
    fn backward_differences_are_causal() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let f = GridFunction::from_fn(grid, |t| t.cos()).unwrap();
        let mut g = f.clone().into_factor();
        for v in g.iter_mut().skip(40) {
            *v += 5.0;
        }
        let g = GridFunction::new(grid, g).unwrap();
        let a = derivative(0.4, &f, DiffScheme::Backward).unwrap().values();
        let b = derivative(0.4, &g, DiffScheme::Backward).unwrap().values();
        assert_eq!(a[..40], b[..40]);
    }

    #[test]
    fn covariance_operator_basics() {
        let grid = TimeGrid::new(1.0, 256).unwrap();
        let h = GridFunction::from_fn(grid, |t| 1.0 + t).unwrap();
        let k = covariance_operator(0.5, &h).unwrap().values();
        for (i, v) in k.iter().enumerate() {
            let t = grid.node(i);
            assert_relative_eq!(*v, t + 0.5 * t * t, max_relative = 1e-12, epsilon = 1e-15);
        }
        let z = covariance_operator(0.3, &GridFunction::zeros(grid)).unwrap();
        assert!(z.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn covariance_operator_matches_composition() {
        // c_H I¹ s^{H-1/2} I^{H-1/2} s^{1/2-H} h for H > 1/2
        let h_idx = 0.7;
        let grid = TimeGrid::new(1.0, 1024).unwrap();
        let one = GridFunction::from_fn(grid, |_| 1.0).unwrap();
        let direct = covariance_operator(h_idx, &one).unwrap().values();
        let a = h_idx - 0.5;
        let inner = rl_integral(a, &one.clone().mul_power(-a)).unwrap().mul_power(a);
        let comp = rl_integral(1.0, &inner).unwrap().scale(crate::kernel::kernel_normalization(h_idx)).values();
        assert!(sup_rel(&direct, &comp, 1) < 1e-3, "{}", sup_rel(&direct, &comp, 1));
    }

    #[test]
    fn covariance_of_constant_is_fbm_variance_identity() {
        // E[B_t W_t] = ∫₀ᵗ K_H(t,s) ds; at H = 0.7 compare to quadrature of the kernel
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let one = GridFunction::from_fn(grid, |_| 1.0).unwrap();
        let v = covariance_operator(0.7, &one).unwrap();
        let k = VolterraKernel::new(0.7).unwrap();
        let want = quad::singular_both(|u, _, dr| k.eval_gap(1.0, u, dr), 0.0, 1.0, -0.2, 0.2, 40);
        assert_relative_eq!(v.value(grid.n), want, max_relative = 1e-3);
        assert_relative_eq!(v.factor()[0], want, max_relative = 1e-10);
    }

    fn round_trip(h_idx: f64, n: usize, f: &dyn Fn(f64) -> f64, ac: bool) -> f64 {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let h = GridFunction::from_fn(grid, f).unwrap();
        let g = covariance_operator(h_idx, &h).unwrap();
        let back = covariance_inverse(h_idx, &g, ac).unwrap().values();
        sup_rel(&back, &h.values(), 1)
    }

    #[test]
    fn inverse_round_trip() {
        for h_idx in [0.3, 0.7] {
            let e1 = round_trip(h_idx, 512, &|t: f64| t.cos(), true);
            let e2 = round_trip(h_idx, 1024, &|t: f64| t.cos(), true);
            assert!(e2 < 1e-2, "H = {h_idx}: {e2}");
            assert!(e2 < 0.75 * e1, "H = {h_idx}: {e1} -> {e2}");
        }
        let e1 = round_trip(0.3, 512, &|t: f64| 1.0 + t * t, false);
        let e2 = round_trip(0.3, 1024, &|t: f64| 1.0 + t * t, false);
        assert!(e2 < 1e-2 && e2 < 0.75 * e1, "{e1} -> {e2}");
    }

    #[test]
    fn inverse_at_half_is_derivative() {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let g = GridFunction::from_fn(grid, |t| t).unwrap();
        let d = covariance_inverse(0.5, &g, true).unwrap().values();
        assert!(d.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let bad = GridFunction::from_fn(grid, |t| 1.0 + t).unwrap();
        assert!(covariance_inverse(0.7, &bad, true).is_err());
    }

    #[test]
    fn power_bookkeeping_sums() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let a = GridFunction::power_times(grid, 0.5, |_| 2.0).unwrap();
        let b = GridFunction::power_times(grid, -0.25, |t| t).unwrap();
        let s = a.add(&b).unwrap();
        assert_eq!(s.power(), -0.25);
        for k in 1..=grid.n {
            let t = grid.node(k);
            assert_relative_eq!(s.value(k), 2.0 * t.sqrt() + t.powf(0.75), max_relative = 1e-14);
        }
        assert!(rl_integral(0.5, &GridFunction::power_times(grid, -1.2, |_| 1.0).unwrap()).is_err());
        assert!(rl_integral(1.5, &a).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn operators_are_linear(c in -3.0f64..3.0, alpha in 0.05f64..0.95, h_idx in 0.1f64..0.9) {
            let grid = TimeGrid::new(1.0, 32).unwrap();
            let f = GridFunction::from_fn(grid, |t| t.exp()).unwrap();
            let g = GridFunction::from_fn(grid, |t| (3.0 * t).sin()).unwrap();
            let comb = f.axpby(1.0, &g, c).unwrap();
            let lhs = rl_integral(alpha, &comb).unwrap();
            let rhs = rl_integral(alpha, &f).unwrap().axpby(1.0, &rl_integral(alpha, &g).unwrap(), c).unwrap();
            for (x, y) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
            let lhs = covariance_operator(h_idx, &comb).unwrap();
            let rhs = covariance_operator(h_idx, &f).unwrap()
                .axpby(1.0, &covariance_operator(h_idx, &g).unwrap(), c).unwrap();
            for (x, y) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn weighted_power_law(alpha in 0.1f64..1.0, p in -0.6f64..1.5) {
            let grid = TimeGrid::new(1.7, 64).unwrap();
            let f = GridFunction::power_times(grid, p, |_| 1.0).unwrap();
            let got = integral(alpha, &f).unwrap();
            let c = gamma_fn(p + 1.0).unwrap() / gamma_fn(p + alpha + 1.0).unwrap();
            for g in got.factor() {
                prop_assert!((g - c).abs() <= 1e-9 * c);
            }
        }
    }
}
