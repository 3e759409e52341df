//! Volterra kernel of fractional Brownian motion and its discretizations.
//!
//! ```text
//! K_H(t,s) = c_H Γ(H+1/2)^-1 (t-s)^(H-1/2) ₂F₁(H-1/2, 1/2-H; H+1/2; 1-t/s)
//! ```
//!
//! The hypergeometric representation alone gives ∫₀ᵗ K_H(t,s)² ds = V_H t^{2H}
//! with
//!
//! ```text
//! V_H = Γ(2-2H) cos(πH) / (πH(1-2H)),
//! ```
//!
//! so the factor c_H = V_H^{-1/2} is applied throughout to make B^H = ∫K_H dW a
//! normalized fBM with E[B_t B_s] = ½(t^{2H} + s^{2H} - |t-s|^{2H}).
//!
//! Near s → 0 the kernel behaves like s^{-|H-1/2|}; for H < 1/2 it also blows up
//! like (t-s)^{H-1/2} at the diagonal. Cell integrals over the first and the
//! diagonal cell use power-substituted Gauss–Legendre rules; all other cells use
//! Gauss rules whose order falls with the distance to the singular ends.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad::{self, GaussLegendre};
use crate::specfun::{self, gamma_fn, series_2f1, SpecFunConfig, SpecFunError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid Hurst index {0}: must lie in (0, 1)")]
    Hurst(f64),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("kernel domain error: need 0 < s < t, got t = {t}, s = {s}")]
    Domain { t: f64, s: f64 },
    #[error("degenerate mixed kernel: {0}")]
    Degenerate(String),
    #[error("z(t) underflows at t = {t} (T0 = {t0})")]
    Underflow { t: f64, t0: f64 },
    #[error(transparent)]
    SpecFun(#[from] SpecFunError),
}

/// Uniform grid t_k = kT/N on [0, T].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_end: f64,
    pub n: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n: usize) -> Result<Self, KernelError> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(KernelError::Grid(format!("horizon {t_end} must be positive")));
        }
        if n < 2 {
            return Err(KernelError::Grid(format!("N = {n} must be >= 2")));
        }
        Ok(Self { t_end, n })
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.n {
            self.t_end
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|k| self.node(k)).collect()
    }

    /// Index of the node equal to t, if t lies on the grid.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let k = x.round();
        if k < 0.0 || k > self.n as f64 || (x - k).abs() > 1e-9 * (1.0 + k) {
            None
        } else {
            Some(k as usize)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    BothShort,
    Mixed,
    BothLong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurstPair {
    pub h1: f64,
    pub h2: f64,
}

impl HurstPair {
    pub fn new(h1: f64, h2: f64) -> Result<Self, KernelError> {
        for h in [h1, h2] {
            if !(h > 0.0 && h < 1.0) {
                return Err(KernelError::Hurst(h));
            }
        }
        Ok(Self { h1, h2 })
    }

    pub fn h_min(&self) -> f64 {
        self.h1.min(self.h2)
    }

    pub fn h_max(&self) -> f64 {
        self.h1.max(self.h2)
    }

    pub fn regime(&self) -> Regime {
        if self.h_max() < 0.5 {
            Regime::BothShort
        } else if self.h_min() > 0.5 {
            Regime::BothLong
        } else {
            Regime::Mixed
        }
    }
}

/// V_H with ∫₀ᵗ K_H^raw(t,s)² ds = V_H t^{2H}.
pub fn hurst_variance_constant(h: f64) -> f64 {
    let eps = 0.5 - h;
    // cos(πH)/(1-2H) = sin(πε)/(2ε)
    let ratio = if eps.abs() < 1e-9 {
        std::f64::consts::FRAC_PI_2
    } else {
        (std::f64::consts::PI * eps).sin() / (2.0 * eps)
    };
    specfun::gamma_fn(2.0 - 2.0 * h).expect("2-2H > 0") * ratio / (std::f64::consts::PI * h)
}

/// c_H = V_H^{-1/2}.
pub fn kernel_normalization(h: f64) -> f64 {
    hurst_variance_constant(h).powf(-0.5)
}

/// Evaluator for K_H with per-H constants cached.
#[derive(Debug, Clone)]
pub struct VolterraKernel {
    h: f64,
    pre: f64,
    c1: f64,
    c2: f64,
    near_half: bool,
    cfg: SpecFunConfig,
}

impl VolterraKernel {
    pub fn new(h: f64) -> Result<Self, KernelError> {
        if !(h > 0.0 && h < 1.0) {
            return Err(KernelError::Hurst(h));
        }
        let pre = kernel_normalization(h) / gamma_fn(h + 0.5)?;
        let s = 1.0 - 2.0 * h;
        let near_half = s.abs() < 2e-3;
        let (c1, c2) = if near_half {
            (0.0, 0.0)
        } else {
            // 1-w connection of ₂F₁(H-1/2, 2H; H+1/2; w), with c-a-b = 1-2H
            let g = gamma_fn(h + 0.5)?;
            let c1 = g * gamma_any(s) * specfun::rgamma(0.5 - h);
            let c2 = g * gamma_any(-s) * specfun::rgamma(h - 0.5) * specfun::rgamma(2.0 * h);
            (c1, c2)
        };
        Ok(Self { h, pre, c1, c2, near_half, cfg: SpecFunConfig::default() })
    }

    pub fn hurst(&self) -> f64 {
        self.h
    }

    /// Exponent of the s → 0 behaviour, -|H - 1/2|.
    pub fn left_exponent(&self) -> f64 {
        -(self.h - 0.5).abs()
    }

    /// Exponent of the s → t behaviour, H - 1/2.
    pub fn right_exponent(&self) -> f64 {
        self.h - 0.5
    }

    pub fn eval(&self, t: f64, s: f64) -> Result<f64, KernelError> {
        if !(s > 0.0 && s < t) || !t.is_finite() {
            return Err(KernelError::Domain { t, s });
        }
        Ok(self.eval_gap(t, s, t - s))
    }

    /// K_H(t, s) with gap = t - s supplied exactly by the caller.
    pub fn eval_gap(&self, t: f64, s: f64, gap: f64) -> f64 {
        let h = self.h;
        if h == 0.5 {
            return 1.0;
        }
        let w = gap / t;
        let f = if w <= 0.5 {
            series_2f1(h - 0.5, 2.0 * h, h + 0.5, w, &self.cfg).expect("w <= 1/2 converges")
        } else if self.near_half {
            specfun::hyp2f1_unit(h - 0.5, 2.0 * h, h + 0.5, w, &self.cfg).unwrap_or(f64::NAN)
        } else {
            let y = s / t;
            let a = series_2f1(h - 0.5, 2.0 * h, 2.0 * h, y, &self.cfg).expect("y < 1/2 converges");
            let b = series_2f1(1.0, 0.5 - h, 2.0 - 2.0 * h, y, &self.cfg).expect("y < 1/2 converges");
            self.c1 * a + self.c2 * y.powf(1.0 - 2.0 * h) * b
        };
        self.pre * gap.powf(h - 0.5) * (t / s).powf(0.5 - h) * f
    }
}

fn gamma_any(x: f64) -> f64 {
    1.0 / specfun::rgamma(x)
}

/// Normalized K_H(t, s) for 0 < s < t.
pub fn kernel_eval(h: f64, t: f64, s: f64) -> Result<f64, KernelError> {
    VolterraKernel::new(h)?.eval(t, s)
}

/// The hypergeometric form without the normalization c_H.
pub fn raw_kernel_eval(h: f64, t: f64, s: f64) -> Result<f64, KernelError> {
    if !(h > 0.0 && h < 1.0) {
        return Err(KernelError::Hurst(h));
    }
    if !(s > 0.0 && s < t) {
        return Err(KernelError::Domain { t, s });
    }
    let f = specfun::hyp2f1(h - 0.5, 0.5 - h, h + 0.5, 1.0 - t / s)?;
    Ok((t - s).powf(h - 0.5) * f / gamma_fn(h + 0.5)?)
}

const SINGULAR_GL: usize = 16;

/// Lower-triangular table of cell averages of K_H on a uniform grid.
///
/// Row k (t = t_k) holds k entries; entry j is (1/Δ)∫_{s_j}^{s_{j+1}} K_H(t_k, s) ds,
/// so B_{t_k} = Σ_j w_kj ΔW_j.
#[derive(Debug, Clone)]
pub struct KernelTable {
    kernel: VolterraKernel,
    grid: TimeGrid,
    weights: Vec<f64>,
}

impl KernelTable {
    pub fn build(h: f64, grid: TimeGrid) -> Result<Self, KernelError> {
        let kernel = VolterraKernel::new(h)?;
        let n = grid.n;
        let mut weights = vec![0.0; n * (n + 1) / 2];
        if h == 0.5 {
            weights.iter_mut().for_each(|w| *w = 1.0);
            return Ok(Self { kernel, grid, weights });
        }
        let mut rows: Vec<&mut [f64]> = Vec::with_capacity(n);
        let mut rest = weights.as_mut_slice();
        for k in 1..=n {
            let (row, tail) = rest.split_at_mut(k);
            rows.push(row);
            rest = tail;
        }
        rows.into_par_iter().enumerate().for_each(|(i, row)| {
            let k = i + 1;
            fill_row(&kernel, &grid, k, row);
        });
        Ok(Self { kernel, grid, weights })
    }

    /// Shared table from a process-wide cache keyed by (H, T, N).
    pub fn cached(h: f64, grid: TimeGrid) -> Result<Arc<Self>, KernelError> {
        table_cache(h, grid)
    }

    pub fn hurst(&self) -> f64 {
        self.kernel.h
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn kernel(&self) -> &VolterraKernel {
        &self.kernel
    }

    pub fn is_unit(&self) -> bool {
        self.kernel.h == 0.5
    }

    /// Cell averages of row k (k ≥ 1), length k.
    pub fn row(&self, k: usize) -> &[f64] {
        assert!(k >= 1 && k <= self.grid.n);
        let start = k * (k - 1) / 2;
        &self.weights[start..start + k]
    }

    pub fn weight(&self, k: usize, j: usize) -> f64 {
        self.row(k)[j]
    }

    pub fn cell_integral(&self, k: usize, j: usize) -> f64 {
        self.weight(k, j) * self.grid.dt()
    }

    /// K_H(t_k, s) at the midpoint of cell j.
    pub fn value(&self, k: usize, j: usize) -> f64 {
        let dt = self.grid.dt();
        let t = self.grid.node(k);
        let gap = (k - j) as f64 * dt - 0.5 * dt;
        self.kernel.eval_gap(t, (j as f64 + 0.5) * dt, gap)
    }

    /// ∫₀^{min(t_i, s_l)} K_self(t_i, u) K_other(t_l, u) du.
    pub fn product_integral(&self, i: usize, other: &KernelTable, l: usize) -> f64 {
        assert_eq!(self.grid, other.grid, "tables on different grids");
        let m = i.min(l);
        if m == 0 {
            return 0.0;
        }
        let dt = self.grid.dt();
        if self.is_unit() && other.is_unit() {
            return m as f64 * dt;
        }
        let (k1, k2) = (&self.kernel, &other.kernel);
        let (ti, tl) = (self.grid.node(i), self.grid.node(l));
        let el = k1.left_exponent() + k2.left_exponent();
        let mut er = 0.0;
        if i == m {
            er += k1.right_exponent();
        }
        if l == m {
            er += k2.right_exponent();
        }
        // gaps to t_i and t_l from a point at distance d below t_m
        let di = (i - m) as f64 * dt;
        let dl = (l - m) as f64 * dt;
        let prod = |u: f64, dr: f64| k1.eval_gap(ti, u, di + dr) * k2.eval_gap(tl, u, dl + dr);
        let tm = self.grid.node(m);
        if m == 1 {
            return quad::singular_both(|u, _, dr| prod(u, dr), 0.0, tm, el, er, SINGULAR_GL);
        }
        let mut s = quad::singular_left(|u, _, _| prod(u, tm - u), 0.0, dt, el, SINGULAR_GL);
        let (ri, rl) = (self.row(i), other.row(l));
        for j in 1..m - 1 {
            s += ri[j] * rl[j] * dt;
        }
        let a = (m - 1) as f64 * dt;
        s + quad::singular_right(|u, _, dr| prod(u, dr), a, tm, er, SINGULAR_GL)
    }
}

/// Gauss order for a cell `dist` cells away from the nearest singular end.
pub(crate) fn regular_order(dist: usize) -> usize {
    match dist {
        0..=3 => 16,
        4..=15 => 6,
        16..=63 => 3,
        _ => 2,
    }
}

fn fill_row(kernel: &VolterraKernel, grid: &TimeGrid, k: usize, row: &mut [f64]) {
    let dt = grid.dt();
    let t = grid.node(k);
    let (el, er) = (kernel.left_exponent(), kernel.right_exponent());
    for (j, w) in row.iter_mut().enumerate() {
        let a = j as f64 * dt;
        // distance from the cell's right end to t
        let off = (k - j - 1) as f64 * dt;
        let integral = if k == 1 {
            quad::singular_both(|u, _, dr| kernel.eval_gap(t, u, dr), 0.0, dt, el, er, SINGULAR_GL)
        } else if j == 0 {
            quad::singular_left(|u, _, dr| kernel.eval_gap(t, u, off + dr), 0.0, dt, el, SINGULAR_GL)
        } else if j == k - 1 {
            quad::singular_right(|u, _, dr| kernel.eval_gap(t, u, dr), a, a + dt, er, SINGULAR_GL)
        } else {
            let rule = GaussLegendre::cached(regular_order(j.min(k - 1 - j)));
            let mut acc = 0.0;
            for (x, wt) in rule.nodes.iter().zip(&rule.weights) {
                acc += wt * kernel.eval_gap(t, a + 0.5 * dt * (1.0 + x), off + 0.5 * dt * (1.0 - x));
            }
            0.5 * dt * acc
        };
        *w = integral / dt;
    }
}

const CACHE_BUDGET: usize = 48_000_000;

struct TableCache {
    map: HashMap<(u64, u64, usize), Arc<KernelTable>>,
    order: VecDeque<(u64, u64, usize)>,
    size: usize,
}

fn table_cache(h: f64, grid: TimeGrid) -> Result<Arc<KernelTable>, KernelError> {
    static CACHE: OnceLock<Mutex<TableCache>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(TableCache { map: HashMap::new(), order: VecDeque::new(), size: 0 }));
    let key = (h.to_bits(), grid.t_end.to_bits(), grid.n);
    if let Some(t) = cache.lock().unwrap().map.get(&key) {
        return Ok(t.clone());
    }
    let table = Arc::new(KernelTable::build(h, grid)?);
    let mut c = cache.lock().unwrap();
    if let Some(t) = c.map.get(&key) {
        return Ok(t.clone());
    }
    let entries = table.weights.len();
    while c.size + entries > CACHE_BUDGET {
        match c.order.pop_front() {
            Some(old) => {
                if let Some(t) = c.map.remove(&old) {
                    c.size -= t.weights.len();
                }
            }
            None => break,
        }
    }
    c.map.insert(key, table.clone());
    c.order.push_back(key);
    c.size += entries;
    Ok(table)
}

/// Ratios of |K_H| against the shapes of the classical upper and lower bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub h: f64,
    pub n: usize,
    /// sup |K| / (s^{-|H-1/2|} (t-s)^{max(H-1/2, 0)})
    pub sup_upper: f64,
    /// inf |K| / lower shape: (t-s)^{H-1/2} for H > 1/2,
    /// t^{H-1/2} s^{1/2-H} (t-s)^{H-1/2} for H < 1/2, 1 for H = 1/2
    pub inf_lower: f64,
}

/// Sup/inf ratios over all (t_k, cell midpoint) pairs of the grid.
pub fn kernel_bound_diagnostic(h: f64, grid: TimeGrid) -> Result<BoundReport, KernelError> {
    let kernel = VolterraKernel::new(h)?;
    let dt = grid.dt();
    let (sup, inf) = (1..=grid.n)
        .into_par_iter()
        .map(|k| {
            let t = grid.node(k);
            let mut sup: f64 = 0.0;
            let mut inf = f64::INFINITY;
            for j in 0..k {
                let s = (j as f64 + 0.5) * dt;
                let gap = (k - j) as f64 * dt - 0.5 * dt;
                let kv = kernel.eval_gap(t, s, gap).abs();
                let upper = s.powf(-(h - 0.5).abs()) * gap.powf((h - 0.5).max(0.0));
                let lower = if h > 0.5 {
                    gap.powf(h - 0.5)
                } else if h < 0.5 {
                    t.powf(h - 0.5) * s.powf(0.5 - h) * gap.powf(h - 0.5)
                } else {
                    1.0
                };
                sup = sup.max(kv / upper);
                inf = inf.min(kv / lower);
            }
            (sup, inf)
        })
        .reduce(|| (0.0, f64::INFINITY), |a, b| (a.0.max(b.0), a.1.min(b.1)));
    Ok(BoundReport { h, n: grid.n, sup_upper: sup, inf_lower: inf })
}

/// f(T0, t) = a1 K_{H1}(T0, t) + a2 K_{H2}(T0, t).
#[derive(Debug, Clone)]
pub struct MixedKernel {
    k1: VolterraKernel,
    k2: VolterraKernel,
    pub a1: f64,
    pub a2: f64,
    pub t0: f64,
}

impl MixedKernel {
    pub fn new(hp: HurstPair, a1: f64, a2: f64, t0: f64) -> Result<Self, KernelError> {
        if !(t0 > 0.0 && t0.is_finite()) {
            return Err(KernelError::Grid(format!("T0 = {t0} must be positive")));
        }
        Ok(Self { k1: VolterraKernel::new(hp.h1)?, k2: VolterraKernel::new(hp.h2)?, a1, a2, t0 })
    }

    pub fn eval(&self, t: f64) -> Result<f64, KernelError> {
        if !(t > 0.0 && t < self.t0) {
            return Err(KernelError::Domain { t: self.t0, s: t });
        }
        Ok(self.eval_gap(t, self.t0 - t))
    }

    /// f(T0, t) with gap = T0 - t supplied exactly.
    pub fn eval_gap(&self, t: f64, gap: f64) -> f64 {
        let mut v = 0.0;
        if self.a1 != 0.0 {
            v += self.a1 * self.k1.eval_gap(self.t0, t, gap);
        }
        if self.a2 != 0.0 {
            v += self.a2 * self.k2.eval_gap(self.t0, t, gap);
        }
        v
    }

    pub fn left_exponent(&self) -> f64 {
        self.k1.left_exponent().min(self.k2.left_exponent())
    }

    pub fn right_exponent(&self) -> f64 {
        self.k1.right_exponent().min(self.k2.right_exponent())
    }
}

pub fn mixed_kernel(hp: HurstPair, a1: f64, a2: f64, t0: f64, t: f64) -> Result<f64, KernelError> {
    MixedKernel::new(hp, a1, a2, t0)?.eval(t)
}

const PROFILE_GL: usize = 8;
const PROFILE_END_GL: usize = 24;

/// Cumulative integrals of f² on [0, T0]: head(u) = ∫₀ᵘ f², z(u) = ∫ᵤ^{T0} f².
#[derive(Debug, Clone)]
pub struct MixedProfile {
    f: MixedKernel,
    bounds: Vec<f64>,
    head_cum: Vec<f64>,
    tail_cum: Vec<f64>,
}

impl MixedProfile {
    pub fn new(hp: HurstPair, a1: f64, a2: f64, t0: f64, panels: usize) -> Result<Self, KernelError> {
        let f = MixedKernel::new(hp, a1, a2, t0)?;
        let panels = panels.max(2);
        let h = t0 / panels as f64;
        let bounds: Vec<f64> = (0..=panels).map(|i| if i == panels { t0 } else { i as f64 * h }).collect();
        let sq = |u: f64, gap: f64| {
            let v = f.eval_gap(u, gap);
            v * v
        };
        let (el, er) = (2.0 * f.left_exponent(), 2.0 * f.right_exponent());
        let pieces: Vec<f64> = (0..panels)
            .map(|p| {
                let (a, b) = (bounds[p], bounds[p + 1]);
                if p == 0 {
                    quad::singular_left(|u, _, _| sq(u, t0 - u), a, b, el, PROFILE_END_GL)
                } else if p == panels - 1 {
                    quad::singular_right(|u, _, dr| sq(u, dr), a, b, er, PROFILE_END_GL)
                } else {
                    quad::gl(|u| sq(u, t0 - u), a, b, PROFILE_GL)
                }
            })
            .collect();
        let mut head_cum = vec![0.0; panels + 1];
        for p in 0..panels {
            head_cum[p + 1] = head_cum[p] + pieces[p];
        }
        let mut tail_cum = vec![0.0; panels + 1];
        for p in (0..panels).rev() {
            tail_cum[p] = tail_cum[p + 1] + pieces[p];
        }
        if !(tail_cum[0] > 0.0) || !tail_cum[0].is_finite() {
            return Err(KernelError::Degenerate(format!("∫f² = {}", tail_cum[0])));
        }
        Ok(Self { f, bounds, head_cum, tail_cum })
    }

    pub fn kernel(&self) -> &MixedKernel {
        &self.f
    }

    pub fn t0(&self) -> f64 {
        self.f.t0
    }

    /// σ² = ∫₀^{T0} f².
    pub fn total(&self) -> f64 {
        self.tail_cum[0]
    }

    fn panel(&self, u: f64) -> usize {
        let p = self.bounds.len() - 1;
        (((u / self.f.t0) * p as f64).floor() as usize).min(p - 1)
    }

    fn sq(&self, u: f64, gap: f64) -> f64 {
        let v = self.f.eval_gap(u, gap);
        v * v
    }

    /// ∫₀ᵘ f².
    pub fn head(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= self.f.t0 {
            return self.total();
        }
        let t0 = self.f.t0;
        let p = self.panel(u);
        if p == 0 {
            let el = 2.0 * self.f.left_exponent();
            return quad::singular_left(|x, _, _| self.sq(x, t0 - x), 0.0, u, el, PROFILE_END_GL);
        }
        let a = self.bounds[p];
        self.head_cum[p] + quad::gl(|x| self.sq(x, t0 - x), a, u, PROFILE_GL)
    }

    /// z(u) = ∫ᵤ^{T0} f², evaluated with the exact gap T0 - u.
    pub fn z_gap(&self, u: f64, gap: f64) -> f64 {
        if gap <= 0.0 {
            return 0.0;
        }
        if u <= 0.0 {
            return self.total();
        }
        let p = self.panel(u);
        let last = self.bounds.len() - 2;
        if p == last {
            let er = 2.0 * self.f.right_exponent();
            // offset coordinates d = T0 - x keep tiny gaps resolvable
            let t0 = self.f.t0;
            return quad::singular_left(|d, _, _| self.sq(t0 - d, d), 0.0, gap, er, PROFILE_END_GL);
        }
        if p == 0 {
            return self.total() - self.head(u);
        }
        let t0 = self.f.t0;
        let b = self.bounds[p + 1];
        self.tail_cum[p + 1] + quad::gl(|x| self.sq(x, t0 - x), u, b, PROFILE_GL)
    }

    pub fn z(&self, u: f64) -> f64 {
        self.z_gap(u, self.f.t0 - u)
    }

    /// κ_t² = f²(T0,t)(1/z(t) - 1/z(0)) with the difference formed as head(t)/(z(t) z(0)).
    pub fn kappa_squared_gap(&self, t: f64, gap: f64) -> Result<f64, KernelError> {
        let zt = self.z_gap(t, gap);
        let z0 = self.total();
        if !(zt > 1e-300 && zt > z0 * 1e-280) {
            return Err(KernelError::Underflow { t, t0: self.f.t0 });
        }
        let fv = self.f.eval_gap(t, gap);
        Ok(fv * fv * self.head(t) / (zt * z0))
    }

    pub fn kappa_squared(&self, t: f64) -> Result<f64, KernelError> {
        if !(t > 0.0 && t < self.f.t0) {
            return Err(KernelError::Domain { t: self.f.t0, s: t });
        }
        self.kappa_squared_gap(t, self.f.t0 - t)
    }

    /// κ_t² from its defining double integral f²(t) ∫₀ᵗ f²(u)/z(u)² du.
    pub fn kappa_squared_definition(&self, t: f64) -> Result<f64, KernelError> {
        if !(t > 0.0 && t < self.f.t0) {
            return Err(KernelError::Domain { t: self.f.t0, s: t });
        }
        let t0 = self.f.t0;
        let el = 2.0 * self.f.left_exponent();
        let inner = quad::graded(
            |u, _, dr| {
                let gap = (t0 - t) + dr;
                let z = self.z_gap(u, gap);
                self.sq(u, gap) / (z * z)
            },
            0.0,
            t,
            el,
            0.0,
            24,
            PROFILE_GL,
        );
        let fv = self.f.eval_gap(t, t0 - t);
        Ok(fv * fv * inner)
    }

    /// J(T0) = ∫₀^{T0} t^{1/2-H} κ_t dt.
    pub fn j_integral(&self, h_min: f64) -> Result<f64, KernelError> {
        let t0 = self.f.t0;
        let el = 1.0 - h_min + 2.0 * self.f.left_exponent();
        let err = std::cell::RefCell::new(None);
        let v = quad::graded(
            |u, _, dr| match self.kappa_squared_gap(u, dr) {
                Ok(k2) => u.powf(0.5 - h_min) * k2.sqrt(),
                Err(e) => {
                    err.borrow_mut().get_or_insert(e);
                    0.0
                }
            },
            0.0,
            t0,
            el,
            -0.5,
            40,
            PROFILE_GL,
        );
        match err.into_inner() {
            Some(e) => Err(e),
            None => Ok(v),
        }
    }
}

/// σ²(T0) = ∫₀^{T0} f² by an N-panel rule with singular end panels.
pub fn sigma_squared(hp: HurstPair, a1: f64, a2: f64, t0: f64, n: usize) -> Result<f64, KernelError> {
    if n < 2 {
        return Err(KernelError::Grid(format!("N = {n} must be >= 2")));
    }
    let f = MixedKernel::new(hp, a1, a2, t0)?;
    let (el, er) = (2.0 * f.left_exponent(), 2.0 * f.right_exponent());
    let v = quad::composite(
        |u, _, dr| {
            let x = f.eval_gap(u, dr);
            x * x
        },
        0.0,
        t0,
        n,
        el,
        er,
        12,
        PROFILE_END_GL,
    );
    if !(v > 0.0) || !v.is_finite() {
        return Err(KernelError::Degenerate(format!("σ² = {v}")));
    }
    Ok(v)
}

/// Cross moment ∫₀^{T0} K_{H1}(T0,u) K_{H2}(T0,u) du = E[B^{H1}_{T0} B^{H2}_{T0}].
pub fn cross_moment(hp: HurstPair, t0: f64, n: usize) -> Result<f64, KernelError> {
    let k1 = VolterraKernel::new(hp.h1)?;
    let k2 = VolterraKernel::new(hp.h2)?;
    let el = k1.left_exponent() + k2.left_exponent();
    let er = k1.right_exponent() + k2.right_exponent();
    Ok(quad::composite(
        |u, _, dr| k1.eval_gap(t0, u, dr) * k2.eval_gap(t0, u, dr),
        0.0,
        t0,
        n.max(2),
        el,
        er,
        12,
        PROFILE_END_GL,
    ))
}

pub fn kappa_squared(hp: HurstPair, a1: f64, a2: f64, t0: f64, t: f64) -> Result<f64, KernelError> {
    MixedProfile::new(hp, a1, a2, t0, DEFAULT_PANELS)?.kappa_squared(t)
}

pub const DEFAULT_PANELS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub t0s: Vec<f64>,
    pub j: Vec<f64>,
    pub slope: f64,
    pub regime: Regime,
    /// Candidate exponents from the three-case bound for this regime.
    pub candidates: Vec<f64>,
    /// Exponent 1 - H that exact self-similarity gives when H1 = H2 = H.
    pub self_similar: f64,
    pub within_tolerance: bool,
}

/// Candidate T0 exponents of the bound on ∫t^{1/2-H}κ_t dt.
pub fn scaling_candidates(hp: HurstPair) -> Vec<f64> {
    let (h, hh) = (hp.h_min(), hp.h_max());
    match hp.regime() {
        Regime::BothShort => vec![2.0 - 2.0 * h - hh, 2.0 - h - 2.0 * hh],
        Regime::Mixed => vec![1.0 - hh, 1.5 - h - hh],
        Regime::BothLong => vec![1.5 - hh - h],
    }
}

/// Fits the log-log slope of J(T0) and compares it with the regime exponents.
pub fn kappa_scaling_check(hp: HurstPair, a1: f64, a2: f64, t0s: &[f64]) -> Result<ScalingReport, KernelError> {
    let mut distinct = t0s.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(KernelError::Grid("need at least two distinct T0 values".into()));
    }
    let j: Vec<f64> = t0s
        .par_iter()
        .map(|&t0| MixedProfile::new(hp, a1, a2, t0, DEFAULT_PANELS)?.j_integral(hp.h_min()))
        .collect::<Result<_, _>>()?;
    let xs: Vec<f64> = t0s.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = j.iter().map(|v| v.ln()).collect();
    let slope = ls_slope(&xs, &ys);
    let candidates = scaling_candidates(hp);
    let target = match hp.regime() {
        Regime::BothShort => candidates[0].max(candidates[1]),
        _ => candidates[0],
    };
    let within_tolerance = match hp.regime() {
        Regime::BothShort | Regime::BothLong => (slope - target).abs() < 0.1,
        Regime::Mixed => candidates.iter().any(|c| (slope - c).abs() < 0.1),
    };
    Ok(ScalingReport {
        t0s: t0s.to_vec(),
        j,
        slope,
        regime: hp.regime(),
        candidates,
        self_similar: 1.0 - hp.h_min(),
        within_tolerance,
    })
}

pub(crate) fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// R_H(t, s) = ½(t^{2H} + s^{2H} - |t-s|^{2H}).
pub fn fbm_covariance(h: f64, t: f64, s: f64) -> f64 {
    0.5 * (t.powf(2.0 * h) + s.powf(2.0 * h) - (t - s).abs().powf(2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn variance_constant_matches_mpmath() {
        assert_relative_eq!(hurst_variance_constant(0.3), 1.3833763219458761, max_relative = 1e-13);
        assert_relative_eq!(hurst_variance_constant(0.7), 0.99508813590392496, max_relative = 1e-13);
        assert_relative_eq!(hurst_variance_constant(0.2), 1.9174698473469341, max_relative = 1e-13);
        assert_relative_eq!(hurst_variance_constant(0.5), 1.0, max_relative = 1e-13);
    }

    #[test]
    fn kernel_matches_mpmath() {
        let cases = [
            (0.3, 1.0, 0.2, 0.85233505252171388),
            (0.3, 1.0, 0.9, 1.1636694133450491),
            (0.7, 2.0, 0.1, 1.5151966361441097),
            (0.7, 2.0, 1.7, 0.86303196040681551),
            (0.2, 1.0, 0.999, 4.4197570564464437),
            (0.8, 1.0, 1e-4, 8.1426966720508232),
            (0.4995, 1.0, 0.3, 0.99967813174247725),
        ];
        for (h, t, s, want) in cases {
            assert_relative_eq!(kernel_eval(h, t, s).unwrap(), want, max_relative = 1e-12);
        }
        assert_eq!(kernel_eval(0.5, 1.0, 0.3).unwrap(), 1.0);
        assert!(kernel_eval(0.3, 1.0, 1.0).is_err());
        assert!(kernel_eval(1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn squared_kernel_integrates_to_t_2h() {
        for h in [0.15, 0.3, 0.45, 0.55, 0.7, 0.9] {
            let hp = HurstPair::new(h, h).unwrap();
            for t in [0.5, 1.0, 3.0] {
                let v = cross_moment(hp, t, 64).unwrap();
                assert_relative_eq!(v, t.powf(2.0 * h), max_relative = 1e-9);
            }
        }
    }

    fn covariance_error(h: f64, n: usize) -> f64 {
        let grid = TimeGrid::new(1.0, n).unwrap();
        let table = KernelTable::build(h, grid).unwrap();
        let mut worst: f64 = 0.0;
        for i in (n / 8..=n).step_by(n / 8) {
            for l in (n / 8..=n).step_by(n / 8) {
                let v = table.product_integral(i, &table, l);
                let want = fbm_covariance(h, grid.node(i), grid.node(l));
                worst = worst.max((v - want).abs() / want);
            }
        }
        worst
    }

    #[test]
    fn table_reproduces_fbm_covariance() {
        assert!(covariance_error(0.5, 64) < 1e-12);
        for h in [0.25, 0.75] {
            let coarse = covariance_error(h, 64);
            let fine = covariance_error(h, 256);
            assert!(coarse < 1e-2, "H = {h}: {coarse}");
            assert!(fine < coarse, "H = {h}: {fine} vs {coarse}");
        }
    }

    #[test]
    fn row_sums_match_kernel_integral() {
        // ∫₀ᵗ K_H(t, s) ds = c_H t^{H+1/2} Γ(3/2-H) / (Γ(2-2H)(H+1/2)) ... checked against quadrature
        let h = 0.3;
        let grid = TimeGrid::new(1.0, 128).unwrap();
        let table = KernelTable::build(h, grid).unwrap();
        let k = VolterraKernel::new(h).unwrap();
        let direct = quad::singular_both(|u, _, dr| k.eval_gap(1.0, u, dr), 0.0, 1.0, -0.2, -0.2, 48);
        let sum: f64 = table.row(128).iter().sum::<f64>() * grid.dt();
        assert_relative_eq!(sum, direct, max_relative = 2e-3);
    }

    #[test]
    fn cache_returns_shared_table() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let a = KernelTable::cached(0.35, grid).unwrap();
        let b = KernelTable::cached(0.35, grid).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }

    #[test]
    fn kappa_closed_form_matches_definition() {
        for (h1, h2) in [(0.3, 0.7), (0.2, 0.4), (0.6, 0.85)] {
            let hp = HurstPair::new(h1, h2).unwrap();
            let prof = MixedProfile::new(hp, 1.0, 0.8, 1.0, DEFAULT_PANELS).unwrap();
            for t in [0.05, 0.3, 0.7, 0.95] {
                let a = prof.kappa_squared(t).unwrap();
                let b = prof.kappa_squared_definition(t).unwrap();
                assert_relative_eq!(a, b, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn sigma_squared_is_variance_of_mixture() {
        let hp = HurstPair::new(0.3, 0.7).unwrap();
        let (a1, a2, t0) = (1.0, 0.5, 2.0);
        let s2 = sigma_squared(hp, a1, a2, t0, 64).unwrap();
        let cross = cross_moment(hp, t0, 64).unwrap();
        let want = a1 * a1 * t0.powf(0.6) + a2 * a2 * t0.powf(1.4) + 2.0 * a1 * a2 * cross;
        assert_relative_eq!(s2, want, max_relative = 1e-9);
        let prof = MixedProfile::new(hp, a1, a2, t0, 64).unwrap();
        assert_relative_eq!(prof.total(), s2, max_relative = 1e-9);
        assert_relative_eq!(prof.head(0.7) + prof.z(0.7), s2, max_relative = 1e-9);
        assert!(sigma_squared(hp, 0.0, 0.0, 1.0, 8).is_err());
    }

    #[test]
    fn bound_ratios() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let r = kernel_bound_diagnostic(0.7, grid).unwrap();
        assert!(r.sup_upper.is_finite() && r.inf_lower > 0.0);
        let r = kernel_bound_diagnostic(0.5, grid).unwrap();
        assert_relative_eq!(r.sup_upper, 1.0);
        assert_relative_eq!(r.inf_lower, 1.0);
    }

    #[test]
    fn grid_indexing() {
        let g = TimeGrid::new(2.0, 10).unwrap();
        assert_eq!(g.index_of(0.6), Some(3));
        assert_eq!(g.index_of(0.61), None);
        assert_eq!(g.node(10), 2.0);
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn specialized_matches_generic(h in 0.05f64..0.95, s_frac in 0.001f64..0.999) {
            let t = 1.3;
            let s = t * s_frac;
            let fast = kernel_eval(h, t, s).unwrap();
            let slow = raw_kernel_eval(h, t, s).unwrap() * kernel_normalization(h);
            prop_assert!((fast - slow).abs() <= 1e-9 * slow.abs().max(1.0));
        }

        #[test]
        fn kernel_scales_self_similarly(h in 0.05f64..0.95, s_frac in 0.01f64..0.99, c in 0.1f64..10.0) {
            // K(ct, cs) = c^{H-1/2} K(t, s)
            let a = kernel_eval(h, c, c * s_frac).unwrap();
            let b = kernel_eval(h, 1.0, s_frac).unwrap() * c.powf(h - 0.5);
            prop_assert!((a - b).abs() <= 1e-10 * b.abs());
        }
    }
}
