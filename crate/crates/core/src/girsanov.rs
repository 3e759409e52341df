//! The Girsanov drift ψ for two completely correlated fBMs.
//!
//! With ã_i = a_i c_{H_i} and h̃ = A⁻¹h, conditions (A1)–(A2) reduce in every
//! regime to a second-kind equation ã_P w + ã_Q 𝒦w = t^e h̃, where 𝒦 is a
//! weighted composition of fractional operators that gains order H_max − H_min.
//! The equation is solved by the alternating Neumann series; u, v and ψ are read
//! off from w and 𝒦w.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fraccalc::{
    covariance_inverse_with, differentiate, integral, integral_origin, DiffScheme, FracError, GridFunction, IntegralRows,
};
use crate::kernel::{kernel_normalization, HurstPair, KernelError, TimeGrid};
use crate::noise::{sample_noise, NoiseBundle, NoiseError, RngSpec};
use crate::sde::{noise_term, MixedSdeSpec, SdeError};
use crate::stats::Estimate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GirsanovError {
    #[error("Hurst indices {0} and {1} coincide; the construction needs distinct indices")]
    EqualHurst(f64, f64),
    #[error("coefficients a1 = {0}, a2 = {1} must be finite and nonzero")]
    Coefficients(f64, f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("tolerance {0} outside (0, 1e-4]")]
    Tolerance(f64),
    #[error("Neumann series did not reach tolerance after {terms} terms (last term {last:e})")]
    NonConvergence { terms: usize, last: f64 },
    #[error("singular collocation matrix")]
    Singular,
    #[error(transparent)]
    Frac(#[from] FracError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiCase {
    #[serde(rename = "case1-h-half")]
    Case1HHalf,
    #[serde(rename = "case2-both-short")]
    Case2BothShort,
    #[serde(rename = "case3-mixed")]
    Case3Mixed,
    #[serde(rename = "case4-both-long")]
    Case4BothLong,
}

impl PsiCase {
    pub fn of(hp: HurstPair) -> Result<Self, GirsanovError> {
        let (h1, h2) = (hp.h1, hp.h2);
        if (h1 - h2).abs() < 1e-12 {
            return Err(GirsanovError::EqualHurst(h1, h2));
        }
        Ok(if h1 == 0.5 || h2 == 0.5 {
            PsiCase::Case1HHalf
        } else if h1 < 0.5 && h2 < 0.5 {
            PsiCase::Case2BothShort
        } else if h1 > 0.5 && h2 > 0.5 {
            PsiCase::Case4BothLong
        } else {
            PsiCase::Case3Mixed
        })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            PsiCase::Case1HHalf => "case1-h-half",
            PsiCase::Case2BothShort => "case2-both-short",
            PsiCase::Case3Mixed => "case3-mixed",
            PsiCase::Case4BothLong => "case4-both-long",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiOptions {
    /// Stop once the last Neumann term is below tol·sup|h|.
    pub tol: f64,
    pub max_terms: usize,
    pub scheme: DiffScheme,
    /// Compute the (A2) residual through two independent K_H⁻¹ evaluations.
    pub residual_a2: bool,
}

impl Default for PsiOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_terms: 512, scheme: DiffScheme::Centered, residual_a2: true }
    }
}

/// u, v and ψ per component, with the (A1)/(A2) residuals.
#[derive(Debug, Clone)]
pub struct PsiBundle {
    pub case: PsiCase,
    pub hp: HurstPair,
    pub u: Vec<GridFunction>,
    pub v: Vec<GridFunction>,
    /// ψ_i = t^{1/2 - H_min} G_i.
    pub psi: Vec<GridFunction>,
    pub truncation_terms: usize,
    /// The remainder was solved by causal marching because its Neumann series
    /// cancelled catastrophically.
    pub marched: bool,
    /// sup-norm of each Neumann term, in the scale of u.
    pub term_norms: Vec<f64>,
    pub residual_a1: f64,
    /// NaN when not requested.
    pub residual_a2: f64,
    /// sup_t |ψ_t - ψ⁰_t| t^{H_min - 1/2}, where ψ⁰ keeps only the first Neumann term.
    pub remainder_envelope: f64,
}

impl PsiBundle {
    pub fn grid(&self) -> &TimeGrid {
        self.psi[0].grid()
    }

    pub fn d(&self) -> usize {
        self.psi.len()
    }

    /// Euclidean |ψ_{t_k}|.
    pub fn psi_norm(&self, k: usize) -> f64 {
        self.psi.iter().map(|p| p.value(k).powi(2)).sum::<f64>().sqrt()
    }

    pub fn psi_sup(&self) -> f64 {
        (1..=self.grid().n).map(|k| self.psi_norm(k)).fold(0.0, f64::max)
    }
}

/// One step of a weighted fractional operator chain.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    /// I^α
    Int(f64),
    /// d/dt
    Diff,
    /// multiplication by t^q
    Mul(f64),
}

fn apply_ops(ops: &[Op], f: &GridFunction, scheme: DiffScheme) -> Result<GridFunction, FracError> {
    let mut x = f.clone();
    for op in ops {
        x = match *op {
            Op::Int(a) => integral(a, &x)?,
            Op::Diff => differentiate(&x, scheme),
            Op::Mul(q) => x.mul_power(q),
        };
    }
    Ok(x)
}

/// The reduced equation for one Hurst pair: which index plays P and Q, the
/// base power e and the operator chains for 𝒦 and w ↦ ψ.
#[derive(Debug, Clone)]
struct Plan {
    case: PsiCase,
    /// index (0 or 1) of the coefficient multiplying w
    p_idx: usize,
    at_p: f64,
    at_q: f64,
    e: f64,
    gain: f64,
    psi_power: f64,
    k_ops: Vec<Op>,
    psi_ops: Vec<Op>,
    scheme: DiffScheme,
}

impl Plan {
    fn new(hp: HurstPair, a1: f64, a2: f64, scheme: DiffScheme) -> Result<Self, GirsanovError> {
        if !(a1 != 0.0 && a2 != 0.0 && a1.is_finite() && a2.is_finite()) {
            return Err(GirsanovError::Coefficients(a1, a2));
        }
        let case = PsiCase::of(hp)?;
        let hs = [hp.h1, hp.h2];
        let at = [a1 * kernel_normalization(hp.h1), a2 * kernel_normalization(hp.h2)];
        let lo_idx = if hp.h1 < hp.h2 { 0 } else { 1 };
        let (lo, hi) = (hs[lo_idx], hs[1 - lo_idx]);
        let (bl, bh, al, ah) = (0.5 - lo, 0.5 - hi, lo - 0.5, hi - 0.5);
        let (p_idx, e, k_ops, psi_ops) = match case {
            PsiCase::Case1HHalf if lo < 0.5 => (lo_idx, bl, vec![Op::Int(bl)], vec![Op::Int(bl), Op::Mul(-bl)]),
            PsiCase::Case1HHalf => (lo_idx, -ah, vec![Op::Int(ah)], vec![Op::Mul(ah)]),
            PsiCase::Case2BothShort => (
                lo_idx,
                bh,
                vec![Op::Mul(bl - bh), Op::Int(bl), Op::Mul(bh - bl), Op::Int(1.0 - bh), Op::Diff],
                vec![Op::Mul(bl - bh), Op::Int(bl), Op::Mul(-bl)],
            ),
            PsiCase::Case3Mixed => (
                lo_idx,
                bl,
                vec![Op::Int(bl), Op::Mul(-ah - bl), Op::Int(ah), Op::Mul(bl + ah)],
                vec![Op::Int(bl), Op::Mul(-bl)],
            ),
            PsiCase::Case4BothLong => (
                lo_idx,
                -ah,
                vec![Op::Mul(ah - al), Op::Int(1.0 - al), Op::Diff, Op::Mul(al - ah), Op::Int(ah)],
                vec![Op::Mul(ah - al), Op::Int(1.0 - al), Op::Diff, Op::Mul(al)],
            ),
        };
        Ok(Self {
            case,
            p_idx,
            at_p: at[p_idx],
            at_q: at[1 - p_idx],
            e,
            gain: hi - lo,
            psi_power: bl,
            k_ops,
            psi_ops,
            scheme,
        })
    }

    /// 𝒦w at its natural power (that of w plus the gain).
    fn k_op(&self, w: &GridFunction) -> Result<GridFunction, FracError> {
        Ok(fix_power(apply_ops(&self.k_ops, w, self.scheme)?, w.power() + self.gain))
    }

    fn psi_of(&self, w: &GridFunction) -> Result<GridFunction, FracError> {
        let natural = w.power() - self.e + self.psi_power;
        Ok(fix_power(apply_ops(&self.psi_ops, w, self.scheme)?, natural))
    }

    /// Leading Neumann terms kept at their exact powers; the rest is rebased.
    fn lead_terms(&self) -> usize {
        ((1.0 / self.gain).ceil() as usize).clamp(1, MAX_LEAD)
    }
}

const MAX_LEAD: usize = 8;

/// Neumann growth beyond this factor means the alternating sum cancels
/// catastrophically; the remainder is then solved by marching.
const MAX_GROWTH: f64 = 1e6;

/// Snap a power that differs from the intended one by rounding only.
fn fix_power(f: GridFunction, p: f64) -> GridFunction {
    if f.power() == p || (f.power() - p).abs() > 1e-12 {
        return f;
    }
    let grid = *f.grid();
    GridFunction::with_power(grid, p, f.into_factor()).expect("finite factor")
}

/// Sum of grid functions at different powers, expressed at the smallest.
fn collapse(parts: &[GridFunction]) -> Result<GridFunction, FracError> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc = acc.add(p)?;
    }
    Ok(acc)
}

fn sup_values(f: &GridFunction) -> f64 {
    (1..=f.grid().n).map(|k| f.value(k).abs()).fold(0.0, f64::max)
}

fn check_inputs(a: &DMatrix<f64>, h: &[GridFunction]) -> Result<TimeGrid, GirsanovError> {
    let d = h.len();
    if d == 0 || a.nrows() != d || a.ncols() != d {
        return Err(GirsanovError::Dimension(format!("A is {}×{}, h has {d} components", a.nrows(), a.ncols())));
    }
    let grid = *h[0].grid();
    if h.iter().any(|f| *f.grid() != grid) {
        return Err(FracError::GridMismatch.into());
    }
    Ok(grid)
}

/// h̃ = A⁻¹h componentwise.
fn transform(a: &DMatrix<f64>, h: &[GridFunction]) -> Result<Vec<GridFunction>, GirsanovError> {
    let inv = a.clone().try_inverse().ok_or_else(|| GirsanovError::Dimension("A is singular".into()))?;
    let d = h.len();
    (0..d)
        .map(|i| {
            let mut acc = h[0].clone().scale(inv[(i, 0)]);
            for j in 1..d {
                acc = acc.axpby(1.0, &h[j], inv[(i, j)])?;
            }
            Ok(acc)
        })
        .collect()
}

/// w and 𝒦w as sums of pieces at distinct powers.
struct Solution {
    w: Vec<GridFunction>,
    kw: Vec<GridFunction>,
    terms: usize,
    norms: Vec<f64>,
    marched: bool,
}

/// Solves ã_P w + ã_Q 𝒦w = f. The first terms of Σ c_n 𝒦ⁿf, c_n = (-ã_Q/ã_P)ⁿ/ã_P,
/// are kept at their own powers so every factor stays smooth; the remainder
/// R = Σ_{n≥B} c_n 𝒦ⁿf solves the same equation with right side ã_P c_B 𝒦^B f.
fn solve(plan: &Plan, f: &GridFunction, stop: f64, max_terms: usize) -> Result<Solution, GirsanovError> {
    solve_by(plan, f, stop, max_terms, Remainder::Series)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Remainder {
    /// Neumann series, marching if it cancels catastrophically
    Series,
    /// dense LU solve of the discretized operator
    Dense,
}

fn solve_by(plan: &Plan, f: &GridFunction, stop: f64, max_terms: usize, how: Remainder) -> Result<Solution, GirsanovError> {
    let ratio = -plan.at_q / plan.at_p;
    let norm = |g: &GridFunction| sup_values(&g.clone().mul_power(-plan.e));
    let mut c = 1.0 / plan.at_p;
    let mut term = f.clone();
    let mut w = Vec::new();
    let mut kw = Vec::new();
    let mut norms = Vec::new();
    for n in 0..plan.lead_terms() {
        let piece = term.clone().scale(c);
        norms.push(norm(&piece));
        if norms[n] < stop && n > 0 {
            return Ok(Solution { w, kw, terms: n, norms, marched: false });
        }
        let next = plan.k_op(&term)?;
        w.push(piece);
        kw.push(next.clone().scale(c));
        c *= ratio;
        term = next;
    }
    let rhs = term.scale(c * plan.at_p);
    let base = rhs.power();
    let first = norm(&rhs) / plan.at_p.abs();
    if first < stop {
        norms.push(first);
        return Ok(Solution { terms: w.len(), w, kw, norms, marched: false });
    }
    let lead = w.len();
    if how == Remainder::Dense {
        let (r, kr) = dense_remainder(plan, &rhs)?;
        w.push(r);
        kw.push(kr);
        return Ok(Solution { w, kw, terms: lead, norms, marched: false });
    }
    match remainder_neumann(plan, &rhs, stop, max_terms, &mut norms) {
        Ok((r, kr, n)) => {
            w.push(r);
            kw.push(kr);
            Ok(Solution { w, kw, terms: lead + n, norms, marched: false })
        }
        Err(GirsanovError::NonConvergence { .. }) => {
            let (r, kr) = march(plan, &rhs, base)?;
            w.push(r);
            kw.push(kr);
            Ok(Solution { w, kw, terms: lead, norms, marched: true })
        }
        Err(e) => Err(e),
    }
}

/// Neumann series for the remainder at a fixed base power.
fn remainder_neumann(
    plan: &Plan,
    rhs: &GridFunction,
    stop: f64,
    max_terms: usize,
    norms: &mut Vec<f64>,
) -> Result<(GridFunction, GridFunction, usize), GirsanovError> {
    let base = rhs.power();
    let ratio = -plan.at_q / plan.at_p;
    let norm = |g: &GridFunction| sup_values(&g.clone().mul_power(-plan.e));
    let mut c = 1.0 / plan.at_p;
    let mut term = rhs.clone();
    let mut w = rhs.clone().scale(c);
    let start = norm(&w).max(stop);
    norms.push(norm(&w));
    let mut kw = GridFunction::with_power(*rhs.grid(), base, vec![0.0; rhs.grid().n + 1])?;
    for n in 1..=max_terms {
        let next = plan.k_op(&term)?.rebase(base);
        kw = kw.axpby(1.0, &next, c)?;
        c *= ratio;
        let scaled = next.clone().scale(c);
        let nn = norm(&scaled);
        norms.push(nn);
        if !nn.is_finite() || nn > MAX_GROWTH * start {
            return Err(GirsanovError::NonConvergence { terms: n, last: nn });
        }
        if nn < stop {
            return Ok((w, kw, n));
        }
        w = w.axpby(1.0, &scaled, 1.0)?;
        term = next;
    }
    Err(GirsanovError::NonConvergence { terms: max_terms, last: *norms.last().unwrap() })
}

/// One node-local stage of 𝒦 compiled for causal marching.
enum Stage {
    Int { rows: IntegralRows, origin: f64 },
    /// d/dt of t^r G, backward differences
    Diff { r: f64 },
    /// factor times t^shift (rebasing to the base power)
    Rebase { shift: f64 },
}

/// Solves ã_P w + ã_Q 𝒦w = f node by node. Every stage is causal, so the value
/// of 𝒦w at t_k is affine in w_k once w_0..w_{k-1} are known.
fn march(plan: &Plan, f: &GridFunction, base: f64) -> Result<(GridFunction, GridFunction), GirsanovError> {
    let grid = *f.grid();
    let n = grid.n;
    let dt = grid.dt();
    let mut stages = Vec::new();
    let mut p = base;
    for op in &plan.k_ops {
        match *op {
            Op::Int(a) => {
                stages.push(Stage::Int { rows: IntegralRows::new(a, p, grid)?, origin: integral_origin(a, p)? });
                p += a;
            }
            Op::Diff => {
                stages.push(Stage::Diff { r: p });
                p -= 1.0;
            }
            Op::Mul(q) => p += q,
        }
    }
    stages.push(Stage::Rebase { shift: p - base });
    // inputs[s] holds the factor entering stage s; the last entry is 𝒦w
    let mut vals = vec![vec![0.0; n + 1]; stages.len() + 1];
    let g = f.factor();
    let mut w = vec![0.0; n + 1];
    let mut ab = vec![(0.0, 0.0); stages.len() + 1];
    for k in 0..=n {
        let t = grid.node(k);
        ab[0] = (0.0, 1.0);
        for (s, st) in stages.iter().enumerate() {
            let (a, b) = ab[s];
            ab[s + 1] = match st {
                Stage::Int { rows, origin } => {
                    if k == 0 {
                        (origin * a, origin * b)
                    } else {
                        let d = rows.diag(k);
                        (rows.dot_prev(k, &vals[s]) + d * a, d * b)
                    }
                }
                Stage::Diff { r } => {
                    let x = &vals[s];
                    let (c0, rest) = match k {
                        0 => (0.0, 0.0),
                        1 => (1.0 / dt, -x[0] / dt),
                        _ => (1.5 / dt, (-4.0 * x[k - 1] + x[k - 2]) / (2.0 * dt)),
                    };
                    (r * a + t * (c0 * a + rest), r * b + t * c0 * b)
                }
                Stage::Rebase { shift } => {
                    let m = if k == 0 { 0.0 } else { t.powf(*shift) };
                    (m * a, m * b)
                }
            };
        }
        let (ka, kb) = ab[stages.len()];
        let wk = (g[k] - plan.at_q * ka) / (plan.at_p + plan.at_q * kb);
        if !wk.is_finite() {
            return Err(GirsanovError::Singular);
        }
        w[k] = wk;
        for (s, (a, b)) in ab.iter().enumerate() {
            vals[s][k] = a + b * wk;
        }
    }
    let kw = vals.pop().unwrap();
    Ok((GridFunction::with_power(grid, base, w)?, GridFunction::with_power(grid, base, kw)?))
}

/// Builds u, v and ψ for the drift h (one grid function per component).
pub fn construct_psi(
    hp: HurstPair,
    a1: f64,
    a2: f64,
    a: &DMatrix<f64>,
    h: &[GridFunction],
    tol: f64,
) -> Result<PsiBundle, GirsanovError> {
    construct_psi_with(hp, a1, a2, a, h, &PsiOptions { tol, ..PsiOptions::default() })
}

pub fn construct_psi_with(
    hp: HurstPair,
    a1: f64,
    a2: f64,
    a: &DMatrix<f64>,
    h: &[GridFunction],
    opts: &PsiOptions,
) -> Result<PsiBundle, GirsanovError> {
    if !(opts.tol > 0.0 && opts.tol <= 1e-4) {
        return Err(GirsanovError::Tolerance(opts.tol));
    }
    let grid = check_inputs(a, h)?;
    let plan = Plan::new(hp, a1, a2, opts.scheme)?;
    let ht = transform(a, h)?;
    let h_sup = h.iter().map(|f| sup_values(f).max(f.value(0).abs())).fold(0.0, f64::max);
    if h_sup == 0.0 {
        return Ok(zero_bundle(&plan, hp, grid, h.len()));
    }
    let stop = opts.tol * h_sup;
    let sols: Vec<Solution> =
        ht.iter().map(|f| solve(&plan, &f.clone().mul_power(plan.e), stop, opts.max_terms)).collect::<Result<_, _>>()?;
    let mut bundle = assemble(&plan, hp, a1, a2, a, h, &sols, opts)?;
    let mut norms = vec![0.0; sols.iter().map(|s| s.norms.len()).max().unwrap_or(0)];
    for s in &sols {
        for (n, v) in s.norms.iter().enumerate() {
            norms[n] = f64::max(norms[n], *v);
        }
    }
    let lead: Vec<GridFunction> = sols.iter().map(|s| plan.psi_of(&s.w[0])).collect::<Result<_, _>>()?;
    let mut rem: f64 = 0.0;
    for k in 1..=grid.n {
        let s: f64 = bundle.psi.iter().zip(&lead).map(|(p, l)| (p.value(k) - l.value(k)).powi(2)).sum();
        rem = rem.max(s.sqrt() * grid.node(k).powf(-plan.psi_power));
    }
    bundle.truncation_terms = sols.iter().map(|s| s.terms).max().unwrap_or(0);
    bundle.marched = sols.iter().any(|s| s.marched);
    bundle.term_norms = norms;
    bundle.remainder_envelope = rem;
    Ok(bundle)
}

fn zero_bundle(plan: &Plan, hp: HurstPair, grid: TimeGrid, d: usize) -> PsiBundle {
    let z = GridFunction::zeros(grid);
    let psi = GridFunction::with_power(grid, plan.psi_power, vec![0.0; grid.n + 1]).expect("zeros");
    PsiBundle {
        case: plan.case,
        hp,
        u: vec![z.clone(); d],
        v: vec![z; d],
        psi: vec![psi; d],
        truncation_terms: 0,
        marched: false,
        term_norms: Vec::new(),
        residual_a1: 0.0,
        residual_a2: 0.0,
        remainder_envelope: 0.0,
    }
}

/// u, v, ψ and the residuals from the pieces of w and 𝒦w per component.
#[allow(clippy::too_many_arguments)]
fn assemble(
    plan: &Plan,
    hp: HurstPair,
    a1: f64,
    a2: f64,
    a: &DMatrix<f64>,
    h: &[GridFunction],
    sols: &[Solution],
    opts: &PsiOptions,
) -> Result<PsiBundle, GirsanovError> {
    let grid = *h[0].grid();
    let d = h.len();
    let (c1, c2) = (kernel_normalization(hp.h1), kernel_normalization(hp.h2));
    let mut u_parts = Vec::with_capacity(d);
    let mut v_parts = Vec::with_capacity(d);
    let mut psi = Vec::with_capacity(d);
    for s in sols {
        let up: Vec<GridFunction> = s.w.iter().map(|x| x.clone().mul_power(-plan.e)).collect();
        let uq: Vec<GridFunction> = s.kw.iter().map(|x| x.clone().mul_power(-plan.e)).collect();
        let (big1, big2) = if plan.p_idx == 0 { (up, uq) } else { (uq, up) };
        u_parts.push(big1.into_iter().map(|x| x.scale(c1)).collect::<Vec<_>>());
        v_parts.push(big2.into_iter().map(|x| x.scale(c2)).collect::<Vec<_>>());
        let pieces: Vec<GridFunction> = s.w.iter().map(|x| plan.psi_of(x)).collect::<Result<_, _>>()?;
        psi.push(collapse(&pieces)?);
    }
    let u: Vec<GridFunction> = u_parts.iter().map(|p| collapse(p)).collect::<Result<_, _>>()?;
    let v: Vec<GridFunction> = v_parts.iter().map(|p| collapse(p)).collect::<Result<_, _>>()?;
    let mut res1: f64 = 0.0;
    for k in 0..=grid.n {
        for i in 0..d {
            let mut s = -h[i].value(k);
            for j in 0..d {
                s += a[(i, j)] * (a1 * u[j].value(k) + a2 * v[j].value(k));
            }
            res1 = res1.max(s.abs());
        }
    }
    let res2 = if opts.residual_a2 { residual_a2(hp, &u_parts, &v_parts, opts.scheme)? } else { f64::NAN };
    Ok(PsiBundle {
        case: plan.case,
        hp,
        u,
        v,
        psi,
        truncation_terms: 0,
        marched: false,
        term_norms: Vec::new(),
        residual_a1: res1,
        residual_a2: res2,
        remainder_envelope: 0.0,
    })
}

/// sup_t |K_{H1}⁻¹∫u - K_{H2}⁻¹∫v| in the Euclidean norm, evaluated piece by
/// piece so each factor stays smooth.
fn residual_a2(
    hp: HurstPair,
    u: &[Vec<GridFunction>],
    v: &[Vec<GridFunction>],
    scheme: DiffScheme,
) -> Result<f64, GirsanovError> {
    let grid = *u[0][0].grid();
    let inv = |h: f64, parts: &[GridFunction]| -> Result<Vec<f64>, GirsanovError> {
        let mut out = vec![0.0; grid.n + 1];
        for x in parts {
            let y = covariance_inverse_with(h, &integral(1.0, x)?, true, scheme)?;
            for (k, o) in out.iter_mut().enumerate().skip(1) {
                *o += y.value(k);
            }
        }
        Ok(out)
    };
    let mut diff = vec![0.0; grid.n + 1];
    for (ui, vi) in u.iter().zip(v) {
        let p1 = inv(hp.h1, ui)?;
        let p2 = inv(hp.h2, vi)?;
        for k in 1..=grid.n {
            diff[k] += (p1[k] - p2[k]).powi(2);
        }
    }
    Ok(diff.iter().map(|v| v.sqrt()).fold(0.0, f64::max))
}

/// Same construction with the remainder equation [ã_P + ã_Q 𝒦]R = r solved
/// by dense LU on the discretized operator instead of the series; an
/// independent check of the summation.
pub fn construct_psi_dense(
    hp: HurstPair,
    a1: f64,
    a2: f64,
    a: &DMatrix<f64>,
    h: &[GridFunction],
) -> Result<PsiBundle, GirsanovError> {
    construct_psi_dense_with(hp, a1, a2, a, h, DiffScheme::Centered)
}

pub fn construct_psi_dense_with(
    hp: HurstPair,
    a1: f64,
    a2: f64,
    a: &DMatrix<f64>,
    h: &[GridFunction],
    scheme: DiffScheme,
) -> Result<PsiBundle, GirsanovError> {
    let grid = check_inputs(a, h)?;
    let opts = PsiOptions { residual_a2: false, scheme, ..PsiOptions::default() };
    let plan = Plan::new(hp, a1, a2, opts.scheme)?;
    let ht = transform(a, h)?;
    let h_sup = h.iter().map(|f| sup_values(f).max(f.value(0).abs())).fold(0.0, f64::max);
    if h_sup == 0.0 {
        return Ok(zero_bundle(&plan, hp, grid, h.len()));
    }
    let sols: Vec<Solution> = ht
        .iter()
        .map(|f| solve_by(&plan, &f.clone().mul_power(plan.e), 1e-16 * h_sup, 0, Remainder::Dense))
        .collect::<Result<_, _>>()?;
    assemble(&plan, hp, a1, a2, a, h, &sols, &opts)
}

fn dense_remainder(plan: &Plan, rhs: &GridFunction) -> Result<(GridFunction, GridFunction), GirsanovError> {
    let grid = *rhs.grid();
    let base = rhs.power();
    let n = grid.n + 1;
    let km = operator_matrix(plan, grid, base)?;
    let sys = &km * plan.at_q + DMatrix::identity(n, n) * plan.at_p;
    let w = sys.lu().solve(&DVector::from_column_slice(rhs.factor())).ok_or(GirsanovError::Singular)?;
    let kw = &km * &w;
    Ok((GridFunction::with_power(grid, base, w.as_slice().to_vec())?, GridFunction::with_power(grid, base, kw.as_slice().to_vec())?))
}

/// Columns are 𝒦 applied to the unit factors at the given power, rebased back to it.
fn operator_matrix(plan: &Plan, grid: TimeGrid, base: f64) -> Result<DMatrix<f64>, GirsanovError> {
    let n = grid.n + 1;
    let cols: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let f = GridFunction::with_power(grid, base, e)?;
            Ok(plan.k_op(&f)?.rebase(base).into_factor())
        })
        .collect::<Result<_, GirsanovError>>()?;
    Ok(DMatrix::from_fn(n, n, |i, j| cols[j][i]))
}

/// sup_t |ψ_t| t^{H_min - 1/2}: finite exactly when ψ obeys the t^{1/2-H} envelope.
pub fn psi_shape_check(bundle: &PsiBundle) -> f64 {
    let grid = *bundle.grid();
    let q = bundle.hp.h_min() - 0.5;
    (1..=grid.n).map(|k| bundle.psi_norm(k) * grid.node(k).powf(q)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NovikovReport {
    /// ½∫₀ᵀ|ψ_t|²dt
    pub log_value: f64,
    pub value: f64,
    /// false when exp overflows (Novikov violation warning)
    pub finite: bool,
}

/// exp(½∫|ψ|²) for a deterministic bundle; |ψ|² is integrated with the
/// product weights of its t^{1-2H_min} singularity.
pub fn novikov_estimate(bundle: &PsiBundle) -> Result<NovikovReport, GirsanovError> {
    let grid = *bundle.grid();
    let mut total = 0.0;
    for p in &bundle.psi {
        let sq = GridFunction::with_power(grid, 2.0 * p.power(), p.factor().iter().map(|g| g * g).collect())?;
        total += integral(1.0, &sq)?.value(grid.n);
    }
    let log_value = 0.5 * total;
    let value = log_value.exp();
    Ok(NovikovReport { log_value, value, finite: value.is_finite() })
}

/// h_t = b(t, x0 + A(a1 B1_t + a2 B2_t)) at the nodes, one grid function per component.
pub fn drift_to_h(spec: &MixedSdeSpec, noise: &NoiseBundle) -> Result<Vec<GridFunction>, GirsanovError> {
    if noise.d != spec.d || (noise.grid.t_end - spec.t_end).abs() > 1e-12 * spec.t_end {
        return Err(SdeError::Mismatch("noise grid or dimension differs from the specification".into()).into());
    }
    let d = spec.d;
    let grid = noise.grid;
    let nt = noise_term(spec, noise);
    h_along(spec, grid, |k, x| {
        for i in 0..d {
            x[i] = spec.x0[i] + nt[k * d + i];
        }
    })
}

/// h at the nodes for a state path written into `x` by `state(k, x)`.
pub(crate) fn h_along<F: Fn(usize, &mut [f64])>(
    spec: &MixedSdeSpec,
    grid: TimeGrid,
    state: F,
) -> Result<Vec<GridFunction>, GirsanovError> {
    let d = spec.d;
    let mut comps = vec![vec![0.0; grid.n + 1]; d];
    let mut x = vec![0.0; d];
    let mut b = vec![0.0; d];
    for k in 0..=grid.n {
        state(k, &mut x);
        spec.drift.eval(grid.node(k), &x, &mut b);
        for i in 0..d {
            comps[i][k] = b[i];
        }
    }
    comps.into_iter().map(|c| Ok(GridFunction::new(grid, c)?)).collect()
}

/// The linear map h̃ ↦ G_ψ (ψ = t^{1/2-H_min} G_ψ) on one grid, built once and
/// applied to many paths. Backward differences make it lower triangular, so ψ
/// at t_k only sees h̃ up to t_k.
#[derive(Debug, Clone)]
pub struct PsiOperator {
    hp: HurstPair,
    grid: TimeGrid,
    psi_power: f64,
    a_inv: DMatrix<f64>,
    /// row-major (N+1)×(N+1)
    m: Vec<f64>,
}

impl PsiOperator {
    pub fn new(spec: &MixedSdeSpec, grid: TimeGrid) -> Result<Self, GirsanovError> {
        spec.validate()?;
        let plan = Plan::new(spec.hp, spec.a1, spec.a2, DiffScheme::Backward)?;
        let n = grid.n + 1;
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                let f = GridFunction::with_power(grid, plan.e, e)?;
                let s = solve(&plan, &f, 1e-12, 512)?;
                let pieces: Vec<GridFunction> = s.w.iter().map(|x| plan.psi_of(x)).collect::<Result<_, _>>()?;
                Ok(collapse(&pieces)?.rebase(plan.psi_power).into_factor())
            })
            .collect::<Result<_, GirsanovError>>()?;
        let mut m = vec![0.0; n * n];
        for (j, c) in cols.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                m[i * n + j] = *v;
            }
        }
        Ok(Self { hp: spec.hp, grid, psi_power: plan.psi_power, a_inv: spec.a_inv(), m })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn psi_power(&self) -> f64 {
        self.psi_power
    }

    pub fn hurst(&self) -> HurstPair {
        self.hp
    }

    /// G_ψ node-major (`g[k*d + i]`) for h given node-major.
    pub fn apply(&self, h: &[f64], d: usize) -> Vec<f64> {
        let n = self.grid.n + 1;
        assert_eq!(h.len(), n * d);
        let mut ht = vec![0.0; n * d];
        for k in 0..n {
            for i in 0..d {
                ht[k * d + i] = (0..d).map(|j| self.a_inv[(i, j)] * h[k * d + j]).sum();
            }
        }
        let mut g = vec![0.0; n * d];
        for k in 0..n {
            let row = &self.m[k * n..k * n + k + 1];
            for i in 0..d {
                g[k * d + i] = row.iter().enumerate().map(|(j, w)| w * ht[j * d + i]).sum();
            }
        }
        g
    }

    /// ψ_{t_k} values node-major; node 0 uses the t₁ factor when the power is negative.
    pub fn psi_values(&self, g: &[f64], d: usize) -> Vec<f64> {
        let n = self.grid.n + 1;
        let mut out = vec![0.0; n * d];
        for k in 0..n {
            let tk = if k == 0 && self.psi_power < 0.0 { self.grid.node(1) } else { self.grid.node(k) };
            let s = if self.psi_power == 0.0 { 1.0 } else { tk.powf(self.psi_power) };
            for i in 0..d {
                out[k * d + i] = s * g[k * d + i];
            }
        }
        out
    }

    /// ½∫|ψ|² with a left-point rule on t^{2p} cell integrals.
    pub fn half_energy(&self, g: &[f64], d: usize) -> f64 {
        let dt = self.grid.dt();
        let q = 2.0 * self.psi_power + 1.0;
        let mut s = 0.0;
        for k in 0..self.grid.n {
            let (a, b) = (k as f64 * dt, (k + 1) as f64 * dt);
            let cell = (b.powf(q) - a.powf(q)) / q;
            let gk = if k == 0 { &g[d..2 * d] } else { &g[k * d..(k + 1) * d] };
            s += cell * gk.iter().map(|v| v * v).sum::<f64>();
        }
        0.5 * s
    }
}

/// MC mean of exp(½∫|ψ|²) over path-dependent h = b(t, x0 + A(a1B1 + a2B2)).
pub fn novikov_mc(
    spec: &MixedSdeSpec,
    grid: TimeGrid,
    n_paths: usize,
    master_seed: u64,
) -> Result<Estimate, GirsanovError> {
    let op = PsiOperator::new(spec, grid)?;
    let d = spec.d;
    let samples: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let noise = sample_noise(spec.hp, grid, d, RngSpec::new(master_seed, p as u64))?;
            let h = drift_to_h(spec, &noise)?;
            let flat: Vec<f64> = (0..=grid.n).flat_map(|k| h.iter().map(move |f| f.factor()[k])).collect();
            let g = op.apply(&flat, d);
            Ok(op.half_energy(&g, d).exp())
        })
        .collect::<Result<_, GirsanovError>>()?;
    Ok(Estimate::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{DriftFamily, DriftSpec};
    use crate::specfun::{gamma_fn, mittag_leffler};

    fn scalar(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Vec<GridFunction> {
        vec![GridFunction::from_fn(grid, f).unwrap()]
    }

    fn id1() -> DMatrix<f64> {
        DMatrix::identity(1, 1)
    }

    fn sup_diff(a: &GridFunction, b: &GridFunction) -> f64 {
        (0..=a.grid().n).map(|k| (a.value(k) - b.value(k)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn case_dispatch() {
        let c = |a, b| PsiCase::of(HurstPair::new(a, b).unwrap()).unwrap();
        assert_eq!(c(0.5, 0.3), PsiCase::Case1HHalf);
        assert_eq!(c(0.7, 0.5), PsiCase::Case1HHalf);
        assert_eq!(c(0.2, 0.4), PsiCase::Case2BothShort);
        assert_eq!(c(0.7, 0.3), PsiCase::Case3Mixed);
        assert_eq!(c(0.6, 0.8), PsiCase::Case4BothLong);
        assert!(PsiCase::of(HurstPair::new(0.3, 0.3).unwrap()).is_err());
        assert_eq!(serde_json::to_string(&PsiCase::Case3Mixed).unwrap(), "\"case3-mixed\"");
    }

    #[test]
    fn zero_drift_gives_zero() {
        let g = TimeGrid::new(1.0, 32).unwrap();
        let b = construct_psi(HurstPair::new(0.3, 0.7).unwrap(), 1.0, 1.0, &id1(), &scalar(g, |_| 0.0), 1e-10).unwrap();
        assert_eq!(b.residual_a1, 0.0);
        assert_eq!(psi_shape_check(&b), 0.0);
        assert_eq!(novikov_estimate(&b).unwrap().value, 1.0);
    }

    #[test]
    fn case1_matches_mittag_leffler() {
        // ã2 w + ã1 I^β w = t^β  ⇒  w = Γ(β+1)/ã2 · t^β E_{β,β+1}(-ã1/ã2 · t^β)
        let (h2, a1, a2) = (0.3, 1.0, 0.8);
        let g = TimeGrid::new(1.0, 256).unwrap();
        let b = construct_psi(HurstPair::new(0.5, h2).unwrap(), a1, a2, &id1(), &scalar(g, |_| 1.0), 1e-10).unwrap();
        let beta = 0.5 - h2;
        let (t1, t2) = (a1 * kernel_normalization(0.5), a2 * kernel_normalization(h2));
        let gb = gamma_fn(beta + 1.0).unwrap();
        let mut err: f64 = 0.0;
        for k in 1..=g.n {
            let t = g.node(k);
            let tb = t.powf(beta);
            let w = gb / t2 * tb * mittag_leffler(beta, beta + 1.0, -t1 / t2 * tb).unwrap();
            // v = c_{H2} U2, U2 = t^{-β} w
            err = err.max((b.v[0].value(k) - kernel_normalization(h2) * w / tb).abs());
        }
        assert!(err < 1e-3, "{err}");
        assert!(b.residual_a1 < 1e-8 * 2.0, "{}", b.residual_a1);
    }

    #[test]
    fn neumann_matches_dense_collocation() {
        let g = TimeGrid::new(1.0, 128).unwrap();
        let a = id1();
        for (h1, h2) in [(0.5, 0.3), (0.5, 0.7), (0.2, 0.4), (0.7, 0.3), (0.6, 0.8)] {
            let hp = HurstPair::new(h1, h2).unwrap();
            let h = scalar(g, |t| 1.0 + t);
            let s = construct_psi(hp, 1.0, 1.0, &a, &h, 1e-10).unwrap();
            let dn = construct_psi_dense(hp, 1.0, 1.0, &a, &h).unwrap();
            assert!(sup_diff(&s.u[0], &dn.u[0]) < 1e-6, "{h1} {h2}");
            assert!(sup_diff(&s.v[0], &dn.v[0]) < 1e-6, "{h1} {h2}");
        }
    }

    #[test]
    fn marching_remainder_matches_dense() {
        // |ã_Q/ã_P|^{1/gain} ≈ 80: the alternating series would peak near e^80
        let g = TimeGrid::new(1.0, 128).unwrap();
        let hp = HurstPair::new(0.2, 0.4).unwrap();
        let h = scalar(g, |t| (3.0 * t).sin() + 1.0);
        let s = construct_psi(hp, 0.7, 1.3, &id1(), &h, 1e-10).unwrap();
        assert!(s.marched);
        assert!(s.residual_a1 < 1e-8 * 3.0);
        let opts = PsiOptions { scheme: DiffScheme::Backward, ..PsiOptions::default() };
        let sb = construct_psi_with(hp, 0.7, 1.3, &id1(), &h, &opts).unwrap();
        let dn = construct_psi_dense_with(hp, 0.7, 1.3, &id1(), &h, DiffScheme::Backward).unwrap();
        assert!(sup_diff(&sb.u[0], &dn.u[0]) < 1e-8, "{}", sup_diff(&sb.u[0], &dn.u[0]));
        assert!(sup_diff(&sb.psi[0], &dn.psi[0]) < 1e-8);
    }

    #[test]
    fn a1_residual_all_cases_and_linearity() {
        let g = TimeGrid::new(1.0, 128).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]);
        let h = vec![GridFunction::from_fn(g, |t| (3.0 * t).sin() + 1.0).unwrap(), GridFunction::from_fn(g, |t| t).unwrap()];
        let h2: Vec<GridFunction> = h.iter().map(|f| f.clone().scale(2.0)).collect();
        for (h1, h2i) in [(0.5, 0.3), (0.7, 0.5), (0.2, 0.4), (0.3, 0.7), (0.6, 0.8)] {
            let hp = HurstPair::new(h1, h2i).unwrap();
            let b = construct_psi(hp, 0.7, 1.3, &a, &h, 1e-10).unwrap();
            assert!(b.residual_a1 < 1e-8 * 3.0, "{h1} {h2i}: {}", b.residual_a1);
            let n = &b.term_norms;
            if !b.marched {
                // rise to a single peak, then factorial decay
                let peak = (0..n.len()).max_by(|&i, &j| n[i].total_cmp(&n[j])).unwrap().max(3);
                for k in peak..n.len() - 1 {
                    assert!(n[k + 1] <= n[k], "{h1} {h2i}: term {k}");
                }
            }
            let b2 = construct_psi(hp, 0.7, 1.3, &a, &h2, 1e-10).unwrap();
            for i in 0..2 {
                let doubled = b.psi[i].clone().scale(2.0);
                let scale = 1.0 + sup_values(&doubled);
                assert!(sup_diff(&doubled, &b2.psi[i]) < 1e-8 * scale);
            }
        }
    }

    #[test]
    fn a2_residual_shrinks_under_refinement() {
        let hp = HurstPair::new(0.6, 0.8).unwrap();
        let res = |n| {
            let g = TimeGrid::new(1.0, n).unwrap();
            let b = construct_psi(hp, 1.0, 1.0, &id1(), &scalar(g, |t| t), 1e-10).unwrap();
            (b.residual_a2, psi_shape_check(&b))
        };
        let (r1, s1) = res(128);
        let (r2, s2) = res(256);
        assert!(r2 < r1, "{r1} {r2}");
        assert!(r2 < 1e-2 * (1.0 + s2));
        assert!(s2 < 2.0 * s1 && s1 < 2.0 * s2);
    }

    #[test]
    fn novikov_bound_for_bounded_psi() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let b = construct_psi(HurstPair::new(0.5, 0.7).unwrap(), 1.0, 1.0, &id1(), &scalar(g, |_| 1.0), 1e-10).unwrap();
        let m = b.psi_sup();
        let nv = novikov_estimate(&b).unwrap();
        assert!(nv.finite && nv.value >= 1.0);
        assert!(nv.value <= (0.5 * m * m * 1.0).exp() * (1.0 + 1e-9));
    }

    fn sin_spec(h1: f64, h2: f64) -> MixedSdeSpec {
        MixedSdeSpec {
            d: 1,
            x0: vec![0.2],
            a1: 1.0,
            a2: 0.5,
            a_matrix: vec![vec![1.0]],
            t_end: 1.0,
            hp: HurstPair::new(h1, h2).unwrap(),
            drift: DriftSpec::new(DriftFamily::BoundedSin { amplitude: vec![0.5], frequency: vec![1.0] }),
        }
    }

    #[test]
    fn drift_to_h_families() {
        let mut spec = sin_spec(0.3, 0.7);
        let g = spec.grid(32).unwrap();
        let noise = sample_noise(spec.hp, g, 1, RngSpec::new(3, 0)).unwrap();
        let h = drift_to_h(&spec, &noise).unwrap();
        assert!(h[0].factor().iter().all(|v| v.abs() <= 0.5));
        spec.drift = DriftSpec::new(DriftFamily::Constant { c: vec![0.25] });
        assert!(drift_to_h(&spec, &noise).unwrap()[0].factor().iter().all(|v| *v == 0.25));
        spec.drift = DriftSpec::zero();
        assert!(drift_to_h(&spec, &noise).unwrap()[0].factor().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn operator_is_causal_and_matches_construction() {
        let spec = sin_spec(0.3, 0.7);
        let g = spec.grid(64).unwrap();
        let op = PsiOperator::new(&spec, g).unwrap();
        let noise = sample_noise(spec.hp, g, 1, RngSpec::new(9, 1)).unwrap();
        let h = drift_to_h(&spec, &noise).unwrap();
        let gpsi = op.apply(h[0].factor(), 1);
        let opts = PsiOptions { scheme: DiffScheme::Backward, residual_a2: false, tol: 1e-12, ..PsiOptions::default() };
        let b = construct_psi_with(spec.hp, spec.a1, spec.a2, &spec.a(), &h, &opts).unwrap();
        for k in 0..=g.n {
            assert!((gpsi[k] - b.psi[0].factor()[k]).abs() < 1e-9 * (1.0 + gpsi[k].abs()));
        }
        let mut hp = h[0].factor().to_vec();
        hp[40] += 1.0;
        let gp = op.apply(&hp, 1);
        assert!(gpsi[..40].iter().zip(&gp[..40]).all(|(a, b)| a == b));
    }

    #[test]
    fn novikov_mc_is_stable_across_seeds() {
        let spec = sin_spec(0.3, 0.7);
        let g = spec.grid(32).unwrap();
        let e: Vec<Estimate> = (0..3).map(|s| novikov_mc(&spec, g, 400, s).unwrap()).collect();
        for x in &e {
            assert!(x.mean.is_finite() && x.mean >= 1.0);
        }
        let se = e.iter().map(|x| x.se).fold(0.0, f64::max);
        let lo = e.iter().map(|x| x.se).fold(f64::INFINITY, f64::min);
        assert!(se < 3.0 * lo.max(1e-15) || se < 1e-12);
    }
}
