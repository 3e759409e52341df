//! Gauss–Legendre rules with power substitutions for endpoint singularities.
//!
//! For an integrand behaving like (u-a)^e near a, the map u = a + L·v^q with
//! q = 3/(1+e) turns the leading factor into v², so the rule sees a polynomial
//! times a remainder that is smooth to high order in v.

use std::sync::OnceLock;

const MAX_CACHED: usize = 64;

#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// n-point rule on [-1, 1] by Newton iteration on P_n.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn cached(n: usize) -> &'static GaussLegendre {
        static CACHE: OnceLock<Vec<GaussLegendre>> = OnceLock::new();
        let all = CACHE.get_or_init(|| (1..=MAX_CACHED).map(GaussLegendre::new).collect());
        assert!(n >= 1 && n <= MAX_CACHED, "Gauss-Legendre order {n} not cached");
        &all[n - 1]
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let d = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, d)
}

/// ∫_a^b f with an n-point rule.
pub fn gl<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let r = GaussLegendre::cached(n);
    let h = 0.5 * (b - a);
    let c = 0.5 * (a + b);
    let mut s = 0.0;
    for (x, w) in r.nodes.iter().zip(&r.weights) {
        s += w * f(c + h * x);
    }
    s * h
}

/// ∫_a^b f where f ~ (u-a)^e near a, e > -1.
///
/// The integrand receives (u, u-a, b-u); the distance to the singular end is
/// exact, so callers never difference nearly equal abscissae. Strong
/// singularities (e < -1/2) are first graded geometrically toward a.
pub fn singular_left<F: Fn(f64, f64, f64) -> f64>(f: F, a: f64, b: f64, e: f64, n: usize) -> f64 {
    let len = b - a;
    let mut inner = len;
    let mut s = 0.0;
    if e < -0.5 {
        for _ in 0..STRONG_LEVELS {
            let lo = 0.5 * inner;
            s += gl(|d| f(a + d, d, len - d), lo, inner, n);
            inner = lo;
        }
    }
    let q = 3.0 / (1.0 + e);
    s + gl(
        |v| {
            // near e = -1 the map v^q underflows; those nodes carry no weight
            let d = inner * v.powf(q);
            if d <= 0.0 {
                return 0.0;
            }
            f(a + d, d, len - d) * inner * q * v.powf(q - 1.0)
        },
        0.0,
        1.0,
        n,
    )
}

const STRONG_LEVELS: usize = 24;

/// ∫_a^b f where f ~ (b-u)^e near b, e > -1. Same callback contract.
pub fn singular_right<F: Fn(f64, f64, f64) -> f64>(f: F, a: f64, b: f64, e: f64, n: usize) -> f64 {
    // mirrored: the left rule's offset is the distance to b
    singular_left(|_, dl, dr| f(b - dl, dr, dl), a, b, e, n)
}

/// Plain rule with the (u, u-a, b-u) callback contract.
pub fn regular<F: Fn(f64, f64, f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    gl(|u| f(u, u - a, b - u), a, b, n)
}

/// ∫_a^b f with singular exponents at both ends; splits at the midpoint.
pub fn singular_both<F: Fn(f64, f64, f64) -> f64>(f: F, a: f64, b: f64, el: f64, er: f64, n: usize) -> f64 {
    let m = 0.5 * (a + b);
    let h = m - a;
    singular_left(|u, dl, _| f(u, dl, h + (m - u)), a, m, el, n)
        + singular_right(|u, _, dr| f(u, h + (u - m), dr), m, b, er, n)
}

/// Composite rule on `panels` equal panels; end panels use the substitutions.
pub fn composite<F: Fn(f64, f64, f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    panels: usize,
    el: f64,
    er: f64,
    n: usize,
    n_end: usize,
) -> f64 {
    assert!(panels >= 1);
    if panels == 1 {
        return singular_both(&f, a, b, el, er, n_end);
    }
    let len = b - a;
    let h = len / panels as f64;
    let mut s = singular_left(|u, dl, _| f(u, dl, len - dl), a, a + h, el, n_end);
    for p in 1..panels - 1 {
        let lo = a + p as f64 * h;
        s += gl(|u| f(u, u - a, b - u), lo, lo + h, n);
    }
    s + singular_right(|u, _, dr| f(u, len - dr, dr), b - h, b, er, n_end)
}

/// Composite rule on panels graded geometrically toward both ends.
pub fn graded<F: Fn(f64, f64, f64) -> f64>(f: F, a: f64, b: f64, el: f64, er: f64, levels: usize, n: usize) -> f64 {
    let len = b - a;
    let half = 0.5 * len;
    let mut s = 0.0;
    // left half in offset coordinates d = u - a
    let mut lo = half * 0.5f64.powi(levels as i32);
    s += singular_left(|u, dl, _| f(u, dl, len - dl), a, a + lo, el, n);
    while lo < half {
        let hi = (2.0 * lo).min(half);
        s += gl(|d| f(a + d, d, len - d), lo, hi, n);
        lo = hi;
    }
    // right half in offset coordinates d = b - u
    let mut lo = half * 0.5f64.powi(levels as i32);
    s += singular_right(|u, _, dr| f(u, len - dr, dr), b - lo, b, er, n);
    while lo < half {
        let hi = (2.0 * lo).min(half);
        s += gl(|d| f(b - d, len - d, d), lo, hi, n);
        lo = hi;
    }
    s
}
