//! Reproducible Brownian increments and the two fBMs built from them.
//!
//! Both fBMs are linear functionals of the same increments,
//! B^{H_i}_{t_k} = Σ_{j<k} w^{(i)}_{kj} ΔW_j, which is exactly the complete
//! correlation the mixed equation requires.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{cross_moment, HurstPair, KernelError, KernelTable, TimeGrid};
use crate::stats::Estimate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("dimension must be at least 1")]
    Dimension,
    #[error("need at least {min} paths, got {got}")]
    TooFewPaths { min: usize, got: usize },
    #[error("time {0} is not a grid node")]
    OffGrid(f64),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Identifies one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngSpec {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self { master_seed, stream_id }
    }

    /// ChaCha20 keyed by a SplitMix64 expansion of the master seed, with the
    /// stream id selecting the ChaCha stream.
    pub fn rng(&self) -> ChaCha20Rng {
        let mut state = self.master_seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(self.stream_id);
        rng
    }

    pub fn with_stream(&self, stream_id: u64) -> Self {
        Self { master_seed: self.master_seed, stream_id }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shared increments and both fBM paths; all arrays are node-major then
/// component (`dw[k*d + i]`, `b1[k*d + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub grid: TimeGrid,
    pub d: usize,
    pub dw: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

impl NoiseBundle {
    pub fn dw_at(&self, k: usize) -> &[f64] {
        &self.dw[k * self.d..(k + 1) * self.d]
    }

    pub fn b1_at(&self, k: usize) -> &[f64] {
        &self.b1[k * self.d..(k + 1) * self.d]
    }

    pub fn b2_at(&self, k: usize) -> &[f64] {
        &self.b2[k * self.d..(k + 1) * self.d]
    }
}

/// N·d standard Gaussian increments with variance Δt, node-major.
pub fn brownian_increments(grid: TimeGrid, d: usize, rng: RngSpec) -> Vec<f64> {
    let mut r = rng.rng();
    let sd = grid.dt().sqrt();
    (0..grid.n * d).map(|_| sd * r.sample::<f64, _>(StandardNormal)).collect()
}

/// B_{t_k} = Σ_{j<k} w_kj ΔW_j per component; a unit table gives the plain cumulative sum.
pub fn fbm_from_increments(table: &KernelTable, dw: &[f64], d: usize) -> Vec<f64> {
    let n = table.grid().n;
    assert_eq!(dw.len(), n * d);
    let mut b = vec![0.0; (n + 1) * d];
    if table.is_unit() {
        for k in 1..=n {
            for i in 0..d {
                b[k * d + i] = b[(k - 1) * d + i] + dw[(k - 1) * d + i];
            }
        }
        return b;
    }
    for k in 1..=n {
        let row = table.row(k);
        for i in 0..d {
            let mut s = 0.0;
            for (j, w) in row.iter().enumerate() {
                s += w * dw[j * d + i];
            }
            b[k * d + i] = s;
        }
    }
    b
}

pub fn sample_noise(hp: HurstPair, grid: TimeGrid, d: usize, rng: RngSpec) -> Result<NoiseBundle, NoiseError> {
    if d == 0 {
        return Err(NoiseError::Dimension);
    }
    let t1 = KernelTable::cached(hp.h1, grid)?;
    let t2 = KernelTable::cached(hp.h2, grid)?;
    let dw = brownian_increments(grid, d, rng);
    let b1 = fbm_from_increments(&t1, &dw, d);
    let b2 = fbm_from_increments(&t2, &dw, d);
    Ok(NoiseBundle { grid, d, dw, b1, b2 })
}

/// MC estimates of E[B^{H1}_t B^{H2}_s] over all pairs of the requested nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCovariance {
    pub times: Vec<f64>,
    /// estimate[i][l] for (t_i, s_l)
    pub estimate: Vec<Vec<Estimate>>,
    /// ∫₀^{T} K_{H1}(T,u) K_{H2}(T,u) du at the horizon
    pub terminal_quadrature: f64,
}

pub fn cross_covariance_mc(
    hp: HurstPair,
    grid: TimeGrid,
    n_paths: usize,
    master_seed: u64,
    times: &[f64],
) -> Result<CrossCovariance, NoiseError> {
    if n_paths < 1000 {
        return Err(NoiseError::TooFewPaths { min: 1000, got: n_paths });
    }
    let idx: Vec<usize> = times.iter().map(|&t| grid.index_of(t).ok_or(NoiseError::OffGrid(t))).collect::<Result<_, _>>()?;
    let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let nb = sample_noise(hp, grid, 1, RngSpec::new(master_seed, p as u64))?;
            Ok((idx.iter().map(|&k| nb.b1[k]).collect(), idx.iter().map(|&k| nb.b2[k]).collect()))
        })
        .collect::<Result<_, NoiseError>>()?;
    let m = idx.len();
    let estimate = (0..m)
        .map(|i| {
            (0..m)
                .map(|l| {
                    let prod: Vec<f64> = samples.iter().map(|(a, b)| a[i] * b[l]).collect();
                    Estimate::from_samples(&prod)
                })
                .collect()
        })
        .collect();
    let terminal_quadrature = cross_moment(hp, grid.t_end, 256)?;
    Ok(CrossCovariance { times: times.to_vec(), estimate, terminal_quadrature })
}

/// max over node pairs of |x_t - x_s| / |t - s|^γ for a scalar path.
pub fn holder_constant(grid: &TimeGrid, x: &[f64], gamma: f64) -> f64 {
    let dt = grid.dt();
    let n = x.len();
    (1..n)
        .map(|lag| {
            let scale = (lag as f64 * dt).powf(-gamma);
            (0..n - lag).fold(0.0f64, |m, k| m.max((x[k + lag] - x[k]).abs())) * scale
        })
        .fold(0.0, f64::max)
}

/// Hölder constant of a node-major d-vector path in the Euclidean norm.
pub fn holder_constant_vec(grid: &TimeGrid, x: &[f64], d: usize, gamma: f64) -> f64 {
    let dt = grid.dt();
    let n = x.len() / d;
    (1..n)
        .map(|lag| {
            let scale = (lag as f64 * dt).powf(-gamma);
            (0..n - lag).fold(0.0f64, |m, k| {
                let s: f64 = (0..d).map(|i| (x[(k + lag) * d + i] - x[k * d + i]).powi(2)).sum();
                m.max(s.sqrt())
            }) * scale
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::fbm_covariance;
    use crate::stats::variance_estimate;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let g = TimeGrid::new(1.0, 32).unwrap();
        let a = brownian_increments(g, 2, RngSpec::new(7, 3));
        let b = brownian_increments(g, 2, RngSpec::new(7, 3));
        let c = brownian_increments(g, 2, RngSpec::new(7, 4));
        let e = brownian_increments(g, 2, RngSpec::new(8, 3));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, e);
    }

    #[test]
    fn half_is_cumulative_sum_bit_exact() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let hp = HurstPair::new(0.5, 0.3).unwrap();
        let nb = sample_noise(hp, g, 2, RngSpec::new(1, 0)).unwrap();
        for i in 0..2 {
            let mut s = 0.0;
            for k in 1..=g.n {
                s += nb.dw[(k - 1) * 2 + i];
                assert_eq!(nb.b1[k * 2 + i].to_bits(), s.to_bits());
            }
        }
        assert!(nb.b2_at(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fbm_variance_within_mc_error() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let hp = HurstPair::new(0.3, 0.7).unwrap();
        let n = 20_000;
        let paths: Vec<NoiseBundle> =
            (0..n).into_par_iter().map(|p| sample_noise(hp, g, 1, RngSpec::new(11, p as u64)).unwrap()).collect();
        for (k, t) in [(16, 0.25), (64, 1.0)] {
            let x1: Vec<f64> = paths.iter().map(|p| p.b1[k]).collect();
            let x2: Vec<f64> = paths.iter().map(|p| p.b2[k]).collect();
            let v1 = variance_estimate(&x1);
            let v2 = variance_estimate(&x2);
            assert!(v1.within(fbm_covariance(0.3, t, t), 3.0), "{v1:?}");
            assert!(v2.within(fbm_covariance(0.7, t, t), 3.0), "{v2:?}");
        }
    }

    #[test]
    fn cross_covariance_reduces_to_min_for_brownian_motion() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let hp = HurstPair::new(0.5, 0.5).unwrap();
        let c = cross_covariance_mc(hp, g, 4000, 5, &[0.25, 1.0]).unwrap();
        assert!(c.estimate[0][1].within(0.25, 3.0));
        assert!(c.estimate[1][1].within(1.0, 3.0));
        assert!((c.terminal_quadrature - 1.0).abs() < 1e-10);
        assert!(cross_covariance_mc(hp, g, 10, 5, &[1.0]).is_err());
        assert!(cross_covariance_mc(hp, g, 1000, 5, &[0.3]).is_err());
    }

    #[test]
    fn holder_constant_of_line() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let x: Vec<f64> = g.nodes().iter().map(|t| 2.0 * t).collect();
        assert!((holder_constant(&g, &x, 1.0) - 2.0).abs() < 1e-12);
    }
}
