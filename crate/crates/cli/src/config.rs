//! Run configuration: one TOML or JSON file, scalar flag overrides, defaults for
//! everything else.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use mixfbm::density::BandwidthRule;
use mixfbm::kernel::HurstPair;
use mixfbm::sde::{DriftSpec, MixedSdeSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub d: usize,
    pub x0: Vec<f64>,
    pub a1: f64,
    pub a2: f64,
    /// Row-major d×d; identity when omitted.
    pub a_matrix: Option<Vec<Vec<f64>>>,
    pub t_end: f64,
    pub h1: f64,
    pub h2: f64,
    pub drift: DriftSpec,
    pub n_steps: usize,
    pub n_paths: usize,
    pub master_seed: u64,
    /// Rayon worker count; all cores when omitted. Results do not depend on it.
    pub workers: Option<usize>,
    /// Run directory; `mixfbm-out/<command>` when omitted.
    pub out_dir: Option<PathBuf>,
    pub kernel: KernelParams,
    pub fbm_check: FbmParams,
    pub psi: PsiParams,
    pub cgp: CgpParams,
    pub bridge: BridgeParams,
    pub density: DensityParams,
    pub scaling: ScalingParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 1,
            x0: vec![0.0],
            a1: 1.0,
            a2: 0.8,
            a_matrix: None,
            t_end: 1.0,
            h1: 0.3,
            h2: 0.7,
            drift: DriftSpec::zero(),
            n_steps: 128,
            n_paths: 100_000,
            master_seed: 1,
            workers: None,
            out_dir: None,
            kernel: KernelParams::default(),
            fbm_check: FbmParams::default(),
            psi: PsiParams::default(),
            cgp: CgpParams::default(),
            bridge: BridgeParams::default(),
            density: DensityParams::default(),
            scaling: ScalingParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelParams {
    /// Hurst index of the table; h1 when omitted.
    pub h: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbmParams {
    /// Grid times for the covariance table; T/4, T/2, T when omitted.
    pub times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsiParams {
    pub tol: f64,
    /// Noise stream whose path feeds h = b(t, X_t).
    pub stream: u64,
}

impl Default for PsiParams {
    fn default() -> Self {
        Self { tol: 1e-10, stream: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CgpParams {
    /// Evaluation time; T when omitted.
    pub t: Option<f64>,
    /// Lookbacks; T/64, T/16, T/4 when omitted.
    pub eps: Option<Vec<f64>>,
    /// Frequencies of the conditional characteristic-function check.
    pub frequencies: Vec<f64>,
}

impl Default for CgpParams {
    fn default() -> Self {
        Self { t: None, eps: None, frequencies: vec![0.5, 1.0, 1.5, 2.0, 3.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeParams {
    /// Terminal values (applied to every component) for the residual check.
    pub x: Vec<f64>,
    /// Bridges per terminal value in the residual check.
    pub paths_per_value: usize,
}

impl Default for BridgeParams {
    fn default() -> Self {
        Self { x: vec![-2.0, 0.5, 3.0], paths_per_value: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Kde,
    Girsanov,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityParams {
    pub method: MethodChoice,
    /// Evaluation points; a default layout around x0 when omitted.
    pub points: Option<Vec<Vec<f64>>>,
    /// Default layout for d = 1: `n_points` points on x0 ± width·σ.
    pub n_points: usize,
    pub width: f64,
    pub bandwidth: BandwidthRule,
    /// Bridge paths per evaluation point.
    pub girsanov_paths: usize,
}

impl Default for DensityParams {
    fn default() -> Self {
        Self { method: MethodChoice::Both, points: None, n_points: 9, width: 3.0, bandwidth: BandwidthRule::Scott, girsanov_paths: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingParams {
    pub t0s: Vec<f64>,
}

impl Default for ScalingParams {
    fn default() -> Self {
        Self { t0s: vec![0.25, 0.5, 1.0, 2.0, 4.0] }
    }
}

/// Scalar fields that command-line flags (and two environment variables) may set.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub h1: Option<f64>,
    pub h2: Option<f64>,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    pub t_end: Option<f64>,
    pub n_steps: Option<usize>,
    pub n_paths: Option<usize>,
    pub master_seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// TOML unless the extension is `.json`.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
        } else {
            toml::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = o.$f.clone() { self.$f = v; })* };
        }
        set!(h1, h2, a1, a2, t_end, n_steps, n_paths, master_seed);
        if o.workers.is_some() {
            self.workers = o.workers;
        }
        if o.out_dir.is_some() {
            self.out_dir = o.out_dir.clone();
        }
    }

    /// Fills the identity A and checks everything that does not need a computation.
    pub fn resolve(&mut self) -> Result<MixedSdeSpec, String> {
        if self.a_matrix.is_none() {
            self.a_matrix = Some((0..self.d).map(|i| (0..self.d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect());
        }
        if self.n_steps < 2 {
            return Err(format!("n_steps = {} must be at least 2", self.n_steps));
        }
        if self.n_paths == 0 {
            return Err("n_paths must be positive".into());
        }
        if self.workers == Some(0) {
            return Err("workers must be positive".into());
        }
        let spec = MixedSdeSpec {
            d: self.d,
            x0: self.x0.clone(),
            a1: self.a1,
            a2: self.a2,
            a_matrix: self.a_matrix.clone().unwrap_or_default(),
            t_end: self.t_end,
            hp: HurstPair { h1: self.h1, h2: self.h2 },
            drift: self.drift.clone(),
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c: RunConfig = toml::from_str(
            "d = 2\nx0 = [0.5, -1.0]\n[drift]\nfamily = \"bounded-sin\"\namplitude = [0.5, 0.2]\nfrequency = [1.0, 2.0]\n",
        )
        .unwrap();
        c.resolve().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.a_matrix, Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("hurst = 0.3").is_err());
        assert!(toml::from_str::<RunConfig>("[density]\nmethods = \"kde\"").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::default();
        c.apply(&Overrides { h1: Some(0.6), n_paths: Some(5), ..Default::default() });
        assert_eq!((c.h1, c.n_paths, c.h2), (0.6, 5, 0.7));
    }

    #[test]
    fn invalid_spec_is_reported() {
        let mut c = RunConfig { h1: 1.5, ..Default::default() };
        assert!(c.resolve().is_err());
        let mut c = RunConfig { x0: vec![0.0, 1.0], ..Default::default() };
        assert!(c.resolve().unwrap_err().contains("x0"));
    }
}
