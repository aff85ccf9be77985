//! JSON run configuration.
//!
//! Parsing reports the failing field as a dotted path (`gamma.h[2]: ...`); semantic checks
//! collect every violated constraint before any computation starts.

use std::path::{Path, PathBuf};

use rodlimit::cross_section::SectionPreset;
use rodlimit::frame_geometry::{CurvePreset, FrameMode};
use rodlimit::gamma_harness::NonlinearDensity;
use rodlimit::rod_functionals::{AnalyticSpec, FourierSeries};
use rodlimit::rod_minimizer::BoundarySpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub curve: CurvePreset,
    /// Curve length; presets supply their natural length when absent.
    #[serde(default)]
    pub length: Option<f64>,
    #[serde(default)]
    pub frame: FrameMode,
    pub section: SectionPreset,
    /// Target triangle edge length on the user-scale section.
    pub mesh_edge: f64,
    pub material: NonlinearDensity,
    pub alpha: f64,
    /// Number of rod intervals.
    pub n_s: usize,
    #[serde(default)]
    pub cell: CellBlock,
    #[serde(default)]
    pub reduce: Option<ReduceBlock>,
    #[serde(default)]
    pub gamma: Option<GammaBlock>,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Seed for random probe samples; `--seed` takes precedence.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellBlock {
    /// Number of random (t, F) samples in the table.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Samples are drawn uniformly from [-amplitude, amplitude].
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
}

fn default_samples() -> usize {
    20
}

fn default_amplitude() -> f64 {
    1.0
}

impl Default for CellBlock {
    fn default() -> Self {
        CellBlock { samples: default_samples(), amplitude: default_amplitude() }
    }
}

/// Loads as Fourier series in s: force components in world coordinates, axial load g,
/// twisting moment m.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    #[serde(default)]
    pub f: [FourierSeries; 3],
    #[serde(default)]
    pub g: FourierSeries,
    #[serde(default)]
    pub m: FourierSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReduceBlock {
    pub loads: LoadSpec,
    pub boundary: BoundarySpec,
    /// Inextensibility penalty weight; the solver default is used when absent.
    #[serde(default)]
    pub penalty: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpChoice {
    /// φ = 0; compared against the unrelaxed reference.
    #[default]
    None,
    /// Piecewise-linear cell minimizers; compared against the relaxed reference.
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaBlock {
    /// Strictly decreasing thicknesses.
    pub h: Vec<f64>,
    #[serde(default)]
    pub state: AnalyticSpec,
    /// Stretch g for 2 < α < 3.
    #[serde(default)]
    pub stretch: FourierSeries,
    #[serde(default)]
    pub warp: WarpChoice,
    #[serde(default = "default_s_order")]
    pub s_order: usize,
    #[serde(default = "default_tri_degree")]
    pub tri_degree: usize,
}

fn default_s_order() -> usize {
    4
}

fn default_tri_degree() -> usize {
    4
}

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    Parse(String),
    Invalid(Vec<String>),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(p, e) => write!(f, "cannot read config {}: {e}", p.display()),
            ConfigError::Parse(m) => write!(f, "config parse error: {m}"),
            ConfigError::Invalid(list) => {
                writeln!(f, "invalid config ({} problem{}):", list.len(), if list.len() == 1 { "" } else { "s" })?;
                for item in list {
                    writeln!(f, "  {item}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            ConfigError::Parse(inner.to_string())
        } else {
            ConfigError::Parse(format!("{path}: {inner}"))
        }
    })?;
    let problems = cfg.problems();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(problems))
    }
}

fn finite_positive(out: &mut Vec<String>, field: &str, v: f64) {
    if !(v.is_finite() && v > 0.0) {
        out.push(format!("{field}: must be finite and positive (got {v})"));
    }
}

fn finite_series(out: &mut Vec<String>, field: &str, f: &FourierSeries) {
    if !(f.constant.is_finite() && f.slope.is_finite() && f.modes.iter().all(|m| m.1.is_finite() && m.2.is_finite())) {
        out.push(format!("{field}: coefficients must be finite"));
    }
}

impl RunConfig {
    /// Every violated constraint as `field: message`.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(l) = self.length {
            finite_positive(&mut out, "length", l);
        }
        finite_positive(&mut out, "mesh_edge", self.mesh_edge);
        match self.material {
            NonlinearDensity::SaintVenantKirchhoff { lambda, mu } => {
                if !(mu.is_finite() && mu > 0.0) {
                    out.push(format!("material.mu: must be positive (got {mu})"));
                }
                if !(lambda.is_finite() && 3.0 * lambda + 2.0 * mu > 0.0) {
                    out.push(format!("material.lambda: need 3*lambda + 2*mu > 0 (got lambda = {lambda}, mu = {mu})"));
                }
            }
            NonlinearDensity::SquaredDistanceToSo3 => {}
        }
        if !(self.alpha.is_finite() && self.alpha > 2.0) {
            out.push(format!("alpha: must exceed 2 (got {})", self.alpha));
        }
        if self.n_s < 2 {
            out.push(format!("n_s: need at least 2 rod intervals (got {})", self.n_s));
        }
        if self.cell.samples == 0 {
            out.push("cell.samples: must be at least 1".into());
        }
        finite_positive(&mut out, "cell.amplitude", self.cell.amplitude);
        if let Some(r) = &self.reduce {
            for (i, f) in r.loads.f.iter().enumerate() {
                finite_series(&mut out, &format!("reduce.loads.f[{i}]"), f);
            }
            finite_series(&mut out, "reduce.loads.g", &r.loads.g);
            finite_series(&mut out, "reduce.loads.m", &r.loads.m);
            if let Some(p) = r.penalty {
                finite_positive(&mut out, "reduce.penalty", p);
            }
        }
        if let Some(g) = &self.gamma {
            if g.h.is_empty() {
                out.push("gamma.h: need at least one thickness".into());
            }
            for (i, h) in g.h.iter().enumerate() {
                finite_positive(&mut out, &format!("gamma.h[{i}]"), *h);
            }
            if g.h.windows(2).any(|w| w[1] >= w[0]) {
                out.push("gamma.h: must be strictly decreasing".into());
            }
            for (name, f) in [("a", &g.state.a), ("b", &g.state.b), ("w", &g.state.w), ("u", &g.state.u)] {
                finite_series(&mut out, &format!("gamma.state.{name}"), f);
            }
            finite_series(&mut out, "gamma.stretch", &g.stretch);
            if g.s_order == 0 {
                out.push("gamma.s_order: must be at least 1".into());
            }
            if g.tri_degree == 0 {
                out.push("gamma.tri_degree: must be at least 1".into());
            }
        }
        out
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
