//! Run configuration: a single JSON document per run.
//!
//! Unknown keys anywhere in the document are rejected. Missing optional
//! sections take their defaults (aperture `a = 1`, `seed = 0`).

use std::fmt;
use std::path::{Path, PathBuf};

use potbench_core::geometry::{BumpProfile, GraphDomain};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::BenchError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    #[serde(default)]
    pub problem: ProblemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSpec>,
    #[serde(default)]
    pub scales: Scales,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation: Option<Truncation>,
    /// Experiments run in order by the `run` command.
    #[serde(default)]
    pub experiments: Vec<Experiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<LatticeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipgraph: Option<LipgraphSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySpec>,
    /// Evaluation points for u and ∇u after a solve.
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    /// Number of leading singular values reported by `spectrum`.
    #[serde(default = "default_svd_k")]
    pub svd_k: usize,
    /// Also write every assembled matrix of `spectrum` in binary form.
    #[serde(default)]
    pub export_matrices: bool,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Cone aperture.
    #[serde(default = "default_aperture")]
    pub a: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_svd_k() -> usize {
    40
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_aperture() -> f64 {
    1.0
}

fn default_one() -> f64 {
    1.0
}

fn default_three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSpec {
    /// Icosphere (`dim = 3`) or circle (`dim = 2`) centered at the origin.
    Sphere {
        #[serde(default = "default_three")]
        dim: usize,
        #[serde(default = "default_one")]
        radius: f64,
        level: usize,
    },
    /// Graph of a function over `[-extent, extent]^n`; flat when `bump` is absent.
    Graph {
        n: usize,
        extent: f64,
        h: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bump: Option<BumpConfig>,
    },
}

impl DomainSpec {
    pub fn ambient_dim(&self) -> usize {
        match self {
            DomainSpec::Sphere { dim, .. } => *dim,
            DomainSpec::Graph { n, .. } => n + 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DomainSpec::Sphere { .. } => "sphere",
            DomainSpec::Graph { .. } => "graph",
        }
    }

    pub fn graph_domain(&self) -> Option<GraphDomain> {
        match self {
            DomainSpec::Graph { n, extent, bump: None, .. } => Some(GraphDomain::flat(*n, *extent)),
            DomainSpec::Graph { n, extent, bump: Some(b), .. } => {
                Some(GraphDomain::bump(*n, *extent, b.kappa, b.radius, b.profile.into()))
            }
            DomainSpec::Sphere { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpConfig {
    /// Lipschitz constant of the bump.
    pub kappa: f64,
    pub radius: f64,
    #[serde(default)]
    pub profile: Profile,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Cone,
    #[default]
    Smooth,
}

impl From<Profile> for BumpProfile {
    fn from(p: Profile) -> Self {
        match p {
            Profile::Cone => BumpProfile::Cone,
            Profile::Smooth => BumpProfile::Smooth,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    #[default]
    None,
    Dirichlet,
    Neumann,
}

/// Boundary data, by name from a fixed registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Constant {
        value: f64,
    },
    /// `scale * x_axis` (0-based axis).
    Coordinate {
        axis: usize,
        #[serde(default = "default_one")]
        scale: f64,
    },
    /// `amplitude * (1 - |x - center|^2 / radius^2)^3` inside the ball, 0 outside.
    SmoothBump {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
        radius: f64,
        #[serde(default = "default_one")]
        amplitude: f64,
    },
    /// 1 on the closed ball, 0 outside.
    BallIndicator {
        center: Vec<f64>,
        radius: f64,
    },
}

impl DataSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DataSpec::Constant { .. } => "constant",
            DataSpec::Coordinate { .. } => "coordinate",
            DataSpec::SmoothBump { .. } => "smooth_bump",
            DataSpec::BallIndicator { .. } => "ball_indicator",
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let dist2 = |c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        match self {
            DataSpec::Constant { value } => *value,
            DataSpec::Coordinate { axis, scale } => scale * x[*axis],
            DataSpec::SmoothBump { center, radius, amplitude } => {
                let d2 = match center {
                    Some(c) => dist2(c),
                    None => x.iter().map(|a| a * a).sum(),
                };
                let s = 1.0 - d2 / (radius * radius);
                if s > 0.0 {
                    amplitude * s * s * s
                } else {
                    0.0
                }
            }
            DataSpec::BallIndicator { center, radius } => {
                if dist2(center) <= radius * radius {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<(), BenchError> {
        let bad = |key: &str, reason: String| Err(BenchError::invalid(format!("data.{key}"), reason));
        match self {
            DataSpec::Constant { value } if !value.is_finite() => bad("value", "must be finite".into()),
            DataSpec::Coordinate { axis, .. } if *axis >= dim => {
                bad("axis", format!("axis {axis} out of range for ambient dimension {dim}"))
            }
            DataSpec::SmoothBump { radius, .. } | DataSpec::BallIndicator { radius, .. } if !(*radius > 0.0) => {
                bad("radius", "must be positive".into())
            }
            DataSpec::SmoothBump { center: Some(c), .. } | DataSpec::BallIndicator { center: c, .. }
                if c.len() != dim =>
            {
                bad("center", format!("expected {dim} coordinates, found {}", c.len()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scales {
    #[serde(rename = "s", default, skip_serializing_if = "Option::is_none")]
    pub small: Option<f64>,
    #[serde(rename = "S", default, skip_serializing_if = "Option::is_none")]
    pub big: Option<f64>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Auto {
    Auto,
}

/// A number, or `"auto"` to derive it from the proof parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScaleValue {
    Value(f64),
    Auto(Auto),
}

impl ScaleValue {
    pub fn is_auto(&self) -> bool {
        matches!(self, ScaleValue::Auto(_))
    }
}

impl Default for ScaleValue {
    fn default() -> Self {
        ScaleValue::Auto(Auto::Auto)
    }
}

/// Window `(t, T]` for the intermediate scales and the ball radius R̃.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truncation {
    #[serde(default)]
    pub t: ScaleValue,
    #[serde(rename = "T", default)]
    pub big_t: ScaleValue,
    #[serde(rename = "R_tilde", default)]
    pub r_tilde: ScaleValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    pub j_min: i32,
    pub j_max: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipgraphSpec {
    /// The root cube is the cube of `root_level` holding the node nearest this point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_point: Option<Vec<f64>>,
    /// Defaults to the coarsest lattice level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_level: Option<i32>,
    #[serde(default)]
    pub alpha: ScaleValue,
    #[serde(default = "default_m")]
    pub m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<f64>,
    /// Grid points per axis for the sampled graph export.
    #[serde(default = "default_grid")]
    pub grid: usize,
}

fn default_m() -> f64 {
    3.0
}

fn default_grid() -> usize {
    33
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub quantity: StudyQuantity,
    pub levels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyQuantity {
    /// max |𝒟1 − 1| inside and |𝒟1| outside.
    Gauss,
    /// Dirichlet datum x_d against its harmonic extension.
    Dirichlet,
    /// Neumann datum x_d against x_d + c.
    Neumann,
}

impl StudyQuantity {
    pub fn as_str(self) -> &'static str {
        match self {
            StudyQuantity::Gauss => "gauss",
            StudyQuantity::Dirichlet => "dirichlet",
            StudyQuantity::Neumann => "neumann",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SolveDirichlet,
    SolveNeumann,
    FlatnessReport,
    Spectrum,
    LipgraphBuild,
    GoodLambda,
    ConvergenceStudy,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::SolveDirichlet,
        Experiment::SolveNeumann,
        Experiment::FlatnessReport,
        Experiment::Spectrum,
        Experiment::LipgraphBuild,
        Experiment::GoodLambda,
        Experiment::ConvergenceStudy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::SolveDirichlet => "solve-dirichlet",
            Experiment::SolveNeumann => "solve-neumann",
            Experiment::FlatnessReport => "flatness-report",
            Experiment::Spectrum => "spectrum",
            Experiment::LipgraphBuild => "lipgraph-build",
            Experiment::GoodLambda => "good-lambda",
            Experiment::ConvergenceStudy => "convergence-study",
        }
    }

    pub fn parse(name: &str) -> Option<Experiment> {
        Experiment::ALL.into_iter().find(|e| e.as_str() == name)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, BenchError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        BenchError::Config { key: path, reason: e.inner().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact serialization of the parsed config.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |key: &str, reason: &str| Err(BenchError::invalid(key, reason));
        match &self.domain {
            DomainSpec::Sphere { dim, radius, .. } => {
                if !(*dim == 2 || *dim == 3) {
                    return bad("domain.dim", "sphere meshes exist for dim 2 and 3 only");
                }
                if !(*radius > 0.0) {
                    return bad("domain.radius", "must be positive");
                }
            }
            DomainSpec::Graph { n, extent, h, bump } => {
                if !(*n == 1 || *n == 2) {
                    return bad("domain.n", "graph meshes exist for n = 1 and 2 only");
                }
                if !(*extent > 0.0) {
                    return bad("domain.extent", "must be positive");
                }
                if !(*h > 0.0 && *h < *extent) {
                    return bad("domain.h", "need 0 < h < extent");
                }
                if let Some(b) = bump {
                    if !(b.kappa >= 0.0 && b.kappa.is_finite()) {
                        return bad("domain.bump.kappa", "must be finite and nonnegative");
                    }
                    if !(b.radius > 0.0) {
                        return bad("domain.bump.radius", "must be positive");
                    }
                }
            }
        }
        let dim = self.domain.ambient_dim();
        if let Some(d) = &self.data {
            d.validate(dim)?;
        }
        if !(self.a > 0.0) {
            return bad("a", "aperture must be positive");
        }
        let sc = &self.scales;
        for (key, v) in [("s", sc.small), ("S", sc.big), ("R", sc.radius)] {
            if matches!(v, Some(x) if !(x > 0.0)) {
                return Err(BenchError::invalid(format!("scales.{key}"), "must be positive"));
            }
        }
        if let (Some(s), Some(big)) = (sc.small, sc.big) {
            if s >= big {
                return bad("scales.s", "need s < S");
            }
        }
        if matches!(sc.delta, Some(d) if !(d > 0.0 && d < 1.0)) {
            return bad("scales.delta", "need 0 < delta < 1");
        }
        if matches!(sc.p, Some(p) if !(p > 1.0 && p.is_finite())) {
            return bad("scales.p", "need 1 < p < infinity");
        }
        if let Some(tr) = &self.truncation {
            let any_auto = tr.t.is_auto() || tr.big_t.is_auto() || tr.r_tilde.is_auto();
            if any_auto {
                self.require_proof_scales("truncation")?;
            }
            if tr.r_tilde.is_auto() && sc.radius.is_none() {
                return bad("truncation.R_tilde", "\"auto\" needs scales.R");
            }
            for (key, v) in [("t", tr.t), ("T", tr.big_t), ("R_tilde", tr.r_tilde)] {
                if matches!(v, ScaleValue::Value(x) if !(x > 0.0)) {
                    return Err(BenchError::invalid(format!("truncation.{key}"), "must be positive"));
                }
            }
            if let (ScaleValue::Value(t), ScaleValue::Value(big)) = (tr.t, tr.big_t) {
                if t >= big {
                    return bad("truncation.t", "need t < T");
                }
            }
        }
        if let Some(l) = &self.lattice {
            if l.j_min > l.j_max {
                return bad("lattice.j_min", "must not exceed j_max");
            }
        }
        if let Some(lg) = &self.lipgraph {
            if lg.alpha.is_auto() {
                self.require_proof_scales("lipgraph.alpha")?;
            }
            if matches!(lg.alpha, ScaleValue::Value(x) if !(x > 0.0)) {
                return bad("lipgraph.alpha", "must be positive");
            }
            if !(lg.m >= 1.0) {
                return bad("lipgraph.m", "must be at least 1");
            }
            if lg.grid < 2 {
                return bad("lipgraph.grid", "need at least 2 points per axis");
            }
            if matches!(&lg.root_point, Some(p) if p.len() != dim) {
                return Err(BenchError::invalid("lipgraph.root_point", format!("expected {dim} coordinates")));
            }
        }
        if let Some(st) = &self.study {
            if st.levels.is_empty() {
                return bad("study.levels", "must not be empty");
            }
            if !matches!(self.domain, DomainSpec::Sphere { .. }) {
                return bad("study.quantity", "convergence studies run on sphere domains");
            }
        }
        if let Some(k) = self.points.iter().position(|p| p.len() != dim) {
            return Err(BenchError::invalid(format!("points[{k}]"), format!("expected {dim} coordinates")));
        }
        Ok(())
    }

    fn require_proof_scales(&self, key: &str) -> Result<(), BenchError> {
        let sc = &self.scales;
        if sc.delta.is_none() || sc.p.is_none() || sc.big.is_none() {
            return Err(BenchError::invalid(key, "\"auto\" needs scales.delta, scales.p and scales.S"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_sphere_config_fills_defaults() {
        let cfg = parse_config_str(r#"{"domain": {"kind": "sphere", "level": 3}, "problem": "dirichlet"}"#).unwrap();
        assert_eq!(cfg.a, 1.0);
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.domain, DomainSpec::Sphere { dim: 3, radius: 1.0, level: 3 });
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config_str(r#"{"domain": {"kind": "sphere", "level": 3}, "foo": 1}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("foo"), "{err}");
        let err = parse_config_str(r#"{"domain": {"kind": "sphere", "level": 3, "foo": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
    }

    #[test]
    fn unknown_data_function_is_rejected() {
        let err = parse_config_str(r#"{"domain": {"kind": "sphere", "level": 1}, "data": {"name": "nope"}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("data"), "{err}");
    }

    #[test]
    fn auto_needs_proof_scales() {
        let text = r#"{"domain": {"kind": "graph", "n": 2, "extent": 1, "h": 0.1},
                       "truncation": {"t": 0.1, "T": "auto", "R_tilde": 1}}"#;
        let err = parse_config_str(text).unwrap_err();
        assert!(err.to_string().contains("truncation"), "{err}");
    }

    #[test]
    fn round_trip() {
        let text = r#"{"domain": {"kind": "graph", "n": 2, "extent": 1, "h": 0.0625,
                                  "bump": {"kappa": 0.2, "radius": 0.5, "profile": "cone"}},
                       "problem": "neumann",
                       "data": {"name": "smooth_bump", "radius": 0.5},
                       "scales": {"s": 0.01, "S": 0.25, "R": 0.5, "delta": 1e-6, "p": 2},
                       "truncation": {"t": 0.125, "T": "auto", "R_tilde": "auto"},
                       "experiments": ["spectrum", "good-lambda"],
                       "lipgraph": {"alpha": "auto"},
                       "seed": 7}"#;
        let cfg = parse_config_str(text).unwrap();
        let again = parse_config_str(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }
}
