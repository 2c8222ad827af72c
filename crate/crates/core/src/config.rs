//! JSON scenario files.
//!
//! ```json
//! {
//!   "nodes": [[0, 0], [-4.5, -1.5]],
//!   "anchor": 0,
//!   "edges": [{"i": 0, "j": 1, "reflectors": [{"orientation_deg": 0, "offset_m": 2}], "los": false}],
//!   "noise": {"sigma2_range": 3, "aoa_halfwidth_deg": 5},
//!   "bp": {"alpha": null, "tol": 0.0001, "max_iters": 100},
//!   "seed": 1
//! }
//! ```
//!
//! Angles are degrees in files and radians everywhere else. An edge without
//! a `reflectors` list gets reflectors sampled from `scatter` (default
//! orthogonal) using `seed`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bp::{BpConfig, DEFAULT_MAX_ITERS, DEFAULT_SIGMA2, DEFAULT_TOL};
use crate::geometry::{GeometryTolerances, Position};
use crate::network::NodeId;
use crate::sim::{
    build_scenario, GeneratorOptions, LinkSpec, NetworkScenario, NoiseModel, Reflector, ScatterFamily, ScenarioSpec,
    SimError, PRESET_LINKS, PRESET_POSITIONS,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectorEntry {
    pub orientation_deg: f64,
    pub offset_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEntry {
    pub i: NodeId,
    pub j: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflectors: Option<Vec<ReflectorEntry>>,
    #[serde(default)]
    pub los: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub sigma2_range: f64,
    pub aoa_halfwidth_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpEntry {
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Model variance; defaults to the range noise variance (or 3 when the
    /// scenario is noiseless).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

fn default_tol() -> f64 {
    DEFAULT_TOL
}

fn default_max_iters() -> usize {
    DEFAULT_MAX_ITERS
}

impl Default for BpEntry {
    fn default() -> Self {
        Self {
            alpha: None,
            sigma2: None,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub nodes: Vec<[f64; 2]>,
    pub anchor: NodeId,
    pub edges: Vec<EdgeEntry>,
    pub noise: NoiseEntry,
    #[serde(default)]
    pub bp: BpEntry,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scatter: Option<ScatterFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths_per_edge: Option<usize>,
}

impl ScenarioConfig {
    /// Five-node preset with reflectors left to the sampler.
    pub fn paper_preset(family: ScatterFamily, noise: NoiseModel, seed: u64) -> Self {
        Self {
            nodes: PRESET_POSITIONS.iter().map(|&(x, y)| [x, y]).collect(),
            anchor: 0,
            edges: PRESET_LINKS
                .iter()
                .map(|&(i, j)| EdgeEntry {
                    i,
                    j,
                    reflectors: None,
                    los: false,
                })
                .collect(),
            noise: NoiseEntry {
                sigma2_range: noise.sigma2_range,
                aoa_halfwidth_deg: noise.aoa_halfwidth.to_degrees(),
            },
            bp: BpEntry::default(),
            seed,
            scatter: Some(family),
            paths_per_edge: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel {
            sigma2_range: self.noise.sigma2_range,
            aoa_halfwidth: self.noise.aoa_halfwidth_deg.to_radians(),
        }
    }

    pub fn generator_options(&self) -> GeneratorOptions {
        let mut o = GeneratorOptions::with_family(self.scatter.clone().unwrap_or(ScatterFamily::Orthogonal));
        if let Some(r) = self.paths_per_edge {
            o.paths_per_edge = r;
        }
        o
    }

    pub fn bp_config(&self) -> BpConfig {
        let sigma2 = self.bp.sigma2.unwrap_or(if self.noise.sigma2_range > 0.0 {
            self.noise.sigma2_range
        } else {
            DEFAULT_SIGMA2
        });
        BpConfig {
            alpha: self.bp.alpha,
            sigma2,
            tol: self.bp.tol,
            max_iters: self.bp.max_iters,
            geometry: GeometryTolerances::default(),
        }
    }

    pub fn scenario_spec(&self) -> ScenarioSpec {
        ScenarioSpec::Explicit {
            positions: self.nodes.iter().map(|&[x, y]| Position::new(x, y)).collect(),
            anchor: self.anchor,
            links: self
                .edges
                .iter()
                .map(|e| LinkSpec {
                    i: e.i,
                    j: e.j,
                    reflectors: e.reflectors.as_ref().map(|rs| {
                        rs.iter()
                            .map(|r| Reflector::new(r.orientation_deg.to_radians(), r.offset_m))
                            .collect()
                    }),
                    los: e.los,
                })
                .collect(),
        }
    }

    pub fn build(&self) -> Result<NetworkScenario, ConfigError> {
        Ok(build_scenario(
            &self.scenario_spec(),
            &self.generator_options(),
            self.noise_model(),
            self.seed,
        )?)
    }

    /// This config with every sampled reflector written out.
    pub fn resolved(&self, scenario: &NetworkScenario) -> Self {
        let mut out = self.clone();
        out.edges = scenario
            .links
            .iter()
            .map(|l| EdgeEntry {
                i: l.i,
                j: l.j,
                reflectors: Some(
                    l.reflectors
                        .iter()
                        .map(|r| ReflectorEntry {
                            orientation_deg: r.orientation.to_degrees(),
                            offset_m: r.offset,
                        })
                        .collect(),
                ),
                los: l.los,
            })
            .collect();
        out
    }
}
