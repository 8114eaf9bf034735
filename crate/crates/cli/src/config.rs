//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use homog_core::cell_problem::CloudMode;
use homog_core::coarse_grain::Reference;
use homog_core::percolation::{Direction, GridStrategy};
use homog_core::{Point, Window};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; `HOMOG_THREADS` caps it further.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    XiSweep(XiSweep),
    Isotropy(XiSweep),
    LatticeOracle(LatticeOracle),
    PercolationSweep(PercolationSweep),
    GridSuccess(GridSuccess),
    Convergence(Convergence),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::XiSweep(_) => "xi-sweep",
            Experiment::Isotropy(_) => "isotropy",
            Experiment::LatticeOracle(_) => "lattice-oracle",
            Experiment::PercolationSweep(_) => "percolation-sweep",
            Experiment::GridSuccess(_) => "grid-success",
            Experiment::Convergence(_) => "convergence",
        }
    }
}

/// Either a count `n` (seeds `0..n`) or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Count(u64),
    List(Vec<u64>),
}

impl Seeds {
    pub fn to_vec(&self) -> Vec<u64> {
        match self {
            Seeds::Count(n) => (0..*n).collect(),
            Seeds::List(v) => v.clone(),
        }
    }
}

fn default_tol() -> f64 {
    1e-10
}

fn default_cloud() -> CloudMode {
    CloudMode::Poisson { gamma: 1.0 }
}

fn default_directions() -> Vec<[f64; 2]> {
    let d = 1.0 / 2f64.sqrt();
    vec![[1.0, 0.0], [0.0, 1.0], [d, d]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XiSweep {
    /// Side lengths `T` of the centered squares.
    pub sizes: Vec<f64>,
    pub seeds: Seeds,
    #[serde(default = "default_directions")]
    pub directions: Vec<[f64; 2]>,
    pub lambda: f64,
    #[serde(default = "default_cloud")]
    pub cloud: CloudMode,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeOracle {
    pub sizes: Vec<f64>,
    pub spacing: f64,
    pub lambda: f64,
    #[serde(default = "default_directions")]
    pub directions: Vec<[f64; 2]>,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PercolationSweep {
    pub nx: usize,
    pub ny: usize,
    pub probabilities: Vec<f64>,
    pub seeds: Seeds,
    #[serde(default = "default_horizontal")]
    pub direction: Direction,
    /// Also compute the max-flow number of vertex-disjoint crossings.
    #[serde(default = "default_true")]
    pub max_flow: bool,
}

fn default_horizontal() -> Direction {
    Direction::Horizontal
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularityPoint {
    pub alpha: f64,
    pub lambda: f64,
}

fn default_big_lambda() -> u32 {
    12
}

fn default_strategy() -> GridStrategy {
    GridStrategy::RegularCells
}

fn default_padding() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSuccess {
    pub eps: f64,
    pub t: f64,
    pub points: Vec<RegularityPoint>,
    #[serde(default = "default_big_lambda")]
    pub big_lambda: u32,
    pub upsilon: f64,
    #[serde(default = "default_strategy")]
    pub strategy: GridStrategy,
    pub seeds: Seeds,
    /// Sampling padding around the working square, in units of `lambda * eps`.
    #[serde(default = "default_padding")]
    pub padding: f64,
}

fn default_region() -> Window {
    Window::unit()
}

fn default_domain() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Convergence {
    pub eps: Vec<f64>,
    pub t: Vec<f64>,
    pub reference: Reference,
    pub alpha: f64,
    pub lambda: f64,
    #[serde(default = "default_big_lambda")]
    pub big_lambda: u32,
    pub upsilon: f64,
    #[serde(default = "default_strategy")]
    pub strategy: GridStrategy,
    pub seeds: Seeds,
    #[serde(default = "default_region")]
    pub region: Window,
    /// Side of the centered sampling square (before padding).
    #[serde(default = "default_domain")]
    pub domain: f64,
}

pub fn directions(raw: &[[f64; 2]]) -> Vec<Point> {
    raw.iter().map(|d| Point::new(d[0], d[1])).collect()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Checks value ranges that serde cannot express, naming the field.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, why: &str| Err(CliError::Config(format!("field `{field}`: {why}")));
        if self.threads == Some(0) {
            return bad("threads", "must be at least 1");
        }
        match &self.experiment {
            Experiment::XiSweep(p) | Experiment::Isotropy(p) => {
                if p.sizes.is_empty() {
                    return bad("sizes", "empty");
                }
                if p.directions.is_empty() {
                    return bad("directions", "empty");
                }
                if !(p.lambda > 0.0) {
                    return bad("lambda", "must be positive");
                }
                if !(p.tol > 0.0) {
                    return bad("tol", "must be positive");
                }
            }
            Experiment::LatticeOracle(p) => {
                if p.sizes.is_empty() {
                    return bad("sizes", "empty");
                }
                if !(p.spacing > 0.0) {
                    return bad("spacing", "must be positive");
                }
                if !(p.lambda > 0.0) {
                    return bad("lambda", "must be positive");
                }
            }
            Experiment::PercolationSweep(p) => {
                if p.nx == 0 || p.ny == 0 {
                    return bad("nx", "block lattice must be non-empty");
                }
                if p.probabilities.iter().any(|q| !(0.0..=1.0).contains(q)) {
                    return bad("probabilities", "must lie in [0, 1]");
                }
            }
            Experiment::GridSuccess(p) => {
                if p.points.is_empty() {
                    return bad("points", "empty");
                }
                if !(p.eps > 0.0 && p.t > 0.0) {
                    return bad("eps", "eps and t must be positive");
                }
            }
            Experiment::Convergence(p) => {
                if p.eps.is_empty() || p.t.is_empty() {
                    return bad("eps", "eps and t lists must be non-empty");
                }
                if p.eps.iter().chain(&p.t).any(|v| !(*v > 0.0)) {
                    return bad("eps", "eps and t must be positive");
                }
                if !(p.domain > 0.0) {
                    return bad("domain", "must be positive");
                }
            }
        }
        Ok(())
    }
}
