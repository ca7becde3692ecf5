//! Experiment configuration.
//!
//! ```json
//! {
//!   "problem": "robin",
//!   "grid": {"table_intervals": 8},
//!   "tolerances": {"agreement": 1e-5},
//!   "methods": ["neumann", "stepper"],
//!   "p_list": [1, 1.5, 2],
//!   "seed": 7
//! }
//! ```
//!
//! `problem` is a fixture id or a form object with a `kind`; every other key
//! is optional.

use std::path::{Path, PathBuf};

use evolab::evolution::Method;
use evolab::problem::{parse_value, FormSpec, ProblemRef};
use evolab::regularity::schatten_norm;
use evolab::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Bounds,
    Evolve,
    Verify,
    Robin,
}

impl Stage {
    pub fn file(self) -> &'static str {
        match self {
            Stage::Bounds => "bounds.json",
            Stage::Evolve => "evolve.json",
            Stage::Verify => "regularity.json",
            Stage::Robin => "pipeline.json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Time samples for bounds and the modulus.
    pub samples: usize,
    pub dini_levels: usize,
    /// Intervals of the uniform table grid.
    pub table_intervals: usize,
    pub stepper_steps: usize,
    pub neumann_steps: usize,
    /// Finest scan lag is `T / 2^scan_depth`.
    pub scan_depth: u32,
    pub scan_levels: usize,
    pub min_separation: f64,
    /// Sample-count multiplier of the resolvent suite.
    pub suite_refine: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            samples: 33,
            dini_levels: 5,
            table_intervals: 8,
            stepper_steps: 256,
            neumann_steps: 64,
            scan_depth: 14,
            scan_levels: 5,
            min_separation: 0.1,
            suite_refine: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub agreement: f64,
    pub law: f64,
    pub contractivity: f64,
    pub continuity: f64,
    pub neumann: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            agreement: 1e-5,
            law: 1e-5,
            contractivity: 1e-10,
            continuity: 1e-3,
            neumann: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Body {
    grid: GridConfig,
    tolerances: Tolerances,
    methods: Vec<Method>,
    p_list: Vec<f64>,
    /// Mesh sizes of the trace-norm study; absent to use the command default.
    gibbs_dims: Option<Vec<usize>>,
    gibbs_separation: f64,
    suites: bool,
    /// Outputs `report` requires.
    stages: Vec<Stage>,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for Body {
    fn default() -> Self {
        Body {
            grid: GridConfig::default(),
            tolerances: Tolerances::default(),
            methods: vec![Method::Neumann, Method::Stepper],
            p_list: vec![1.0, 1.5, 2.0],
            gibbs_dims: None,
            gibbs_separation: 0.1,
            suites: true,
            stages: Vec::new(),
            seed: 7,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub problem: ProblemRef,
    pub grid: GridConfig,
    pub tolerances: Tolerances,
    pub methods: Vec<Method>,
    pub p_list: Vec<f64>,
    pub gibbs_dims: Option<Vec<usize>>,
    pub gibbs_separation: f64,
    pub suites: bool,
    pub stages: Vec<Stage>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Invalid(format!("config is not valid JSON: {e}")))?;
        let serde_json::Value::Object(mut map) = value else {
            return Err(Error::Invalid("config must be a JSON object".into()));
        };
        let problem = map
            .remove("problem")
            .ok_or_else(|| Error::Invalid("at `problem`: missing field".into()))?;
        let problem = ProblemRef::from_value(problem, "problem")?;
        let body: Body = parse_value(serde_json::Value::Object(map), "")?;
        let cfg = ExperimentConfig {
            problem,
            grid: body.grid,
            tolerances: body.tolerances,
            methods: body.methods,
            p_list: body.p_list,
            gibbs_dims: body.gibbs_dims,
            gibbs_separation: body.gibbs_separation,
            suites: body.suites,
            stages: body.stages,
            seed: body.seed,
            out: body.out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    fn validate(&self) -> Result<()> {
        for &p in &self.p_list {
            schatten_norm(&[], p)?;
        }
        if !self.p_list.contains(&1.0) {
            return Err(Error::Invalid("at `p_list`: must include 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Invalid("at `methods`: need at least one method".into()));
        }
        let g = &self.grid;
        if g.table_intervals < 2 || g.samples < 3 || g.stepper_steps == 0 || g.neumann_steps == 0 {
            return Err(Error::Invalid("at `grid`: sizes too small".into()));
        }
        Ok(())
    }

    pub fn form_spec(&self) -> Result<FormSpec> {
        self.problem.resolve()
    }
}
