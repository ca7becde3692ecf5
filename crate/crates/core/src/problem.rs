//! Form definitions loaded from JSON, and a few built-in fixtures.
//!
//! ```json
//! {"kind": "scalar", "coeffs": [1.0, 1.0], "T": 1.0}
//! {"kind": "matrix-tabulated", "dim": 2, "gram_H": [..], "gram_V": [..],
//!  "times": [0.0, 1.0], "matrices": [[..], [..]], "T": 1.0}
//! {"kind": "robin1d", "L": 1.0, "n": 64, "beta": {"b0": 1.0, "c": 1.0, "alpha": 0.5},
//!  "r0": 0.3, "T": 1.0}
//! ```
//!
//! Tabulated samplers interpolate linearly between neighbouring times and hold
//! the end matrices outside the table.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::form::NonAutonomousForm;
use crate::linalg;
use crate::robin::{robin_form, RobinProblem};
use crate::spaces::{real_entries, Entry, GelfandTriple};

fn one() -> f64 {
    1.0
}

/// `c t^alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderTerm {
    pub c: f64,
    pub alpha: f64,
}

/// `a(t) = Σ coeffs[k] t^k + c t^alpha` on `H = V = R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarSpec {
    pub coeffs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holder: Option<HolderTerm>,
    #[serde(rename = "T", default = "one")]
    pub horizon: f64,
    #[serde(default)]
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabulatedSpec {
    pub dim: usize,
    #[serde(rename = "gram_H")]
    pub gram_h: Vec<Entry>,
    #[serde(rename = "gram_V")]
    pub gram_v: Vec<Entry>,
    pub times: Vec<f64>,
    /// One row-major `dim × dim` matrix per time.
    pub matrices: Vec<Vec<Entry>>,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default)]
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FormSpec {
    Scalar(ScalarSpec),
    MatrixTabulated(TabulatedSpec),
    Robin1d(RobinProblem),
}

/// A spec, or the id of a built-in fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemRef {
    Fixture(String),
    Spec(FormSpec),
}

pub const FIXTURE_IDS: [&str; 7] = ["a1", "a4", "lin", "lin-half", "holder", "nonsym2", "robin"];

/// Built-in forms:
/// `a1`: a ≡ 1; `a4`: a ≡ 4; `lin`: 1 + t; `lin-half`: 1 + t/2;
/// `holder`: 1 + t^{1/2} with γ = 0.8; `nonsym2`: the constant `[[2, 1], [0, 3]]`
/// on Euclidean Grams; `robin`: Robin with n = 32, β = 1 + t^{1/2}, r0 = 0.3.
pub fn fixture(id: &str) -> Result<FormSpec> {
    let scalar = |coeffs: Vec<f64>, holder: Option<HolderTerm>, gamma: f64| {
        FormSpec::Scalar(ScalarSpec {
            coeffs,
            holder,
            horizon: 1.0,
            gamma,
        })
    };
    let re = |v: &[f64]| v.iter().copied().map(Entry::Real).collect::<Vec<_>>();
    Ok(match id {
        "a1" => scalar(vec![1.0], None, 0.0),
        "a4" => scalar(vec![4.0], None, 0.0),
        "lin" => scalar(vec![1.0, 1.0], None, 0.0),
        "lin-half" => scalar(vec![1.0, 0.5], None, 0.0),
        "holder" => scalar(vec![1.0], Some(HolderTerm { c: 1.0, alpha: 0.5 }), 0.8),
        "nonsym2" => FormSpec::MatrixTabulated(TabulatedSpec {
            dim: 2,
            gram_h: re(&[1.0, 0.0, 0.0, 1.0]),
            gram_v: re(&[1.0, 0.0, 0.0, 1.0]),
            times: vec![0.0],
            matrices: vec![re(&[2.0, 1.0, 0.0, 3.0])],
            horizon: 1.0,
            gamma: 0.0,
        }),
        "robin" => FormSpec::Robin1d(RobinProblem::standard(32, 0.5, 0.3)),
        other => {
            return Err(Error::Invalid(format!(
                "unknown fixture `{other}` (known: {})",
                FIXTURE_IDS.join(", ")
            )))
        }
    })
}

fn keyed_error(prefix: &str, e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = e.path().to_string();
    let inner = e.into_inner();
    match (prefix.is_empty(), path.as_str()) {
        (true, ".") => Error::Json(inner),
        (false, ".") => Error::Invalid(format!("at `{prefix}`: {inner}")),
        (true, p) => Error::Invalid(format!("at `{p}`: {inner}")),
        (false, p) => Error::Invalid(format!("at `{prefix}.{p}`: {inner}")),
    }
}

/// Deserializes `T`, naming the offending key on failure.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| keyed_error("", e))
}

/// As [`parse_json`] for an already parsed value found at `prefix`.
pub fn parse_value<T: serde::de::DeserializeOwned>(value: serde_json::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| keyed_error(prefix, e))
}

impl ProblemRef {
    pub fn resolve(&self) -> Result<FormSpec> {
        match self {
            ProblemRef::Fixture(id) => fixture(id),
            ProblemRef::Spec(s) => Ok(s.clone()),
        }
    }

    /// Reads a fixture id or a spec object, with keyed errors.
    pub fn from_value(value: serde_json::Value, prefix: &str) -> Result<Self> {
        match value {
            serde_json::Value::String(id) => Ok(ProblemRef::Fixture(id)),
            v => FormSpec::from_value(v, prefix).map(ProblemRef::Spec),
        }
    }
}

impl FormSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::from_value(parse_json(text)?, "")
    }

    pub fn from_value(value: serde_json::Value, prefix: &str) -> Result<Self> {
        let at = |key: &str| if prefix.is_empty() { key.to_string() } else { format!("{prefix}.{key}") };
        let serde_json::Value::Object(mut map) = value else {
            return Err(Error::Invalid(format!("at `{}`: expected a form object", at("."))));
        };
        let kind = match map.remove("kind") {
            Some(serde_json::Value::String(k)) => k,
            Some(_) => return Err(Error::Invalid(format!("at `{}`: expected a string", at("kind")))),
            None => return Err(Error::Invalid(format!("at `{}`: missing form kind", at("kind")))),
        };
        let body = serde_json::Value::Object(map);
        match kind.as_str() {
            "scalar" => parse_value(body, prefix).map(FormSpec::Scalar),
            "matrix-tabulated" => parse_value(body, prefix).map(FormSpec::MatrixTabulated),
            "robin1d" => parse_value(body, prefix).map(FormSpec::Robin1d),
            other => Err(Error::Invalid(format!(
                "at `{}`: unknown form kind `{other}` (scalar, matrix-tabulated, robin1d)",
                at("kind")
            ))),
        }
    }

    pub fn robin(&self) -> Option<&RobinProblem> {
        match self {
            FormSpec::Robin1d(p) => Some(p),
            _ => None,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            FormSpec::Scalar(s) => s.horizon,
            FormSpec::MatrixTabulated(s) => s.horizon,
            FormSpec::Robin1d(p) => p.horizon,
        }
    }

    pub fn build(&self) -> Result<NonAutonomousForm> {
        match self {
            FormSpec::Scalar(s) => build_scalar(s),
            FormSpec::MatrixTabulated(s) => build_tabulated(s),
            FormSpec::Robin1d(p) => {
                p.validate()?;
                robin_form(p)
            }
        }
    }
}

fn build_scalar(s: &ScalarSpec) -> Result<NonAutonomousForm> {
    if s.coeffs.is_empty() || s.coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Invalid("scalar form needs finite coeffs".into()));
    }
    if let Some(h) = s.holder {
        if !(h.c.is_finite() && h.alpha > 0.0 && h.alpha <= 1.0) {
            return Err(Error::Invalid(format!(
                "holder term needs finite c and alpha in (0, 1], got {h:?}"
            )));
        }
    }
    let one = DMatrix::from_element(1, 1, 1.0);
    let triple = Arc::new(GelfandTriple::new(one.clone(), one)?);
    let constant = s.coeffs[1..].iter().all(|&c| c == 0.0) && s.holder.is_none_or(|h| h.c == 0.0);
    if constant {
        return NonAutonomousForm::autonomous(triple, s.horizon, s.gamma, DMatrix::from_element(1, 1, s.coeffs[0]));
    }
    let (coeffs, holder) = (s.coeffs.clone(), s.holder);
    let form = NonAutonomousForm::new(triple, s.horizon, s.gamma, move |t| {
        let mut a = coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c);
        if let Some(h) = holder {
            a += h.c * t.max(0.0).powf(h.alpha);
        }
        DMatrix::from_element(1, 1, a)
    })?;
    Ok(match holder {
        Some(h) if h.c != 0.0 && h.alpha < 1.0 => form.with_singular_times(vec![0.0]),
        _ => form,
    })
}

fn build_tabulated(s: &TabulatedSpec) -> Result<NonAutonomousForm> {
    let n = s.dim;
    let gram = |e: &[Entry], name: &str| -> Result<DMatrix<f64>> {
        linalg::from_row_major(n, n, &real_entries(e, name)?)
    };
    let triple = Arc::new(GelfandTriple::new(gram(&s.gram_h, "gram_H")?, gram(&s.gram_v, "gram_V")?)?);
    if s.times.is_empty() || s.times.len() != s.matrices.len() {
        return Err(Error::Invalid(format!(
            "matrix-tabulated form needs one matrix per time ({} times, {} matrices)",
            s.times.len(),
            s.matrices.len()
        )));
    }
    if s.times.windows(2).any(|w| !(w[1] > w[0])) || s.times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Invalid("times must be finite and strictly increasing".into()));
    }
    let mats = s
        .matrices
        .iter()
        .enumerate()
        .map(|(k, m)| gram(m, &format!("matrices[{k}]")))
        .collect::<Result<Vec<_>>>()?;
    if mats.windows(2).all(|w| w[0] == w[1]) {
        return NonAutonomousForm::autonomous(triple, s.horizon, s.gamma, mats[0].clone());
    }
    let times = s.times.clone();
    NonAutonomousForm::new(triple, s.horizon, s.gamma, move |t| interpolate(&times, &mats, t))
}

fn interpolate(times: &[f64], mats: &[DMatrix<f64>], t: f64) -> DMatrix<f64> {
    let k = times.partition_point(|&x| x <= t);
    if k == 0 {
        return mats[0].clone();
    }
    if k == times.len() {
        return mats[k - 1].clone();
    }
    let w = (t - times[k - 1]) / (times[k] - times[k - 1]);
    &mats[k - 1] * (1.0 - w) + &mats[k] * w
}
